use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CoxLoss {
    pub loss: f64,
    /// `d loss / d risk`, one entry per patient.
    pub grad: Vec<f64>,
}

/// Negative Cox partial log-likelihood averaged over observed events.
///
/// The risk set of patient i is every j with `t_j >= t_i` (Breslow ties).
/// Runs in O(N log N): patients are swept in order of decreasing time while
/// the risk-set sum accumulates.
pub fn cox_loss(risks: &[f64], times: &[f64], events: &[bool]) -> Result<CoxLoss> {
    let n = risks.len();
    if n == 0 || times.len() != n || events.len() != n {
        return Err(Error::Dimension(format!(
            "cox loss needs equal non-empty inputs, got {} / {} / {}",
            n,
            times.len(),
            events.len()
        )));
    }
    if risks.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite risk or time".into()));
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(Error::NoEvents);
    }

    let shift = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = risks.iter().map(|r| (r - shift).exp()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    // log of the risk-set sum for every patient, evaluated at its own time.
    let mut log_risk_set = vec![0.0; n];
    let mut acc = 0.0;
    let mut start = 0;
    while start < n {
        let t = times[order[start]];
        let mut end = start;
        while end < n && times[order[end]] == t {
            acc += scaled[order[end]];
            end += 1;
        }
        let lrs = shift + acc.ln();
        for &i in &order[start..end] {
            log_risk_set[i] = lrs;
        }
        start = end;
    }

    let inv_events = 1.0 / n_events as f64;
    let mut loss = 0.0;
    for i in 0..n {
        if events[i] {
            loss -= risks[i] - log_risk_set[i];
        }
    }
    loss *= inv_events;

    // grad_k = -(1/E) [delta_k - exp(r_k) * sum_{i event, t_i <= t_k} 1 / R_i]
    let mut grad = vec![0.0; n];
    let mut inv_sum = 0.0;
    let mut start = n;
    while start > 0 {
        let t = times[order[start - 1]];
        let mut end = start;
        while end > 0 && times[order[end - 1]] == t {
            let i = order[end - 1];
            if events[i] {
                inv_sum += (-(log_risk_set[i] - shift)).exp();
            }
            end -= 1;
        }
        for &k in &order[end..start] {
            let expected = scaled[k] * inv_sum;
            let observed = if events[k] { 1.0 } else { 0.0 };
            grad[k] = -(observed - expected) * inv_events;
        }
        start = end;
    }
    Ok(CoxLoss { loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::central_difference_grad;
    use proptest::prelude::*;

    /// Direct evaluation of the partial likelihood, O(N^2).
    fn brute_loss(risks: &[f64], times: &[f64], events: &[bool]) -> f64 {
        let n_events = events.iter().filter(|&&e| e).count() as f64;
        let mut total = 0.0;
        for i in 0..risks.len() {
            if !events[i] {
                continue;
            }
            let s: f64 = (0..risks.len())
                .filter(|&j| times[j] >= times[i])
                .map(|j| risks[j].exp())
                .sum();
            total += risks[i] - s.ln();
        }
        -total / n_events
    }

    #[test]
    fn singleton_event_has_zero_loss() {
        for r in [-3.0, 0.0, 12.5] {
            let out = cox_loss(&[r], &[1.0], &[true]).unwrap();
            assert_eq!(out.loss, 0.0);
            assert_eq!(out.grad, vec![0.0]);
        }
    }

    #[test]
    fn two_events_zero_risk() {
        let out = cox_loss(&[0.0, 0.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
        assert!((out.loss - 0.346_573_6).abs() < 1e-7);
    }

    #[test]
    fn no_events_is_signalled() {
        assert!(matches!(
            cox_loss(&[0.0, 1.0], &[1.0, 2.0], &[false, false]),
            Err(Error::NoEvents)
        ));
        assert!(matches!(
            cox_loss(&[0.0], &[1.0, 2.0], &[true, true]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn ties_share_the_risk_set() {
        let risks = [0.3, -0.2, 1.1, 0.0];
        let times = [2.0, 2.0, 1.0, 2.0];
        let events = [true, true, false, true];
        let out = cox_loss(&risks, &times, &events).unwrap();
        assert!((out.loss - brute_loss(&risks, &times, &events)).abs() < 1e-14);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
        (1usize..30).prop_flat_map(|n| {
            (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(1u32..8, n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(r, t, mut e)| {
                    e[0] = true;
                    (r, t.into_iter().map(f64::from).collect(), e)
                })
        })
    }

    proptest! {
        #[test]
        fn matches_direct_formula((risks, times, events) in instance()) {
            let out = cox_loss(&risks, &times, &events).unwrap();
            prop_assert!((out.loss - brute_loss(&risks, &times, &events)).abs() < 1e-12);
        }

        #[test]
        fn shift_invariance((risks, times, events) in instance(), c in -50.0f64..50.0) {
            let a = cox_loss(&risks, &times, &events).unwrap();
            let shifted: Vec<f64> = risks.iter().map(|r| r + c).collect();
            let b = cox_loss(&shifted, &times, &events).unwrap();
            prop_assert!((a.loss - b.loss).abs() <= 1e-9);
            prop_assert!(a.grad.iter().sum::<f64>().abs() <= 1e-9);
        }

        #[test]
        fn gradient_matches_finite_differences((risks, times, events) in instance()) {
            let out = cox_loss(&risks, &times, &events).unwrap();
            let fd = central_difference_grad(|r| brute_loss(r, &times, &events), &risks, 1e-5).unwrap();
            for (a, b) in out.grad.iter().zip(&fd) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
