//! Harrell's concordance index and the IPCW cumulative/dynamic AUC.

use super::survival::km_estimator;
use crate::error::{Error, Result};

fn check_lengths(risks: &[f64], times: &[f64], events: &[bool]) -> Result<()> {
    if risks.len() != times.len() || risks.len() != events.len() {
        return Err(Error::Dimension(format!(
            "{} risks, {} times, {} events",
            risks.len(),
            times.len(),
            events.len()
        )));
    }
    if let Some(i) = risks.iter().position(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("risk score {i} is not finite")));
    }
    Ok(())
}

/// Fenwick tree over risk ranks.
struct Counts(Vec<u64>);

impl Counts {
    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Entries with rank strictly below `rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut total = 0;
        while i > 0 {
            total += self.0[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

/// Pair counts behind the concordance index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConcordanceCounts {
    pub concordant: u64,
    pub tied_risk: u64,
    pub comparable: u64,
}

impl ConcordanceCounts {
    pub fn value(&self) -> f64 {
        (2 * self.concordant + self.tied_risk) as f64 / (2 * self.comparable) as f64
    }
}

/// Counts comparable pairs (`t_i < t_j`, `δ_i = 1`) and how many of them
/// are concordant (`risk_i > risk_j`) or tied in risk. Runs in
/// `O(N log N)`.
pub fn concordance_counts(
    risks: &[f64],
    times: &[f64],
    events: &[bool],
) -> Result<ConcordanceCounts> {
    check_lengths(risks, times, events)?;
    let n = risks.len();
    let mut by_risk: Vec<usize> = (0..n).collect();
    by_risk.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
    let mut rank = vec![0; n];
    for (pos, &i) in by_risk.iter().enumerate() {
        rank[i] = if pos > 0 && risks[i] == risks[by_risk[pos - 1]] {
            rank[by_risk[pos - 1]]
        } else {
            pos
        };
    }

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut seen = Counts(vec![0; n + 1]);
    let mut inserted = 0u64;
    let mut out = ConcordanceCounts::default();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && times[by_time[end]] == times[by_time[start]] {
            end += 1;
        }
        for &i in &by_time[start..end] {
            if events[i] {
                let below = seen.below(rank[i]);
                let up_to = seen.below(rank[i] + 1);
                out.concordant += below;
                out.tied_risk += up_to - below;
                out.comparable += inserted;
            }
        }
        for &i in &by_time[start..end] {
            seen.add(rank[i]);
            inserted += 1;
        }
        start = end;
    }
    Ok(out)
}

/// Harrell's c-index with tied risks counted as one half.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let counts = concordance_counts(risks, times, events)?;
    if counts.comparable == 0 {
        return Err(Error::Domain("no comparable pairs".into()));
    }
    Ok(counts.value())
}

/// Cumulative/dynamic AUC at horizon `t` with inverse probability of
/// censoring weights. Cases (`t_i <= t`, `δ_i = 1`) are weighted by
/// `1 / G(t_i-)`, controls (`t_j > t`) by `1 / G(t)`, where `G` is the
/// Kaplan-Meier estimate of the censoring distribution.
pub fn ipcw_auc(risks: &[f64], times: &[f64], events: &[bool], t: f64) -> Result<f64> {
    check_lengths(risks, times, events)?;
    let cases: Vec<usize> = (0..risks.len())
        .filter(|&i| events[i] && times[i] <= t)
        .collect();
    let mut controls: Vec<f64> = (0..risks.len())
        .filter(|&j| times[j] > t)
        .map(|j| risks[j])
        .collect();
    if cases.is_empty() || controls.is_empty() {
        return Err(Error::Domain(format!(
            "AUC at t = {t}: {} cases, {} controls",
            cases.len(),
            controls.len()
        )));
    }
    let censored: Vec<bool> = events.iter().map(|e| !e).collect();
    let g = km_estimator(times, &censored)?;
    if g.survival_at(t) <= 0.0 {
        return Err(Error::Numeric(format!(
            "censoring survival is 0 at t = {t}; weights are undefined"
        )));
    }
    controls.sort_by(f64::total_cmp);

    // Every control carries the same weight 1/G(t), so it cancels.
    let mut numerator = 0.0;
    let mut case_weight = 0.0;
    for &i in &cases {
        let gi = g.survival_before(times[i]);
        if gi <= 0.0 {
            return Err(Error::Numeric(format!(
                "censoring survival is 0 just before t = {}",
                times[i]
            )));
        }
        let w = 1.0 / gi;
        let below = controls.partition_point(|&r| r < risks[i]);
        let up_to = controls.partition_point(|&r| r <= risks[i]);
        numerator += w * (below as f64 + 0.5 * (up_to - below) as f64);
        case_weight += w;
    }
    Ok(numerator / (case_weight * controls.len() as f64))
}

/// AUC at horizon `time`, or the reason it could not be evaluated.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AucPoint {
    pub time: f64,
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn auc_curve(risks: &[f64], times: &[f64], events: &[bool], horizons: &[f64]) -> Vec<AucPoint> {
    horizons
        .iter()
        .map(|&h| match ipcw_auc(risks, times, events, h) {
            Ok(auc) => AucPoint {
                time: h,
                auc: Some(auc),
                note: None,
            },
            Err(e) => AucPoint {
                time: h,
                auc: None,
                note: Some(e.to_string()),
            },
        })
        .collect()
}
