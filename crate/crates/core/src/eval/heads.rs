//! Per-head analysis of a trained multi-head model.

use serde::Serialize;

use super::c_index;
use crate::error::{Error, Result};
use crate::model::{head_logits, ModelParams};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadwiseReport {
    /// c-index when only head `i` (0-based) is kept.
    pub per_head: Vec<f64>,
    pub all_heads: f64,
}

/// Risk per bag for every single-head masking, plus the unmasked risk.
/// Row `i < h` keeps head `i`; row `h` keeps all heads.
pub fn headwise_risks(model: &ModelParams, bags: &[DenseMatrix]) -> Result<Vec<Vec<f64>>> {
    let h = model.heads;
    let dh = model.head_dim();
    let mut out = vec![Vec::with_capacity(bags.len()); h + 1];
    for x in bags {
        let (fwd, _) = model.forward_with_mask(x, None)?;
        let w = &model.risk_head.weights;
        let b = model.risk_head.bias;
        let mut total = b;
        for (head, row) in out.iter_mut().take(h).enumerate() {
            let cols = head * dh..(head + 1) * dh;
            let part: f64 = w[cols.clone()]
                .iter()
                .zip(&fwd.pooled[cols])
                .map(|(a, v)| a * v)
                .sum();
            row.push(b + part);
            total += part;
        }
        out[h].push(fwd.risk);
        debug_assert!((total - fwd.risk).abs() <= 1e-9 * (1.0 + total.abs()));
    }
    Ok(out)
}

/// c-index of each single head and of the full model. `bags` are the
/// evaluation samples aligned with `times` and `events`.
pub fn headwise_cindex(
    model: &ModelParams,
    bags: &[DenseMatrix],
    times: &[f64],
    events: &[bool],
) -> Result<HeadwiseReport> {
    let risks = headwise_risks(model, bags)?;
    let mut per_head = Vec::with_capacity(model.heads);
    for r in &risks[..model.heads] {
        per_head.push(c_index(r, times, events)?);
    }
    Ok(HeadwiseReport {
        per_head,
        all_heads: c_index(&risks[model.heads], times, events)?,
    })
}

/// Two h x h Pearson correlation matrices over all pooled patches. `None`
/// marks a pair where one head's values have zero variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadCorrelations {
    pub attention: Vec<Vec<Option<f64>>>,
    pub patch_risk: Vec<Vec<Option<f64>>>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn matrix(series: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    let h = series.len();
    let mut out = vec![vec![None; h]; h];
    for i in 0..h {
        for j in i..h {
            let r = if i == j {
                pearson(&series[i], &series[i]).map(|_| 1.0)
            } else {
                pearson(&series[i], &series[j])
            };
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    out
}

/// Correlates, across heads, each patch's attention logit and its patch
/// risk (the head's chunk of the patch vector dotted with the matching
/// risk-head weights, no bias). Logits do not depend on which other patches
/// share the softmax, so they equal their average over any resampling.
pub fn head_correlations(model: &ModelParams, bags: &[DenseMatrix]) -> Result<HeadCorrelations> {
    let total: usize = bags.iter().map(DenseMatrix::rows).sum();
    if total < 2 {
        return Err(Error::Domain("head correlations need at least 2 patches".into()));
    }
    let h = model.heads;
    let dh = model.head_dim();
    let mut logits = vec![Vec::with_capacity(total); h];
    let mut risks = vec![Vec::with_capacity(total); h];
    for x in bags {
        let l = head_logits(model, x)?;
        for j in 0..x.rows() {
            let row = x.row(j);
            for head in 0..h {
                logits[head].push(l.get(head, j));
                let cols = head * dh..(head + 1) * dh;
                risks[head].push(
                    model.risk_head.weights[cols.clone()]
                        .iter()
                        .zip(&row[cols])
                        .map(|(a, b)| a * b)
                        .sum(),
                );
            }
        }
    }
    Ok(HeadCorrelations {
        attention: matrix(&logits),
        patch_risk: matrix(&risks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::RngStream;

    fn bags(rng: &mut RngStream, count: usize, n: usize, d: usize) -> Vec<DenseMatrix> {
        (0..count)
            .map(|_| DenseMatrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn single_head_matches_all_heads() {
        let mut rng = RngStream::new(1, "test");
        let model = init_params(4, 1, &mut rng).unwrap();
        let xs = bags(&mut rng, 12, 5, 4);
        let times: Vec<f64> = (1..=12).map(f64::from).collect();
        let report = headwise_cindex(&model, &xs, &times, &[true; 12]).unwrap();
        assert_eq!(report.per_head, vec![report.all_heads]);
    }

    #[test]
    fn silent_head_scores_one_half() {
        let mut rng = RngStream::new(2, "test");
        let mut model = init_params(4, 2, &mut rng).unwrap();
        model.risk_head.weights[2] = 0.0;
        model.risk_head.weights[3] = 0.0;
        let xs = bags(&mut rng, 10, 3, 4);
        let times: Vec<f64> = (1..=10).map(f64::from).collect();
        let report = headwise_cindex(&model, &xs, &times, &[true; 10]).unwrap();
        assert_eq!(report.per_head[1], 0.5);
    }

    #[test]
    fn duplicated_head_correlates_perfectly() {
        let mut rng = RngStream::new(3, "test");
        let mut model = init_params(4, 2, &mut rng).unwrap();
        // Head 2 reads columns 2..4 of X and of the keys; copy head 1's
        // parameters there and make X's two chunks equal.
        for r in 0..2 {
            for c in 0..2 {
                let v = model.key_proj.get(r, c);
                model.key_proj.set(r + 2, c + 2, v);
                model.key_proj.set(r, c + 2, 0.0);
                model.key_proj.set(r + 2, c, 0.0);
            }
        }
        for c in 0..2 {
            model.query[c + 2] = model.query[c];
            model.risk_head.weights[c + 2] = model.risk_head.weights[c];
        }
        let xs: Vec<DenseMatrix> = bags(&mut rng, 3, 6, 2)
            .into_iter()
            .map(|b| {
                let rows: Vec<Vec<f64>> = (0..b.rows())
                    .map(|j| [b.row(j), b.row(j)].concat())
                    .collect();
                DenseMatrix::from_rows(&rows).unwrap()
            })
            .collect();
        let c = head_correlations(&model, &xs).unwrap();
        assert_eq!(c.attention[0][0], Some(1.0));
        assert!((c.attention[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert!((c.patch_risk[1][0].unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_fixture_and_missing_marker() {
        // Deviations (-1,0,1) and (-1,1,0): r = 1 / sqrt(2 * 2).
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
        let mut rng = RngStream::new(4, "test");
        let mut model = init_params(4, 2, &mut rng).unwrap();
        model.risk_head.weights[0] = 0.0;
        model.risk_head.weights[1] = 0.0;
        let c = head_correlations(&model, &bags(&mut rng, 2, 4, 4)).unwrap();
        assert_eq!(c.patch_risk[0][1], None);
        assert_eq!(c.patch_risk[0][0], None);
        assert_eq!(c.patch_risk[1][1], Some(1.0));
    }
}
