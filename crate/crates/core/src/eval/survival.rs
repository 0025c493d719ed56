//! Kaplan-Meier estimation, the k-group log-rank test and tertile grouping.

use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::numerics::{solve, DenseMatrix};

/// Product-limit survival curve, one step per distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub deaths: Vec<usize>,
    /// Size of the cohort at time 0.
    pub total: usize,
}

impl KMCurve {
    /// `S(t)`, right-continuous.
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }

    /// `S(t-)`, the value just before `t`.
    pub fn survival_before(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }

    /// `time,survival,at_risk` starting with the row at time 0.
    pub fn to_csv_rows(&self, group: &str, out: &mut String) {
        let _ = writeln!(out, "{group},0,1,{}", self.total);
        for k in 0..self.times.len() {
            let _ = writeln!(
                out,
                "{group},{},{},{}",
                self.times[k], self.survival[k], self.at_risk[k]
            );
        }
    }
}

pub fn km_estimator(times: &[f64], events: &[bool]) -> Result<KMCurve> {
    if times.is_empty() {
        return Err(Error::Domain("Kaplan-Meier needs at least one record".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Dimension(format!(
            "{} times, {} events",
            times.len(),
            events.len()
        )));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut curve = KMCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        deaths: Vec::new(),
        total: times.len(),
    };
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut start = 0;
    while start < order.len() {
        let t = times[order[start]];
        let mut end = start;
        let mut deaths = 0;
        while end < order.len() && times[order[end]] == t {
            deaths += usize::from(events[order[end]]);
            end += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.deaths.push(deaths);
        }
        at_risk -= end - start;
        start = end;
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRank {
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
}

/// Survival data for one group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurvivalGroup {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

/// k-group log-rank test with hypergeometric (co)variance; the statistic
/// uses the first `k - 1` groups and is chi-square with `k - 1` degrees of
/// freedom under the null.
pub fn logrank(groups: &[SurvivalGroup]) -> Result<LogRank> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::Domain(format!("log-rank needs at least 2 groups, got {k}")));
    }
    let mut all: Vec<(f64, bool, usize)> = Vec::new();
    for (g, grp) in groups.iter().enumerate() {
        if grp.times.is_empty() {
            return Err(Error::Domain(format!("group {g} is empty")));
        }
        if grp.times.len() != grp.events.len() {
            return Err(Error::Dimension(format!("group {g}: times and events differ in length")));
        }
        all.extend(grp.times.iter().zip(&grp.events).map(|(&t, &e)| (t, e, g)));
    }
    if !all.iter().any(|r| r.1) {
        return Err(Error::Domain("log-rank needs at least one event".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut at_risk: Vec<f64> = groups.iter().map(|g| g.times.len() as f64).collect();
    let mut observed = vec![0.0; k];
    let mut expected = vec![0.0; k];
    let mut cov = DenseMatrix::zeros(k, k);
    let mut start = 0;
    while start < all.len() {
        let t = all[start].0;
        let mut end = start;
        let mut deaths = vec![0.0; k];
        let mut leaving = vec![0.0; k];
        while end < all.len() && all[end].0 == t {
            let g = all[end].2;
            leaving[g] += 1.0;
            if all[end].1 {
                deaths[g] += 1.0;
            }
            end += 1;
        }
        let d: f64 = deaths.iter().sum();
        let n: f64 = at_risk.iter().sum();
        if d > 0.0 {
            for g in 0..k {
                observed[g] += deaths[g];
                expected[g] += d * at_risk[g] / n;
            }
            if n > 1.0 {
                let factor = d * (n - d) / (n - 1.0);
                for g in 0..k {
                    for h in 0..k {
                        let pg = at_risk[g] / n;
                        let delta = if g == h { 1.0 } else { 0.0 };
                        let v = cov.get(g, h) + factor * pg * (delta - at_risk[h] / n);
                        cov.set(g, h, v);
                    }
                }
            }
        }
        for g in 0..k {
            at_risk[g] -= leaving[g];
        }
        start = end;
    }

    let m = k - 1;
    let diff: Vec<f64> = (0..m).map(|g| observed[g] - expected[g]).collect();
    let mut sub = DenseMatrix::zeros(m, m);
    for g in 0..m {
        for h in 0..m {
            sub.set(g, h, cov.get(g, h));
        }
    }
    let chi_square = if diff.iter().all(|&x| x == 0.0) {
        0.0
    } else {
        let x = solve(&sub, &diff)?;
        diff.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().max(0.0)
    };
    let dist = ChiSquared::new(m as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(LogRank {
        chi_square,
        dof: m,
        p_value: dist.sf(chi_square),
        observed,
        expected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tertile {
    Low,
    Medium,
    High,
}

impl Tertile {
    pub const ALL: [Tertile; 3] = [Tertile::Low, Tertile::Medium, Tertile::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Tertile::Low => "low",
            Tertile::Medium => "medium",
            Tertile::High => "high",
        }
    }
}

/// Splits risk scores at the nearest-rank 1/3 and 2/3 percentiles. The
/// thresholds are the sorted scores at ranks `ceil(N/3)` and `ceil(2N/3)`;
/// a score equal to a threshold goes to the lower group.
pub fn tertile_groups(risks: &[f64]) -> Result<Vec<Tertile>> {
    let n = risks.len();
    if n < 3 {
        return Err(Error::Domain(format!("tertiles need at least 3 patients, got {n}")));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric("non-finite risk score".into()));
    }
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = |k: usize| (n * k).div_ceil(3);
    let low = sorted[rank(1) - 1];
    let mid = sorted[rank(2) - 1];
    Ok(risks
        .iter()
        .map(|&r| {
            if r <= low {
                Tertile::Low
            } else if r <= mid {
                Tertile::Medium
            } else {
                Tertile::High
            }
        })
        .collect())
}
