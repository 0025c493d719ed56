//! Survival metrics and head-level analysis.
//!
//! All metrics take risk scores (higher means shorter expected survival)
//! aligned with follow-up times and event flags.

mod concordance;
mod heads;
mod survival;

pub use concordance::{auc_curve, c_index, concordance_counts, ipcw_auc, AucPoint, ConcordanceCounts};
pub use heads::{
    head_correlations, headwise_cindex, headwise_risks, pearson, HeadCorrelations, HeadwiseReport,
};
pub use survival::{km_estimator, logrank, tertile_groups, KMCurve, LogRank, SurvivalGroup, Tertile};

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// One patient's risk score.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RiskPrediction {
    pub id: String,
    pub risk: f64,
}

/// Horizons of the annual AUC, in years.
pub const ANNUAL_HORIZONS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

/// Kaplan-Meier curve and size of one tertile group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TertileSummary {
    pub group: Tertile,
    pub patients: usize,
    pub events: usize,
    pub curve: KMCurve,
}

/// Everything the `eval` command reports for one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub patients: usize,
    pub events: usize,
    pub c_index: f64,
    pub auc: Vec<AucPoint>,
    pub tertiles: Vec<TertileSummary>,
    /// `None` when fewer than two tertile groups are populated.
    pub logrank: Option<LogRank>,
}

pub fn evaluate(risks: &[f64], times: &[f64], events: &[bool], horizons: &[f64]) -> Result<EvalReport> {
    let c = c_index(risks, times, events)?;
    let labels = tertile_groups(risks)?;
    let mut tertiles = Vec::new();
    let mut groups = Vec::new();
    for t in Tertile::ALL {
        let mut g = SurvivalGroup::default();
        for (i, &l) in labels.iter().enumerate() {
            if l == t {
                g.times.push(times[i]);
                g.events.push(events[i]);
            }
        }
        if g.times.is_empty() {
            continue;
        }
        tertiles.push(TertileSummary {
            group: t,
            patients: g.times.len(),
            events: g.events.iter().filter(|&&e| e).count(),
            curve: km_estimator(&g.times, &g.events)?,
        });
        groups.push(g);
    }
    let logrank = match logrank(&groups) {
        Ok(r) => Some(r),
        Err(Error::Domain(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        patients: risks.len(),
        events: events.iter().filter(|&&e| e).count(),
        c_index: c,
        auc: auc_curve(risks, times, events, horizons),
        tertiles,
        logrank,
    })
}

impl EvalReport {
    /// `metric,time,value`; an empty value marks a metric that could not be
    /// evaluated.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("metric,time,value\n");
        let _ = writeln!(out, "c_index,,{}", self.c_index);
        for p in &self.auc {
            let v = p.auc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "ipcw_auc,{},{v}", p.time);
        }
        if let Some(lr) = &self.logrank {
            let _ = writeln!(out, "logrank_chi_square,,{}", lr.chi_square);
            let _ = writeln!(out, "logrank_p,,{}", lr.p_value);
        }
        out
    }

    /// `group,time,survival,at_risk` for every tertile curve.
    pub fn km_csv(&self) -> String {
        let mut out = String::from("group,time,survival,at_risk\n");
        for t in &self.tertiles {
            t.curve.to_csv_rows(t.group.as_str(), &mut out);
        }
        out
    }
}

/// `id,risk` lines.
pub fn predictions_csv(preds: &[RiskPrediction]) -> String {
    let mut out = String::from("id,risk\n");
    for p in preds {
        let _ = writeln!(out, "{},{}", p.id, p.risk);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_report() {
        let times: Vec<f64> = (1..=9).map(f64::from).collect();
        let risks: Vec<f64> = times.iter().map(|t| -t).collect();
        let report = evaluate(&risks, &times, &[true; 9], &ANNUAL_HORIZONS).unwrap();
        assert_eq!(report.c_index, 1.0);
        assert_eq!(report.tertiles.len(), 3);
        assert!(report.auc.iter().all(|p| p.auc == Some(1.0)));
        assert!(report.metrics_csv().starts_with("metric,time,value\nc_index,,1\n"));
        assert_eq!(report.km_csv().lines().count(), 1 + 3 * 4);
    }

    #[test]
    fn constant_risk_has_no_logrank() {
        let times: Vec<f64> = (1..=5).map(f64::from).collect();
        let report = evaluate(&[0.0; 5], &times, &[true; 5], &[2.5]).unwrap();
        assert_eq!(report.c_index, 0.5);
        assert!(report.logrank.is_none());
    }
}
