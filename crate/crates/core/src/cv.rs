//! Stratified splitting, nested cross-validation with a dropout-rate grid,
//! and the head-count ablation.
//!
//! Nested CV follows a fixed recipe. Each outer fold holds out a test set.
//! Its remaining patients are split into inner folds. For every grid rate
//! one model is trained per inner fold, using the other inner folds. The
//! rate with the best mean inner-validation c-index wins. Its inner models
//! are reused, not refit, to predict the outer test set, and their raw
//! risks are averaged.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{c_index, RiskPrediction};
use crate::model::ModelKind;
use crate::numerics::RngStream;
use crate::train::{init_model, predict_model, sample_eval_bags, train_kind, TrainConfig};

/// Splits positions `0..events.len()` into `k` folds. Each stratum (events,
/// then non-events) is shuffled and dealt round-robin, with the fold counter
/// carried over from events to non-events so total fold sizes also differ
/// by at most one. Positions within a fold are ascending.
pub fn stratified_kfold(events: &[bool], k: usize, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Domain(format!("k = {k}: need at least 2 folds")));
    }
    if k > events.len() {
        return Err(Error::Domain(format!(
            "k = {k} exceeds the {} patients",
            events.len()
        )));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for stratum in [true, false] {
        let mut members: Vec<usize> = (0..events.len()).filter(|&i| events[i] == stratum).collect();
        rng.shuffle(&mut members);
        for i in members {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Patient ids of one outer fold and of the inner folds that partition its
/// training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterFold {
    pub test: Vec<String>,
    pub inner: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldPlan {
    pub seed: u64,
    pub outer: Vec<OuterFold>,
}

impl FoldPlan {
    /// Stratified outer folds from the "split" stream; the inner folds of
    /// outer fold `f` come from its derived stream `split/outer{f}`.
    pub fn new(data: &Dataset, k_outer: usize, k_inner: usize, seed: u64) -> Result<Self> {
        let events = data.events(&data.all_indices());
        let root = RngStream::new(seed, "split");
        let mut rng = root.clone();
        let outer_folds = stratified_kfold(&events, k_outer, &mut rng)?;
        let ids = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| data.records[i].id.clone()).collect() };
        let mut outer = Vec::with_capacity(k_outer);
        for (f, test) in outer_folds.iter().enumerate() {
            let test_set: HashSet<usize> = test.iter().copied().collect();
            let train: Vec<usize> = (0..data.len()).filter(|i| !test_set.contains(i)).collect();
            let train_events: Vec<bool> = train.iter().map(|&i| events[i]).collect();
            let mut inner_rng = root.derive(&format!("outer{f}"));
            let inner = stratified_kfold(&train_events, k_inner, &mut inner_rng)?
                .into_iter()
                .map(|fold| ids(&fold.iter().map(|&p| train[p]).collect::<Vec<_>>()))
                .collect();
            outer.push(OuterFold {
                test: ids(test),
                inner,
            });
        }
        let plan = Self { seed, outer };
        plan.validate(data)?;
        Ok(plan)
    }

    /// Checks the partition and disjointness properties against `data` and
    /// that every fold holds at least one event.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let index = id_index(data);
        let event_of = |id: &str| -> Result<bool> {
            index
                .get(id)
                .map(|&i| data.records[i].event)
                .ok_or_else(|| Error::Domain(format!("fold plan names unknown patient {id}")))
        };
        let mut tested = HashSet::new();
        for (f, outer) in self.outer.iter().enumerate() {
            let test: HashSet<&str> = outer.test.iter().map(String::as_str).collect();
            if test.len() != outer.test.len() {
                return Err(Error::Domain(format!("outer fold {f}: duplicate test ids")));
            }
            for id in &outer.test {
                if !tested.insert(id.as_str()) {
                    return Err(Error::Domain(format!("patient {id} is tested in two outer folds")));
                }
            }
            let mut inner_seen = HashSet::new();
            for (g, fold) in outer.inner.iter().enumerate() {
                let mut events = 0;
                for id in fold {
                    if test.contains(id.as_str()) {
                        return Err(Error::Domain(format!(
                            "outer fold {f}: patient {id} is in both test and inner fold {g}"
                        )));
                    }
                    if !inner_seen.insert(id.as_str()) {
                        return Err(Error::Domain(format!("outer fold {f}: patient {id} in two inner folds")));
                    }
                    events += usize::from(event_of(id)?);
                }
                if events == 0 {
                    return Err(Error::Config(format!("outer fold {f}, inner fold {g} has no events")));
                }
            }
            if inner_seen.len() + test.len() != data.len() {
                return Err(Error::Domain(format!(
                    "outer fold {f}: inner folds and test set cover {} of {} patients",
                    inner_seen.len() + test.len(),
                    data.len()
                )));
            }
            let mut test_events = 0;
            for id in &outer.test {
                test_events += usize::from(event_of(id)?);
            }
            if test_events == 0 {
                return Err(Error::Config(format!("outer fold {f} has no events in its test set")));
            }
        }
        if tested.len() != data.len() {
            return Err(Error::Domain(format!(
                "outer test sets cover {} of {} patients",
                tested.len(),
                data.len()
            )));
        }
        Ok(())
    }
}

fn id_index(data: &Dataset) -> HashMap<&str, usize> {
    data.records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect()
}

fn resolve(index: &HashMap<&str, usize>, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Domain(format!("unknown patient {id}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub dropout_rates: Vec<f64>,
    pub head_counts: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            dropout_rates: vec![0.0, 0.2, 0.5, 0.8, 0.95],
            head_counts: vec![1, 4, 8, 16, 32],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dropout_rates.is_empty() || self.head_counts.is_empty() {
            return Err(Error::Config("grid lists must be non-empty".into()));
        }
        if let Some(r) = self.dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("dropout rate {r} not in [0, 1)")));
        }
        if self.head_counts.contains(&0) {
            return Err(Error::Config("head counts must be positive".into()));
        }
        Ok(())
    }
}

/// Patient-wise mean of several prediction sets over the same patients.
/// The output follows the order of the first set.
pub fn aggregate_predictions(sets: &[Vec<RiskPrediction>]) -> Result<Vec<RiskPrediction>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Domain("no prediction sets to average".into()))?;
    let mut sums: Vec<f64> = vec![0.0; first.len()];
    let position: HashMap<&str, usize> = first.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    if position.len() != first.len() {
        return Err(Error::Domain("duplicate patient in a prediction set".into()));
    }
    for (s, set) in sets.iter().enumerate() {
        if set.len() != first.len() {
            return Err(Error::Domain(format!(
                "prediction set {s} covers {} patients, expected {}",
                set.len(),
                first.len()
            )));
        }
        let mut seen = vec![false; first.len()];
        for p in set {
            let &i = position
                .get(p.id.as_str())
                .ok_or_else(|| Error::Domain(format!("prediction set {s} has unknown patient {}", p.id)))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Domain(format!("prediction set {s} repeats patient {}", p.id)));
            }
            sums[i] += p.risk;
        }
    }
    let k = sets.len() as f64;
    Ok(first
        .iter()
        .zip(sums)
        .map(|(p, s)| RiskPrediction {
            id: p.id.clone(),
            risk: s / k,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub rate: f64,
    /// Validation c-index of each inner model.
    pub inner_val_cindex: Vec<f64>,
    pub mean_val_cindex: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterReport {
    pub fold: usize,
    pub selected_rate: f64,
    pub grid: Vec<RateResult>,
    /// Averaged test risks of the winning rate's inner models.
    pub predictions: Vec<RiskPrediction>,
    pub test_cindex: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub model: ModelKind,
    /// Head count for multi-head models.
    pub heads: Option<usize>,
    pub plan: FoldPlan,
    pub outer: Vec<OuterReport>,
    pub mean_cindex: f64,
}

impl CVReport {
    /// `fold,selected_rate,mean_inner_val_cindex,test_cindex`.
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("fold,selected_rate,mean_inner_val_cindex,test_cindex\n");
        for o in &self.outer {
            let mean = o
                .grid
                .iter()
                .find(|r| r.rate == o.selected_rate)
                .map_or(f64::NAN, |r| r.mean_val_cindex);
            let _ = writeln!(out, "{},{},{},{}", o.fold, o.selected_rate, mean, o.test_cindex);
        }
        let _ = writeln!(out, "mean,,,{}", self.mean_cindex);
        out
    }

    /// `fold,rate,inner,val_cindex`, one row per trained inner model.
    pub fn grid_csv(&self) -> String {
        let mut out = String::from("fold,rate,inner,val_cindex\n");
        for o in &self.outer {
            for r in &o.grid {
                for (i, c) in r.inner_val_cindex.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{}", o.fold, r.rate, i, c);
                }
            }
        }
        out
    }

    /// `id,fold,risk`, one row per patient.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("id,fold,risk\n");
        for o in &self.outer {
            for p in &o.predictions {
                let _ = writeln!(out, "{},{},{}", p.id, o.fold, p.risk);
            }
        }
        out
    }

    /// All outer-test predictions keyed by patient id.
    pub fn all_predictions(&self) -> Vec<RiskPrediction> {
        self.outer.iter().flat_map(|o| o.predictions.iter().cloned()).collect()
    }
}

/// Nested cross-validation of one model kind over `plan`. Inner trainings
/// run in parallel; results are assembled in (outer, rate, inner) order so
/// the report does not depend on the thread count.
pub fn nested_cv(
    data: &Dataset,
    plan: &FoldPlan,
    rates: &[f64],
    config: &TrainConfig,
    kind: ModelKind,
) -> Result<CVReport> {
    config.validate()?;
    if rates.is_empty() {
        return Err(Error::Config("dropout grid is empty".into()));
    }
    plan.validate(data)?;
    let index = id_index(data);

    struct Job {
        outer: usize,
        rate: usize,
        inner: usize,
    }
    let mut jobs = Vec::new();
    for (o, fold) in plan.outer.iter().enumerate() {
        for r in 0..rates.len() {
            for i in 0..fold.inner.len() {
                jobs.push(Job {
                    outer: o,
                    rate: r,
                    inner: i,
                });
            }
        }
    }
    let trained = jobs
        .par_iter()
        .map(|job| {
            let fold = &plan.outer[job.outer];
            let val = resolve(&index, &fold.inner[job.inner])?;
            let mut train = Vec::new();
            for (g, ids) in fold.inner.iter().enumerate() {
                if g != job.inner {
                    train.extend(resolve(&index, ids)?);
                }
            }
            train.sort_unstable();
            let cfg = TrainConfig {
                feature_dropout_rate: rates[job.rate],
                ..config.clone()
            };
            let init = init_model(kind, data, &train, &cfg)?;
            train_kind(init, data, &train, &val, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut outer_reports = Vec::with_capacity(plan.outer.len());
    let mut job = 0;
    for (o, fold) in plan.outer.iter().enumerate() {
        let k_inner = fold.inner.len();
        let mut grid = Vec::with_capacity(rates.len());
        let mut models = Vec::with_capacity(rates.len());
        for &rate in rates {
            let runs = &trained[job..job + k_inner];
            job += k_inner;
            let vals: Vec<f64> = runs.iter().map(|r| r.best_val_cindex).collect();
            grid.push(RateResult {
                rate,
                mean_val_cindex: vals.iter().sum::<f64>() / vals.len() as f64,
                inner_val_cindex: vals,
            });
            models.push(runs);
        }
        let mut winner = 0;
        for (r, g) in grid.iter().enumerate() {
            if g.mean_val_cindex > grid[winner].mean_val_cindex {
                winner = r;
            }
        }
        let test = resolve(&index, &fold.test)?;
        let test_bags = sample_eval_bags(data, &test, config.test_patches, config.seed, "test")?;
        let sets = models[winner]
            .iter()
            .map(|run| {
                let risks = predict_model(&run.best, &test_bags)?;
                Ok(fold
                    .test
                    .iter()
                    .zip(risks)
                    .map(|(id, risk)| RiskPrediction { id: id.clone(), risk })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let predictions = aggregate_predictions(&sets)?;
        let risks: Vec<f64> = predictions.iter().map(|p| p.risk).collect();
        let test_cindex = c_index(&risks, &data.times(&test), &data.events(&test))?;
        outer_reports.push(OuterReport {
            fold: o,
            selected_rate: rates[winner],
            grid,
            predictions,
            test_cindex,
        });
    }
    let mean_cindex =
        outer_reports.iter().map(|o| o.test_cindex).sum::<f64>() / outer_reports.len() as f64;
    Ok(CVReport {
        model: kind,
        heads: (kind == ModelKind::MhAttn).then_some(config.heads),
        plan: plan.clone(),
        outer: outer_reports,
        mean_cindex,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub heads: usize,
    pub mean_cindex: f64,
    pub fold_cindex: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `heads,mean_cindex,fold_0,...`.
    pub fn to_csv(&self) -> String {
        let folds = self.rows.first().map_or(0, |r| r.fold_cindex.len());
        let mut out = String::from("heads,mean_cindex");
        for f in 0..folds {
            let _ = write!(out, ",fold_{f}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.heads, r.mean_cindex);
            for c in &r.fold_cindex {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Nested CV of the multi-head model for each head count over one shared
/// fold plan.
pub fn ablation_runner(
    data: &Dataset,
    plan: &FoldPlan,
    head_counts: &[usize],
    rates: &[f64],
    config: &TrainConfig,
) -> Result<(AblationTable, Vec<CVReport>)> {
    if let Some(&h) = head_counts.iter().find(|&&h| h == 0 || data.d % h != 0) {
        return Err(Error::Config(format!("{h} heads do not divide d = {}", data.d)));
    }
    let mut rows = Vec::with_capacity(head_counts.len());
    let mut reports = Vec::with_capacity(head_counts.len());
    for &heads in head_counts {
        let cfg = TrainConfig {
            heads,
            ..config.clone()
        };
        let report = nested_cv(data, plan, rates, &cfg, ModelKind::MhAttn)?;
        rows.push(AblationRow {
            heads,
            mean_cindex: report.mean_cindex,
            fold_cindex: report.outer.iter().map(|o| o.test_cindex).collect(),
        });
        reports.push(report);
    }
    Ok((AblationTable { rows }, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn perfectly_divisible_split() {
        let events = [true, false, true, false, true, false, true, false, true, false];
        let folds = stratified_kfold(&events, 5, &mut RngStream::new(1, "split")).unwrap();
        for f in &folds {
            assert_eq!(f.len(), 2);
            assert_eq!(f.iter().filter(|&&i| events[i]).count(), 1);
        }
    }

    #[test]
    fn eleven_patients_five_events() {
        let events: Vec<bool> = (0..11).map(|i| i < 5).collect();
        let folds = stratified_kfold(&events, 5, &mut RngStream::new(2, "split")).unwrap();
        // Events fill folds 0..5 once each; the 6 non-events continue at
        // fold 0, so fold 0 gets two of them.
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        for f in &folds {
            assert_eq!(f.iter().filter(|&&i| events[i]).count(), 1);
        }
    }

    #[test]
    fn too_many_folds() {
        assert!(stratified_kfold(&[true, false], 3, &mut RngStream::new(0, "split")).is_err());
        assert!(stratified_kfold(&[true, false], 1, &mut RngStream::new(0, "split")).is_err());
    }

    #[test]
    fn aggregation() {
        let p = |id: &str, risk| RiskPrediction { id: id.into(), risk };
        let a = vec![p("a", 1.0), p("b", 2.0)];
        assert_eq!(aggregate_predictions(std::slice::from_ref(&a)).unwrap(), a);
        let b = vec![p("b", 4.0), p("a", 3.0)];
        assert_eq!(
            aggregate_predictions(&[a.clone(), b.clone()]).unwrap(),
            vec![p("a", 2.0), p("b", 3.0)]
        );
        let c = vec![p("a", 1.0), p("z", 2.0)];
        assert!(aggregate_predictions(&[a, c]).is_err());
        assert!(aggregate_predictions(&[]).is_err());
    }

    fn tiny_cohort() -> Dataset {
        generate_synthetic(&SyntheticConfig {
            patients: 40,
            patches_min: 6,
            patches_max: 10,
            dim: 4,
            components: 2,
            baseline_rate: 0.5,
            seed: 3,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            patches_per_patient: 4,
            patients_per_batch: 8,
            base_lr: 0.01,
            max_epochs: 4,
            eval_every: 2,
            val_patches: 8,
            test_patches: 16,
            heads: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_rate_grid_is_complete_and_covers_everyone() {
        let data = tiny_cohort();
        let plan = FoldPlan::new(&data, 5, 4, 42).unwrap();
        let report = nested_cv(&data, &plan, &[0.2], &tiny_config(), ModelKind::MhAttn).unwrap();
        assert_eq!(report.outer.len(), 5);
        assert!(report.outer.iter().all(|o| o.selected_rate == 0.2 && o.grid[0].inner_val_cindex.len() == 4));
        let mut ids: Vec<String> = report.all_predictions().into_iter().map(|p| p.id).collect();
        ids.sort();
        let mut all: Vec<String> = data.records.iter().map(|r| r.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
        assert_eq!(report.predictions_csv().lines().count(), 41);
    }

    #[test]
    fn ablation_shares_the_plan() {
        let data = tiny_cohort();
        let plan = FoldPlan::new(&data, 5, 4, 42).unwrap();
        assert_eq!(plan, FoldPlan::new(&data, 5, 4, 42).unwrap());
        let cfg = TrainConfig {
            max_epochs: 2,
            ..tiny_config()
        };
        let (table, reports) = ablation_runner(&data, &plan, &[1], &[0.0], &cfg).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(reports[0].plan, plan);
        assert!(matches!(
            ablation_runner(&data, &plan, &[3], &[0.0], &cfg),
            Err(Error::Config(_))
        ));
    }
}
