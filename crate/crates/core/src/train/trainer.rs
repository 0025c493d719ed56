use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use super::{adam_step, cosine_lr, cox_loss, sample_patches, AdamState, FeatureDropoutMask, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::c_index;
use crate::model::{
    backward, forward_batch, init_params, AvgPoolParams, ClusterAttnParams, GatedAttnParams, Model,
    ModelKind, SurvivalModel,
};
use crate::numerics::{DenseMatrix, RngStream};

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the last epoch.
    pub lr: f64,
    /// Mean batch loss since the previous evaluation.
    pub train_loss: f64,
    pub val_cindex: f64,
    /// No-event batches skipped since the previous evaluation.
    pub skipped_batches: usize,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,step,lr,train_loss,val_cindex,skipped_batches\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.step, r.lr, r.train_loss, r.val_cindex, r.skipped_batches
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters at the evaluation with the highest validation c-index.
    pub best: M,
    pub best_val_cindex: f64,
    pub best_epoch: usize,
    /// Total optimizer steps taken.
    pub steps: u64,
    pub history: Vec<HistoryRow>,
    /// Optimizer state at the end of training.
    pub optimizer: AdamState,
}

/// Initial parameters of the requested kind, drawn from the "init" stream.
/// The clustered baseline fits its centroids on the training bags only.
pub fn init_model(
    kind: ModelKind,
    data: &Dataset,
    train_idx: &[usize],
    config: &TrainConfig,
) -> Result<Model> {
    let mut rng = RngStream::new(config.seed, "init");
    let d = data.d;
    Ok(match kind {
        ModelKind::MhAttn => init_params(d, config.heads, &mut rng)?
            .with_key_dropout(config.key_dropout_rate)?
            .into(),
        ModelKind::AvgPool => AvgPoolParams::init(d, &mut rng).into(),
        ModelKind::Gated => GatedAttnParams::init(d, config.gated_hidden, &mut rng)?.into(),
        ModelKind::Cluster => {
            let bags: Vec<&DenseMatrix> = train_idx.iter().map(|&i| &data.bags[i].features).collect();
            ClusterAttnParams::fit(&bags, config.clusters, config.gated_hidden, 20_000, &mut rng)?.into()
        }
    })
}

/// Draws `n` patches from each listed patient's bag using a per-patient
/// stream labelled `"{label}/{id}"`, so every model evaluated with the same
/// seed and label sees the same patches.
pub fn sample_eval_bags(
    data: &Dataset,
    idx: &[usize],
    n: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<DenseMatrix>> {
    idx.par_iter()
        .map(|&i| {
            let bag = &data.bags[i];
            let mut rng = RngStream::new(seed, format!("{label}/{}", data.records[i].id));
            let rows = sample_patches(bag.n(), n, &mut rng)?;
            Ok(bag.features.select_rows(&rows))
        })
        .collect()
}

/// Inference risks, one per bag, in order.
pub fn predict<M: SurvivalModel>(model: &M, bags: &[DenseMatrix]) -> Result<Vec<f64>> {
    bags.par_iter().map(|x| model.risk(x)).collect()
}

pub fn predict_model(model: &Model, bags: &[DenseMatrix]) -> Result<Vec<f64>> {
    bags.par_iter().map(|x| model.risk(x)).collect()
}

/// [`sample_eval_bags`] followed by [`predict_model`].
pub fn predict_sampled(
    model: &Model,
    data: &Dataset,
    idx: &[usize],
    n: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<f64>> {
    predict_model(model, &sample_eval_bags(data, idx, n, seed, label)?)
}

/// Runs the epoch loop from `init` and returns the parameters with the best
/// validation c-index.
///
/// Each epoch shuffles the training patients, cuts them into batches of
/// `patients_per_batch` (the last one may be shorter), samples
/// `patches_per_patient` patches per patient and takes one Adam step per
/// batch on the Cox loss. Batches without an event are skipped. The pooled
/// vectors share one feature-dropout mask per batch. Validation uses one
/// fixed draw of `val_patches` patches per patient.
pub fn train<M: SurvivalModel>(
    init: M,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    config.validate()?;
    init.check_dim(data.d)?;
    if !train_idx.iter().any(|&i| data.records[i].event) {
        return Err(Error::Config("training split has no events".into()));
    }
    let val_times = data.times(val_idx);
    let val_events = data.events(val_idx);
    if crate::eval::concordance_counts(&vec![0.0; val_idx.len()], &val_times, &val_events)?.comparable == 0 {
        return Err(Error::Config("validation split has no comparable pairs".into()));
    }
    let val_bags = sample_eval_bags(data, val_idx, config.val_patches, config.seed, "val")?;

    let mut sample_rng = RngStream::new(config.seed, "sample");
    let mut dropout_rng = RngStream::new(config.seed, "dropout");
    let mut model = init;
    let mut adam = AdamState::new(&model);
    let mut best: Option<(M, f64, usize)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut order = train_idx.to_vec();
    let (mut loss_sum, mut loss_count, mut skipped) = (0.0, 0usize, 0usize);

    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(epoch, config);
        sample_rng.shuffle(&mut order);
        for batch in order.chunks(config.patients_per_batch) {
            let events = data.events(batch);
            if !events.iter().any(|&e| e) {
                skipped += 1;
                continue;
            }
            let times = data.times(batch);
            let mut xs = Vec::with_capacity(batch.len());
            for &i in batch {
                let bag = &data.bags[i].features;
                let rows = sample_patches(bag.rows(), config.patches_per_patient, &mut sample_rng)?;
                xs.push(bag.select_rows(&rows));
            }
            let refs: Vec<&DenseMatrix> = xs.iter().collect();
            let scale = if config.feature_dropout_rate > 0.0 {
                Some(FeatureDropoutMask::sample(data.d, config.feature_dropout_rate, &mut dropout_rng)?.multipliers())
            } else {
                None
            };
            let fwd = forward_batch(&model, &refs, scale.as_deref(), Some(&mut dropout_rng))?;
            let cox = cox_loss(&fwd.risks, &times, &events)?;
            let grads = backward(&model, &fwd, &cox.grad)?;
            adam_step(&mut model, &grads, &mut adam, lr)?;
            loss_sum += cox.loss;
            loss_count += 1;
        }

        let done = epoch + 1;
        if done % config.eval_every == 0 || done == config.max_epochs {
            let risks = predict(&model, &val_bags)?;
            let c = c_index(&risks, &val_times, &val_events)?;
            history.push(HistoryRow {
                epoch: done,
                step: adam.step,
                lr,
                train_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
                val_cindex: c,
                skipped_batches: skipped,
            });
            (loss_sum, loss_count, skipped) = (0.0, 0, 0);
            if best.as_ref().is_none_or(|b| c > b.1) {
                best = Some((model.clone(), c, done));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    let (best, best_val_cindex, best_epoch) =
        best.ok_or_else(|| Error::Config("training ran no evaluations".into()))?;
    Ok(TrainOutcome {
        best,
        best_val_cindex,
        best_epoch,
        steps: adam.step,
        history,
        optimizer: adam,
    })
}

/// [`train`] for a runtime-selected model kind.
pub fn train_kind(
    init: Model,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome<Model>> {
    fn wrap<M: Into<Model>>(o: TrainOutcome<M>) -> TrainOutcome<Model> {
        TrainOutcome {
            best: o.best.into(),
            best_val_cindex: o.best_val_cindex,
            best_epoch: o.best_epoch,
            steps: o.steps,
            history: o.history,
            optimizer: o.optimizer,
        }
    }
    Ok(match init {
        Model::MhAttn(m) => wrap(train(m, data, train_idx, val_idx, config)?),
        Model::AvgPool(m) => wrap(train(m, data, train_idx, val_idx, config)?),
        Model::Gated(m) => wrap(train(m, data, train_idx, val_idx, config)?),
        Model::Cluster(m) => wrap(train(m, data, train_idx, val_idx, config)?),
    })
}
