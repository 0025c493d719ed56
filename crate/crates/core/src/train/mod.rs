//! Cox partial-likelihood training with batch-shared feature dropout,
//! Adam and cosine warm restarts.

mod adam;
mod cox;
mod dropout;
mod sampling;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use cox::{cox_loss, CoxLoss};
pub use dropout::{feature_dropout, FeatureDropoutMask};
pub use sampling::sample_patches;
pub use schedule::cosine_lr;
pub use trainer::{
    history_csv, init_model, predict, predict_model, predict_sampled, sample_eval_bags, train,
    train_kind, HistoryRow, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Follow-up for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Years since diagnosis, strictly positive.
    pub time: f64,
    /// `true` when death was observed, `false` when censored.
    pub event: bool,
    /// Path of the bag file, relative to the dataset directory.
    pub bag: String,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.time > 0.0) || !self.time.is_finite() {
            return Err(Error::Domain(format!(
                "patient {}: time must be positive, got {}",
                self.id, self.time
            )));
        }
        Ok(())
    }
}

/// Training and evaluation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patches_per_patient: usize,
    pub patients_per_batch: usize,
    pub base_lr: f64,
    /// Epochs between learning-rate restarts.
    pub schedule_period: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    /// Patches sampled per validation patient.
    pub val_patches: usize,
    /// Patches sampled per test patient.
    pub test_patches: usize,
    /// Batch-shared dropout on the pooled slide vector.
    pub feature_dropout_rate: f64,
    /// Element-wise dropout inside the key projection.
    pub key_dropout_rate: f64,
    pub heads: usize,
    pub seed: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Hidden width of the gated-attention baselines.
    pub gated_hidden: usize,
    /// Cluster count of the clustered-attention baseline.
    pub clusters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patches_per_patient: 32,
            patients_per_batch: 64,
            base_lr: 6e-5,
            schedule_period: 4000,
            max_epochs: 50_000,
            eval_every: 100,
            val_patches: 100,
            test_patches: 1000,
            feature_dropout_rate: 0.0,
            key_dropout_rate: 0.0,
            heads: 8,
            seed: 0,
            patience: 50,
            gated_hidden: 64,
            clusters: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("patches_per_patient", self.patches_per_patient),
            ("patients_per_batch", self.patients_per_batch),
            ("schedule_period", self.schedule_period),
            ("max_epochs", self.max_epochs),
            ("eval_every", self.eval_every),
            ("val_patches", self.val_patches),
            ("test_patches", self.test_patches),
            ("heads", self.heads),
            ("patience", self.patience),
            ("gated_hidden", self.gated_hidden),
            ("clusters", self.clusters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("feature_dropout_rate", self.feature_dropout_rate),
            ("key_dropout_rate", self.key_dropout_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} not in [0, 1)")));
            }
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }
}
