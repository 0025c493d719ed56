//! Bag aggregators and the linear risk head.
//!
//! Every model maps a bag `X` (n patches x d features) to a pooled slide
//! vector of length d, which a shared linear head turns into a risk score.
//! Training code is generic over [`SurvivalModel`]; [`Model`] is the
//! type-erased wrapper used where the kind is chosen at runtime.

mod baselines;
pub mod checkpoint;
mod mhattn;

pub use baselines::{
    avgpool_forward, cluster_attn_forward, gated_attn_forward, AvgPoolParams, ClusterAttnParams,
    GatedAttnParams, GatedCache,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Precision};
pub use mhattn::{
    head_logits, head_masked_forward, init_params, mh_forward, AttentionOutput, MhCache,
    ModelParams,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix, RngStream};

/// One patient's patch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBag {
    pub patient_id: String,
    pub features: DenseMatrix,
}

impl EmbeddingBag {
    pub fn new(patient_id: impl Into<String>, features: DenseMatrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Domain("a bag needs at least one patch".into()));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("bag contains non-finite values".into()));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            features,
        })
    }

    /// Number of patches.
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    /// Embedding dimension.
    pub fn d(&self) -> usize {
        self.features.cols()
    }
}

/// `risk = weights . s + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl RiskHead {
    pub fn zeros(d: usize) -> Self {
        Self {
            weights: vec![0.0; d],
            bias: 0.0,
        }
    }

    pub fn apply(&self, pooled: &[f64]) -> f64 {
        dot(&self.weights, pooled) + self.bias
    }
}

/// Named flat views of the trainable arrays, in a fixed order.
pub trait Parameters {
    fn arrays(&self) -> Vec<(&'static str, &[f64])>;
    fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.arrays().into_iter().flat_map(|(_, a)| a.to_vec()).collect()
    }

    /// Overwrites all trainable values from a flat vector in `arrays` order.
    fn assign(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, a) in self.arrays_mut() {
            a.copy_from_slice(&flat[offset..offset + a.len()]);
            offset += a.len();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Multi-head attention with a single learnable query.
    MhAttn,
    AvgPool,
    /// Gated single-attention baseline.
    Gated,
    /// Clustered-attention baseline.
    Cluster,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::MhAttn => "mhattn",
            ModelKind::AvgPool => "avgpool",
            ModelKind::Gated => "gated",
            ModelKind::Cluster => "cluster",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mhattn" => Ok(ModelKind::MhAttn),
            "avgpool" => Ok(ModelKind::AvgPool),
            "gated" => Ok(ModelKind::Gated),
            "cluster" => Ok(ModelKind::Cluster),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// A bag aggregator followed by a linear risk head.
pub trait SurvivalModel: Parameters + Clone + Send + Sync {
    /// Forward state kept for the backward pass.
    type Cache: Send;

    fn kind(&self) -> ModelKind;
    fn dim(&self) -> usize;
    fn risk_head(&self) -> &RiskHead;
    fn risk_head_mut(&mut self) -> &mut RiskHead;

    /// Pools a bag into a slide vector of length `dim()`. When `dropout` is
    /// given, any internal train-time dropout draws its mask from it.
    fn pool(
        &self,
        x: &DenseMatrix,
        dropout: Option<&mut RngStream>,
    ) -> Result<(Vec<f64>, Self::Cache)>;

    /// Accumulates parameter gradients into `grads` given `d loss / d pooled`.
    fn pool_backward(&self, cache: &Self::Cache, g_pooled: &[f64], grads: &mut Self);

    /// Same structure, trainable values zeroed. Used as a gradient buffer.
    fn zeros_like(&self) -> Self;

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Dimension(format!(
                "model expects d = {}, data has d = {d}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Inference-mode risk for one bag.
    fn risk(&self, x: &DenseMatrix) -> Result<f64> {
        let (pooled, _) = self.pool(x, None)?;
        Ok(self.risk_head().apply(&pooled))
    }
}

/// Per-batch forward state.
pub struct BatchForward<C> {
    /// Pooled slide vectors before feature dropout.
    pub pooled: Vec<Vec<f64>>,
    /// Per-column multipliers applied to every pooled vector (0 or 1/(1-p)).
    pub feature_scale: Option<Vec<f64>>,
    pub risks: Vec<f64>,
    caches: Option<Vec<C>>,
}

impl<C> BatchForward<C> {
    pub fn has_state(&self) -> bool {
        self.caches.is_some()
    }

    /// Drops the cached activations, e.g. after evaluation.
    pub fn without_state(self) -> Self {
        Self {
            caches: None,
            ..self
        }
    }
}

/// Forward pass over a batch. `feature_scale` is the batch-shared dropout
/// multiplier vector applied between pooling and the risk head.
pub fn forward_batch<M: SurvivalModel>(
    model: &M,
    bags: &[&DenseMatrix],
    feature_scale: Option<&[f64]>,
    mut dropout: Option<&mut RngStream>,
) -> Result<BatchForward<M::Cache>> {
    if let Some(scale) = feature_scale {
        if scale.len() != model.dim() {
            return Err(Error::Dimension(format!(
                "feature mask has length {}, model d = {}",
                scale.len(),
                model.dim()
            )));
        }
    }
    let mut pooled = Vec::with_capacity(bags.len());
    let mut caches = Vec::with_capacity(bags.len());
    let mut risks = Vec::with_capacity(bags.len());
    for x in bags {
        let (s, cache) = model.pool(x, dropout.as_deref_mut())?;
        let risk = match feature_scale {
            Some(scale) => {
                let masked: Vec<f64> = s.iter().zip(scale).map(|(a, b)| a * b).collect();
                model.risk_head().apply(&masked)
            }
            None => model.risk_head().apply(&s),
        };
        risks.push(risk);
        pooled.push(s);
        caches.push(cache);
    }
    Ok(BatchForward {
        pooled,
        feature_scale: feature_scale.map(<[f64]>::to_vec),
        risks,
        caches: Some(caches),
    })
}

/// Reverse-mode gradients of `sum_b grad_risks[b] * risk_b` with respect to
/// every trainable array. Dropout masks are treated as constants.
pub fn backward<M: SurvivalModel>(
    model: &M,
    state: &BatchForward<M::Cache>,
    grad_risks: &[f64],
) -> Result<M> {
    let caches = state
        .caches
        .as_ref()
        .ok_or_else(|| Error::Usage("backward called without forward state".into()))?;
    if grad_risks.len() != caches.len() {
        return Err(Error::Dimension(format!(
            "{} risk gradients for a batch of {}",
            grad_risks.len(),
            caches.len()
        )));
    }
    let d = model.dim();
    let mut grads = model.zeros_like();
    let fc = model.risk_head().weights.clone();
    let mut g_pooled = vec![0.0; d];
    for ((cache, pooled), &g) in caches.iter().zip(&state.pooled).zip(grad_risks) {
        if g == 0.0 {
            continue;
        }
        let head = grads.risk_head_mut();
        head.bias += g;
        match &state.feature_scale {
            Some(scale) => {
                for c in 0..d {
                    head.weights[c] += g * pooled[c] * scale[c];
                    g_pooled[c] = g * fc[c] * scale[c];
                }
            }
            None => {
                for c in 0..d {
                    head.weights[c] += g * pooled[c];
                    g_pooled[c] = g * fc[c];
                }
            }
        }
        model.pool_backward(cache, &g_pooled, &mut grads);
    }
    Ok(grads)
}

/// Runtime-selected model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    MhAttn(ModelParams),
    AvgPool(AvgPoolParams),
    Gated(GatedAttnParams),
    Cluster(ClusterAttnParams),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::MhAttn(_) => ModelKind::MhAttn,
            Model::AvgPool(_) => ModelKind::AvgPool,
            Model::Gated(_) => ModelKind::Gated,
            Model::Cluster(_) => ModelKind::Cluster,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::MhAttn(m) => m.dim(),
            Model::AvgPool(m) => m.dim(),
            Model::Gated(m) => m.dim(),
            Model::Cluster(m) => m.dim(),
        }
    }

    pub fn risk(&self, x: &DenseMatrix) -> Result<f64> {
        match self {
            Model::MhAttn(m) => m.risk(x),
            Model::AvgPool(m) => m.risk(x),
            Model::Gated(m) => m.risk(x),
            Model::Cluster(m) => m.risk(x),
        }
    }

    pub fn as_mhattn(&self) -> Option<&ModelParams> {
        match self {
            Model::MhAttn(m) => Some(m),
            _ => None,
        }
    }
}

impl From<ModelParams> for Model {
    fn from(m: ModelParams) -> Self {
        Model::MhAttn(m)
    }
}

impl From<AvgPoolParams> for Model {
    fn from(m: AvgPoolParams) -> Self {
        Model::AvgPool(m)
    }
}

impl From<GatedAttnParams> for Model {
    fn from(m: GatedAttnParams) -> Self {
        Model::Gated(m)
    }
}

impl From<ClusterAttnParams> for Model {
    fn from(m: ClusterAttnParams) -> Self {
        Model::Cluster(m)
    }
}

/// Uniform `U(-bound, bound)` values drawn in order from `rng`.
pub(crate) fn uniform_vec(rng: &mut RngStream, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.uniform_range(-bound, bound)).collect()
}
