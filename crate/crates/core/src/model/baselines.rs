//! Baseline aggregators: mean pooling, gated single-attention and
//! clustered attention.

use super::{uniform_vec, EmbeddingBag, ModelKind, Parameters, RiskHead, SurvivalModel};
use crate::error::{Error, Result};
use crate::numerics::kmeans::nearest;
use crate::numerics::{kmeans, softmax_into, DenseMatrix, RngStream};

/// Mean pooling followed by the risk head.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgPoolParams {
    pub risk_head: RiskHead,
}

impl AvgPoolParams {
    pub fn init(d: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            risk_head: RiskHead {
                weights: uniform_vec(rng, d, bound),
                bias: 0.0,
            },
        }
    }
}

pub fn avgpool_forward(bag: &EmbeddingBag, head: &RiskHead) -> Result<f64> {
    if head.weights.len() != bag.d() {
        return Err(Error::Dimension(format!(
            "risk head has {} weights, bag d = {}",
            head.weights.len(),
            bag.d()
        )));
    }
    Ok(head.apply(&bag.features.column_mean()?))
}

impl Parameters for AvgPoolParams {
    fn arrays(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("risk_weights", &self.risk_head.weights),
            ("risk_bias", std::slice::from_ref(&self.risk_head.bias)),
        ]
    }

    fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("risk_weights", &mut self.risk_head.weights),
            ("risk_bias", std::slice::from_mut(&mut self.risk_head.bias)),
        ]
    }
}

impl SurvivalModel for AvgPoolParams {
    type Cache = ();

    fn kind(&self) -> ModelKind {
        ModelKind::AvgPool
    }

    fn dim(&self) -> usize {
        self.risk_head.weights.len()
    }

    fn risk_head(&self) -> &RiskHead {
        &self.risk_head
    }

    fn risk_head_mut(&mut self) -> &mut RiskHead {
        &mut self.risk_head
    }

    fn pool(&self, x: &DenseMatrix, _dropout: Option<&mut RngStream>) -> Result<(Vec<f64>, ())> {
        self.check_dim(x.cols())?;
        Ok((x.column_mean()?, ()))
    }

    fn pool_backward(&self, _cache: &(), _g_pooled: &[f64], _grads: &mut Self) {}

    fn zeros_like(&self) -> Self {
        Self {
            risk_head: RiskHead::zeros(self.dim()),
        }
    }
}

/// Gated instance attention: `score_j = gate . tanh(proj x_j)`, softmax over
/// patches, weighted mean of the patches, linear risk head.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedAttnParams {
    /// L x d.
    pub proj: DenseMatrix,
    /// Length L.
    pub gate: Vec<f64>,
    pub risk_head: RiskHead,
}

pub struct GatedCache {
    x: DenseMatrix,
    /// tanh activations, n x L.
    hidden: DenseMatrix,
    attn: Vec<f64>,
}

impl GatedCache {
    pub fn attention(&self) -> &[f64] {
        &self.attn
    }
}

impl GatedAttnParams {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn init(d: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        if hidden == 0 || d == 0 {
            return Err(Error::Config("gated attention needs d, L >= 1".into()));
        }
        let bd = 1.0 / (d as f64).sqrt();
        let bl = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            proj: DenseMatrix::new(hidden, d, uniform_vec(rng, hidden * d, bd))?,
            gate: uniform_vec(rng, hidden, bl),
            risk_head: RiskHead {
                weights: uniform_vec(rng, d, bd),
                bias: 0.0,
            },
        })
    }

    pub fn hidden(&self) -> usize {
        self.gate.len()
    }

    fn forward(&self, x: &DenseMatrix) -> Result<(Vec<f64>, GatedCache)> {
        let (n, d) = (x.rows(), x.cols());
        if n == 0 {
            return Err(Error::Domain("empty bag".into()));
        }
        self.check_dim(d)?;
        let l = self.hidden();
        let mut hidden = DenseMatrix::zeros(n, l);
        let mut scores = vec![0.0; n];
        for j in 0..n {
            let xr = x.row(j);
            let hr = hidden.row_mut(j);
            for (u, hv) in hr.iter_mut().enumerate() {
                *hv = self
                    .proj
                    .row(u)
                    .iter()
                    .zip(xr)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .tanh();
            }
            scores[j] = hr.iter().zip(&self.gate).map(|(a, b)| a * b).sum();
        }
        let mut attn = vec![0.0; n];
        softmax_into(&scores, &mut attn);
        let mut pooled = vec![0.0; d];
        for (j, &w) in attn.iter().enumerate() {
            for (p, v) in pooled.iter_mut().zip(x.row(j)) {
                *p += w * v;
            }
        }
        Ok((
            pooled,
            GatedCache {
                x: x.clone(),
                hidden,
                attn,
            },
        ))
    }

    fn backward_into(&self, cache: &GatedCache, g_pooled: &[f64], grads: &mut GatedAttnParams) {
        let x = &cache.x;
        let n = x.rows();
        let g_attn: Vec<f64> = (0..n)
            .map(|j| g_pooled.iter().zip(x.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        let mean: f64 = cache.attn.iter().zip(&g_attn).map(|(a, b)| a * b).sum();
        for j in 0..n {
            let g_score = cache.attn[j] * (g_attn[j] - mean);
            if g_score == 0.0 {
                continue;
            }
            let hr = cache.hidden.row(j);
            for (u, &hv) in hr.iter().enumerate() {
                grads.gate[u] += g_score * hv;
                let g_pre = g_score * self.gate[u] * (1.0 - hv * hv);
                for (g, xv) in grads.proj.row_mut(u).iter_mut().zip(x.row(j)) {
                    *g += g_pre * xv;
                }
            }
        }
    }
}

/// Returns the risk and the per-patch attention weights.
pub fn gated_attn_forward(bag: &EmbeddingBag, params: &GatedAttnParams) -> Result<(f64, Vec<f64>)> {
    let (pooled, cache) = params.forward(&bag.features)?;
    Ok((params.risk_head.apply(&pooled), cache.attn))
}

impl Parameters for GatedAttnParams {
    fn arrays(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("gated_proj", self.proj.as_slice()),
            ("gated_gate", &self.gate),
            ("risk_weights", &self.risk_head.weights),
            ("risk_bias", std::slice::from_ref(&self.risk_head.bias)),
        ]
    }

    fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("gated_proj", self.proj.as_mut_slice()),
            ("gated_gate", &mut self.gate),
            ("risk_weights", &mut self.risk_head.weights),
            ("risk_bias", std::slice::from_mut(&mut self.risk_head.bias)),
        ]
    }
}

impl SurvivalModel for GatedAttnParams {
    type Cache = GatedCache;

    fn kind(&self) -> ModelKind {
        ModelKind::Gated
    }

    fn dim(&self) -> usize {
        self.proj.cols()
    }

    fn risk_head(&self) -> &RiskHead {
        &self.risk_head
    }

    fn risk_head_mut(&mut self) -> &mut RiskHead {
        &mut self.risk_head
    }

    fn pool(
        &self,
        x: &DenseMatrix,
        _dropout: Option<&mut RngStream>,
    ) -> Result<(Vec<f64>, GatedCache)> {
        self.forward(x)
    }

    fn pool_backward(&self, cache: &GatedCache, g_pooled: &[f64], grads: &mut Self) {
        self.backward_into(cache, g_pooled, grads);
    }

    fn zeros_like(&self) -> Self {
        Self {
            proj: DenseMatrix::zeros(self.proj.rows(), self.proj.cols()),
            gate: vec![0.0; self.gate.len()],
            risk_head: RiskHead::zeros(self.dim()),
        }
    }
}

/// Clustered attention: patches are grouped by the nearest of `k` fixed
/// centroids, each non-empty cluster is averaged into one embedding, and
/// gated attention pools the cluster embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAttnParams {
    /// k x d, fitted on training patches and not trained.
    pub centroids: DenseMatrix,
    pub attn: GatedAttnParams,
}

impl ClusterAttnParams {
    /// Fits centroids with k-means on patches pooled from the training bags
    /// (at most `max_patches`, drawn uniformly) and initialises the attention.
    pub fn fit(
        bags: &[&DenseMatrix],
        k: usize,
        hidden: usize,
        max_patches: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let d = bags
            .first()
            .map(|b| b.cols())
            .ok_or_else(|| Error::Domain("no bags to fit clusters on".into()))?;
        let total: usize = bags.iter().map(|b| b.rows()).sum();
        let mut rows = Vec::with_capacity(total.min(max_patches) * d);
        if total <= max_patches {
            for b in bags {
                rows.extend_from_slice(b.as_slice());
            }
        } else {
            for _ in 0..max_patches {
                let mut idx = rng.below(total);
                for b in bags {
                    if idx < b.rows() {
                        rows.extend_from_slice(b.row(idx));
                        break;
                    }
                    idx -= b.rows();
                }
            }
        }
        let points = DenseMatrix::new(rows.len() / d, d, rows)?;
        let fitted = kmeans(&points, k, rng, 100)?;
        Ok(Self {
            centroids: fitted.centroids,
            attn: GatedAttnParams::init(d, hidden, rng)?,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Means of the non-empty clusters, in cluster order.
    pub fn cluster_embeddings(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let (k, d) = (self.k(), x.cols());
        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for j in 0..x.rows() {
            let (c, _) = nearest(x.row(j), &self.centroids);
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(j)) {
                *s += v;
            }
        }
        let mut values = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                values.extend(sums.row(c).iter().map(|s| s * inv));
            }
        }
        if values.is_empty() {
            return Err(Error::Domain("every cluster is empty".into()));
        }
        DenseMatrix::new(values.len() / d, d, values)
    }
}

pub fn cluster_attn_forward(bag: &EmbeddingBag, params: &ClusterAttnParams) -> Result<f64> {
    params.risk(&bag.features)
}

impl Parameters for ClusterAttnParams {
    fn arrays(&self) -> Vec<(&'static str, &[f64])> {
        self.attn.arrays()
    }

    fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        self.attn.arrays_mut()
    }
}

impl SurvivalModel for ClusterAttnParams {
    type Cache = GatedCache;

    fn kind(&self) -> ModelKind {
        ModelKind::Cluster
    }

    fn dim(&self) -> usize {
        self.centroids.cols()
    }

    fn risk_head(&self) -> &RiskHead {
        &self.attn.risk_head
    }

    fn risk_head_mut(&mut self) -> &mut RiskHead {
        &mut self.attn.risk_head
    }

    fn pool(
        &self,
        x: &DenseMatrix,
        _dropout: Option<&mut RngStream>,
    ) -> Result<(Vec<f64>, GatedCache)> {
        if x.rows() == 0 {
            return Err(Error::Domain("empty bag".into()));
        }
        self.check_dim(x.cols())?;
        let emb = self.cluster_embeddings(x)?;
        self.attn.forward(&emb)
    }

    fn pool_backward(&self, cache: &GatedCache, g_pooled: &[f64], grads: &mut Self) {
        self.attn.backward_into(cache, g_pooled, &mut grads.attn);
    }

    fn zeros_like(&self) -> Self {
        Self {
            centroids: self.centroids.clone(),
            attn: self.attn.zeros_like(),
        }
    }
}
