use super::{uniform_vec, EmbeddingBag, Parameters, RiskHead, SurvivalModel};
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::numerics::{softmax_into, DenseMatrix, RngStream};

/// Parameters of the multi-head attention aggregator.
///
/// Keys are `relu(dropout(X W_K))`, values are the raw patch embeddings, and
/// a single learnable query is split into `heads` equal chunks. Logits are
/// not scaled by `sqrt(d / h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `W_K`, d x d.
    pub key_proj: DenseMatrix,
    /// `Q`, length d.
    pub query: Vec<f64>,
    pub risk_head: RiskHead,
    pub heads: usize,
    /// Inverted-dropout rate applied to `X W_K` during training.
    pub key_dropout_rate: f64,
}

/// Result of a forward pass on one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Concatenated head outputs, length d.
    pub pooled: Vec<f64>,
    /// Per-head patch weights, h x n; each row sums to one.
    pub attn: DenseMatrix,
    pub risk: f64,
}

pub struct MhCache {
    x: DenseMatrix,
    /// `X W_K` after the dropout multipliers, before the ReLU.
    key_pre: DenseMatrix,
    key_scale: Option<DenseMatrix>,
    keys: DenseMatrix,
    attn: DenseMatrix,
}

fn check_heads(d: usize, h: usize) -> Result<()> {
    if h == 0 || d == 0 || d % h != 0 {
        return Err(Error::Config(format!(
            "head count {h} must be positive and divide d = {d}"
        )));
    }
    Ok(())
}

/// Draws `W_K`, `Q` and the risk-head weights from `U(-1/sqrt(d), 1/sqrt(d))`,
/// in that order; the bias starts at zero.
pub fn init_params(d: usize, h: usize, rng: &mut RngStream) -> Result<ModelParams> {
    check_heads(d, h)?;
    let bound = 1.0 / (d as f64).sqrt();
    let key_proj = DenseMatrix::new(d, d, uniform_vec(rng, d * d, bound))?;
    let query = uniform_vec(rng, d, bound);
    let weights = uniform_vec(rng, d, bound);
    Ok(ModelParams {
        key_proj,
        query,
        risk_head: RiskHead { weights, bias: 0.0 },
        heads: h,
        key_dropout_rate: 0.0,
    })
}

impl ModelParams {
    pub fn with_key_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("key dropout rate {rate} not in [0, 1)")));
        }
        self.key_dropout_rate = rate;
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.query.len() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.query.len();
        check_heads(d, self.heads)?;
        if self.key_proj.rows() != d || self.key_proj.cols() != d || self.risk_head.weights.len() != d
        {
            return Err(Error::Dimension(format!(
                "inconsistent parameter shapes for d = {d}"
            )));
        }
        Ok(())
    }

    /// Draws an inverted-dropout multiplier matrix for an n-patch bag.
    pub fn sample_key_mask(&self, n: usize, rng: &mut RngStream) -> DenseMatrix {
        let d = self.dim();
        let keep = 1.0 - self.key_dropout_rate;
        let scale = 1.0 / keep;
        let mut m = DenseMatrix::zeros(n, d);
        for v in m.as_mut_slice() {
            if rng.bernoulli(keep) {
                *v = scale;
            }
        }
        m
    }

    /// Forward pass with an explicit key-dropout multiplier matrix.
    pub fn forward_with_mask(
        &self,
        x: &DenseMatrix,
        key_scale: Option<&DenseMatrix>,
    ) -> Result<(AttentionOutput, MhCache)> {
        let (n, d) = (x.rows(), x.cols());
        if n == 0 {
            return Err(Error::Domain("empty bag".into()));
        }
        self.check_dim(d)?;
        let mut key_pre = x.matmul(&self.key_proj)?;
        if let Some(scale) = key_scale {
            if scale.rows() != n || scale.cols() != d {
                return Err(Error::Dimension(format!(
                    "key mask {}x{} for a {n}x{d} bag",
                    scale.rows(),
                    scale.cols()
                )));
            }
            for (k, s) in key_pre.as_mut_slice().iter_mut().zip(scale.as_slice()) {
                *k *= s;
            }
        }
        let keys = key_pre.relu();
        let h = self.heads;
        let dh = d / h;
        let mut attn = DenseMatrix::zeros(h, n);
        let mut pooled = vec![0.0; d];
        let mut logits = vec![0.0; n];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let q = &self.query[cols.clone()];
            for (j, l) in logits.iter_mut().enumerate() {
                *l = q.iter().zip(&keys.row(j)[cols.clone()]).map(|(a, b)| a * b).sum();
            }
            let weights = attn.row_mut(head);
            softmax_into(&logits, weights);
            let out = &mut pooled[cols.clone()];
            for j in 0..n {
                let w = weights[j];
                for (o, v) in out.iter_mut().zip(&x.row(j)[cols.clone()]) {
                    *o += w * v;
                }
            }
        }
        let risk = self.risk_head.apply(&pooled);
        let cache = MhCache {
            x: x.clone(),
            key_pre,
            key_scale: key_scale.cloned(),
            keys,
            attn: attn.clone(),
        };
        Ok((AttentionOutput { pooled, attn, risk }, cache))
    }
}

/// Forward pass on a bag. `key_mask` holds inverted-dropout multipliers for
/// `X W_K`; pass `None` at inference.
pub fn mh_forward(
    bag: &EmbeddingBag,
    params: &ModelParams,
    key_mask: Option<&DenseMatrix>,
) -> Result<AttentionOutput> {
    params
        .forward_with_mask(&bag.features, key_mask)
        .map(|(out, _)| out)
}

/// Inference risk with every head outside `keep_heads` (0-based) zeroed
/// before the risk head. The bias is always applied.
pub fn head_masked_forward(
    bag: &EmbeddingBag,
    params: &ModelParams,
    keep_heads: &[usize],
) -> Result<f64> {
    if let Some(&bad) = keep_heads.iter().find(|&&i| i >= params.heads) {
        return Err(Error::Domain(format!(
            "head {bad} out of range for {} heads",
            params.heads
        )));
    }
    let out = mh_forward(bag, params, None)?;
    let dh = params.head_dim();
    let mut risk = params.risk_head.bias;
    for head in 0..params.heads {
        if keep_heads.contains(&head) {
            let cols = head * dh..(head + 1) * dh;
            risk += params.risk_head.weights[cols.clone()]
                .iter()
                .zip(&out.pooled[cols])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
    Ok(risk)
}

/// Pre-softmax attention logits, h x n, without dropout.
pub fn head_logits(params: &ModelParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    params.check_dim(x.cols())?;
    let keys = x.matmul(&params.key_proj)?.relu();
    let dh = params.head_dim();
    let mut logits = DenseMatrix::zeros(params.heads, x.rows());
    for head in 0..params.heads {
        let cols = head * dh..(head + 1) * dh;
        let q = &params.query[cols.clone()];
        for j in 0..x.rows() {
            let v = q
                .iter()
                .zip(&keys.row(j)[cols.clone()])
                .map(|(a, b)| a * b)
                .sum();
            logits.set(head, j, v);
        }
    }
    Ok(logits)
}

impl Parameters for ModelParams {
    fn arrays(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("key_proj", self.key_proj.as_slice()),
            ("query", &self.query),
            ("risk_weights", &self.risk_head.weights),
            ("risk_bias", std::slice::from_ref(&self.risk_head.bias)),
        ]
    }

    fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("key_proj", self.key_proj.as_mut_slice()),
            ("query", &mut self.query),
            ("risk_weights", &mut self.risk_head.weights),
            ("risk_bias", std::slice::from_mut(&mut self.risk_head.bias)),
        ]
    }
}

impl SurvivalModel for ModelParams {
    type Cache = MhCache;

    fn kind(&self) -> ModelKind {
        ModelKind::MhAttn
    }

    fn dim(&self) -> usize {
        self.query.len()
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
        dropout: Option<&mut RngStream>,
    ) -> Result<(Vec<f64>, MhCache)> {
        let mask = match dropout {
            Some(rng) if self.key_dropout_rate > 0.0 => Some(self.sample_key_mask(x.rows(), rng)),
            _ => None,
        };
        let (out, cache) = self.forward_with_mask(x, mask.as_ref())?;
        Ok((out.pooled, cache))
    }

    fn pool_backward(&self, cache: &MhCache, g_pooled: &[f64], grads: &mut Self) {
        let x = &cache.x;
        let (n, d) = (x.rows(), x.cols());
        let dh = d / self.heads;
        let mut g_pre = DenseMatrix::zeros(n, d);
        let mut g_attn = vec![0.0; n];
        for head in 0..self.heads {
            let cols = head * dh..(head + 1) * dh;
            let weights = cache.attn.row(head);
            let g_s = &g_pooled[cols.clone()];
            for (j, ga) in g_attn.iter_mut().enumerate() {
                *ga = g_s.iter().zip(&x.row(j)[cols.clone()]).map(|(a, b)| a * b).sum();
            }
            let mean: f64 = weights.iter().zip(&g_attn).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let g_logit = weights[j] * (g_attn[j] - mean);
                if g_logit == 0.0 {
                    continue;
                }
                let key_row = &cache.keys.row(j)[cols.clone()];
                for (gq, k) in grads.query[cols.clone()].iter_mut().zip(key_row) {
                    *gq += g_logit * k;
                }
                let pre_row = &cache.key_pre.row(j)[cols.clone()];
                let q = &self.query[cols.clone()];
                let g_row = &mut g_pre.row_mut(j)[cols.clone()];
                for ((g, &p), &qc) in g_row.iter_mut().zip(pre_row).zip(q) {
                    if p > 0.0 {
                        *g = g_logit * qc;
                    }
                }
            }
        }
        if let Some(scale) = &cache.key_scale {
            for (g, s) in g_pre.as_mut_slice().iter_mut().zip(scale.as_slice()) {
                *g *= s;
            }
        }
        // dW_K = X^T dP
        let gw = grads.key_proj.as_mut_slice();
        for j in 0..n {
            let g_row = g_pre.row(j);
            for (k, &xv) in x.row(j).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (g, &gp) in gw[k * d..(k + 1) * d].iter_mut().zip(g_row) {
                    *g += xv * gp;
                }
            }
        }
    }

    fn zeros_like(&self) -> Self {
        let d = self.dim();
        ModelParams {
            key_proj: DenseMatrix::zeros(d, d),
            query: vec![0.0; d],
            risk_head: RiskHead::zeros(d),
            heads: self.heads,
            key_dropout_rate: self.key_dropout_rate,
        }
    }
}
