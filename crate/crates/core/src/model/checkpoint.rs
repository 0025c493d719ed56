//! Binary checkpoint format.
//!
//! Little-endian throughout. A multi-head attention checkpoint is
//!
//! ```text
//! "MHCK" | version u32 | d u32 | h u32 | key_dropout_rate f64
//! W_K (d*d, row-major) | Q (d) | fc_w (d) | fc_b (1)
//! ["ADAM" block] | "META" u32 len | UTF-8 JSON
//! ```
//!
//! Version 1 stores parameter arrays as f32, version 2 as f64. Baseline
//! models use magic "MHCB" with a kind tag and per-kind shapes, followed by
//! the same optional blocks. The optimizer block always stores f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AvgPoolParams, ClusterAttnParams, GatedAttnParams, Model, ModelParams, Parameters, RiskHead,
};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::train::AdamState;

const MAGIC_MH: &[u8; 4] = b"MHCK";
const MAGIC_BASELINE: &[u8; 4] = b"MHCB";
const TAG_ADAM: &[u8; 4] = b"ADAM";
const TAG_META: &[u8; 4] = b"META";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn from_version(v: u32, offset: u64) -> Result<Self> {
        match v {
            1 => Ok(Precision::F32),
            2 => Ok(Precision::F64),
            other => Err(Error::format(offset, format!("unsupported version {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub best_val_cindex: Option<f64>,
    pub steps: u64,
    #[serde(default)]
    pub best_epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub meta: CheckpointMeta,
}

struct Writer {
    buf: Vec<u8>,
    precision: Precision,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn array(&mut self, values: &[f64]) {
        match self.precision {
            Precision::F32 => {
                for &v in values {
                    self.buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for &v in values {
                    self.f64(v);
                }
            }
        }
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Dimension(format!("{what} = {v} does not fit in u32")))
}

pub fn encode(ck: &Checkpoint, precision: Precision) -> Result<Vec<u8>> {
    let mut w = Writer {
        buf: Vec::new(),
        precision,
    };
    match &ck.model {
        Model::MhAttn(p) => {
            p.validate()?;
            w.buf.extend_from_slice(MAGIC_MH);
            w.u32(precision.version());
            w.u32(dim_u32(p.query.len(), "d")?);
            w.u32(dim_u32(p.heads, "h")?);
            w.f64(p.key_dropout_rate);
        }
        other => {
            w.buf.extend_from_slice(MAGIC_BASELINE);
            w.u32(precision.version());
            let (tag, hidden, k) = match other {
                Model::AvgPool(_) => (1, 0, 0),
                Model::Gated(g) => (2, g.hidden(), 0),
                Model::Cluster(c) => (3, c.attn.hidden(), c.k()),
                Model::MhAttn(_) => unreachable!(),
            };
            w.u32(tag);
            w.u32(dim_u32(other.dim(), "d")?);
            w.u32(dim_u32(hidden, "hidden")?);
            w.u32(dim_u32(k, "k")?);
            if let Model::Cluster(c) = other {
                w.array(c.centroids.as_slice());
            }
        }
    }
    let arrays: Vec<&[f64]> = match &ck.model {
        Model::MhAttn(p) => p.arrays().into_iter().map(|(_, a)| a).collect(),
        Model::AvgPool(p) => p.arrays().into_iter().map(|(_, a)| a).collect(),
        Model::Gated(p) => p.arrays().into_iter().map(|(_, a)| a).collect(),
        Model::Cluster(p) => p.arrays().into_iter().map(|(_, a)| a).collect(),
    };
    for a in arrays {
        w.array(a);
    }
    if let Some(adam) = &ck.optimizer {
        w.buf.extend_from_slice(TAG_ADAM);
        w.u64(adam.step);
        w.f64(adam.beta1);
        w.f64(adam.beta2);
        w.f64(adam.eps);
        w.u32(dim_u32(adam.first.len(), "optimizer arrays")?);
        for (m, v) in adam.first.iter().zip(&adam.second) {
            w.u32(dim_u32(m.len(), "optimizer array length")?);
            for &x in m {
                w.f64(x);
            }
            for &x in v {
                w.f64(x);
            }
        }
    }
    let meta = serde_json::to_vec(&ck.meta)?;
    w.buf.extend_from_slice(TAG_META);
    w.u32(dim_u32(meta.len(), "metadata length")?);
    w.buf.extend_from_slice(&meta);
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    precision: Precision,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn array(&mut self, len: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos as u64;
        let out: Vec<f64> = match self.precision {
            Precision::F32 => self
                .take(len.checked_mul(4).ok_or_else(|| Error::format(start, "size overflow"))?, what)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            Precision::F64 => self
                .take(len.checked_mul(8).ok_or_else(|| Error::format(start, "size overflow"))?, what)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(start, format!("non-finite value in {what}")));
        }
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DenseMatrix> {
        let start = self.pos as u64;
        DenseMatrix::new(rows, cols, self.array(rows * cols, what)?)
            .map_err(|e| Error::format(start, e.to_string()))
    }

    fn head(&mut self, d: usize) -> Result<RiskHead> {
        let weights = self.array(d, "risk weights")?;
        let bias = self.array(1, "risk bias")?[0];
        Ok(RiskHead { weights, bias })
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader {
        buf,
        pos: 0,
        precision: Precision::F64,
    };
    let magic = r.take(4, "magic")?;
    let version_at = r.pos as u64;
    let version = r.u32("version")?;
    r.precision = Precision::from_version(version, version_at)?;
    let model = if magic == MAGIC_MH {
        let d = r.u32("d")? as usize;
        let h_at = r.pos as u64;
        let h = r.u32("h")? as usize;
        if h == 0 || d == 0 || d % h != 0 {
            return Err(Error::format(h_at, format!("h = {h} does not divide d = {d}")));
        }
        let rate_at = r.pos as u64;
        let key_dropout_rate = r.f64("key dropout rate")?;
        if !(0.0..1.0).contains(&key_dropout_rate) {
            return Err(Error::format(rate_at, "key dropout rate outside [0, 1)"));
        }
        let key_proj = r.matrix(d, d, "W_K")?;
        let query = r.array(d, "Q")?;
        let risk_head = r.head(d)?;
        Model::MhAttn(ModelParams {
            key_proj,
            query,
            risk_head,
            heads: h,
            key_dropout_rate,
        })
    } else if magic == MAGIC_BASELINE {
        let tag_at = r.pos as u64;
        let tag = r.u32("kind")?;
        let d = r.u32("d")? as usize;
        let hidden = r.u32("hidden")? as usize;
        let k = r.u32("k")? as usize;
        match tag {
            1 => Model::AvgPool(AvgPoolParams { risk_head: r.head(d)? }),
            2 | 3 => {
                let centroids = if tag == 3 {
                    Some(r.matrix(k, d, "centroids")?)
                } else {
                    None
                };
                let gated = GatedAttnParams {
                    proj: r.matrix(hidden, d, "gated projection")?,
                    gate: r.array(hidden, "gate")?,
                    risk_head: r.head(d)?,
                };
                match centroids {
                    Some(centroids) => Model::Cluster(ClusterAttnParams {
                        centroids,
                        attn: gated,
                    }),
                    None => Model::Gated(gated),
                }
            }
            other => return Err(Error::format(tag_at, format!("unknown model kind tag {other}"))),
        }
    } else {
        return Err(Error::format(0, "bad magic"));
    };

    let mut optimizer = None;
    let tag_at = r.pos as u64;
    let mut tag = r.take(4, "block tag")?;
    if tag == TAG_ADAM {
        let step = r.u64("adam step")?;
        let beta1 = r.f64("beta1")?;
        let beta2 = r.f64("beta2")?;
        let eps = r.f64("eps")?;
        let count = r.u32("adam array count")? as usize;
        let saved = r.precision;
        r.precision = Precision::F64;
        let mut first = Vec::with_capacity(count);
        let mut second = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32("adam array length")? as usize;
            first.push(r.array(len, "adam first moment")?);
            second.push(r.array(len, "adam second moment")?);
        }
        r.precision = saved;
        optimizer = Some(AdamState {
            first,
            second,
            step,
            beta1,
            beta2,
            eps,
        });
        tag = r.take(4, "block tag")?;
    }
    if tag != TAG_META {
        return Err(Error::format(tag_at, "expected ADAM or META block"));
    }
    let len = r.u32("metadata length")? as usize;
    let meta_at = r.pos as u64;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len, "metadata")?)
        .map_err(|e| Error::format(meta_at, format!("metadata: {e}")))?;
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after metadata"));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        meta,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint, precision: Precision) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ck, precision)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, SurvivalModel};
    use crate::numerics::RngStream;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 42,
            config_hash: "abc".into(),
            best_val_cindex: Some(0.712_345_678_901_234_5),
            steps: 1234,
            best_epoch: Some(300),
        }
    }

    #[test]
    fn mh_roundtrip_is_bit_exact() {
        let p = init_params(8, 2, &mut RngStream::new(3, "init"))
            .unwrap()
            .with_key_dropout(0.1)
            .unwrap();
        let mut adam = AdamState::new(&p);
        adam.step = 7;
        adam.first[0][3] = 0.125;
        adam.second[1][2] = 1e-9;
        let ck = Checkpoint {
            model: p.into(),
            optimizer: Some(adam),
            meta: meta(),
        };
        let bytes = encode(&ck, Precision::F64).unwrap();
        assert_eq!(&bytes[..4], b"MHCK");
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        let a = ck.model.as_mhattn().unwrap().flatten();
        let b = back.model.as_mhattn().unwrap().flatten();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn f32_layout_matches_header_contract() {
        let p = init_params(4, 2, &mut RngStream::new(3, "init")).unwrap();
        let ck = Checkpoint {
            model: p.clone().into(),
            optimizer: None,
            meta: meta(),
        };
        let bytes = encode(&ck, Precision::F32).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        // header 24 bytes + (16 + 4 + 4 + 1) f32 values, then META
        assert_eq!(&bytes[24 + 25 * 4..24 + 25 * 4 + 4], b"META");
        let back = decode(&bytes).unwrap();
        let q = &back.model.as_mhattn().unwrap().query;
        for (a, b) in q.iter().zip(&p.query) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn baseline_roundtrips() {
        let mut rng = RngStream::new(9, "init");
        let gated = GatedAttnParams::init(6, 5, &mut rng).unwrap();
        let cluster = ClusterAttnParams {
            centroids: DenseMatrix::new(3, 6, (0..18).map(|i| i as f64 * 0.5).collect()).unwrap(),
            attn: GatedAttnParams::init(6, 4, &mut rng).unwrap(),
        };
        for model in [
            Model::AvgPool(AvgPoolParams::init(6, &mut rng)),
            Model::Gated(gated),
            Model::Cluster(cluster),
        ] {
            let ck = Checkpoint {
                model,
                optimizer: None,
                meta: meta(),
            };
            assert_eq!(decode(&encode(&ck, Precision::F64).unwrap()).unwrap(), ck);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = init_params(4, 2, &mut RngStream::new(3, "init")).unwrap();
        let ck = Checkpoint {
            model: p.into(),
            optimizer: None,
            meta: meta(),
        };
        let bytes = encode(&ck, Precision::F64).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 4, .. })));

        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(decode(truncated), Err(Error::Format { .. })));
        assert!(matches!(decode(&bytes[..30]), Err(Error::Format { .. })));
    }

    #[test]
    fn dimension_mismatch_surfaces_at_use() {
        let p = init_params(8, 2, &mut RngStream::new(3, "init")).unwrap();
        let back = decode(
            &encode(
                &Checkpoint {
                    model: p.into(),
                    optimizer: None,
                    meta: meta(),
                },
                Precision::F64,
            )
            .unwrap(),
        )
        .unwrap();
        let m = back.model.as_mhattn().unwrap();
        assert!(matches!(m.check_dim(16), Err(Error::Dimension(_))));
    }
}
