use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngStream};

/// One keep/drop decision per feature column, shared by every patient in
/// the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDropoutMask {
    pub keep: Vec<bool>,
    pub rate: f64,
}

impl FeatureDropoutMask {
    pub fn sample(d: usize, rate: f64, rng: &mut RngStream) -> Result<Self> {
        check_rate(rate)?;
        let keep = if rate == 0.0 {
            vec![true; d]
        } else {
            (0..d).map(|_| rng.bernoulli(1.0 - rate)).collect()
        };
        Ok(Self { keep, rate })
    }

    /// `1 / (1 - rate)` for kept columns, zero otherwise.
    pub fn multipliers(&self) -> Vec<f64> {
        let scale = 1.0 / (1.0 - self.rate);
        self.keep
            .iter()
            .map(|&k| if k { scale } else { 0.0 })
            .collect()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len().max(1) as f64
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    Ok(())
}

/// Applies batch-shared inverted dropout to a patients x d matrix of slide
/// vectors. Identity when `training` is false or the rate is zero.
pub fn feature_dropout(
    pooled: &DenseMatrix,
    rate: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<DenseMatrix> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(pooled.clone());
    }
    let mask = FeatureDropoutMask::sample(pooled.cols(), rate, rng)?.multipliers();
    let mut out = pooled.clone();
    for r in 0..out.rows() {
        for (v, m) in out.row_mut(r).iter_mut().zip(&mask) {
            *v *= m;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random(rng: &mut RngStream, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::new(r, c, (0..r * c).map(|_| rng.normal() + 3.0).collect()).unwrap()
    }

    #[test]
    fn zero_rate_and_inference_are_identity() {
        let mut rng = RngStream::new(1, "dropout");
        let s = random(&mut rng, 3, 16);
        let out = feature_dropout(&s, 0.0, &mut rng, true).unwrap();
        assert_eq!(out, s);
        let out = feature_dropout(&s, 0.8, &mut rng, false).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn invalid_rates() {
        let s = DenseMatrix::zeros(1, 2);
        let mut rng = RngStream::new(1, "dropout");
        assert!(matches!(feature_dropout(&s, 1.0, &mut rng, true), Err(Error::Config(_))));
        assert!(matches!(feature_dropout(&s, -0.1, &mut rng, true), Err(Error::Config(_))));
    }

    #[test]
    fn zero_pattern_is_shared_across_patients() {
        let mut rng = RngStream::new(5, "dropout");
        let s = random(&mut rng, 2, 64);
        let out = feature_dropout(&s, 0.5, &mut rng, true).unwrap();
        for c in 0..64 {
            assert_eq!(out.get(0, c) == 0.0, out.get(1, c) == 0.0);
            if out.get(0, c) != 0.0 {
                assert_eq!(out.get(0, c), s.get(0, c) * 2.0);
            }
        }
    }

    proptest! {
        // With d = 512 and keep probability 1/2 the kept count has sd sqrt(128) ~ 11.3,
        // so [0.40, 0.60] is a +-4.5 sd band.
        #[test]
        fn kept_fraction_stays_near_half(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed, "dropout");
            let m = FeatureDropoutMask::sample(512, 0.5, &mut rng).unwrap();
            let f = m.kept_fraction();
            prop_assert!((0.40..=0.60).contains(&f));
        }

        #[test]
        fn columns_never_mixed(seed in any::<u64>(), rate in 0.05f64..0.95) {
            let mut rng = RngStream::new(seed, "dropout");
            let s = random(&mut rng, 5, 20);
            let out = feature_dropout(&s, rate, &mut rng, true).unwrap();
            for c in 0..20 {
                let zeros = (0..5).filter(|&r| out.get(r, c) == 0.0).count();
                prop_assert!(zeros == 0 || zeros == 5);
            }
        }
    }
}
