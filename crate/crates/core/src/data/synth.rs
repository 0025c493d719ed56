//! Planted-signal generator.
//!
//! Patient `i` draws a signal prevalence `pi_i`, then each patch comes from
//! the signal component with probability `pi_i` and otherwise from one of
//! the background components chosen uniformly. Component `g` is an
//! isotropic Gaussian centred at `separation * e_g`. The latent risk is
//! `z_i = pi_i`, survival is exponential with rate
//! `baseline_rate * exp(beta * z_i)` and censoring is an independent
//! exponential.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::EmbeddingBag;
use crate::numerics::{DenseMatrix, RngStream};
use crate::train::PatientRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    pub patients: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub dim: usize,
    /// Number of mixture components, signal included.
    pub components: usize,
    pub signal_component: usize,
    /// Distance of each component mean from the origin.
    pub separation: f64,
    pub noise_sd: f64,
    pub prevalence_low: f64,
    pub prevalence_high: f64,
    pub beta: f64,
    pub baseline_rate: f64,
    /// Rate of the censoring exponential; zero disables censoring.
    pub censoring_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            patients: 400,
            patches_min: 64,
            patches_max: 64,
            dim: 32,
            components: 4,
            signal_component: 0,
            separation: 2.0,
            noise_sd: 1.0,
            prevalence_low: 0.0,
            prevalence_high: 0.3,
            beta: 3.0,
            baseline_rate: 0.1,
            censoring_rate: 0.05,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patients == 0 || self.dim == 0 {
            return fail("patients and dim must be positive".into());
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return fail(format!(
                "patch range [{}, {}] is empty or starts at zero",
                self.patches_min, self.patches_max
            ));
        }
        if self.components < 2 || self.components > self.dim {
            return fail(format!(
                "components = {} must lie in [2, dim = {}]",
                self.components, self.dim
            ));
        }
        if self.signal_component >= self.components {
            return fail(format!(
                "signal_component {} out of range for {} components",
                self.signal_component, self.components
            ));
        }
        if !(0.0..=1.0).contains(&self.prevalence_low)
            || !(0.0..=1.0).contains(&self.prevalence_high)
            || self.prevalence_low > self.prevalence_high
        {
            return fail(format!(
                "prevalence range [{}, {}] must lie within [0, 1]",
                self.prevalence_low, self.prevalence_high
            ));
        }
        if !(self.baseline_rate > 0.0) || !(self.censoring_rate >= 0.0) {
            return fail("baseline_rate must be positive and censoring_rate non-negative".into());
        }
        if !(self.noise_sd >= 0.0) || !self.separation.is_finite() || !self.beta.is_finite() {
            return fail("noise_sd, separation and beta must be finite, noise_sd >= 0".into());
        }
        Ok(())
    }

    /// Non-fatal problems, such as a signal component that cannot be told
    /// apart from the background.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.separation == 0.0 {
            out.push("separation is 0: signal patches are indistinguishable from background".into());
        }
        if self.prevalence_high == 0.0 {
            out.push("prevalence is identically 0: no signal patches are drawn".into());
        }
        out
    }
}

/// A generated cohort together with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Latent risk `z_i` (the signal prevalence), aligned with the records.
    pub latent: Vec<f64>,
    /// Realised number of signal patches per bag.
    pub signal_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

impl SyntheticDataset {
    /// `id,latent,signal_patches,patches`.
    pub fn truth_csv(&self) -> String {
        let mut out = String::from("id,latent,signal_patches,patches\n");
        for ((r, z), (c, b)) in self
            .dataset
            .records
            .iter()
            .zip(&self.latent)
            .zip(self.signal_counts.iter().zip(&self.dataset.bags))
        {
            let _ = writeln!(out, "{},{},{},{}", r.id, z, c, b.n());
        }
        out
    }

    /// c-index of the latent risk, the best any model can do in expectation.
    pub fn oracle_cindex(&self) -> Result<f64> {
        let idx = self.dataset.all_indices();
        crate::eval::c_index(
            &self.latent,
            &self.dataset.times(&idx),
            &self.dataset.events(&idx),
        )
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let root = RngStream::new(config.seed, "synth");
    let width = (config.patients.max(1) as f64).log10().floor() as usize + 1;
    let background: Vec<usize> = (0..config.components)
        .filter(|&g| g != config.signal_component)
        .collect();

    let mut records = Vec::with_capacity(config.patients);
    let mut bags = Vec::with_capacity(config.patients);
    let mut latent = Vec::with_capacity(config.patients);
    let mut signal_counts = Vec::with_capacity(config.patients);
    for i in 0..config.patients {
        let id = format!("P{:0width$}", i + 1, width = width.max(4));
        let mut rng = root.derive(&id);
        let pi = rng.uniform_range(config.prevalence_low, config.prevalence_high);
        let n = config.patches_min + rng.below(config.patches_max - config.patches_min + 1);
        let mut values = Vec::with_capacity(n * config.dim);
        let mut count = 0;
        for _ in 0..n {
            let component = if rng.uniform() < pi {
                count += 1;
                config.signal_component
            } else {
                background[rng.below(background.len())]
            };
            for c in 0..config.dim {
                let mean = if c == component { config.separation } else { 0.0 };
                values.push(f64::from((mean + config.noise_sd * rng.normal()) as f32));
            }
        }
        let hazard = config.baseline_rate * (config.beta * pi).exp();
        let death = rng.exponential(hazard);
        let censor = if config.censoring_rate > 0.0 {
            rng.exponential(config.censoring_rate)
        } else {
            f64::INFINITY
        };
        let time = death.min(censor).max(f64::MIN_POSITIVE);
        let bag = format!("bags/{id}.mhbg");
        bags.push(EmbeddingBag::new(id.clone(), DenseMatrix::new(n, config.dim, values)?)?);
        records.push(PatientRecord {
            id,
            time,
            event: death <= censor,
            bag,
        });
        latent.push(pi);
        signal_counts.push(count);
    }
    Ok(SyntheticDataset {
        dataset: Dataset::new(config.name.clone(), records, bags)?,
        latent,
        signal_counts,
        warnings: config.warnings(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            patients: 60,
            patches_min: 8,
            patches_max: 12,
            dim: 8,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_synthetic(&small(3)).unwrap();
        let b = generate_synthetic(&small(3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.latent, b.latent);
        let c = generate_synthetic(&small(4)).unwrap();
        assert_ne!(a.latent, c.latent);
    }

    #[test]
    fn shapes_and_ranges() {
        let s = generate_synthetic(&small(1)).unwrap();
        assert_eq!(s.dataset.len(), 60);
        for (b, (&z, &c)) in s.dataset.bags.iter().zip(s.latent.iter().zip(&s.signal_counts)) {
            assert!((8..=12).contains(&b.n()));
            assert_eq!(b.d(), 8);
            assert!((0.0..=0.3).contains(&z));
            assert!(c <= b.n());
            assert!(b.features.as_slice().iter().all(|v| f64::from(*v as f32) == *v));
        }
    }

    #[test]
    fn no_censoring_means_every_death_observed() {
        let cfg = SyntheticConfig {
            censoring_rate: 0.0,
            ..small(9)
        };
        let s = generate_synthetic(&cfg).unwrap();
        assert!(s.dataset.records.iter().all(|r| r.event));
    }

    #[test]
    fn no_hazard_effect_gives_chance_oracle() {
        let cfg = SyntheticConfig {
            patients: 500,
            patches_min: 2,
            patches_max: 2,
            beta: 0.0,
            ..small(11)
        };
        let c = generate_synthetic(&cfg).unwrap().oracle_cindex().unwrap();
        assert!((c - 0.5).abs() <= 0.05, "oracle {c}");
    }

    #[test]
    fn degenerate_configs() {
        let cfg = SyntheticConfig {
            separation: 0.0,
            ..small(1)
        };
        assert_eq!(generate_synthetic(&cfg).unwrap().warnings.len(), 1);
        let bad = SyntheticConfig {
            signal_component: 9,
            ..small(1)
        };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn truth_table_has_a_row_per_patient() {
        let s = generate_synthetic(&small(2)).unwrap();
        assert_eq!(s.truth_csv().lines().count(), 61);
    }
}
