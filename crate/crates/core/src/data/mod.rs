//! Dataset ingestion: bag files, the JSON manifest, the background patch
//! filter and the synthetic planted-signal generator.

mod bag;
mod filter;
mod synth;

pub use bag::{decode_bag, encode_bag, load_bag, write_bag, BagHeader, BagReader};
pub use filter::{filter_background_patch, parse_ppm, FilterConfig, FilterDecision, RgbRaster};
pub use synth::{generate_synthetic, SyntheticConfig, SyntheticDataset};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingBag;
use crate::train::PatientRecord;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub time: f64,
    pub event: bool,
    pub bag: String,
    pub n_patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub d: usize,
    pub patients: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Checks everything that can be checked without touching bag files.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} unsupported",
                self.format_version
            )));
        }
        if self.d == 0 {
            return Err(Error::Config("manifest d must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.patients {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Config(format!("duplicate patient id {}", p.id)));
            }
            if !(p.time > 0.0) || !p.time.is_finite() {
                return Err(Error::Domain(format!("patient {}: time {} not positive", p.id, p.time)));
            }
            if p.n_patches == 0 {
                return Err(Error::Domain(format!("patient {}: empty bag", p.id)));
            }
        }
        Ok(())
    }

    /// Validates the manifest and every bag header under `dir`.
    pub fn validate_files(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        for p in &self.patients {
            let header = BagReader::open(dir.join(&p.bag))?.header();
            if header.d != self.d || header.n != p.n_patches {
                return Err(Error::Dimension(format!(
                    "patient {}: bag is {}x{}, manifest says {}x{}",
                    p.id, header.n, header.d, p.n_patches, self.d
                )));
            }
        }
        Ok(())
    }
}

/// Labels and bags held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub d: usize,
    pub records: Vec<PatientRecord>,
    pub bags: Vec<EmbeddingBag>,
}

/// Descriptive statistics of a cohort.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub patients: usize,
    pub patches: usize,
    pub events: usize,
    pub median_follow_up: f64,
}

impl Dataset {
    pub fn new(name: impl Into<String>, records: Vec<PatientRecord>, bags: Vec<EmbeddingBag>) -> Result<Self> {
        if records.len() != bags.len() {
            return Err(Error::Dimension(format!(
                "{} records for {} bags",
                records.len(),
                bags.len()
            )));
        }
        let d = bags.first().map_or(0, EmbeddingBag::d);
        for (r, b) in records.iter().zip(&bags) {
            r.validate()?;
            if b.d() != d {
                return Err(Error::Dimension(format!(
                    "patient {}: d = {}, expected {d}",
                    r.id,
                    b.d()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            d,
            records,
            bags,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.records[i].time).collect()
    }

    pub fn events(&self, idx: &[usize]) -> Vec<bool> {
        idx.iter().map(|&i| self.records[i].event).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut times: Vec<f64> = self.records.iter().map(|r| r.time).collect();
        times.sort_by(f64::total_cmp);
        let median = match times.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => times[n / 2],
            n => 0.5 * (times[n / 2 - 1] + times[n / 2]),
        };
        DatasetSummary {
            patients: self.len(),
            patches: self.bags.iter().map(EmbeddingBag::n).sum(),
            events: self.records.iter().filter(|r| r.event).count(),
            median_follow_up: median,
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            name: self.name.clone(),
            d: self.d,
            patients: self
                .records
                .iter()
                .zip(&self.bags)
                .map(|(r, b)| ManifestEntry {
                    id: r.id.clone(),
                    time: r.time,
                    event: r.event,
                    bag: r.bag.clone(),
                    n_patches: b.n(),
                })
                .collect(),
        }
    }
}

/// `id,time,event` with event as 0/1.
pub fn labels_csv(records: &[PatientRecord]) -> String {
    let mut out = String::from("id,time,event\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.id, r.time, u8::from(r.event));
    }
    out
}

pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    for (r, b) in data.records.iter().zip(&data.bags) {
        let path = dir.join(&r.bag);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_bag(b, &path)?;
    }
    let manifest = serde_json::to_string_pretty(&data.manifest())?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))?;
    let path = dir.join(LABELS_FILE);
    std::fs::write(&path, labels_csv(&data.records)).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads the manifest and every bag under `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut records = Vec::with_capacity(manifest.patients.len());
    let mut bags = Vec::with_capacity(manifest.patients.len());
    for p in &manifest.patients {
        let mut bag = load_bag(dir.join(&p.bag))?;
        if bag.d() != manifest.d || bag.n() != p.n_patches {
            return Err(Error::Dimension(format!(
                "patient {}: bag is {}x{}, manifest says {}x{}",
                p.id,
                bag.n(),
                bag.d(),
                p.n_patches,
                manifest.d
            )));
        }
        bag.patient_id = p.id.clone();
        records.push(PatientRecord {
            id: p.id.clone(),
            time: p.time,
            event: p.event,
            bag: p.bag.clone(),
        });
        bags.push(bag);
    }
    let mut data = Dataset::new(manifest.name, records, bags)?;
    data.d = manifest.d;
    Ok(data)
}
