//! Multivariate time-series samples: ingestion, windowing, normalization,
//! patching, splitting and synthetic corpora.

mod io;
mod normalize;
mod prepared;
mod rul;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use io::{read_samples, write_samples};
pub use normalize::NormalizationStats;
pub use prepared::{
    write_atomically, DatasetMeta, PreparedDataset, META_FILE, NORMALIZATION_FILE, TEST_FILE, TRAIN_FILE, VALIDATION_FILE,
};
pub use rul::{
    ingest_rul_corpus, ingest_rul_test, load_cmapss, parse_cmapss, parse_rul_file, CmapssFiles, CmapssLayout,
    CmapssPreparation, RulIngest, RulUnit,
    CMAPSS_SENSOR_NAMES, DEFAULT_RUL_CAP,
};
pub use split::{split_by_subject, split_windows, DatasetSplit};
pub use synthetic::{group_consistent_embeddings, make_synthetic, SyntheticCorpus, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// One multivariate window: `n` sensors by `l` timestamps, sensor-major.
///
/// `label` is a regression target or a class index stored as a real; the
/// task kind decides which.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtsSample {
    pub id: String,
    pub sensors: Vec<String>,
    pub n: usize,
    pub l: usize,
    pub label: f64,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl MtsSample {
    pub fn new(id: impl Into<String>, sensors: Vec<String>, l: usize, values: Vec<f64>, label: f64) -> Result<Self> {
        let s = MtsSample {
            id: id.into(),
            n: sensors.len(),
            sensors,
            l,
            label,
            values,
            subject: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid(format!("sample {}: need at least 2 sensors, got {}", self.id, self.n)));
        }
        if self.sensors.len() != self.n {
            return Err(Error::invalid(format!(
                "sample {}: {} sensor names for n = {}",
                self.id,
                self.sensors.len(),
                self.n
            )));
        }
        if self.l == 0 || self.values.len() != self.n * self.l {
            return Err(Error::invalid(format!(
                "sample {}: expected {}x{} values, got {}",
                self.id,
                self.n,
                self.l,
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "sample" });
        }
        Ok(())
    }

    pub fn sensor_row(&self, i: usize) -> &[f64] {
        &self.values[i * self.l..(i + 1) * self.l]
    }

    pub fn signal(&self) -> Tensor {
        Tensor::from_parts(vec![self.n, self.l], self.values.clone())
    }

    pub fn class_index(&self) -> usize {
        self.label.round() as usize
    }

    /// Keeps every `interval`-th timestamp starting at 0.
    pub fn downsample(&self, interval: usize) -> Result<MtsSample> {
        if interval == 0 {
            return Err(Error::invalid("downsample interval must be at least 1"));
        }
        let l = self.l.div_ceil(interval);
        let values = (0..self.n)
            .flat_map(|i| self.sensor_row(i).iter().step_by(interval).copied())
            .collect();
        Ok(MtsSample {
            l,
            values,
            ..self.clone()
        })
    }

    /// Splits the sample into `floor(l / patch_size)` patches of `n x patch_size`;
    /// trailing timestamps that do not fill a patch are discarded.
    pub fn partition(&self, patch_size: usize) -> Result<PatchSet> {
        if patch_size == 0 || patch_size > self.l {
            return Err(Error::invalid(format!(
                "patch size {patch_size} invalid for sample length {}",
                self.l
            )));
        }
        let count = self.l / patch_size;
        let patches = (0..count)
            .map(|t| {
                let vals = (0..self.n)
                    .flat_map(|i| self.sensor_row(i)[t * patch_size..(t + 1) * patch_size].iter().copied())
                    .collect();
                Tensor::from_parts(vec![self.n, patch_size], vals)
            })
            .collect();
        Ok(PatchSet {
            patches,
            patch_size,
            n: self.n,
        })
    }
}

/// Patches of one sample, each `n x patch_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Tensor>,
    pub patch_size: usize,
    pub n: usize,
}

impl PatchSet {
    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    /// Patch `t`, sensor `i`.
    pub fn slice(&self, t: usize, i: usize) -> &[f64] {
        self.patches[t].row(i)
    }
}

/// Task kind of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification { class_names: Vec<String> },
}

impl Task {
    pub fn output_width(&self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { class_names } => class_names.len(),
        }
    }
}
