use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MtsSample, NormalizationStats};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<MtsSample>,
    pub validation: Vec<MtsSample>,
    pub test: Vec<MtsSample>,
    /// Train / validation / test fractions used to build the split.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl DatasetSplit {
    /// Fits min-max statistics on the training split and applies them everywhere.
    pub fn normalized(&self) -> Result<(DatasetSplit, NormalizationStats)> {
        let stats = NormalizationStats::fit(&self.train)?;
        let split = DatasetSplit {
            train: stats.apply_all(&self.train)?,
            validation: stats.apply_all(&self.validation)?,
            test: stats.apply_all(&self.test)?,
            ratios: self.ratios,
            seed: self.seed,
        };
        Ok((split, stats))
    }
}

fn subject_of(s: &MtsSample) -> &str {
    s.subject.as_deref().unwrap_or(&s.id)
}

/// Assigns whole subjects (samples without a subject are their own subject)
/// to train / validation / test by shuffled subject order.
pub fn split_by_subject(samples: Vec<MtsSample>, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || total <= 0.0 {
        return Err(Error::invalid(format!("invalid split ratios {ratios:?}")));
    }
    let subjects: BTreeSet<&str> = samples.iter().map(subject_of).collect();
    let mut order: Vec<String> = subjects.into_iter().map(str::to_string).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = order.len();
    let n_train = ((ratios[0] / total) * k as f64).round() as usize;
    let n_val = (((ratios[0] + ratios[1]) / total) * k as f64).round() as usize - n_train;
    let bucket = |subj: &str| -> usize {
        let pos = order.iter().position(|s| s == subj).unwrap();
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };
    let mut parts: [Vec<MtsSample>; 3] = Default::default();
    for s in samples {
        let b = bucket(subject_of(&s));
        parts[b].push(s);
    }
    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        ratios,
        seed,
    })
}

/// Per-window split that ignores subjects.
pub fn split_windows(samples: Vec<MtsSample>, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let stripped = samples
        .into_iter()
        .map(|mut s| {
            s.subject = None;
            s
        })
        .collect();
    split_by_subject(stripped, ratios, seed)
}
