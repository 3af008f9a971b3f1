//! On-disk layout of a prepared corpus: one directory holding the three
//! normalized split files, their metadata and the normalization statistics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_samples, write_samples, DatasetSplit, NormalizationStats, Task};
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const META_FILE: &str = "meta.json";
pub const NORMALIZATION_FILE: &str = "normalization.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub task: Task,
    /// Phrase substituted into label prompts.
    pub category: String,
    pub sensors: Vec<String>,
    pub length: usize,
    /// Train, validation and test sample counts.
    pub counts: [usize; 3],
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub meta: DatasetMeta,
    pub split: DatasetSplit,
    pub normalization: NormalizationStats,
}

fn with_path<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

impl PreparedDataset {
    /// Normalizes `raw` with statistics fitted on its training split.
    pub fn from_raw(raw: &DatasetSplit, task: Task, category: impl Into<String>) -> Result<Self> {
        let first = raw
            .train
            .first()
            .ok_or_else(|| Error::invalid("training split is empty"))?;
        for s in raw.train.iter().chain(&raw.validation).chain(&raw.test) {
            if s.sensors != first.sensors || s.l != first.l {
                return Err(Error::invalid(format!(
                    "sample {} has sensors {:?} over {} steps, expected {:?} over {}",
                    s.id, s.sensors, s.l, first.sensors, first.l
                )));
            }
        }
        let (split, normalization) = raw.normalized()?;
        Ok(PreparedDataset {
            meta: DatasetMeta {
                task,
                category: category.into(),
                sensors: first.sensors.clone(),
                length: first.l,
                counts: [split.train.len(), split.validation.len(), split.test.len()],
                split_ratios: split.ratios,
                split_seed: split.seed,
            },
            split,
            normalization,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        with_path(dir, fs::create_dir_all(dir))?;
        write_samples(&dir.join(TRAIN_FILE), &self.split.train)?;
        write_samples(&dir.join(VALIDATION_FILE), &self.split.validation)?;
        write_samples(&dir.join(TEST_FILE), &self.split.test)?;
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        fs::write(dir.join(NORMALIZATION_FILE), serde_json::to_string_pretty(&self.normalization)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            with_path(&path, fs::read_to_string(&path))
        };
        let meta: DatasetMeta = serde_json::from_str(&read(META_FILE)?)
            .map_err(|e| Error::invalid(format!("{}: {e}", dir.join(META_FILE).display())))?;
        let normalization: NormalizationStats = serde_json::from_str(&read(NORMALIZATION_FILE)?)
            .map_err(|e| Error::invalid(format!("{}: {e}", dir.join(NORMALIZATION_FILE).display())))?;
        let samples = |name: &str| {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::invalid(format!("{}: missing split file", path.display())));
            }
            read_samples(&path)
        };
        let split = DatasetSplit {
            train: samples(TRAIN_FILE)?,
            validation: samples(VALIDATION_FILE)?,
            test: samples(TEST_FILE)?,
            ratios: meta.split_ratios,
            seed: meta.split_seed,
        };
        let counts = [split.train.len(), split.validation.len(), split.test.len()];
        if counts != meta.counts {
            return Err(Error::invalid(format!(
                "{}: split sizes {counts:?} differ from metadata {:?}",
                dir.display(),
                meta.counts
            )));
        }
        Ok(PreparedDataset {
            meta,
            split,
            normalization,
        })
    }
}

/// Runs `fill` on a fresh sibling directory of `out` and moves the result
/// into place only when `fill` succeeds, replacing any previous `out`.
pub fn write_atomically(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{}: not a directory name", out.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    with_path(&parent, fs::create_dir_all(&parent))?;
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if staging.exists() {
        with_path(&staging, fs::remove_dir_all(&staging))?;
    }
    with_path(&staging, fs::create_dir(&staging))?;
    if let Err(e) = fill(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out.exists() {
        let previous = parent.join(format!(".{name}.previous-{}", std::process::id()));
        with_path(out, fs::rename(out, &previous))?;
        with_path(out, fs::rename(&staging, out))?;
        with_path(&previous, fs::remove_dir_all(&previous))?;
    } else {
        with_path(out, fs::rename(&staging, out))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MtsSample;

    fn split() -> DatasetSplit {
        let names = vec!["a".to_string(), "b".to_string()];
        let s = |k: usize| MtsSample::new(format!("s{k}"), names.clone(), 3, (0..6).map(|v| (v * k) as f64).collect(), 1.0).unwrap();
        DatasetSplit {
            train: vec![s(1), s(2)],
            validation: vec![s(3)],
            test: vec![s(4)],
            ratios: [0.5, 0.25, 0.25],
            seed: 3,
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("prepared");
        let p = PreparedDataset::from_raw(&split(), Task::Regression, "remaining useful life").unwrap();
        write_atomically(&out, |d| p.save(d)).unwrap();
        assert_eq!(PreparedDataset::load(&out).unwrap(), p);
        assert_eq!(p.meta.counts, [2, 1, 1]);
        // every training sensor spans exactly [0, 1]
        for i in 0..2 {
            let row: Vec<f64> = p.split.train.iter().flat_map(|s| s.sensor_row(i).to_vec()).collect();
            assert_eq!(row.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }

    #[test]
    fn failed_fill_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("prepared");
        let err = write_atomically(&out, |d| {
            fs::write(d.join("train.jsonl"), "partial")?;
            Err(Error::invalid("boom"))
        });
        assert!(err.is_err());
        assert!(!out.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn rewrite_replaces_previous_contents() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("prepared");
        write_atomically(&out, |d| Ok(fs::write(d.join("old"), "x")?)).unwrap();
        write_atomically(&out, |d| Ok(fs::write(d.join("new"), "y")?)).unwrap();
        assert!(out.join("new").exists());
        assert!(!out.join("old").exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = PreparedDataset::from_raw(&split(), Task::Regression, "x").unwrap();
        p.save(dir.path()).unwrap();
        fs::write(dir.path().join(TEST_FILE), "").unwrap();
        assert!(PreparedDataset::load(dir.path()).unwrap_err().to_string().contains("split sizes"));
    }
}
