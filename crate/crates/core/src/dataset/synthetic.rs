//! Synthetic corpora with known sensor groups.
//!
//! Sensors in one group share a latent sinusoid with a random phase drawn per
//! sample and group. Group `g` of class `c` completes `2 + c + g/2` cycles
//! over the window, so the class sets every group's frequency while the
//! phases tie sensors together only within their group.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, MtsSample, Task};
use crate::error::{Error, Result};
use crate::knowledge::{fallback_embedding, label_prompt, sensor_prompt, EmbeddingTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub sensors: usize,
    pub classes: usize,
    pub groups: usize,
    pub noise: f64,
    pub seed: u64,
    pub length: usize,
    pub train_per_class: usize,
    pub validation_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sensors: 6,
            classes: 3,
            groups: 3,
            noise: 0.3,
            seed: 7,
            length: 32,
            train_per_class: 20,
            validation_per_class: 20,
            test_per_class: 60,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub split: DatasetSplit,
    /// `sensors x sensors`, 1 within a group and 0 across groups.
    pub relation: Vec<Vec<f64>>,
    pub group_of: Vec<usize>,
    pub sensor_names: Vec<String>,
    pub task: Task,
    pub category: String,
}

impl SyntheticSpec {
    pub fn group_of(&self, sensor: usize) -> usize {
        sensor * self.groups / self.sensors
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.groups < 2 || spec.sensors < spec.groups || spec.classes < 2 || spec.length < 2 {
        return Err(Error::invalid(format!(
            "synthetic spec needs >= 2 groups, >= 1 sensor per group, >= 2 classes: {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let group_of: Vec<usize> = (0..spec.sensors).map(|i| spec.group_of(i)).collect();
    let gains: Vec<f64> = (0..spec.sensors).map(|_| rng.random_range(0.5..1.5)).collect();
    let offsets: Vec<f64> = (0..spec.sensors).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sensor_names: Vec<String> = (0..spec.sensors)
        .map(|i| format!("group {} channel {}", group_of[i], i))
        .collect();
    let class_names: Vec<String> = (0..spec.classes).map(|c| format!("pattern {c}")).collect();

    let make = |split: &str, per_class: usize, rng: &mut ChaCha8Rng| -> Result<Vec<MtsSample>> {
        let mut out = Vec::with_capacity(per_class * spec.classes);
        for k in 0..per_class {
            for c in 0..spec.classes {
                let phases: Vec<f64> = (0..spec.groups).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                let mut values = Vec::with_capacity(spec.sensors * spec.length);
                for i in 0..spec.sensors {
                    let g = group_of[i];
                    let cycles = 2.0 + c as f64 + g as f64 * 0.5;
                    for t in 0..spec.length {
                        let latent = (2.0 * PI * cycles * t as f64 / spec.length as f64 + phases[g]).sin();
                        let eps: f64 = StandardNormal.sample(rng);
                        values.push(gains[i] * latent + offsets[i] + spec.noise * eps);
                    }
                }
                let id = format!("{split}-{k}-{c}");
                out.push(MtsSample::new(id.clone(), sensor_names.clone(), spec.length, values, c as f64)?.with_subject(id));
            }
        }
        Ok(out)
    };
    let train = make("train", spec.train_per_class, &mut rng)?;
    let validation = make("val", spec.validation_per_class, &mut rng)?;
    let test = make("test", spec.test_per_class, &mut rng)?;
    let total = (spec.train_per_class + spec.validation_per_class + spec.test_per_class) as f64;
    let relation = (0..spec.sensors)
        .map(|i| {
            (0..spec.sensors)
                .map(|j| if group_of[i] == group_of[j] { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(SyntheticCorpus {
        split: DatasetSplit {
            train,
            validation,
            test,
            ratios: [
                spec.train_per_class as f64 / total,
                spec.validation_per_class as f64 / total,
                spec.test_per_class as f64 / total,
            ],
            seed: spec.seed,
        },
        relation,
        group_of,
        sensor_names,
        task: Task::Classification { class_names },
        category: "signal pattern".into(),
    })
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Embedding table whose sensor-prompt vectors are dominated by a shared
/// per-group direction, standing in for a text encoder that knows which
/// sensors are physically related.
pub fn group_consistent_embeddings(corpus: &SyntheticCorpus, patch_count: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let mut table = EmbeddingTable::new("synthetic-group-consistent", dim);
    let basis = |key: String| fallback_embedding(&key, seed, dim);
    for (i, name) in corpus.sensor_names.iter().enumerate() {
        let group = basis(format!("group:{}", corpus.group_of[i]));
        let own = basis(format!("sensor:{i}"));
        for t in 1..=patch_count {
            let time = basis(format!("time:{t}"));
            let v = (0..dim).map(|k| group[k] + 0.5 * own[k] + 0.25 * time[k]).collect();
            table.insert(sensor_prompt(name, t), unit(v));
        }
    }
    if let Task::Classification { class_names } = &corpus.task {
        for (c, name) in class_names.iter().enumerate() {
            table.insert(label_prompt(&corpus.category, name), basis(format!("class:{c}")));
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn noiseless_group_members_are_perfectly_correlated() {
        let spec = SyntheticSpec {
            sensors: 4,
            groups: 2,
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let corpus = make_synthetic(&spec).unwrap();
        let s = &corpus.split.train[0];
        assert!((correlation(s.sensor_row(0), s.sensor_row(1)) - 1.0).abs() < 1e-12);
        assert!((correlation(s.sensor_row(2), s.sensor_row(3)) - 1.0).abs() < 1e-12);
        assert_eq!(corpus.relation[0], vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn heavy_noise_washes_out_correlation() {
        let spec = SyntheticSpec {
            sensors: 4,
            groups: 2,
            noise: 1e4,
            length: 4000,
            ..SyntheticSpec::default()
        };
        let corpus = make_synthetic(&spec).unwrap();
        let s = &corpus.split.train[0];
        assert!(correlation(s.sensor_row(0), s.sensor_row(1)).abs() < 0.1);
        assert!(correlation(s.sensor_row(0), s.sensor_row(2)).abs() < 0.1);
    }

    #[test]
    fn single_group_rejected() {
        let spec = SyntheticSpec {
            groups: 1,
            ..SyntheticSpec::default()
        };
        assert!(make_synthetic(&spec).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = SyntheticSpec::default();
        let a = make_synthetic(&spec).unwrap();
        let b = make_synthetic(&spec).unwrap();
        assert_eq!(a.split, b.split);
        assert_eq!(a.split.train.len(), 60);
        assert_eq!(a.split.test.len(), 180);
    }

    #[test]
    fn group_consistent_table_links_group_members() {
        let corpus = make_synthetic(&SyntheticSpec::default()).unwrap();
        let table = group_consistent_embeddings(&corpus, 4, 64, 1);
        let v = |i: usize, t: usize| table.lookup(&sensor_prompt(&corpus.sensor_names[i], t)).unwrap().to_vec();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!(dot(&v(0, 1), &v(1, 1)) > dot(&v(0, 1), &v(2, 1)) + 0.3);
        assert_eq!(table.len(), 6 * 4 + 3);
    }
}
