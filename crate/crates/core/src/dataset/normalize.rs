use serde::{Deserialize, Serialize};

use super::MtsSample;
use crate::error::{Error, Result};

/// Per-sensor minimum and maximum over a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit(train: &[MtsSample]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::invalid("cannot fit normalization on an empty split"))?;
        let n = first.n;
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for s in train {
            if s.n != n {
                return Err(Error::invalid(format!("sample {} has {} sensors, expected {n}", s.id, s.n)));
            }
            for i in 0..n {
                for &v in s.sensor_row(i) {
                    min[i] = min[i].min(v);
                    max[i] = max[i].max(v);
                }
            }
        }
        Ok(NormalizationStats { min, max })
    }

    /// `(x - min) / (max - min)`; sensors with `max == min` map to 0.
    pub fn apply(&self, sample: &MtsSample) -> Result<MtsSample> {
        if sample.n != self.min.len() {
            return Err(Error::invalid(format!(
                "sample {} has {} sensors, stats cover {}",
                sample.id,
                sample.n,
                self.min.len()
            )));
        }
        let mut out = sample.clone();
        for i in 0..sample.n {
            let range = self.max[i] - self.min[i];
            for v in &mut out.values[i * sample.l..(i + 1) * sample.l] {
                *v = if range > 0.0 { (*v - self.min[i]) / range } else { 0.0 };
            }
        }
        Ok(out)
    }

    pub fn apply_all(&self, samples: &[MtsSample]) -> Result<Vec<MtsSample>> {
        samples.iter().map(|s| self.apply(s)).collect()
    }
}
