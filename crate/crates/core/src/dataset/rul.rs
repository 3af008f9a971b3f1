//! Run-to-failure corpora (C-MAPSS layout) and piece-wise linear RUL labels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{split_by_subject, DatasetSplit, MtsSample};
use crate::error::{Error, Result};

/// Default cap of the piece-wise linear RUL target.
pub const DEFAULT_RUL_CAP: f64 = 125.0;

/// Names of the 21 C-MAPSS sensor channels, 1-based index `k` at `[k - 1]`.
pub const CMAPSS_SENSOR_NAMES: [&str; 21] = [
    "total temperature at fan inlet",
    "total temperature at LPC outlet",
    "total temperature at HPC outlet",
    "total temperature at LPT outlet",
    "pressure at fan inlet",
    "total pressure in bypass-duct",
    "total pressure at HPC outlet",
    "physical fan speed",
    "physical core speed",
    "engine pressure ratio",
    "static pressure at HPC outlet",
    "ratio of fuel flow to Ps30",
    "corrected fan speed",
    "corrected core speed",
    "bypass ratio",
    "burner fuel-air ratio",
    "bleed enthalpy",
    "demanded fan speed",
    "demanded corrected fan speed",
    "HPT coolant bleed",
    "LPT coolant bleed",
];

/// One run-to-failure unit: `sensors.len()` rows by `cycles` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct RulUnit {
    pub id: String,
    pub sensors: Vec<String>,
    pub cycles: usize,
    /// Sensor-major values, `sensors.len() * cycles`.
    pub values: Vec<f64>,
}

/// Result of windowing: samples plus the ids of units that were too short.
#[derive(Clone, Debug, Default)]
pub struct RulIngest {
    pub samples: Vec<MtsSample>,
    pub skipped_units: Vec<String>,
}

/// Slides a window of `window` cycles with `stride` over each unit. The
/// window starting at `a * stride` is labelled `min(T - window - a * stride, cap)`.
/// Units shorter than the window are skipped and reported.
pub fn ingest_rul_corpus(units: &[RulUnit], window: usize, stride: usize, cap: f64) -> Result<RulIngest> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("window and stride must be at least 1"));
    }
    let mut out = RulIngest::default();
    for unit in units {
        let t_len = unit.cycles;
        if t_len < window {
            log::warn!("unit {}: {} cycles shorter than window {}, skipped", unit.id, t_len, window);
            out.skipped_units.push(unit.id.clone());
            continue;
        }
        let n = unit.sensors.len();
        let positions = (t_len - window) / stride + 1;
        for a in 0..positions {
            let start = a * stride;
            let values = (0..n)
                .flat_map(|i| unit.values[i * t_len + start..i * t_len + start + window].iter().copied())
                .collect();
            let label = ((t_len - window - start) as f64).min(cap);
            let sample = MtsSample::new(format!("{}-{a}", unit.id), unit.sensors.clone(), window, values, label)?
                .with_subject(unit.id.clone());
            out.samples.push(sample);
        }
    }
    Ok(out)
}

/// Test-set windowing: the final `window` cycles of each truncated unit,
/// labelled with its ground-truth remaining life (capped). `ground_truth`
/// is aligned with `units`.
pub fn ingest_rul_test(units: &[RulUnit], ground_truth: &[f64], window: usize, cap: f64) -> Result<RulIngest> {
    if units.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} test units but {} ground-truth values",
            units.len(),
            ground_truth.len()
        )));
    }
    let mut out = RulIngest::default();
    for (unit, &rul) in units.iter().zip(ground_truth) {
        let t_len = unit.cycles;
        if t_len < window {
            log::warn!("unit {}: {} cycles shorter than window {}, skipped", unit.id, t_len, window);
            out.skipped_units.push(unit.id.clone());
            continue;
        }
        let start = t_len - window;
        let values = (0..unit.sensors.len())
            .flat_map(|i| unit.values[i * t_len + start..(i + 1) * t_len].iter().copied())
            .collect();
        let sample = MtsSample::new(format!("{}-last", unit.id), unit.sensors.clone(), window, values, rul.min(cap))?
            .with_subject(unit.id.clone());
        out.samples.push(sample);
    }
    Ok(out)
}

/// Column layout of a whitespace-delimited run-to-failure file.
#[derive(Clone, Debug, PartialEq)]
pub struct CmapssLayout {
    pub unit_col: usize,
    pub cycle_col: usize,
    /// Column of sensor 1 (0-based).
    pub first_sensor_col: usize,
    /// 1-based sensor indices to keep.
    pub retained: Vec<usize>,
}

impl Default for CmapssLayout {
    fn default() -> Self {
        let constant = [1, 5, 6, 10, 16, 18, 19];
        CmapssLayout {
            unit_col: 0,
            cycle_col: 1,
            first_sensor_col: 5,
            retained: (1..=21).filter(|k| !constant.contains(k)).collect(),
        }
    }
}

impl CmapssLayout {
    pub fn sensor_names(&self) -> Vec<String> {
        self.retained
            .iter()
            .map(|&k| {
                CMAPSS_SENSOR_NAMES
                    .get(k - 1)
                    .map_or_else(|| format!("sensor {k}"), |s| s.to_string())
            })
            .collect()
    }
}

/// Parses a C-MAPSS style file into units ordered by unit id, rows sorted by cycle.
pub fn parse_cmapss(text: &str, layout: &CmapssLayout, source: &Path) -> Result<Vec<RulUnit>> {
    let mut rows: BTreeMap<u64, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.display().to_string(),
            line: idx + 1,
            msg,
        };
        let num = |c: usize| -> Result<f64> {
            let s = cols.get(c).ok_or_else(|| err(format!("missing column {c}")))?;
            s.parse::<f64>().map_err(|e| err(format!("column {c}: {e}")))
        };
        let unit = num(layout.unit_col)? as u64;
        let cycle = num(layout.cycle_col)?;
        let sensors = layout
            .retained
            .iter()
            .map(|&k| num(layout.first_sensor_col + k - 1))
            .collect::<Result<Vec<_>>>()?;
        rows.entry(unit).or_default().push((cycle, sensors));
    }
    let names = layout.sensor_names();
    Ok(rows
        .into_iter()
        .map(|(unit, mut cycles)| {
            cycles.sort_by(|a, b| a.0.total_cmp(&b.0));
            let t_len = cycles.len();
            let n = names.len();
            let mut values = vec![0.0; n * t_len];
            for (t, (_, s)) in cycles.iter().enumerate() {
                for i in 0..n {
                    values[i * t_len + t] = s[i];
                }
            }
            RulUnit {
                id: format!("unit{unit}"),
                sensors: names.clone(),
                cycles: t_len,
                values,
            }
        })
        .collect())
}

/// Parses a one-value-per-line ground-truth RUL file.
pub fn parse_rul_file(text: &str, source: &Path) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: source.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Paths of one C-MAPSS subset (`train_FD002.txt`, `test_FD002.txt`,
/// `RUL_FD002.txt`).
#[derive(Clone, Debug, PartialEq)]
pub struct CmapssFiles {
    pub train: PathBuf,
    pub test: PathBuf,
    pub rul: PathBuf,
}

impl CmapssFiles {
    pub fn in_dir(dir: &Path, subset: &str) -> Self {
        CmapssFiles {
            train: dir.join(format!("train_{subset}.txt")),
            test: dir.join(format!("test_{subset}.txt")),
            rul: dir.join(format!("RUL_{subset}.txt")),
        }
    }
}

/// Windowing and split settings of a C-MAPSS subset.
#[derive(Clone, Debug, PartialEq)]
pub struct CmapssPreparation {
    pub layout: CmapssLayout,
    pub window: usize,
    pub stride: usize,
    pub cap: f64,
    /// Fraction of training units held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for CmapssPreparation {
    fn default() -> Self {
        CmapssPreparation {
            layout: CmapssLayout::default(),
            window: 50,
            stride: 1,
            cap: DEFAULT_RUL_CAP,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

/// Loads a subset: sliding windows over the training units, split per unit
/// into train and validation, and the last window of every test unit.
/// Returns the split (not normalized) and the ids of skipped short units.
pub fn load_cmapss(files: &CmapssFiles, prep: &CmapssPreparation) -> Result<(DatasetSplit, Vec<String>)> {
    let train_units = parse_cmapss(&read_text(&files.train)?, &prep.layout, &files.train)?;
    let test_units = parse_cmapss(&read_text(&files.test)?, &prep.layout, &files.test)?;
    let truth = parse_rul_file(&read_text(&files.rul)?, &files.rul)?;
    let windows = ingest_rul_corpus(&train_units, prep.window, prep.stride, prep.cap)?;
    let test = ingest_rul_test(&test_units, &truth, prep.window, prep.cap)?;
    let f = prep.validation_fraction;
    let mut split = split_by_subject(windows.samples, [1.0 - f, f, 0.0], prep.seed)?;
    split.test = test.samples;
    let mut skipped = windows.skipped_units;
    skipped.extend(test.skipped_units.into_iter().map(|u| format!("test {u}")));
    Ok((split, skipped))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn unit(cycles: usize) -> RulUnit {
        RulUnit {
            id: "u".into(),
            sensors: vec!["a".into(), "b".into()],
            cycles,
            values: (0..2 * cycles).map(|v| v as f64).collect(),
        }
    }

    #[test]
    fn capped_label_at_first_window() {
        let r = ingest_rul_corpus(&[unit(200)], 50, 1, 125.0).unwrap();
        assert_eq!(r.samples.len(), 151);
        assert_eq!(r.samples[0].label, 125.0);
        assert_eq!(r.samples[140].label, 10.0);
        assert_eq!(r.samples[150].label, 0.0);
    }

    #[test]
    fn window_equal_to_life_gives_one_sample() {
        let r = ingest_rul_corpus(&[unit(50)], 50, 1, 125.0).unwrap();
        assert_eq!(r.samples.len(), 1);
        assert_eq!(r.samples[0].label, 0.0);
    }

    #[test]
    fn short_unit_skipped() {
        let r = ingest_rul_corpus(&[unit(10), unit(12)], 11, 1, 125.0).unwrap();
        assert_eq!(r.skipped_units.len(), 1);
        assert_eq!(r.samples.len(), 2);
    }

    #[test]
    fn window_contents_follow_start() {
        let r = ingest_rul_corpus(&[unit(6)], 3, 2, 125.0).unwrap();
        assert_eq!(r.samples.len(), 2);
        assert_eq!(r.samples[1].sensor_row(0), &[2.0, 3.0, 4.0]);
        assert_eq!(r.samples[1].sensor_row(1), &[8.0, 9.0, 10.0]);
        assert_eq!(r.samples[1].label, 1.0);
    }

    #[test]
    fn labels_non_increasing_and_capped() {
        let r = ingest_rul_corpus(&[unit(300)], 30, 3, 125.0).unwrap();
        for w in r.samples.windows(2) {
            assert!(w[1].label <= w[0].label);
        }
        assert!(r.samples.iter().all(|s| s.label <= 125.0));
    }

    #[test]
    fn default_layout_keeps_fourteen_sensors() {
        let layout = CmapssLayout::default();
        assert_eq!(layout.retained, vec![2, 3, 4, 7, 8, 9, 11, 12, 13, 14, 15, 17, 20, 21]);
        let mut line = vec!["1".to_string(), "1".to_string(), "0".into(), "0".into(), "100".into()];
        line.extend((1..=21).map(|k| format!("{k}.5")));
        let mut second = line.clone();
        second[1] = "2".into();
        let text = format!("{}\n{}\n", second.join(" "), line.join(" "));
        let units = parse_cmapss(&text, &layout, Path::new("t")).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].cycles, 2);
        assert_eq!(units[0].sensors.len(), 14);
        assert_eq!(units[0].values[0], 2.5);
        assert_eq!(units[0].sensors[0], "total temperature at LPC outlet");
    }

    #[test]
    fn test_windows_take_the_tail() {
        let r = ingest_rul_test(&[unit(6), unit(2)], &[30.0, 200.0], 4, 125.0).unwrap();
        assert_eq!(r.samples.len(), 1);
        assert_eq!(r.skipped_units, vec!["u".to_string()]);
        assert_eq!(r.samples[0].label, 30.0);
        assert_eq!(r.samples[0].sensor_row(0), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(r.samples[0].sensor_row(1), &[8.0, 9.0, 10.0, 11.0]);
        assert!(ingest_rul_test(&[unit(6)], &[], 4, 125.0).is_err());
    }

    fn cmapss_text(lengths: &[usize]) -> String {
        let mut out = String::new();
        for (u, &len) in lengths.iter().enumerate() {
            for c in 1..=len {
                let mut cols = vec![format!("{}", u + 1), format!("{c}"), "0".into(), "0".into(), "100".into()];
                cols.extend((1..=21).map(|k| format!("{}", k * 1000 + c)));
                out.push_str(&cols.join(" "));
                out.push('\n');
            }
        }
        out
    }

    #[test]
    fn subset_loads_with_per_unit_validation() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train_FDX.txt"), cmapss_text(&[12, 14, 9, 13, 15])).unwrap();
        std::fs::write(dir.path().join("test_FDX.txt"), cmapss_text(&[11, 6])).unwrap();
        std::fs::write(dir.path().join("RUL_FDX.txt"), "40\n7\n").unwrap();
        let prep = CmapssPreparation {
            window: 10,
            ..CmapssPreparation::default()
        };
        let (split, skipped) = load_cmapss(&CmapssFiles::in_dir(dir.path(), "FDX"), &prep).unwrap();
        assert_eq!(skipped, vec!["unit3".to_string(), "test unit2".to_string()]);
        assert_eq!(split.train.len() + split.validation.len(), 3 + 5 + 4 + 6);
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.test[0].label, 40.0);
        assert_eq!(split.test[0].sensor_row(0)[9], 2011.0);
        let train_units: BTreeSet<_> = split.train.iter().map(|s| s.subject.clone()).collect();
        assert!(split.validation.iter().all(|s| !train_units.contains(&s.subject)));
        assert!(!split.validation.is_empty());

        std::fs::remove_file(dir.path().join("RUL_FDX.txt")).unwrap();
        let err = load_cmapss(&CmapssFiles::in_dir(dir.path(), "FDX"), &prep).unwrap_err();
        assert!(err.to_string().contains("RUL_FDX.txt"), "{err}");
    }
}
