use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::MtsSample;
use crate::error::{Error, Result};

/// Reads a line-delimited sample file. Blank lines are skipped.
pub fn read_samples(path: &Path) -> Result<Vec<MtsSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg,
        };
        let sample: MtsSample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        sample.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[MtsSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
