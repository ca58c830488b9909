use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::types::VideoSample;
use crate::config::write_atomic;
use crate::error::{Error, Result};

/// Writes one JSON record per line.
pub fn write_corpus(samples: &[VideoSample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for sample in samples {
        let line = serde_json::to_string(sample).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: 0,
            field: format!("sample {}", sample.id),
            message: e.to_string(),
        })?;
        writeln!(out, "{line}").expect("writing to a String");
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a corpus written by [`write_corpus`]. Blank lines are ignored.
pub fn read_corpus(path: &Path) -> Result<Vec<VideoSample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening corpus {}", path.display()), e))?;
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_record(&line, path, idx + 1)?);
    }
    Ok(samples)
}

pub(crate) fn parse_record<T: serde::de::DeserializeOwned>(
    line: &str,
    path: &Path,
    line_no: usize,
) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::Record {
            path: path.to_path_buf(),
            line: line_no,
            field: if field == "." { "<record>".into() } else { field },
            message: e.into_inner().to_string(),
        }
    })
}
