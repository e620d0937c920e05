//! Line-delimited JSON metrics: one record per line, tagged by `kind`.
//!
//! ```text
//! {"kind":"train","iteration":1,"total":41.2,"classification":41.2,"l1":30.1,"l2":31.0,"l3":30.7,"le":49.4,"distill":0.0}
//! {"kind":"eval","iteration":100,"accuracy":0.91,"ci95":0.012,"episodes":200}
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Train(TrainRecord),
    Eval(EvalRecord),
}

/// Loss components of one iteration, summed over generations and episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    /// `classification + distill`.
    pub total: f64,
    pub classification: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub le: f64,
    /// The weighted distillation term; zero outside distillation.
    pub distill: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
}

pub fn to_lines(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metric records serialize"));
        out.push('\n');
    }
    out
}

pub fn write(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_lines(records).as_bytes())?;
    Ok(())
}

/// Parses a metrics log; blank lines are skipped, anything else malformed is
/// reported with its 1-based line number.
pub fn parse(text: &str) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Metrics {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    parse(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let recs = vec![
            MetricRecord::Train(TrainRecord {
                iteration: 1,
                total: 1.5,
                classification: 1.25,
                l1: 1.0,
                l2: 0.5,
                l3: 0.75,
                le: 1.0,
                distill: 0.25,
            }),
            MetricRecord::Eval(EvalRecord {
                iteration: 1,
                accuracy: 0.5,
                ci95: 0.1,
                episodes: 10,
            }),
        ];
        let text = to_lines(&recs);
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"kind\":\"train\""));
        assert_eq!(parse(&text).unwrap(), recs);
    }

    #[test]
    fn malformed_line_is_numbered() {
        let text = "{\"kind\":\"eval\",\"iteration\":1,\"accuracy\":0.5,\"ci95\":0.0,\"episodes\":3}\n\nnot json\n";
        match parse(text) {
            Err(Error::Metrics { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
