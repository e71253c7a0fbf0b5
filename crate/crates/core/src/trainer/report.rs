use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Metrics, Result, StreamNorms, TermMask, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub lr: f64,
    /// Gradient reversal strength at the end of the epoch; 0 without adversarial terms.
    pub grl_lambda: f64,
    /// Epoch means of each active term, unweighted, plus the weighted `total`.
    pub losses: BTreeMap<String, f64>,
    /// Ensemble metrics on `target_test`.
    pub metrics: Metrics,
    pub norms: Vec<StreamNorms>,
    /// Largest max/min ratio of source modality mean norms.
    pub norm_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub active_terms: TermMask,
    pub epochs: Vec<EpochRecord>,
    /// Target label reads observed inside optimization; always 0 for a completed run.
    pub target_label_reads: usize,
}

impl TrainReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs
            .last()
            .expect("a report has at least the initial evaluation")
    }
}

/// Writes `report.jsonl` (one epoch per line) and `summary.json` into `dir`.
pub fn write_report(report: &TrainReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join("report.jsonl"))?);
    for e in &report.epochs {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let summary = json!({
        "config": report.config,
        "weights": report.config.weights,
        "active_terms": report.active_terms,
        "epochs": report.epochs.len() - 1,
        "final": report.last().metrics,
        "final_norm_ratio": report.last().norm_ratio,
        "target_label_reads": report.target_label_reads,
    });
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(())
}

pub fn read_report_jsonl(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
