//! Per-round metrics and their on-disk forms.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Test accuracy of the broadcast model after this round.
    pub accuracy: f64,
    /// Mean coded uplink size in bits per parameter, header included.
    pub uplink_bpp: f64,
    /// Mean binary entropy of the uplink ones frequency.
    pub entropy_bpp: f64,
    pub ones_frequency: f64,
    /// Mean last-epoch local loss of the participants.
    pub train_loss: f64,
    pub participants: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    schema: u32,
    #[serde(flatten)]
    metrics: RoundMetrics,
}

/// One JSON object per line.
pub fn metrics_jsonl(metrics: &[RoundMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        let rec = Record {
            schema: METRICS_SCHEMA,
            metrics: m.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// Final-state summary as a two-line CSV.
pub fn summary_csv(
    metrics: &[RoundMetrics],
    initial_accuracy: f64,
    final_accuracy: f64,
    model_bpp: Option<f64>,
) -> String {
    let last = metrics.last();
    let rounds = metrics.len();
    let mean_bpp = if rounds == 0 {
        f64::NAN
    } else {
        metrics.iter().map(|m| m.uplink_bpp).sum::<f64>() / rounds as f64
    };
    let mut out = String::from(
        "rounds,initial_accuracy,final_round_accuracy,final_accuracy,mean_uplink_bpp,last_uplink_bpp,model_bpp\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let _ = writeln!(
        out,
        "{rounds},{initial_accuracy:.6},{},{final_accuracy:.6},{mean_bpp:.6},{},{}",
        opt(last.map(|m| m.accuracy)),
        opt(last.map(|m| m.uplink_bpp)),
        opt(model_bpp),
    );
    out
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if rec.schema != METRICS_SCHEMA {
            return Err(Error::Format(format!(
                "line {}: unsupported schema {}",
                i + 1,
                rec.schema
            )));
        }
        out.push(rec.metrics);
    }
    Ok(out)
}
