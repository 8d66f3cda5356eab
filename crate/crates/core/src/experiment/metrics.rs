//! Per-epoch records and their CSV / JSON-lines serialization.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,lambda,train_loss,train_acc,val_acc,test_acc,mean_entropy,ms";

/// Metrics captured at the end of one epoch. `epoch` is zero-based, matching
/// the λ schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean regularized loss over the epoch's training samples.
    pub train_loss: f64,
    /// Accuracy against the (possibly corrupted) training labels.
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Mean prediction entropy on the training set after the epoch.
    pub mean_entropy: f64,
    /// Wall-clock milliseconds, or 0 when timing is off.
    pub ms: u64,
}

/// First epoch's mean entropy minus the last epoch's.
pub fn delta_h(records: &[EpochRecord]) -> Result<f64> {
    match records {
        [first, .., last] => Ok(first.mean_entropy - last.mean_entropy),
        _ => Err(Error::invalid(format!(
            "delta_h needs at least 2 records, got {}",
            records.len()
        ))),
    }
}

/// Renders records as CSV with a trailing `# delta_h=` line (omitted for a
/// single record).
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 2));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.epoch, r.lambda, r.train_loss, r.train_acc, r.val_acc, r.test_acc, r.mean_entropy, r.ms
        );
    }
    if let Ok(dh) = delta_h(records) {
        let _ = writeln!(out, "# delta_h={dh:.6}");
    }
    out
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the CSV atomically (temp file then rename).
pub fn emit_metrics(records: &[EpochRecord], path: &Path) -> Result<()> {
    write_atomic(path, metrics_csv(records).as_bytes())
}

/// Writes one JSON object per record, atomically.
pub fn emit_jsonl(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
