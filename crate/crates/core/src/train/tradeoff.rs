use std::fs;
use std::path::Path;

use serde::Serialize;

use super::run::{RunSummary, SUMMARY_FILE};
use crate::error::{Error, Result};

/// One finished run on the speed/quality plane.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub run: String,
    pub step_seconds: f64,
    pub final_eval_loss: f64,
    pub params_activated: usize,
    pub params_total: usize,
}

/// Collects `summary.json` from every subdirectory of `runs_dir`, fastest
/// run first. Directories without a summary are skipped.
pub fn tradeoff(runs_dir: &Path) -> Result<Vec<TradeoffRow>> {
    let mut rows = Vec::new();
    for entry in fs::read_dir(runs_dir)? {
        let path = entry?.path();
        let summary_path = path.join(SUMMARY_FILE);
        if !summary_path.is_file() {
            continue;
        }
        let s: RunSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)
            .map_err(|e| Error::Io(format!("{}: {e}", summary_path.display())))?;
        rows.push(TradeoffRow {
            run: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            step_seconds: s.mean_step_seconds,
            final_eval_loss: s.final_eval_loss,
            params_activated: s.params_activated,
            params_total: s.params_total,
        });
    }
    rows.sort_by(|a, b| a.step_seconds.total_cmp(&b.step_seconds).then_with(|| a.run.cmp(&b.run)));
    Ok(rows)
}

pub fn write_tradeoff_csv<W: std::io::Write>(rows: &[TradeoffRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
