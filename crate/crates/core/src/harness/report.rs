//! Report files: metrics CSV, JSON-lines traces, raw adversarial images.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{io_err, Error, Result};
use crate::Tensor;

use super::campaign::ImageRecord;
use super::dataset::encode_raw_tensor;
use super::metrics::{metrics_csv, MetricsRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACES_FILE: &str = "traces.jsonl";

/// Write `metrics.csv` and `traces.jsonl` into `dir` (created if missing).
pub fn emit_report(rows: &[MetricsRow], records: &[ImageRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(METRICS_FILE);
    fs::write(&path, metrics_csv(rows)).map_err(io_err(&path))?;
    let path = dir.join(TRACES_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Config(format!("trace encoding: {e}")))?;
        writeln!(w, "{line}").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                offset: n,
                msg: format!("trace line {}: {e}", n + 1),
            })
        })
        .collect()
}

/// Save one repeat's adversarial images as a raw `[N, C, H, W]` tensor file.
pub fn save_adversarial(dir: &Path, variant: &str, repeat: usize, images: &[Tensor]) -> Result<PathBuf> {
    let path = dir.join(format!("adv_{variant}_r{repeat}.tensor"));
    if images.is_empty() {
        return Ok(path);
    }
    let batch = Tensor::stack(&images.iter().collect::<Vec<_>>())?;
    fs::write(&path, encode_raw_tensor(&batch)).map_err(io_err(&path))?;
    Ok(path)
}
