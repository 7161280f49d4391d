//! Training-curve export: one `step,value` CSV per plotted series.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::write_file;
use crate::reward::Component;
use crate::train::{RunLog, Stage, StepRecord};

/// Series names, in panel order.
pub const CURVES: [&str; 8] = [
    "r_f",
    "r_t1",
    "r_v1",
    "stage1_total",
    "thinking_length",
    "r_v2",
    "r_c2",
    "stage2_total",
];

fn value(name: &str, r: &StepRecord) -> Option<f64> {
    match (name, r.stage) {
        ("r_f", Stage::Stage1) => r.component(Component::Format),
        ("r_t1", Stage::Stage1) => r.component(Component::TextFidelity),
        ("r_v1", Stage::Stage1) => r.component(Component::VideoFidelity1),
        ("stage1_total", Stage::Stage1) => Some(r.total),
        ("thinking_length", Stage::Stage1) => Some(r.thinking_length),
        ("r_v2", Stage::Stage2) => r.component(Component::VideoFidelity2),
        ("r_c2", Stage::Stage2) => r.component(Component::SemanticAlignment),
        ("stage2_total", Stage::Stage2) => Some(r.total),
        _ => None,
    }
}

/// `(step, value)` points of one series.
pub fn curve(log: &RunLog, name: &str) -> Result<Vec<(usize, f64)>> {
    if !CURVES.contains(&name) {
        return Err(Error::InvalidArgument(format!("unknown curve {name:?}")));
    }
    Ok(log
        .records
        .iter()
        .filter_map(|r| match r {
            crate::train::LogRecord::Step(s) => value(name, s).map(|v| (s.step, v)),
            _ => None,
        })
        .collect())
}

/// Writes `<name>.csv` for every series into `out_dir`.
pub fn export_curves(log: &RunLog, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for name in CURVES {
        let mut text = String::from("step,value\n");
        for (step, v) in curve(log, name)? {
            text.push_str(&format!("{step},{v}\n"));
        }
        let path = out_dir.join(format!("{name}.csv"));
        write_file(&path, text.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads a run log and exports its curves.
pub fn export_curves_from_file(log_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    export_curves(&RunLog::read(log_path)?, out_dir)
}
