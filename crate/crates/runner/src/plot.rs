//! Long-format plot data: one `x,step,metric,value,seed` CSV per family.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use kstgcn::metrics::METRIC_NAMES;

use crate::sweep::ResultRow;

/// Clean noise cells are shared by every perturbation family as the zero
/// point. Undefined metrics are skipped. Writes nothing for empty input.
pub fn export_plotdata(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        bail!("no results to export");
    }
    let mut families: Vec<(String, String)> = Vec::new();
    for r in rows.iter().filter(|r| r.family != "clean") {
        let key = (r.mode.clone(), r.family.clone());
        if !families.contains(&key) {
            families.push(key);
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (mode, family) in families {
        let stem = if mode == family {
            format!("plot_{mode}")
        } else {
            format!("plot_{mode}_{family}")
        };
        let path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["x", "step", "metric", "value", "seed"])?;
        let members = rows
            .iter()
            .filter(|r| r.mode == mode && (r.family == family || (r.family == "clean" && mode == "noise")));
        for r in members {
            for (name, v) in METRIC_NAMES.iter().zip(r.report.values()) {
                if let Some(v) = v {
                    w.write_record([r.x.to_string(), r.step.to_string(), name.to_string(), v.to_string(), r.seed.to_string()])?;
                }
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
