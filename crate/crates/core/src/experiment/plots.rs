//! Per-(object, t_h) series for trajectory plots, gathered from the cell
//! trajectories of a finished run. Each window contributes its last
//! forecast step, so every row is a position forecast `dec_len` steps
//! ahead.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{CellStatus, Manifest, TRAJECTORY_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    model: String,
    window: usize,
    step: usize,
    t: f64,
    truth_x: f64,
    truth_y: f64,
    pred_x: f64,
    pred_y: f64,
}

type Series = Vec<(usize, f64, [f64; 2], [f64; 2])>;

fn last_steps(path: &Path, dec_len: usize) -> Result<Vec<(String, Series)>> {
    let mut by_model: Vec<(String, Series)> = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: TrajectoryRow = row?;
        if r.step + 1 != dec_len {
            continue;
        }
        let point = (r.window, r.t, [r.truth_x, r.truth_y], [r.pred_x, r.pred_y]);
        match by_model.iter_mut().find(|(m, _)| *m == r.model) {
            Some((_, s)) => s.push(point),
            None => by_model.push((r.model, vec![point])),
        }
    }
    Ok(by_model)
}

/// Writes `plots/{object}_th{t_h}.csv` with columns `t, truth_x, truth_y`
/// and `{model}_x, {model}_y` for every model row that completed.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = Manifest::load(run_dir)?;
    let dec_len = manifest.config.dec_len;
    let plot_dir = run_dir.join("plots");
    std::fs::create_dir_all(&plot_dir)?;
    let mut groups: BTreeMap<(usize, usize), Vec<&super::CellRecord>> = BTreeMap::new();
    let order = |t_h: usize| manifest.config.t_h.iter().position(|&t| t == t_h).unwrap_or(usize::MAX);
    for c in manifest.cells.iter().filter(|c| c.status == CellStatus::Ok) {
        let obj = manifest.objects.iter().position(|o| *o == c.object).unwrap_or(usize::MAX);
        groups.entry((obj, order(c.t_h))).or_default().push(c);
    }
    let mut written = Vec::new();
    for cells in groups.values() {
        let (object, t_h) = (&cells[0].object, cells[0].t_h);
        let mut columns: Vec<(String, Series)> = Vec::new();
        for c in cells {
            columns.extend(last_steps(&run_dir.join(c.dir()).join(TRAJECTORY_FILE), dec_len)?);
        }
        let base = &columns[0].1;
        for (m, s) in &columns {
            let same = s.len() == base.len() && s.iter().zip(base).all(|(a, b)| a.0 == b.0 && a.1 == b.1 && a.2 == b.2);
            if !same {
                return Err(Error::invalid(format!("{m} for {object} at t_h={t_h} covers different windows")));
            }
        }
        let path = plot_dir.join(format!("{object}_th{t_h}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["t".to_string(), "truth_x".into(), "truth_y".into()];
        for (m, _) in &columns {
            header.push(format!("{m}_x"));
            header.push(format!("{m}_y"));
        }
        w.write_record(&header)?;
        for (i, (_, t, truth, _)) in base.iter().enumerate() {
            let mut rec = vec![t.to_string(), truth[0].to_string(), truth[1].to_string()];
            for (_, s) in &columns {
                rec.push(s[i].3[0].to_string());
                rec.push(s[i].3[1].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
