//! Trajectory error metrics and the metrics table.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets with magnitude below this are left out of MAPE (and counted).
pub const MAPE_EPS: f64 = 1e-6;

pub const METRICS_HEADER: [&str; 7] = ["object", "model", "t_h", "RMSE", "MAE", "MAPE", "mape_excluded"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent. NaN when every target was excluded.
    pub mape: f64,
    pub count: usize,
    pub mape_excluded: usize,
}

/// Errors over all scalar entries of two equally long slices.
pub fn evaluate(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch { op: "evaluate", left: vec![pred.len()], right: vec![truth.len()] });
    }
    let (mut se, mut ae, mut pe, mut used) = (0.0, 0.0, 0.0, 0usize);
    for (p, y) in pred.iter().zip(truth) {
        let e = p - y;
        se += e * e;
        ae += e.abs();
        if y.abs() >= MAPE_EPS {
            pe += (e / y).abs();
            used += 1;
        }
    }
    let n = pred.len() as f64;
    Ok(Metrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        mape: if used > 0 { 100.0 * pe / used as f64 } else { f64::NAN },
        count: pred.len(),
        mape_excluded: pred.len() - used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub object: String,
    pub model: String,
    pub t_h: usize,
    pub metrics: Metrics,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.object.clone(),
            r.model.clone(),
            r.t_h.to_string(),
            m.rmse.to_string(),
            m.mae.to_string(),
            m.mape.to_string(),
            m.mape_excluded.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_metrics_csv`]; `count` is not stored
/// and comes back as zero.
pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Parse(format!("metrics header must be {}", METRICS_HEADER.join(","))));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{s}`")));
    let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad integer `{s}`")));
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(MetricsRow {
                object: rec[0].to_string(),
                model: rec[1].to_string(),
                t_h: int(&rec[2])?,
                metrics: Metrics {
                    rmse: num(&rec[3])?,
                    mae: num(&rec[4])?,
                    mape: num(&rec[5])?,
                    count: 0,
                    mape_excluded: int(&rec[6])?,
                },
            })
        })
        .collect()
}
