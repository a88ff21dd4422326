//! Error measures, accuracy, the normalized delay model, and the CSV row
//! schema.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::graph::Topology;
use crate::objectives::{Dataset, ObjectiveFamily};
use crate::sporadic::{IndicatorDraw, SporadicityProfile};

pub const CSV_COLUMNS: [&str; 10] = [
    "iteration",
    "tau_trans",
    "tau_proc",
    "tau_total",
    "tau_cum",
    "cons_err",
    "opt_err",
    "pl_err",
    "train_loss",
    "test_accuracy",
];

pub fn row_mean(rows: &[DVector<f64>]) -> DVector<f64> {
    let mut s = DVector::zeros(rows[0].len());
    for r in rows {
        s += r;
    }
    s / rows.len() as f64
}

/// `|Theta - 1 theta_bar'|_F^2`.
pub fn consensus_error(rows: &[DVector<f64>]) -> f64 {
    let mean = row_mean(rows);
    rows.iter().map(|r| (r - &mean).norm_squared()).sum()
}

pub fn opt_error(theta_bar: &DVector<f64>, theta_star: &DVector<f64>) -> f64 {
    (theta_bar - theta_star).norm_squared()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delay {
    pub tau_trans: f64,
    pub tau_proc: f64,
    pub tau_total: f64,
}

/// Normalized per-iteration delay. Isolated clients are skipped in the
/// transmission sums.
pub fn delay_step(draw: &IndicatorDraw, d: &[f64], b: &DMatrix<f64>, t: &Topology) -> Delay {
    let mut active = vec![0.0; t.m];
    let mut full = vec![0.0; t.m];
    for (&(i, j), &on) in t.edges().iter().zip(&draw.v_hat) {
        let w = 1.0 / b[(i, j)];
        full[i] += w;
        full[j] += w;
        if on {
            active[i] += w;
            active[j] += w;
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..t.m {
        let deg = t.degree(i);
        if deg == 0 {
            continue;
        }
        num += active[i] / deg as f64;
        den += full[i] / deg as f64;
    }
    let tau_trans = if den > 0.0 { num / den } else { 0.0 };
    let proc_num: f64 = d.iter().zip(&draw.v).map(|(&di, &v)| if v { 1.0 / di } else { 0.0 }).sum();
    let proc_den: f64 = d.iter().map(|&di| 1.0 / di).sum();
    let tau_proc = proc_num / proc_den;
    Delay { tau_trans, tau_proc, tau_total: tau_trans + tau_proc }
}

pub fn delay_for_profile(draw: &IndicatorDraw, profile: &SporadicityProfile, t: &Topology) -> Delay {
    delay_step(draw, &profile.d, &profile.b, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccuracyMode {
    #[default]
    AverageModel,
    PerClientMean,
}

fn accuracy_of(c: &crate::objectives::ClassifierFamily, theta: &DVector<f64>, test: &Dataset) -> f64 {
    let hits = (0..test.len())
        .filter(|&s| c.predict(theta.as_slice(), test.row(s)) == test.labels[s] as usize)
        .count();
    hits as f64 / test.len() as f64
}

/// Test accuracy; `None` for families without a classifier.
pub fn evaluate(rows: &[DVector<f64>], fam: &ObjectiveFamily, test: &Dataset, mode: AccuracyMode) -> Option<f64> {
    let ObjectiveFamily::Classifier(c) = fam else { return None };
    if test.is_empty() {
        return None;
    }
    Some(match mode {
        AccuracyMode::AverageModel => accuracy_of(c, &row_mean(rows), test),
        AccuracyMode::PerClientMean => rows.iter().map(|r| accuracy_of(c, r, test)).sum::<f64>() / rows.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub tau_trans: f64,
    pub tau_proc: f64,
    pub tau_total: f64,
    pub tau_cum: f64,
    pub cons_err: f64,
    pub opt_err: Option<f64>,
    pub pl_err: Option<f64>,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Write rows in the fixed column order. Floats use shortest round-trip
/// scientific notation so reruns compare byte-for-byte.
pub fn write_csv<W: Write>(w: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.iteration.to_string(),
            format!("{:e}", r.tau_trans),
            format!("{:e}", r.tau_proc),
            format!("{:e}", r.tau_total),
            format!("{:e}", r.tau_cum),
            format!("{:e}", r.cons_err),
            cell(r.opt_err),
            cell(r.pl_err),
            format!("{:e}", r.train_loss),
            cell(r.test_accuracy),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(r: R) -> csv::Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("").parse::<f64>().ok();
        rows.push(MetricsRow {
            iteration: rec.get(0).unwrap_or("0").parse().unwrap_or(0),
            tau_trans: f(1).unwrap_or(0.0),
            tau_proc: f(2).unwrap_or(0.0),
            tau_total: f(3).unwrap_or(0.0),
            tau_cum: f(4).unwrap_or(0.0),
            cons_err: f(5).unwrap_or(0.0),
            opt_err: f(6),
            pl_err: f(7),
            train_loss: f(8).unwrap_or(0.0),
            test_accuracy: f(9),
        });
    }
    Ok(rows)
}
