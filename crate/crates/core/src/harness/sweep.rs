use std::cmp::Ordering;
use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::eval::{evaluate, EvalReport};
use super::train::train;
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::text::Sample;

/// Values tried for each swept coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub beta: Vec<Real>,
    pub gamma: Vec<Real>,
    pub lambda_safe: Vec<Real>,
}

impl SweepGrid {
    /// Cartesian product in `beta`, `gamma`, `lambda_safe` order.
    pub fn cells(&self) -> Vec<(Real, Real, Real)> {
        let mut out = Vec::new();
        for &b in &self.beta {
            for &g in &self.gamma {
                for &l in &self.lambda_safe {
                    out.push((b, g, l));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// Position in the grid's cartesian order.
    pub index: usize,
    pub beta: Real,
    pub gamma: Real,
    pub lambda_safe: Real,
    pub report: EvalReport,
}

/// Higher F1 first, then higher RR (undefined lowest), then grid order.
pub fn compare_cells(a: &SweepCell, b: &SweepCell) -> Ordering {
    let rr = |c: &SweepCell| c.report.rr.unwrap_or(Real::NEG_INFINITY);
    b.report
        .f1
        .total_cmp(&a.report.f1)
        .then_with(|| rr(b).total_cmp(&rr(a)))
        .then_with(|| a.index.cmp(&b.index))
}

/// Trains one model per grid cell and ranks them on `val`.
pub fn sweep(base: &ModelConfig, train_set: &[Sample], val: &[Sample], grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut out = cells
        .par_iter()
        .enumerate()
        .map(|(index, &(beta, gamma, lambda_safe))| {
            let cfg = ModelConfig { beta, gamma, lambda_safe, ..base.clone() };
            let (model, _) = train(&cfg, train_set, |_, _| Ok(()))?;
            Ok(SweepCell { index, beta, gamma, lambda_safe, report: evaluate(&model, val)? })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(compare_cells);
    Ok(out)
}

pub fn sweep_table(cells: &[SweepCell]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>4} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9}", "rank", "beta", "gamma", "lambda", "f1", "rr", "accuracy", "krs");
    for (i, c) in cells.iter().enumerate() {
        let r = &c.report;
        let rr = r.rr.map_or("undefined".into(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:>4} {:>8} {:>8} {:>8} {:>9.4} {:>9} {:>9.4} {:>9.4}",
            i + 1,
            c.beta,
            c.gamma,
            c.lambda_safe,
            r.f1,
            rr,
            r.accuracy,
            r.krs
        );
    }
    out
}
