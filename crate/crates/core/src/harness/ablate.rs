use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use super::eval::{evaluate, EvalReport};
use super::train::train;
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::text::Sample;

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

/// Mean, sample standard deviation and range of one metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Real,
    pub std: Real,
    pub min: Real,
    pub max: Real,
    pub median: Real,
}

impl Summary {
    /// `None` for an empty slice.
    pub fn of(values: &[Real]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as Real;
        let mean = values.iter().sum::<Real>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(Real::total_cmp);
        let k = sorted.len();
        let median = if k % 2 == 1 { sorted[k / 2] } else { 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]) };
        Some(Self { mean, std, min: sorted[0], max: sorted[k - 1], median })
    }
}

/// One trained and evaluated `(variant, seed)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: usize,
    pub accuracy: Summary,
    pub f1: Summary,
    pub rr: Option<Summary>,
    pub krs: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub cells: Vec<AblationCell>,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn cell(&self, v: Variant, seed: u64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == v && c.seed == seed)
    }

    /// Fixed-width comparison table, one row per variant.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>5}  {:<30} {:<30} {:<30} {:<30}", "variant", "seeds", "accuracy", "f1", "rr", "krs");
        let cell = |s: &Summary| format!("{:.4}±{:.4} [{:.4}, {:.4}]", s.mean, s.std, s.min, s.max);
        for r in &self.rows {
            let rr = r.rr.as_ref().map_or("undefined".to_string(), cell);
            let _ = writeln!(
                out,
                "{:<10} {:>5}  {:<30} {:<30} {:<30} {:<30}",
                r.variant.label(),
                r.seeds,
                cell(&r.accuracy),
                cell(&r.f1),
                rr,
                cell(&r.krs)
            );
        }
        out
    }
}

/// Summaries per variant from evaluated cells.
pub fn summarize(cells: &[AblationCell]) -> Vec<AblationRow> {
    Variant::LADDER
        .iter()
        .filter_map(|&v| {
            let reps: Vec<&EvalReport> = cells.iter().filter(|c| c.variant == v).map(|c| &c.report).collect();
            let pick = |f: fn(&EvalReport) -> Real| Summary::of(&reps.iter().map(|r| f(r)).collect::<Vec<_>>());
            let rr: Vec<Real> = reps.iter().filter_map(|r| r.rr).collect();
            Some(AblationRow {
                variant: v,
                seeds: reps.len(),
                accuracy: pick(|r| r.accuracy)?,
                f1: pick(|r| r.f1)?,
                rr: Summary::of(&rr),
                krs: pick(|r| r.krs)?,
            })
        })
        .collect()
}

/// Trains and evaluates each ladder variant for each seed on a shared corpus.
/// Cells run in parallel.
pub fn ablate_variants(
    base: &ModelConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
    seeds: &[u64],
    variants: &[Variant],
) -> Result<AblationResult> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let jobs: Vec<(Variant, u64)> = seeds.iter().flat_map(|&s| variants.iter().map(move |&v| (v, s))).collect();
    let cells = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = ModelConfig { seed, ..base.with_variant(variant) };
            let (model, _) = train(&cfg, train_set, |_, _| Ok(()))?;
            Ok(AblationCell { variant, seed, report: evaluate(&model, eval_set)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(&cells);
    Ok(AblationResult { cells, rows })
}

/// The full four-row ladder.
pub fn ablate(base: &ModelConfig, train_set: &[Sample], eval_set: &[Sample], seeds: &[u64]) -> Result<AblationResult> {
    ablate_variants(base, train_set, eval_set, seeds, &Variant::LADDER)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.min, s.max, s.median), (2.0, 1.0, 3.0, 2.0));
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(Summary::of(&[4.0]).unwrap().std, 0.0);
        assert_eq!(Summary::of(&[1.0, 2.0]).unwrap().median, 1.5);
        assert!(Summary::of(&[]).is_none());
    }
}
