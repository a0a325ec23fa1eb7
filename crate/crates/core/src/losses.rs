//! Objective terms and their weighted total.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::gmu::GateTrace;
use crate::numerics::{Real, Tape, Tensor, Var};

/// Component values and the coefficients that combine them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lm: Real,
    pub l_safe: Real,
    pub l_align: Real,
    pub l_gate: Real,
    pub beta: Real,
    pub gamma: Real,
    pub delta: Real,
    pub total: Real,
}

pub(crate) fn check_coefficients(beta: Real, gamma: Real, delta: Real) -> Result<()> {
    for (n, c) in [("beta", beta), ("gamma", gamma), ("delta", delta)] {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::Parameter(format!("{n} must be a nonnegative finite number, got {c}")));
        }
    }
    Ok(())
}

/// `l_lm + β l_safe + γ l_align + δ l_gate`
pub fn total_loss(l_lm: Real, l_safe: Real, l_align: Real, l_gate: Real, beta: Real, gamma: Real, delta: Real) -> Result<LossBreakdown> {
    check_coefficients(beta, gamma, delta)?;
    let total = l_lm + beta * l_safe + gamma * l_align + delta * l_gate;
    Ok(LossBreakdown { l_lm, l_safe, l_align, l_gate, beta, gamma, delta, total })
}

/// Summed negative log-likelihood of `targets[t]` under `logits[t]` for `t` in `answer`.
pub fn lm_loss(logits: &Tensor, targets: &[usize], answer: Range<usize>) -> Result<Real> {
    if logits.shape().len() != 2 || targets.len() != logits.rows() || answer.end > targets.len() {
        return Err(dim_err(format!(
            "{} targets and answer range {answer:?} against logits {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    let picks: Vec<(usize, usize)> = answer.map(|t| (t, targets[t])).collect();
    if picks.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let n = tape.nll(l, &picks)?;
    Ok(tape.scalar(n))
}

/// Binary cross-entropy with the probability clamped to `[1e-12, 1 − 1e-12]`.
pub fn safe_loss(p_reject: Real, y_safe: u8) -> Real {
    let p = p_reject.clamp(1e-12, 1.0 - 1e-12);
    let y = y_safe as Real;
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Contrastive loss over the cosine similarities of `h_q` to every document,
/// divided by `tau`, against `positive`.
pub fn align_loss(h_q: &Tensor, docs: &[Tensor], positive: usize, tau: Real) -> Result<Real> {
    let mut tape = Tape::new();
    let q = tape.constant(h_q.clone());
    let ds: Vec<Var> = docs.iter().map(|d| tape.constant(d.clone())).collect();
    let l = align_var(&mut tape, q, &ds, positive, tau)?;
    Ok(tape.scalar(l))
}

pub(crate) fn align_var(tape: &mut Tape, h_q: Var, docs: &[Var], positive: usize, tau: Real) -> Result<Var> {
    if docs.len() < 2 {
        return Err(Error::Parameter(format!("contrastive loss needs at least 2 documents, got {}", docs.len())));
    }
    if positive >= docs.len() {
        return Err(dim_err(format!("positive index {positive} outside {} documents", docs.len())));
    }
    crate::numerics::check_tau(tau)?;
    let sims = docs.iter().map(|&d| tape.cosine(h_q, d)).collect::<Result<Vec<_>>>()?;
    let s = tape.stack(&sims)?;
    let s = tape.scale(s, 1.0 / tau);
    let row = tape.reshape(s, vec![1, docs.len()])?;
    tape.nll(row, &[(0, positive)])
}

/// `Σ_t ‖z_t‖₁`, divided by `T·d` when `normalize` is set.
pub fn gate_loss(trace: &GateTrace, normalize: bool) -> Real {
    let s: Real = trace.z.data().iter().map(|v| v.abs()).sum();
    if normalize {
        s / trace.z.len() as Real
    } else {
        s
    }
}

pub(crate) fn gate_var(tape: &mut Tape, z: Var, normalize: bool) -> Var {
    let n = tape.value(z).len();
    let s = tape.sum(z);
    if normalize {
        tape.scale(s, 1.0 / n as Real)
    } else {
        s
    }
}
