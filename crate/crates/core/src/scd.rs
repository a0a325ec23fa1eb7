//! Safety heads, indicator-gated logit penalty and greedy generation.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{init, kernels, mean_over_axis, Real, Tensor};
use crate::params::ParamStore;
use crate::text::Special;

pub const PREFIX: &str = "safety";

/// What generation does once the utterance-level check fires.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Keep decoding with the pre-decoding indicator latched on.
    #[default]
    SoftPenalize,
    /// Emit `<REJECT>` then `<EOS>` and stop.
    HardRefuse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SafetyHeads {
    pub w_pre: Tensor,
    pub b_pre: Real,
    pub w_tok: Tensor,
    pub b_tok: Real,
    /// Vocabulary mask `m`.
    pub mask: Tensor,
    pub lambda_safe: Real,
    pub tau_pre: Real,
    pub tau_tok: Real,
    pub policy: Policy,
}

/// Per-step record of the token-level check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub p_rej: Real,
    pub tok_fired: bool,
    /// Scalar multiplier applied to `m` at this step.
    pub penalty: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyTrace {
    pub p_pre: Real,
    pub pre_fired: bool,
    pub steps: Vec<StepTrace>,
    /// Output began with `<REJECT>`.
    pub rejected: bool,
}

/// Stores the head parameters: weights drawn like a linear layer of fan-in
/// `d`, zero mask except `+1` at `unsafe_ids`.
pub fn init_params(store: &mut ParamStore, d: usize, vocab: usize, unsafe_ids: &[usize], seed: u64) -> Result<()> {
    for name in ["w_pre", "w_tok"] {
        let n = format!("{PREFIX}.{name}");
        store.insert(&n, init::linear(&[d], d, seed, &n));
    }
    for name in ["b_pre", "b_tok"] {
        let n = format!("{PREFIX}.{name}");
        store.insert(&n, init::linear(&[1], d, seed, &n));
    }
    let mut m = Tensor::zeros(&[vocab]);
    for &id in unsafe_ids {
        if id >= vocab {
            return Err(Error::TokenId { id, size: vocab });
        }
        m.data_mut()[id] = 1.0;
    }
    store.insert(format!("{PREFIX}.mask"), m);
    Ok(())
}

impl SafetyHeads {
    pub fn from_store(store: &ParamStore, lambda_safe: Real, tau_pre: Real, tau_tok: Real, policy: Policy) -> Result<Self> {
        let get = |n: &str| store.get(&format!("{PREFIX}.{n}")).cloned();
        let heads = Self {
            w_pre: get("w_pre")?,
            b_pre: get("b_pre")?.item(),
            w_tok: get("w_tok")?,
            b_tok: get("b_tok")?.item(),
            mask: get("mask")?,
            lambda_safe,
            tau_pre,
            tau_tok,
            policy,
        };
        heads.validate()?;
        Ok(heads)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_safe >= 0.0) || !self.lambda_safe.is_finite() {
            return Err(Error::Parameter(format!("lambda_safe must be nonnegative, got {}", self.lambda_safe)));
        }
        for (n, t) in [("tau_pre", self.tau_pre), ("tau_tok", self.tau_tok)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Parameter(format!("{n} must lie in (0, 1), got {t}")));
            }
        }
        if !self.mask.is_finite() {
            return Err(Error::Parameter("mask holds non-finite values".into()));
        }
        Ok(())
    }
}

/// Mean of the first `t_ctx` rows of `hidden`.
pub fn pool_context(hidden: &Tensor, t_ctx: usize) -> Result<Tensor> {
    if hidden.shape().len() != 2 || t_ctx == 0 || t_ctx > hidden.rows() {
        return Err(dim_err(format!("context length {t_ctx} outside hidden state {:?}", hidden.shape())));
    }
    let head = Tensor::matrix(t_ctx, hidden.cols(), hidden.data()[..t_ctx * hidden.cols()].to_vec())?;
    mean_over_axis(&head, 0)
}

fn head_prob(w: &Tensor, b: Real, h: &Tensor) -> Result<Real> {
    if w.len() != h.len() {
        return Err(dim_err(format!("head width {} does not match state width {}", w.len(), h.len())));
    }
    Ok(kernels::sigmoid(kernels::dot(w.data(), h.data()) + b))
}

/// Utterance-level rejection probability `σ(w_preᵀ h_pool + b_pre)`.
pub fn pre_reject_prob(h_pool: &Tensor, heads: &SafetyHeads) -> Result<Real> {
    head_prob(&heads.w_pre, heads.b_pre, h_pool)
}

/// Token-level rejection probability `σ(w_tokᵀ h_t + b_tok)`.
pub fn token_reject_prob(h_t: &Tensor, heads: &SafetyHeads) -> Result<Real> {
    head_prob(&heads.w_tok, heads.b_tok, h_t)
}

/// Multiplier `λ_safe · (I_pre + I_tok)` applied to the mask.
pub fn penalty(pre_fired: bool, tok_fired: bool, heads: &SafetyHeads) -> Real {
    heads.lambda_safe * (pre_fired as u8 + tok_fired as u8) as Real
}

/// `õ = o − λ_safe (I_pre + I_tok) m`
pub fn modulate_logits(o_t: &Tensor, pre_fired: bool, tok_fired: bool, heads: &SafetyHeads) -> Tensor {
    let c = penalty(pre_fired, tok_fired, heads);
    if c == 0.0 {
        return o_t.clone();
    }
    let mut out = o_t.clone();
    kernels::axpy(-c, heads.mask.data(), out.data_mut());
    out
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(x: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `prompt`. `forward` maps a token sequence to its
/// final hidden states `[T × d]`; `w_out` is the `[d × V]` output projection.
///
/// With `heads`, the utterance check runs once on the prompt and every step is
/// modulated; without, decoding is plain greedy and no trace is returned.
/// Generation stops after `<EOS>` (which is emitted) or `max_steps` tokens.
pub fn generate<F>(
    prompt: &[usize],
    heads: Option<&SafetyHeads>,
    w_out: &Tensor,
    t_max: usize,
    max_steps: usize,
    mut forward: F,
) -> Result<(Vec<usize>, Option<SafetyTrace>)>
where
    F: FnMut(&[usize]) -> Result<Tensor>,
{
    if prompt.is_empty() {
        return Err(dim_err("empty prompt"));
    }
    if prompt.len() + max_steps > t_max {
        return Err(Error::Capacity { needed: prompt.len() + max_steps, max: t_max });
    }
    let (d, v) = match w_out.shape() {
        [d, v] => (*d, *v),
        s => return Err(dim_err(format!("output projection must be a matrix, got {s:?}"))),
    };
    let mut seq = prompt.to_vec();
    let mut hidden = forward(&seq)?;
    let mut trace = match heads {
        Some(h) => {
            let p_pre = pre_reject_prob(&pool_context(&hidden, prompt.len())?, h)?;
            Some(SafetyTrace { p_pre, pre_fired: p_pre > h.tau_pre, steps: Vec::new(), rejected: false })
        }
        None => None,
    };
    let forced: Option<[usize; 2]> = match (heads, &trace) {
        (Some(h), Some(t)) if t.pre_fired && h.policy == Policy::HardRefuse => {
            Some([Special::Reject.id(), Special::Eos.id()])
        }
        _ => None,
    };
    let mut out = Vec::new();
    for step in 0..max_steps {
        if hidden.cols() != d {
            return Err(dim_err(format!("hidden width {} does not match projection {d}", hidden.cols())));
        }
        let h_t = Tensor::vector(hidden.row(hidden.rows() - 1).to_vec());
        let mut o = vec![0.0; v];
        kernels::gemm_nn(h_t.data(), w_out.data(), &mut o, 1, d, v);
        let mut o = Tensor::vector(o);
        if let (Some(h), Some(t)) = (heads, trace.as_mut()) {
            let p_rej = token_reject_prob(&h_t, h)?;
            let tok_fired = p_rej > h.tau_tok;
            o = modulate_logits(&o, t.pre_fired, tok_fired, h);
            t.steps.push(StepTrace { p_rej, tok_fired, penalty: penalty(t.pre_fired, tok_fired, h) });
        }
        let next = match forced {
            Some(f) => f[step.min(1)],
            None => argmax(o.data()),
        };
        out.push(next);
        seq.push(next);
        if next == Special::Eos.id() || step + 1 == max_steps {
            break;
        }
        hidden = forward(&seq)?;
    }
    if let Some(t) = trace.as_mut() {
        t.rejected = out.first() == Some(&Special::Reject.id());
    }
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heads(v: usize, d: usize) -> SafetyHeads {
        SafetyHeads {
            w_pre: Tensor::zeros(&[d]),
            b_pre: 0.0,
            w_tok: Tensor::zeros(&[d]),
            b_tok: 0.0,
            mask: Tensor::zeros(&[v]),
            lambda_safe: 5.0,
            tau_pre: 0.5,
            tau_tok: 0.5,
            policy: Policy::SoftPenalize,
        }
    }

    #[test]
    fn pooling_examples() {
        let h = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(pool_context(&h, 1).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(pool_context(&h, 2).unwrap().data(), &[2.0, 3.0]);
        assert!(pool_context(&h, 0).is_err());
        assert!(pool_context(&h, 4).is_err());
    }

    #[test]
    fn head_examples() {
        let mut hd = heads(4, 2);
        let h = Tensor::vector(vec![0.3, -0.7]);
        assert_eq!(pre_reject_prob(&h, &hd).unwrap(), 0.5);
        hd.w_pre = Tensor::vector(vec![0.7, 0.3]);
        assert_eq!(pre_reject_prob(&h, &hd).unwrap(), 0.5);
        hd.w_tok = Tensor::vector(vec![1.0, 0.0]);
        let p = token_reject_prob(&Tensor::vector(vec![1.0, 5.0]), &hd).unwrap();
        assert!((p - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn modulation_cases() {
        let mut hd = heads(3, 2);
        hd.mask = Tensor::vector(vec![1.0, -0.5, 2.0]);
        let o = Tensor::vector(vec![0.1, 0.2, 0.3]);
        assert_eq!(modulate_logits(&o, false, false, &hd), o);
        let one = modulate_logits(&o, true, false, &hd);
        let two = modulate_logits(&o, true, true, &hd);
        for i in 0..3 {
            assert_eq!(one.data()[i], o.data()[i] - 5.0 * hd.mask.data()[i]);
            assert_eq!(two.data()[i], o.data()[i] - 10.0 * hd.mask.data()[i]);
        }
        assert_eq!(modulate_logits(&o, false, true, &hd), one);
    }

    #[test]
    fn argmax_prefers_lowest_id() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
