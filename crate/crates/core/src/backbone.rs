//! Decoder-only transformer: embedding, optional gated memory, causal pre-norm
//! blocks, final layer norm and output projection.

use crate::error::{dim_err, Error, Result};
use crate::gmu::{gmu_var, GmuVars};
use crate::nn;
use crate::numerics::{init, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

pub const PREFIX: &str = "backbone";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneShape {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub t_max: usize,
}

impl BackboneShape {
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let (v, d) = (self.vocab, self.width);
        for (name, shape) in [("embed", [v, d]), ("pos", [self.t_max, d])] {
            let n = format!("{PREFIX}.{name}");
            store.insert(&n, init::normal(&shape, 1.0, seed, &n));
        }
        for i in 0..self.layers {
            nn::init_block(store, seed, &format!("{PREFIX}.block{i}"), d);
        }
        nn::init_layer_norm(store, &format!("{PREFIX}.ln_f"), d);
        let n = format!("{PREFIX}.w_out");
        store.insert(&n, init::linear(&[d, v], d, seed, &n));
    }
}

/// Intermediate values of one decoder pass.
pub(crate) struct Pass {
    /// Final-layer state after the closing layer norm, `[T × d]`.
    pub hidden: Var,
    /// Update and reset gate activations when the gated unit ran.
    pub gates: Option<(Var, Var)>,
}

pub(crate) fn hidden_var(
    tape: &mut Tape,
    p: &Bound,
    shape: &BackboneShape,
    tokens: &[usize],
    knowledge: Option<(&GmuVars, Var)>,
) -> Result<Pass> {
    if tokens.is_empty() {
        return Err(dim_err("empty token sequence"));
    }
    if tokens.len() > shape.t_max {
        return Err(Error::Capacity { needed: tokens.len(), max: shape.t_max });
    }
    let e = tape.embedding(p.get(&format!("{PREFIX}.embed"))?, tokens)?;
    let pos = tape.rows(p.get(&format!("{PREFIX}.pos"))?, 0, tokens.len())?;
    let mut x = tape.add(e, pos)?;
    let mut gates = None;
    if let Some((g, k)) = knowledge {
        let (h, z, r) = gmu_var(tape, g, x, k)?;
        x = h;
        gates = Some((z, r));
    }
    for i in 0..shape.layers {
        x = nn::pre_norm_block(tape, p, x, &format!("{PREFIX}.block{i}"), shape.heads)?;
    }
    let hidden = nn::layer_norm(tape, p, x, &format!("{PREFIX}.ln_f"))?;
    Ok(Pass { hidden, gates })
}

/// Logits for the given hidden rows.
pub(crate) fn logits_var(tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
    tape.matmul(hidden, p.get(&format!("{PREFIX}.w_out"))?)
}

/// Returns `(hidden[T × d], logits[T × V])`. The gated unit runs only when
/// `k_fused` is given.
pub fn forward(store: &ParamStore, shape: &BackboneShape, tokens: &[usize], k_fused: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let g = match k_fused {
        Some(k) => Some((GmuVars::from_bound(&p)?, tape.constant(k.clone()))),
        None => None,
    };
    let pass = hidden_var(&mut tape, &p, shape, tokens, g.as_ref().map(|(g, k)| (g, *k)))?;
    let logits = logits_var(&mut tape, &p, pass.hidden)?;
    Ok((tape.value(pass.hidden).clone(), tape.value(logits).clone()))
}
