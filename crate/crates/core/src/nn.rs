//! Layers shared by the encoders and the decoder backbone.

use crate::error::Result;
use crate::numerics::{init, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// `x · Wᵀ + b` for `W` stored as `[out × in]`.
pub(crate) fn dense(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul_t(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

fn dense_named(tape: &mut Tape, p: &Bound, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
    dense(tape, x, p.get(&format!("{prefix}.{w}"))?, Some(p.get(&format!("{prefix}.{b}"))?))
}

pub(crate) fn layer_norm(tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gain"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b)
}

/// Query and value projections carry biases; keys do not.
fn self_attention(tape: &mut Tape, p: &Bound, x: Var, prefix: &str, heads: usize, causal: bool) -> Result<Var> {
    let b_q = p.get(&format!("{prefix}.b_q"))?;
    let b_v = p.get(&format!("{prefix}.b_v"))?;
    let d = tape.value(b_q).len();
    let zero = tape.constant(Tensor::zeros(&[d]));
    let b = tape.concat_rows(&[b_q, zero, b_v])?;
    let b = tape.reshape(b, vec![3 * d])?;
    let qkv = dense(tape, x, p.get(&format!("{prefix}.w_qkv"))?, Some(b))?;
    let a = tape.attention(qkv, heads, causal)?;
    dense_named(tape, p, a, prefix, "w_o", "b_o")
}

fn feed_forward(tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let h = dense_named(tape, p, x, prefix, "w1", "b1")?;
    let h = tape.gelu(h);
    dense_named(tape, p, h, prefix, "w2", "b2")
}

/// Post-norm block: `x = LN1(x + Attn(x)); x = LN2(x + FF(x))`.
pub(crate) fn post_norm_block(tape: &mut Tape, p: &Bound, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let a = self_attention(tape, p, x, &format!("{prefix}.attn"), heads, false)?;
    let x = tape.add(x, a)?;
    let x = layer_norm(tape, p, x, &format!("{prefix}.ln1"))?;
    let f = feed_forward(tape, p, x, &format!("{prefix}.ff"))?;
    let x = tape.add(x, f)?;
    layer_norm(tape, p, x, &format!("{prefix}.ln2"))
}

/// Pre-norm causal block: `x += Attn(LN1(x)); x += FF(LN2(x))`.
pub(crate) fn pre_norm_block(tape: &mut Tape, p: &Bound, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let h = layer_norm(tape, p, x, &format!("{prefix}.ln1"))?;
    let a = self_attention(tape, p, h, &format!("{prefix}.attn"), heads, true)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, p, x, &format!("{prefix}.ln2"))?;
    let f = feed_forward(tape, p, h, &format!("{prefix}.ff"))?;
    tape.add(x, f)
}

pub(crate) fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, w: &str, b: &str, out: usize, inp: usize) {
    let wn = format!("{prefix}.{w}");
    let bn = format!("{prefix}.{b}");
    store.insert(&wn, init::linear(&[out, inp], inp, seed, &wn));
    store.insert(&bn, init::linear(&[out], inp, seed, &bn));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

pub(crate) fn init_block(store: &mut ParamStore, seed: u64, prefix: &str, d: usize) {
    let attn = format!("{prefix}.attn");
    for (name, shape) in [("w_qkv", vec![3 * d, d]), ("b_q", vec![d]), ("b_v", vec![d])] {
        let n = format!("{attn}.{name}");
        store.insert(&n, init::linear(&shape, d, seed, &n));
    }
    init_linear(store, seed, &format!("{prefix}.attn"), "w_o", "b_o", d, d);
    init_linear(store, seed, &format!("{prefix}.ff"), "w1", "b1", 4 * d, d);
    init_linear(store, seed, &format!("{prefix}.ff"), "w2", "b2", d, 4 * d);
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
}
