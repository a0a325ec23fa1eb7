//! Dual encoders, temperature-scaled relevance weights and fused knowledge.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn;
use crate::numerics::{init, kernels, softmax_with_temperature, Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

pub const QUERY_ENCODER: &str = "query_encoder";
pub const DOC_ENCODER: &str = "doc_encoder";

/// Extents of one encoder: token embedding `[vocab × width]`, `layers`
/// post-norm self-attention blocks, then a mean over positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderShape {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl EncoderShape {
    pub fn init(&self, store: &mut ParamStore, seed: u64, prefix: &str) {
        let name = format!("{prefix}.embed");
        store.insert(&name, init::normal(&[self.vocab, self.width], 1.0, seed, &name));
        for i in 0..self.layers {
            nn::init_block(store, seed, &format!("{prefix}.block{i}"), self.width);
        }
    }
}

pub(crate) fn encode_var(tape: &mut Tape, p: &Bound, prefix: &str, shape: &EncoderShape, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Validation("cannot encode an empty token sequence".into()));
    }
    let mut x = tape.embedding(p.get(&format!("{prefix}.embed"))?, tokens)?;
    for i in 0..shape.layers {
        x = nn::post_norm_block(tape, p, x, &format!("{prefix}.block{i}"), shape.heads)?;
    }
    tape.mean_axis(x, 0)
}

/// Sentence vector of `tokens` under the encoder stored at `prefix`.
pub fn encode(store: &ParamStore, prefix: &str, shape: &EncoderShape, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let v = encode_var(&mut tape, &p, prefix, shape, tokens)?;
    Ok(tape.value(v).clone())
}

pub fn encode_query(store: &ParamStore, shape: &EncoderShape, tokens: &[usize]) -> Result<Tensor> {
    encode(store, QUERY_ENCODER, shape, tokens)
}

pub fn encode_doc(store: &ParamStore, shape: &EncoderShape, tokens: &[usize]) -> Result<Tensor> {
    encode(store, DOC_ENCODER, shape, tokens)
}

/// Relevance weights, fused vector and the retrieval ranking of the documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub alpha: Vec<Real>,
    pub k_fused: Vec<Real>,
    pub doc_ids: Vec<usize>,
}

fn check_docs(h_q: &Tensor, docs: &[Tensor]) -> Result<()> {
    if docs.is_empty() {
        return Err(dim_err("no documents to weigh"));
    }
    if let Some(d) = docs.iter().find(|d| d.len() != h_q.len()) {
        return Err(dim_err(format!(
            "document width {:?} does not match query width {:?}",
            d.shape(),
            h_q.shape()
        )));
    }
    Ok(())
}

/// `softmax(h_qᵀ h_k / τ_k)` over raw dot products.
pub fn relevance_weights(h_q: &Tensor, docs: &[Tensor], tau_k: Real) -> Result<Tensor> {
    check_docs(h_q, docs)?;
    let scores: Vec<Real> = docs.iter().map(|d| kernels::dot(h_q.data(), d.data())).collect();
    softmax_with_temperature(&Tensor::vector(scores), tau_k)
}

/// `Σ α_i h_{k_i}`
pub fn fuse(alpha: &Tensor, docs: &[Tensor]) -> Result<Tensor> {
    if alpha.len() != docs.len() || docs.is_empty() {
        return Err(dim_err(format!("{} weights for {} documents", alpha.len(), docs.len())));
    }
    let width = docs[0].len();
    let mut out = vec![0.0; width];
    for (a, d) in alpha.data().iter().zip(docs) {
        if d.len() != width {
            return Err(dim_err("documents of unequal width"));
        }
        kernels::axpy(*a, d.data(), &mut out);
    }
    Ok(Tensor::vector(out))
}

/// Indices of the `n` largest dot products, best first, ties to the lower index.
pub fn retrieve_top_n(query: &Tensor, corpus: &[Tensor], n: usize) -> Result<Vec<usize>> {
    if n > corpus.len() {
        return Err(Error::Parameter(format!("asked for {n} of {} documents", corpus.len())));
    }
    check_docs(query, corpus).or_else(|e| if corpus.is_empty() { Ok(()) } else { Err(e) })?;
    let scores: Vec<Real> = corpus.iter().map(|d| kernels::dot(query.data(), d.data())).collect();
    Ok(rank(&scores).into_iter().take(n).collect())
}

pub(crate) fn rank(scores: &[Real]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Full fusion step on plain tensors.
pub fn fuse_documents(h_q: &Tensor, docs: &[Tensor], tau_k: Real) -> Result<FusionResult> {
    let alpha = relevance_weights(h_q, docs, tau_k)?;
    let k_fused = fuse(&alpha, docs)?;
    let doc_ids = retrieve_top_n(h_q, docs, docs.len())?;
    Ok(FusionResult { alpha: alpha.into_data(), k_fused: k_fused.into_data(), doc_ids })
}

/// Tape form of the fusion step. Returns the stacked document matrix, α and k_fused.
pub(crate) fn fuse_var(tape: &mut Tape, h_q: Var, docs: &[Var], tau_k: Real) -> Result<(Var, Var, Var)> {
    let hk = tape.concat_rows(docs)?;
    let scores = tape.matvec(hk, h_q)?;
    let alpha = tape.softmax(scores, tau_k)?;
    let n = docs.len();
    let row = tape.reshape(alpha, vec![1, n])?;
    let k = tape.matmul(row, hk)?;
    let width = tape.value(hk).cols();
    let k = tape.reshape(k, vec![width])?;
    Ok((hk, alpha, k))
}
