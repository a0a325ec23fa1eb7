use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::backbone::{self, hidden_var, logits_var, BackboneShape};
use crate::error::{Error, Result};
use crate::gmu::{self, GmuParams, GmuVars};
use crate::losses::{align_var, gate_var, LossBreakdown};
use crate::mkf::{encode, encode_var, fuse_documents, fuse_var, rank, EncoderShape, FusionResult, DOC_ENCODER, QUERY_ENCODER};
use crate::numerics::{cosine_similarity, Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::scd::{self, SafetyHeads, SafetyTrace};
use crate::text::{prompt_for, target_tokens, Sample, Special, Vocabulary};

/// A configured model and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
}

/// Output of answering one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tokens: Vec<usize>,
    /// Detokenized output without the closing `<EOS>`.
    pub text: String,
    pub rejected: bool,
    pub safety: Option<SafetyTrace>,
    pub fusion: Option<FusionResult>,
    /// Mean update-gate activation over the prompt.
    pub gate_mean: Option<Real>,
}

#[derive(Default)]
struct Terms {
    lm: Option<Var>,
    safe: Option<Var>,
    align: Option<Var>,
    gate: Option<Var>,
}

pub(crate) fn unsafe_ids(vocab: &Vocabulary, lexicon: &str) -> Result<Vec<usize>> {
    lexicon
        .chars()
        .map(|c| vocab.char_id(c).ok_or(Error::Vocabulary { ch: c, offset: 0 }))
        .collect()
}

impl Model {
    /// Fresh parameters for exactly the components the flags enable.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::standard();
        let mut params = ParamStore::new();
        let seed = config.seed;
        backbone_shape(&config).init(&mut params, seed);
        if config.use_mkf {
            let enc = encoder_shape(&config);
            enc.init(&mut params, seed, QUERY_ENCODER);
            enc.init(&mut params, seed, DOC_ENCODER);
        }
        if config.use_gmu {
            GmuParams::init(config.d_model, config.d_enc, config.gmu_bias, seed).store_into(&mut params);
        }
        if config.use_scd {
            let ids = unsafe_ids(&vocab, &config.unsafe_lexicon)?;
            scd::init_params(&mut params, config.d_model, vocab.len(), &ids, seed)?;
        }
        Ok(Self { config, vocab, params })
    }

    /// Wraps loaded parameters, checking that names and shapes match what
    /// `config` requires.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config)?;
        check_layout(&fresh.params, &params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameters after a layout check; leaves `self` untouched on error.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        check_layout(&self.params, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn backbone_shape(&self) -> BackboneShape {
        backbone_shape(&self.config)
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        encoder_shape(&self.config)
    }

    pub fn safety_heads(&self) -> Result<Option<SafetyHeads>> {
        if !self.config.use_scd {
            return Ok(None);
        }
        let c = &self.config;
        SafetyHeads::from_store(&self.params, c.lambda_safe, c.tau_pre, c.tau_tok, c.policy).map(Some)
    }

    fn encode_sample(&self, s: &Sample) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
        let q = self.vocab.tokenize(&s.query)?;
        let docs = s.documents.iter().map(|d| self.vocab.tokenize(d)).collect::<Result<_>>()?;
        Ok((q, docs))
    }

    fn terms(&self, tape: &mut Tape, p: &Bound, s: &Sample) -> Result<Terms> {
        let c = &self.config;
        let mut terms = Terms::default();
        let mut order = None;
        let mut knowledge = None;
        if c.use_mkf {
            let enc = self.encoder_shape();
            let (q, docs) = self.encode_sample(s)?;
            let hq = encode_var(tape, p, QUERY_ENCODER, &enc, &q)?;
            let hd = docs.iter().map(|d| encode_var(tape, p, DOC_ENCODER, &enc, d)).collect::<Result<Vec<_>>>()?;
            let (_, alpha, k) = fuse_var(tape, hq, &hd, c.tau_k)?;
            order = Some(rank(tape.value(alpha).data()));
            terms.align = Some(align_var(tape, hq, &hd, s.positive_index, c.tau_align)?);
            if c.use_gmu {
                knowledge = Some((GmuVars::from_bound(p)?, k));
            }
        }
        let prompt = prompt_for(&self.vocab, &c.preamble, s, order.as_deref())?;
        let target = target_tokens(&self.vocab, s)?;
        let mut input = prompt.tokens.clone();
        input.extend_from_slice(&target[..target.len() - 1]);
        let pass = hidden_var(tape, p, &self.backbone_shape(), &input, knowledge.as_ref().map(|(g, k)| (g, *k)))?;
        if let Some((z, _)) = pass.gates {
            terms.gate = Some(gate_var(tape, z, c.normalize_gate_loss));
        }
        let n = target.len();
        let first = prompt.t_ctx - 1;
        let rows = tape.rows(pass.hidden, first, first + n)?;
        let mut logits = logits_var(tape, p, rows)?;
        if c.use_scd {
            let get = |n: &str| p.get(&format!("{}.{n}", scd::PREFIX));
            let y = s.y_safe as Real;
            let ctx = tape.rows(pass.hidden, 0, prompt.t_ctx)?;
            let pool = tape.mean_axis(ctx, 0)?;
            let pre = tape.dot(pool, get("w_pre")?)?;
            let pre = tape.add(pre, get("b_pre")?)?;
            let p_pre = tape.sigmoid(pre);
            let mut safe = tape.bce(p_pre, y)?;
            let tok = tape.matvec(rows, get("w_tok")?)?;
            let tok = tape.reshape(tok, vec![n, 1])?;
            let tok = tape.add_row(tok, get("b_tok")?)?;
            let p_tok = tape.sigmoid(tok);
            let pre_on = (tape.scalar(p_pre) > c.tau_pre) as u8;
            let mut coef = Vec::with_capacity(n);
            let mut bces = Vec::with_capacity(n);
            for t in 0..n {
                let pt = tape.rows(p_tok, t, t + 1)?;
                bces.push(tape.bce(pt, y)?);
                let tok_on = (tape.value(pt).item() > c.tau_tok) as u8;
                coef.push(c.lambda_safe * (pre_on + tok_on) as Real);
            }
            let tok_sum = tape.stack(&bces)?;
            let tok_sum = tape.sum(tok_sum);
            let tok_sum = tape.scale(tok_sum, 1.0 / c.t_gen as Real);
            safe = tape.add(safe, tok_sum)?;
            terms.safe = Some(safe);
            if coef.iter().any(|&v| v != 0.0) {
                let cv = tape.constant(Tensor::vector(coef));
                let shift = tape.outer(cv, get("mask")?)?;
                logits = tape.sub(logits, shift)?;
            }
        }
        if c.use_scd || !s.is_unsafe() {
            let picks: Vec<(usize, usize)> = target.iter().copied().enumerate().collect();
            terms.lm = Some(tape.nll(logits, &picks)?);
        }
        Ok(terms)
    }

    /// Batch-mean objective on `tape`. Returns the total and its breakdown.
    pub fn batch_loss(&self, tape: &mut Tape, p: &Bound, batch: &[Sample]) -> Result<(Var, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut parts: [Vec<Var>; 4] = Default::default();
        for s in batch {
            let t = self.terms(tape, p, s)?;
            for (slot, v) in parts.iter_mut().zip([t.lm, t.safe, t.align, t.gate]) {
                slot.extend(v);
            }
        }
        let c = &self.config;
        let inv = 1.0 / batch.len() as Real;
        let mut vals = [0.0; 4];
        let mut total: Option<Var> = None;
        for (i, (vars, w)) in parts.iter().zip([1.0, c.beta, c.gamma, c.delta]).enumerate() {
            if vars.is_empty() {
                continue;
            }
            let s = tape.stack(vars)?;
            let s = tape.sum(s);
            let mean = tape.scale(s, inv);
            vals[i] = tape.scalar(mean);
            let term = tape.scale(mean, w);
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let total = match total {
            Some(t) => t,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let breakdown = LossBreakdown {
            l_lm: vals[0],
            l_safe: vals[1],
            l_align: vals[2],
            l_gate: vals[3],
            beta: c.beta,
            gamma: c.gamma,
            delta: c.delta,
            total: tape.scalar(total),
        };
        Ok((total, breakdown))
    }

    /// Objective value without gradients.
    pub fn loss(&self, batch: &[Sample]) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        Ok(self.batch_loss(&mut tape, &p, batch)?.1)
    }

    /// Objective and the gradient of every parameter.
    pub fn loss_and_grads(&self, batch: &[Sample]) -> Result<(LossBreakdown, std::collections::BTreeMap<String, Vec<Real>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let (total, breakdown) = self.batch_loss(&mut tape, &p, batch)?;
        tape.backward(total)?;
        Ok((breakdown, self.params.gradients(&tape, &p)))
    }

    /// Relevance weights and retrieval order of a sample's documents; `None`
    /// when knowledge fusion is disabled.
    pub fn fusion(&self, s: &Sample) -> Result<Option<FusionResult>> {
        if !self.config.use_mkf {
            return Ok(None);
        }
        let (hq, hd) = self.embed(&self.params, s)?;
        fuse_documents(&hq, &hd, self.config.tau_k).map(Some)
    }

    fn embed(&self, store: &ParamStore, s: &Sample) -> Result<(Tensor, Vec<Tensor>)> {
        let enc = self.encoder_shape();
        let (q, docs) = self.encode_sample(s)?;
        let hq = encode(store, QUERY_ENCODER, &enc, &q)?;
        let hd = docs.iter().map(|d| encode(store, DOC_ENCODER, &enc, d)).collect::<Result<_>>()?;
        Ok((hq, hd))
    }

    /// Encoders used to score knowledge relevance: the model's own, or
    /// freshly initialized ones from the model seed when fusion is disabled.
    pub fn relevance_encoders(&self) -> ParamStore {
        if self.config.use_mkf {
            return self.params.clone();
        }
        let mut store = ParamStore::new();
        let enc = self.encoder_shape();
        enc.init(&mut store, self.config.seed, QUERY_ENCODER);
        enc.init(&mut store, self.config.seed, DOC_ENCODER);
        store
    }

    /// Mean cosine between the query vector and each document vector.
    pub fn relevance_score(&self, encoders: &ParamStore, s: &Sample) -> Result<Real> {
        let (hq, hd) = self.embed(encoders, s)?;
        let mut sum = 0.0;
        for d in &hd {
            sum += cosine_similarity(&hq, d)?;
        }
        Ok(sum / hd.len() as Real)
    }

    /// Greedy answer to `s` under the configured decoding policy.
    pub fn answer(&self, s: &Sample) -> Result<Prediction> {
        let fusion = self.fusion(s)?;
        let order = fusion.as_ref().map(|f| f.doc_ids.clone());
        let prompt = prompt_for(&self.vocab, &self.config.preamble, s, order.as_deref())?;
        let k = match (&fusion, self.config.use_gmu) {
            (Some(f), true) => Some(Tensor::vector(f.k_fused.clone())),
            _ => None,
        };
        let gate_mean = match &k {
            Some(k) => Some(self.prompt_gate_mean(&prompt.tokens, k)?),
            None => None,
        };
        let heads = self.safety_heads()?;
        let shape = self.backbone_shape();
        let w_out = self.params.get(&format!("{}.w_out", backbone::PREFIX))?;
        let (tokens, safety) = scd::generate(&prompt.tokens, heads.as_ref(), w_out, shape.t_max, self.config.t_gen, |seq| {
            Ok(backbone::forward(&self.params, &shape, seq, k.as_ref())?.0)
        })?;
        let body = match tokens.last() {
            Some(&t) if t == Special::Eos.id() => &tokens[..tokens.len() - 1],
            _ => &tokens[..],
        };
        let text = self.vocab.detokenize(body)?;
        let rejected = tokens.first() == Some(&Special::Reject.id());
        Ok(Prediction { tokens, text, rejected, safety, fusion, gate_mean })
    }

    fn prompt_gate_mean(&self, prompt: &[usize], k: &Tensor) -> Result<Real> {
        let gp = GmuParams::from_store(&self.params)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = tape.embedding(p.get(&format!("{}.embed", backbone::PREFIX))?, prompt)?;
        let pos = tape.rows(p.get(&format!("{}.pos", backbone::PREFIX))?, 0, prompt.len())?;
        let x = tape.add(e, pos)?;
        let (_, trace) = gmu::gmu_sequence(tape.value(x), k, &gp)?;
        Ok(trace.mean_activation())
    }
}

fn backbone_shape(c: &ModelConfig) -> BackboneShape {
    BackboneShape { vocab: c.vocab_size, width: c.d_model, layers: c.n_layers, heads: c.n_heads, t_max: c.t_max }
}

fn encoder_shape(c: &ModelConfig) -> EncoderShape {
    EncoderShape { vocab: c.vocab_size, width: c.d_enc, layers: c.n_enc_layers, heads: c.n_enc_heads }
}

fn check_layout(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        let f = found.get(name)?;
        if f.shape() != t.shape() {
            return Err(Error::Shape { name: name.into(), expected: t.shape().to_vec(), found: f.shape().to_vec() });
        }
    }
    if let Some(extra) = found.names().find(|n| !expected.contains(n)) {
        return Err(Error::Parameter(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}
