use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::numerics::{init, Real};
use crate::text::Sample;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_lm: Real,
    pub l_safe: Real,
    pub l_align: Real,
    pub l_gate: Real,
    pub total: Real,
}

impl StepRecord {
    fn new(step: usize, b: &LossBreakdown) -> Self {
        Self { step, l_lm: b.l_lm, l_safe: b.l_safe, l_align: b.l_align, l_gate: b.l_gate, total: b.total }
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [("l_lm", self.l_lm), ("l_safe", self.l_safe), ("l_align", self.l_align), ("l_gate", self.l_gate), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Yields minibatches from a fresh shuffle of the corpus each epoch.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self { order: (0..n).collect(), cursor: 0, rng: init::stream(seed, "train.shuffle") };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Replaces a safe sample's answer with another answer seen in training that
/// occurs in none of the sample's documents.
struct AnswerSwap {
    answers: Vec<String>,
    p: Real,
    entity: Real,
    rng: rand_chacha::ChaCha8Rng,
}

impl AnswerSwap {
    fn new(corpus: &[Sample], p: Real, entity: Real, seed: u64) -> Self {
        let mut answers: Vec<String> = corpus.iter().filter(|s| !s.is_unsafe() && !s.answer.is_empty()).map(|s| s.answer.clone()).collect();
        answers.sort();
        answers.dedup();
        Self { answers, p, entity, rng: init::stream(seed, "train.answer_swap") }
    }

    fn apply(&mut self, s: &mut Sample) {
        if self.entity > 0.0 && self.rng.gen_bool(self.entity) {
            crate::datagen::respell_entity(&mut self.rng, s);
        }
        if s.is_unsafe() || s.answer.is_empty() || !self.rng.gen_bool(self.p) {
            return;
        }
        let positive = &s.documents[s.positive_index];
        if positive.matches(s.answer.as_str()).count() != 1 {
            return;
        }
        let free: Vec<&String> =
            self.answers.iter().filter(|a| !s.documents.iter().any(|d| d.contains(a.as_str()))).collect();
        let Some(&new) = free.choose(&mut self.rng) else { return };
        s.documents[s.positive_index] = positive.replacen(s.answer.as_str(), new, 1);
        s.answer = new.clone();
    }
}

/// Trains a fresh model for `config.steps` Adam updates.
///
/// `hook` sees every step record together with the updated model; an error
/// from it stops training.
pub fn train<H>(config: &ModelConfig, corpus: &[Sample], mut hook: H) -> Result<(Model, Vec<StepRecord>)>
where
    H: FnMut(&StepRecord, &Model) -> Result<()>,
{
    if corpus.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    for s in corpus {
        s.validate()?;
    }
    let mut model = Model::new(config.clone())?;
    let mut opt = Adam::new(config.optimizer.clone());
    let mut batches = Batches::new(corpus.len(), config.seed);
    let mut swap = AnswerSwap::new(corpus, config.answer_swap, config.entity_swap, config.seed);
    let mut log = Vec::with_capacity(config.steps);
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        batch.extend(batches.next(config.batch_size).into_iter().map(|i| {
            let mut s = corpus[i].clone();
            swap.apply(&mut s);
            s
        }));
        let (b, grads) = model.loss_and_grads(&batch)?;
        let rec = StepRecord::new(step, &b);
        if let Some(component) = rec.first_non_finite() {
            return Err(Error::Divergence { component: component.into(), step });
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { component: format!("gradient of {name}"), step });
        }
        opt.update(model.params_mut(), &grads)?;
        log.push(rec);
        hook(&rec, &model)?;
    }
    Ok((model, log))
}

/// Trailing moving average with window `w`.
pub fn smooth(values: &[Real], w: usize) -> Vec<Real> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as Real);
    }
    out
}
