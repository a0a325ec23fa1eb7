use super::dataset::{validate_turns, Sample, Speaker};
use super::vocab::{Special, Vocabulary};
use crate::error::{Error, Result};

pub const DEFAULT_PREAMBLE: &str = "You are a digital assistant. Answer clearly and safely.";

/// Prompt token ids. Generation begins at index `t_ctx == tokens.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub t_ctx: usize,
}

impl Prompt {
    fn new(tokens: Vec<usize>) -> Self {
        let t_ctx = tokens.len();
        Self { tokens, t_ctx }
    }
}

fn knowledge_segment(vocab: &Vocabulary, preamble: &str, docs: &[&str]) -> Result<Vec<usize>> {
    if docs.is_empty() {
        return Err(Error::Validation("prompt needs at least one document".into()));
    }
    let mut out = vec![Special::Bos.id()];
    out.extend(vocab.tokenize(preamble)?);
    out.push(Special::Knowledge.id());
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            out.push(Special::Sep.id());
        }
        out.extend(vocab.tokenize(d)?);
    }
    Ok(out)
}

fn ordered_docs<'a>(sample: &'a Sample, order: Option<&[usize]>) -> Result<Vec<&'a str>> {
    match order {
        None => Ok(sample.documents.iter().map(String::as_str).collect()),
        Some(ix) => ix
            .iter()
            .map(|&i| {
                sample
                    .documents
                    .get(i)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Validation(format!("document index {i} out of range")))
            })
            .collect(),
    }
}

/// `BOS preamble [KNOWLEDGE] k1 <SEP> … kN [QUESTION] query`
pub fn build_prompt(vocab: &Vocabulary, preamble: &str, sample: &Sample) -> Result<Prompt> {
    single_turn(vocab, preamble, &ordered_docs(sample, None)?, &sample.query)
}

fn single_turn(vocab: &Vocabulary, preamble: &str, docs: &[&str], query: &str) -> Result<Prompt> {
    let mut out = knowledge_segment(vocab, preamble, docs)?;
    out.push(Special::Question.id());
    out.extend(vocab.tokenize(query)?);
    Ok(Prompt::new(out))
}

/// Knowledge segment, then each turn as its speaker marker and utterance, then
/// a closing `[SYSTEM]` cue.
pub fn build_multiturn_prompt(vocab: &Vocabulary, preamble: &str, sample: &Sample) -> Result<Prompt> {
    multi_turn(vocab, preamble, &ordered_docs(sample, None)?, sample)
}

fn multi_turn(vocab: &Vocabulary, preamble: &str, docs: &[&str], sample: &Sample) -> Result<Prompt> {
    validate_turns(&sample.turns)?;
    let mut out = knowledge_segment(vocab, preamble, docs)?;
    for t in &sample.turns {
        out.push(match t.speaker {
            Speaker::User => Special::User.id(),
            Speaker::System => Special::System.id(),
        });
        out.extend(vocab.tokenize(&t.utterance)?);
    }
    out.push(Special::System.id());
    Ok(Prompt::new(out))
}

/// Picks the template for the sample, presenting documents in `order` when given.
pub fn prompt_for(vocab: &Vocabulary, preamble: &str, sample: &Sample, order: Option<&[usize]>) -> Result<Prompt> {
    let docs = ordered_docs(sample, order)?;
    if sample.is_multiturn() {
        multi_turn(vocab, preamble, &docs, sample)
    } else {
        single_turn(vocab, preamble, &docs, &sample.query)
    }
}

/// Gold continuation: the answer then EOS, or `[REJECT, EOS]` for unsafe samples.
pub fn target_tokens(vocab: &Vocabulary, sample: &Sample) -> Result<Vec<usize>> {
    let mut out = if sample.is_unsafe() {
        vec![Special::Reject.id()]
    } else {
        vocab.tokenize(&sample.answer)?
    };
    out.push(Special::Eos.id());
    Ok(out)
}
