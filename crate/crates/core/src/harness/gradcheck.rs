use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use crate::error::Result;
use crate::numerics::gradcheck::relative_error;
use crate::numerics::Real;
use crate::text::Sample;

/// Worst finite-difference mismatch within one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_error: Real,
    /// `name[index]` of the worst scalar.
    pub worst: String,
    pub checked: usize,
}

pub fn group_of(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "query_encoder" => "query encoder",
        "doc_encoder" => "document encoder",
        "gmu" => "gated memory",
        "backbone" => "backbone",
        "safety" if name == "safety.mask" => "vocabulary mask",
        "safety" => "safety heads",
        _ => "other",
    }
}

/// Full model, two layers of width 16, eight-token sequences and an empty
/// preamble. The thresholds keep the utterance indicator on and the token
/// indicator off for every perturbation.
pub fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_enc: 16,
        n_layers: 2,
        n_enc_layers: 2,
        n_heads: 2,
        n_enc_heads: 2,
        t_max: 8,
        t_gen: 2,
        tau_k: 1.0,
        tau_pre: 0.05,
        tau_tok: 0.95,
        preamble: String::new(),
        seed,
        ..ModelConfig::default()
    }
}

/// One safe and one unsafe sample whose prompt plus shifted target spans
/// exactly eight tokens.
pub fn toy_batch() -> Vec<Sample> {
    let sample = |id: &str, answer: &str, y: u8| Sample {
        id: id.into(),
        query: "q".into(),
        documents: vec!["a".into(), "b".into()],
        positive_index: 0,
        answer: answer.into(),
        y_safe: y,
        turns: Vec::new(),
    };
    vec![sample("toy-0", "c", 0), sample("toy-1", "", 1)]
}

/// Compares tape gradients of the total objective against central
/// differences for every parameter scalar.
pub fn check_gradients(model: &Model, batch: &[Sample], eps: Real) -> Result<Vec<GroupReport>> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let mut work = model.clone();
    let mut reports: Vec<GroupReport> = Vec::new();
    for (name, g) in &grads {
        let group = group_of(name);
        let idx = match reports.iter().position(|r| r.group == group) {
            Some(i) => i,
            None => {
                reports.push(GroupReport { group: group.into(), max_rel_error: 0.0, worst: String::new(), checked: 0 });
                reports.len() - 1
            }
        };
        for (j, &analytic) in g.iter().enumerate() {
            let orig = work.params().get(name)?.data()[j];
            work.params_mut().get_mut(name)?.data_mut()[j] = orig + eps;
            let up = work.loss(batch)?.total;
            work.params_mut().get_mut(name)?.data_mut()[j] = orig - eps;
            let down = work.loss(batch)?.total;
            work.params_mut().get_mut(name)?.data_mut()[j] = orig;
            let e = relative_error(analytic, (up - down) / (2.0 * eps));
            let r = &mut reports[idx];
            r.checked += 1;
            if e > r.max_rel_error || r.worst.is_empty() {
                r.max_rel_error = e;
                r.worst = format!("{name}[{j}]");
            }
        }
    }
    Ok(reports)
}
