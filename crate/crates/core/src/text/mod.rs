//! Character vocabulary, prompt templates and the line-delimited dataset format.

mod dataset;
mod prompt;
mod vocab;

pub use dataset::{read_dataset, write_dataset, Sample, Speaker, Turn};
pub use prompt::{build_multiturn_prompt, build_prompt, prompt_for, target_tokens, Prompt, DEFAULT_PREAMBLE};
pub use vocab::{Special, Vocabulary, BASE_ALPHABET};
