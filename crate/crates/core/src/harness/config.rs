use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{GeneratorConfig, VALUE_ALPHABET};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::scd::Policy;
use crate::text::{Vocabulary, DEFAULT_PREAMBLE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Architecture, objective, decoding and training settings of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_enc: usize,
    pub n_layers: usize,
    pub n_enc_layers: usize,
    pub n_heads: usize,
    pub n_enc_heads: usize,
    pub t_max: usize,
    /// Maximum generation steps.
    pub t_gen: usize,

    pub tau_k: Real,
    pub tau_align: Real,
    pub beta: Real,
    pub gamma: Real,
    pub delta: Real,
    pub normalize_gate_loss: bool,
    pub gmu_bias: bool,

    pub lambda_safe: Real,
    pub tau_pre: Real,
    pub tau_tok: Real,
    pub policy: Policy,
    /// Characters whose mask entries start at +1.
    pub unsafe_lexicon: String,
    pub preamble: String,

    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Probability that a safe training sample has its answer replaced, in the
    /// answer and the positive document alike, by another training answer.
    pub answer_swap: Real,
    /// Probability that a training sample's entity is renamed to a fresh name.
    pub entity_swap: Real,
    /// Save a checkpoint every this many steps when an output directory is given; 0 disables.
    pub checkpoint_every: usize,

    pub use_mkf: bool,
    pub use_gmu: bool,
    pub use_scd: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocabulary::standard().len(),
            d_model: 32,
            d_enc: 32,
            n_layers: 2,
            n_enc_layers: 2,
            n_heads: 2,
            n_enc_heads: 2,
            t_max: 256,
            t_gen: 16,
            tau_k: 0.05,
            tau_align: 0.1,
            beta: 1.0,
            gamma: 1.0,
            delta: 0.01,
            normalize_gate_loss: true,
            gmu_bias: true,
            lambda_safe: 5.0,
            tau_pre: 0.5,
            tau_tok: 0.5,
            policy: Policy::SoftPenalize,
            unsafe_lexicon: VALUE_ALPHABET.into(),
            preamble: DEFAULT_PREAMBLE.into(),
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            steps: 2000,
            seed: 0,
            answer_swap: 1.0,
            entity_swap: 0.5,
            checkpoint_every: 0,
            use_mkf: true,
            use_gmu: true,
            use_scd: true,
        }
    }
}

/// The four rungs of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Mkf,
    MkfGmu,
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [Variant::Baseline, Variant::Mkf, Variant::MkfGmu, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Mkf => "+MKF",
            Variant::MkfGmu => "+MKF+GMU",
            Variant::Full => "Full",
        }
    }

    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::Mkf => (true, false, false),
            Variant::MkfGmu => (true, true, false),
            Variant::Full => (true, true, true),
        }
    }
}

impl ModelConfig {
    pub fn with_variant(&self, v: Variant) -> Self {
        let (use_mkf, use_gmu, use_scd) = v.flags();
        Self { use_mkf, use_gmu, use_scd, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.use_gmu && !self.use_mkf {
            return err("use_gmu requires use_mkf".into());
        }
        if self.vocab_size != Vocabulary::standard().len() {
            return err(format!("vocab_size {} does not match the vocabulary ({})", self.vocab_size, Vocabulary::standard().len()));
        }
        for (n, d, h) in [("d_model", self.d_model, self.n_heads), ("d_enc", self.d_enc, self.n_enc_heads)] {
            if d == 0 || h == 0 || d % h != 0 {
                return err(format!("{n} = {d} is not divisible into {h} heads"));
            }
        }
        if self.n_layers == 0 || self.n_enc_layers == 0 {
            return err("layer counts must be positive".into());
        }
        if self.t_max == 0 || self.t_gen == 0 || self.batch_size == 0 {
            return err("t_max, t_gen and batch_size must be positive".into());
        }
        for (n, t) in [("tau_k", self.tau_k), ("tau_align", self.tau_align)] {
            if !(t > 0.0) || !t.is_finite() {
                return err(format!("{n} must be positive, got {t}"));
            }
        }
        for (n, t) in [("tau_pre", self.tau_pre), ("tau_tok", self.tau_tok)] {
            if !(t > 0.0 && t < 1.0) {
                return err(format!("{n} must lie in (0, 1), got {t}"));
            }
        }
        for (n, c) in [("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta), ("lambda_safe", self.lambda_safe)] {
            if !(c >= 0.0) || !c.is_finite() {
                return err(format!("{n} must be nonnegative, got {c}"));
            }
        }
        for (n, p) in [("answer_swap", self.answer_swap), ("entity_swap", self.entity_swap)] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{n} must lie in [0, 1], got {p}"));
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return err("optimizer settings out of range".into());
        }
        let vocab = Vocabulary::standard();
        vocab.tokenize(&self.preamble)?;
        if let Some(c) = self.unsafe_lexicon.chars().find(|&c| vocab.char_id(c).is_none()) {
            return err(format!("unsafe lexicon character {c:?} is not in the vocabulary"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// On-disk config: model fields at top level plus an optional `[generator]` table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let generator = match table.remove("generator") {
            Some(g) => Some(g.try_into().map_err(|e: toml::de::Error| Error::Config(format!("[generator]: {e}")))?),
            None => None,
        };
        let model: ModelConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        model.validate()?;
        if let Some(g) = &generator {
            GeneratorConfig::validate(g)?;
        }
        Ok(Self { model, generator })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let mut out = toml::to_string(&self.model).expect("config serializes");
        if let Some(g) = &self.generator {
            let mut t = toml::Table::new();
            t.insert("generator".into(), toml::Value::try_from(g).expect("generator serializes"));
            out.push('\n');
            out.push_str(&toml::to_string(&t).expect("generator serializes"));
        }
        out
    }
}
