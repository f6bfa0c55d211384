//! Model hyperparameters, ablation toggles, and their text form.
//!
//! The same `key = value` block appears in config files, checkpoints and run
//! manifests, so serialization lives here next to the struct.

use crate::error::{Error, Result};

/// Nonlinearity applied by the post-alignment projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!(
                "unknown projection activation {other:?} (expected relu or tanh)"
            ))),
        }
    }
}

/// Everything that determines the shape and behavior of one model.
///
/// The boolean toggles exist to switch individual architecture pieces off
/// for ablation runs; the full model keeps them all `true`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Word vector width r.
    pub embedding_dim: usize,
    /// LSTM state width d; each BiLSTM emits 2d per token.
    pub hidden_dim: usize,
    /// Dropout rate applied to feedforward inputs while training.
    pub dropout_rate: f64,
    pub projection_activation: Activation,
    /// Dependent-reading rounds in the encoding stage: 1 reads each
    /// sentence independently, 2 is the standard cross-initialized read,
    /// 3 threads the final state through an extra back-and-forth pass.
    pub reading_rounds: usize,
    /// Keep the tanh hidden layer of the output classifier.
    pub hidden_mlp: bool,
    /// Keep the mean half of the fixed pooling stage.
    pub avg_pool: bool,
    /// Keep the max half of the fixed pooling stage.
    pub max_pool: bool,
    /// Keep the elementwise product in the alignment enrichment.
    pub elem_prod: bool,
    /// Keep the difference term in the alignment enrichment.
    pub difference: bool,
    /// Fuse the two inference readings elementwise; off uses the dependent
    /// reading alone.
    pub inference_pooling: bool,
    /// Run the cross-initialized pass in the inference stage.
    pub dep_infer: bool,
    /// Run the cross-initialized pass in the encoding stage.
    pub dep_enc: bool,
    /// Master seed for initialization and dropout streams.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 300,
            hidden_dim: 450,
            dropout_rate: 0.4,
            projection_activation: Activation::Relu,
            reading_rounds: 2,
            hidden_mlp: true,
            avg_pool: true,
            max_pool: true,
            elem_prod: true,
            difference: true,
            inference_pooling: true,
            dep_infer: true,
            dep_enc: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and desk experiments.
    pub fn tiny(embedding_dim: usize, hidden_dim: usize) -> Self {
        ModelConfig {
            embedding_dim,
            hidden_dim,
            dropout_rate: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "embedding_dim and hidden_dim must be positive, got {} and {}",
                self.embedding_dim, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(1..=3).contains(&self.reading_rounds) {
            return Err(Error::Config(format!(
                "reading_rounds must be 1, 2 or 3, got {}",
                self.reading_rounds
            )));
        }
        if !self.avg_pool && !self.max_pool {
            return Err(Error::Config(
                "at least one of avg_pool and max_pool must stay enabled".into(),
            ));
        }
        Ok(())
    }

    /// Width of the classifier hidden layer; tied to the LSTM state width.
    pub fn mlp_hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Width of the concatenated enrichment vector per token: encoded and
    /// aligned values always, difference and product when enabled.
    pub fn enrich_dim(&self) -> usize {
        let parts = 2 + self.difference as usize + self.elem_prod as usize;
        parts * 2 * self.hidden_dim
    }

    /// Width of one sentence's pooled summary.
    pub fn pooled_dim(&self) -> usize {
        let parts = self.max_pool as usize + self.avg_pool as usize;
        parts * 2 * self.hidden_dim
    }

    /// Width of the classifier input: both sentence summaries side by side.
    pub fn mlp_input_dim(&self) -> usize {
        2 * self.pooled_dim()
    }

    /// Total trainable scalars for a given vocabulary size. Closed form so
    /// tests can pin it against the actually allocated tensors.
    pub fn parameter_count(&self, vocab_size: usize) -> usize {
        let d = self.hidden_dim;
        let r = self.embedding_dim;
        let lstm = |input: usize| 2 * (input * 4 * d + d * 4 * d + 4 * d);
        let mlp = if self.hidden_mlp {
            let dh = self.mlp_hidden_dim();
            self.mlp_input_dim() * dh + dh + dh * 3 + 3
        } else {
            self.mlp_input_dim() * 3 + 3
        };
        vocab_size * r
            + lstm(r)
            + (self.enrich_dim() * d + d)
            + lstm(d)
            + mlp
    }

    // ── Text form ────────────────────────────────────────────────────────

    /// Renders the configuration as `key = value` lines in a fixed order,
    /// so equal configurations produce byte-equal text.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("embedding_dim = {}\n", self.embedding_dim));
        s.push_str(&format!("hidden_dim = {}\n", self.hidden_dim));
        s.push_str(&format!("dropout_rate = {}\n", self.dropout_rate));
        s.push_str(&format!(
            "projection_activation = {}\n",
            self.projection_activation.as_str()
        ));
        s.push_str(&format!("reading_rounds = {}\n", self.reading_rounds));
        s.push_str(&format!("hidden_mlp = {}\n", self.hidden_mlp));
        s.push_str(&format!("avg_pool = {}\n", self.avg_pool));
        s.push_str(&format!("max_pool = {}\n", self.max_pool));
        s.push_str(&format!("elem_prod = {}\n", self.elem_prod));
        s.push_str(&format!("difference = {}\n", self.difference));
        s.push_str(&format!(
            "inference_pooling = {}\n",
            self.inference_pooling
        ));
        s.push_str(&format!("dep_infer = {}\n", self.dep_infer));
        s.push_str(&format!("dep_enc = {}\n", self.dep_enc));
        s.push_str(&format!("seed = {}\n", self.seed));
        s
    }

    /// Applies one `key = value` assignment; used by the file parser and by
    /// command line overrides.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("invalid value {value:?} for {key}"))
            })
        }
        match key {
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "projection_activation" => {
                self.projection_activation = Activation::parse(value)?
            }
            "reading_rounds" => self.reading_rounds = num(key, value)?,
            "hidden_mlp" => self.hidden_mlp = num(key, value)?,
            "avg_pool" => self.avg_pool = num(key, value)?,
            "max_pool" => self.max_pool = num(key, value)?,
            "elem_prod" => self.elem_prod = num(key, value)?,
            "difference" => self.difference = num(key, value)?,
            "inference_pooling" => self.inference_pooling = num(key, value)?,
            "dep_infer" => self.dep_infer = num(key, value)?,
            "dep_enc" => self.dep_enc = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown configuration key {other:?}")))
            }
        }
        Ok(())
    }

    /// Parses a `key = value` block. Blank lines and `#` comments are
    /// skipped; unknown keys and malformed lines are rejected with their
    /// line number. Values left unmentioned keep their defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                detail: format!("expected `key = value`, got {raw:?}"),
            })?;
            cfg.apply_kv(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    detail: e.to_string(),
                })?;
        }
        Ok(cfg)
    }
}
