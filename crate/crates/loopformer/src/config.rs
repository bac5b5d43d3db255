//! Run configuration: flat `key = value` lines with `#` comments and dotted
//! section prefixes (`model.d_model = 32`).

use std::fmt::Write as _;
use std::path::Path;

use loopformer_core::data::{SyntheticTask, RESERVED};
use loopformer_core::nn::AttentionScale;
use loopformer_core::train::{AdamConfig, LrSchedule, TrainConfig};
use loopformer_core::{ModelConfig, ShareMode, StackConfig};

use crate::error::{CliError, ConfigError};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_mode: ShareMode,
    pub enc_layers: usize,
    pub enc_loops: usize,
    pub dec_mode: ShareMode,
    pub dec_layers: usize,
    pub dec_loops: usize,
    pub dropout: f64,
    pub reinjection: bool,
    pub attention_scale: AttentionScale,
    pub ln_eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub seed: u64,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub max_tokens: usize,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
    /// Stop once held-out token accuracy reaches this; 0 disables.
    pub stop_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// A synthetic task name or `files`.
    pub task: String,
    pub train_src: String,
    pub train_tgt: String,
    pub valid_src: String,
    pub valid_tgt: String,
    pub vocab_size: usize,
    pub samples: usize,
    pub valid_samples: usize,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub beam: usize,
    pub alpha: f64,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection {
                d_model: 32,
                d_ff: 64,
                heads: 2,
                enc_mode: ShareMode::SharedLoop,
                enc_layers: 2,
                enc_loops: 2,
                dec_mode: ShareMode::SharedLoop,
                dec_layers: 2,
                dec_loops: 2,
                dropout: 0.0,
                reinjection: true,
                attention_scale: AttentionScale::HeadDim,
                ln_eps: 1e-5,
            },
            train: TrainSection {
                seed: 1,
                max_steps: 3000,
                warmup_steps: 400,
                lr_scale: 2.0,
                beta1: 0.9,
                beta2: 0.98,
                adam_eps: 1e-9,
                label_smoothing: 0.1,
                clip_norm: 0.0,
                max_tokens: 256,
                checkpoint_interval: 500,
                eval_interval: 250,
                stop_accuracy: 0.0,
            },
            data: DataSection {
                task: "copy".to_string(),
                train_src: String::new(),
                train_tgt: String::new(),
                valid_src: String::new(),
                valid_tgt: String::new(),
                vocab_size: 16,
                samples: 2000,
                valid_samples: 200,
                min_len: 3,
                max_len: 8,
            },
            eval: EvalSection {
                beam: 4,
                alpha: 0.6,
                max_len: 32,
            },
        }
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse {s:?}: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, String);

impl Value for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "on" | "true" | "yes" | "1" => Ok(true),
            "off" | "false" | "no" | "0" => Ok(false),
            _ => Err(format!("expected on or off, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        if *self { "on" } else { "off" }.to_string()
    }
}

impl Value for ShareMode {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e: loopformer_core::Error| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for AttentionScale {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "head-dim" => Ok(AttentionScale::HeadDim),
            "model-dim" => Ok(AttentionScale::ModelDim),
            _ => Err(format!("expected head-dim or model-dim, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            AttentionScale::HeadDim => "head-dim",
            AttentionScale::ModelDim => "model-dim",
        }
        .to_string()
    }
}

macro_rules! keys {
    ($($key:literal => $sec:ident . $field:ident, $doc:literal;)*) => {
        /// Every accepted key with a one-line description, in file order.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($key => self.$sec.$field = Value::parse_value(value)?,)*
                    _ => return Err("unknown key".to_string()),
                }
                Ok(())
            }

            /// `(key, value)` for every key, rendered so that parsing the
            /// result reproduces `self`.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$sec.$field.render())),*]
            }
        }
    };
}

keys! {
    "model.d_model" => model.d_model, "model width";
    "model.d_ff" => model.d_ff, "feed-forward inner width";
    "model.heads" => model.heads, "attention heads (must divide d_model)";
    "model.enc_mode" => model.enc_mode, "encoder sharing: stacked, shared-loop or closed-chain";
    "model.enc_layers" => model.enc_layers, "encoder layers per block (N)";
    "model.enc_loops" => model.enc_loops, "encoder loop count (T)";
    "model.dec_mode" => model.dec_mode, "decoder sharing: stacked, shared-loop or closed-chain";
    "model.dec_layers" => model.dec_layers, "decoder layers per block (N)";
    "model.dec_loops" => model.dec_loops, "decoder loop count (T)";
    "model.dropout" => model.dropout, "dropout rate in [0, 1)";
    "model.reinjection" => model.reinjection, "re-add the embedded input at block starts (on/off)";
    "model.attention_scale" => model.attention_scale, "attention divisor: head-dim or model-dim";
    "model.ln_eps" => model.ln_eps, "layer-norm epsilon";
    "train.seed" => train.seed, "root seed for init, dropout, shuffling and data";
    "train.max_steps" => train.max_steps, "update budget";
    "train.warmup_steps" => train.warmup_steps, "linear warmup length";
    "train.lr_scale" => train.lr_scale, "multiplier on the inverse-sqrt schedule";
    "train.beta1" => train.beta1, "Adam beta1";
    "train.beta2" => train.beta2, "Adam beta2";
    "train.adam_eps" => train.adam_eps, "Adam epsilon";
    "train.label_smoothing" => train.label_smoothing, "label smoothing in [0, 1)";
    "train.clip_norm" => train.clip_norm, "global gradient-norm clip, 0 = off";
    "train.max_tokens" => train.max_tokens, "padded tokens per batch";
    "train.checkpoint_interval" => train.checkpoint_interval, "steps between checkpoints, 0 = final only";
    "train.eval_interval" => train.eval_interval, "steps between held-out evaluations, 0 = never";
    "train.stop_accuracy" => train.stop_accuracy, "stop once held-out token accuracy reaches this, 0 = off";
    "data.task" => data.task, "copy, reverse, rot13-digits or files";
    "data.train_src" => data.train_src, "training source file (task = files)";
    "data.train_tgt" => data.train_tgt, "training target file (task = files)";
    "data.valid_src" => data.valid_src, "held-out source file (optional)";
    "data.valid_tgt" => data.valid_tgt, "held-out target file (optional)";
    "data.vocab_size" => data.vocab_size, "joint vocabulary size including 4 reserved ids";
    "data.samples" => data.samples, "synthetic training pairs";
    "data.valid_samples" => data.valid_samples, "synthetic held-out pairs";
    "data.min_len" => data.min_len, "shortest synthetic sentence";
    "data.max_len" => data.max_len, "longest synthetic sentence";
    "eval.beam" => eval.beam, "beam width, 1 = greedy";
    "eval.alpha" => eval.alpha, "length-penalty exponent";
    "eval.max_len" => eval.max_len, "longest generated output";
}

/// `--help` text listing every key.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (key = value, # comments):\n");
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, doc) in KEYS {
        let _ = writeln!(out, "  {k:width$}  {doc}");
    }
    out
}

impl RunConfig {
    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::general(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self::parse(&text)?)
    }

    /// Applies `key = value` lines without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    key: None,
                    line: Some(i + 1),
                    message: format!("expected key = value, got {line:?}"),
                });
            };
            self.apply(key.trim(), value.trim()).map_err(|mut e| {
                e.line = Some(i + 1);
                e
            })?;
        }
        Ok(())
    }

    /// Sets one key (used for `--set key=value` overrides as well).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set(key, value).map_err(|m| ConfigError::key(key, m))
    }

    /// The resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn synthetic_task(&self) -> Option<SyntheticTask> {
        self.data.task.parse().ok()
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: self.data.vocab_size,
            d_model: m.d_model,
            d_ff: m.d_ff,
            heads: m.heads,
            encoder: StackConfig::new(m.enc_mode, m.enc_layers, m.enc_loops),
            decoder: StackConfig::new(m.dec_mode, m.dec_layers, m.dec_loops),
            dropout: m.dropout,
            reinjection: m.reinjection,
            attention_scale: m.attention_scale,
            ln_eps: m.ln_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut schedule = LrSchedule::new(self.model.d_model, t.warmup_steps);
        schedule.scale = t.lr_scale;
        TrainConfig {
            label_smoothing: t.label_smoothing,
            adam: AdamConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
            },
            schedule,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            seed: t.seed,
        }
    }

    /// Checks every value against what the library accepts, naming the key
    /// at fault.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let positive = [
            ("model.d_model", m.d_model),
            ("model.d_ff", m.d_ff),
            ("model.heads", m.heads),
            ("model.enc_layers", m.enc_layers),
            ("model.enc_loops", m.enc_loops),
            ("model.dec_layers", m.dec_layers),
            ("model.dec_loops", m.dec_loops),
            ("train.max_tokens", t.max_tokens),
            ("eval.beam", self.eval.beam),
            ("eval.max_len", self.eval.max_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ConfigError::key(key, "must be positive"));
            }
        }
        if !m.d_model.is_multiple_of(m.heads) {
            return Err(ConfigError::key(
                "model.heads",
                format!("{} does not divide d_model = {}", m.heads, m.d_model),
            ));
        }
        for (key, mode, n) in [
            ("model.enc_layers", m.enc_mode, m.enc_layers),
            ("model.dec_layers", m.dec_mode, m.dec_layers),
        ] {
            if mode == ShareMode::ClosedChain && n < 2 {
                return Err(ConfigError::key(
                    key,
                    "closed-chain needs at least 2 layers",
                ));
            }
        }
        let unit = |key: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::key(key, format!("{v} outside [0, 1)")))
            }
        };
        unit("model.dropout", m.dropout)?;
        unit("train.label_smoothing", t.label_smoothing)?;
        unit("train.beta1", t.beta1)?;
        unit("train.beta2", t.beta2)?;
        let pos_f = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::key(key, format!("{v} must be positive")))
            }
        };
        pos_f("model.ln_eps", m.ln_eps)?;
        pos_f("train.adam_eps", t.adam_eps)?;
        if !(t.lr_scale >= 0.0 && t.lr_scale.is_finite()) {
            return Err(ConfigError::key(
                "train.lr_scale",
                "must be finite and non-negative",
            ));
        }
        if t.clip_norm.is_nan() || t.clip_norm < 0.0 {
            return Err(ConfigError::key("train.clip_norm", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&t.stop_accuracy) {
            return Err(ConfigError::key(
                "train.stop_accuracy",
                "must lie in [0, 1]",
            ));
        }
        if !self.eval.alpha.is_finite() || self.eval.alpha < 0.0 {
            return Err(ConfigError::key(
                "eval.alpha",
                "must be finite and non-negative",
            ));
        }
        if t.warmup_steps == 0 {
            return Err(ConfigError::key("train.warmup_steps", "must be positive"));
        }
        if t.max_steps == 0 {
            return Err(ConfigError::key("train.max_steps", "must be positive"));
        }
        if d.vocab_size <= RESERVED {
            return Err(ConfigError::key(
                "data.vocab_size",
                format!("must exceed the {RESERVED} reserved ids"),
            ));
        }
        if d.task == "files" {
            if d.train_src.is_empty() || d.train_tgt.is_empty() {
                let key = if d.train_src.is_empty() {
                    "data.train_src"
                } else {
                    "data.train_tgt"
                };
                return Err(ConfigError::key(key, "required when data.task = files"));
            }
            if d.valid_src.is_empty() != d.valid_tgt.is_empty() {
                return Err(ConfigError::key(
                    "data.valid_src",
                    "give both valid_src and valid_tgt or neither",
                ));
            }
        } else {
            if self.synthetic_task().is_none() {
                return Err(ConfigError::key(
                    "data.task",
                    format!(
                        "unknown task {:?} (copy, reverse, rot13-digits or files)",
                        d.task
                    ),
                ));
            }
            if d.min_len == 0 || d.min_len > d.max_len {
                return Err(ConfigError::key(
                    "data.min_len",
                    format!(
                        "range {}..={} is empty or starts at zero",
                        d.min_len, d.max_len
                    ),
                ));
            }
            if t.max_tokens < d.max_len + 2 {
                return Err(ConfigError::key(
                    "train.max_tokens",
                    format!(
                        "{} cannot hold a sentence of length {} plus specials",
                        t.max_tokens, d.max_len
                    ),
                ));
            }
            if d.samples == 0 {
                return Err(ConfigError::key("data.samples", "must be positive"));
            }
        }
        if t.stop_accuracy > 0.0 && t.eval_interval == 0 {
            return Err(ConfigError::key(
                "train.eval_interval",
                "must be positive when stop_accuracy is set",
            ));
        }
        self.model_config()
            .validate()
            .map_err(|e| ConfigError::general(e.to_string()))
    }
}
