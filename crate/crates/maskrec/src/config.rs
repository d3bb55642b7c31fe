//! Flat `key = value` configuration.
//!
//! One UTF-8 line per key, `#` starts a comment, sections are dotted
//! prefixes (`codebook.*`, `model.*`, `curriculum.*`, `masking.*`,
//! `train.*`, `decode.*`, `eval.*`, `benchmark.*`). Unknown keys are
//! rejected; every key has a documented default; the effective config is
//! echoed into each run directory.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codebook::{CodebookConfig, RotationMode};
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::schedule::{CurriculumConfig, ScoreFns};
use crate::trainer::{AblationFlags, LossNorm, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Str,
}

/// Every key, its type, default, and one-line description.
const REGISTRY: &[(&str, Kind, &str, &str)] = &[
    ("codebook.l", Kind::Usize, "4", "number of sub-codebooks (SID length)"),
    ("codebook.vocab_size", Kind::Usize, "32", "codewords per sub-codebook"),
    ("codebook.kmeans_iters", Kind::Usize, "25", "Lloyd iterations per subspace"),
    ("codebook.kmeans_attempts", Kind::Usize, "4", "k-means restarts per subspace, best distortion wins"),
    ("codebook.rotation", Kind::Str, "random", "rotation before slicing: random | identity"),
    ("model.hidden", Kind::Usize, "64", "hidden width d"),
    ("model.encoder_layers", Kind::Usize, "2", "encoder depth"),
    ("model.decoder_layers", Kind::Usize, "2", "decoder depth"),
    ("model.heads", Kind::Usize, "4", "attention heads"),
    ("model.ffn_mult", Kind::Usize, "4", "FFN width multiplier"),
    ("model.max_history", Kind::Usize, "20", "history cap T (most recent kept)"),
    ("model.dropout", Kind::F64, "0.0", "dropout rate in training mode"),
    ("curriculum.gamma", Kind::F64, "2.0", "difficulty stretch exponent"),
    (
        "curriculum.total_steps",
        Kind::U64,
        "0",
        "steps over which difficulty runs 1 to 0 (0 = train.steps)",
    ),
    ("masking.epsilon", Kind::F64, "0.1", "history-aware masking epsilon"),
    ("train.batch_size", Kind::Usize, "32", "samples per optimizer step"),
    ("train.steps", Kind::U64, "2000", "optimizer steps to run"),
    ("train.lr", Kind::F64, "0.001", "Adam learning rate"),
    ("train.beta1", Kind::F64, "0.9", "Adam beta1"),
    ("train.beta2", Kind::F64, "0.999", "Adam beta2"),
    ("train.eps", Kind::F64, "1e-8", "Adam epsilon"),
    ("train.eval_interval", Kind::U64, "0", "steps between validation evals (0 = off)"),
    ("train.eval_users", Kind::Usize, "200", "user cap for interval evals (0 = all)"),
    ("train.checkpoint_interval", Kind::U64, "0", "steps between checkpoints (0 = final only)"),
    ("train.min_interactions", Kind::Usize, "0", "drop users with fewer interactions (0 = keep all)"),
    (
        "train.loss_norm",
        Kind::Str,
        "per-sample-sum",
        "loss normalization: per-sample-sum | per-token-mean",
    ),
    ("train.random_quantity", Kind::Bool, "false", "ablation: uniform mask count"),
    ("train.random_positions", Kind::Bool, "false", "ablation: uniform mask positions"),
    ("train.vanilla_mask", Kind::Bool, "false", "ablation: uniform count and positions"),
    ("train.no_difficulty_vector", Kind::Bool, "false", "ablation: drop the difficulty embedding"),
    ("decode.r_warm", Kind::Usize, "4", "single-position warm-up rounds"),
    ("decode.m_par", Kind::Usize, "2", "positions per round after warm-up"),
    ("decode.beam_width", Kind::Usize, "50", "beam width B"),
    ("decode.max_steps", Kind::Usize, "64", "hard cap on decode rounds"),
    (
        "decode.random_position_selection",
        Kind::Bool,
        "false",
        "ablation: random instead of confidence-ordered positions",
    ),
    ("decode.top_k", Kind::Usize, "10", "items emitted per user by the decode command"),
    ("eval.max_users", Kind::Usize, "0", "cap evaluated users (0 = all)"),
    ("benchmark.warmup_users", Kind::Usize, "10", "untimed decodes before measuring"),
    (
        "benchmark.grid",
        Kind::Str,
        "0:1,0:2,2:2,4:2,6:2,4:3,4:4",
        "comma-separated r_warm:m_par cells",
    ),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: REGISTRY
                .iter()
                .map(|(k, _, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

fn kind_of(key: &str) -> Option<Kind> {
    REGISTRY.iter().find(|(k, ..)| *k == key).map(|(_, t, ..)| *t)
}

impl Config {
    /// Set one key, validating both the key and the value's type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let kind = kind_of(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let ok = match kind {
            Kind::Usize => value.parse::<usize>().is_ok(),
            Kind::U64 => value.parse::<u64>().is_ok(),
            Kind::F64 => value.parse::<f64>().is_ok(),
            Kind::Bool => matches!(value, "true" | "false"),
            Kind::Str => true,
        };
        if !ok {
            return Err(Error::Config(format!(
                "bad value {value:?} for {key} (expected {kind:?})"
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parse a config file over the defaults.
    pub fn load(path: &Path) -> Result<Config> {
        let mut cfg = Config::default();
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// All keys and effective values, one `key = value` line each.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Reference-scale preset: 8 codebooks of 300, hidden 256, 6+6
    /// layers, 8 heads.
    pub fn apply_paper_scale(&mut self) {
        for (k, v) in [
            ("codebook.l", "8"),
            ("codebook.vocab_size", "300"),
            ("model.hidden", "256"),
            ("model.encoder_layers", "6"),
            ("model.decoder_layers", "6"),
            ("model.heads", "8"),
        ] {
            self.set(k, v).expect("preset keys are registered");
        }
    }

    pub fn get_str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unregistered key {key:?}"))
    }

    pub fn get_usize(&self, key: &str) -> usize {
        self.get_str(key).parse().expect("validated at set")
    }

    pub fn get_u64(&self, key: &str) -> u64 {
        self.get_str(key).parse().expect("validated at set")
    }

    pub fn get_f64(&self, key: &str) -> f64 {
        self.get_str(key).parse().expect("validated at set")
    }

    pub fn get_bool(&self, key: &str) -> bool {
        self.get_str(key) == "true"
    }

    // ── typed sub-configs ───────────────────────────────────────────────

    pub fn codebook_config(&self) -> Result<CodebookConfig> {
        Ok(CodebookConfig {
            l: self.get_usize("codebook.l"),
            vocab_size: self.get_usize("codebook.vocab_size"),
            kmeans_iters: self.get_usize("codebook.kmeans_iters"),
            kmeans_attempts: self.get_usize("codebook.kmeans_attempts"),
            rotation: RotationMode::parse(self.get_str("codebook.rotation"))?,
        })
    }

    /// Model config; vocabulary sizes come from the fitted codebook.
    pub fn model_config(&self, vocab_sizes: Vec<usize>) -> ModelConfig {
        ModelConfig {
            l: vocab_sizes.len(),
            vocab_sizes,
            hidden: self.get_usize("model.hidden"),
            encoder_layers: self.get_usize("model.encoder_layers"),
            decoder_layers: self.get_usize("model.decoder_layers"),
            heads: self.get_usize("model.heads"),
            ffn_mult: self.get_usize("model.ffn_mult"),
            max_history: self.get_usize("model.max_history"),
            dropout: self.get_f64("model.dropout"),
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let steps = self.get_u64("train.steps");
        let curriculum_steps = match self.get_u64("curriculum.total_steps") {
            0 => steps.max(1),
            n => n,
        };
        let loss_norm = match self.get_str("train.loss_norm") {
            "per-sample-sum" => LossNorm::PerSampleSum,
            "per-token-mean" => LossNorm::PerTokenMean,
            other => {
                return Err(Error::Config(format!(
                    "unknown train.loss_norm {other:?}"
                )))
            }
        };
        Ok(TrainConfig {
            batch_size: self.get_usize("train.batch_size"),
            total_steps: steps,
            curriculum: CurriculumConfig {
                gamma: self.get_f64("curriculum.gamma"),
                total_steps: curriculum_steps,
                score_fns: ScoreFns::Linear,
            },
            adam: AdamConfig {
                lr: self.get_f64("train.lr"),
                beta1: self.get_f64("train.beta1"),
                beta2: self.get_f64("train.beta2"),
                eps: self.get_f64("train.eps"),
            },
            epsilon: self.get_f64("masking.epsilon"),
            eval_interval: self.get_u64("train.eval_interval"),
            seed,
            loss_norm,
            ablation: AblationFlags {
                random_quantity: self.get_bool("train.random_quantity"),
                random_positions: self.get_bool("train.random_positions"),
                vanilla_mask: self.get_bool("train.vanilla_mask"),
                no_difficulty_vector: self.get_bool("train.no_difficulty_vector"),
            },
        })
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            r_warm: self.get_usize("decode.r_warm"),
            m_par: self.get_usize("decode.m_par"),
            beam_width: self.get_usize("decode.beam_width"),
            max_steps: self.get_usize("decode.max_steps"),
            random_position_selection: self.get_bool("decode.random_position_selection"),
        }
    }

    pub fn benchmark_grid(&self) -> Result<Vec<(usize, usize)>> {
        self.get_str("benchmark.grid")
            .split(',')
            .map(|cell| {
                let (a, b) = cell.trim().split_once(':').ok_or_else(|| {
                    Error::Config(format!("grid cell {cell:?} is not r_warm:m_par"))
                })?;
                let r = a.trim().parse().map_err(|_| {
                    Error::Config(format!("bad r_warm in grid cell {cell:?}"))
                })?;
                let m = b.trim().parse().map_err(|_| {
                    Error::Config(format!("bad m_par in grid cell {cell:?}"))
                })?;
                Ok((r, m))
            })
            .collect()
    }

    /// `key = default  # description` lines for --help output.
    pub fn documented_defaults() -> String {
        let mut out = String::new();
        for (k, _, d, help) in REGISTRY {
            out.push_str(&format!("{k} = {d}  # {help}\n"));
        }
        out
    }
}
