//! Run configuration: model dimensions, phase hyperparameters, ablation
//! switches, and the line-oriented config file format.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    /// Feature width d1.
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            max_positions: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BottleneckConfig {
    /// Block count L.
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            blocks: 2,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    /// Layer count N.
    pub layers: usize,
    /// Hidden width d2.
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Adapter bottleneck width r.
    pub adapter_rank: usize,
    pub max_positions: usize,
    /// Gate scale on the attention correction.
    pub alpha1: f64,
    /// Gate scale on the feed-forward correction.
    pub alpha2: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 4,
            width: 128,
            heads: 4,
            ffn_mult: 4,
            adapter_rank: 16,
            max_positions: 512,
            alpha1: 2.0,
            alpha2: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct AblationFlags {
    /// Skip phase 1; phase 2 starts from a random bottleneck.
    pub no_kc: bool,
    /// Drop the alignment term from the phase-1 objective.
    pub no_align: bool,
    /// Remove both adapter sites.
    pub no_ka_adapter: bool,
    /// Remove the gated prefix-attention site.
    pub no_ka_attn: bool,
    /// Remove the gated parallel feed-forward site.
    pub no_ka_ffn: bool,
}

impl AblationFlags {
    /// `no_ka_adapter` implies both sub-flags.
    pub fn normalized(mut self) -> Self {
        if self.no_ka_attn && self.no_ka_ffn {
            self.no_ka_adapter = true;
        }
        if self.no_ka_adapter {
            self.no_ka_attn = true;
            self.no_ka_ffn = true;
        }
        self
    }

    pub fn ka_attn_enabled(&self) -> bool {
        !self.no_ka_attn && !self.no_ka_adapter
    }

    pub fn ka_ffn_enabled(&self) -> bool {
        !self.no_ka_ffn && !self.no_ka_adapter
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Number of knowledge queries / compressed vectors.
    pub m: usize,
    /// Set from the vocabulary when the model is built.
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub bottleneck: BottleneckConfig,
    pub decoder: DecoderConfig,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 16,
            vocab_size: 0,
            encoder: EncoderConfig::default(),
            bottleneck: BottleneckConfig::default(),
            decoder: DecoderConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        let checks: [(bool, &str); 11] = [
            (self.m >= 1, "m must be at least 1"),
            (e.layers >= 1 && d.layers >= 1, "layer counts must be at least 1"),
            (e.width >= 1 && d.width >= 1, "widths must be positive"),
            (e.heads >= 1 && e.width % e.heads == 0, "encoder width must divide by heads"),
            (d.heads >= 1 && d.width % d.heads == 0, "decoder width must divide by heads"),
            (
                self.bottleneck.heads >= 1 && e.width % self.bottleneck.heads == 0,
                "bottleneck heads must divide the encoder width",
            ),
            (self.bottleneck.blocks >= 1, "bottleneck needs at least one block"),
            (d.adapter_rank >= 1 && d.adapter_rank < d.width, "adapter rank must be below the decoder width"),
            (d.alpha1 >= 0.0 && d.alpha2 >= 0.0, "gate scales must be non-negative"),
            (e.max_positions >= 1 && d.max_positions >= 1, "position budgets must be positive"),
            (e.ffn_mult >= 1 && d.ffn_mult >= 1 && self.bottleneck.ffn_mult >= 1, "ffn multipliers must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        Ok(())
    }

    /// Micro dimensions for the finite-difference suite.
    pub fn micro() -> Self {
        ModelConfig {
            m: 4,
            vocab_size: 0,
            encoder: EncoderConfig {
                layers: 1,
                width: 16,
                heads: 2,
                ffn_mult: 2,
                max_positions: 64,
            },
            bottleneck: BottleneckConfig {
                blocks: 1,
                heads: 2,
                ffn_mult: 2,
            },
            decoder: DecoderConfig {
                layers: 2,
                width: 32,
                heads: 2,
                ffn_mult: 2,
                adapter_rank: 4,
                max_positions: 128,
                alpha1: 2.0,
                alpha2: 4.0,
            },
            ablation: AblationFlags::default(),
        }
    }

    /// Dimensions scaled to an 8B-class frozen decoder with a base-size
    /// bidirectional encoder, for the parameter-ratio arithmetic check.
    /// Never materialized as tensors.
    pub fn paper_proportions() -> Self {
        ModelConfig {
            m: 16,
            vocab_size: 128_256,
            encoder: EncoderConfig {
                layers: 12,
                width: 768,
                heads: 12,
                ffn_mult: 4,
                max_positions: 512,
            },
            bottleneck: BottleneckConfig {
                blocks: 12,
                heads: 12,
                ffn_mult: 4,
            },
            decoder: DecoderConfig {
                layers: 32,
                width: 4096,
                heads: 32,
                ffn_mult: 4,
                adapter_rank: 512,
                max_positions: 2048,
                alpha1: 2.0,
                alpha2: 4.0,
            },
            ablation: AblationFlags::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    ConstantWithWarmup,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhaseHyper {
    pub learning_rate: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub phase1: PhaseHyper,
    pub phase2: PhaseHyper,
    /// Weight of the alignment term in the phase-1 objective.
    pub beta: f64,
    /// Divide the alignment loss by m only, instead of every entry.
    pub align_per_vector: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1: PhaseHyper {
                learning_rate: 2e-4,
                schedule: ScheduleKind::ConstantWithWarmup,
                warmup_steps: 100,
                weight_decay: 0.05,
                batch_size: 8,
                epochs: 1,
            },
            phase2: PhaseHyper {
                learning_rate: 1e-4,
                schedule: ScheduleKind::Cosine,
                warmup_steps: 100,
                weight_decay: 0.05,
                batch_size: 8,
                epochs: 3,
            },
            beta: 0.5,
            align_per_vector: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::config("beta must be non-negative"));
        }
        for (hyper, label) in [(&self.phase1, "phase1"), (&self.phase2, "phase2")] {
            if hyper.learning_rate <= 0.0 {
                return Err(Error::config(format!("{label} learning rate must be positive")));
            }
            if hyper.batch_size == 0 || hyper.epochs == 0 {
                return Err(Error::config(format!("{label} batch size and epochs must be positive")));
            }
        }
        Ok(())
    }
}

/// Decoding settings for generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecodeConfig {
    pub greedy: bool,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            greedy: true,
            temperature: 1.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens < 1 {
            return Err(Error::config("max_new_tokens must be at least 1"));
        }
        if !self.greedy && self.temperature <= 0.0 {
            return Err(Error::config("sampling temperature must be positive"));
        }
        Ok(())
    }
}

/// Everything a run needs; serialized into checkpoints and reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// Word-type cap when building a vocabulary from data.
    pub max_vocab_words: usize,
    /// Pieces retrieved per context when retrieval is requested.
    pub retrieve_n: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            max_vocab_words: 2048,
            retrieve_n: 3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }

    pub fn normalized(mut self) -> Self {
        self.model.ablation = self.model.ablation.normalized();
        self
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        crate::params::hex_string(&hasher.finalize())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::config(format!("bad config json: {e}")))
    }

    /// Parse the line-oriented `key = value` format with `[section]`
    /// headers. Keys are applied through `set`, so sections and flags
    /// share one override path.
    pub fn from_file(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (no, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value", no + 1))
            })?;
            let full_key = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            cfg.set(&full_key, value.trim()).map_err(|e| {
                Error::config(format!("line {}: {e}", no + 1))
            })?;
        }
        Ok(cfg)
    }

    /// Apply one dotted-key override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("cannot parse {v:?} for {key}")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "max_vocab_words" => self.max_vocab_words = parse(key, value)?,
            "retrieve_n" => self.retrieve_n = parse(key, value)?,
            "model.m" => self.model.m = parse(key, value)?,
            "encoder.layers" => self.model.encoder.layers = parse(key, value)?,
            "encoder.width" => self.model.encoder.width = parse(key, value)?,
            "encoder.heads" => self.model.encoder.heads = parse(key, value)?,
            "encoder.ffn_mult" => self.model.encoder.ffn_mult = parse(key, value)?,
            "encoder.max_positions" => self.model.encoder.max_positions = parse(key, value)?,
            "bottleneck.blocks" => self.model.bottleneck.blocks = parse(key, value)?,
            "bottleneck.heads" => self.model.bottleneck.heads = parse(key, value)?,
            "bottleneck.ffn_mult" => self.model.bottleneck.ffn_mult = parse(key, value)?,
            "decoder.layers" => self.model.decoder.layers = parse(key, value)?,
            "decoder.width" => self.model.decoder.width = parse(key, value)?,
            "decoder.heads" => self.model.decoder.heads = parse(key, value)?,
            "decoder.ffn_mult" => self.model.decoder.ffn_mult = parse(key, value)?,
            "decoder.adapter_rank" => self.model.decoder.adapter_rank = parse(key, value)?,
            "decoder.max_positions" => self.model.decoder.max_positions = parse(key, value)?,
            "decoder.alpha1" => self.model.decoder.alpha1 = parse(key, value)?,
            "decoder.alpha2" => self.model.decoder.alpha2 = parse(key, value)?,
            "ablation.no_kc" => self.model.ablation.no_kc = parse(key, value)?,
            "ablation.no_align" => self.model.ablation.no_align = parse(key, value)?,
            "ablation.no_ka_adapter" => self.model.ablation.no_ka_adapter = parse(key, value)?,
            "ablation.no_ka_attn" => self.model.ablation.no_ka_attn = parse(key, value)?,
            "ablation.no_ka_ffn" => self.model.ablation.no_ka_ffn = parse(key, value)?,
            "train.beta" => self.train.beta = parse(key, value)?,
            "train.align_per_vector" => self.train.align_per_vector = parse(key, value)?,
            "phase1.learning_rate" => self.train.phase1.learning_rate = parse(key, value)?,
            "phase1.warmup_steps" => self.train.phase1.warmup_steps = parse(key, value)?,
            "phase1.weight_decay" => self.train.phase1.weight_decay = parse(key, value)?,
            "phase1.batch_size" => self.train.phase1.batch_size = parse(key, value)?,
            "phase1.epochs" => self.train.phase1.epochs = parse(key, value)?,
            "phase2.learning_rate" => self.train.phase2.learning_rate = parse(key, value)?,
            "phase2.warmup_steps" => self.train.phase2.warmup_steps = parse(key, value)?,
            "phase2.weight_decay" => self.train.phase2.weight_decay = parse(key, value)?,
            "phase2.batch_size" => self.train.phase2.batch_size = parse(key, value)?,
            "phase2.epochs" => self.train.phase2.epochs = parse(key, value)?,
            "decode.greedy" => self.decode.greedy = parse(key, value)?,
            "decode.temperature" => self.decode.temperature = parse(key, value)?,
            "decode.max_new_tokens" => self.decode.max_new_tokens = parse(key, value)?,
            "decode.seed" => self.decode.seed = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}
