//! Run configuration: a flat `key = value` text format with `[section]`
//! headers, no nesting. Parsing starts from a named profile (`desk` by
//! default) and applies overrides; unknown sections or keys are rejected.

use thiserror::Error;

use crate::eval::PoolingMode;
use crate::features::MelConfig;
use crate::speechbert::{MaskMode, SpeechBertConfig};
use crate::tts::TtsConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value` or `[section]`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown section `{0}`", .section)]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: bad value for `{key}`: {detail}")]
    BadValue { line: usize, key: String, detail: String },
    #[error("unknown profile `{0}` (expected desk or paper)")]
    UnknownProfile(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Everything a run needs besides paths: seed, feature extraction, both model
/// configs, per-phase step counts and learning rates, evaluation pooling.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub features: MelConfig,
    pub bert: SpeechBertConfig,
    pub bert_steps: usize,
    pub bert_lr: f64,
    pub tts: TtsConfig,
    pub tts_steps: usize,
    pub tts_lr: f64,
    pub eval_pooling: PoolingMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-friendly profile used throughout the test suites.
    pub fn desk() -> Self {
        Self {
            seed: 42,
            features: MelConfig { bins: 8, ..MelConfig::default() },
            bert: SpeechBertConfig::default(),
            bert_steps: 2000,
            bert_lr: 1e-3,
            tts: TtsConfig::default(),
            tts_steps: 3000,
            tts_lr: 1e-3,
            eval_pooling: PoolingMode::Concat,
        }
    }

    /// Full-scale shapes: 80 mel bins, segment size 20, the dynamic
    /// embedding projected to 80 dimensions.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.features.bins = 80;
        cfg.bert = SpeechBertConfig {
            d_model: 256,
            heads: 4,
            text_layers: 3,
            speech_layers: 3,
            dec_layers: 3,
            bins: 80,
            ..SpeechBertConfig::default()
        };
        cfg.tts = TtsConfig {
            d_model: 256,
            heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            embed_dim: 256,
            dyn_width: 80,
            bins: 80,
            speaker_dim: 64,
            max_decode_frames: 2000,
            ..TtsConfig::default()
        };
        cfg
    }

    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(ConfigError::UnknownProfile(other.to_string())),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::desk();
        let mut section = String::from("run");
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !["run", "features", "bert", "tts", "eval"].contains(&name) {
                    return Err(ConfigError::UnknownSection { line, section: name.to_string() });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::Malformed { line, text: trimmed.to_string() })?;
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Malformed { line, text: trimmed.to_string() });
            }
            cfg.apply(&section, key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                line,
                key: key.to_string(),
                detail: format!("`{value}` does not parse"),
            })
        }
        fn flag(key: &str, value: &str, line: usize) -> Result<bool, ConfigError> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(ConfigError::BadValue { line, key: key.to_string(), detail: format!("`{value}` is not true/false") }),
            }
        }
        match (section, key) {
            // a full reset, so `profile` belongs on the first line
            ("run", "profile") => {
                let base = Self::profile(value)?;
                *self = base;
            }
            ("run", "seed") => self.seed = num(key, value, line)?,
            ("features", "bins") => {
                self.features.bins = num(key, value, line)?;
                self.bert.bins = self.features.bins;
                self.tts.bins = self.features.bins;
            }
            ("features", "frame_shift_ms") => self.features.shift_ms = num(key, value, line)?,
            ("features", "window_ms") => self.features.window_ms = num(key, value, line)?,
            ("features", "fmin") => self.features.fmin = num(key, value, line)?,
            ("features", "fmax") => self.features.fmax = num(key, value, line)?,
            ("features", "floor") => self.features.floor = num(key, value, line)?,
            ("bert", "d_model") => self.bert.d_model = num(key, value, line)?,
            ("bert", "heads") => self.bert.heads = num(key, value, line)?,
            ("bert", "text_layers") => self.bert.text_layers = num(key, value, line)?,
            ("bert", "speech_layers") => self.bert.speech_layers = num(key, value, line)?,
            ("bert", "dec_layers") => self.bert.dec_layers = num(key, value, line)?,
            ("bert", "mask_rate") => self.bert.mask_rate = num(key, value, line)?,
            ("bert", "mask_exact") => {
                self.bert.mask_mode = if flag(key, value, line)? { MaskMode::ExactCount } else { MaskMode::Bernoulli }
            }
            ("bert", "loss_masked_only") => self.bert.loss_masked_only = flag(key, value, line)?,
            ("bert", "max_frames") => self.bert.max_frames = num(key, value, line)?,
            ("bert", "steps") => self.bert_steps = num(key, value, line)?,
            ("bert", "lr") => self.bert_lr = num(key, value, line)?,
            ("tts", "d_model") => {
                self.tts.d_model = num(key, value, line)?;
                self.tts.embed_dim = self.tts.d_model;
            }
            ("tts", "heads") => self.tts.heads = num(key, value, line)?,
            ("tts", "enc_layers") => self.tts.enc_layers = num(key, value, line)?,
            ("tts", "dec_layers") => self.tts.dec_layers = num(key, value, line)?,
            ("tts", "segment_len") => self.tts.segment_len = num(key, value, line)?,
            ("tts", "embed_dim") => self.tts.embed_dim = num(key, value, line)?,
            ("tts", "dyn_width") => self.tts.dyn_width = num(key, value, line)?,
            ("tts", "dynamic") => self.tts.dynamic_embedding = flag(key, value, line)?,
            ("tts", "speaker_count") => self.tts.speaker_count = num(key, value, line)?,
            ("tts", "speaker_dim") => self.tts.speaker_dim = num(key, value, line)?,
            ("tts", "postnet_layers") => self.tts.postnet_layers = num(key, value, line)?,
            ("tts", "postnet_kernel") => self.tts.postnet_kernel = num(key, value, line)?,
            ("tts", "stop_threshold") => self.tts.stop_threshold = num(key, value, line)?,
            ("tts", "max_decode_frames") => self.tts.max_decode_frames = num(key, value, line)?,
            ("tts", "prenet_dropout") => self.tts.prenet_dropout = num(key, value, line)?,
            ("tts", "steps") => self.tts_steps = num(key, value, line)?,
            ("tts", "lr") => self.tts_lr = num(key, value, line)?,
            ("eval", "per_utterance") => {
                self.eval_pooling = if flag(key, value, line)? { PoolingMode::PerUtterance } else { PoolingMode::Concat }
            }
            _ => {
                return Err(ConfigError::UnknownKey { line, section: section.to_string(), key: key.to_string() });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.bert.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tts.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.bert.bins != self.tts.bins || self.bert.bins != self.features.bins {
            return Err(ConfigError::Invalid(format!(
                "mel bins disagree: features {} / bert {} / tts {}",
                self.features.bins, self.bert.bins, self.tts.bins
            )));
        }
        if self.tts.dynamic_embedding && self.tts.embed_dim != self.bert.embed_dim() {
            return Err(ConfigError::Invalid(format!(
                "tts embed_dim {} vs bert embedding width {}",
                self.tts.embed_dim,
                self.bert.embed_dim()
            )));
        }
        if self.bert_lr <= 0.0 || self.tts_lr <= 0.0 {
            return Err(ConfigError::Invalid("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Canonical full serialization; `parse(serialize(c))` reproduces `c`.
    pub fn serialize(&self) -> String {
        let f = &self.features;
        let b = &self.bert;
        let t = &self.tts;
        let mut out = String::new();
        out.push_str(&format!("[run]\nseed = {}\n", self.seed));
        out.push_str(&format!(
            "[features]\nbins = {}\nframe_shift_ms = {}\nwindow_ms = {}\nfmin = {}\nfmax = {}\nfloor = {}\n",
            f.bins, f.shift_ms, f.window_ms, f.fmin, f.fmax, f.floor
        ));
        out.push_str(&format!(
            "[bert]\nd_model = {}\nheads = {}\ntext_layers = {}\nspeech_layers = {}\ndec_layers = {}\nmask_rate = {}\nmask_exact = {}\nloss_masked_only = {}\nmax_frames = {}\nsteps = {}\nlr = {}\n",
            b.d_model,
            b.heads,
            b.text_layers,
            b.speech_layers,
            b.dec_layers,
            b.mask_rate,
            b.mask_mode == MaskMode::ExactCount,
            b.loss_masked_only,
            b.max_frames,
            self.bert_steps,
            self.bert_lr
        ));
        out.push_str(&format!(
            "[tts]\nd_model = {}\nheads = {}\nenc_layers = {}\ndec_layers = {}\nsegment_len = {}\nembed_dim = {}\ndyn_width = {}\ndynamic = {}\nspeaker_count = {}\nspeaker_dim = {}\npostnet_layers = {}\npostnet_kernel = {}\nstop_threshold = {}\nmax_decode_frames = {}\nprenet_dropout = {}\nsteps = {}\nlr = {}\n",
            t.d_model,
            t.heads,
            t.enc_layers,
            t.dec_layers,
            t.segment_len,
            t.embed_dim,
            t.dyn_width,
            t.dynamic_embedding,
            t.speaker_count,
            t.speaker_dim,
            t.postnet_layers,
            t.postnet_kernel,
            t.stop_threshold,
            t.max_decode_frames,
            t.prenet_dropout,
            self.tts_steps,
            self.tts_lr
        ));
        out.push_str(&format!(
            "[eval]\nper_utterance = {}\n",
            self.eval_pooling == PoolingMode::PerUtterance
        ));
        out
    }
}
