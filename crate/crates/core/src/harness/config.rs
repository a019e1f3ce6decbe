//! Run configuration: one TOML document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::DEFAULT_MAX_SYMBOLS;
use crate::error::{Error, Result};
use crate::model::{MlmConfig, ModelConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Sentences in the LM pretraining corpus.
    pub lm_sentences: usize,
    pub feat_dim: usize,
    /// Standard deviation of the additive frame noise.
    pub noise: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_silence: usize,
    pub max_silence: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Fraction of transcript word types missing from the LM corpus.
    pub lm_drop_fraction: f64,
    /// Invented word types that occur only in the LM corpus.
    pub lm_extra_words: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            dev: 200,
            test: 200,
            lm_sentences: 6000,
            feat_dim: 16,
            noise: 0.1,
            min_duration: 2,
            max_duration: 5,
            min_silence: 1,
            max_silence: 3,
            min_words: 2,
            max_words: 7,
            lm_drop_fraction: 0.2,
            lm_extra_words: 123,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data.{m}")));
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return bad("train, data.dev and data.test must be positive");
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a non-negative number");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("min_duration must lie in 1..=max_duration");
        }
        if self.min_silence > self.max_silence {
            return bad("min_silence must not exceed max_silence");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("min_words must lie in 1..=max_words");
        }
        if !(0.0..1.0).contains(&self.lm_drop_fraction) {
            return bad("lm_drop_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// ASR units (characters plus merges), specials excluded.
    pub asr_units: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { asr_units: 38 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub iterations: usize,
    pub beam: usize,
    pub max_symbols: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            beam: 5,
            max_symbols: DEFAULT_MAX_SYMBOLS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub iterations: Vec<usize>,
    pub beams: Vec<usize>,
    pub repeats: usize,
    /// Test utterances used for timing; 0 means the whole split.
    pub utterances: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            iterations: vec![1, 5, 10, 20],
            beams: vec![1, 3, 5],
            repeats: 5,
            utterances: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    /// `asr_vocab` and `lm_vocab` are filled in from the vocabulary files.
    pub model: ModelConfig,
    pub pretrain: MlmConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub bench: BenchConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "config file not found".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.vocab.asr_units == 0 {
            return Err(Error::Config("vocab.asr_units must be positive".into()));
        }
        if self.decode.iterations == 0 || self.decode.beam == 0 || self.decode.max_symbols == 0 {
            return Err(Error::Config(
                "decode.iterations, decode.beam and decode.max_symbols must be positive".into(),
            ));
        }
        if self.bench.repeats == 0
            || self.bench.iterations.is_empty()
            || self.bench.beams.is_empty()
        {
            return Err(Error::Config(
                "bench grid and repeats must be non-empty".into(),
            ));
        }
        if self.model.feat_dim != self.data.feat_dim {
            return Err(Error::Config(format!(
                "model.feat_dim {} differs from data.feat_dim {}",
                self.model.feat_dim, self.data.feat_dim
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
