//! Run configuration: typed sections plus a flat dotted-key text format.
//!
//! Config files are `key = value` lines (`#` starts a comment). Every key
//! belongs to one of the documented sections (`data.*`, `encoder.*`, `kdm.*`,
//! `gadm.*`, `train.*`); unknown keys are hard errors. The environment
//! variable `DISCOVER_SEED`, when set, overrides both the data and training
//! seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DiscoverError, Result};
use crate::gadm::TransitionMetric;

/// Which knowledge kinds participate in the knowledge-guided module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeKind {
    F0,
    Timbre,
    Both,
}

impl KnowledgeKind {
    pub fn uses_f0(self) -> bool {
        matches!(self, KnowledgeKind::F0 | KnowledgeKind::Both)
    }
    pub fn uses_timbre(self) -> bool {
        matches!(self, KnowledgeKind::Timbre | KnowledgeKind::Both)
    }
    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeKind::F0 => "f0",
            KnowledgeKind::Timbre => "timbre",
            KnowledgeKind::Both => "both",
        }
    }
}

/// Corpus generation and split parameters (`data.*`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub n_songs: usize,
    pub versions_min: usize,
    pub versions_max: usize,
    pub melody_len: usize,
    pub frames_per_note: usize,
    pub feature_dim: usize,
    pub timbre_dim: usize,
    pub noise_sigma: f64,
    pub base_pitch_min: f64,
    pub base_pitch_max: f64,
    /// Versions are transposed uniformly within +/- this many semitones.
    pub transposition_range: f64,
    /// Transpose by whole semitones (the usual cover-song regime); when
    /// false, transpositions are continuous.
    pub integer_transpositions: bool,
    /// Minimum transposition separation between versions of one song.
    pub transposition_min_gap: f64,
    pub tempo_min: f64,
    pub tempo_max: f64,
    /// Minimum Euclidean distance between timbres of one song's versions.
    pub timbre_margin: f64,
    pub seed: u64,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    pub scenario: u8,
    pub seen_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_songs: 100,
            versions_min: 2,
            versions_max: 3,
            melody_len: 32,
            frames_per_note: 4,
            feature_dim: 48,
            timbre_dim: 16,
            noise_sigma: 0.1,
            base_pitch_min: 52.0,
            base_pitch_max: 76.0,
            transposition_range: 2.0,
            integer_transpositions: true,
            transposition_min_gap: 1.0,
            tempo_min: 0.7,
            tempo_max: 1.4,
            timbre_margin: 1.0,
            seed: 7,
            train_ratio: 0.8,
            valid_ratio: 0.1,
            test_ratio: 0.1,
            scenario: 1,
            seen_fraction: 0.25,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_songs < 2 {
            return Err(DiscoverError::Config("data.n_songs must be >= 2".into()));
        }
        if self.versions_min < 1 || self.versions_max > 20 || self.versions_min > self.versions_max
        {
            return Err(DiscoverError::Config(
                "data.versions_min..data.versions_max must lie within [1, 20]".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(DiscoverError::Config(
                "data.feature_dim must be positive".into(),
            ));
        }
        if self.timbre_dim == 0 {
            return Err(DiscoverError::Config(
                "data.timbre_dim must be positive".into(),
            ));
        }
        if self.melody_len == 0 || self.frames_per_note == 0 {
            return Err(DiscoverError::Config(
                "data.melody_len and data.frames_per_note must be positive".into(),
            ));
        }
        if !(self.tempo_min >= 0.5 && self.tempo_max <= 2.0 && self.tempo_min <= self.tempo_max) {
            return Err(DiscoverError::Config(
                "data.tempo_min..data.tempo_max must lie within [0.5, 2.0]".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(DiscoverError::Config(
                "data.noise_sigma must be non-negative".into(),
            ));
        }
        if self.scenario != 1 && self.scenario != 2 {
            return Err(DiscoverError::Config("data.scenario must be 1 or 2".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(DiscoverError::Config(
                "data.seed must fit in a signed 64-bit integer".into(),
            ));
        }
        Ok(())
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train_ratio, self.valid_ratio, self.test_ratio)
    }
}

/// Encoder architecture (`encoder.*`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 64,
            dim: 64,
        }
    }
}

/// Knowledge-guided disentanglement settings (`kdm.*`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KdmConfig {
    pub enabled: bool,
    pub knowledge: KnowledgeKind,
    /// Enables the gated fusion (F0 side) and pseudo-label classification
    /// (timbre side) stabilizers.
    pub tradeoff: bool,
    /// Dimension of the F0 summary vector.
    pub knowledge_dim: usize,
    pub estimator_hidden: usize,
    pub clusters: usize,
}

impl Default for KdmConfig {
    fn default() -> Self {
        KdmConfig {
            enabled: true,
            knowledge: KnowledgeKind::Both,
            tradeoff: true,
            knowledge_dim: 16,
            estimator_hidden: 64,
            clusters: 100,
        }
    }
}

/// Gradient-based adversarial disentanglement settings (`gadm.*`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GadmConfig {
    pub enabled: bool,
    pub metric: TransitionMetric,
    /// Percentile of gradient entries receiving softmax attenuation, in (0, 100].
    pub percentile: f64,
    /// Use the printed signs of the two alternating objectives verbatim
    /// instead of the standard adversarial convention.
    pub paper_literal: bool,
    pub disc_hidden: usize,
}

impl Default for GadmConfig {
    fn default() -> Self {
        GadmConfig {
            enabled: true,
            metric: TransitionMetric::Euclidean,
            percentile: 100.0,
            paper_literal: false,
            disc_hidden: 64,
        }
    }
}

/// Optimization settings (`train.*`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Weight of the mutual-information loss in the main objective.
    pub lambda1: f64,
    /// Weight of the estimator likelihood loss in the auxiliary objective.
    pub lambda2: f64,
    pub seed: u64,
    /// Auxiliary steps taken before each main step.
    pub aux_ratio: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 4e-4,
            weight_decay: 1e-5,
            epochs: 10,
            lambda1: 0.05,
            lambda2: 1.0,
            seed: 17,
            aux_ratio: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(DiscoverError::Config(
                "train.batch_size must be even and >= 2".into(),
            ));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(DiscoverError::Config(
                "train.lambda1 and train.lambda2 must be non-negative".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(DiscoverError::Config("train.lr must be positive".into()));
        }
        if self.aux_ratio == 0 {
            return Err(DiscoverError::Config(
                "train.aux_ratio must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Full run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub kdm: KdmConfig,
    pub gadm: GadmConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.encoder.dim == 0 || self.encoder.hidden == 0 {
            return Err(DiscoverError::Config(
                "encoder.dim and encoder.hidden must be positive".into(),
            ));
        }
        if self.kdm.knowledge_dim == 0 || self.kdm.estimator_hidden == 0 {
            return Err(DiscoverError::Config(
                "kdm.knowledge_dim and kdm.estimator_hidden must be positive".into(),
            ));
        }
        if self.kdm.clusters == 0 {
            return Err(DiscoverError::Config("kdm.clusters must be positive".into()));
        }
        if !(self.gadm.percentile > 0.0 && self.gadm.percentile <= 100.0) {
            return Err(DiscoverError::Config(
                "gadm.percentile must lie in (0, 100]".into(),
            ));
        }
        Ok(())
    }

    /// Parse a flat dotted-key config file, starting from defaults. The
    /// `DISCOVER_SEED` environment override applies here (and only here, so
    /// frozen artifacts like checkpoints are immune to it).
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            DiscoverError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config = Self::from_str_contents(&text)?;
        config.apply_env_seed();
        config.validate()?;
        Ok(config)
    }

    pub fn from_str_contents(text: &str) -> Result<Config> {
        let mut config = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DiscoverError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Apply the `DISCOVER_SEED` environment override to both seeds.
    pub fn apply_env_seed(&mut self) {
        if let Ok(v) = std::env::var("DISCOVER_SEED") {
            if let Ok(seed) = v.trim().parse::<u64>() {
                self.data.seed = seed;
                self.train.seed = seed;
            }
        }
    }

    /// Set a single dotted key. Unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                DiscoverError::Config(format!("invalid value {value:?} for key {key}"))
            })
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(DiscoverError::Config(format!(
                    "invalid boolean {value:?} for key {key}"
                ))),
            }
        }
        match key {
            "data.n_songs" => self.data.n_songs = parse(key, value)?,
            "data.versions_min" => self.data.versions_min = parse(key, value)?,
            "data.versions_max" => self.data.versions_max = parse(key, value)?,
            "data.melody_len" => self.data.melody_len = parse(key, value)?,
            "data.frames_per_note" => self.data.frames_per_note = parse(key, value)?,
            "data.feature_dim" => self.data.feature_dim = parse(key, value)?,
            "data.timbre_dim" => self.data.timbre_dim = parse(key, value)?,
            "data.noise_sigma" => self.data.noise_sigma = parse(key, value)?,
            "data.base_pitch_min" => self.data.base_pitch_min = parse(key, value)?,
            "data.base_pitch_max" => self.data.base_pitch_max = parse(key, value)?,
            "data.transposition_range" => self.data.transposition_range = parse(key, value)?,
            "data.integer_transpositions" => {
                self.data.integer_transpositions = parse_bool(key, value)?
            }
            "data.transposition_min_gap" => self.data.transposition_min_gap = parse(key, value)?,
            "data.tempo_min" => self.data.tempo_min = parse(key, value)?,
            "data.tempo_max" => self.data.tempo_max = parse(key, value)?,
            "data.timbre_margin" => self.data.timbre_margin = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.train_ratio" => self.data.train_ratio = parse(key, value)?,
            "data.valid_ratio" => self.data.valid_ratio = parse(key, value)?,
            "data.test_ratio" => self.data.test_ratio = parse(key, value)?,
            "data.scenario" => self.data.scenario = parse(key, value)?,
            "data.seen_fraction" => self.data.seen_fraction = parse(key, value)?,
            "encoder.hidden" => self.encoder.hidden = parse(key, value)?,
            "encoder.dim" => self.encoder.dim = parse(key, value)?,
            "kdm.enabled" => self.kdm.enabled = parse_bool(key, value)?,
            "kdm.knowledge" => {
                self.kdm.knowledge = match value {
                    "f0" => KnowledgeKind::F0,
                    "timbre" => KnowledgeKind::Timbre,
                    "both" => KnowledgeKind::Both,
                    _ => {
                        return Err(DiscoverError::Config(format!(
                            "kdm.knowledge must be f0|timbre|both, got {value:?}"
                        )))
                    }
                }
            }
            "kdm.tradeoff" => self.kdm.tradeoff = parse_bool(key, value)?,
            "kdm.knowledge_dim" => self.kdm.knowledge_dim = parse(key, value)?,
            "kdm.estimator_hidden" => self.kdm.estimator_hidden = parse(key, value)?,
            "kdm.clusters" => self.kdm.clusters = parse(key, value)?,
            "gadm.enabled" => self.gadm.enabled = parse_bool(key, value)?,
            "gadm.metric" => {
                self.gadm.metric = match value {
                    "euclidean" => TransitionMetric::Euclidean,
                    "manhattan" => TransitionMetric::Manhattan,
                    "cosine" => TransitionMetric::Cosine,
                    _ => {
                        return Err(DiscoverError::Config(format!(
                            "gadm.metric must be euclidean|manhattan|cosine, got {value:?}"
                        )))
                    }
                }
            }
            "gadm.percentile" => self.gadm.percentile = parse(key, value)?,
            "gadm.paper_literal" => self.gadm.paper_literal = parse_bool(key, value)?,
            "gadm.disc_hidden" => self.gadm.disc_hidden = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.lambda1" => self.train.lambda1 = parse(key, value)?,
            "train.lambda2" => self.train.lambda2 = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.aux_ratio" => self.train.aux_ratio = parse(key, value)?,
            _ => {
                return Err(DiscoverError::Config(format!("unknown config key: {key}")));
            }
        }
        Ok(())
    }

    /// Canonical sorted `key = value` rendering, used for digests and run
    /// manifests.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("data.n_songs", self.data.n_songs.to_string());
        put("data.versions_min", self.data.versions_min.to_string());
        put("data.versions_max", self.data.versions_max.to_string());
        put("data.melody_len", self.data.melody_len.to_string());
        put("data.frames_per_note", self.data.frames_per_note.to_string());
        put("data.feature_dim", self.data.feature_dim.to_string());
        put("data.timbre_dim", self.data.timbre_dim.to_string());
        put("data.noise_sigma", self.data.noise_sigma.to_string());
        put("data.base_pitch_min", self.data.base_pitch_min.to_string());
        put("data.base_pitch_max", self.data.base_pitch_max.to_string());
        put(
            "data.transposition_range",
            self.data.transposition_range.to_string(),
        );
        put(
            "data.integer_transpositions",
            self.data.integer_transpositions.to_string(),
        );
        put(
            "data.transposition_min_gap",
            self.data.transposition_min_gap.to_string(),
        );
        put("data.tempo_min", self.data.tempo_min.to_string());
        put("data.tempo_max", self.data.tempo_max.to_string());
        put("data.timbre_margin", self.data.timbre_margin.to_string());
        put("data.seed", self.data.seed.to_string());
        put("data.train_ratio", self.data.train_ratio.to_string());
        put("data.valid_ratio", self.data.valid_ratio.to_string());
        put("data.test_ratio", self.data.test_ratio.to_string());
        put("data.scenario", self.data.scenario.to_string());
        put("data.seen_fraction", self.data.seen_fraction.to_string());
        put("encoder.hidden", self.encoder.hidden.to_string());
        put("encoder.dim", self.encoder.dim.to_string());
        put("kdm.enabled", self.kdm.enabled.to_string());
        put("kdm.knowledge", self.kdm.knowledge.as_str().to_string());
        put("kdm.tradeoff", self.kdm.tradeoff.to_string());
        put("kdm.knowledge_dim", self.kdm.knowledge_dim.to_string());
        put(
            "kdm.estimator_hidden",
            self.kdm.estimator_hidden.to_string(),
        );
        put("kdm.clusters", self.kdm.clusters.to_string());
        put("gadm.enabled", self.gadm.enabled.to_string());
        put("gadm.metric", self.gadm.metric.as_str().to_string());
        put("gadm.percentile", self.gadm.percentile.to_string());
        put("gadm.paper_literal", self.gadm.paper_literal.to_string());
        put("gadm.disc_hidden", self.gadm.disc_hidden.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.lr", self.train.lr.to_string());
        put("train.weight_decay", self.train.weight_decay.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.lambda1", self.train.lambda1.to_string());
        put("train.lambda2", self.train.lambda2.to_string());
        put("train.seed", self.train.seed.to_string());
        put("train.aux_ratio", self.train.aux_ratio.to_string());
        map
    }

    /// SHA-256 digest of the canonical snapshot.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.snapshot() {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        crate::synthcover::hex_digest(&hasher.finalize())
    }
}
