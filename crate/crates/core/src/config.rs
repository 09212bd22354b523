//! Pipeline configuration file (TOML).
//!
//! Relative paths resolve against the directory holding the config file.
//! The fingerprint covers every section except `[paths]`, so moving files
//! around does not invalidate trained models.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::argmetrics::NeutralBand;
use crate::corpus::CorpusFilters;
use crate::embed::{load_word_vectors, Embedder, EmbedderKind};
use crate::error::{Error, Result};
use crate::glmm::FitConfig;
use crate::mil::TrainConfig;
use crate::synth::SynthSpec;
use crate::textfeats::RacConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Review corpus used for feature extraction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Corpus for classifier training; defaults to `corpus`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cognitive_lexicon: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotive_lexicon: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub word_vectors: Option<PathBuf>,
    /// Labeled sentences for `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labeled_sentences: Option<PathBuf>,
    /// Model artifact; defaults to `<output_dir>/model.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Feature table read by `regress`; defaults to `<output_dir>/features.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub kind: EmbedderKind,
    /// Hashing dimension; the average embedder takes its size from the table.
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            kind: EmbedderKind::Hashing,
            dim: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlmmConfig {
    /// Nested models to fit, by letter `a`–`d`.
    pub models: Vec<char>,
    /// Refit model `d` without PType within each PType level.
    pub ptype_subsets: bool,
    pub standardize_interaction: bool,
    /// Standardized RAC values for the marginal-effects table.
    pub moderator_grid: Vec<f64>,
    pub fit: FitConfig,
}

impl Default for GlmmConfig {
    fn default() -> Self {
        GlmmConfig {
            models: vec!['a', 'b', 'c', 'd'],
            ptype_subsets: true,
            standardize_interaction: true,
            moderator_grid: (0..=16).map(|i| -2.0 + 0.25 * f64::from(i)).collect(),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Reference date for review age; defaults to the latest post date.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_date: Option<NaiveDate>,
    pub paths: Paths,
    pub embed: EmbedConfig,
    pub mil: TrainConfig,
    pub rac: RacConfig,
    pub filters: CorpusFilters,
    pub glmm: GlmmConfig,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            snapshot_date: None,
            paths: Paths {
                output_dir: PathBuf::from("out"),
                ..Paths::default()
            },
            embed: EmbedConfig::default(),
            mil: TrainConfig::default(),
            rac: RacConfig::default(),
            filters: CorpusFilters {
                min_votes: Some(1),
                ..CorpusFilters::default()
            },
            glmm: GlmmConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed.kind == EmbedderKind::Hashing && self.embed.dim < 2 {
            return bad(format!("embed.dim must be >= 2, got {}", self.embed.dim));
        }
        if !(self.mil.lambda >= 0.0 && self.mil.lambda.is_finite()) {
            return bad(format!("mil.lambda must be >= 0, got {}", self.mil.lambda));
        }
        if self.mil.max_iters == 0 {
            return bad("mil.max_iters must be positive".into());
        }
        self.rac
            .band
            .validate()
            .or_else(|e| bad(format!("rac.band: {e}")))?;
        if self.glmm.models.is_empty() {
            return bad("glmm.models must name at least one model".into());
        }
        if let Some(m) = self.glmm.models.iter().find(|m| !('a'..='d').contains(m)) {
            return bad(format!("unknown glmm model `{m}` (expected a, b, c or d)"));
        }
        if !(self.glmm.fit.tol > 0.0) || self.glmm.fit.max_iter == 0 {
            return bad("glmm.fit.tol and glmm.fit.max_iter must be positive".into());
        }
        if self.glmm.moderator_grid.iter().any(|v| !v.is_finite()) {
            return bad("glmm.moderator_grid values must be finite".into());
        }
        self.synth.validate()
    }

    /// Overrides the classifier and generator seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.mil.seed = seed;
        self.synth.seed = seed;
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON of every
    /// section except `[paths]`.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// Header comment for output files.
    pub fn header(&self) -> String {
        format!("{} config={}", crate::GENERATOR, self.fingerprint())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn build_embedder(&self) -> Result<Embedder> {
        match self.embed.kind {
            EmbedderKind::Hashing => Embedder::hashing(self.embed.dim, self.embed.seed),
            EmbedderKind::Average => {
                let p = require(&self.paths.word_vectors, "paths.word_vectors")?;
                Ok(Embedder::Average(std::sync::Arc::new(load_word_vectors(&p)?)))
            }
        }
    }

    pub fn output_dir(&self) -> &Path {
        &self.paths.output_dir
    }

    pub fn model_path(&self) -> PathBuf {
        self.paths
            .model
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("model.json"))
    }

    pub fn features_path(&self) -> PathBuf {
        self.paths
            .features
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("features.csv"))
    }

    pub fn neutral_band(&self) -> NeutralBand {
        self.rac.band
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.corpus,
            &mut self.training_corpus,
            &mut self.cognitive_lexicon,
            &mut self.emotive_lexicon,
            &mut self.word_vectors,
            &mut self.labeled_sentences,
            &mut self.model,
            &mut self.features,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }
}

/// Path that must be configured and must exist.
pub fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = path
        .clone()
        .ok_or_else(|| Error::Config(format!("{key} is not set")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{key} = {} does not exist", p.display())));
    }
    Ok(p)
}
