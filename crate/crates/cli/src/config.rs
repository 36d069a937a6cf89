//! Pipeline configuration: one JSON file, validated all at once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use locale_forge::corpus::LocaleId;
use locale_forge::langsim::{ClusterParams, DEFAULT_TOP_K};
use locale_forge::lm::{ModelConfig, TrainHyper};
use locale_forge::rescore::WeightGrid;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fixture::FixtureSpec;
use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub alpha: f64,
    pub total_draws: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            total_draws: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilaritySection {
    pub top_k: usize,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        Self { top_k: DEFAULT_TOP_K }
    }
}

/// Exactly one of `k` and `threshold`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl ClusteringSection {
    pub fn params(&self) -> Option<ClusterParams> {
        match (self.k, self.threshold) {
            (Some(k), None) => Some(ClusterParams::K(k)),
            (None, Some(t)) => Some(ClusterParams::DistanceThreshold(t)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpeSection {
    pub vocab_size: usize,
}

/// Model shape; the vocabulary size comes from the learned BPE table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    #[serde(default)]
    pub dropout_p: f64,
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            dropout_p: self.dropout_p,
            ..ModelConfig::new(self.n_layers, self.d_model, self.n_heads, self.d_ff, vocab_size, self.context_len)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBestFiles {
    pub nbest: PathBuf,
    pub refs: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescoreSection {
    /// Per-locale n-best inputs; fixture runs fill this in automatically.
    pub nbest: BTreeMap<LocaleId, NBestFiles>,
    pub grid: WeightGrid,
    /// Leading share of utterances used to tune weights; the rest is test.
    pub dev_fraction: f64,
    pub batch_size: usize,
}

impl Default for RescoreSection {
    fn default() -> Self {
        Self {
            nbest: BTreeMap::new(),
            grid: WeightGrid::default(),
            dev_fraction: 0.5,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HostingSection {
    pub clusters: u64,
}

impl Default for HostingSection {
    fn default() -> Self {
        Self { clusters: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<FixtureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub similarity: SimilaritySection,
    #[serde(default)]
    pub clustering: ClusteringSection,
    pub bpe: BpeSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default)]
    pub finetune: TrainHyper,
    /// Sentences held out from the tail of every corpus for validation.
    pub valid_sentences: usize,
    /// Locales that get monolingual baselines, fine-tuning and rescoring.
    #[serde(default)]
    pub targets: Vec<LocaleId>,
    #[serde(default)]
    pub rescore: RescoreSection,
    #[serde(default)]
    pub hosting: HostingSection,
}

/// Command-line values that replace config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    pub vocab_size: Option<usize>,
    pub targets: Option<Vec<LocaleId>>,
}

impl PipelineConfig {
    /// Parses `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::config(vec![format!("{}: {e}", path.display())]))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = &mut self.manifest {
            fix(m);
        }
        if let Some(o) = &mut self.out_dir {
            fix(o);
        }
        for f in self.rescore.nbest.values_mut() {
            fix(&mut f.nbest);
            fix(&mut f.refs);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = Some(d.clone());
        }
        if o.k.is_some() || o.threshold.is_some() {
            self.clustering = ClusteringSection {
                k: o.k,
                threshold: o.threshold,
            };
        }
        if let Some(v) = o.vocab_size {
            self.bpe.vocab_size = v;
        }
        if let Some(t) = &o.targets {
            self.targets = t.clone();
        }
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seed.is_none() {
            errs.push("seed: missing (no implicit randomness)".to_string());
        }
        match (&self.manifest, &self.fixture) {
            (None, None) => errs.push("manifest: missing (or provide a fixture section)".to_string()),
            (Some(_), Some(_)) => errs.push("manifest and fixture are mutually exclusive".to_string()),
            (Some(m), None) if !m.is_file() => errs.push(format!("manifest: file not found: {}", m.display())),
            _ => {}
        }
        if let Some(f) = &self.fixture {
            if let Err(CliError::Config(e)) = f.validate() {
                errs.extend(e.into_iter().map(|m| format!("fixture: {m}")));
            }
        }
        if self.out_dir.is_none() {
            errs.push("out_dir: missing".to_string());
        }
        if !(0.0..=1.0).contains(&self.sampler.alpha) {
            errs.push(format!("sampler.alpha: {} outside [0, 1]", self.sampler.alpha));
        }
        if self.sampler.total_draws == 0 {
            errs.push("sampler.total_draws: must be positive".to_string());
        }
        if self.similarity.top_k == 0 {
            errs.push("similarity.top_k: must be positive".to_string());
        }
        match self.clustering.params() {
            None => errs.push("clustering: set exactly one of k and threshold".to_string()),
            Some(ClusterParams::K(0)) => errs.push("clustering.k: must be positive".to_string()),
            Some(ClusterParams::DistanceThreshold(t)) if !(0.0..=1.0).contains(&t) => {
                errs.push(format!("clustering.threshold: {t} outside [0, 1]"))
            }
            _ => {}
        }
        if self.bpe.vocab_size < 8 {
            errs.push("bpe.vocab_size: must be at least 8".to_string());
        }
        if let Err(e) = self.model.with_vocab(self.bpe.vocab_size.max(8)).validate() {
            errs.push(format!("model: {e}"));
        }
        for (name, h) in [("train", &self.train), ("finetune", &self.finetune)] {
            if let Err(e) = h.validate() {
                errs.push(format!("{name}: {e}"));
            }
        }
        if self.valid_sentences == 0 {
            errs.push("valid_sentences: must be positive".to_string());
        }
        if let Some(f) = &self.fixture {
            let known = f.families_of();
            for t in &self.targets {
                if !known.contains_key(t) {
                    errs.push(format!("targets: {t} is not a fixture locale"));
                }
            }
        }
        for (loc, f) in &self.rescore.nbest {
            for p in [&f.nbest, &f.refs] {
                if !p.is_file() {
                    errs.push(format!("rescore.nbest.{loc}: file not found: {}", p.display()));
                }
            }
        }
        if !(self.rescore.dev_fraction > 0.0 && self.rescore.dev_fraction < 1.0) {
            errs.push("rescore.dev_fraction: must lie strictly between 0 and 1".to_string());
        }
        if self.rescore.batch_size == 0 {
            errs.push("rescore.batch_size: must be positive".to_string());
        }
        if self.hosting.clusters == 0 {
            errs.push("hosting.clusters: must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(errs))
        }
    }

    /// SHA-256 of the canonical JSON with the output directory removed, so
    /// the same experiment hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let v = serde_json::to_value(&c).expect("config serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
