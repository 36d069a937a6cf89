//! Per-locale text ingestion, normalization and balanced multi-locale sampling.
//!
//! Sampling follows the exponent-flattened multinomial: with raw shares
//! `p_i = n_i / Σ n_k`, locale `i` is drawn with probability
//! `q_i = p_i^α / Σ_j p_j^α`. `α = 1` is proportional, `α = 0` uniform.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Decode { offset: usize },
    #[error("{path}: invalid UTF-8 on line {line}")]
    DecodeLine { path: String, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid locale tag {0:?} (expected ll-CC or ll-all)")]
    InvalidLocale(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// A locale tag such as `hr-HR`, or the wildcard form `en-all`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LocaleId(String);

impl LocaleId {
    pub fn new(tag: &str) -> Result<Self> {
        let b = tag.as_bytes();
        let lang_ok = b.len() >= 3 && b[..2].iter().all(u8::is_ascii_lowercase) && b[2] == b'-';
        let region_ok = match b.get(3..) {
            Some(r) if r.len() == 2 => r.iter().all(u8::is_ascii_uppercase),
            Some(r) => r == b"all",
            None => false,
        };
        if lang_ok && region_ok {
            Ok(Self(tag.to_string()))
        } else {
            Err(CorpusError::InvalidLocale(tag.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LocaleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LocaleId {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

impl TryFrom<String> for LocaleId {
    type Error = CorpusError;
    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<LocaleId> for String {
    fn from(id: LocaleId) -> String {
        id.0
    }
}

/// Normalized sentences of one locale plus its word-type frequency table.
#[derive(Debug, Clone, PartialEq)]
pub struct LocaleCorpus {
    locale: LocaleId,
    sentences: Vec<String>,
    word_types: BTreeMap<String, u64>,
}

impl LocaleCorpus {
    /// Builds a corpus from raw lines; each is normalized and blank results dropped.
    pub fn from_lines<I, S>(locale: LocaleId, lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sentences = Vec::new();
        let mut word_types = BTreeMap::new();
        for line in lines {
            let s = normalize_text(line.as_ref());
            if s.is_empty() {
                continue;
            }
            for w in s.split(' ') {
                *word_types.entry(w.to_string()).or_insert(0) += 1;
            }
            sentences.push(s);
        }
        Self {
            locale,
            sentences,
            word_types,
        }
    }

    pub fn locale(&self) -> &LocaleId {
        &self.locale
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn word_types(&self) -> &BTreeMap<String, u64> {
        &self.word_types
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Splits off the last `n_tail` sentences as a held-out corpus.
    pub fn split_tail(&self, n_tail: usize) -> (LocaleCorpus, LocaleCorpus) {
        let cut = self.sentences.len().saturating_sub(n_tail);
        let head = LocaleCorpus::from_lines(self.locale.clone(), &self.sentences[..cut]);
        let tail = LocaleCorpus::from_lines(self.locale.clone(), &self.sentences[cut..]);
        (head, tail)
    }
}

/// NFC, simple lowercase, strip Unicode punctuation (category P), collapse whitespace.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.nfc() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if is_punctuation(c) {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(simple_lowercase(c));
    }
    // Lowercasing can leave a decomposable sequence; re-compose.
    if out.is_ascii() {
        out
    } else {
        out.nfc().collect()
    }
}

/// Decodes `raw` as UTF-8 and normalizes it.
pub fn normalize_bytes(raw: &[u8]) -> Result<String> {
    match std::str::from_utf8(raw) {
        Ok(s) => Ok(normalize_text(s)),
        Err(e) => Err(CorpusError::Decode {
            offset: e.valid_up_to(),
        }),
    }
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

// Simple (1:1) case mapping. U+0130 is the only character whose full
// lowercase mapping differs from its simple mapping.
fn simple_lowercase(c: char) -> char {
    if c == '\u{130}' {
        return 'i';
    }
    let mut it = c.to_lowercase();
    match (it.next(), it.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Reads a line-delimited UTF-8 file into a corpus, in file order.
pub fn ingest_corpus(path: &Path, locale: LocaleId) -> Result<LocaleCorpus> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| CorpusError::DecodeLine {
            path: path.display().to_string(),
            line: i + 1,
        })?;
        lines.push(line);
    }
    Ok(LocaleCorpus::from_lines(locale, lines))
}

/// JSON object mapping locale tag to corpus file path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorpusManifest(pub BTreeMap<LocaleId, std::path::PathBuf>);

impl CorpusManifest {
    /// Loads and validates a manifest. Relative paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut m: CorpusManifest = serde_json::from_str(&text)
            .map_err(|e| CorpusError::Manifest(format!("{}: {e}", path.display())))?;
        if m.0.is_empty() {
            return Err(CorpusError::Manifest("no locales listed".into()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut missing = Vec::new();
        for (loc, p) in m.0.iter_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                missing.push(format!("{loc}: {}", p.display()));
            }
        }
        if !missing.is_empty() {
            return Err(CorpusError::Manifest(format!(
                "missing corpus files: {}",
                missing.join(", ")
            )));
        }
        Ok(m)
    }

    /// Ingests every corpus listed, one thread per file.
    pub fn ingest_all(&self) -> Result<Vec<LocaleCorpus>> {
        std::thread::scope(|s| {
            let handles: Vec<_> = self
                .0
                .iter()
                .map(|(loc, p)| s.spawn(move || ingest_corpus(p, loc.clone())))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ingest thread panicked"))
                .collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub alpha: f64,
    pub total_draws: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            total_draws: 10_000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CorpusError::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.total_draws == 0 {
            return Err(CorpusError::Config("total_draws must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub locales: Vec<LocaleId>,
    pub counts: Vec<usize>,
    /// Raw shares `p_i`.
    pub raw_shares: Vec<f64>,
    /// Sampling probabilities `q_i`.
    pub probs: Vec<f64>,
    pub expected_draws: Vec<f64>,
}

pub fn balance_plan(corpora: &[LocaleCorpus], cfg: &SamplerConfig) -> Result<BalancePlan> {
    cfg.validate()?;
    let counts: Vec<usize> = corpora.iter().map(LocaleCorpus::n_sentences).collect();
    let plan = balance_counts(&counts, cfg.alpha, cfg.total_draws)?;
    Ok(BalancePlan {
        locales: corpora.iter().map(|c| c.locale().clone()).collect(),
        ..plan
    })
}

/// The balancing arithmetic on bare counts; `locales` is left empty.
pub fn balance_counts(counts: &[usize], alpha: f64, total_draws: usize) -> Result<BalancePlan> {
    if counts.is_empty() {
        return Err(CorpusError::Degenerate("no corpora".into()));
    }
    let total: f64 = counts.iter().map(|&n| n as f64).sum();
    if total == 0.0 {
        return Err(CorpusError::Degenerate("all corpora are empty".into()));
    }
    let raw_shares: Vec<f64> = counts.iter().map(|&n| n as f64 / total).collect();
    // 0^0 would give an empty locale weight 1 under alpha = 0.
    let weights: Vec<f64> = raw_shares
        .iter()
        .map(|&p| if p > 0.0 { p.powf(alpha) } else { 0.0 })
        .collect();
    let z: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
    let expected_draws = probs.iter().map(|q| q * total_draws as f64).collect();
    Ok(BalancePlan {
        locales: Vec::new(),
        counts: counts.to_vec(),
        raw_shares,
        probs,
        expected_draws,
    })
}

/// Draws `total_draws` sentences: locale by `q`, then a sentence uniformly
/// with replacement inside that locale.
pub fn draw_sample(
    corpora: &[LocaleCorpus],
    plan: &BalancePlan,
    cfg: &SamplerConfig,
) -> Result<Vec<(LocaleId, String)>> {
    cfg.validate()?;
    if plan.probs.len() != corpora.len() {
        return Err(CorpusError::Degenerate(format!(
            "plan covers {} locales, got {} corpora",
            plan.probs.len(),
            corpora.len()
        )));
    }
    for (c, &q) in corpora.iter().zip(&plan.probs) {
        if q > 0.0 && c.is_empty() {
            return Err(CorpusError::Degenerate(format!(
                "{} has sampling probability {q} but no sentences",
                c.locale()
            )));
        }
    }
    let mut cumulative = Vec::with_capacity(plan.probs.len());
    let mut acc = 0.0;
    for &q in &plan.probs {
        acc += q;
        cumulative.push(acc);
    }
    let last_nonzero = plan
        .probs
        .iter()
        .rposition(|&q| q > 0.0)
        .ok_or_else(|| CorpusError::Degenerate("plan has no probability mass".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.total_draws);
    for _ in 0..cfg.total_draws {
        let u: f64 = rng.random::<f64>() * acc;
        let idx = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(last_nonzero);
        let c = &corpora[idx];
        let j = rng.random_range(0..c.n_sentences());
        out.push((c.locale().clone(), c.sentences()[j].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loc(s: &str) -> LocaleId {
        LocaleId::new(s).unwrap()
    }

    #[test]
    fn locale_tags() {
        assert!(LocaleId::new("hr-HR").is_ok());
        assert!(LocaleId::new("en-all").is_ok());
        for bad in ["HR-hr", "hr_HR", "hr-HRR", "h-HR", "hr-", "en-ALL", ""] {
            assert!(LocaleId::new(bad).is_err(), "{bad}");
        }
        assert!(loc("cs-CZ") < loc("hr-HR"));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("Samo mi reci."), "samo mi reci");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  A  B  "), "a b");
        assert_eq!(normalize_text("„Dobro”, rekao je — ¿qué?"), "dobro rekao je qué");
        // decomposed e + combining acute composes to U+00E9
        assert_eq!(normalize_text("Cafe\u{301}"), "caf\u{e9}");
        assert_eq!(normalize_text("\u{130}STANBUL"), "istanbul");
    }

    #[test]
    fn normalize_bytes_reports_offset() {
        let err = normalize_bytes(b"ab\xffcd").unwrap_err();
        assert!(matches!(err, CorpusError::Decode { offset: 2 }));
    }

    #[test]
    fn from_lines_drops_blanks_and_counts_types() {
        let c = LocaleCorpus::from_lines(loc("sl-SI"), ["a b", "", "a b", " . "]);
        assert_eq!(c.n_sentences(), 2);
        assert_eq!(c.word_types()["a"], 2);
        assert_eq!(c.word_types()["b"], 2);
    }

    #[test]
    fn balance_examples() {
        let p = balance_counts(&[100, 900], 0.5, 1000).unwrap();
        assert!((p.probs[0] - 0.25).abs() < 1e-9);
        assert!((p.probs[1] - 0.75).abs() < 1e-9);
        assert!((p.expected_draws[0] - 250.0).abs() < 1e-6);

        let p = balance_counts(&[3, 5, 12], 1.0, 10).unwrap();
        for (q, r) in p.probs.iter().zip(&p.raw_shares) {
            assert!((q - r).abs() < 1e-12);
        }

        let p = balance_counts(&[1, 999_999], 0.0, 10).unwrap();
        assert!((p.probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn balance_degenerate() {
        assert!(matches!(
            balance_counts(&[0, 0], 0.5, 10),
            Err(CorpusError::Degenerate(_))
        ));
        assert!(balance_counts(&[], 0.5, 10).is_err());
        let p = balance_counts(&[0, 10], 0.0, 10).unwrap();
        assert_eq!(p.probs, vec![0.0, 1.0]);
    }

    #[test]
    fn sampler_config_validation() {
        let mut cfg = SamplerConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.5;
        cfg.total_draws = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn draw_rejects_empty_locale_with_mass() {
        let a = LocaleCorpus::from_lines(loc("aa-AA"), ["x"]);
        let b = LocaleCorpus::from_lines(loc("bb-BB"), Vec::<String>::new());
        let cfg = SamplerConfig::default();
        let pair = [a, b];
        let mut plan = balance_plan(&pair, &cfg).unwrap();
        assert_eq!(plan.probs[1], 0.0);
        assert!(draw_sample(&pair, &plan, &cfg).is_ok());
        plan.probs = vec![0.5, 0.5];
        assert!(matches!(
            draw_sample(&pair, &plan, &cfg),
            Err(CorpusError::Degenerate(_))
        ));
    }

    #[test]
    fn single_locale_and_determinism() {
        let a = LocaleCorpus::from_lines(loc("aa-AA"), ["x y", "z"]);
        let cfg = SamplerConfig {
            alpha: 0.7,
            total_draws: 50,
            seed: 9,
        };
        let one = std::slice::from_ref(&a);
        let plan = balance_plan(one, &cfg).unwrap();
        let s1 = draw_sample(one, &plan, &cfg).unwrap();
        let s2 = draw_sample(one, &plan, &cfg).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|(l, _)| l == a.locale()));
    }

    proptest! {
        #[test]
        fn normalize_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
            prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
        }

        #[test]
        fn flattening_is_monotone(na in 1usize..1000, extra in 1usize..100_000) {
            let nb = na + extra;
            let mut prev = f64::INFINITY;
            for alpha in [0.0, 0.25, 0.5, 0.7, 1.0] {
                let p = balance_counts(&[na, nb], alpha, 1).unwrap();
                let ratio = p.probs[0] / p.probs[1];
                prop_assert!(ratio <= prev * (1.0 + 1e-12));
                prev = ratio;
            }
        }
    }
}
