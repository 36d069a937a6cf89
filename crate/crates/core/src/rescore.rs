//! N-best re-ranking by log-linear score interpolation, word error rate
//! evaluation, weight tuning and the deployment memory model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::{BpeVocab, BOS_ID, EOS_ID};
use crate::corpus::{normalize_text, LocaleId};
use crate::lm::{sequence_logprobs, LmError, TransformerLm};

#[derive(Debug, thiserror::Error)]
pub enum RescoreError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("missing reference for utterance {0}")]
    MissingReference(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("deployment plan: {0}")]
    Plan(String),
    #[error("locale {0} is not served by any model")]
    Coverage(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RescoreError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub am: f64,
    pub lm1: f64,
}

impl Hypothesis {
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utt_id: String,
    pub reference: Option<String>,
    /// First-pass order.
    pub hyps: Vec<Hypothesis>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| RescoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_score(s: &str) -> Option<f64> {
    // accept the typographic minus sign as well
    let v: f64 = s.trim().replace('\u{2212}', "-").parse().ok()?;
    v.is_finite().then_some(v)
}

/// Parses `utt_id, hyp_index, am_score, lm1_score, text` rows; `source`
/// names the input in error messages.
pub fn parse_nbest_str(text: &str, source: &str) -> Result<Vec<NBestList>> {
    let err = |line: usize, msg: String| RescoreError::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut lists: Vec<NBestList> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, row) in text.lines().enumerate() {
        let line = i + 1;
        if row.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 5 {
            return Err(err(line, format!("expected 5 columns, found {}", cols.len())));
        }
        cols[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| err(line, format!("hyp_index {:?} is not an integer", cols[1])))?;
        let am = parse_score(cols[2]).ok_or_else(|| err(line, format!("am_score {:?} is not a number", cols[2])))?;
        let lm1 = parse_score(cols[3]).ok_or_else(|| err(line, format!("lm1_score {:?} is not a number", cols[3])))?;
        let hyp = Hypothesis {
            text: cols[4].to_string(),
            am,
            lm1,
        };
        let utt = cols[0].to_string();
        match index.get(&utt) {
            Some(&k) => lists[k].hyps.push(hyp),
            None => {
                index.insert(utt.clone(), lists.len());
                lists.push(NBestList {
                    utt_id: utt,
                    reference: None,
                    hyps: vec![hyp],
                });
            }
        }
    }
    if lists.is_empty() {
        return Err(RescoreError::Empty(format!("{source} has no hypotheses")));
    }
    Ok(lists)
}

pub fn parse_nbest(path: &Path) -> Result<Vec<NBestList>> {
    parse_nbest_str(&read(path)?, &path.display().to_string())
}

/// Reference rows: `utt_id, text`.
pub fn parse_references_str(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, row) in text.lines().enumerate() {
        if row.trim().is_empty() {
            continue;
        }
        let (id, t) = row.split_once('\t').ok_or_else(|| RescoreError::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: "expected 2 columns".into(),
        })?;
        out.insert(id.to_string(), t.to_string());
    }
    Ok(out)
}

pub fn parse_references(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_references_str(&read(path)?, &path.display().to_string())
}

pub fn attach_references(lists: &mut [NBestList], refs: &BTreeMap<String, String>) -> Result<()> {
    for l in lists {
        let r = refs
            .get(&l.utt_id)
            .ok_or_else(|| RescoreError::MissingReference(l.utt_id.clone()))?;
        l.reference = Some(r.clone());
    }
    Ok(())
}

pub fn nbest_to_tsv(lists: &[NBestList]) -> String {
    let mut s = String::new();
    for l in lists {
        for (i, h) in l.hyps.iter().enumerate() {
            writeln!(s, "{}\t{}\t{}\t{}\t{}", l.utt_id, i, h.am, h.lm1, h.text).unwrap();
        }
    }
    s
}

pub fn references_to_tsv(lists: &[NBestList]) -> String {
    let mut s = String::new();
    for l in lists {
        if let Some(r) = &l.reference {
            writeln!(s, "{}\t{}", l.utt_id, r).unwrap();
        }
    }
    s
}

/// Interpolation weights; the acoustic weight is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescoreWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
}

impl Default for RescoreWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0,
            beta: 0.0,
        }
    }
}

impl RescoreWeights {
    pub fn validate(&self) -> Result<()> {
        if ![self.lambda1, self.lambda2, self.beta].iter().all(|x| x.is_finite()) {
            return Err(RescoreError::Weights("weights must be finite".into()));
        }
        if self.lambda2 < 0.0 {
            return Err(RescoreError::Weights(format!("lambda2 {} < 0", self.lambda2)));
        }
        Ok(())
    }
}

/// `am + λ1·lm1 + λ2·nnlm + β·words`; higher is better.
pub fn hypothesis_score(h: &Hypothesis, w: &RescoreWeights, nnlm_logprob: f64) -> f64 {
    h.am + w.lambda1 * h.lm1 + w.lambda2 * nnlm_logprob + w.beta * h.word_count() as f64
}

/// Total log-probability of sentences under a second-pass model.
pub trait SentenceScorer {
    fn score_sentences(&self, texts: &[&str]) -> Result<Vec<f64>>;

    /// Whether the text contains characters the scorer cannot represent.
    fn has_oov(&self, _text: &str) -> bool {
        false
    }
}

/// A transformer LM with its vocabulary: sums BPE-token log-probabilities
/// including the end marker, conditioned on the begin marker.
pub struct NnlmScorer<'a> {
    pub model: &'a TransformerLm,
    pub vocab: &'a BpeVocab,
    pub batch_size: usize,
}

impl SentenceScorer for NnlmScorer<'_> {
    fn score_sentences(&self, texts: &[&str]) -> Result<Vec<f64>> {
        let seqs: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| {
                let mut ids = vec![BOS_ID];
                ids.extend(self.vocab.encode_ids(&normalize_text(t)));
                ids.push(EOS_ID);
                ids
            })
            .collect();
        Ok(sequence_logprobs(self.model, &seqs, self.batch_size)?)
    }

    fn has_oov(&self, text: &str) -> bool {
        let alphabet = self.vocab.alphabet();
        normalize_text(text)
            .chars()
            .any(|c| !c.is_whitespace() && alphabet.binary_search(&c).is_err())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    /// Position in the first-pass list.
    pub first_pass_rank: usize,
    pub text: String,
    pub am: f64,
    pub lm1: f64,
    pub nnlm: f64,
    pub words: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoredList {
    pub utt_id: String,
    /// Best first.
    pub ranked: Vec<ScoredHypothesis>,
    pub oov: bool,
}

impl RescoredList {
    pub fn best(&self) -> &ScoredHypothesis {
        &self.ranked[0]
    }
}

/// Ranks with precomputed second-pass log-probabilities (one per hypothesis).
pub fn rank_with_scores(list: &NBestList, nnlm: &[f64], w: &RescoreWeights) -> Result<RescoredList> {
    if list.hyps.is_empty() {
        return Err(RescoreError::Empty(format!("utterance {} has no hypotheses", list.utt_id)));
    }
    if nnlm.len() != list.hyps.len() {
        return Err(RescoreError::Empty(format!(
            "utterance {}: {} scores for {} hypotheses",
            list.utt_id,
            nnlm.len(),
            list.hyps.len()
        )));
    }
    let mut ranked: Vec<ScoredHypothesis> = list
        .hyps
        .iter()
        .zip(nnlm)
        .enumerate()
        .map(|(i, (h, &n))| ScoredHypothesis {
            first_pass_rank: i,
            text: h.text.clone(),
            am: h.am,
            lm1: h.lm1,
            nnlm: n,
            words: h.word_count(),
            score: hypothesis_score(h, w, n),
        })
        .collect();
    // stable: ties keep first-pass order
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(RescoredList {
        utt_id: list.utt_id.clone(),
        ranked,
        oov: false,
    })
}

pub fn rescore_nbest<S: SentenceScorer + ?Sized>(list: &NBestList, scorer: &S, w: &RescoreWeights) -> Result<RescoredList> {
    w.validate()?;
    if list.hyps.is_empty() {
        return Err(RescoreError::Empty(format!("utterance {} has no hypotheses", list.utt_id)));
    }
    let texts: Vec<&str> = list.hyps.iter().map(|h| h.text.as_str()).collect();
    let nnlm = scorer.score_sentences(&texts)?;
    let mut out = rank_with_scores(list, &nnlm, w)?;
    out.oov = texts.iter().any(|t| scorer.has_oov(t));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WerCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub ref_len: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_len as f64
    }

    fn add(&mut self, o: &WerCounts) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
        self.ref_len += o.ref_len;
    }
}

/// Word-level Levenshtein alignment with unit costs over normalized text.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerCounts> {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let r: Vec<&str> = r.split_whitespace().collect();
    let h: Vec<&str> = h.split_whitespace().collect();
    if r.is_empty() {
        return Err(RescoreError::Empty("reference has no words".into()));
    }
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let c = usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + c).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = WerCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            out.sub += usize::from(r[i - 1] != h[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.del += 1;
            i -= 1;
        } else {
            out.ins += 1;
            j -= 1;
        }
    }
    Ok(out)
}

/// Relative reduction `(base − new) / base`.
pub fn werr(wer_base: f64, wer_new: f64) -> Result<f64> {
    if !(wer_base > 0.0) {
        return Err(RescoreError::Undefined(format!("WERR with baseline WER {wer_base}")));
    }
    Ok((wer_base - wer_new) / wer_base)
}

fn reference(l: &NBestList) -> Result<&str> {
    l.reference
        .as_deref()
        .ok_or_else(|| RescoreError::MissingReference(l.utt_id.clone()))
}

/// Corpus-level counts of the 1-best chosen under `w`.
pub fn corpus_counts(lists: &[NBestList], nnlm: &[Vec<f64>], w: &RescoreWeights) -> Result<WerCounts> {
    let mut total = WerCounts::default();
    for (l, s) in lists.iter().zip(nnlm) {
        let ranked = rank_with_scores(l, s, w)?;
        total.add(&wer(reference(l)?, &ranked.best().text)?);
    }
    Ok(total)
}

/// Second-pass scores for every hypothesis of every list.
pub fn score_all<S: SentenceScorer + ?Sized>(lists: &[NBestList], scorer: &S) -> Result<Vec<Vec<f64>>> {
    lists
        .iter()
        .map(|l| {
            let texts: Vec<&str> = l.hyps.iter().map(|h| h.text.as_str()).collect();
            scorer.score_sentences(&texts)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for WeightGrid {
    fn default() -> Self {
        Self {
            lambda1: vec![0.5, 1.0],
            lambda2: vec![0.0, 0.25, 0.5, 1.0, 2.0],
            beta: vec![0.0, 0.5],
        }
    }
}

impl WeightGrid {
    /// Grid points in tie-break order: smaller λ2, then λ1, then β.
    pub fn points(&self) -> Vec<RescoreWeights> {
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let (l1, l2, b) = (sorted(&self.lambda1), sorted(&self.lambda2), sorted(&self.beta));
        let mut out = Vec::new();
        for &lambda2 in &l2 {
            for &lambda1 in &l1 {
                for &beta in &b {
                    out.push(RescoreWeights { lambda1, lambda2, beta });
                }
            }
        }
        out
    }
}

/// Exhaustive search for the weights minimizing corpus WER on `dev`.
pub fn tune_weights_with_scores(dev: &[NBestList], nnlm: &[Vec<f64>], grid: &WeightGrid) -> Result<RescoreWeights> {
    let points = grid.points();
    if points.is_empty() {
        return Err(RescoreError::Empty("weight grid".into()));
    }
    if dev.is_empty() {
        return Err(RescoreError::Empty("dev set".into()));
    }
    let mut best: Option<(usize, RescoreWeights)> = None;
    for w in points {
        w.validate()?;
        let errors = corpus_counts(dev, nnlm, &w)?.errors();
        if best.as_ref().is_none_or(|(e, _)| errors < *e) {
            best = Some((errors, w));
        }
    }
    Ok(best.expect("grid nonempty").1)
}

pub fn tune_weights<S: SentenceScorer + ?Sized>(dev: &[NBestList], scorer: &S, grid: &WeightGrid) -> Result<RescoreWeights> {
    let nnlm = score_all(dev, scorer)?;
    tune_weights_with_scores(dev, &nnlm, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocaleEval {
    pub locale: LocaleId,
    pub n_utterances: usize,
    pub wer_base: f64,
    pub wer_new: f64,
    /// Fraction; `None` when the baseline WER is zero.
    pub werr: Option<f64>,
    pub base: WerCounts,
    pub rescored: WerCounts,
    pub oov_utterances: usize,
}

/// Baseline is the first-pass 1-best (list head); rescored uses `w`.
pub fn evaluate_locale(locale: &LocaleId, lists: &[NBestList], nnlm: &[Vec<f64>], w: &RescoreWeights, oov: &[bool]) -> Result<LocaleEval> {
    if lists.is_empty() {
        return Err(RescoreError::Empty(format!("no utterances for {locale}")));
    }
    let mut base = WerCounts::default();
    for l in lists {
        let first = l
            .hyps
            .first()
            .ok_or_else(|| RescoreError::Empty(format!("utterance {} has no hypotheses", l.utt_id)))?;
        base.add(&wer(reference(l)?, &first.text)?);
    }
    let rescored = corpus_counts(lists, nnlm, w)?;
    Ok(LocaleEval {
        locale: locale.clone(),
        n_utterances: lists.len(),
        wer_base: base.rate(),
        wer_new: rescored.rate(),
        werr: werr(base.rate(), rescored.rate()).ok(),
        base,
        rescored,
        oov_utterances: oov.iter().filter(|&&o| o).count(),
    })
}

/// Systems × locales table of WERR percentages with a trailing average column.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WerrTable {
    pub systems: Vec<String>,
    pub locales: Vec<LocaleId>,
    /// `cells[s][l]`, WERR in percent.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl WerrTable {
    pub fn new(locales: Vec<LocaleId>) -> Self {
        Self {
            locales,
            ..Default::default()
        }
    }

    pub fn add_system(&mut self, name: &str, evals: &[LocaleEval]) {
        let row = self
            .locales
            .iter()
            .map(|loc| {
                evals
                    .iter()
                    .find(|e| &e.locale == loc)
                    .and_then(|e| e.werr)
                    .map(|x| 100.0 * x)
            })
            .collect();
        self.systems.push(name.to_string());
        self.cells.push(row);
    }

    pub fn average(&self, system: usize) -> Option<f64> {
        let vals: Vec<f64> = self.cells[system].iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        let w0 = self.systems.iter().map(String::len).max().unwrap_or(6).max(6);
        let mut s = format!("{:<w0$}", "System");
        for l in &self.locales {
            write!(s, "  {:>8}", l.as_str()).unwrap();
        }
        s.push_str(&format!("  {:>8}\n", "Avg"));
        for (i, name) in self.systems.iter().enumerate() {
            write!(s, "{name:<w0$}").unwrap();
            for v in &self.cells[i] {
                write!(s, "  {:>8}", cell(*v)).unwrap();
            }
            writeln!(s, "  {:>8}", cell(self.average(i))).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Monolingual,
    Group,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployedModel {
    pub name: String,
    pub footprint_bytes: u64,
    pub serves: Vec<LocaleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub strategy: Strategy,
    pub models: Vec<DeployedModel>,
    pub traffic: BTreeMap<LocaleId, f64>,
    pub clusters: u64,
}

impl DeploymentPlan {
    fn uniform_traffic(locales: &[LocaleId]) -> BTreeMap<LocaleId, f64> {
        let w = 1.0 / locales.len() as f64;
        locales.iter().map(|l| (l.clone(), w)).collect()
    }

    pub fn monolingual(locales: &[LocaleId], footprint: u64, clusters: u64) -> Self {
        Self {
            strategy: Strategy::Monolingual,
            models: locales
                .iter()
                .map(|l| DeployedModel {
                    name: format!("mono-{l}"),
                    footprint_bytes: footprint,
                    serves: vec![l.clone()],
                })
                .collect(),
            traffic: Self::uniform_traffic(locales),
            clusters,
        }
    }

    pub fn group(groups: &[Vec<LocaleId>], footprint: u64, clusters: u64) -> Self {
        let all: Vec<LocaleId> = groups.iter().flatten().cloned().collect();
        Self {
            strategy: Strategy::Group,
            models: groups
                .iter()
                .enumerate()
                .map(|(i, g)| DeployedModel {
                    name: format!("group-{i}"),
                    footprint_bytes: footprint,
                    serves: g.clone(),
                })
                .collect(),
            traffic: Self::uniform_traffic(&all),
            clusters,
        }
    }

    pub fn all(locales: &[LocaleId], footprint: u64, clusters: u64) -> Self {
        Self {
            strategy: Strategy::All,
            models: vec![DeployedModel {
                name: "all".into(),
                footprint_bytes: footprint,
                serves: locales.to_vec(),
            }],
            traffic: Self::uniform_traffic(locales),
            clusters,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(RescoreError::Plan("cluster count must be positive".into()));
        }
        if let Some(m) = self.models.iter().find(|m| m.footprint_bytes == 0) {
            return Err(RescoreError::Plan(format!("model {} has zero footprint", m.name)));
        }
        let total: f64 = self.traffic.values().sum();
        if (total - 1.0).abs() > 1e-9 || self.traffic.values().any(|&w| w < 0.0) {
            return Err(RescoreError::Plan(format!("traffic weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostingEntry {
    pub strategy: Strategy,
    pub n_models: usize,
    pub clusters: u64,
    /// `clusters · Σ footprints`.
    pub total_bytes: u128,
    /// Footprint of the serving model, weighted by traffic share.
    pub traffic_weighted_model_bytes: f64,
    pub served_by: BTreeMap<LocaleId, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostingReport {
    /// Ascending by total memory.
    pub entries: Vec<HostingEntry>,
}

impl HostingReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:>7} {:>9} {:>20}\n", "strategy", "models", "clusters", "resident_bytes");
        for e in &self.entries {
            writeln!(
                s,
                "{:<12} {:>7} {:>9} {:>20}",
                format!("{:?}", e.strategy).to_lowercase(),
                e.n_models,
                e.clusters,
                e.total_bytes
            )
            .unwrap();
        }
        s
    }
}

pub fn hosting_cost(plans: &[DeploymentPlan]) -> Result<HostingReport> {
    if plans.is_empty() {
        return Err(RescoreError::Empty("no deployment plans".into()));
    }
    let locales: BTreeSet<&LocaleId> = plans[0].traffic.keys().collect();
    let mut entries = Vec::with_capacity(plans.len());
    for p in plans {
        p.validate()?;
        if p.traffic.keys().collect::<BTreeSet<_>>() != locales {
            return Err(RescoreError::Plan(format!(
                "{:?} plan covers a different locale set",
                p.strategy
            )));
        }
        let mut served_by = BTreeMap::new();
        for m in &p.models {
            for l in &m.serves {
                served_by.entry(l.clone()).or_insert_with(|| m.name.clone());
            }
        }
        if let Some(l) = locales.iter().find(|l| !served_by.contains_key(**l)) {
            return Err(RescoreError::Coverage(l.to_string()));
        }
        let footprint: u128 = p.models.iter().map(|m| m.footprint_bytes as u128).sum();
        let by_name: BTreeMap<&str, u64> = p.models.iter().map(|m| (m.name.as_str(), m.footprint_bytes)).collect();
        let weighted = p
            .traffic
            .iter()
            .map(|(l, w)| w * by_name[served_by[l].as_str()] as f64)
            .sum();
        entries.push(HostingEntry {
            strategy: p.strategy,
            n_models: p.models.len(),
            clusters: p.clusters,
            total_bytes: footprint * p.clusters as u128,
            traffic_weighted_model_bytes: weighted,
            served_by,
        });
    }
    entries.sort_by(|a, b| a.total_bytes.cmp(&b.total_bytes).then(a.strategy.cmp(&b.strategy)));
    Ok(HostingReport { entries })
}
