//! Pairwise lexical similarity between locales and grouping of locales by
//! agglomerative clustering of their similarity vectors.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{LocaleCorpus, LocaleId};

#[derive(Debug, thiserror::Error)]
pub enum LangsimError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("invalid clustering parameter: {0}")]
    Parameter(String),
}

pub type Result<T> = std::result::Result<T, LangsimError>;

pub const DEFAULT_TOP_K: usize = 5000;

/// The `top_k` most frequent word types; frequency ties go to the
/// lexicographically smaller word.
pub fn top_word_types(corpus: &LocaleCorpus, top_k: usize) -> HashSet<&str> {
    let mut types: Vec<(&str, u64)> = corpus
        .word_types()
        .iter()
        .map(|(w, &f)| (w.as_str(), f))
        .collect();
    types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    types.into_iter().take(top_k).map(|(w, _)| w).collect()
}

/// Jaccard index over the two locales' top-`top_k` word types.
pub fn lexical_similarity(a: &LocaleCorpus, b: &LocaleCorpus, top_k: usize) -> Result<f64> {
    if top_k == 0 {
        return Err(LangsimError::Parameter("top_k must be >= 1".into()));
    }
    for c in [a, b] {
        if c.word_types().is_empty() {
            return Err(LangsimError::Degenerate(format!(
                "{} has no word types",
                c.locale()
            )));
        }
    }
    let sa = top_word_types(a, top_k);
    let sb = top_word_types(b, top_k);
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Symmetric N×N similarity matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub locales: Vec<LocaleId>,
    /// Row-major scores.
    pub scores: Vec<f64>,
}

impl SimilarityMatrix {
    /// Validates shape, range, symmetry and the diagonal.
    pub fn new(locales: Vec<LocaleId>, scores: Vec<f64>) -> Result<Self> {
        let n = locales.len();
        if scores.len() != n * n {
            return Err(LangsimError::Validation(format!(
                "{} locales need {} scores, got {}",
                n,
                n * n,
                scores.len()
            )));
        }
        let uniq: BTreeSet<_> = locales.iter().collect();
        if uniq.len() != n {
            return Err(LangsimError::Validation("duplicate locale tags".into()));
        }
        let m = Self { locales, scores };
        for i in 0..n {
            if m.get(i, i) != 1.0 {
                return Err(LangsimError::Validation(format!(
                    "diagonal entry {i} is {}",
                    m.get(i, i)
                )));
            }
            for j in 0..n {
                let v = m.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(LangsimError::Validation(format!(
                        "score ({i},{j}) = {v} outside [0,1]"
                    )));
                }
                if (v - m.get(j, i)).abs() > 1e-12 {
                    return Err(LangsimError::Validation(format!(
                        "asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.locales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locales.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.scores[i * n..(i + 1) * n]
    }

    pub fn index_of(&self, loc: &LocaleId) -> Option<usize> {
        self.locales.iter().position(|l| l == loc)
    }

    /// Header row of locale tags, then one labelled row per locale.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("locale");
        for l in &self.locales {
            out.push(',');
            out.push_str(l.as_str());
        }
        out.push('\n');
        for (i, l) in self.locales.iter().enumerate() {
            out.push_str(l.as_str());
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// All pairwise similarities, computed one thread per row.
pub fn similarity_matrix(corpora: &[LocaleCorpus], top_k: usize) -> Result<SimilarityMatrix> {
    let n = corpora.len();
    if n < 2 {
        return Err(LangsimError::Validation(format!(
            "need at least 2 corpora, got {n}"
        )));
    }
    let locales: Vec<LocaleId> = corpora.iter().map(|c| c.locale().clone()).collect();
    let uniq: BTreeSet<_> = locales.iter().collect();
    if uniq.len() != n {
        return Err(LangsimError::Validation("duplicate locale tags".into()));
    }
    let rows: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|i| {
                s.spawn(move || {
                    ((i + 1)..n)
                        .map(|j| lexical_similarity(&corpora[i], &corpora[j], top_k))
                        .collect::<Result<Vec<f64>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("similarity thread panicked"))
            .collect()
    });
    let mut scores = vec![0.0; n * n];
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        scores[i * n + i] = 1.0;
        for (off, v) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            scores[i * n + j] = v;
            scores[j * n + i] = v;
        }
    }
    SimilarityMatrix::new(locales, scores)
}

/// Stopping rule for agglomeration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterParams {
    /// Merge until exactly `k` groups remain.
    K(usize),
    /// Merge while the closest pair is at cosine distance ≤ threshold.
    DistanceThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocaleGrouping {
    /// Each group sorted; groups ordered by smallest member tag.
    pub groups: Vec<Vec<LocaleId>>,
    pub method_params: ClusterParams,
}

impl LocaleGrouping {
    pub fn group_of(&self, loc: &LocaleId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(loc))
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Average-linkage agglomerative clustering over cosine distances between
/// similarity-matrix rows. Ties between equally close cluster pairs go to
/// the pair with the smallest (first, second) index, where clusters are
/// indexed by their smallest member.
pub fn cluster_locales(m: &SimilarityMatrix, params: ClusterParams) -> Result<LocaleGrouping> {
    let n = m.len();
    if n == 0 {
        return Err(LangsimError::Validation("empty similarity matrix".into()));
    }
    match params {
        ClusterParams::K(k) if k < 1 || k > n => {
            return Err(LangsimError::Parameter(format!(
                "k = {k} must lie in 1..={n}"
            )))
        }
        ClusterParams::DistanceThreshold(t) if !t.is_finite() => {
            return Err(LangsimError::Parameter(format!("threshold {t} not finite")))
        }
        _ => {}
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(m.row(i), m.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    // Clusters as sorted member-index lists, kept ordered by smallest member.
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let linkage = |a: &[usize], b: &[usize]| -> f64 {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += dist[i * n + j];
            }
        }
        s / (a.len() * b.len()) as f64
    };
    loop {
        if let ClusterParams::K(k) = params {
            if clusters.len() <= k {
                break;
            }
        }
        if clusters.len() == 1 {
            break;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let d = linkage(&clusters[a], &clusters[b]);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let (d, a, b) = best.expect("at least two clusters");
        if let ClusterParams::DistanceThreshold(t) = params {
            if d > t {
                break;
            }
        }
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
    }
    let mut groups: Vec<Vec<LocaleId>> = clusters
        .into_iter()
        .map(|c| {
            let mut g: Vec<LocaleId> = c.into_iter().map(|i| m.locales[i].clone()).collect();
            g.sort();
            g
        })
        .collect();
    groups.sort_by(|a, b| a[0].cmp(&b[0]));
    Ok(LocaleGrouping {
        groups,
        method_params: params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub members: Vec<LocaleId>,
    /// Mean similarity over distinct member pairs; `None` for singletons.
    pub intra_mean: Option<f64>,
    /// Mean similarity between members and non-members; `None` with one group.
    pub inter_mean: Option<f64>,
    pub silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub groups: Vec<GroupStats>,
    pub intra_mean: Option<f64>,
    pub inter_mean: Option<f64>,
    /// Mean per-locale silhouette on distance `1 - similarity`.
    pub silhouette: f64,
    /// Locales whose highest similarity to another group beats their own group's mean.
    pub flagged: Vec<LocaleId>,
}

impl GroupingReport {
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>8} {:>8} {:>10}  members",
            "group", "intra", "inter", "silhouette"
        );
        for (i, g) in self.groups.iter().enumerate() {
            let members: Vec<&str> = g.members.iter().map(LocaleId::as_str).collect();
            let _ = writeln!(
                out,
                "{:<6} {:>8} {:>8} {:>10.4}  {}",
                i + 1,
                fmt(g.intra_mean),
                fmt(g.inter_mean),
                g.silhouette,
                members.join(", ")
            );
        }
        let _ = writeln!(
            out,
            "{:<6} {:>8} {:>8} {:>10.4}",
            "all",
            fmt(self.intra_mean),
            fmt(self.inter_mean),
            self.silhouette
        );
        if !self.flagged.is_empty() {
            let f: Vec<&str> = self.flagged.iter().map(LocaleId::as_str).collect();
            let _ = writeln!(out, "flagged: {}", f.join(", "));
        }
        out
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn grouping_report(g: &LocaleGrouping, m: &SimilarityMatrix) -> Result<GroupingReport> {
    let n = m.len();
    let mut assign = vec![usize::MAX; n];
    for (gi, group) in g.groups.iter().enumerate() {
        if group.is_empty() {
            return Err(LangsimError::Validation(format!("group {gi} is empty")));
        }
        for loc in group {
            let i = m.index_of(loc).ok_or_else(|| {
                LangsimError::Validation(format!("{loc} is not in the similarity matrix"))
            })?;
            if assign[i] != usize::MAX {
                return Err(LangsimError::Validation(format!("{loc} appears twice")));
            }
            assign[i] = gi;
        }
    }
    if let Some(i) = assign.iter().position(|&a| a == usize::MAX) {
        return Err(LangsimError::Validation(format!(
            "{} is not assigned to any group",
            m.locales[i]
        )));
    }
    let k = g.groups.len();
    let mut all_intra = Vec::new();
    let mut all_inter = Vec::new();
    let mut group_intra = vec![Vec::new(); k];
    let mut group_inter = vec![Vec::new(); k];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = m.get(i, j);
            if assign[i] == assign[j] {
                group_intra[assign[i]].push(s);
                all_intra.push(s);
            } else {
                group_inter[assign[i]].push(s);
                group_inter[assign[j]].push(s);
                all_inter.push(s);
            }
        }
    }
    // Silhouette on d = 1 - s; singletons score 0.
    let mut sil = vec![0.0; n];
    for i in 0..n {
        let own = assign[i];
        let own_size = g.groups[own].len();
        if own_size == 1 || k == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[assign[j]] += 1.0 - m.get(i, j);
            }
        }
        let a = sums[own] / (own_size - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / g.groups[c].len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        sil[i] = if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    let intra_means: Vec<Option<f64>> = group_intra.iter().map(|v| mean(v)).collect();
    let mut flagged = Vec::new();
    for i in 0..n {
        let Some(own_mean) = intra_means[assign[i]] else {
            continue;
        };
        let max_cross = (0..n)
            .filter(|&j| assign[j] != assign[i])
            .map(|j| m.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        if max_cross > own_mean {
            flagged.push(m.locales[i].clone());
        }
    }
    flagged.sort();
    let groups = g
        .groups
        .iter()
        .enumerate()
        .map(|(gi, members)| {
            let idx: Vec<usize> = (0..n).filter(|&i| assign[i] == gi).collect();
            GroupStats {
                members: members.clone(),
                intra_mean: intra_means[gi],
                inter_mean: mean(&group_inter[gi]),
                silhouette: idx.iter().map(|&i| sil[i]).sum::<f64>() / idx.len() as f64,
            }
        })
        .collect();
    Ok(GroupingReport {
        groups,
        intra_mean: mean(&all_intra),
        inter_mean: mean(&all_inter),
        silhouette: sil.iter().sum::<f64>() / n as f64,
        flagged,
    })
}
