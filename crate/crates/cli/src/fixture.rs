//! Seeded synthetic language families.
//!
//! Each family draws a proto-lexicon of CV-syllable stems from its own
//! alphabet, plus noun and verb suffix sets that agree in number. Every
//! locale mutates a fraction of the stems and suffixes, samples words by a
//! Zipf law and occasionally borrows a stem from another family. Sister
//! locales therefore share most word forms while families share almost none.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use locale_forge::corpus::LocaleId;
use locale_forge::rescore::{nbest_to_tsv, references_to_tsv, Hypothesis, NBestList};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seeds::derive_seed;
use crate::{CliError, Result};

pub const MAX_STARVED_SENTENCES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocaleSize {
    pub tag: LocaleId,
    pub sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLanguageSpec {
    pub family: String,
    pub consonants: String,
    pub vowels: String,
    /// Size of the proto-lexicon.
    pub n_stems: usize,
    /// Number agreement classes; one noun and one verb suffix each.
    pub n_suffixes: usize,
    pub locales: Vec<LocaleSize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBestSpec {
    pub utterances: usize,
    pub hypotheses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub families: Vec<SyntheticLanguageSpec>,
    /// Probability that a locale alters a given stem or suffix.
    pub mutation_rate: f64,
    /// Probability that a content word is borrowed from another family.
    pub loanword_rate: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub zipf_exponent: f64,
    pub starved: Option<LocaleId>,
    /// N-best lists are generated for these locales.
    pub nbest_locales: Vec<LocaleId>,
    pub nbest: NBestSpec,
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.families.is_empty() {
            errs.push("fixture.families is empty".to_string());
        }
        let mut seen = BTreeSet::new();
        for f in &self.families {
            if f.consonants.is_empty() || f.vowels.is_empty() {
                errs.push(format!("family {}: empty alphabet", f.family));
            }
            if f.n_stems < 10 {
                errs.push(format!("family {}: n_stems must be at least 10", f.family));
            }
            let syllables = f.consonants.chars().count() * f.vowels.chars().count();
            if f.n_suffixes == 0 || f.n_suffixes > syllables {
                errs.push(format!("family {}: n_suffixes must lie in 1..={syllables}", f.family));
            }
            if f.locales.is_empty() {
                errs.push(format!("family {}: no locales", f.family));
            }
            for l in &f.locales {
                if !seen.insert(l.tag.clone()) {
                    errs.push(format!("locale {} listed twice", l.tag));
                }
                if l.sentences == 0 {
                    errs.push(format!("locale {}: zero sentences", l.tag));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) || !(0.0..=1.0).contains(&self.loanword_rate) {
            errs.push("fixture rates must lie in [0, 1]".to_string());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            errs.push("fixture word counts need 1 <= min_words <= max_words".to_string());
        }
        if let Some(s) = &self.starved {
            match self.families.iter().flat_map(|f| &f.locales).find(|l| &l.tag == s) {
                None => errs.push(format!("starved locale {s} is not in any family")),
                Some(l) if l.sentences > MAX_STARVED_SENTENCES => errs.push(format!(
                    "starved locale {s} has {} sentences, limit {MAX_STARVED_SENTENCES}",
                    l.sentences
                )),
                _ => {}
            }
        }
        for l in &self.nbest_locales {
            if !seen.contains(l) {
                errs.push(format!("n-best locale {l} is not in any family"));
            }
        }
        if self.nbest.hypotheses < 2 {
            errs.push("fixture.nbest.hypotheses must be at least 2".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(errs))
        }
    }

    /// Ground-truth family of every locale.
    pub fn families_of(&self) -> BTreeMap<LocaleId, String> {
        self.families
            .iter()
            .flat_map(|f| f.locales.iter().map(move |l| (l.tag.clone(), f.family.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Function,
    Noun,
    Verb,
}

struct Family {
    consonants: Vec<char>,
    vowels: Vec<char>,
    stems: Vec<String>,
    classes: Vec<Class>,
    noun_suffixes: Vec<String>,
    verb_suffixes: Vec<String>,
}

fn syllable(rng: &mut ChaCha8Rng, c: &[char], v: &[char], coda: bool) -> String {
    let mut s = String::new();
    s.push(*c.choose(rng).unwrap());
    s.push(*v.choose(rng).unwrap());
    if coda {
        s.push(*c.choose(rng).unwrap());
    }
    s
}

impl Family {
    fn generate(spec: &SyntheticLanguageSpec, rng: &mut ChaCha8Rng) -> Self {
        let consonants: Vec<char> = spec.consonants.chars().collect();
        let vowels: Vec<char> = spec.vowels.chars().collect();
        let n_func = (spec.n_stems / 10).max(2);
        let n_noun = (spec.n_stems - n_func) * 5 / 9;
        let mut seen = BTreeSet::new();
        let mut stems = Vec::with_capacity(spec.n_stems);
        let mut classes = Vec::with_capacity(spec.n_stems);
        let mut attempts = 0;
        while stems.len() < spec.n_stems && attempts < spec.n_stems * 1000 {
            attempts += 1;
            let i = stems.len();
            let class = if i < n_func {
                Class::Function
            } else if i < n_func + n_noun {
                Class::Noun
            } else {
                Class::Verb
            };
            let n_syl = if class == Class::Function { 1 } else { rng.random_range(1..=3) };
            let mut s = String::new();
            for k in 0..n_syl {
                let coda = k + 1 == n_syl && rng.random_bool(0.3);
                s.push_str(&syllable(rng, &consonants, &vowels, coda));
            }
            if seen.insert(s.clone()) {
                stems.push(s);
                classes.push(class);
            }
        }
        let suffixes = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let mut out = Vec::new();
            while out.len() < spec.n_suffixes {
                let s = syllable(rng, &consonants, &vowels, false);
                if !out.contains(&s) {
                    out.push(s);
                }
            }
            out
        };
        let noun_suffixes = suffixes(rng);
        let verb_suffixes = suffixes(rng);
        Self {
            consonants,
            vowels,
            stems,
            classes,
            noun_suffixes,
            verb_suffixes,
        }
    }

    fn mutate(&self, s: &str, rng: &mut ChaCha8Rng) -> String {
        let chars: Vec<char> = s.chars().collect();
        let vowel_pos: Vec<usize> = (0..chars.len()).filter(|&i| self.vowels.contains(&chars[i])).collect();
        if rng.random_bool(0.5) && !vowel_pos.is_empty() && self.vowels.len() > 1 {
            let mut out = chars.clone();
            let p = *vowel_pos.choose(rng).unwrap();
            loop {
                let v = *self.vowels.choose(rng).unwrap();
                if v != out[p] {
                    out[p] = v;
                    break;
                }
            }
            out.into_iter().collect()
        } else {
            let mut out = s.to_string();
            out.push(*self.consonants.choose(rng).unwrap());
            out
        }
    }
}

/// One locale's realized lexicon and sampling tables.
struct LocaleGrammar {
    stems: Vec<String>,
    functions: Vec<usize>,
    nouns: Vec<usize>,
    verbs: Vec<usize>,
    noun_suffixes: Vec<String>,
    verb_suffixes: Vec<String>,
    cum_noun: Vec<f64>,
    cum_verb: Vec<f64>,
    cum_func: Vec<f64>,
}

fn zipf_cumulative(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(s)).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect()
}

fn pick(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    cum.partition_point(|&c| c < u).min(cum.len() - 1)
}

impl LocaleGrammar {
    fn new(family: &Family, spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> Self {
        let stems: Vec<String> = family
            .stems
            .iter()
            .map(|s| {
                if rng.random_bool(spec.mutation_rate) {
                    family.mutate(s, rng)
                } else {
                    s.clone()
                }
            })
            .collect();
        let mut_suffixes = |sfx: &[String], rng: &mut ChaCha8Rng| -> Vec<String> {
            sfx.iter()
                .map(|s| {
                    if rng.random_bool(spec.mutation_rate) {
                        family.mutate(s, rng)
                    } else {
                        s.clone()
                    }
                })
                .collect()
        };
        let noun_suffixes = mut_suffixes(&family.noun_suffixes, rng);
        let verb_suffixes = mut_suffixes(&family.verb_suffixes, rng);
        let of = |c: Class| -> Vec<usize> { (0..stems.len()).filter(|&i| family.classes[i] == c).collect() };
        let (functions, nouns, verbs) = (of(Class::Function), of(Class::Noun), of(Class::Verb));
        Self {
            cum_noun: zipf_cumulative(nouns.len(), spec.zipf_exponent),
            cum_verb: zipf_cumulative(verbs.len(), spec.zipf_exponent),
            cum_func: zipf_cumulative(functions.len(), spec.zipf_exponent),
            stems,
            functions,
            nouns,
            verbs,
            noun_suffixes,
            verb_suffixes,
        }
    }

    fn content(&self, verb: bool, agreement: usize, loans: &[&Family], spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> String {
        let stem = if !loans.is_empty() && rng.random_bool(spec.loanword_rate) {
            let f = loans.choose(rng).unwrap();
            f.stems[rng.random_range(0..f.stems.len())].clone()
        } else if verb {
            self.stems[self.verbs[pick(&self.cum_verb, rng)]].clone()
        } else {
            self.stems[self.nouns[pick(&self.cum_noun, rng)]].clone()
        };
        let sfx = if verb { &self.verb_suffixes } else { &self.noun_suffixes };
        format!("{stem}{}", sfx[agreement])
    }

    fn function_word(&self, rng: &mut ChaCha8Rng) -> String {
        self.stems[self.functions[pick(&self.cum_func, rng)]].clone()
    }

    /// Normalized word sequence: clauses of `[F] N V [N]` with number agreement.
    fn sentence_words(&self, loans: &[&Family], spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> Vec<String> {
        let target = rng.random_range(spec.min_words..=spec.max_words);
        let mut words = Vec::new();
        while words.len() < target {
            let agree = rng.random_range(0..self.noun_suffixes.len());
            if rng.random_bool(0.5) {
                words.push(self.function_word(rng));
            }
            words.push(self.content(false, agree, loans, spec, rng));
            words.push(self.content(true, agree, loans, spec, rng));
            if rng.random_bool(0.5) {
                let other = rng.random_range(0..self.noun_suffixes.len());
                words.push(self.content(false, other, loans, spec, rng));
            }
        }
        words.truncate(spec.max_words);
        words
    }
}

fn surface(words: &[String], rng: &mut ChaCha8Rng) -> String {
    // raw text carries capitals and punctuation for the normalizer to strip
    let mut s = words.join(" ");
    if let Some(first) = s.chars().next() {
        let upper: String = first.to_uppercase().collect();
        s.replace_range(..first.len_utf8(), &upper);
    }
    if words.len() > 4 && rng.random_bool(0.3) {
        let cut = s.match_indices(' ').nth(2).map(|(i, _)| i).unwrap();
        s.insert(cut, ',');
    }
    s.push(if rng.random_bool(0.8) { '.' } else { '?' });
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureOutput {
    pub manifest: PathBuf,
    pub corpora: BTreeMap<LocaleId, PathBuf>,
    /// `(n-best, references)` per locale.
    pub nbest: BTreeMap<LocaleId, (PathBuf, PathBuf)>,
    pub families: BTreeMap<LocaleId, String>,
}

/// Generated text for every locale: corpus lines and optional n-best lists.
#[derive(Debug)]
pub struct GeneratedFixture {
    pub corpora: BTreeMap<LocaleId, Vec<String>>,
    pub nbest: BTreeMap<LocaleId, Vec<NBestList>>,
}

fn corrupt(
    words: &[String],
    grammar: &LocaleGrammar,
    sisters: &[&LocaleGrammar],
    spec: &FixtureSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut w = words.to_vec();
    let edits = rng.random_range(1..=2);
    for _ in 0..edits {
        let i = rng.random_range(0..w.len());
        match rng.random_range(0..5) {
            // a sister locale's form of some word
            0 if !sisters.is_empty() => {
                let g = sisters.choose(rng).unwrap();
                let agree = rng.random_range(0..g.noun_suffixes.len());
                w[i] = g.content(rng.random_bool(0.5), agree, &[], spec, rng);
            }
            // agreement violation
            1 => {
                let agree = rng.random_range(0..grammar.noun_suffixes.len());
                w[i] = grammar.content(rng.random_bool(0.5), agree, &[], spec, rng);
            }
            2 if w.len() > 1 => {
                w.remove(i);
            }
            3 => w.insert(i, grammar.function_word(rng)),
            _ => {
                let agree = rng.random_range(0..grammar.noun_suffixes.len());
                w[i] = grammar.content(false, agree, &[], spec, rng);
            }
        }
    }
    w
}

pub fn generate(spec: &FixtureSpec, seed: u64) -> Result<GeneratedFixture> {
    spec.validate()?;
    let families: Vec<Family> = spec
        .families
        .iter()
        .map(|f| Family::generate(f, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("family/{}", f.family)))))
        .collect();
    for (f, spec_f) in families.iter().zip(&spec.families) {
        for class in [Class::Function, Class::Noun, Class::Verb] {
            if !f.classes.contains(&class) {
                return Err(CliError::config(vec![format!(
                    "family {}: alphabet too small for {} distinct stems",
                    spec_f.family, spec_f.n_stems
                )]));
            }
        }
    }
    let mut grammars: BTreeMap<LocaleId, (usize, LocaleGrammar)> = BTreeMap::new();
    for (fi, f) in spec.families.iter().enumerate() {
        for l in &f.locales {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("lexicon/{}", l.tag)));
            grammars.insert(l.tag.clone(), (fi, LocaleGrammar::new(&families[fi], spec, &mut rng)));
        }
    }
    let mut corpora = BTreeMap::new();
    let mut nbest = BTreeMap::new();
    for (fi, f) in spec.families.iter().enumerate() {
        let loans: Vec<&Family> = families.iter().enumerate().filter(|&(j, _)| j != fi).map(|(_, x)| x).collect();
        for l in &f.locales {
            let grammar = &grammars[&l.tag].1;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("text/{}", l.tag)));
            let lines: Vec<String> = (0..l.sentences)
                .map(|_| {
                    let w = grammar.sentence_words(&loans, spec, &mut rng);
                    surface(&w, &mut rng)
                })
                .collect();
            corpora.insert(l.tag.clone(), lines);

            if spec.nbest_locales.contains(&l.tag) {
                let sisters: Vec<&LocaleGrammar> = grammars
                    .iter()
                    .filter(|(t, (fj, _))| *fj == fi && *t != &l.tag)
                    .map(|(_, (_, g))| g)
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("nbest/{}", l.tag)));
                let lists = (0..spec.nbest.utterances)
                    .map(|u| {
                        let truth = grammar.sentence_words(&loans, spec, &mut rng);
                        let mut texts = vec![truth.join(" ")];
                        let mut guard = 0;
                        while texts.len() < spec.nbest.hypotheses && guard < 100 {
                            guard += 1;
                            let t = corrupt(&truth, grammar, &sisters, spec, &mut rng).join(" ");
                            if !texts.contains(&t) {
                                texts.push(t);
                            }
                        }
                        // acoustic and first-pass LM scores that barely separate the candidates
                        let mut hyps: Vec<Hypothesis> = texts
                            .iter()
                            .map(|t| {
                                let n = t.split(' ').count() as f64;
                                Hypothesis {
                                    text: t.clone(),
                                    am: round3(-3.0 * n - rng.random_range(0.0..4.0)),
                                    lm1: round3(-2.0 * n - rng.random_range(0.0..4.0)),
                                }
                            })
                            .collect();
                        hyps.sort_by(|a, b| (b.am + b.lm1).total_cmp(&(a.am + a.lm1)));
                        NBestList {
                            utt_id: format!("{}-{u:04}", l.tag),
                            reference: Some(texts[0].clone()),
                            hyps,
                        }
                    })
                    .collect();
                nbest.insert(l.tag.clone(), lists);
            }
        }
    }
    Ok(GeneratedFixture { corpora, nbest })
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes corpora, a manifest, and n-best/reference files under `dir`.
pub fn gen_fixture(spec: &FixtureSpec, seed: u64, dir: &Path) -> Result<FixtureOutput> {
    let g = generate(spec, seed)?;
    let mut corpora = BTreeMap::new();
    for (tag, lines) in &g.corpora {
        let p = dir.join("corpora").join(format!("{tag}.txt"));
        let mut text = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
        for l in lines {
            writeln!(text, "{l}").unwrap();
        }
        write(&p, &text)?;
        corpora.insert(tag.clone(), p);
    }
    let rel: BTreeMap<String, String> = g
        .corpora
        .keys()
        .map(|t| (t.to_string(), format!("corpora/{t}.txt")))
        .collect();
    let manifest = dir.join("manifest.json");
    write(&manifest, &(serde_json::to_string_pretty(&rel).unwrap() + "\n"))?;
    let mut nbest = BTreeMap::new();
    for (tag, lists) in &g.nbest {
        let np = dir.join("nbest").join(format!("{tag}.nbest.tsv"));
        let rp = dir.join("nbest").join(format!("{tag}.ref.tsv"));
        write(&np, &nbest_to_tsv(lists))?;
        write(&rp, &references_to_tsv(lists))?;
        nbest.insert(tag.clone(), (np, rp));
    }
    let out = FixtureOutput {
        manifest,
        corpora,
        nbest,
        families: spec.families_of(),
    };
    write(&dir.join("families.json"), &(serde_json::to_string_pretty(&out.families).unwrap() + "\n"))?;
    Ok(out)
}
