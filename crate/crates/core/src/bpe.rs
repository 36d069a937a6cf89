//! Shared byte-pair-encoding vocabulary with `@@` continuation markers.
//!
//! Merges are learned inside whitespace-delimited words over a pooled
//! word-frequency table. Encoded output marks every non-final subword of a
//! word with a trailing `@@`, so `consternation` may become
//! `conster@@ nation`.
//!
//! The id table reserves `0..=3` for `<pad>`, `<s>`, `</s>`, `<unk>`; after
//! that each inventory token `t` owns two ids, `t` (word-final) then `t@@`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::LocaleCorpus;

pub const MARKER: &str = "@@";
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const N_RESERVED: usize = 4;
pub const FILE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BpeError {
    #[error("vocab_size {vocab_size} is smaller than the alphabet ({alphabet})")]
    VocabTooSmall { vocab_size: usize, alphabet: usize },
    #[error("malformed token sequence: {0}")]
    Malformed(String),
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error("empty corpus")]
    EmptyCorpus,
}

pub type Result<T> = std::result::Result<T, BpeError>;

const UNK_SYM: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct BpeVocab {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    /// Inventory in creation order: alphabet first, then merge results.
    tokens: Vec<String>,
    token_index: HashMap<String, u32>,
    char_index: HashMap<char, u32>,
    /// (left, right) token index -> (rank, merged token index)
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for BpeVocab {
    fn eq(&self, other: &Self) -> bool {
        self.alphabet == other.alphabet && self.merges == other.merges
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSentence {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Share of word types encodable without `<unk>`.
    pub type_coverage: f64,
    /// Share of running words encodable without `<unk>`.
    pub token_coverage: f64,
    pub mean_subwords_per_word: f64,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    version: u32,
    marker: String,
    alphabet: Vec<char>,
}

impl BpeVocab {
    /// Rebuilds the derived tables from an alphabet and ordered merges.
    pub fn from_merges(alphabet: Vec<char>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut alphabet = alphabet;
        alphabet.sort_unstable();
        alphabet.dedup();
        let mut tokens: Vec<String> = Vec::new();
        let mut token_index = HashMap::new();
        let mut char_index = HashMap::new();
        for &c in &alphabet {
            let s = c.to_string();
            char_index.insert(c, tokens.len() as u32);
            token_index.insert(s.clone(), tokens.len() as u32);
            tokens.push(s);
        }
        let mut merge_rank = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let (Some(&li), Some(&ri)) = (token_index.get(l), token_index.get(r)) else {
                return Err(BpeError::Format(format!(
                    "merge {rank} ({l} {r}) uses a token not yet defined"
                )));
            };
            let joined = format!("{l}{r}");
            let ji = match token_index.get(&joined) {
                Some(&i) => i,
                None => {
                    let i = tokens.len() as u32;
                    token_index.insert(joined.clone(), i);
                    tokens.push(joined);
                    i
                }
            };
            merge_rank.entry((li, ri)).or_insert((rank, ji));
        }
        Ok(Self {
            alphabet,
            merges,
            tokens,
            token_index,
            char_index,
            merge_rank,
        })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Subword inventory, without markers or reserved tokens.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn marker(&self) -> &'static str {
        MARKER
    }

    /// Size of the id table (reserved ids plus both forms of every token).
    pub fn id_count(&self) -> usize {
        N_RESERVED + 2 * self.tokens.len()
    }

    pub fn id_table(&self) -> Vec<String> {
        let mut t = vec![PAD.to_string(), BOS.into(), EOS.into(), UNK.into()];
        for tok in &self.tokens {
            t.push(tok.clone());
            t.push(format!("{tok}{MARKER}"));
        }
        t
    }

    pub fn id_table_json(&self) -> String {
        serde_json::to_string(&self.id_table()).expect("strings serialize")
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        match token {
            PAD => return Some(PAD_ID),
            BOS => return Some(BOS_ID),
            EOS => return Some(EOS_ID),
            UNK => return Some(UNK_ID),
            _ => {}
        }
        let (base, cont) = match token.strip_suffix(MARKER) {
            Some(b) => (b, 1),
            None => (token, 0),
        };
        if base == UNK {
            return Some(UNK_ID);
        }
        self.token_index
            .get(base)
            .map(|&i| N_RESERVED as u32 + 2 * i + cont)
    }

    pub fn id_to_token(&self, id: u32) -> Option<String> {
        let id = id as usize;
        match id {
            0 => Some(PAD.into()),
            1 => Some(BOS.into()),
            2 => Some(EOS.into()),
            3 => Some(UNK.into()),
            _ => {
                let k = id - N_RESERVED;
                let tok = self.tokens.get(k / 2)?;
                Some(if k % 2 == 1 {
                    format!("{tok}{MARKER}")
                } else {
                    tok.clone()
                })
            }
        }
    }

    /// Splits one word into subwords; all but the last carry `@@`.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let syms = self.segment(word);
        let n = syms.len();
        syms.into_iter()
            .enumerate()
            .map(|(i, s)| {
                let base = if s == UNK_SYM {
                    UNK
                } else {
                    self.tokens[s as usize].as_str()
                };
                if i + 1 < n {
                    format!("{base}{MARKER}")
                } else {
                    base.to_string()
                }
            })
            .collect()
    }

    fn segment(&self, word: &str) -> Vec<u32> {
        let mut syms: Vec<u32> = Vec::with_capacity(word.len());
        for c in word.chars() {
            let s = self.char_index.get(&c).copied().unwrap_or(UNK_SYM);
            // runs of unknown characters collapse into one <unk>
            if s == UNK_SYM && syms.last() == Some(&UNK_SYM) {
                continue;
            }
            syms.push(s);
        }
        loop {
            let mut best: Option<(usize, u32, u32, u32)> = None;
            for w in syms.windows(2) {
                if let Some(&(rank, merged)) = self.merge_rank.get(&(w[0], w[1])) {
                    if best.is_none_or(|b| rank < b.0) {
                        best = Some((rank, w[0], w[1], merged));
                    }
                }
            }
            let Some((_, l, r, merged)) = best else {
                break;
            };
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    fn word_has_unk(&self, word: &str) -> bool {
        word.chars().any(|c| !self.char_index.contains_key(&c))
    }

    pub fn encode_sentence(&self, sentence: &str) -> TokenizedSentence {
        let mut tokens = Vec::new();
        for w in sentence.split_whitespace() {
            tokens.extend(self.encode_word(w));
        }
        let ids = tokens
            .iter()
            .map(|t| self.token_to_id(t).unwrap_or(UNK_ID))
            .collect();
        TokenizedSentence { tokens, ids }
    }

    /// Token ids for a sentence, without the sentence markers.
    pub fn encode_ids(&self, sentence: &str) -> Vec<u32> {
        self.encode_sentence(sentence).ids
    }

    pub fn decode_sentence(&self, t: &TokenizedSentence) -> Result<String> {
        decode_tokens(&t.tokens)
    }

    /// Decodes ids, skipping `<pad>`, `<s>` and `</s>`.
    pub fn decode_ids(&self, ids: &[u32]) -> Result<String> {
        let mut toks = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == PAD_ID || id == BOS_ID || id == EOS_ID {
                continue;
            }
            toks.push(
                self.id_to_token(id)
                    .ok_or_else(|| BpeError::Malformed(format!("id {id} out of range")))?,
            );
        }
        decode_tokens(&toks)
    }

    pub fn coverage(&self, corpus: &LocaleCorpus) -> Result<Coverage> {
        if corpus.word_types().is_empty() {
            return Err(BpeError::EmptyCorpus);
        }
        let mut types_ok = 0usize;
        let mut running = 0u64;
        let mut running_ok = 0u64;
        let mut pieces = 0u64;
        for (w, &f) in corpus.word_types() {
            let ok = !self.word_has_unk(w);
            types_ok += ok as usize;
            running += f;
            if ok {
                running_ok += f;
            }
            pieces += f * self.segment(w).len() as u64;
        }
        Ok(Coverage {
            type_coverage: types_ok as f64 / corpus.word_types().len() as f64,
            token_coverage: running_ok as f64 / running as f64,
            mean_subwords_per_word: pieces as f64 / running as f64,
        })
    }

    /// JSON header line, then one `left right` merge per line.
    pub fn to_file_string(&self) -> String {
        let header = FileHeader {
            version: FILE_VERSION,
            marker: MARKER.into(),
            alphabet: self.alphabet.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: FileHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| BpeError::Format("missing header line".into()))?,
        )
        .map_err(|e| BpeError::Format(format!("header: {e}")))?;
        if header.version != FILE_VERSION {
            return Err(BpeError::Format(format!(
                "unsupported version {}",
                header.version
            )));
        }
        if header.marker != MARKER {
            return Err(BpeError::Format(format!(
                "unsupported marker {:?}",
                header.marker
            )));
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(BpeError::Format(format!(
                        "line {}: expected `left right`",
                        i + 2
                    )))
                }
            }
        }
        Self::from_merges(header.alphabet, merges)
    }
}

/// Joins subwords, removing `@@` and placing spaces at word ends.
pub fn decode_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<String> {
    let mut out = String::new();
    let mut open = false;
    for t in tokens {
        let t = t.as_ref();
        if !open && !out.is_empty() {
            out.push(' ');
        }
        match t.strip_suffix(MARKER) {
            Some(base) => {
                out.push_str(base);
                open = true;
            }
            None => {
                out.push_str(t);
                open = false;
            }
        }
    }
    if open {
        return Err(BpeError::Malformed(
            "sequence ends inside a word (dangling @@)".into(),
        ));
    }
    Ok(out)
}

/// Pools the word-frequency tables of all corpora and learns merges.
pub fn learn_bpe(corpora: &[LocaleCorpus], vocab_size: usize) -> Result<BpeVocab> {
    let mut pooled: BTreeMap<String, u64> = BTreeMap::new();
    for c in corpora {
        for (w, &f) in c.word_types() {
            *pooled.entry(w.clone()).or_insert(0) += f;
        }
    }
    learn_bpe_from_counts(&pooled, vocab_size)
}

/// Greedy merging of the most frequent adjacent pair until the inventory
/// reaches `vocab_size` or no pair occurs at least twice. Count ties go to
/// the lexicographically smallest `(left, right)`.
pub fn learn_bpe_from_counts(word_counts: &BTreeMap<String, u64>, vocab_size: usize) -> Result<BpeVocab> {
    let alphabet: Vec<char> = word_counts
        .keys()
        .flat_map(|w| w.chars())
        .collect::<BTreeSet<char>>()
        .into_iter()
        .collect();
    if vocab_size < alphabet.len() {
        return Err(BpeError::VocabTooSmall {
            vocab_size,
            alphabet: alphabet.len(),
        });
    }
    let mut syms: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mut sym_index: HashMap<String, u32> = syms
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    let mut n_tokens = syms.len();

    let mut words: Vec<(Vec<u32>, i64)> = word_counts
        .iter()
        .map(|(w, &f)| (w.chars().map(|c| sym_index[&c.to_string()]).collect(), f as i64))
        .collect();
    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (w, f)) in words.iter().enumerate() {
        for p in w.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_insert(0) += f;
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while n_tokens < vocab_size {
        let mut best: Option<((u32, u32), i64)> = None;
        for (&pair, &count) in &pair_counts {
            if count < 2 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc
                            && (syms[pair.0 as usize].as_str(), syms[pair.1 as usize].as_str())
                                < (syms[bp.0 as usize].as_str(), syms[bp.1 as usize].as_str()))
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some(((l, r), _)) = best else {
            break;
        };
        let joined = format!("{}{}", syms[l as usize], syms[r as usize]);
        let new_sym = match sym_index.get(&joined) {
            Some(&i) => i,
            None => {
                let i = syms.len() as u32;
                sym_index.insert(joined.clone(), i);
                syms.push(joined);
                n_tokens += 1;
                i
            }
        };
        merges.push((syms[l as usize].clone(), syms[r as usize].clone()));

        let mut affected: Vec<usize> = where_
            .remove(&(l, r))
            .unwrap_or_default()
            .into_iter()
            .collect();
        affected.sort_unstable();
        for wi in affected {
            let (w, f) = &mut words[wi];
            let f = *f;
            for p in w.windows(2) {
                let e = pair_counts.get_mut(&(p[0], p[1])).expect("pair counted");
                *e -= f;
            }
            let mut merged = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    merged.push(new_sym);
                    i += 2;
                } else {
                    merged.push(w[i]);
                    i += 1;
                }
            }
            *w = merged;
            for p in w.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_insert(0) += f;
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }
    BpeVocab::from_merges(alphabet, merges)
}
