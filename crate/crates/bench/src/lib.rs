//! Shared inputs for the benchmarks.

use locale_forge::corpus::{LocaleCorpus, LocaleId};

const SYLLABLES: [&str; 12] = ["ka", "to", "mi", "ne", "su", "ra", "lo", "pe", "vi", "da", "go", "bu"];

/// A deterministic corpus of `n` sentences over a small syllable inventory.
pub fn synthetic_corpus(tag: &str, n: usize) -> LocaleCorpus {
    let lines: Vec<String> = (0..n)
        .map(|i| {
            (0..4 + i % 5)
                .map(|j| {
                    let w = (i * 31 + j * 17) % 97;
                    let w = w * w % 97;
                    let a = SYLLABLES[w % SYLLABLES.len()];
                    let b = SYLLABLES[(w / SYLLABLES.len()) % SYLLABLES.len()];
                    format!("{a}{b}{}", if w % 3 == 0 { "n" } else { "" })
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    LocaleCorpus::from_lines(LocaleId::new(tag).expect("valid tag"), &lines)
}
