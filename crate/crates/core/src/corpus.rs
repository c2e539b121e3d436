//! Byte-level tokenizer and windowed text corpus.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;

use crate::error::{Error, Result};

/// Byte that separates documents in the token stream.
pub const SEPARATOR_BYTE: u8 = 0x1E;
/// Reserved id the separator byte maps to.
pub const SEPARATOR_ID: usize = 256;
pub const VOCAB_SIZE: usize = 257;

pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter()
        .map(|&b| if b == SEPARATOR_BYTE { SEPARATOR_ID } else { b as usize })
        .collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| match id {
            SEPARATOR_ID => Ok(SEPARATOR_BYTE),
            0..=255 => Ok(id as u8),
            _ => Err(Error::Index {
                what: "token id",
                index: id,
                limit: VOCAB_SIZE,
            }),
        })
        .collect()
}

/// Documents joined by the separator and cut into non-overlapping windows,
/// split into train and eval sets by a seeded shuffle of window indices.
#[derive(Clone, Debug)]
pub struct Corpus {
    tokens: Vec<usize>,
    window: usize,
    train: Vec<usize>,
    eval: Vec<usize>,
    seed: u64,
}

impl Corpus {
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D], window: usize, eval_fraction: f64, seed: u64) -> Result<Self> {
        if window < 2 {
            return Err(Error::config("corpus windows need at least two tokens"));
        }
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::config("eval fraction must lie in [0, 1)"));
        }
        let mut tokens = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            if i > 0 {
                tokens.push(SEPARATOR_ID);
            }
            tokens.extend(tokenize(d.as_ref()));
        }
        let n_windows = tokens.len() / window;
        if n_windows == 0 {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than one window of {window}",
                tokens.len()
            )));
        }
        let mut order: Vec<usize> = (0..n_windows).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_eval = if eval_fraction > 0.0 {
            ((n_windows as f64 * eval_fraction).ceil() as usize).clamp(1, n_windows - 1)
        } else {
            0
        };
        if n_windows - n_eval == 0 {
            return Err(Error::Data("corpus too small to hold a training split".into()));
        }
        let eval = order[..n_eval].to_vec();
        let train = order[n_eval..].to_vec();
        Ok(Corpus {
            tokens,
            window,
            train,
            eval,
            seed,
        })
    }

    pub fn from_files<P: AsRef<Path>>(paths: &[P], window: usize, eval_fraction: f64, seed: u64) -> Result<Self> {
        let docs = paths
            .iter()
            .map(|p| {
                std::fs::read(p.as_ref())
                    .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", p.as_ref().display())))
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::from_documents(&docs, window, eval_fraction, seed)
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn window(&self, idx: usize) -> &[usize] {
        &self.tokens[idx * self.window..(idx + 1) * self.window]
    }

    pub fn train_windows(&self) -> &[usize] {
        &self.train
    }

    pub fn eval_windows(&self) -> &[usize] {
        &self.eval
    }

    /// Windows for optimizer step `step`: consecutive slices of per-epoch
    /// seeded permutations of the train split. Pure in `(seed, step)`.
    pub fn train_batch(&self, step: u64, batch: usize) -> Vec<&[usize]> {
        let n = self.train.len();
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (0..batch)
            .map(|b| {
                let global = step as usize * batch + b;
                let (epoch, at) = (global / n, global % n);
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm = self.train.clone();
                    let mix = self.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
                    cached = Some((epoch, perm));
                }
                self.window(cached.as_ref().expect("set above").1[at])
            })
            .collect()
    }
}

/// Seed of the shared pseudo-word lexicon, fixed so that corpora drawn
/// with different seeds speak the same language.
const LEXICON_SEED: u64 = 0x6C65_7869_636F_6E00;
const LEXICON_WORDS: usize = 1500;

const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "was", "it", "that", "with", "for", "on", "as", "at",
    "by", "from", "but", "not", "they", "she", "he", "we", "this", "all", "some", "into", "over",
];

/// Pronounceable words from onset, vowel and coda syllable parts.
fn lexicon() -> Vec<String> {
    const ONSETS: &[&str] = &[
        "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "th", "sh",
        "ch", "br", "gr", "pl", "tr", "",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "ee", "y"];
    const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "nd", "st", "ck", "m", "ng"];
    let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
    let mut words: Vec<String> = Vec::with_capacity(LEXICON_WORDS);
    while words.len() < LEXICON_WORDS {
        let mut w = String::new();
        for _ in 0..rng.gen_range(1..=3) {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
            w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
        }
        if w.len() > 1 && !words.contains(&w) && !FUNCTION_WORDS.contains(&w.as_str()) {
            words.push(w);
        }
    }
    words
}

/// Seeded generator of English-like prose, used as a stand-in corpus for
/// tests, benchmarks and the browser demo. Content words follow a Zipf law
/// over a fixed pseudo-word lexicon and are interleaved with common
/// function words.
pub fn synthetic_documents(seed: u64, target_bytes: usize) -> Vec<Vec<u8>> {
    let words = lexicon();
    let zipf = Zipf::new(words.len() as u64, 1.1).expect("valid Zipf parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut total = 0;
    while total < target_bytes {
        let mut doc = String::new();
        for _ in 0..rng.gen_range(3..9) {
            let n = rng.gen_range(4..15);
            for i in 0..n {
                let w = if rng.gen_bool(0.35) {
                    FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())]
                } else {
                    let rank: f64 = rng.sample(zipf);
                    words[rank as usize - 1].as_str()
                };
                if i == 0 {
                    let mut chars = w.chars();
                    doc.push(chars.next().expect("non-empty").to_ascii_uppercase());
                    doc.push_str(chars.as_str());
                } else {
                    doc.push(' ');
                    doc.push_str(w);
                    if i + 1 < n && rng.gen_bool(0.08) {
                        doc.push(',');
                    }
                }
            }
            doc.push_str(if rng.gen_bool(0.1) { "? " } else { ". " });
        }
        doc.push('\n');
        total += doc.len() + 1;
        docs.push(doc.into_bytes());
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_to_ids() {
        assert_eq!(tokenize(b"ab"), vec![97, 98]);
        assert_eq!(tokenize(&[SEPARATOR_BYTE]), vec![SEPARATOR_ID]);
        assert!(matches!(detokenize(&[257]), Err(Error::Index { .. })));
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let docs = synthetic_documents(1, 20_000);
        let a = Corpus::from_documents(&docs, 32, 0.1, 5).unwrap();
        let b = Corpus::from_documents(&docs, 32, 0.1, 5).unwrap();
        assert_eq!(a.eval_windows(), b.eval_windows());
        assert!(a.eval_windows().iter().all(|w| !a.train_windows().contains(w)));
        assert_eq!(a.train_batch(7, 4), b.train_batch(7, 4));
        assert_eq!(a.eval_windows().len() + a.train_windows().len(), a.token_count() / 32);
    }

    #[test]
    fn too_small_corpus() {
        assert!(matches!(Corpus::from_documents(&[b"abc"], 8, 0.1, 0), Err(Error::Data(_))));
    }

    proptest::proptest! {
        #[test]
        fn detokenize_inverts_tokenize(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..256)) {
            proptest::prop_assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
        }
    }
}
