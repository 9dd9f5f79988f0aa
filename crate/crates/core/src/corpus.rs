//! Text corpora for the language-model experiment: whitespace tokenization,
//! vocabularies and n-gram `(context, next word)` pairs.
//!
//! Each line is a sentence. `</s>` ends every sentence and also pads the
//! history at the start of one; words outside the vocabulary map to `<unk>`.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";

/// Lower-cased whitespace tokens of each non-empty line.
pub fn tokenize(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Words of `sentences` with at least `min_count` occurrences, most
    /// frequent first (ties broken alphabetically), after `</s>` and `<unk>`.
    pub fn build(sentences: &[Vec<String>], min_count: u64) -> Result<Self> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for w in sentences.iter().flatten() {
            *counts.entry(w.as_str()).or_default() += 1;
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(w, c)| c >= min_count && w != UNK && w != EOS)
            .collect();
        if kept.is_empty() {
            return Err(Error::Domain("vocabulary is empty".into()));
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words: Vec<String> = [EOS, UNK]
            .into_iter()
            .chain(kept.into_iter().map(|(w, _)| w))
            .map(str::to_string)
            .collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn eos(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.unk())
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Sentences as id sequences, each terminated by `</s>`.
    pub fn encode(&self, sentences: &[Vec<String>]) -> Vec<Vec<usize>> {
        sentences
            .iter()
            .map(|s| s.iter().map(|w| self.id(w)).chain([self.eos()]).collect())
            .collect()
    }

    /// Occurrence counts of each id over encoded sentences.
    pub fn counts(&self, encoded: &[Vec<usize>]) -> Vec<u64> {
        let mut c = vec![0; self.len()];
        for &id in encoded.iter().flatten() {
            c[id] += 1;
        }
        c
    }
}

/// `(context index, next word)` for every token, with histories of
/// `order − 1` words (oldest most significant) padded by `</s>`.
pub fn ngram_pairs(encoded: &[Vec<usize>], order: usize, vocab_size: usize, eos: usize) -> Vec<(usize, usize)> {
    let n = order.saturating_sub(1);
    let mut pairs = Vec::new();
    for sentence in encoded {
        let mut history = vec![eos; n];
        for &w in sentence {
            let ctx = history.iter().fold(0, |acc, &h| acc * vocab_size + h);
            pairs.push((ctx, w));
            if n > 0 {
                history.remove(0);
                history.push(w);
            }
        }
    }
    pairs
}

/// Splits sentences into consecutive train / valid / test parts.
pub fn split<T: Clone>(items: &[T], valid_frac: f64, test_frac: f64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if !(valid_frac >= 0.0 && test_frac >= 0.0 && valid_frac + test_frac < 1.0) {
        return Err(Error::Config("split fractions must be >= 0 and sum below 1".into()));
    }
    let n = items.len();
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_valid = (n as f64 * valid_frac).round() as usize;
    let n_train = n - n_valid - n_test;
    Ok((
        items[..n_train].to_vec(),
        items[n_train..n_train + n_valid].to_vec(),
        items[n_train + n_valid..].to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_drops_blank_lines() {
        let t = tokenize("The Cat\n\n  sat  ON\n");
        assert_eq!(t, vec![vec!["the", "cat"], vec!["sat", "on"]]);
    }

    #[test]
    fn vocabulary_order_and_unknowns() {
        let t = tokenize("b a b\nc b a");
        let v = Vocabulary::build(&t, 2).unwrap();
        assert_eq!(v.words(), &[EOS, UNK, "b", "a"]);
        assert_eq!(v.id("c"), v.unk());
        assert_eq!(v.encode(&t)[1], vec![1, 2, 3, 0]);
        assert!(Vocabulary::build(&t, 10).is_err());
    }

    #[test]
    fn bigram_pairs_use_padding() {
        let enc = vec![vec![2, 3, 0]];
        assert_eq!(ngram_pairs(&enc, 2, 4, 0), vec![(0, 2), (2, 3), (3, 0)]);
        // trigram: history (h1, h2) encodes as h1 * V + h2
        assert_eq!(ngram_pairs(&enc, 3, 4, 0), vec![(0, 2), (2, 3), (2 * 4 + 3, 0)]);
    }

    #[test]
    fn split_is_consecutive() {
        let items: Vec<usize> = (0..10).collect();
        let (a, b, c) = split(&items, 0.2, 0.1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 2, 1));
        assert_eq!(b, vec![7, 8]);
    }
}
