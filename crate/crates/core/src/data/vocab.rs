use crate::error::{CladError, Result};

/// Token reserved at vocabulary index 0.
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercase whitespace tokens of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Builds `[UNK, ...]` from the tokens of `text` in first-occurrence order.
pub fn build_vocab(text: &str) -> Vec<String> {
    let mut vocab = vec![UNK_TOKEN.to_string()];
    for w in words(text) {
        if !vocab.contains(&w) {
            vocab.push(w);
        }
    }
    vocab
}

/// Maps `text` to ids in `vocab`; unknown words map to id 0.
pub fn tokenize(text: &str, vocab: &[String]) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Err(CladError::usage("cannot tokenize blank text"));
    }
    Ok(words(text)
        .map(|w| vocab.iter().skip(1).position(|v| *v == w).map_or(0, |i| i + 1))
        .collect())
}

/// Indicator vector over `vocab_size` with ones at every id present.
pub fn bag_of_words(tokens: &[usize], vocab_size: usize) -> Vec<f64> {
    let mut bow = vec![0.0; vocab_size];
    for &t in tokens {
        if t < vocab_size {
            bow[t] = 1.0;
        }
    }
    bow
}
