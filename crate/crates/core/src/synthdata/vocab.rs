//! Closed vocabulary and fixed-length tokenization.

use crate::error::DataError;

pub const MAX_LEN: usize = 12;
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const VOCAB: [&str; 23] = [
    "<pad>", "<bos>", "<eos>", "the", "red", "green", "blue", "yellow", "circle", "square",
    "triangle", "moving", "staying", "still", "left", "right", "up", "down", "toward", "top",
    "bottom", "a", "object",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn word_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word)
}

/// Maps a sentence to `[BOS, words.., EOS, PAD..]` of length [`MAX_LEN`].
/// Sentences longer than `MAX_LEN - 2` words are truncated before `EOS`.
pub fn tokenize(sentence: &str) -> Result<Vec<usize>, DataError> {
    let mut ids = Vec::with_capacity(MAX_LEN);
    ids.push(BOS);
    for word in sentence.split_whitespace() {
        let id = word_id(word)
            .filter(|&id| id > EOS)
            .ok_or_else(|| DataError::OutOfVocabulary(word.to_string()))?;
        if ids.len() < MAX_LEN - 1 {
            ids.push(id);
        }
    }
    ids.push(EOS);
    ids.resize(MAX_LEN, PAD);
    Ok(ids)
}
