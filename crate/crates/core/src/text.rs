//! Vocabulary, prompt tokenization and the text-feature lookup.

use serde::{Deserialize, Serialize};
use tokensplit_tensor::{Real, Tensor};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";

/// Built-in word list. Index 0 is the pad token; the all-pad sequence is the
/// null prompt used for the unconditional branch of guidance.
pub const WORDS: &[&str] = &[
    PAD,
    "a",
    "an",
    "and",
    "the",
    "of",
    "on",
    "in",
    "with",
    "photo",
    "picture",
    "image",
    "render",
    "drawing",
    "small",
    "large",
    "tiny",
    "big",
    "single",
    "one",
    "bright",
    "plain",
    "gradient",
    "background",
    "near",
    "left",
    "right",
    "top",
    "bottom",
    "center",
    "red",
    "green",
    "blue",
    "yellow",
    "white",
    "square",
    "circle",
    "triangle",
];

/// Caption templates cycled during adapter training, one per iteration.
/// `{}` is replaced by the bound word.
pub const PROMPT_TEMPLATES: &[&str] = &[
    "a photo of a {}",
    "a picture of a {}",
    "an image of a {}",
    "a render of a {}",
    "a drawing of a {}",
    "a {}",
    "the {}",
    "a single {}",
    "one {}",
    "a small {}",
    "a large {}",
    "a tiny {}",
    "a big {}",
    "a bright {}",
    "a {} on a plain background",
    "a {} on a gradient background",
    "a photo of the {}",
    "a {} in the center",
    "a {} on the left",
    "a {} on the right",
    "a {} near the top",
    "a {} near the bottom",
    "a photo of a {} on a plain background",
    "a picture of the {} on a gradient background",
];

pub fn fill_template(template: &str, word: &str) -> Vec<String> {
    template
        .replace("{}", word)
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new(WORDS.iter().map(|w| w.to_string()).collect())
    }
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Self {
        Vocabulary { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::OutOfVocabulary(word.to_owned()))
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Tokenized prompt padded to the model's sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPrompt {
    pub words: Vec<String>,
    /// Token ids, `len == max_tokens`; trailing entries are the pad id.
    pub ids: Vec<usize>,
}

impl EncodedPrompt {
    /// Number of non-pad tokens.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Index of the first occurrence of `word`.
    pub fn position(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::WordNotInPrompt {
                word: word.to_owned(),
                tokens: self.words.clone(),
            })
    }

    pub fn is_pad(&self, index: usize) -> bool {
        index >= self.words.len()
    }
}

/// Maps word sequences to rows of the embedding table.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    pub vocab: Vocabulary,
    pub max_tokens: usize,
}

impl TextEmbedder {
    pub fn new(vocab: Vocabulary, max_tokens: usize) -> Self {
        TextEmbedder { vocab, max_tokens }
    }

    pub fn tokenize<S: AsRef<str>>(&self, prompt: &[S]) -> Result<EncodedPrompt> {
        if prompt.len() > self.max_tokens {
            return Err(Error::contract(format!(
                "prompt has {} words, model accepts {}",
                prompt.len(),
                self.max_tokens
            )));
        }
        let mut ids = Vec::with_capacity(self.max_tokens);
        for w in prompt {
            ids.push(self.vocab.id(w.as_ref())?);
        }
        ids.resize(self.max_tokens, self.vocab.pad_id());
        Ok(EncodedPrompt {
            words: prompt.iter().map(|w| w.as_ref().to_owned()).collect(),
            ids,
        })
    }

    pub fn tokenize_str(&self, prompt: &str) -> Result<EncodedPrompt> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        self.tokenize(&words)
    }

    pub fn null_prompt(&self) -> EncodedPrompt {
        EncodedPrompt {
            words: Vec::new(),
            ids: vec![self.vocab.pad_id(); self.max_tokens],
        }
    }

    /// `(n × d)` text features: row `i` is the embedding of token `i`.
    pub fn features<T: Real>(&self, table: &Tensor<T>, prompt: &EncodedPrompt) -> Result<Tensor<T>> {
        Ok(table.select_rows(&prompt.ids)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedder() -> TextEmbedder {
        TextEmbedder::new(Vocabulary::default(), 16)
    }

    #[test]
    fn vocabulary_fits_limit() {
        assert!(WORDS.len() <= 64);
        assert_eq!(WORDS[0], PAD);
    }

    #[test]
    fn every_template_tokenizes() {
        assert!(PROMPT_TEMPLATES.len() >= 20);
        let e = embedder();
        for t in PROMPT_TEMPLATES {
            for w in ["square", "circle", "triangle"] {
                e.tokenize(&fill_template(t, w)).unwrap();
            }
        }
    }

    #[test]
    fn empty_prompt_is_all_pad() {
        let e = embedder();
        let p = e.tokenize::<&str>(&[]).unwrap();
        assert_eq!(p.ids, vec![0; 16]);
        assert_eq!(p, e.null_prompt());
    }

    #[test]
    fn two_word_prompt_rows() {
        let e = embedder();
        let table =
            Tensor::<f64>::from_vec(&[WORDS.len(), 2], (0..WORDS.len() * 2).map(|i| i as f64).collect()).unwrap();
        let p = e.tokenize_str("red square").unwrap();
        let c = e.features(&table, &p).unwrap();
        assert_eq!(c.shape(), &[16, 2]);
        let red = e.vocab.id("red").unwrap();
        let sq = e.vocab.id("square").unwrap();
        assert_eq!(c.row(0), table.row(red));
        assert_eq!(c.row(1), table.row(sq));
        for i in 2..16 {
            assert_eq!(c.row(i), table.row(0));
        }
        assert!(c.bit_eq(&e.features(&table, &p).unwrap()));
    }

    #[test]
    fn unknown_word_is_named() {
        let err = embedder().tokenize_str("a purple square").unwrap_err();
        assert!(err.to_string().contains("purple"));
    }

    #[test]
    fn missing_word_lists_tokens() {
        let p = embedder().tokenize_str("a red square").unwrap();
        let err = p.position("circle").unwrap_err().to_string();
        assert!(err.contains("a, red, square"));
    }
}
