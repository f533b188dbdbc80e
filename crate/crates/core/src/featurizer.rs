//! Tokenization, vocabulary construction and fixed-length index encoding.
//!
//! The vocabulary is built once from the full training set and shared by
//! every split so that the parameter vector keeps the same layout across
//! tasks.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

pub const PAD_INDEX: u32 = 0;
pub const UNK_INDEX: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const DEFAULT_MAX_LEN: usize = 128;
pub const DEFAULT_VOCAB_SIZE: usize = 20_000;

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_size: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    max_size: usize,
    tokens: Vec<String>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabularyFile) -> Result<Self> {
        if file.tokens.len() < 2 || file.tokens[0] != PAD_TOKEN || file.tokens[1] != UNK_TOKEN {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the pad and unk tokens".into(),
            ));
        }
        Self::from_tokens(file.tokens[2..].to_vec(), file.max_size)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            max_size: v.max_size,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Vocabulary over `words` (most important first), after the reserved
    /// pad and unk entries.
    pub fn from_tokens(words: Vec<String>, max_size: usize) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Self {
            tokens,
            index,
            max_size,
        })
    }

    /// Total size including the reserved entries.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn unk_index(&self) -> u32 {
        UNK_INDEX
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: u32) -> Option<&str> {
        self.tokens.get(i as usize).map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Keep the `max_size` most frequent tokens seen at least `min_freq` times;
/// ties go to the lexicographically smaller token.
pub fn build_vocab(train: &Dataset, max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for ex in train.examples() {
        for t in tokenize(&ex.text) {
            *freq.entry(t).or_default() += 1;
        }
    }
    freq.remove(PAD_TOKEN);
    freq.remove(UNK_TOKEN);
    let mut ranked: Vec<(String, usize)> =
        freq.into_iter().filter(|(_, n)| *n >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t).collect(), max_size)
}

/// Token indices padded (with [`PAD_INDEX`]) or truncated to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<u32>);

impl FeatureVector {
    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn encode(text: &str, v: &Vocabulary, max_len: usize) -> FeatureVector {
    let mut out: Vec<u32> = tokenize(text)
        .iter()
        .take(max_len)
        .map(|t| v.get(t).unwrap_or(UNK_INDEX))
        .collect();
    out.resize(max_len, PAD_INDEX);
    FeatureVector(out)
}

/// A dataset after encoding: features and label ids, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl EncodedDataset {
    pub fn encode(d: &Dataset, v: &Vocabulary, max_len: usize) -> Self {
        Self {
            features: d
                .examples()
                .iter()
                .map(|e| encode(&e.text, v, max_len))
                .collect(),
            labels: d.labels().collect(),
            num_classes: d.num_classes(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelMap, LabeledExample, Role};

    fn corpus(texts: &[&str]) -> Dataset {
        let examples = texts.iter().map(|t| LabeledExample::new(*t, 0)).collect();
        Dataset::new(examples, LabelMap::new(["x", "y"]).unwrap(), Role::Train).unwrap()
    }

    #[test]
    fn tokenizer_splits_on_punctuation() {
        assert_eq!(tokenize("A b!"), vec!["a", "b"]);
        assert_eq!(tokenize("don't  STOP,now"), vec!["don", "t", "stop", "now"]);
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn vocab_by_frequency() {
        let d = corpus(&["a a b"]);
        let v = build_vocab(&d, 10, 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.get("a"), Some(2));
        assert_eq!(v.get("b"), Some(3));
        assert_eq!(v.token(0), Some(PAD_TOKEN));
        assert_eq!(v.token(1), Some(UNK_TOKEN));

        let capped = build_vocab(&d, 1, 1).unwrap();
        assert_eq!(capped.len(), 3);
        assert_eq!(capped.get("a"), Some(2));

        let thresholded = build_vocab(&corpus(&["a a b", "a"]), 10, 3).unwrap();
        assert_eq!(thresholded.len(), 3);
        assert_eq!(thresholded.get("b"), None);
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = build_vocab(&corpus(&["zeta alpha mid"]), 2, 1).unwrap();
        assert_eq!(v.get("alpha"), Some(2));
        assert_eq!(v.get("mid"), Some(3));
        assert_eq!(v.get("zeta"), None);
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::from_tokens(vec!["a".into(), "b".into()], 10).unwrap();
        assert_eq!(encode("A b!", &v, 4).0, vec![2, 3, 0, 0]);
        assert_eq!(encode("", &v, 3).0, vec![0, 0, 0]);
        assert_eq!(encode("a zebra", &v, 2).0, vec![2, UNK_INDEX]);
        assert_eq!(encode("a b a b a", &v, 3).0, vec![2, 3, 2]);
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = build_vocab(&corpus(&["the cat sat on the mat"]), 100, 1).unwrap();
        let back: Vocabulary = serde_json::from_str(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>("{\"max_size\":3,\"tokens\":[\"x\"]}").is_err());
    }
}
