//! EDA-style text augmentation: synonym replacement, random insertion,
//! random swap and random deletion over whitespace tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::{seeded_rng, SeededRng};

/// Word to synonyms. Keys are lowercase; a word never lists itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl SynonymLexicon {
    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: Into<String>,
    {
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (word, synonyms) in entries {
            let word = word.into().trim().to_lowercase();
            if word.is_empty() {
                return Err(Error::InvalidArgument(
                    "lexicon entry with empty word".into(),
                ));
            }
            let slot = map.entry(word.clone()).or_default();
            for s in synonyms {
                let s = s.into().trim().to_string();
                if !s.is_empty() && s.to_lowercase() != word && !slot.contains(&s) {
                    slot.push(s);
                }
            }
            if slot.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "lexicon word {word:?} has no synonyms other than itself"
                )));
            }
        }
        Ok(Self { entries: map })
    }

    /// Parse `word<TAB>syn1,syn2,...` lines. Blank lines and `#` comments are skipped.
    pub fn parse(source: &Path, contents: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in contents.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (word, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: PathBuf::from(source),
                line: i + 1,
                message: "expected word<TAB>synonyms".into(),
            })?;
            let synonyms: Vec<String> = rest
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            entries.push((word.to_string(), synonyms));
        }
        Self::new(entries).map_err(|e| Error::Parse {
            path: PathBuf::from(source),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(path, &fs::read_to_string(path)?)
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

fn covered_positions(words: &[String], lex: &SynonymLexicon) -> Vec<usize> {
    words
        .iter()
        .enumerate()
        .filter(|(_, w)| lex.synonyms(w).is_some())
        .map(|(i, _)| i)
        .collect()
}

fn require_positive(n: usize, op: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{op}: n must be at least 1"
        )));
    }
    Ok(())
}

pub fn synonym_replacement(
    text: &str,
    n: usize,
    lex: &SynonymLexicon,
    seed: u64,
) -> Result<String> {
    require_positive(n, "synonym replacement")?;
    Ok(replace_with(text, n, lex, &mut seeded_rng(seed, 0xE1)))
}

fn replace_with(text: &str, n: usize, lex: &SynonymLexicon, rng: &mut SeededRng) -> String {
    let mut words = tokens(text);
    let mut positions = covered_positions(&words, lex);
    if positions.is_empty() {
        return text.to_string();
    }
    positions.shuffle(rng);
    for &i in positions.iter().take(n) {
        let choices = lex.synonyms(&words[i]).expect("covered");
        words[i] = choices.choose(rng).expect("non-empty").clone();
    }
    words.join(" ")
}

pub fn random_insertion(text: &str, n: usize, lex: &SynonymLexicon, seed: u64) -> Result<String> {
    require_positive(n, "random insertion")?;
    Ok(insert_with(text, n, lex, &mut seeded_rng(seed, 0xE2)))
}

fn insert_with(text: &str, n: usize, lex: &SynonymLexicon, rng: &mut SeededRng) -> String {
    let mut words = tokens(text);
    if covered_positions(&words, lex).is_empty() {
        return text.to_string();
    }
    for _ in 0..n {
        let positions = covered_positions(&words, lex);
        let source = positions.choose(rng).expect("coverage only grows");
        let synonym = lex
            .synonyms(&words[*source])
            .expect("covered")
            .choose(rng)
            .expect("non-empty")
            .clone();
        let at = rng.gen_range(0..=words.len());
        words.insert(at, synonym);
    }
    words.join(" ")
}

/// Swap `n` random pairs of distinct token positions. Texts with fewer than
/// two tokens come back unchanged.
pub fn random_swap(text: &str, n: usize, seed: u64) -> Result<String> {
    require_positive(n, "random swap")?;
    Ok(swap_with(text, n, &mut seeded_rng(seed, 0xE3)))
}

fn swap_with(text: &str, n: usize, rng: &mut SeededRng) -> String {
    let mut words = tokens(text);
    if words.len() < 2 {
        return text.to_string();
    }
    for _ in 0..n {
        let a = rng.gen_range(0..words.len());
        let mut b = rng.gen_range(0..words.len() - 1);
        if b >= a {
            b += 1;
        }
        words.swap(a, b);
    }
    words.join(" ")
}

/// Drop each token with probability `p_del`; if every token would be
/// dropped, keep one at random.
pub fn random_deletion(text: &str, p_del: f64, seed: u64) -> Result<String> {
    check_p_del(p_del)?;
    Ok(delete_with(text, p_del, &mut seeded_rng(seed, 0xE4)))
}

fn check_p_del(p_del: f64) -> Result<()> {
    if !(p_del > 0.0 && p_del < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "deletion probability must be in (0, 1), got {p_del}"
        )));
    }
    Ok(())
}

fn delete_with(text: &str, p_del: f64, rng: &mut SeededRng) -> String {
    let words = tokens(text);
    if words.is_empty() {
        return text.to_string();
    }
    let kept: Vec<&String> = words.iter().filter(|_| !rng.gen_bool(p_del)).collect();
    if kept.is_empty() {
        return words.choose(rng).expect("non-empty").clone();
    }
    if kept.len() == words.len() {
        return text.to_string();
    }
    kept.into_iter().cloned().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdaOp {
    SynonymReplacement,
    RandomInsertion,
    RandomSwap,
    RandomDeletion,
}

impl FromStr for EdaOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sr" => Ok(EdaOp::SynonymReplacement),
            "ri" => Ok(EdaOp::RandomInsertion),
            "rs" => Ok(EdaOp::RandomSwap),
            "rd" => Ok(EdaOp::RandomDeletion),
            other => Err(Error::Config(format!(
                "unknown EDA op {other:?} (expected sr, ri, rs, rd)"
            ))),
        }
    }
}

impl fmt::Display for EdaOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdaOp::SynonymReplacement => "sr",
            EdaOp::RandomInsertion => "ri",
            EdaOp::RandomSwap => "rs",
            EdaOp::RandomDeletion => "rd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdaConfig {
    pub ops: Vec<EdaOp>,
    /// Edits per variant for replacement, insertion and swap.
    pub n: usize,
    pub p_del: f64,
}

impl Default for EdaConfig {
    /// Synonym replacement and random insertion, one edit each.
    fn default() -> Self {
        Self {
            ops: vec![EdaOp::SynonymReplacement, EdaOp::RandomInsertion],
            n: 1,
            p_del: 0.1,
        }
    }
}

impl EdaConfig {
    fn apply(&self, op: EdaOp, text: &str, lex: &SynonymLexicon, rng: &mut SeededRng) -> String {
        match op {
            EdaOp::SynonymReplacement => replace_with(text, self.n, lex, rng),
            EdaOp::RandomInsertion => insert_with(text, self.n, lex, rng),
            EdaOp::RandomSwap => swap_with(text, self.n, rng),
            EdaOp::RandomDeletion => delete_with(text, self.p_del, rng),
        }
    }
}

/// Top every class up to `target_counts` with augmented copies of uniformly
/// chosen originals; each copy comes from one randomly chosen enabled op.
/// Originals come first, in order.
pub fn eda_oversample(
    d: &Dataset,
    cfg: &EdaConfig,
    target_counts: &[usize],
    lex: &SynonymLexicon,
    seed: u64,
) -> Result<Dataset> {
    let mut ops = cfg.ops.clone();
    ops.sort();
    ops.dedup();
    if ops.is_empty() {
        return Err(Error::InvalidArgument("no EDA operations enabled".into()));
    }
    require_positive(cfg.n, "EDA")?;
    if ops.contains(&EdaOp::RandomDeletion) {
        check_p_del(cfg.p_del)?;
    }
    if target_counts.len() != d.num_classes() {
        return Err(Error::LengthMismatch {
            expected: d.num_classes(),
            actual: target_counts.len(),
        });
    }

    let mut rng = seeded_rng(seed, 0xEDA);
    let mut extra = Vec::new();
    for (class, members) in d.indices_by_class().into_iter().enumerate() {
        let target = target_counts[class];
        if target < members.len() {
            return Err(Error::InvalidArgument(format!(
                "target count {target} for class {:?} is below its current count {}",
                d.label_map().name(class),
                members.len()
            )));
        }
        if target > members.len() && members.is_empty() {
            return Err(Error::InsufficientExamples {
                class: d.label_map().name(class).to_string(),
                needed: 1,
                available: 0,
            });
        }
        for _ in members.len()..target {
            let source = &d.examples()[*members.choose(&mut rng).expect("non-empty")];
            let op = *ops.choose(&mut rng).expect("non-empty");
            let text = cfg.apply(op, &source.text, lex, &mut rng);
            extra.push(LabeledExample::new(text, class));
        }
    }
    d.extended(extra)
}

/// [`eda_oversample`] with every class topped up to the largest class count.
pub fn eda_balance(
    d: &Dataset,
    cfg: &EdaConfig,
    lex: &SynonymLexicon,
    seed: u64,
) -> Result<Dataset> {
    let counts = d.counts();
    let max = counts.iter().copied().max().unwrap_or(0);
    eda_oversample(d, cfg, &vec![max; counts.len()], lex, seed)
}
