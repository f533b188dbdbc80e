//! Built-in synthetic text corpus for dataset-free runs.
//!
//! Each class owns a keyword list; documents mix Zipf-distributed noise
//! words from a shared vocabulary with keywords from their own class and,
//! less often, keywords from other classes.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelMap, LabeledExample, Role};
use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub keywords_per_class: usize,
    pub noise_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability a token is a keyword of the document's own class.
    pub signal: f64,
    /// Probability a token is a keyword of some other class.
    pub confusion: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            keywords_per_class: 40,
            noise_vocab: 400,
            min_len: 20,
            max_len: 40,
            signal: 0.15,
            confusion: 0.04,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.classes) {
            return Err(Error::Config(format!(
                "synthetic generator supports 2 to 5 classes, got {}",
                self.classes
            )));
        }
        if self.keywords_per_class == 0 || self.noise_vocab == 0 {
            return Err(Error::Config(
                "synthetic vocabularies must be non-empty".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(
                "synthetic document length range is invalid".into(),
            ));
        }
        if !(self.signal >= 0.0 && self.confusion >= 0.0 && self.signal + self.confusion <= 1.0) {
            return Err(Error::Config(
                "synthetic signal and confusion must be probabilities summing to at most 1".into(),
            ));
        }
        Ok(())
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        LabelMap::new((0..self.classes).map(|c| format!("class{c}")))
    }
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).expect("positive weights")
}

/// Generate `counts[c]` documents of class `c`, grouped by class.
pub fn generate(cfg: &SyntheticConfig, counts: &[usize], role: Role, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if counts.len() != cfg.classes {
        return Err(Error::LengthMismatch {
            expected: cfg.classes,
            actual: counts.len(),
        });
    }
    let stream = match role {
        Role::Train => 0x5A1,
        Role::Validation => 0x5A2,
        Role::Test => 0x5A3,
    };
    let mut rng = seeded_rng(seed, stream);
    let noise = zipf(cfg.noise_vocab);
    let keywords = zipf(cfg.keywords_per_class);

    let mut examples = Vec::with_capacity(counts.iter().sum());
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut words = Vec::with_capacity(len);
            for _ in 0..len {
                let u: f64 = rng.gen();
                let word = if u < cfg.signal {
                    format!("k{class}x{}", keywords.sample(&mut rng))
                } else if u < cfg.signal + cfg.confusion {
                    let mut other = rng.gen_range(0..cfg.classes - 1);
                    if other >= class {
                        other += 1;
                    }
                    format!("k{other}x{}", keywords.sample(&mut rng))
                } else {
                    format!("w{}", noise.sample(&mut rng))
                };
                words.push(word);
            }
            examples.push(LabeledExample::new(words.join(" "), class));
        }
    }
    Dataset::new(examples, cfg.label_map()?, role)
}
