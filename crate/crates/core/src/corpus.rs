//! Labeled text datasets, label maps, and class-distribution arithmetic.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self {
            text: text.into(),
            label,
        }
    }
}

/// Ordered, duplicate-free class names. Index in `names` is the label id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::LabelMap(format!(
                "need at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::LabelMap(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Label map over the given names in lexicographic order.
    pub fn sorted<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        Self::new(set)
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for LabelMap {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<LabelMap> for Vec<String> {
    fn from(map: LabelMap) -> Self {
        map.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// Immutable collection of labeled examples under one label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    label_map: LabelMap,
    role: Role,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, label_map: LabelMap, role: Role) -> Result<Self> {
        let p = label_map.num_classes();
        for (index, ex) in examples.iter().enumerate() {
            if ex.text.trim().is_empty() {
                return Err(Error::InvalidExample {
                    index,
                    message: "text is empty".into(),
                });
            }
            if ex.label >= p {
                return Err(Error::InvalidExample {
                    index,
                    message: format!("label id {} out of range for {p} classes", ex.label),
                });
            }
        }
        Ok(Self {
            examples,
            label_map,
            role,
        })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.label_map
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(self, role: Role) -> Self {
        Self { role, ..self }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.num_classes()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.label)
    }

    pub fn counts(&self) -> Vec<usize> {
        counts_of(self.labels(), self.num_classes())
    }

    /// Example indices grouped by label id, each group in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes()];
        for (i, ex) in self.examples.iter().enumerate() {
            groups[ex.label].push(i);
        }
        groups
    }

    /// New dataset holding the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut examples = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = self.examples.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                ))
            })?;
            examples.push(ex.clone());
        }
        Ok(Self {
            examples,
            label_map: self.label_map.clone(),
            role: self.role,
        })
    }

    /// This dataset's examples followed by `extra`.
    pub fn extended(&self, extra: Vec<LabeledExample>) -> Result<Self> {
        let mut examples = self.examples.clone();
        examples.extend(extra);
        Self::new(examples, self.label_map.clone(), self.role)
    }
}

pub(crate) fn counts_of(labels: impl Iterator<Item = usize>, p: usize) -> Vec<usize> {
    let mut counts = vec![0; p];
    for l in labels {
        counts[l] += 1;
    }
    counts
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    label: String,
}

/// Read a JSON-lines dataset. Without a label map, one is inferred from the
/// observed labels in lexicographic order.
pub fn load_dataset(path: impl AsRef<Path>, label_map: Option<&LabelMap>) -> Result<Dataset> {
    let path = path.as_ref();
    let contents = fs::read_to_string(path)?;
    parse_dataset(path, &contents, label_map)
}

pub fn parse_dataset(
    source: &Path,
    contents: &str,
    label_map: Option<&LabelMap>,
) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(source),
        line,
        message,
    };
    if contents.starts_with('\u{feff}') {
        return Err(parse_err(
            1,
            "record starts with a UTF-8 byte-order mark".into(),
        ));
    }

    let mut records = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if rec.text.trim().is_empty() {
            return Err(parse_err(line_no, "text is empty".into()));
        }
        records.push((line_no, rec));
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let label_map = match label_map {
        Some(m) => m.clone(),
        None => LabelMap::sorted(records.iter().map(|(_, r)| r.label.clone()))?,
    };
    let lookup: HashMap<&str, usize> = label_map
        .names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut examples = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let label = *lookup
            .get(rec.label.as_str())
            .ok_or_else(|| Error::UnknownLabel {
                line,
                label: rec.label.clone(),
            })?;
        examples.push(LabeledExample {
            text: rec.text,
            label,
        });
    }
    Dataset::new(examples, label_map, Role::Train)
}

/// Write a dataset in the JSON-lines format read by [`load_dataset`].
pub fn write_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let mut out = String::new();
    for ex in d.examples() {
        let line = serde_json::json!({ "text": ex.text, "label": d.label_map().name(ex.label) });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Normalized per-class probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClassDistribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> ClassDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("no classes".into()));
        }
        if probs.iter().any(|&p| !(p >= T::zero()) || !p.is_finite()) {
            return Err(Error::Distribution(format!(
                "negative or non-finite entry in {probs:?}"
            )));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > T::sum_tolerance(probs.len()) {
            return Err(Error::Distribution(format!(
                "entries sum to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = T::from_count(total);
        Self::new(counts.iter().map(|&c| T::from_count(c) / n).collect())
    }

    pub fn uniform(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Distribution("no classes".into()));
        }
        let v = T::one() / T::from_count(p);
        Self::new(vec![v; p])
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn class_distribution<T: Scalar>(d: &Dataset) -> Result<ClassDistribution<T>> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ClassDistribution::from_counts(&d.counts())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    pub counts: Vec<usize>,
    /// Largest class count over smallest class count.
    pub rho: f64,
}

impl ImbalanceStats {
    pub fn from_counts(counts: Vec<usize>, label_map: &LabelMap) -> Result<Self> {
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(Error::UndefinedRatio {
                class: label_map.name(c).to_string(),
            });
        }
        let max = *counts.iter().max().ok_or(Error::EmptyDataset)?;
        let min = *counts.iter().min().ok_or(Error::EmptyDataset)?;
        Ok(Self {
            counts,
            rho: max as f64 / min as f64,
        })
    }
}

pub fn imbalance_ratio(d: &Dataset) -> Result<ImbalanceStats> {
    ImbalanceStats::from_counts(d.counts(), d.label_map())
}

/// `KL(target || q)` in nats. Classes with zero target mass contribute nothing.
pub fn kl_divergence<T: Scalar>(
    target: &ClassDistribution<T>,
    q: &ClassDistribution<T>,
) -> Result<T> {
    if target.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            actual: q.len(),
        });
    }
    let mut total = T::zero();
    for (class, (&t, &qc)) in target.probs().iter().zip(q.probs()).enumerate() {
        if t == T::zero() {
            continue;
        }
        if qc == T::zero() {
            return Err(Error::InfiniteDivergence { class });
        }
        total = total + t * (t / qc).ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub rho: f64,
    pub majority_count: usize,
    /// Label ids reduced to the minority count; the rest are kept at
    /// `majority_count`.
    pub minority: Vec<usize>,
}

impl SimulationConfig {
    pub fn new(rho: f64, majority_count: usize) -> Self {
        Self {
            rho,
            majority_count,
            minority: vec![0],
        }
    }

    pub fn minority_count(&self) -> usize {
        (self.majority_count as f64 / self.rho).round() as usize
    }
}

/// Subsample `d` so majority classes hold `majority_count` examples and the
/// configured minority classes hold `round(majority_count / rho)`.
pub fn simulate_imbalance(d: &Dataset, cfg: &SimulationConfig, seed: u64) -> Result<Dataset> {
    if !(cfg.rho >= 1.0) || !cfg.rho.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "rho must be >= 1, got {}",
            cfg.rho
        )));
    }
    let p = d.num_classes();
    if let Some(&bad) = cfg.minority.iter().find(|&&c| c >= p) {
        return Err(Error::InvalidArgument(format!(
            "minority class id {bad} out of range"
        )));
    }
    let minority_count = cfg.minority_count();
    let mut rng = seeded_rng(seed, 0x51_u64);
    let mut keep = Vec::new();
    for (class, members) in d.indices_by_class().into_iter().enumerate() {
        let needed = if cfg.minority.contains(&class) {
            minority_count
        } else {
            cfg.majority_count
        };
        if members.len() < needed {
            return Err(Error::InsufficientExamples {
                class: d.label_map().name(class).to_string(),
                needed,
                available: members.len(),
            });
        }
        keep.extend(
            index::sample(&mut rng, members.len(), needed)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    keep.sort_unstable();
    Ok(d.subset(&keep)?.with_role(Role::Train))
}
