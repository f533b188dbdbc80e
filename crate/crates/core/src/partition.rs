//! Task sequences for sequential targeting.
//!
//! A [`SplitPlan`] partitions the training indices into disjoint splits whose
//! class distributions move toward the target as the sequence proceeds:
//! `KL(target || split_i)` is strictly decreasing in `i`, and the last split
//! matches the target exactly when counts allow.
//!
//! [`plan_splits`] realizes the two-split scheme for a uniform target: every
//! class contributes `floor(m / 2)` examples to the last split, where `m` is
//! the smallest class count, and everything else goes to the first split.
//! For `k > 2` the minority allotments follow `eta` and the surplus of larger
//! classes is spread over splits `1..k-1` with geometrically halving weights.
//! That general-`k` allocation is an extension beyond the two-split scheme.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{counts_of, kl_divergence, ClassDistribution, Dataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeded_rng;

/// Final-split KL at or below this counts as matching the target.
pub const FINAL_KL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TargetDistribution<T> {
    dist: ClassDistribution<T>,
}

impl<T: Scalar> TargetDistribution<T> {
    pub fn new(dist: ClassDistribution<T>) -> Self {
        Self { dist }
    }

    /// Discrete uniform target over `p` classes.
    pub fn uniform(p: usize) -> Result<Self> {
        Ok(Self::new(ClassDistribution::uniform(p)?))
    }

    pub fn dist(&self) -> &ClassDistribution<T> {
        &self.dist
    }

    pub fn num_classes(&self) -> usize {
        self.dist.len()
    }

    pub fn is_uniform(&self) -> bool {
        let u = T::one() / T::from_count(self.num_classes());
        let tol = T::sum_tolerance(self.num_classes());
        self.dist.probs().iter().all(|&x| (x - u).abs() <= tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SplitConfig<T> {
    k: usize,
    eta: Vec<u32>,
    target: TargetDistribution<T>,
}

impl<T: Scalar> SplitConfig<T> {
    pub fn new(k: usize, eta: Vec<u32>, target: TargetDistribution<T>) -> Result<Self> {
        if k < 2 {
            return Err(Error::SplitConfig(format!("k must be at least 2, got {k}")));
        }
        if eta.len() != k {
            return Err(Error::SplitConfig(format!(
                "eta has {} entries but k = {k}",
                eta.len()
            )));
        }
        if eta.contains(&0) {
            return Err(Error::SplitConfig("eta entries must be >= 1".into()));
        }
        Ok(Self { k, eta, target })
    }

    /// Two splits, equal minority shares, uniform target over `p` classes.
    pub fn two_split_uniform(p: usize) -> Result<Self> {
        Self::new(2, vec![1, 1], TargetDistribution::uniform(p)?)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn eta(&self) -> &[u32] {
        &self.eta
    }

    pub fn target(&self) -> &TargetDistribution<T> {
        &self.target
    }
}

/// Ordered disjoint index sets into a training dataset, with each split's KL
/// divergence from the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SplitPlan<T> {
    /// Size of the dataset the indices refer to.
    pub n_examples: usize,
    pub splits: Vec<Vec<usize>>,
    pub kls: Vec<T>,
    /// Set when the plan degraded to a single task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advisory: Option<String>,
}

impl<T: Scalar> SplitPlan<T> {
    pub fn num_tasks(&self) -> usize {
        self.splits.len()
    }

    /// Per-split class counts.
    pub fn split_counts(&self, d: &Dataset) -> Vec<Vec<usize>> {
        self.splits
            .iter()
            .map(|s| counts_of(s.iter().map(|&i| d.examples()[i].label), d.num_classes()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `KL(target || distribution of d restricted to indices)`.
pub fn split_kl<T: Scalar>(
    d: &Dataset,
    indices: &[usize],
    target: &TargetDistribution<T>,
) -> Result<T> {
    if target.num_classes() != d.num_classes() {
        return Err(Error::LengthMismatch {
            expected: d.num_classes(),
            actual: target.num_classes(),
        });
    }
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let ex = d.examples().get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("index {i} out of range for {} examples", d.len()))
        })?;
        labels.push(ex.label);
    }
    let q = ClassDistribution::from_counts(&counts_of(labels.into_iter(), d.num_classes()))?;
    kl_divergence(target.dist(), &q)
}

/// Order splits by decreasing KL from the target. Equal KLs keep their input
/// order.
pub fn sort_splits<T: Scalar>(
    splits: Vec<Vec<usize>>,
    d: &Dataset,
    target: &TargetDistribution<T>,
) -> Result<SplitPlan<T>> {
    let mut scored = splits
        .into_iter()
        .map(|s| split_kl(d, &s, target).map(|kl| (s, kl)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    let (splits, kls) = scored.into_iter().unzip();
    Ok(SplitPlan {
        n_examples: d.len(),
        splits,
        kls,
        advisory: None,
    })
}

/// Partition `d` into `cfg.k` splits ordered toward the (uniform) target.
///
/// Input that already matches the target yields a single-task plan carrying
/// an advisory instead of an error.
pub fn plan_splits<T: Scalar>(
    d: &Dataset,
    cfg: &SplitConfig<T>,
    seed: u64,
) -> Result<SplitPlan<T>> {
    let p = d.num_classes();
    let target = cfg.target();
    if target.num_classes() != p {
        return Err(Error::LengthMismatch {
            expected: p,
            actual: target.num_classes(),
        });
    }
    if !target.is_uniform() {
        return Err(Error::SplitConfig(
            "split allocation requires a uniform target distribution".into(),
        ));
    }
    let k = cfg.k();
    let counts = d.counts();
    for (class, &n) in counts.iter().enumerate() {
        if n < k {
            return Err(Error::SplitConfig(format!(
                "class {:?} has {n} examples, fewer than k = {k}",
                d.label_map().name(class)
            )));
        }
    }

    let all: Vec<usize> = (0..d.len()).collect();
    let full_kl = split_kl(d, &all, target)?;
    if full_kl <= T::lit(FINAL_KL_TOLERANCE) {
        return Ok(SplitPlan {
            n_examples: d.len(),
            splits: vec![all],
            kls: vec![full_kl],
            advisory: Some("data already matches target; training as a single task".into()),
        });
    }

    let allocation = allocate_counts(&counts, cfg.eta())?;

    let mut splits = vec![Vec::new(); k];
    for (class, members) in d.indices_by_class().into_iter().enumerate() {
        let mut members = members;
        // Content order, so the draw does not depend on row order.
        members.sort_by(|&a, &b| {
            d.examples()[a]
                .text
                .cmp(&d.examples()[b].text)
                .then(a.cmp(&b))
        });
        let mut rng = seeded_rng(seed, 0x5_0000 + class as u64);
        members.shuffle(&mut rng);
        let mut rest = members.as_slice();
        for (split, row) in splits.iter_mut().zip(&allocation).rev() {
            let (take, tail) = rest.split_at(row[class]);
            split.extend_from_slice(take);
            rest = tail;
        }
        debug_assert!(rest.is_empty());
    }
    for s in &mut splits {
        s.sort_unstable();
    }

    let plan = sort_splits(splits, d, target)?;
    if plan.kls.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::OrderingViolated(
            plan.kls.iter().map(|k| k.to_f64_lossy()).collect(),
        ));
    }
    Ok(plan)
}

/// Per-split, per-class counts: `result[split][class]`.
fn allocate_counts(counts: &[usize], eta: &[u32]) -> Result<Vec<Vec<usize>>> {
    let k = eta.len();
    let m = *counts.iter().min().ok_or(Error::EmptyDataset)?;
    let eta_total: u64 = eta.iter().map(|&e| e as u64).sum();

    let mut base: Vec<usize> = eta
        .iter()
        .map(|&e| (m as u64 * e as u64 / eta_total) as usize)
        .collect();
    base[0] += m - base.iter().sum::<usize>();
    if let Some(i) = base.iter().position(|&b| b == 0) {
        return Err(Error::SplitConfig(format!(
            "split {} would receive no examples of the smallest class (m = {m}, eta = {eta:?})",
            i + 1
        )));
    }

    // Surplus above m goes to splits 1..k-1 with weights 1, 1/2, 1/4, ...
    let weights: Vec<u64> = (0..k - 1).map(|i| 1u64 << (k - 2 - i)).collect();
    let weight_total: u64 = weights.iter().sum();

    let mut allocation: Vec<Vec<usize>> = base.iter().map(|&b| vec![b; counts.len()]).collect();
    for (class, &n) in counts.iter().enumerate() {
        let surplus = (n - m) as u64;
        let mut given = 0u64;
        for (i, &w) in weights.iter().enumerate() {
            let share = surplus * w / weight_total;
            allocation[i][class] += share as usize;
            given += share;
        }
        allocation[0][class] += (surplus - given) as usize;
    }
    Ok(allocation)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "constraint", rename_all = "snake_case")]
pub enum Violation {
    /// An index appears in more than one split (or twice in one).
    Disjointness { index: usize },
    /// Indices missing from every split, or outside the dataset.
    Coverage { missing: usize, out_of_range: usize },
    /// `kls[position] <= kls[position + 1]`.
    Ordering { position: usize },
    /// `kls` and `splits` differ in length, or a split is empty.
    Shape { detail: String },
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::Disjointness { .. } => "disjointness",
            Violation::Coverage { .. } => "coverage",
            Violation::Ordering { .. } => "ordering",
            Violation::Shape { .. } => "shape",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Disjointness { index } => write!(f, "disjointness: index {index} repeated"),
            Violation::Coverage {
                missing,
                out_of_range,
            } => write!(
                f,
                "coverage: {missing} missing, {out_of_range} out of range"
            ),
            Violation::Ordering { position } => {
                write!(
                    f,
                    "ordering: split {} is not below split {}",
                    position + 2,
                    position + 1
                )
            }
            Violation::Shape { detail } => write!(f, "shape: {detail}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub final_kl: Option<f64>,
    /// Whether the final split's KL is within [`FINAL_KL_TOLERANCE`].
    /// Informational: exact uniformity is not always reachable.
    pub final_kl_within_tolerance: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violated(&self) -> Vec<&'static str> {
        self.violations.iter().map(Violation::name).collect()
    }
}

/// Check disjointness, coverage, and strictly decreasing KL.
pub fn validate_sequence<T: Scalar>(plan: &SplitPlan<T>) -> ValidationReport {
    let mut violations = Vec::new();

    if plan.splits.len() != plan.kls.len() {
        violations.push(Violation::Shape {
            detail: format!(
                "{} splits but {} KL values",
                plan.splits.len(),
                plan.kls.len()
            ),
        });
    }
    if plan.splits.is_empty() || plan.splits.iter().any(Vec::is_empty) {
        violations.push(Violation::Shape {
            detail: "plan has no splits or an empty split".into(),
        });
    }

    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out_of_range = 0;
    for &i in plan.splits.iter().flatten() {
        if i >= plan.n_examples {
            out_of_range += 1;
        }
        *seen.entry(i).or_default() += 1;
    }
    if let Some((&index, _)) = seen.iter().find(|(_, &n)| n > 1) {
        violations.push(Violation::Disjointness { index });
    }
    let covered = seen.keys().filter(|&&i| i < plan.n_examples).count();
    let missing = plan.n_examples - covered;
    if missing > 0 || out_of_range > 0 {
        violations.push(Violation::Coverage {
            missing,
            out_of_range,
        });
    }

    for (position, w) in plan.kls.windows(2).enumerate() {
        if !(w[0] > w[1]) {
            violations.push(Violation::Ordering { position });
        }
    }

    let final_kl = plan.kls.last().map(|k| k.to_f64_lossy());
    ValidationReport {
        violations,
        final_kl,
        final_kl_within_tolerance: final_kl.is_some_and(|k| k <= FINAL_KL_TOLERANCE),
    }
}
