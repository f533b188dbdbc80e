//! Random oversampling and undersampling.

use rand::seq::index;
use rand::Rng;

use crate::corpus::{imbalance_ratio, Dataset};
use crate::error::Result;
use crate::seeded_rng;

/// Duplicate examples of every smaller class, uniformly with replacement,
/// until each class matches the largest. Originals come first, in order.
pub fn ros(d: &Dataset, seed: u64) -> Result<Dataset> {
    let stats = imbalance_ratio(d)?;
    let max = *stats.counts.iter().max().expect("at least two classes");
    let mut rng = seeded_rng(seed, 0x205);
    let mut extra = Vec::new();
    for members in d.indices_by_class() {
        for _ in members.len()..max {
            let pick = members[rng.gen_range(0..members.len())];
            extra.push(d.examples()[pick].clone());
        }
    }
    d.extended(extra)
}

/// Keep a uniform sample, without replacement, of every class down to the
/// smallest class count. Retained examples keep their relative order.
pub fn rus(d: &Dataset, seed: u64) -> Result<Dataset> {
    let stats = imbalance_ratio(d)?;
    let min = *stats.counts.iter().min().expect("at least two classes");
    let mut rng = seeded_rng(seed, 0x705);
    let mut keep = Vec::with_capacity(min * d.num_classes());
    for members in d.indices_by_class() {
        keep.extend(
            index::sample(&mut rng, members.len(), min)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    keep.sort_unstable();
    d.subset(&keep)
}
