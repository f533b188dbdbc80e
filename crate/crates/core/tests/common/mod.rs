#![allow(dead_code)]

use rand::Rng;
use seqtarget::corpus::{Dataset, LabelMap, LabeledExample, Role};
use seqtarget::featurizer::FeatureVector;
use seqtarget::SeededRng;

/// Dataset whose class `c` has `counts[c]` distinct documents.
pub fn dataset_with_counts(counts: &[usize]) -> Dataset {
    let names: Vec<String> = (0..counts.len()).map(|c| format!("c{c}")).collect();
    let mut examples = Vec::new();
    for (label, &n) in counts.iter().enumerate() {
        for i in 0..n {
            examples.push(LabeledExample::new(
                format!("good film {label} number {i}"),
                label,
            ));
        }
    }
    Dataset::new(examples, LabelMap::new(names).unwrap(), Role::Train).unwrap()
}

/// Random token sequences over `1..vocab`, some padded with zeros.
pub fn random_batch(
    rng: &mut SeededRng,
    vocab: usize,
    n: usize,
    max_len: usize,
) -> Vec<FeatureVector> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            let real = rng.gen_range(1..=len);
            let mut ids: Vec<u32> = (0..real).map(|_| rng.gen_range(1..vocab as u32)).collect();
            ids.resize(len, 0);
            FeatureVector(ids)
        })
        .collect()
}
