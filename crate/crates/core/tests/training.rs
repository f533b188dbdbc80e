//! Trainer behaviour on small synthetic runs.

mod common;

use std::time::Instant;

use seqtarget::corpus::{Dataset, LabelMap, LabeledExample, Role};
use seqtarget::featurizer::{build_vocab, EncodedDataset};
use seqtarget::model::Dims;
use seqtarget::partition::plan_splits;
use seqtarget::synthetic::{generate, SyntheticConfig};
use seqtarget::trainer::{
    evaluate, fisher_diagonal, fisher_weighted_drift, sequential_train, train_task, Task,
    TrainConfig,
};
use seqtarget::{EwcAnchor, ModelState, SplitConfig, SplitPlan};

struct Fixture {
    train: EncodedDataset,
    val: EncodedDataset,
    plan: SplitPlan,
    dims: Dims,
}

fn fixture() -> Fixture {
    let cfg = SyntheticConfig::default();
    let train = generate(&cfg, &[60, 1200], Role::Train, 4).unwrap();
    let val = generate(&cfg, &[100, 100], Role::Validation, 4).unwrap();
    let vocab = build_vocab(&train, 5000, 1).unwrap();
    let plan = plan_splits(&train, &SplitConfig::two_split_uniform(2).unwrap(), 4).unwrap();
    Fixture {
        dims: Dims::for_classes(vocab.len(), 16, 16, 2).unwrap(),
        train: EncodedDataset::encode(&train, &vocab, 64),
        val: EncodedDataset::encode(&val, &vocab, 64),
        plan,
    }
}

fn config(lambda: f64) -> TrainConfig {
    TrainConfig {
        epochs: 8,
        learning_rate: 0.5,
        lambda,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn ewc_pulls_back_toward_the_previous_optimum() {
    let started = Instant::now();
    let f = fixture();
    let mut drifts = Vec::new();
    let mut first_anchor: Option<EwcAnchor> = None;
    for lambda in [0.0, 10.0, 100.0, 1000.0] {
        let m0 = ModelState::init(11, f.dims);
        let out = sequential_train(m0, &f.plan, &f.train, &f.val, &config(lambda)).unwrap();
        // Task 1 is unanchored, so its optimum is the same for every lambda.
        let anchor = out.anchors[0].clone();
        if let Some(prev) = &first_anchor {
            assert_eq!(prev.theta_star(), anchor.theta_star());
            assert_eq!(prev.fisher(), anchor.fisher());
        }
        drifts.push(fisher_weighted_drift(out.model.params(), &anchor).unwrap());
        first_anchor = Some(anchor);
    }
    for pair in drifts.windows(2) {
        assert!(
            pair[1] <= pair[0],
            "drift increased with lambda: {drifts:?}"
        );
    }
    assert!(drifts[3] < drifts[0]);
    assert!(started.elapsed().as_secs() < 120);
}

#[test]
fn zero_lambda_matches_chained_single_tasks() {
    let f = fixture();
    let cfg = config(0.0);
    let m0 = ModelState::init(11, f.dims);
    let seq = sequential_train(m0.clone(), &f.plan, &f.train, &f.val, &cfg).unwrap();

    let first = train_task(
        m0,
        Task {
            index: 0,
            data: &f.train,
            indices: &f.plan.splits[0],
        },
        &f.val,
        &cfg,
        None,
    )
    .unwrap();
    let task2 = Task {
        index: 1,
        data: &f.train,
        indices: &f.plan.splits[1],
    };
    let plain = train_task(first.best.clone(), task2, &f.val, &cfg, None).unwrap();
    let fisher = fisher_diagonal(
        &first.best,
        &f.train,
        &f.plan.splits[0],
        cfg.fisher_sample_cap,
        cfg.seed,
    )
    .unwrap();
    let anchor = EwcAnchor::new(first.best.params().to_vec(), fisher, 0.0).unwrap();
    let anchored = train_task(first.best.clone(), task2, &f.val, &cfg, Some(&anchor)).unwrap();

    assert_eq!(plain.best, anchored.best);
    assert_eq!(plain.history, anchored.history);
    assert_eq!(seq.model, plain.best);
    let chained: Vec<_> = first
        .history
        .iter()
        .chain(&plain.history)
        .cloned()
        .collect();
    assert_eq!(seq.history, chained);
    assert_eq!(seq.anchors[0], anchor.with_lambda(0.0).unwrap());
}

#[test]
fn sequential_training_is_bitwise_reproducible() {
    let f = fixture();
    let run = || {
        sequential_train(
            ModelState::init(5, f.dims),
            &f.plan,
            &f.train,
            &f.val,
            &config(1000.0),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    assert_eq!(a.anchors, b.anchors);
    assert_eq!(a.history.len(), 2 * config(0.0).epochs);
}

#[test]
fn descent_sanity_on_separable_data() {
    let map = LabelMap::new(["neg", "pos"]).unwrap();
    let mut examples = Vec::new();
    for i in 0..200 {
        let label = i % 2;
        let cue = if label == 0 { "dreadful" } else { "wonderful" };
        examples.push(LabeledExample::new(
            format!("the {cue} show episode {} was {cue}", i % 17),
            label,
        ));
    }
    let d = Dataset::new(examples, map, Role::Train).unwrap();
    let vocab = build_vocab(&d, 1000, 1).unwrap();
    let enc = EncodedDataset::encode(&d, &vocab, 32);
    let dims = Dims::for_classes(vocab.len(), 16, 16, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let all: Vec<usize> = (0..enc.len()).collect();
    let out = train_task(
        ModelState::init(1, dims),
        Task {
            index: 0,
            data: &enc,
            indices: &all,
        },
        &enc,
        &cfg,
        None,
    )
    .unwrap();
    let acc = evaluate(&out.best, &enc, None).unwrap().accuracy;
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert_eq!(out.history.len(), 30);
}

#[test]
fn single_task_plan_reduces_to_train_task() {
    let d = common::dataset_with_counts(&[20, 20]);
    let plan = plan_splits(&d, &SplitConfig::two_split_uniform(2).unwrap(), 0).unwrap();
    assert_eq!(plan.num_tasks(), 1);
    let vocab = build_vocab(&d, 100, 1).unwrap();
    let enc = EncodedDataset::encode(&d, &vocab, 16);
    let dims = Dims::for_classes(vocab.len(), 4, 4, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let seq = sequential_train(ModelState::init(2, dims), &plan, &enc, &enc, &cfg).unwrap();
    let single = train_task(
        ModelState::init(2, dims),
        Task {
            index: 0,
            data: &enc,
            indices: &plan.splits[0],
        },
        &enc,
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(seq.model, single.best);
    assert_eq!(seq.history, single.history);
}
