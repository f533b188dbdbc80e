//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails, apart from the documented known gaps listed below, which
//! are still evaluated and reported.
//!
//! The optional corpus trend check runs when `SEQTARGET_CORPUS_DIR` points at
//! a directory holding `train.jsonl`, `validation.jsonl` and `test.jsonl`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use seqtarget::augment::{eda_balance, EdaConfig, SynonymLexicon};
use seqtarget::corpus::{Dataset, LabelMap, LabeledExample, Role};
use seqtarget::featurizer::{build_vocab, EncodedDataset, FeatureVector};
use seqtarget::harness::{run_experiment, ExperimentOutput, ExperimentSpec, Method};
use seqtarget::metrics::{confusion, report, MetricsReport};
use seqtarget::model::{Dims, Mode};
use seqtarget::partition::{plan_splits, validate_sequence};
use seqtarget::resample::{ros, rus};
use seqtarget::synthetic::{generate, SyntheticConfig};
use seqtarget::trainer::{ewc_penalty, fisher_weighted_drift, sequential_train, TrainConfig};
use seqtarget::{seeded_rng, EwcAnchor, ModelState, SplitConfig};

/// Criteria known not to hold with the reference model; reported, not fatal.
const KNOWN_GAPS: &[&str] = &["recovery: ST >= ROS >= baseline F1 in >= 4 of 5 seeds"];

const RECOVERY_SPEC: &str = "\
synthetic = true
simulate.rho = 50
simulate.majority_count = 12500
synthetic.validation_per_class = 500
synthetic.test_per_class = 2000
methods = baseline, ros, st
trials = 5
seed = 0
train.learning_rate = 0.5
";

enum Status {
    Pass,
    Fail,
    KnownGap,
    Skip,
}

struct Line {
    name: String,
    status: Status,
    detail: String,
}

impl Line {
    fn check(name: &str, ok: bool, detail: impl Into<String>) -> Self {
        let status = match (ok, KNOWN_GAPS.contains(&name)) {
            (true, _) => Status::Pass,
            (false, true) => Status::KnownGap,
            (false, false) => Status::Fail,
        };
        Self {
            name: name.to_string(),
            status,
            detail: detail.into(),
        }
    }

    fn skip(name: &str, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            status: Status::Skip,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::KnownGap => "FAIL (known gap)",
            Status::Skip => "SKIP",
        };
        write!(f, "[{tag}] {} | {}", self.name, self.detail)
    }
}

fn within(started: Instant, limit: Duration) -> (bool, String) {
    let took = started.elapsed();
    (
        took < limit,
        format!("{:.2}s (limit {}s)", took.as_secs_f64(), limit.as_secs()),
    )
}

fn dataset_with_counts(counts: &[usize]) -> Dataset {
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

fn gradient_oracle() -> Vec<Line> {
    let started = Instant::now();
    let h = 1e-6;
    let agrees = |a: f64, n: f64| {
        let diff = (a - n).abs();
        diff < 1e-6 || diff / a.abs().max(n.abs()) < 1e-4
    };
    let mut worst_model: f64 = 0.0;
    let mut model_ok = true;
    let mut coords = 0usize;
    for case in 0..20u64 {
        let mut rng = seeded_rng(case, 0xACC);
        let vocab = rng.gen_range(3..=50);
        let classes = rng.gen_range(2..=4);
        let dims =
            Dims::for_classes(vocab, rng.gen_range(1..=8), rng.gen_range(1..=8), classes).unwrap();
        let mut m = ModelState::init(case, dims);
        for t in m.params_mut().iter_mut().skip(vocab * dims.d_emb) {
            *t += rng.gen_range(-0.3..0.3);
        }
        let n = rng.gen_range(1..=6);
        let batch: Vec<FeatureVector> = (0..n)
            .map(|_| {
                FeatureVector(
                    (0..rng.gen_range(1..=7))
                        .map(|_| rng.gen_range(0..vocab as u32))
                        .collect(),
                )
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let loss = |m: &ModelState| {
            m.loss(&m.forward(&batch, Mode::Eval).unwrap(), &labels)
                .unwrap()
        };
        let grad = m
            .backward(
                &m.forward(&batch, Mode::Eval).unwrap().cache,
                &batch,
                &labels,
            )
            .unwrap();
        for (j, &g) in grad.iter().enumerate() {
            let (mut p, mut q) = (m.clone(), m.clone());
            p.params_mut()[j] += h;
            q.params_mut()[j] -= h;
            let numeric = (loss(&p) - loss(&q)) / (2.0 * h);
            worst_model = worst_model.max((g - numeric).abs());
            model_ok &= agrees(g, numeric);
            coords += 1;
        }
    }

    let mut ewc_ok = true;
    for case in 0..20u64 {
        let mut rng = seeded_rng(case, 0xE3C);
        let n = rng.gen_range(1..50);
        let mut draw =
            |lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        let (theta, star, fisher) = (draw(-1.0, 1.0), draw(-1.0, 1.0), draw(0.0, 1.0));
        let anchor = EwcAnchor::new(star, fisher, 3.5).unwrap();
        let grad = ewc_penalty(&theta, &anchor).unwrap().1;
        for j in 0..n {
            let (mut p, mut q) = (theta.clone(), theta.clone());
            p[j] += h;
            q[j] -= h;
            let numeric = (ewc_penalty(&p, &anchor).unwrap().0
                - ewc_penalty(&q, &anchor).unwrap().0)
                / (2.0 * h);
            ewc_ok &= agrees(grad[j], numeric);
        }
    }
    let (fast, took) = within(started, Duration::from_secs(30));
    vec![
        Line::check(
            "gradient oracle: cross-entropy vs central differences",
            model_ok,
            format!("20 models, {coords} coordinates, max abs diff {worst_model:.2e}"),
        ),
        Line::check(
            "gradient oracle: EWC penalty vs central differences",
            ewc_ok,
            "20 random anchors",
        ),
        Line::check("gradient oracle: runtime", fast, took),
    ]
}

fn partition_suite() -> Vec<Line> {
    let started = Instant::now();
    let mut failures = Vec::new();
    for rho in [10usize, 20, 50] {
        for classes in [2usize, 3, 5] {
            let mut counts = vec![12_500; classes];
            counts[0] = 12_500 / rho;
            let d = dataset_with_counts(&counts);
            let plan =
                plan_splits(&d, &SplitConfig::two_split_uniform(classes).unwrap(), 7).unwrap();
            let report = validate_sequence(&plan);
            let half = counts[0] / 2;
            let split_counts = plan.split_counts(&d);
            let halving = split_counts[1] == vec![half; classes]
                && split_counts[0] == counts.iter().map(|c| c - half).collect::<Vec<_>>();
            let unique: HashSet<usize> = plan.splits.iter().flatten().copied().collect();
            if !(report.passed()
                && report.final_kl_within_tolerance
                && halving
                && unique.len() == d.len())
            {
                failures.push(format!("rho={rho} classes={classes}"));
            }
        }
    }
    let (fast, took) = within(started, Duration::from_secs(5));
    vec![
        Line::check(
            "partition suite: valid plans with exact halving",
            failures.is_empty(),
            if failures.is_empty() {
                "9 configurations".to_string()
            } else {
                format!("failed: {}", failures.join(", "))
            },
        ),
        Line::check("partition suite: runtime", fast, took),
    ]
}

fn metrics_oracle() -> Vec<Line> {
    let mut rng = seeded_rng(77, 0x3E7);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let p = [2, 3, 5][case % 3];
        let n = rng.gen_range(1..200);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..p)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..p)).collect();
        let r: MetricsReport<f64> = report(&confusion(&labels, &preds, p).unwrap(), None);
        let mut f1_sum = 0.0;
        for c in 0..p {
            let count = |f: &dyn Fn(usize, usize) -> bool| {
                labels.iter().zip(&preds).filter(|(&y, &q)| f(y, q)).count() as f64
            };
            let tp = count(&|y, q| y == c && q == c);
            let fp = count(&|y, q| y != c && q == c);
            let fn_ = count(&|y, q| y == c && q != c);
            let pr = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rc = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if pr + rc > 0.0 {
                2.0 * pr * rc / (pr + rc)
            } else {
                0.0
            };
            f1_sum += f1;
            let s = r.per_class[c];
            worst = worst
                .max((s.precision - pr).abs())
                .max((s.recall - rc).abs())
                .max((s.f1 - f1).abs());
        }
        worst = worst.max((r.macro_f1 - f1_sum / p as f64).abs());
    }
    vec![Line::check(
        "metrics oracle: 1000 instances vs brute-force tally",
        worst <= 4.0 * f64::EPSILON,
        format!("max abs diff {worst:.1e}"),
    )]
}

fn resampling() -> Vec<Line> {
    let d = dataset_with_counts(&[9, 120, 45]);
    let lex = SynonymLexicon::new([("good", vec!["fine"]), ("film", vec!["movie"])]).unwrap();
    let cfg = EdaConfig::default();
    let ros_d = ros(&d, 3).unwrap();
    let rus_d = rus(&d, 3).unwrap();
    let eda_d = eda_balance(&d, &cfg, &lex, 3).unwrap();
    let counts_ok = ros_d.counts() == vec![120; 3]
        && rus_d.counts() == vec![9; 3]
        && eda_d.counts() == vec![120; 3];
    let deterministic = ros_d == ros(&d, 3).unwrap()
        && rus_d == rus(&d, 3).unwrap()
        && eda_d == eda_balance(&d, &cfg, &lex, 3).unwrap();
    vec![
        Line::check(
            "resampling: ros/rus/eda reach exact targets (rho = 1)",
            counts_ok,
            format!(
                "ros {:?}, rus {:?}, eda {:?}",
                ros_d.counts(),
                rus_d.counts(),
                eda_d.counts()
            ),
        ),
        Line::check(
            "resampling: deterministic under seed",
            deterministic,
            "repeat runs compared",
        ),
    ]
}

fn fmt_drifts(d: &[f64]) -> String {
    d.iter()
        .map(|x| format!("{x:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn ewc_pull_back() -> Vec<Line> {
    let started = Instant::now();
    let cfg = SyntheticConfig::default();
    let train = generate(&cfg, &[100, 2000], Role::Train, 21).unwrap();
    let val = generate(&cfg, &[150, 150], Role::Validation, 21).unwrap();
    let vocab = build_vocab(&train, 20_000, 1).unwrap();
    let (enc, enc_val) = (
        EncodedDataset::encode(&train, &vocab, 128),
        EncodedDataset::encode(&val, &vocab, 128),
    );
    let plan = plan_splits(&train, &SplitConfig::two_split_uniform(2).unwrap(), 21).unwrap();
    let dims = Dims::for_classes(vocab.len(), 32, 32, 2).unwrap();

    let drift = |lambda: f64| {
        let tc = TrainConfig {
            lambda,
            learning_rate: 0.5,
            seed: 21,
            ..TrainConfig::default()
        };
        let out = sequential_train(ModelState::init(21, dims), &plan, &enc, &enc_val, &tc).unwrap();
        fisher_weighted_drift(out.model.params(), &out.anchors[0]).unwrap()
    };
    let sweep = |lambdas: &[f64]| lambdas.iter().map(|&l| drift(l)).collect::<Vec<f64>>();
    let main = sweep(&[0.0, 100.0, 1000.0]);
    let alt = sweep(&[0.0, 10.0, 1000.0]);
    let monotone = |d: &[f64]| d.windows(2).all(|w| w[1] <= w[0]);
    let (fast, took) = within(started, Duration::from_secs(120));
    vec![
        Line::check(
            "EWC pull-back: drift(1000) <= drift(0)",
            main[2] <= main[0],
            format!("drift {:.4e} vs {:.4e}", main[2], main[0]),
        ),
        Line::check(
            "EWC pull-back: monotone over lambda in {0, 100, 1000} and {0, 10, 1000}",
            monotone(&main) && monotone(&alt),
            format!("{} / {}", fmt_drifts(&main), fmt_drifts(&alt)),
        ),
        Line::check("EWC pull-back: runtime", fast, took),
    ]
}

fn spec_from(text: &str) -> ExperimentSpec {
    ExperimentSpec::parse(text, Path::new(".")).expect("valid spec")
}

/// Per-trial (f1, recall) for one method.
fn trials(out: &ExperimentOutput, method: Method) -> Vec<(f64, f64)> {
    out.trial_rows(method)
        .map(|r| {
            r.metrics()
                .map_or((f64::NAN, f64::NAN), |m| (m.f1, m.recall))
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn recovery() -> (Vec<Line>, String) {
    let started = Instant::now();
    let spec = spec_from(RECOVERY_SPEC);
    let out = run_experiment(&spec, 1).expect("recovery run");
    let (fast, took) = within(started, Duration::from_secs(600));

    let base = trials(&out, Method::Baseline);
    let ros_t = trials(&out, Method::Ros);
    let st = trials(&out, Method::St);
    let (b_f1, r_f1, s_f1) = (
        mean(base.iter().map(|t| t.0)),
        mean(ros_t.iter().map(|t| t.0)),
        mean(st.iter().map(|t| t.0)),
    );
    let (b_rec, s_rec) = (mean(base.iter().map(|t| t.1)), mean(st.iter().map(|t| t.1)));
    let ordered = (0..5)
        .filter(|&i| st[i].0 >= ros_t[i].0 && ros_t[i].0 >= base[i].0)
        .count();
    let lines = vec![
        Line::check(
            "recovery: mean F1 ST >= baseline + 0.05",
            s_f1 >= b_f1 + 0.05,
            format!("ST {s_f1:.4}, baseline {b_f1:.4}, ROS {r_f1:.4}"),
        ),
        Line::check(
            "recovery: mean recall ST >= baseline + 0.10",
            s_rec >= b_rec + 0.10,
            format!("ST {s_rec:.4}, baseline {b_rec:.4}"),
        ),
        Line::check(
            "recovery: ST >= ROS >= baseline F1 in >= 4 of 5 seeds",
            ordered >= 4,
            format!("{ordered}/5 seeds ordered"),
        ),
        Line::check("recovery: runtime on one thread", fast, took),
    ];
    (lines, out.to_csv())
}

fn corpus_trend() -> Vec<Line> {
    let name = "trend: ST - baseline F1 gap widens over rho 10, 20, 50 in >= 4 of 5 seeds";
    let Some(dir) = std::env::var_os("SEQTARGET_CORPUS_DIR").map(PathBuf::from) else {
        return vec![Line::skip(name, "SEQTARGET_CORPUS_DIR not set")];
    };
    let mut gaps: Vec<Vec<f64>> = Vec::new();
    for rho in [10, 20, 50] {
        let text = format!(
            "data.train = {}\ndata.validation = {}\ndata.test = {}\nsimulate.rho = {rho}\n\
             simulate.majority_count = 12500\nmethods = baseline, st\ntrials = 5\n",
            dir.join("train.jsonl").display(),
            dir.join("validation.jsonl").display(),
            dir.join("test.jsonl").display(),
        );
        let out = match run_experiment(&spec_from(&text), 4) {
            Ok(out) => out,
            Err(e) => return vec![Line::check(name, false, format!("run failed: {e}"))],
        };
        let (b, s) = (trials(&out, Method::Baseline), trials(&out, Method::St));
        gaps.push((0..5).map(|i| s[i].0 - b[i].0).collect());
    }
    let widening = (0..5)
        .filter(|&i| gaps[0][i] < gaps[1][i] && gaps[1][i] < gaps[2][i])
        .count();
    vec![Line::check(
        name,
        widening >= 4,
        format!("{widening}/5 seeds"),
    )]
}

fn determinism(recovery_csv: &str) -> Vec<Line> {
    let again = run_experiment(&spec_from(RECOVERY_SPEC), 4)
        .expect("rerun")
        .to_csv();
    let small = "synthetic = true\nsimulate.rho = 20\nsimulate.majority_count = 600\n\
                 methods = baseline, ros, rus, st, st_ros\ntrials = 3\ntrain.epochs = 4\n";
    let a = run_experiment(&spec_from(small), 1).unwrap().to_csv();
    let b = run_experiment(&spec_from(small), 3).unwrap().to_csv();
    vec![Line::check(
        "determinism: re-running a spec gives byte-identical CSV",
        again == recovery_csv && a == b,
        format!("{} + {} bytes compared", recovery_csv.len(), a.len()),
    )]
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    let mut emit = |batch: Vec<Line>| {
        for line in &batch {
            println!("{line}");
        }
        lines.extend(batch);
    };
    emit(gradient_oracle());
    emit(partition_suite());
    emit(metrics_oracle());
    emit(resampling());
    emit(ewc_pull_back());
    let (recovery_lines, csv) = recovery();
    emit(recovery_lines);
    emit(corpus_trend());
    emit(determinism(&csv));

    let failed = lines
        .iter()
        .filter(|l| matches!(l.status, Status::Fail))
        .count();
    let gaps = lines
        .iter()
        .filter(|l| matches!(l.status, Status::KnownGap))
        .count();
    let passed = lines
        .iter()
        .filter(|l| matches!(l.status, Status::Pass))
        .count();
    println!(
        "acceptance: {passed} passed, {failed} failed, {gaps} known gaps, {} skipped",
        lines.len() - passed - failed - gaps
    );
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
