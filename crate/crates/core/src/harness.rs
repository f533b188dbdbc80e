//! Experiment driver: spec parsing, method composition, seeded trials and
//! CSV results.
//!
//! Data (simulation, resampling, augmentation, split plan) is fixed per
//! method from the base seed; trial `t` varies only the model seed,
//! `base_seed + t`, which drives initialization, shuffling and dropout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{eda_balance, EdaConfig, EdaOp, SynonymLexicon};
use crate::corpus::{
    imbalance_ratio, load_dataset, simulate_imbalance, Dataset, Role, SimulationConfig,
};
use crate::error::{Error, Result};
use crate::featurizer::{
    build_vocab, EncodedDataset, Vocabulary, DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE,
};
use crate::metrics::MetricsReport;
use crate::model::{Checkpoint, Dims, ModelState};
use crate::partition::{
    plan_splits, validate_sequence, SplitConfig, SplitPlan, TargetDistribution,
};
use crate::resample::{ros, rus};
use crate::synthetic::{generate, SyntheticConfig};
use crate::trainer::{evaluate, train_sequence, EpochRecord, TrainConfig};

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str =
    "method,rho,trial,seed,f1,precision,recall,macro_f1,wall_ms,spec_hash,schema";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Ros,
    Rus,
    St,
    StRos,
    Eda,
    StEda,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::Ros,
        Method::Rus,
        Method::St,
        Method::StRos,
        Method::Eda,
        Method::StEda,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Ros => "ros",
            Method::Rus => "rus",
            Method::St => "st",
            Method::StRos => "st_ros",
            Method::Eda => "eda",
            Method::StEda => "st_eda",
        }
    }

    pub fn uses_splits(self) -> bool {
        matches!(self, Method::St | Method::StRos | Method::StEda)
    }

    pub fn uses_eda(self) -> bool {
        matches!(self, Method::Eda | Method::StEda)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub config: SyntheticConfig,
    /// Training pool size per class when no simulation block is given.
    pub train_per_class: usize,
    pub validation_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSpec {
    pub rho: f64,
    pub majority_count: usize,
    /// Class name; defaults to the first label.
    pub minority: Option<String>,
}

/// One experiment: data sources, methods, and every hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub simulate: Option<SimulateSpec>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub k: usize,
    pub eta: Vec<u32>,
    pub vocab_size: usize,
    pub min_freq: usize,
    pub max_len: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub lexicon: Option<PathBuf>,
    pub eda: EdaConfig,
    pub positive: Option<String>,
    pub out: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    /// Fill `wall_ms`; makes the CSV depend on timing.
    pub wall_time: bool,
    /// Normalized `key = value` entries the spec was built from, for hashing.
    entries: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "data.train",
    "data.validation",
    "data.test",
    "synthetic",
    "synthetic.classes",
    "synthetic.train_per_class",
    "synthetic.validation_per_class",
    "synthetic.test_per_class",
    "synthetic.keywords_per_class",
    "synthetic.noise_vocab",
    "synthetic.min_len",
    "synthetic.max_len",
    "synthetic.signal",
    "synthetic.confusion",
    "simulate.rho",
    "simulate.majority_count",
    "simulate.minority",
    "methods",
    "trials",
    "seed",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.lambda",
    "train.fisher_sample_cap",
    "split.k",
    "split.eta",
    "features.vocab_size",
    "features.min_freq",
    "features.max_len",
    "model.d_emb",
    "model.d_hidden",
    "eda.lexicon",
    "eda.ops",
    "eda.n",
    "eda.p_del",
    "eval.positive",
    "output.csv",
    "output.checkpoints",
    "output.wall_time",
];

fn parse_value<V: FromStr>(entries: &BTreeMap<String, String>, key: &str) -> Result<Option<V>> {
    entries
        .get(key)
        .map(|raw| {
            raw.parse::<V>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
        })
        .transpose()
}

fn parse_list<V: FromStr>(entries: &BTreeMap<String, String>, key: &str) -> Result<Option<Vec<V>>> {
    entries
        .get(key)
        .map(|raw| {
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<V>()
                        .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
                })
                .collect()
        })
        .transpose()
}

fn parse_bool(entries: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    match entries.get(key).map(|s| s.to_ascii_lowercase()) {
        None => Ok(false),
        Some(v) if v == "true" || v == "yes" || v == "1" => Ok(true),
        Some(v) if v == "false" || v == "no" || v == "0" => Ok(false),
        Some(v) => Err(Error::Config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

impl ExperimentSpec {
    /// Parse flat `key = value` text. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "line {}: unknown key {key:?}",
                    i + 1
                )));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    i + 1
                )));
            }
        }
        Self::from_entries(entries, base_dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn from_entries(entries: BTreeMap<String, String>, base_dir: &Path) -> Result<Self> {
        let path = |key: &str| entries.get(key).map(|p| base_dir.join(p));
        let defaults = TrainConfig::default();
        let synth_defaults = SyntheticConfig::default();

        let synthetic = if parse_bool(&entries, "synthetic")? {
            Some(SyntheticSpec {
                config: SyntheticConfig {
                    classes: parse_value(&entries, "synthetic.classes")?
                        .unwrap_or(synth_defaults.classes),
                    keywords_per_class: parse_value(&entries, "synthetic.keywords_per_class")?
                        .unwrap_or(synth_defaults.keywords_per_class),
                    noise_vocab: parse_value(&entries, "synthetic.noise_vocab")?
                        .unwrap_or(synth_defaults.noise_vocab),
                    min_len: parse_value(&entries, "synthetic.min_len")?
                        .unwrap_or(synth_defaults.min_len),
                    max_len: parse_value(&entries, "synthetic.max_len")?
                        .unwrap_or(synth_defaults.max_len),
                    signal: parse_value(&entries, "synthetic.signal")?
                        .unwrap_or(synth_defaults.signal),
                    confusion: parse_value(&entries, "synthetic.confusion")?
                        .unwrap_or(synth_defaults.confusion),
                },
                train_per_class: parse_value(&entries, "synthetic.train_per_class")?
                    .unwrap_or(1000),
                validation_per_class: parse_value(&entries, "synthetic.validation_per_class")?
                    .unwrap_or(500),
                test_per_class: parse_value(&entries, "synthetic.test_per_class")?.unwrap_or(2000),
            })
        } else {
            None
        };

        let simulate = match (
            parse_value::<f64>(&entries, "simulate.rho")?,
            parse_value::<usize>(&entries, "simulate.majority_count")?,
        ) {
            (Some(rho), Some(majority_count)) => Some(SimulateSpec {
                rho,
                majority_count,
                minority: entries.get("simulate.minority").cloned(),
            }),
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "simulate.rho and simulate.majority_count must be given together".into(),
                ))
            }
        };

        let k = parse_value(&entries, "split.k")?.unwrap_or(2);
        let eta = parse_list(&entries, "split.eta")?.unwrap_or_else(|| vec![1; k]);

        let eda_defaults = EdaConfig::default();
        let eda = EdaConfig {
            ops: parse_list::<EdaOp>(&entries, "eda.ops")?.unwrap_or(eda_defaults.ops),
            n: parse_value(&entries, "eda.n")?.unwrap_or(eda_defaults.n),
            p_del: parse_value(&entries, "eda.p_del")?.unwrap_or(eda_defaults.p_del),
        };

        let spec = Self {
            train: path("data.train"),
            validation: path("data.validation"),
            test: path("data.test"),
            synthetic,
            simulate,
            methods: parse_list(&entries, "methods")?.unwrap_or_default(),
            trials: parse_value(&entries, "trials")?.unwrap_or(5),
            seed: parse_value(&entries, "seed")?.unwrap_or(0),
            train_config: TrainConfig {
                epochs: parse_value(&entries, "train.epochs")?.unwrap_or(defaults.epochs),
                batch_size: parse_value(&entries, "train.batch_size")?
                    .unwrap_or(defaults.batch_size),
                learning_rate: parse_value(&entries, "train.learning_rate")?
                    .unwrap_or(defaults.learning_rate),
                lambda: parse_value(&entries, "train.lambda")?.unwrap_or(defaults.lambda),
                fisher_sample_cap: parse_value(&entries, "train.fisher_sample_cap")?
                    .unwrap_or(defaults.fisher_sample_cap),
                seed: 0,
                positive_class: None,
            },
            k,
            eta,
            vocab_size: parse_value(&entries, "features.vocab_size")?.unwrap_or(DEFAULT_VOCAB_SIZE),
            min_freq: parse_value(&entries, "features.min_freq")?.unwrap_or(1),
            max_len: parse_value(&entries, "features.max_len")?.unwrap_or(DEFAULT_MAX_LEN),
            d_emb: parse_value(&entries, "model.d_emb")?.unwrap_or(32),
            d_hidden: parse_value(&entries, "model.d_hidden")?.unwrap_or(32),
            lexicon: path("eda.lexicon"),
            eda,
            positive: entries.get("eval.positive").cloned(),
            out: path("output.csv"),
            checkpoints: path("output.checkpoints"),
            wall_time: parse_bool(&entries, "output.wall_time")?,
            entries,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods given".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.synthetic.is_none()
            && (self.train.is_none() || self.validation.is_none() || self.test.is_none())
        {
            return Err(Error::Config(
                "data.train, data.validation and data.test are required unless synthetic = true"
                    .into(),
            ));
        }
        if let Some(s) = &self.synthetic {
            s.config.validate()?;
        }
        if let Some(sim) = &self.simulate {
            if !(sim.rho >= 1.0) || !sim.rho.is_finite() {
                return Err(Error::Config(format!(
                    "simulate.rho must be >= 1, got {}",
                    sim.rho
                )));
            }
        }
        if self.methods.iter().any(|m| m.uses_eda()) {
            if self.lexicon.is_none() {
                return Err(Error::Config("eda methods require eda.lexicon".into()));
            }
            if self.eda.ops.is_empty() {
                return Err(Error::Config("eda.ops is empty".into()));
            }
        }
        if self.methods.iter().any(|m| m.uses_splits()) && (self.k < 2 || self.eta.len() != self.k)
        {
            return Err(Error::Config(format!(
                "split.k = {} needs k >= 2 and {} eta entries, got {}",
                self.k,
                self.k,
                self.eta.len()
            )));
        }
        if self.d_emb == 0 || self.d_hidden == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "model and feature sizes must be positive".into(),
            ));
        }
        self.train_config.validate()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.entries.insert("seed".into(), seed.to_string());
    }

    /// First 16 hex digits of SHA-256 over the sorted entries, excluding
    /// `output.*`.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self
            .entries
            .iter()
            .filter(|(k, _)| !k.starts_with("output."))
        {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())[..16].to_string()
    }

    pub fn split_config(&self, p: usize) -> Result<SplitConfig<f64>> {
        SplitConfig::new(self.k, self.eta.clone(), TargetDistribution::uniform(p)?)
    }
}

/// Train, validation and test sets after loading and simulation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub rho: f64,
    pub positive_class: Option<usize>,
}

pub fn prepare_data(spec: &ExperimentSpec) -> Result<PreparedData> {
    let (train, validation, test) = match &spec.synthetic {
        Some(s) => {
            let p = s.config.classes;
            let pool = spec
                .simulate
                .as_ref()
                .map_or(s.train_per_class, |sim| sim.majority_count);
            (
                generate(&s.config, &vec![pool; p], Role::Train, spec.seed)?,
                generate(
                    &s.config,
                    &vec![s.validation_per_class; p],
                    Role::Validation,
                    spec.seed,
                )?,
                generate(&s.config, &vec![s.test_per_class; p], Role::Test, spec.seed)?,
            )
        }
        None => {
            let (Some(tr), Some(va), Some(te)) = (&spec.train, &spec.validation, &spec.test) else {
                return Err(Error::Config("missing data paths".into()));
            };
            let train = load_dataset(tr, None)?;
            let map = train.label_map().clone();
            (
                train,
                load_dataset(va, Some(&map))?.with_role(Role::Validation),
                load_dataset(te, Some(&map))?.with_role(Role::Test),
            )
        }
    };

    let map = train.label_map().clone();
    let class_id = |name: &str| {
        map.index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown class name {name:?}")))
    };

    let mut positive_class = spec.positive.as_deref().map(class_id).transpose()?;
    let (train, rho) = match &spec.simulate {
        Some(sim) => {
            let minority = sim
                .minority
                .as_deref()
                .map(class_id)
                .transpose()?
                .unwrap_or(0);
            positive_class = positive_class.or(Some(minority));
            let cfg = SimulationConfig {
                rho: sim.rho,
                majority_count: sim.majority_count,
                minority: vec![minority],
            };
            (simulate_imbalance(&train, &cfg, spec.seed)?, sim.rho)
        }
        None => {
            let rho = imbalance_ratio(&train)?.rho;
            (train, rho)
        }
    };
    Ok(PreparedData {
        train,
        validation,
        test,
        rho,
        positive_class,
    })
}

/// A method's derived training data and its task sequence.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub method: Method,
    pub data: Dataset,
    pub tasks: Vec<Vec<usize>>,
}

/// Build the training pipeline for `method`. Split-based methods need the
/// plan; EDA methods need the lexicon.
pub fn compose_method(
    method: Method,
    train: &Dataset,
    plan: Option<&SplitPlan<f64>>,
    eda: &EdaConfig,
    lexicon: Option<&SynonymLexicon>,
    seed: u64,
) -> Result<Pipeline> {
    let whole = |data: Dataset| {
        let tasks = vec![(0..data.len()).collect()];
        Pipeline {
            method,
            data,
            tasks,
        }
    };
    let lexicon = || {
        lexicon.ok_or_else(|| Error::Config(format!("method {method} requires a synonym lexicon")))
    };
    let plan =
        || plan.ok_or_else(|| Error::Config(format!("method {method} requires a split plan")));

    match method {
        Method::Baseline => Ok(whole(train.clone())),
        Method::Ros => Ok(whole(ros(train, seed)?)),
        Method::Rus => Ok(whole(rus(train, seed)?)),
        Method::Eda => Ok(whole(eda_balance(train, eda, lexicon()?, seed)?)),
        Method::St => Ok(Pipeline {
            method,
            data: train.clone(),
            tasks: plan()?.splits.clone(),
        }),
        Method::StRos | Method::StEda => {
            let plan = plan()?;
            let first = train.subset(&plan.splits[0])?;
            let first = if method == Method::StRos {
                ros(&first, seed)?
            } else {
                eda_balance(&first, eda, lexicon()?, seed)?
            };
            let mut examples = first.examples().to_vec();
            let mut tasks = vec![(0..examples.len()).collect::<Vec<_>>()];
            for split in &plan.splits[1..] {
                let start = examples.len();
                examples.extend(train.subset(split)?.examples().iter().cloned());
                tasks.push((start..examples.len()).collect());
            }
            let data = Dataset::new(examples, train.label_map().clone(), train.role())?;
            Ok(Pipeline {
                method,
                data,
                tasks,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
}

impl RowMetrics {
    /// Positive-class scores, or macro averages when there is no positive class.
    pub fn from_report(r: &MetricsReport<f64>) -> Self {
        match r.positive {
            Some(p) => Self {
                f1: p.f1,
                precision: p.precision,
                recall: p.recall,
                macro_f1: r.macro_f1,
            },
            None => {
                let n = r.per_class.len().max(1) as f64;
                Self {
                    f1: r.macro_f1,
                    precision: r.per_class.iter().map(|s| s.precision).sum::<f64>() / n,
                    recall: r.per_class.iter().map(|s| s.recall).sum::<f64>() / n,
                    macro_f1: r.macro_f1,
                }
            }
        }
    }

    fn fields(&self) -> [f64; 4] {
        [self.f1, self.precision, self.recall, self.macro_f1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialTag {
    Trial(usize),
    /// Trial with the highest validation macro-F1.
    Best,
    MeanSd,
}

impl fmt::Display for TrialTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrialTag::Trial(t) => write!(f, "{t}"),
            TrialTag::Best => f.write_str("best"),
            TrialTag::MeanSd => f.write_str("mean_sd"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RowValues {
    Single(RowMetrics),
    MeanSd { mean: RowMetrics, sd: RowMetrics },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub rho: f64,
    pub trial: TrialTag,
    pub seed: Option<u64>,
    pub values: RowValues,
    pub wall_ms: Option<u64>,
}

impl ResultRow {
    pub fn metrics(&self) -> Option<&RowMetrics> {
        match &self.values {
            RowValues::Single(m) => Some(m),
            _ => None,
        }
    }

    pub fn csv_line(&self, spec_hash: &str) -> String {
        let cells: Vec<String> = match &self.values {
            RowValues::Single(m) => m.fields().iter().map(|v| format!("{v:.6}")).collect(),
            RowValues::MeanSd { mean, sd } => mean
                .fields()
                .iter()
                .zip(sd.fields())
                .map(|(m, s)| format!("{m:.6}±{s:.6}"))
                .collect(),
            RowValues::Failed(_) => vec![String::new(); 4],
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.rho,
            self.trial,
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            cells.join(","),
            self.wall_ms.map(|w| w.to_string()).unwrap_or_default(),
            spec_hash,
            CSV_SCHEMA_VERSION
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub method: Method,
    pub trial: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub epoch: EpochRecord,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub spec_hash: String,
    pub rows: Vec<ResultRow>,
    pub history: Vec<HistoryRecord>,
    pub plan: Option<SplitPlan<f64>>,
    pub failures: usize,
}

impl ExperimentOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_line(&self.spec_hash));
            out.push('\n');
        }
        out
    }

    pub fn history_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.history {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Rows for individual trials of `method`.
    pub fn trial_rows(&self, method: Method) -> impl Iterator<Item = &ResultRow> {
        self.rows
            .iter()
            .filter(move |r| r.method == method && matches!(r.trial, TrialTag::Trial(_)))
    }
}

struct TrialOutcome {
    metrics: RowMetrics,
    val_macro_f1: f64,
    history: Vec<EpochRecord>,
    model: ModelState<f64>,
    wall_ms: u64,
}

struct MethodContext<'a> {
    spec: &'a ExperimentSpec,
    dims: Dims,
    encoded: EncodedDataset,
    tasks: &'a [Vec<usize>],
    validation: &'a EncodedDataset,
    test: &'a EncodedDataset,
    positive_class: Option<usize>,
}

fn run_trial(ctx: &MethodContext<'_>, trial: usize) -> Result<TrialOutcome> {
    let started = Instant::now();
    let seed = ctx.spec.seed.wrapping_add(trial as u64);
    let cfg = TrainConfig {
        seed,
        positive_class: ctx.positive_class,
        ..ctx.spec.train_config.clone()
    };
    let m0 = ModelState::init(seed, ctx.dims);
    let outcome = train_sequence(m0, ctx.tasks, &ctx.encoded, ctx.validation, &cfg)?;
    let report = evaluate(&outcome.model, ctx.test, ctx.positive_class)?;
    Ok(TrialOutcome {
        metrics: RowMetrics::from_report(&report),
        val_macro_f1: outcome.best_val_macro_f1,
        history: outcome.history,
        model: outcome.model,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

fn mean_sd(values: &[RowMetrics]) -> (RowMetrics, RowMetrics) {
    let n = values.len() as f64;
    let column = |f: fn(&RowMetrics) -> f64| {
        let mean = values.iter().map(f).sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (f(v) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let (f1, f1_sd) = column(|m| m.f1);
    let (p, p_sd) = column(|m| m.precision);
    let (r, r_sd) = column(|m| m.recall);
    let (mf, mf_sd) = column(|m| m.macro_f1);
    (
        RowMetrics {
            f1,
            precision: p,
            recall: r,
            macro_f1: mf,
        },
        RowMetrics {
            f1: f1_sd,
            precision: p_sd,
            recall: r_sd,
            macro_f1: mf_sd,
        },
    )
}

/// Run every method for `spec.trials` trials on up to `jobs` threads.
///
/// Setup problems (bad config, unreadable data) are errors; a failing trial
/// becomes a failed row and the run continues.
pub fn run_experiment(spec: &ExperimentSpec, jobs: usize) -> Result<ExperimentOutput> {
    spec.validate()?;
    let data = prepare_data(spec)?;
    let p = data.train.num_classes();
    let vocab: Vocabulary = build_vocab(&data.train, spec.vocab_size, spec.min_freq)?;
    let validation = EncodedDataset::encode(&data.validation, &vocab, spec.max_len);
    let test = EncodedDataset::encode(&data.test, &vocab, spec.max_len);
    let dims = Dims::for_classes(vocab.len(), spec.d_emb, spec.d_hidden, p)?;
    let lexicon = match &spec.lexicon {
        Some(path) if spec.methods.iter().any(|m| m.uses_eda()) => {
            Some(SynonymLexicon::load(path)?)
        }
        _ => None,
    };

    let plan: Option<Result<SplitPlan<f64>>> =
        spec.methods.iter().any(|m| m.uses_splits()).then(|| {
            let plan = plan_splits(&data.train, &spec.split_config(p)?, spec.seed)?;
            let report = validate_sequence(&plan);
            if !report.passed() {
                return Err(Error::InvalidPlan(report.violated().join(", ")));
            }
            Ok(plan)
        });

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let mut rows = Vec::new();
    let mut history = Vec::new();
    let mut failures = 0;
    for &method in &spec.methods {
        let plan_ref = match &plan {
            Some(Ok(p)) => Some(p),
            _ => None,
        };
        let pipeline = match &plan {
            Some(Err(e)) if method.uses_splits() => Err(Error::InvalidPlan(e.to_string())),
            _ => compose_method(
                method,
                &data.train,
                plan_ref,
                &spec.eda,
                lexicon.as_ref(),
                spec.seed,
            ),
        };

        let results: Vec<Result<TrialOutcome>> = match &pipeline {
            Ok(pipeline) => {
                let ctx = MethodContext {
                    spec,
                    dims,
                    encoded: EncodedDataset::encode(&pipeline.data, &vocab, spec.max_len),
                    tasks: &pipeline.tasks,
                    validation: &validation,
                    test: &test,
                    positive_class: data.positive_class,
                };
                pool.install(|| {
                    (1..=spec.trials)
                        .into_par_iter()
                        .map(|t| run_trial(&ctx, t))
                        .collect()
                })
            }
            Err(e) => (1..=spec.trials)
                .map(|_| Err(Error::Config(e.to_string())))
                .collect(),
        };

        let mut done: Vec<(usize, u64, TrialOutcome)> = Vec::new();
        for (i, result) in results.into_iter().enumerate() {
            let trial = i + 1;
            let seed = spec.seed.wrapping_add(trial as u64);
            match result {
                Ok(outcome) => {
                    rows.push(ResultRow {
                        method,
                        rho: data.rho,
                        trial: TrialTag::Trial(trial),
                        seed: Some(seed),
                        values: RowValues::Single(outcome.metrics),
                        wall_ms: spec.wall_time.then_some(outcome.wall_ms),
                    });
                    history.extend(outcome.history.iter().cloned().map(|epoch| HistoryRecord {
                        method,
                        trial,
                        seed,
                        epoch,
                    }));
                    done.push((trial, seed, outcome));
                }
                Err(e) => {
                    failures += 1;
                    rows.push(ResultRow {
                        method,
                        rho: data.rho,
                        trial: TrialTag::Trial(trial),
                        seed: Some(seed),
                        values: RowValues::Failed(e.to_string()),
                        wall_ms: None,
                    });
                }
            }
        }

        let mut best: Option<&(usize, u64, TrialOutcome)> = None;
        for entry in &done {
            if best.is_none_or(|b| entry.2.val_macro_f1 > b.2.val_macro_f1) {
                best = Some(entry);
            }
        }
        match best {
            Some((_, seed, outcome)) => {
                rows.push(ResultRow {
                    method,
                    rho: data.rho,
                    trial: TrialTag::Best,
                    seed: Some(*seed),
                    values: RowValues::Single(outcome.metrics),
                    wall_ms: None,
                });
                if let Some(dir) = &spec.checkpoints {
                    fs::create_dir_all(dir)?;
                    let mut ck: Checkpoint<f64> = outcome.model.to_checkpoint();
                    ck.vocabulary = Some(vocab.clone());
                    ck.label_map = Some(data.train.label_map().clone());
                    ck.max_len = Some(spec.max_len);
                    ck.save(dir.join(format!("{method}.json")))?;
                }
            }
            None => rows.push(ResultRow {
                method,
                rho: data.rho,
                trial: TrialTag::Best,
                seed: None,
                values: RowValues::Failed("no successful trials".into()),
                wall_ms: None,
            }),
        }
        let ok: Vec<RowMetrics> = done.iter().map(|(_, _, o)| o.metrics).collect();
        rows.push(ResultRow {
            method,
            rho: data.rho,
            trial: TrialTag::MeanSd,
            seed: None,
            values: if ok.is_empty() {
                RowValues::Failed("no successful trials".into())
            } else {
                let (mean, sd) = mean_sd(&ok);
                RowValues::MeanSd { mean, sd }
            },
            wall_ms: None,
        });
    }

    Ok(ExperimentOutput {
        spec_hash: spec.hash(),
        rows,
        history,
        plan: plan.and_then(Result::ok),
        failures,
    })
}

/// Evaluate a bundled checkpoint on a JSON-lines test file.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    test: &Path,
    positive: Option<&str>,
) -> Result<MetricsReport<f64>> {
    let ck: Checkpoint<f64> = Checkpoint::load(checkpoint)?;
    let (Some(vocab), Some(map), Some(max_len)) =
        (ck.vocabulary.clone(), ck.label_map.clone(), ck.max_len)
    else {
        return Err(Error::Checkpoint(
            "checkpoint lacks vocabulary, label map or max_len; it cannot evaluate raw text".into(),
        ));
    };
    let model = ck.into_model()?;
    let data = load_dataset(test, Some(&map))?.with_role(Role::Test);
    let positive = positive
        .map(|name| {
            map.index_of(name)
                .ok_or_else(|| Error::Config(format!("unknown class name {name:?}")))
        })
        .transpose()?;
    evaluate(
        &model,
        &EncodedDataset::encode(&data, &vocab, max_len),
        positive,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelMap, LabeledExample};

    fn dataset_with_counts(counts: &[usize]) -> Dataset {
        let names: Vec<String> = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let mut examples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                examples.push(LabeledExample::new(format!("good doc {label} {i}"), label));
            }
        }
        Dataset::new(examples, LabelMap::new(names).unwrap(), Role::Train).unwrap()
    }

    #[test]
    fn spec_parsing_and_defaults() {
        let spec = ExperimentSpec::parse(
            "# demo\nsynthetic = true\nmethods = baseline, st\nsimulate.rho = 50\nsimulate.majority_count = 500\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(spec.methods, vec![Method::Baseline, Method::St]);
        assert_eq!(spec.trials, 5);
        assert_eq!(spec.k, 2);
        assert_eq!(spec.eta, vec![1, 1]);
        assert_eq!(spec.train_config.lambda, 1000.0);
        assert_eq!(spec.hash().len(), 16);
    }

    #[test]
    fn spec_errors() {
        let base = Path::new(".");
        assert!(
            ExperimentSpec::parse("synthetic = true\nmethods = st\nbogus = 1\n", base).is_err()
        );
        assert!(
            ExperimentSpec::parse("synthetic = true\nmethods = st\nmethods = ros\n", base).is_err()
        );
        assert!(ExperimentSpec::parse("synthetic = true\nmethods = st_eda\n", base).is_err());
        assert!(ExperimentSpec::parse("methods = st\n", base).is_err());
        assert!(ExperimentSpec::parse("synthetic = true\nmethods = nope\n", base).is_err());
        assert!(
            ExperimentSpec::parse("synthetic = true\nmethods = st\nsimulate.rho = 5\n", base)
                .is_err()
        );
    }

    #[test]
    fn hash_ignores_output_keys_but_tracks_seed() {
        let base = Path::new(".");
        let a = ExperimentSpec::parse("synthetic = true\nmethods = st\n", base).unwrap();
        let b = ExperimentSpec::parse("synthetic = true\nmethods = st\noutput.csv = x.csv\n", base)
            .unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.set_seed(9);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn st_ros_oversamples_only_the_first_split() {
        let train = dataset_with_counts(&[250, 12_500]);
        let plan = plan_splits(&train, &SplitConfig::two_split_uniform(2).unwrap(), 1).unwrap();
        let p = compose_method(
            Method::StRos,
            &train,
            Some(&plan),
            &EdaConfig::default(),
            None,
            1,
        )
        .unwrap();
        assert_eq!(p.tasks.len(), 2);
        let counts = |idx: &[usize]| {
            crate::corpus::counts_of(idx.iter().map(|&i| p.data.examples()[i].label), 2)
        };
        assert_eq!(counts(&p.tasks[0]), vec![12_375, 12_375]);
        assert_eq!(counts(&p.tasks[1]), vec![125, 125]);
    }

    #[test]
    fn baseline_is_one_task_over_raw_data() {
        let train = dataset_with_counts(&[3, 9]);
        let p = compose_method(
            Method::Baseline,
            &train,
            None,
            &EdaConfig::default(),
            None,
            1,
        )
        .unwrap();
        assert_eq!(p.tasks, vec![(0..12).collect::<Vec<_>>()]);
        assert_eq!(p.data, train);
    }

    #[test]
    fn eda_methods_need_a_lexicon() {
        let train = dataset_with_counts(&[3, 9]);
        let plan = plan_splits(&train, &SplitConfig::two_split_uniform(2).unwrap(), 1).unwrap();
        let err = compose_method(
            Method::StEda,
            &train,
            Some(&plan),
            &EdaConfig::default(),
            None,
            1,
        );
        assert!(matches!(err, Err(Error::Config(_))));
        let lex = SynonymLexicon::new([("good", vec!["great"])]).unwrap();
        let p = compose_method(
            Method::StEda,
            &train,
            Some(&plan),
            &EdaConfig::default(),
            Some(&lex),
            1,
        )
        .unwrap();
        assert_eq!(p.tasks.len(), 2);
    }

    #[test]
    fn csv_rows_format() {
        let row = ResultRow {
            method: Method::St,
            rho: 50.0,
            trial: TrialTag::Trial(2),
            seed: Some(2),
            values: RowValues::Single(RowMetrics {
                f1: 0.5,
                precision: 0.25,
                recall: 1.0,
                macro_f1: 0.125,
            }),
            wall_ms: None,
        };
        assert_eq!(
            row.csv_line("abc"),
            "st,50,2,2,0.500000,0.250000,1.000000,0.125000,,abc,1"
        );
        let failed = ResultRow {
            values: RowValues::Failed("x".into()),
            ..row
        };
        assert_eq!(failed.csv_line("abc"), "st,50,2,2,,,,,,abc,1");
    }
}
