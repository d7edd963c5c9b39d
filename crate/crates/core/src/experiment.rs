//! Experiment configuration and orchestration: training runs with periodic
//! evaluation, ablation and aggregation sweeps, checkpoint evaluation and
//! interest export.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::aggregate::AggregationMode;
use crate::data::{
    parse_behavior_log, prepare_dataset, read_samples, read_vocab, synth_generate, write_samples, write_vocab,
    Dataset, FormatSpec, Manifest, Sample, SampleConfig, SynthConfig, Vocab,
};
use crate::interest::Pooling;
use crate::metrics::{auc, log_loss};
use crate::model::{HyperParams, Model, SummaryPooling, TableSizes};
use crate::numerics::{load_checkpoint, save_checkpoint, ParamStore};
use crate::rng::{self, SeedStreams};
use crate::training::Trainer;
use crate::{Error, Result};

pub const TRAIN_FILE: &str = "train.dmsamp";
pub const TEST_FILE: &str = "test.dmsamp";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_HEADER: &str = "step,ce,ssl_total,train_auc,eval_auc,eval_logloss";

/// Everything a run depends on. An empty `data_dir` selects the synthetic
/// generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub hyper: HyperParams,
    pub seed: u64,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    /// Evaluate every this many steps, and always after the last one.
    pub eval_interval: usize,
    pub data_dir: Option<PathBuf>,
    pub split_fraction: f64,
    pub min_interactions: usize,
    pub neg_per_pos: usize,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hyper: HyperParams::default(),
            seed: 7,
            epochs: 2,
            max_steps: 0,
            eval_interval: 500,
            data_dir: None,
            split_fraction: 0.8,
            min_interactions: 5,
            neg_per_pos: 1,
            synth: SynthConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn parse_widths(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|w| parse_num(key, w.trim()))
        .collect()
}

fn widths(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every recognized key, in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "d",
        "routes",
        "heads",
        "layers",
        "epsilon",
        "threshold",
        "rho",
        "beta",
        "n_max",
        "interest_hidden",
        "expert_hidden",
        "confi_hidden",
        "leaky_slope",
        "pooling",
        "summary",
        "aggregation",
        "dha_off",
        "ssl_off",
        "single_expert",
        "lr",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "clip_norm",
        "bn_momentum",
        "batch_size",
        "seed",
        "epochs",
        "max_steps",
        "eval_interval",
        "data_dir",
        "split_fraction",
        "min_interactions",
        "neg_per_pos",
        "synth_users",
        "synth_items",
        "synth_interests",
        "synth_seq_len",
        "synth_noise",
        "synth_stickiness",
        "synth_time_span",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let h = &self.hyper;
        let s = &self.synth;
        Some(match key {
            "d" => h.d.to_string(),
            "routes" => h.routes.to_string(),
            "heads" => h.heads.to_string(),
            "layers" => h.layers.to_string(),
            "epsilon" => h.epsilon.to_string(),
            "threshold" => h.threshold.to_string(),
            "rho" => h.rho.to_string(),
            "beta" => h.beta.to_string(),
            "n_max" => h.n_max.to_string(),
            "interest_hidden" => h.interest_hidden.to_string(),
            "expert_hidden" => widths(&h.expert_hidden),
            "confi_hidden" => widths(&h.confi_hidden),
            "leaky_slope" => h.leaky_slope.to_string(),
            "pooling" => match h.pooling {
                Pooling::Softmax => "softmax".into(),
                Pooling::Unnormalized => "unnormalized".into(),
            },
            "summary" => match h.summary {
                SummaryPooling::Mean => "mean".into(),
                SummaryPooling::Last => "last".into(),
            },
            "aggregation" => h.aggregation.name().into(),
            "dha_off" => h.dha_off.to_string(),
            "ssl_off" => h.ssl_off.to_string(),
            "single_expert" => h.single_expert.to_string(),
            "lr" => h.lr.to_string(),
            "adam_beta1" => h.adam_beta1.to_string(),
            "adam_beta2" => h.adam_beta2.to_string(),
            "adam_eps" => h.adam_eps.to_string(),
            "clip_norm" => h.clip_norm.to_string(),
            "bn_momentum" => h.bn_momentum.to_string(),
            "batch_size" => h.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "data_dir" => self
                .data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "split_fraction" => self.split_fraction.to_string(),
            "min_interactions" => self.min_interactions.to_string(),
            "neg_per_pos" => self.neg_per_pos.to_string(),
            "synth_users" => s.num_users.to_string(),
            "synth_items" => s.num_items.to_string(),
            "synth_interests" => s.num_interests.to_string(),
            "synth_seq_len" => s.seq_len.to_string(),
            "synth_noise" => s.noise.to_string(),
            "synth_stickiness" => s.stickiness.to_string(),
            "synth_time_span" => s.time_span.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let h = &mut self.hyper;
        let s = &mut self.synth;
        match key {
            "d" => h.d = parse_num(key, v)?,
            "routes" => h.routes = parse_num(key, v)?,
            "heads" => h.heads = parse_num(key, v)?,
            "layers" => h.layers = parse_num(key, v)?,
            "epsilon" => h.epsilon = parse_num(key, v)?,
            "threshold" => h.threshold = parse_num(key, v)?,
            "rho" => h.rho = parse_num(key, v)?,
            "beta" => h.beta = parse_num(key, v)?,
            "n_max" => h.n_max = parse_num(key, v)?,
            "interest_hidden" => h.interest_hidden = parse_num(key, v)?,
            "expert_hidden" => h.expert_hidden = parse_widths(key, v)?,
            "confi_hidden" => h.confi_hidden = parse_widths(key, v)?,
            "leaky_slope" => h.leaky_slope = parse_num(key, v)?,
            "pooling" => {
                h.pooling = match v {
                    "softmax" => Pooling::Softmax,
                    "unnormalized" => Pooling::Unnormalized,
                    _ => return Err(format!("pooling: expected softmax or unnormalized, got {v:?}")),
                }
            }
            "summary" => {
                h.summary = match v {
                    "mean" => SummaryPooling::Mean,
                    "last" => SummaryPooling::Last,
                    _ => return Err(format!("summary: expected mean or last, got {v:?}")),
                }
            }
            "aggregation" => h.aggregation = v.parse().map_err(|e: Error| e.to_string())?,
            "dha_off" => h.dha_off = parse_bool(key, v)?,
            "ssl_off" => h.ssl_off = parse_bool(key, v)?,
            "single_expert" => h.single_expert = parse_bool(key, v)?,
            "lr" => h.lr = parse_num(key, v)?,
            "adam_beta1" => h.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => h.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => h.adam_eps = parse_num(key, v)?,
            "clip_norm" => h.clip_norm = parse_num(key, v)?,
            "bn_momentum" => h.bn_momentum = parse_num(key, v)?,
            "batch_size" => h.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "max_steps" => self.max_steps = parse_num(key, v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "split_fraction" => self.split_fraction = parse_num(key, v)?,
            "min_interactions" => self.min_interactions = parse_num(key, v)?,
            "neg_per_pos" => self.neg_per_pos = parse_num(key, v)?,
            "synth_users" => s.num_users = parse_num(key, v)?,
            "synth_items" => s.num_items = parse_num(key, v)?,
            "synth_interests" => s.num_interests = parse_num(key, v)?,
            "synth_seq_len" => s.seq_len = parse_num(key, v)?,
            "synth_noise" => s.noise = parse_num(key, v)?,
            "synth_stickiness" => s.stickiness = parse_num(key, v)?,
            "synth_time_span" => s.time_span = parse_num(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` pairs in order, then validates. Every problem
    /// is reported, not just the first.
    pub fn with_overrides<'a>(mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let problems: Vec<String> = pairs
            .into_iter()
            .filter_map(|(k, v)| self.set(k, v).err())
            .collect();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        self.validate()?;
        Ok(self)
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut problems = Vec::new();
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k.trim(), v.trim())),
                None => problems.push(format!("line {}: expected key = value, got {raw:?}", i + 1)),
            }
        }
        let mut cfg = Self::default();
        problems.extend(pairs.iter().filter_map(|(k, v)| cfg.set(k, v).err()));
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.hyper.problems();
        if self.hyper.single_expert && self.hyper.aggregation != AggregationMode::DemiNet {
            p.push(format!(
                "single_expert leaves nothing to aggregate; aggregation must be deminet, got {}",
                self.hyper.aggregation
            ));
        }
        if self.epochs == 0 {
            p.push("epochs must be at least 1".into());
        }
        if self.eval_interval == 0 {
            p.push("eval_interval must be at least 1".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            p.push(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        if self.min_interactions < 2 {
            p.push("min_interactions must be at least 2".into());
        }
        if self.neg_per_pos == 0 {
            p.push("neg_per_pos must be at least 1".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Canonical text: every key in order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            writeln!(out, "{k} = {}", self.get(k).expect("known key")).unwrap();
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            n_max: self.hyper.n_max,
            min_interactions: self.min_interactions,
            neg_per_pos: self.neg_per_pos,
        }
    }
}

/// Train/test samples plus the vocabulary they index.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => read_prepared(dir),
        None => {
            let streams = SeedStreams::new(cfg.seed);
            let (log, _) = synth_generate(&cfg.synth, &mut streams.stream(rng::SYNTH))?;
            prepare_dataset(
                &log,
                cfg.split_fraction,
                &cfg.sample_config(),
                &mut streams.stream(rng::NEGATIVES),
            )
        }
    }
}

pub fn tables(vocab: &Vocab) -> TableSizes {
    TableSizes {
        users: vocab.num_users(),
        items: vocab.num_items(),
        categories: vocab.num_categories(),
    }
}

fn positives(samples: &[Sample]) -> usize {
    samples.iter().filter(|s| s.label == 1).count()
}

/// Writes the sample streams, vocabulary and manifest of a dataset.
pub fn write_prepared(dir: &Path, data: &Dataset, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_samples(&dir.join(TRAIN_FILE), &data.train)?;
    write_samples(&dir.join(TEST_FILE), &data.test)?;
    write_vocab(&dir.join(VOCAB_FILE), &data.vocab)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(())
}

pub fn read_prepared(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest = Manifest::parse(&text)?;
    Ok(Dataset {
        vocab: read_vocab(&dir.join(VOCAB_FILE))?,
        train: read_samples(&dir.join(TRAIN_FILE))?,
        test: read_samples(&dir.join(TEST_FILE))?,
        split_timestamp: manifest.split_timestamp,
    })
}

/// Where a dataset for `prepare-data` comes from.
pub enum LogSource<'a> {
    File(&'a Path, &'a FormatSpec),
    Synthetic(&'a SynthConfig),
}

/// Parses or generates a log, splits it, builds samples and writes them to
/// `out`. Randomness comes from the `synth` and `negatives` streams of
/// `seed`.
pub fn prepare_data(
    source: LogSource<'_>,
    fraction: f64,
    cfg: &SampleConfig,
    seed: u64,
    out: &Path,
) -> Result<Manifest> {
    let streams = SeedStreams::new(seed);
    let (log, malformed, name) = match source {
        LogSource::File(path, spec) => {
            let parsed = parse_behavior_log(path, spec)?;
            (parsed.log, parsed.malformed, path.display().to_string())
        }
        LogSource::Synthetic(s) => (synth_generate(s, &mut streams.stream(rng::SYNTH))?.0, 0, "synthetic".into()),
    };
    let data = prepare_dataset(&log, fraction, cfg, &mut streams.stream(rng::NEGATIVES))?;
    let manifest = Manifest {
        source: name,
        seed,
        records: log.len(),
        malformed_lines: malformed,
        users: data.vocab.num_users() - 1,
        items: data.vocab.num_items() - 1,
        categories: data.vocab.num_categories() - 1,
        split_timestamp: data.split_timestamp,
        split_fraction: fraction.to_string(),
        n_max: cfg.n_max,
        min_interactions: cfg.min_interactions,
        neg_per_pos: cfg.neg_per_pos,
        train_samples: data.train.len(),
        train_positives: positives(&data.train),
        test_samples: data.test.len(),
        test_positives: positives(&data.test),
    };
    write_prepared(out, &data, &manifest)?;
    Ok(manifest)
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean over the steps since the previous row.
    pub ce: f64,
    pub ssl_total: f64,
    /// AUC of the training predictions since the previous row; NaN when
    /// they hold a single class.
    pub train_auc: f64,
    pub eval_auc: f64,
    pub eval_logloss: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.ce, self.ssl_total, self.train_auc, self.eval_auc, self.eval_logloss
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub auc: f64,
    pub logloss: f64,
    pub best_auc: f64,
    pub best_step: usize,
    pub steps: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub config_hash: String,
    pub seed: u64,
    pub best_params: ParamStore,
}

impl RunReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn summary_text(&self) -> String {
        format!(
            "auc={:.6}\nlogloss={:.6}\nbest_eval_auc={:.6}\nbest_step={}\nsteps={}\ntrain_samples={}\ntest_samples={}\nconfig_hash={}\nseed={}\n",
            self.auc,
            self.logloss,
            self.best_auc,
            self.best_step,
            self.steps,
            self.train_samples,
            self.test_samples,
            self.config_hash,
            self.seed
        )
    }
}

/// AUC and LogLoss of a model on labelled samples.
pub fn evaluate_model(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    let probs = model.predict(samples)?;
    let scored: Vec<(f64, u8)> = probs.into_iter().zip(samples).map(|(p, s)| (p, s.label)).collect();
    Ok((auc(&scored)?, log_loss(&scored)?))
}

/// Trains on `data` per `cfg`, evaluating on the test split every
/// `eval_interval` steps and after the last step. `on_eval` sees each
/// metrics row as it is produced.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mut on_eval: impl FnMut(&MetricsRow),
) -> Result<RunReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Data("training and test sets must be nonempty".into()));
    }
    let streams = SeedStreams::new(cfg.seed);
    let model = Model::new(cfg.hyper.clone(), tables(&data.vocab), &mut streams.stream(rng::INIT))?;
    let mut trainer = Trainer::new(model, &streams);
    let mut shuffle = streams.stream(rng::DATA);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut rows = Vec::new();
    let (mut best_auc, mut best_step) = (f64::NEG_INFINITY, 0);
    let mut best_params = trainer.model.store.clone();
    let (mut ce_sum, mut ssl_sum, mut window) = (0.0, 0.0, 0usize);
    let mut train_scores: Vec<(f64, u8)> = Vec::new();
    let mut step = 0;
    let budget = if cfg.max_steps == 0 { usize::MAX } else { cfg.max_steps };
    let bs = cfg.hyper.batch_size;

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for idx in order.chunks(bs) {
            if step >= budget {
                break 'epochs;
            }
            let batch: Vec<Sample> = idx.iter().map(|&i| data.train[i].clone()).collect();
            let report = trainer.train_step(&batch)?;
            step += 1;
            ce_sum += report.loss.ce;
            ssl_sum += report.loss.ssl_total();
            window += 1;
            train_scores.extend(report.probs.iter().zip(&batch).map(|(&p, s)| (p, s.label)));
            let last = step == budget || (step == cfg.epochs * order.len().div_ceil(bs));
            if step % cfg.eval_interval == 0 || last {
                let (eval_auc, eval_logloss) = evaluate_model(&trainer.model, &data.test)?;
                let row = MetricsRow {
                    step,
                    ce: ce_sum / window as f64,
                    ssl_total: ssl_sum / window as f64,
                    train_auc: auc(&train_scores).unwrap_or(f64::NAN),
                    eval_auc,
                    eval_logloss,
                };
                on_eval(&row);
                if eval_auc > best_auc {
                    best_auc = eval_auc;
                    best_step = step;
                    best_params = trainer.model.store.clone();
                }
                rows.push(row);
                (ce_sum, ssl_sum, window) = (0.0, 0.0, 0);
                train_scores.clear();
            }
        }
    }
    let last = rows.last().expect("at least one evaluation").clone();
    Ok(RunReport {
        auc: last.eval_auc,
        logloss: last.eval_logloss,
        rows,
        best_auc,
        best_step,
        steps: step,
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        best_params,
    })
}

/// Writes config, metrics stream, summary and best checkpoint into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(dir.join(METRICS_FILE), report.metrics_csv())?;
    fs::write(dir.join(SUMMARY_FILE), report.summary_text())?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &report.best_params)?;
    Ok(())
}

/// Loads the data, trains, and writes every artifact when `out` is given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    on_eval: impl FnMut(&MetricsRow),
) -> Result<RunReport> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let report = train_and_evaluate(cfg, &data, on_eval)?;
    if let Some(dir) = out {
        write_run(dir, cfg, &report)?;
    }
    Ok(report)
}

/// A model shaped by `cfg` and `tables`, with parameters from a checkpoint.
pub fn load_model(cfg: &ExperimentConfig, tables: TableSizes, checkpoint: &Path) -> Result<Model> {
    let mut model = Model::new(cfg.hyper.clone(), tables, &mut SeedStreams::new(cfg.seed).stream(rng::INIT))?;
    load_checkpoint(checkpoint, &mut model.store)?;
    Ok(model)
}

/// Configs for the full model and the three single-component ablations.
pub fn ablation_variants(base: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    let with = |f: fn(&mut HyperParams)| {
        let mut c = base.clone();
        c.hyper.aggregation = AggregationMode::DemiNet;
        f(&mut c.hyper);
        c
    };
    vec![
        ("full", with(|_| {})),
        ("dha_off", with(|h| h.dha_off = true)),
        ("ssl_off", with(|h| h.ssl_off = true)),
        ("single_expert", with(|h| h.single_expert = true)),
    ]
}

/// Configs for each aggregation mode with every component enabled.
pub fn aggregation_variants(base: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    AggregationMode::ALL
        .iter()
        .map(|&mode| {
            let mut c = base.clone();
            c.hyper.aggregation = mode;
            c.hyper.single_expert = false;
            (mode.name(), c)
        })
        .collect()
}

/// Runs each variant on the same data. With `out`, each run gets its own
/// subdirectory and a `<table>.csv` comparison is written.
pub fn run_variants(
    variants: &[(&'static str, ExperimentConfig)],
    out: Option<(&Path, &str)>,
    mut on_eval: impl FnMut(&str, &MetricsRow),
) -> Result<Vec<(&'static str, RunReport)>> {
    let Some((_, first)) = variants.first() else {
        return Ok(Vec::new());
    };
    for (_, c) in variants {
        c.validate()?;
    }
    let data = load_dataset(first)?;
    let mut results = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        let report = train_and_evaluate(cfg, &data, |row| on_eval(name, row))?;
        if let Some((dir, _)) = out {
            write_run(&dir.join(name), cfg, &report)?;
        }
        results.push((*name, report));
    }
    if let Some((dir, table)) = out {
        fs::write(dir.join(format!("{table}.csv")), comparison_csv(&results))?;
    }
    Ok(results)
}

pub fn comparison_csv(results: &[(&str, RunReport)]) -> String {
    let mut out = String::from("variant,auc,logloss,best_eval_auc,steps\n");
    for (name, r) in results {
        writeln!(out, "{name},{:.6},{:.6},{:.6},{}", r.auc, r.logloss, r.best_auc, r.steps).unwrap();
    }
    out
}

/// Writes one CSV row per (sample, route): metadata, the route's interest
/// vector and its attention row padded with zeros to `n_max`. Values use
/// shortest round-trip formatting, so parsing them back is exact.
pub fn export_interests<W: Write>(
    model: &Model,
    samples: &[Sample],
    vocab: Option<&Vocab>,
    mut out: W,
) -> Result<usize> {
    let (d, n_max) = (model.hyper.d, model.hyper.n_max);
    let mut header = String::from("sample,user,item,label,route");
    for i in 0..d {
        write!(header, ",v{i}").unwrap();
    }
    for i in 0..n_max {
        write!(header, ",a{i}").unwrap();
    }
    writeln!(out, "{header}")?;
    let name = |idx: usize, f: fn(&Vocab, usize) -> Option<&str>| {
        vocab
            .and_then(|v| f(v, idx))
            .map(str::to_string)
            .unwrap_or_else(|| idx.to_string())
    };
    let mut rows = 0;
    for (si, s) in samples.iter().enumerate() {
        let (values, attention) = model.interests(s)?;
        let n = attention.cols();
        let user = name(s.user, Vocab::user_name);
        let item = name(s.target_item, Vocab::item_name);
        for k in 0..values.rows() {
            let mut line = format!("{si},{user},{item},{},{k}", s.label);
            for v in values.row_slice(k) {
                write!(line, ",{v}").unwrap();
            }
            for i in 0..n_max {
                let a = if i < n { attention.at(k, i) } else { 0.0 };
                write!(line, ",{a}").unwrap();
            }
            writeln!(out, "{line}")?;
            rows += 1;
        }
    }
    Ok(rows)
}
