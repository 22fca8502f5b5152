//! Config handling and the end-to-end commands behind the CLI.
//!
//! A [`RunConfig`] is a flat `key=value` map. Every accepted key is listed in
//! [`KEYS`] together with its default; files may set any subset and later
//! overrides win. All commands read and write inside one run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::eval::{attr_accuracy, EvalError, EvalReport, RankingProtocol, ReidEvaluator};
use crate::losses::{AdversarialLoss, LossError};
use crate::models::{ArchConfig, ParamSet, Role};
use crate::synthdata::{self, DataError, Dataset, DomainShiftSpec, Split};
use crate::training::{self, AdaptConfig, EpochMetrics, PretrainConfig, Trace, TrainError};

pub const SOURCE_FILE: &str = "source.samples.csv";
pub const TARGET_TRAIN_FILE: &str = "target_train.samples.csv";
pub const TARGET_EVAL_FILE: &str = "target_eval.samples.csv";
pub const PRETRAINED_FILE: &str = "pretrained.adpt";
pub const PRETRAIN_HISTORY_FILE: &str = "pretrain_history.csv";
pub const ADAPTED_FILE: &str = "adapted.adpt";
pub const TRACE_FILE: &str = "adapt_trace.csv";
pub const REPORT_FILE: &str = "eval_report.csv";

pub const PRESETS: [&str; 2] = ["table1", "fig4"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Data { path: PathBuf, source: DataError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// 2 config/usage, 3 data format, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Config(_) => 2,
            HarnessError::Data { source, .. } => data_code(source),
            HarnessError::Train(e) => match e {
                TrainError::Config(_) => 2,
                TrainError::Data(d) => data_code(d),
                TrainError::NonFinite { .. } => 4,
                TrainError::Step { source, .. } => match source {
                    LossError::NonBinaryLabel(_) => 3,
                    _ => 4,
                },
                TrainError::Model(_) | TrainError::Eval(_) => 3,
            },
            HarnessError::Checkpoint { source, .. } => match source {
                CheckpointError::NonFinite(_) => 4,
                _ => 3,
            },
            HarnessError::Eval(_) | HarnessError::Io { .. } => 3,
        }
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Config(_) => 2,
        _ => 3,
    }
}

/// One accepted config key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default, help }
}

pub const KEYS: &[KeySpec] = &[
    key("seed", "0", "seed for data, initialisation and batch order"),
    key("out_dir", "run", "run directory for inputs and outputs"),
    key("data.m", "8", "attribute count"),
    key("data.d_in", "32", "input feature width"),
    key("data.content_dim", "16", "leading input axes carrying attribute signal"),
    key("data.shift_rotation_angle", "0.3", "target rotation in radians"),
    key(
        "data.shift_translation_scale",
        "1.0",
        "target translation per style axis",
    ),
    key("data.noise_sigma", "0.5", "per-sample noise"),
    key("data.identity_sigma", "0.5", "per-identity nuisance"),
    key("data.camera_sigma", "2.5", "per-camera offset in the target domain"),
    key("data.n_source", "2000", "labelled source samples"),
    key("data.source_test_fraction", "0.2", "held-out share of source samples"),
    key("data.n_identities", "100", "target identities in query/gallery"),
    key(
        "data.n_train_identities",
        "800",
        "target identities in the unlabelled train split",
    ),
    key("data.samples_per_identity", "6", "target samples per identity"),
    key("data.n_cameras", "3", "target cameras"),
    key("pretrain.epochs", "50", "source pretraining epochs"),
    key("pretrain.batch_size", "32", "source pretraining batch"),
    key("pretrain.learning_rate", "0.0001", "source pretraining Adam step"),
    key(
        "adapt.epochs",
        "60",
        "adaptation epochs (one pass over target train each)",
    ),
    key("adapt.batch_size", "32", "rows per adaptation batch"),
    key("adapt.learning_rate", "0.0001", "adaptation Adam step"),
    key("adapt.alpha", "0.1", "weight of the attribute term"),
    key("adapt.variant", "lsgan", "adversarial loss: lsgan | adda"),
    key("adapt.with_classifier", "true", "train C alongside M"),
    key(
        "adapt.d_steps_per_m_step",
        "5",
        "discriminator updates per mapping update",
    ),
    key(
        "adapt.source_fraction_in_union_batch",
        "0.5",
        "source share of the mapping batch",
    ),
    key("adapt.eval_every_n_epochs", "1", "trace evaluation interval"),
    key(
        "adapt.checkpoint",
        "pretrained.adpt",
        "checkpoint adapted by `adapt`, relative to out_dir",
    ),
    key("eval.k", "10", "longest CMC rank"),
    key(
        "eval.exclude_same_camera_same_id",
        "true",
        "drop same-camera true matches",
    ),
    key(
        "eval.checkpoint",
        "adapted.adpt",
        "checkpoint evaluated by `eval`, relative to out_dir",
    ),
    key(
        "eval.role",
        "target_encoder",
        "encoder role evaluated: target_encoder | source_encoder",
    ),
];

/// Renders [`KEYS`] as an aligned table.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (default in brackets):\n");
    for k in KEYS {
        let _ = writeln!(s, "  {:width$}  [{}] {}", k.name, k.default, k.help);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let spec = KEYS
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| HarnessError::Config(format!("unknown key `{key}`")))?;
        self.values.insert(spec.name, value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), HarnessError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Parses a config file body: `key = value` lines, `#` comments.
    pub fn apply_str(&mut self, text: &str) -> Result<(), HarnessError> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| HarnessError::Config(format!("line {}: {msg}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(at(format!("duplicate key `{k}`")));
            }
            seen.push(k);
            self.set(k, v).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_str(&text)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| HarnessError::Config(format!("`{key}` = `{}`: {e}", self.get(key))))
    }

    pub fn seed(&self) -> Result<u64, HarnessError> {
        self.parse("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn shift_spec(&self) -> Result<DomainShiftSpec, HarnessError> {
        Ok(DomainShiftSpec {
            m: self.parse("data.m")?,
            d_in: self.parse("data.d_in")?,
            content_dim: self.parse("data.content_dim")?,
            shift_rotation_angle: self.parse("data.shift_rotation_angle")?,
            shift_translation_scale: self.parse("data.shift_translation_scale")?,
            noise_sigma: self.parse("data.noise_sigma")?,
            identity_sigma: self.parse("data.identity_sigma")?,
            camera_sigma: self.parse("data.camera_sigma")?,
            n_source: self.parse("data.n_source")?,
            source_test_fraction: self.parse("data.source_test_fraction")?,
            n_identities: self.parse("data.n_identities")?,
            n_train_identities: self.parse("data.n_train_identities")?,
            samples_per_identity: self.parse("data.samples_per_identity")?,
            n_cameras: self.parse("data.n_cameras")?,
            seed: self.seed()?,
        })
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig, HarnessError> {
        Ok(PretrainConfig {
            epochs: self.parse("pretrain.epochs")?,
            batch_size: self.parse("pretrain.batch_size")?,
            learning_rate: self.parse("pretrain.learning_rate")?,
            seed: self.seed()?,
        })
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig, HarnessError> {
        let variant: AdversarialLoss = self.parse("adapt.variant")?;
        Ok(AdaptConfig {
            epochs: self.parse("adapt.epochs")?,
            batch_size: self.parse("adapt.batch_size")?,
            learning_rate: self.parse("adapt.learning_rate")?,
            alpha: self.parse("adapt.alpha")?,
            variant,
            with_classifier: self.parse("adapt.with_classifier")?,
            d_steps_per_m_step: self.parse("adapt.d_steps_per_m_step")?,
            source_fraction_in_union_batch: self.parse("adapt.source_fraction_in_union_batch")?,
            seed: self.seed()?,
            eval_every_n_epochs: self.parse("adapt.eval_every_n_epochs")?,
        })
    }

    pub fn protocol(&self) -> Result<RankingProtocol, HarnessError> {
        Ok(RankingProtocol {
            exclude_same_camera_same_id: self.parse("eval.exclude_same_camera_same_id")?,
            k: self.parse("eval.k")?,
        })
    }

    fn eval_role(&self) -> Result<Role, HarnessError> {
        match Role::parse(self.get("eval.role")) {
            Some(r @ (Role::SourceEncoder | Role::TargetEncoder)) => Ok(r),
            _ => Err(HarnessError::Config(format!(
                "`eval.role` must be target_encoder or source_encoder, got `{}`",
                self.get("eval.role")
            ))),
        }
    }

    /// Parses every typed section so bad values fail before any work.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.shift_spec()?
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.pretrain_config()?.validate()?;
        self.adapt_config()?.validate()?;
        self.protocol()?;
        self.eval_role()?;
        Ok(())
    }

    /// Sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of SHA-256 over [`RunConfig::canonical`], minus
    /// `out_dir`, so relocated runs share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let text: String = self
            .canonical()
            .lines()
            .filter(|l| !l.starts_with("out_dir="))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(io_err(path))
}

fn read_samples(path: &Path) -> Result<Dataset, HarnessError> {
    synthdata::read_csv(path).map_err(|source| HarnessError::Data {
        path: path.to_path_buf(),
        source,
    })
}

fn write_samples(ds: &Dataset, path: &Path) -> Result<(), HarnessError> {
    synthdata::write_csv(ds, path).map_err(|source| HarnessError::Data {
        path: path.to_path_buf(),
        source,
    })
}

fn load_sets(path: &Path) -> Result<Vec<ParamSet<f32>>, HarnessError> {
    checkpoint::load_checkpoint(path).map_err(|source| HarnessError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

fn save_sets(sets: &[&ParamSet<f32>], path: &Path) -> Result<(), HarnessError> {
    checkpoint::save_checkpoint(sets, path).map_err(|source| HarnessError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

fn take(sets: &mut Vec<ParamSet<f32>>, role: Role, path: &Path) -> Result<ParamSet<f32>, HarnessError> {
    checkpoint::take_role(sets, role).ok_or_else(|| HarnessError::Checkpoint {
        path: path.to_path_buf(),
        source: CheckpointError::Format(format!("no `{role}` weights")),
    })
}

fn prepare(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    cfg.validate()?;
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

/// Writes the source file, the label-free target train file and the
/// target query/gallery file. Returns the written paths.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = prepare(cfg)?;
    let spec = cfg.shift_spec()?;
    let pair = synthdata::generate_pair(&spec).map_err(|e| HarnessError::Config(e.to_string()))?;
    let files = [
        (SOURCE_FILE, pair.source.clone()),
        (TARGET_TRAIN_FILE, synthdata::redact(&pair.target.split(Split::Train))),
        (TARGET_EVAL_FILE, pair.target_eval()),
    ];
    let mut out = Vec::new();
    for (name, ds) in files {
        let path = dir.join(name);
        write_samples(&ds, &path)?;
        out.push(path);
    }
    Ok(out)
}

fn arch_for(cfg: &RunConfig, d_in: usize, m: usize, classifier_enabled: bool) -> Result<ArchConfig, HarnessError> {
    let spec = cfg.shift_spec()?;
    if spec.d_in != d_in || spec.m != m {
        return Err(HarnessError::Config(format!(
            "data files have m={m}, d_in={d_in} but config says m={}, d_in={}",
            spec.m, spec.d_in
        )));
    }
    Ok(ArchConfig::desk(d_in, m, classifier_enabled))
}

pub fn history_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,attr_loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

/// Fits `M_a`/`C_a` on the source file; writes the checkpoint and the loss
/// history.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<training::PretrainOutput, HarnessError> {
    let dir = prepare(cfg)?;
    let source = read_samples(&dir.join(SOURCE_FILE))?;
    let arch = arch_for(cfg, source.d_in, source.m, true)?;
    let out = training::pretrain_source(&source, &arch, &cfg.pretrain_config()?)?;
    save_sets(&[&out.encoder, &out.classifier], &dir.join(PRETRAINED_FILE))?;
    write_text(&dir.join(PRETRAIN_HISTORY_FILE), &history_csv(&out.history))?;
    Ok(out)
}

/// Adapts the pretrained weights to the target train file. Labels in the
/// target file, if any, are dropped before training sees it. The trace
/// carries ReID metrics when the target query/gallery file is present.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<training::AdaptOutput, HarnessError> {
    let dir = prepare(cfg)?;
    let source = read_samples(&dir.join(SOURCE_FILE))?;
    let target = read_samples(&dir.join(TARGET_TRAIN_FILE))?;
    let target_train = target.split(Split::Train).strip_labels();
    let ckpt = dir.join(cfg.get("adapt.checkpoint"));
    let mut sets = load_sets(&ckpt)?;
    let encoder = take(&mut sets, Role::SourceEncoder, &ckpt)?;
    let classifier = take(&mut sets, Role::SourceClassifier, &ckpt)?;
    let acfg = cfg.adapt_config()?;
    let arch = arch_for(cfg, source.d_in, source.m, acfg.with_classifier)?;

    let eval_path = dir.join(TARGET_EVAL_FILE);
    let evaluator = if eval_path.exists() {
        Some(ReidEvaluator::new(&read_samples(&eval_path)?, cfg.protocol()?)?)
    } else {
        None
    };
    let source_test = source.split(Split::Test);
    let mut hook = |enc: &ParamSet<f32>, cls: &ParamSet<f32>| epoch_metrics(evaluator.as_ref(), &source_test, enc, cls);
    let out = training::adapt(
        &encoder,
        &classifier,
        &source,
        &target_train,
        &arch,
        &acfg,
        Some(&mut hook),
    )?;
    save_sets(
        &[&out.encoder, &out.classifier, &out.discriminator],
        &dir.join(ADAPTED_FILE),
    )?;
    write_text(&dir.join(TRACE_FILE), &out.trace.to_csv())?;
    Ok(out)
}

fn epoch_metrics(
    evaluator: Option<&ReidEvaluator>,
    source_test: &Dataset,
    enc: &ParamSet<f32>,
    cls: &ParamSet<f32>,
) -> Result<EpochMetrics, EvalError> {
    let mut m = EpochMetrics::default();
    if let Some(ev) = evaluator {
        let r = ev.evaluate(enc)?;
        m.rank1 = Some(r.rank1());
        m.map = Some(r.map);
    }
    if !source_test.is_empty() {
        m.source_attr_accuracy = Some(attr_accuracy(cls, enc, source_test, 0.5)?.mean);
    }
    Ok(m)
}

/// Ranks the target gallery with the configured encoder and writes the
/// report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, HarnessError> {
    let dir = prepare(cfg)?;
    let eval_ds = read_samples(&dir.join(TARGET_EVAL_FILE))?;
    let ckpt = dir.join(cfg.get("eval.checkpoint"));
    let mut sets = load_sets(&ckpt)?;
    let role = cfg.eval_role()?;
    let encoder = take(&mut sets, role, &ckpt)?;
    let cls_role = if role == Role::SourceEncoder {
        Role::SourceClassifier
    } else {
        Role::AdaptClassifier
    };
    let metrics = ReidEvaluator::new(&eval_ds, cfg.protocol()?)?.evaluate(&encoder)?;
    let attr = match checkpoint::take_role(&mut sets, cls_role) {
        Some(cls) if eval_ds.all_labelled() => Some(attr_accuracy(&cls, &encoder, &eval_ds, 0.5)?),
        _ => None,
    };
    let report = EvalReport::new(&metrics, attr.as_ref(), cfg.fingerprint());
    write_text(&dir.join(REPORT_FILE), &report.to_csv())?;
    Ok(report)
}

/// Baseline and adapted retrieval on one synthetic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1 {
    pub pair: String,
    pub unadapted: (f64, f64),
    pub adapted: (f64, f64),
}

impl Table1 {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,setting,rank1,map\n");
        let _ = writeln!(
            s,
            "{},no_adaptation,{},{}",
            self.pair, self.unadapted.0, self.unadapted.1
        );
        let _ = writeln!(s, "{},adaptation,{},{}", self.pair, self.adapted.0, self.adapted.1);
        s
    }
}

/// One adaptation arm with its per-epoch trace.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub with_classifier: bool,
    pub trace: Trace,
    pub source_classifier_checksum: String,
    pub source_encoder_checksum: String,
}

impl ArmResult {
    pub fn final_source_accuracy(&self) -> Option<f64> {
        self.trace.records.last().and_then(|r| r.metrics.source_attr_accuracy)
    }

    pub fn mean_rank1(&self) -> f64 {
        let s = self.trace.rank1_series();
        s.iter().map(|(_, r)| r).sum::<f64>() / s.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Fig4 {
    pub with_classifier: ArmResult,
    pub without_classifier: ArmResult,
}

impl Fig4 {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,rank1_with_classifier,rank1_without_classifier\n");
        let a = self.with_classifier.trace.rank1_series();
        let b = self.without_classifier.trace.rank1_series();
        for ((e, r_with), (_, r_without)) in a.iter().zip(&b) {
            let _ = writeln!(s, "{e},{r_with},{r_without}");
        }
        s
    }

    /// Epoch 0 and final retrieval of the with-classifier arm.
    pub fn table1(&self) -> Option<Table1> {
        let recs = &self.with_classifier.trace.records;
        let first = &recs.first()?.metrics;
        let last = &recs.last()?.metrics;
        Some(Table1 {
            pair: PAIR_NAME.into(),
            unadapted: (first.rank1?, first.map?),
            adapted: (last.rank1?, last.map?),
        })
    }
}

const PAIR_NAME: &str = "synthetic_source->synthetic_target";

/// Shared setup for the presets: data, pretrained weights, evaluators.
struct Bench {
    pair: synthdata::DomainPair,
    encoder: ParamSet<f32>,
    classifier: ParamSet<f32>,
    evaluator: ReidEvaluator,
    source_test: Dataset,
}

impl Bench {
    fn new(cfg: &RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let spec = cfg.shift_spec()?;
        let pair = synthdata::generate_pair(&spec).map_err(|e| HarnessError::Config(e.to_string()))?;
        let arch = ArchConfig::desk(spec.d_in, spec.m, true);
        let pre = training::pretrain_source(&pair.source, &arch, &cfg.pretrain_config()?)?;
        let evaluator = ReidEvaluator::new(&pair.target_eval(), cfg.protocol()?)?;
        let source_test = pair.source.split(Split::Test);
        Ok(Self {
            pair,
            encoder: pre.encoder,
            classifier: pre.classifier,
            evaluator,
            source_test,
        })
    }

    fn arm(&self, cfg: &RunConfig, with_classifier: bool) -> Result<ArmResult, HarnessError> {
        let acfg = AdaptConfig {
            with_classifier,
            ..cfg.adapt_config()?
        };
        let arch = ArchConfig::desk(self.pair.source.d_in, self.pair.source.m, with_classifier);
        let mut hook = |enc: &ParamSet<f32>, cls: &ParamSet<f32>| {
            epoch_metrics(Some(&self.evaluator), &self.source_test, enc, cls)
        };
        let out = training::adapt(
            &self.encoder,
            &self.classifier,
            &self.pair.source,
            &self.pair.target_train(),
            &arch,
            &acfg,
            Some(&mut hook),
        )?;
        Ok(ArmResult {
            with_classifier,
            trace: out.trace,
            source_encoder_checksum: self.encoder.checksum(),
            source_classifier_checksum: self.classifier.checksum(),
        })
    }
}

/// Runs the retrieval comparison before and after adaptation.
pub fn run_table1(cfg: &RunConfig) -> Result<Table1, HarnessError> {
    let bench = Bench::new(cfg)?;
    let base = bench.evaluator.evaluate(&bench.encoder)?;
    let acfg = cfg.adapt_config()?;
    let arch = ArchConfig::desk(bench.pair.source.d_in, bench.pair.source.m, acfg.with_classifier);
    let out = training::adapt(
        &bench.encoder,
        &bench.classifier,
        &bench.pair.source,
        &bench.pair.target_train(),
        &arch,
        &acfg,
        None,
    )?;
    let adapted = bench.evaluator.evaluate(&out.encoder)?;
    Ok(Table1 {
        pair: PAIR_NAME.into(),
        unadapted: (base.rank1(), base.map),
        adapted: (adapted.rank1(), adapted.map),
    })
}

/// Runs the with- and without-classifier arms from the same pretrained
/// weights, concurrently.
pub fn run_fig4(cfg: &RunConfig) -> Result<Fig4, HarnessError> {
    let bench = Bench::new(cfg)?;
    let (with, without) = std::thread::scope(|s| {
        let h = s.spawn(|| bench.arm(cfg, false));
        let with = bench.arm(cfg, true);
        (with, h.join().expect("adaptation arm panicked"))
    });
    Ok(Fig4 {
        with_classifier: with?,
        without_classifier: without?,
    })
}

/// Runs a preset and writes `<preset>.csv` into the run directory.
pub fn cmd_experiment(preset: &str, cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    if !PRESETS.contains(&preset) {
        return Err(HarnessError::Usage(format!(
            "unknown preset `{preset}`; expected one of: {}",
            PRESETS.join(", ")
        )));
    }
    let dir = prepare(cfg)?;
    let csv = if preset == "table1" {
        run_table1(cfg)?.to_csv()
    } else {
        run_fig4(cfg)?.to_csv()
    };
    let path = dir.join(format!("{preset}.csv"));
    write_text(&path, &csv)?;
    Ok(path)
}
