//! Experiment orchestration: declarative configs, run-directory layout, and
//! the train / eval / features / probe / report commands.
//!
//! A run directory looks like
//!
//! ```text
//! <output_dir>/
//!   config.toml            resolved config snapshot
//!   config.sha256          hash of the snapshot, stamped into every artifact
//!   environment.json
//!   pretrain/backbone.safetensors   (when [pretrain] is configured)
//!   runs/<target>/rep<k>/
//!     split.json log.jsonl checkpoint.safetensors eval.json
//!     features.bin features.json probe.json
//!   reports/<mode>.csv <mode>.json table.md
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::checkpoint::{capture_state, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::data::{generate_synthetic, scan_dataset, select_target, DomainIndex, ImageDataset, SyntheticDomainSpec};
use crate::error::{DsamError, Result};
use crate::evaluation::{
    build_report, evaluate_accuracy, linear_probe, EvalReport, EvalRule, FeatureSource, ReportMetadata, ReportMode,
};
use crate::features::{extract_features, FeatureTable};
use crate::init::derive_seed;
use crate::model::{DomainId, ModuleConfig, Network, NetworkKind};
use crate::training::{split_train_val, train, DomainSplit, TrainConfig, TrainData};

pub const ROTATE_ALL: &str = "rotate-all";
const CONFIG_FILE: &str = "config.toml";
const HASH_FILE: &str = "config.sha256";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticDomainSpec),
    /// `root/<domain>/<class>/<image>` on disk.
    Directory {
        root: PathBuf,
        /// JSON index written after the first scan and reused afterwards.
        #[serde(default)]
        index_cache: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    EndToEnd,
    ProbeTheta,
    ProbeLambda,
    ProbeThetaLambda,
}

impl EvalMode {
    pub fn feature_source(self) -> Option<FeatureSource> {
        match self {
            EvalMode::EndToEnd => None,
            EvalMode::ProbeTheta => Some(FeatureSource::Theta),
            EvalMode::ProbeLambda => Some(FeatureSource::Lambda),
            EvalMode::ProbeThetaLambda => Some(FeatureSource::ThetaLambda),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            EvalMode::EndToEnd => "end_to_end",
            EvalMode::ProbeTheta => "probe_theta",
            EvalMode::ProbeLambda => "probe_lambda",
            EvalMode::ProbeThetaLambda => "probe_theta_lambda",
        }
    }
}

impl FromStr for EvalMode {
    type Err = DsamError;

    fn from_str(s: &str) -> Result<Self> {
        [
            EvalMode::EndToEnd,
            EvalMode::ProbeTheta,
            EvalMode::ProbeLambda,
            EvalMode::ProbeThetaLambda,
        ]
        .into_iter()
        .find(|m| m.key() == s.replace('-', "_"))
        .ok_or_else(|| DsamError::config("eval", format!("unknown eval mode `{s}`")))
    }
}

fn pretrain_schedule() -> TrainConfig {
    TrainConfig {
        base_lr: 0.2,
        epochs: 12,
        lr_decay_period: 4,
        ..TrainConfig::default()
    }
}

fn pretrain_domains() -> usize {
    6
}

fn pretrain_seed() -> u64 {
    1000
}

/// Supervised backbone pretraining on an auxiliary synthetic corpus, standing
/// in for ImageNet initialization when no external weights are available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "pretrain_domains")]
    pub num_domains: usize,
    /// Defaults to the experiment dataset's class count.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_samples")]
    pub samples_per_class: usize,
    /// Seed of the auxiliary corpus; keep it different from the experiment
    /// dataset's seed so the corpora share no images or styles.
    #[serde(default = "pretrain_seed")]
    pub seed: u64,
    #[serde(default = "pretrain_schedule")]
    pub train: TrainConfig,
}

fn default_samples() -> usize {
    50
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            num_domains: pretrain_domains(),
            num_classes: None,
            samples_per_class: default_samples(),
            seed: pretrain_seed(),
            train: pretrain_schedule(),
        }
    }
}

fn yes() -> bool {
    true
}

fn default_eval() -> Vec<EvalMode> {
    vec![EvalMode::EndToEnd]
}

fn default_c() -> f64 {
    1.0
}

fn default_dtype() -> String {
    "f32".into()
}

fn default_target() -> String {
    ROTATE_ALL.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub mode: NetworkKind,
    /// A domain name, or `rotate-all` for one sub-run per domain.
    #[serde(default = "default_target")]
    pub target: String,
    /// Master seed; per-repetition seeds are derived from it.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default = "default_eval")]
    pub eval: Vec<EvalMode>,
    #[serde(default = "yes")]
    pub extract_features: bool,
    /// SVM cost parameter of the feature probes.
    #[serde(default = "default_c")]
    pub probe_c: f64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub module: ModuleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
}

/// Command-line overrides; `None` keeps the config value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<NetworkKind>,
    pub target: Option<String>,
    pub seed: Option<u64>,
    pub repetitions: Option<usize>,
    pub epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub eval: Option<Vec<EvalMode>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DsamError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DsamError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths inside a config are relative to the config file
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DatasetConfig::Directory { root, index_cache } = &mut self.dataset {
            fix(root);
            if let Some(c) = index_cache {
                fix(c);
            }
        }
        match &mut self.backbone {
            BackboneConfig::Toy { weights, .. }
            | BackboneConfig::Resnet18 { weights, .. }
            | BackboneConfig::Alexnet { weights, .. } => {
                if let Some(w) = weights {
                    fix(w);
                }
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = &o.target {
            self.target = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.repetitions {
            self.train.repetitions = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.base_lr {
            self.train.base_lr = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.eval {
            self.eval = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| prefix_field("train", e))?;
        if let Some(p) = &self.pretrain {
            p.train.validate().map_err(|e| prefix_field("pretrain.train", e))?;
            if p.num_domains < 2 {
                return Err(DsamError::config("pretrain.num_domains", "needs at least 2 domains"));
            }
            if p.samples_per_class < 2 {
                return Err(DsamError::config("pretrain.samples_per_class", "needs at least 2 samples"));
            }
        }
        self.dtype()?;
        if self.eval.is_empty() {
            return Err(DsamError::config("eval", "at least one eval mode is required"));
        }
        let probes: Vec<_> = self.eval.iter().filter(|m| m.feature_source().is_some()).collect();
        if !probes.is_empty() && !self.extract_features {
            return Err(DsamError::config("eval", "probe modes need extract_features = true"));
        }
        if self.mode == NetworkKind::DeepAll
            && probes.iter().any(|m| **m != EvalMode::ProbeTheta)
        {
            return Err(DsamError::config(
                "eval",
                "deep_all has no aggregation modules; only probe_theta applies",
            ));
        }
        if !(self.probe_c > 0.0) {
            return Err(DsamError::config("probe_c", "must be positive"));
        }
        if self.target.trim().is_empty() {
            return Err(DsamError::config("target", "must name a domain or be `rotate-all`"));
        }
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            spec.validate().map_err(|e| DsamError::config("dataset", e.to_string()))?;
        }
        Ok(())
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(DsamError::config("dtype", format!("`{other}` is not f32 or f64"))),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DsamError::config("config", e.to_string()))
    }

    /// Hex SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn network_label(&self) -> &'static str {
        match self.mode {
            NetworkKind::Dsam => "D-SAM",
            NetworkKind::DeepAll => "Deep All",
        }
    }
}

fn prefix_field(prefix: &str, e: DsamError) -> DsamError {
    match e {
        DsamError::Config { field, message } => DsamError::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    }
}

/// Everything a command needs, loaded from a run directory or a config.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
    pub dataset: ImageDataset,
    pub index: DomainIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub target: String,
    pub sources: Vec<String>,
    pub repetition: usize,
    pub split_seed: u64,
    pub split: DomainSplit,
    pub target_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub target: String,
    pub repetition: usize,
    pub network: NetworkKind,
    /// Ensemble accuracy on the held-out domain, percent.
    pub target_accuracy: f64,
    /// Validation accuracy on held-out source samples, percent.
    pub source_val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunProbe {
    pub target: String,
    pub repetition: usize,
    pub c_param: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Target accuracy per feature source, percent.
    pub accuracy: BTreeMap<String, f64>,
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Environment {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub dtype: String,
    pub device: String,
}

impl Environment {
    pub fn capture(dtype: &str) -> Self {
        Environment {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: rayon::current_num_threads(),
            dtype: dtype.into(),
            device: "cpu".into(),
        }
    }
}

/// Seeds of one repetition: the split and the initialization both change
/// between repetitions; the sampler and augmentation follow `train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub split: u64,
    pub init: u64,
    pub train: u64,
}

impl RunSeeds {
    pub fn derive(master: u64, repetition: usize) -> Self {
        let rep = derive_seed(master, 100 + repetition as u64);
        RunSeeds {
            split: derive_seed(rep, 1),
            init: derive_seed(rep, 2),
            train: derive_seed(rep, 3),
        }
    }
}

pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path, target: &str, repetition: usize) -> Self {
        RunPaths {
            dir: root.join("runs").join(target).join(format!("rep{repetition}")),
        }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.safetensors")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("log.jsonl")
    }

    pub fn split(&self) -> PathBuf {
        self.dir.join("split.json")
    }

    pub fn eval(&self) -> PathBuf {
        self.dir.join("eval.json")
    }

    pub fn features(&self) -> PathBuf {
        self.dir.join("features.json")
    }

    pub fn probe(&self) -> PathBuf {
        self.dir.join("probe.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DsamError::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| DsamError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DsamError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<(ImageDataset, DomainIndex)> {
    match cfg {
        DatasetConfig::Synthetic(spec) => generate_synthetic(spec),
        DatasetConfig::Directory { root, index_cache } => {
            let index = match index_cache {
                Some(cache) if cache.exists() => DomainIndex::load_json(cache)?,
                _ => {
                    let report = scan_dataset(root)?;
                    for w in &report.warnings {
                        log::warn!("{w}");
                    }
                    for (path, err) in &report.unreadable {
                        log::warn!("unreadable {}: {err}", path.display());
                    }
                    if let Some(cache) = index_cache {
                        report.index.save_json(cache)?;
                    }
                    report.index
                }
            };
            Ok((ImageDataset::from_index(&index), index))
        }
    }
}

impl Experiment {
    /// Loads the dataset for `config`, rooted at `config.output_dir`.
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash()?;
        let (dataset, index) = load_dataset(&config.dataset)?;
        let dir = config.output_dir.clone();
        let exp = Experiment {
            config,
            hash,
            dir,
            dataset,
            index,
        };
        exp.targets()?;
        Ok(exp)
    }

    /// Reopens a run directory from its config snapshot.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        if !path.exists() {
            return Err(DsamError::config(
                "run_dir",
                format!("{} has no {CONFIG_FILE}; is it a run directory?", dir.display()),
            ));
        }
        let text = fs::read_to_string(&path).map_err(|e| DsamError::io(&path, e))?;
        let mut config = ExperimentConfig::from_toml(&text)?;
        config.output_dir = dir.to_path_buf();
        let mut exp = Self::from_config(config)?;
        // the hash always refers to the snapshot as written
        if let Ok(h) = fs::read_to_string(dir.join(HASH_FILE)) {
            exp.hash = h.trim().to_string();
        }
        Ok(exp)
    }

    pub fn targets(&self) -> Result<Vec<String>> {
        if self.config.target == ROTATE_ALL {
            Ok(self.index.domain_names())
        } else {
            Ok(vec![select_target(&self.index, &self.config.target)?.target])
        }
    }

    pub fn repetitions(&self) -> usize {
        self.config.train.repetitions
    }

    pub fn run_paths(&self, target: &str, rep: usize) -> RunPaths {
        RunPaths::new(&self.dir, target, rep)
    }

    fn device(&self) -> Device {
        Device::Cpu
    }

    /// Writes the config snapshot, its hash and the environment fingerprint.
    /// A directory that already holds a different experiment is refused.
    pub fn prepare_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| DsamError::io(&self.dir, e))?;
        let hash_path = self.dir.join(HASH_FILE);
        if let Ok(existing) = fs::read_to_string(&hash_path) {
            if existing.trim() != self.hash {
                return Err(DsamError::config(
                    "output_dir",
                    format!(
                        "{} holds a run of a different config (hash {}); pick another directory",
                        self.dir.display(),
                        existing.trim()
                    ),
                ));
            }
        }
        let snapshot = self.dir.join(CONFIG_FILE);
        fs::write(&snapshot, self.config.to_toml()?).map_err(|e| DsamError::io(&snapshot, e))?;
        fs::write(&hash_path, format!("{}\n", self.hash)).map_err(|e| DsamError::io(&hash_path, e))?;
        write_json(&self.dir.join("environment.json"), &Environment::capture(&self.config.dtype))
    }

    fn split_for(&self, target: &str, rep: usize) -> Result<SplitRecord> {
        let ts = select_target(&self.index, target)?;
        let seeds = RunSeeds::derive(self.config.seed, rep);
        let per_domain: Vec<Vec<usize>> = ts
            .sources
            .iter()
            .map(|s| Ok(self.dataset.domain_samples(self.dataset.domain_position(s)?)))
            .collect::<Result<_>>()?;
        let split = split_train_val(&per_domain, self.config.train.val_fraction, seeds.split)?;
        let target_indices = self.dataset.domain_samples(self.dataset.domain_position(target)?);
        Ok(SplitRecord {
            target: target.to_string(),
            sources: ts.sources,
            repetition: rep,
            split_seed: seeds.split,
            split,
            target_indices,
        })
    }

    fn pretrained_weights(&self) -> PathBuf {
        self.dir.join("pretrain").join("backbone.safetensors")
    }

    /// Backbone config with pretrained weights resolved.
    fn backbone(&self) -> BackboneConfig {
        let mut bb = self.config.backbone.clone();
        if self.config.pretrain.is_some() {
            let path = self.pretrained_weights();
            match &mut bb {
                BackboneConfig::Toy { weights, .. }
                | BackboneConfig::Resnet18 { weights, .. }
                | BackboneConfig::Alexnet { weights, .. } => *weights = Some(path),
            }
        }
        bb
    }
}

/// Trains a baseline network on an auxiliary synthetic corpus and writes its
/// backbone tensors (parameters and buffers) to `out`.
pub fn pretrain_backbone(
    backbone: &BackboneConfig,
    pretrain: &PretrainConfig,
    num_classes: usize,
    image_size: usize,
    dtype: DType,
    out: &Path,
) -> Result<f64> {
    let spec = SyntheticDomainSpec::new(
        pretrain.num_domains,
        pretrain.num_classes.unwrap_or(num_classes),
        pretrain.samples_per_class,
        image_size,
        pretrain.seed,
    );
    let (dataset, index) = generate_synthetic(&spec)?;
    let names = index.domain_names();
    let per_domain: Vec<Vec<usize>> = (0..names.len()).map(|d| dataset.domain_samples(d)).collect();
    let split = split_train_val(&per_domain, pretrain.train.val_fraction, derive_seed(pretrain.seed, 1))?;
    let net = Network::build(
        NetworkKind::DeepAll,
        &backbone.without_weights(),
        &ModuleConfig::default(),
        names.len(),
        spec.num_classes,
        derive_seed(pretrain.seed, 2),
        dtype,
        &Device::Cpu,
    )?;
    let data = TrainData {
        dataset: &dataset,
        sources: &names,
        split: &split,
    };
    let mut cfg = pretrain.train.clone();
    cfg.seed = derive_seed(pretrain.seed, 3);
    log::info!("pretraining backbone on {} auxiliary domains", names.len());
    let outcome = train(&net, &data, &cfg, None, None)?;
    let tensors: HashMap<String, Tensor> = capture_state(&net)?
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix("backbone.").map(|s| (s.to_string(), t)))
        .collect();
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| DsamError::io(dir, e))?;
    }
    candle_core::safetensors::save(&tensors, out)?;
    Ok(outcome.best_val_accuracy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub target: String,
    pub repetition: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// The checkpoint already existed and training was skipped.
    pub skipped: bool,
}

/// Trains every (target, repetition) sub-run that lacks a checkpoint.
pub fn cmd_train(exp: &Experiment) -> Result<Vec<TrainSummary>> {
    exp.prepare_dir()?;
    let cfg = &exp.config;
    let dtype = cfg.dtype()?;
    if let Some(pre) = &cfg.pretrain {
        let path = exp.pretrained_weights();
        if !path.exists() {
            let acc = pretrain_backbone(
                &cfg.backbone,
                pre,
                exp.dataset.num_classes(),
                cfg.backbone.input_size(),
                dtype,
                &path,
            )?;
            log::info!("pretrained backbone: auxiliary validation accuracy {acc:.2}");
        }
    }
    let backbone = exp.backbone();
    let mut out = Vec::new();
    for target in exp.targets()? {
        for rep in 0..exp.repetitions() {
            let paths = exp.run_paths(&target, rep);
            if paths.checkpoint().exists() {
                let meta = crate::checkpoint::read_meta(&paths.checkpoint())?;
                out.push(TrainSummary {
                    target: target.clone(),
                    repetition: rep,
                    best_epoch: meta.epoch.unwrap_or(0),
                    best_val_accuracy: meta.val_accuracy.unwrap_or(f64::NAN),
                    skipped: true,
                });
                continue;
            }
            log::info!("training {} target={target} rep={rep}", cfg.network_label());
            let record = exp.split_for(&target, rep)?;
            fs::create_dir_all(&paths.dir).map_err(|e| DsamError::io(&paths.dir, e))?;
            write_json(&paths.split(), &record)?;
            let seeds = RunSeeds::derive(cfg.seed, rep);
            let net = Network::build(
                cfg.mode,
                &backbone,
                &cfg.module,
                record.sources.len(),
                exp.dataset.num_classes(),
                seeds.init,
                dtype,
                &exp.device(),
            )?;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seeds.train;
            let data = TrainData {
                dataset: &exp.dataset,
                sources: &record.sources,
                split: &record.split,
            };
            let log_path = paths.log();
            let mut log_file = fs::File::create(&log_path).map_err(|e| DsamError::io(&log_path, e))?;
            let outcome = train(&net, &data, &train_cfg, Some(exp.hash.clone()), Some(&mut log_file))?;
            let mut meta = CheckpointMeta::describe(
                &net,
                &cfg.module,
                record.sources.clone(),
                exp.dataset.classes.clone(),
            );
            meta.target = Some(target.clone());
            meta.config_hash = Some(exp.hash.clone());
            meta.epoch = Some(outcome.best_epoch);
            meta.val_accuracy = Some(outcome.best_val_accuracy);
            save_checkpoint(&paths.checkpoint(), &net, &meta)?;
            out.push(TrainSummary {
                target: target.clone(),
                repetition: rep,
                best_epoch: outcome.best_epoch,
                best_val_accuracy: outcome.best_val_accuracy,
                skipped: false,
            });
        }
    }
    Ok(out)
}

fn require_checkpoint(paths: &RunPaths) -> Result<PathBuf> {
    let path = paths.checkpoint();
    if !path.exists() {
        return Err(DsamError::Checkpoint(format!(
            "missing checkpoint {}; run `train` first",
            path.display()
        )));
    }
    Ok(path)
}

/// Scores every checkpoint on its held-out domain and its source validation
/// split, writing `eval.json` per run and the end-to-end report.
pub fn cmd_eval(exp: &Experiment) -> Result<EvalReport> {
    for target in exp.targets()? {
        for rep in 0..exp.repetitions() {
            let paths = exp.run_paths(&target, rep);
            let (net, meta) = load_checkpoint(&require_checkpoint(&paths)?, &exp.device())?;
            let record: SplitRecord = read_json(&paths.split())?;
            let groups = [(DomainId::Target(0), record.target_indices.clone())];
            let target_accuracy = evaluate_accuracy(&net, &exp.dataset, &groups, EvalRule::Ensemble)?;
            let data = TrainData {
                dataset: &exp.dataset,
                sources: &record.sources,
                split: &record.split,
            };
            let source_val_accuracy = crate::training::validation_accuracy(&net, &data)?;
            log::info!("eval target={target} rep={rep}: {target_accuracy:.2}");
            write_json(
                &paths.eval(),
                &RunEval {
                    target: target.clone(),
                    repetition: rep,
                    network: net.kind(),
                    target_accuracy,
                    source_val_accuracy,
                    best_epoch: meta.epoch,
                    config_hash: exp.hash.clone(),
                },
            )?;
        }
    }
    let report = mode_report(exp, EvalMode::EndToEnd)?;
    write_report(exp, EvalMode::EndToEnd, &report)?;
    Ok(report)
}

/// Extracts unit-norm features of every source and target sample for each
/// checkpoint.
pub fn cmd_features(exp: &Experiment) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for target in exp.targets()? {
        for rep in 0..exp.repetitions() {
            let paths = exp.run_paths(&target, rep);
            let (net, _) = load_checkpoint(&require_checkpoint(&paths)?, &exp.device())?;
            let record: SplitRecord = read_json(&paths.split())?;
            let mut indices: Vec<usize> = record.split.train.iter().chain(&record.split.val).flatten().copied().collect();
            indices.extend(&record.target_indices);
            indices.sort_unstable();
            let mut table = extract_features(&net, &exp.dataset, &indices)?;
            table.config_hash = Some(exp.hash.clone());
            if !table.zero_rows.is_empty() {
                log::warn!("{} feature rows had zero activation", table.zero_rows.len());
            }
            out.push(table.write(&paths.dir, "features")?);
        }
    }
    Ok(out)
}

/// Trains a linear SVM on source-domain features and scores it on the
/// target domain, for each probe mode in the config.
pub fn cmd_probe(exp: &Experiment) -> Result<Vec<EvalReport>> {
    let modes: Vec<EvalMode> = exp.config.eval.iter().copied().filter(|m| m.feature_source().is_some()).collect();
    if modes.is_empty() {
        return Err(DsamError::config("eval", "no probe modes configured"));
    }
    for target in exp.targets()? {
        for rep in 0..exp.repetitions() {
            let paths = exp.run_paths(&target, rep);
            let sidecar = paths.features();
            if !sidecar.exists() {
                return Err(DsamError::FeatureDump(format!(
                    "missing {}; run `features` first",
                    sidecar.display()
                )));
            }
            let table = FeatureTable::read(&sidecar)?;
            let record: SplitRecord = read_json(&paths.split())?;
            let sources = record
                .sources
                .iter()
                .map(|s| table.domain_code(s))
                .collect::<Result<Vec<_>>>()?;
            let tgt = [table.domain_code(&target)?];
            let seed = derive_seed(RunSeeds::derive(exp.config.seed, rep).train, 7);
            let mut accuracy = BTreeMap::new();
            let (mut n_train, mut n_test) = (0, 0);
            for mode in &modes {
                let source = mode.feature_source().expect("probe mode");
                let train_set = table.feature_set(source, &sources)?;
                let test_set = table.feature_set(source, &tgt)?;
                n_train = train_set.len();
                n_test = test_set.len();
                let acc = linear_probe(&train_set, &test_set, exp.config.probe_c, seed)?;
                log::info!("probe {} target={target} rep={rep}: {acc:.2}", source.label());
                accuracy.insert(mode.key().to_string(), acc);
            }
            write_json(
                &paths.probe(),
                &RunProbe {
                    target: target.clone(),
                    repetition: rep,
                    c_param: exp.config.probe_c,
                    train_samples: n_train,
                    test_samples: n_test,
                    accuracy,
                    config_hash: exp.hash.clone(),
                },
            )?;
        }
    }
    modes
        .iter()
        .map(|&m| {
            let r = mode_report(exp, m)?;
            write_report(exp, m, &r)?;
            Ok(r)
        })
        .collect()
}

fn mode_title(exp: &Experiment, mode: EvalMode) -> String {
    let net = exp.config.network_label();
    match mode.feature_source() {
        None => net.to_string(),
        Some(s) => format!("{net} (feat. {})", s.label()),
    }
}

/// Collects the per-run accuracies of `mode` into a report.
pub fn mode_report(exp: &Experiment, mode: EvalMode) -> Result<EvalReport> {
    let reps = exp.repetitions();
    let mut per_target = Vec::new();
    for target in exp.targets()? {
        let mut runs = Vec::with_capacity(reps);
        for rep in 0..reps {
            let paths = exp.run_paths(&target, rep);
            let acc = match mode {
                EvalMode::EndToEnd => {
                    let path = paths.eval();
                    if !path.exists() {
                        return Err(DsamError::Checkpoint(format!(
                            "missing {}; run `eval` first",
                            path.display()
                        )));
                    }
                    read_json::<RunEval>(&path)?.target_accuracy
                }
                _ => {
                    let path = paths.probe();
                    if !path.exists() {
                        return Err(DsamError::FeatureDump(format!(
                            "missing {}; run `probe` first",
                            path.display()
                        )));
                    }
                    *read_json::<RunProbe>(&path)?
                        .accuracy
                        .get(mode.key())
                        .ok_or_else(|| DsamError::FeatureDump(format!("{} lacks {}", path.display(), mode.key())))?
                }
            };
            runs.push(acc);
        }
        per_target.push((target, runs));
    }
    let metadata = ReportMetadata {
        mode: Some(match mode {
            EvalMode::EndToEnd => ReportMode::EndToEnd,
            _ => ReportMode::FeatureProbe,
        }),
        feature_source: mode.feature_source(),
        network: Some(exp.config.network_label().into()),
        backbone: Some(exp.config.backbone.id().into()),
        repetitions: reps,
        average_std: 0.0,
        c_param: mode.feature_source().map(|_| exp.config.probe_c),
        probe_strategy: mode
            .feature_source()
            .map(|_| "one-vs-rest l2-regularized squared hinge, dual coordinate descent".into()),
        config_hash: Some(exp.hash.clone()),
    };
    build_report(&mode_title(exp, mode), &per_target, reps, metadata)
}

fn write_report(exp: &Experiment, mode: EvalMode, report: &EvalReport) -> Result<()> {
    let dir = exp.dir.join("reports");
    fs::create_dir_all(&dir).map_err(|e| DsamError::io(&dir, e))?;
    report.write(&dir, mode.key())
}

/// Rebuilds every configured report from the per-run records and renders
/// them as one table. Running it twice yields identical files.
pub fn cmd_report(exp: &Experiment) -> Result<String> {
    let mut modes = exp.config.eval.clone();
    modes.sort();
    modes.dedup();
    // probe rows first, end-to-end last
    modes.sort_by_key(|m| *m == EvalMode::EndToEnd);
    let reports = modes
        .iter()
        .map(|&m| {
            let r = mode_report(exp, m)?;
            write_report(exp, m, &r)?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = EvalReport::render_table(&reports);
    table.push_str(&format!(
        "\nrepetitions: {}  config: {}\n",
        exp.repetitions(),
        exp.hash
    ));
    let path = exp.dir.join("reports").join("table.md");
    fs::write(&path, &table).map_err(|e| DsamError::io(&path, e))?;
    Ok(table)
}

/// Train, then whichever of eval / features / probe the config asks for,
/// then the report.
pub fn cmd_run(exp: &Experiment) -> Result<String> {
    cmd_train(exp)?;
    if exp.config.eval.contains(&EvalMode::EndToEnd) {
        cmd_eval(exp)?;
    }
    if exp.config.extract_features {
        cmd_features(exp)?;
    }
    if exp.config.eval.iter().any(|m| m.feature_source().is_some()) {
        cmd_probe(exp)?;
    }
    cmd_report(exp)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"

[dataset]
kind = "synthetic"
num_domains = 3
num_classes = 2
samples_per_class = 4
image_size = 16
"#;

    #[test]
    fn minimal_config_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.target, ROTATE_ALL);
        assert_eq!(cfg.mode, NetworkKind::Dsam);
        assert_eq!(cfg.eval, vec![EvalMode::EndToEnd]);
        assert_eq!(cfg.train, TrainConfig::default());
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn field_level_errors() {
        let unknown = format!("{MINIMAL}\n[train]\nepochz = 3\n");
        assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(DsamError::Config { .. })));

        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.train.val_fraction = 1.5;
        match cfg.validate() {
            Err(DsamError::Config { field, .. }) => assert_eq!(field, "train.val_fraction"),
            other => panic!("{other:?}"),
        }

        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.eval = vec![EvalMode::ProbeTheta];
        cfg.extract_features = false;
        assert!(matches!(cfg.validate(), Err(DsamError::Config { .. })));

        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.mode = NetworkKind::DeepAll;
        cfg.eval = vec![EvalMode::ProbeLambda];
        assert!(matches!(cfg.validate(), Err(DsamError::Config { .. })));
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.apply(&Overrides {
            mode: Some(NetworkKind::DeepAll),
            target: Some("domain1".into()),
            epochs: Some(2),
            ..Default::default()
        });
        assert_eq!(cfg.mode, NetworkKind::DeepAll);
        assert_eq!(cfg.target, "domain1");
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.base_lr, 0.01);
    }

    #[test]
    fn repetition_seeds_differ() {
        let a = RunSeeds::derive(0, 0);
        let b = RunSeeds::derive(0, 1);
        assert_ne!(a.split, b.split);
        assert_ne!(a.init, b.init);
        assert_eq!(a, RunSeeds::derive(0, 0));
    }

    #[test]
    fn eval_mode_names() {
        assert_eq!("probe-theta-lambda".parse::<EvalMode>().unwrap(), EvalMode::ProbeThetaLambda);
        assert!("probe".parse::<EvalMode>().is_err());
    }

    #[test]
    fn unknown_target_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.output_dir = dir.path().to_path_buf();
        cfg.target = "nowhere".into();
        assert!(matches!(Experiment::from_config(cfg), Err(DsamError::UnknownDomain(_))));
    }
}
