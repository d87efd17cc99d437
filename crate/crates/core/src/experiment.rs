//! Experiment orchestration: config files, training loops, metrics,
//! checkpoints, evaluation and learning-curve export.
//!
//! A run directory holds:
//!
//! * `config.toml` – the fully resolved experiment config,
//! * `initial.design` – the design every episode starts from,
//! * `metrics.csv` – one row per epoch (per generation for evolution),
//! * `checkpoints/epoch_NNNNNN.ckpt` – policy, normalizer and Adam state,
//! * `final.design` – the argmax transform of the initial design,
//! * `summary.json` – final evaluation.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{run_evolution, EvoConfig, EvoError, EvoKind, EvoSetup};
use crate::design::{AttrVector, DesignError, DesignGraph, DEFAULT_MAX_JOINTS};
use crate::envs::{EnvConfig, EnvError, EnvKind};
use crate::nn::checkpoint::{read_tensors, write_tensors, NamedTensor};
use crate::nn::NetError;
use crate::policy::{ActMode, PolicyConfig, PolicyError, Transform2ActPolicy};
use crate::ppo::{ppo_update, Adam, PpoConfig, PpoError};
use crate::rollout::{collect_batch, evaluate_policy, transformed_design, EpisodeConfig, RolloutError, DEFAULT_LANES};
use crate::util::{derive_seed, hash_str, mean_std, rng_from};

/// Execution steps at `budget_scale = 1`.
pub const FULL_BUDGET: f64 = 50e6;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint version mismatch: {0}")]
    Version(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Evo(#[from] EvoError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Transform2Act,
    /// PPO on the frozen initial design.
    Ppo,
    Nge,
    Ess,
    Rgs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Transform2Act => "transform2act",
            Method::Ppo => "ppo",
            Method::Nge => "nge",
            Method::Ess => "ess",
            Method::Rgs => "rgs",
        }
    }

    fn evo_kind(self) -> Option<EvoKind> {
        match self {
            Method::Nge => Some(EvoKind::Nge),
            Method::Ess => Some(EvoKind::Ess),
            Method::Rgs => Some(EvoKind::Rgs),
            _ => None,
        }
    }
}

/// Optional overrides of the per-environment physics defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsOverrides {
    pub horizon: Option<usize>,
    pub dt: Option<f64>,
    pub substeps: Option<usize>,
    pub viscosity: Option<f64>,
    pub drag_normal: Option<f64>,
    pub drag_tangent: Option<f64>,
    pub max_children: Option<usize>,
    pub termination_height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSettings {
    pub n_skeleton: usize,
    pub n_attribute: usize,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            n_skeleton: 5,
            n_attribute: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Execution steps per PPO batch.
    pub batch_size: usize,
    /// Checkpoint cadence in epochs.
    pub checkpoint_every: usize,
    /// Collection streams per batch (fixed for reproducibility).
    pub lanes: usize,
    pub eval_episodes: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 50_000,
            checkpoint_every: 50,
            lanes: DEFAULT_LANES,
            eval_episodes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub budget_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Attribute finetuning of `design` with the skeleton stage disabled.
    #[serde(default)]
    pub finetune: bool,
    /// Initial (or expert) design file; the built-in default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<PathBuf>,
    #[serde(default)]
    pub physics: PhysicsOverrides,
    #[serde(default)]
    pub episode: EpisodeSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub evo: EvoConfig,
}

fn one() -> f64 {
    1.0
}

fn default_gamma(env: EnvKind) -> f64 {
    match env {
        EnvKind::Gap => 0.999,
        _ => PpoConfig::default().gamma,
    }
}

impl ExperimentConfig {
    pub fn new(env: EnvKind, method: Method) -> Self {
        Self {
            env,
            method,
            seed: 0,
            budget_scale: 1.0,
            output_dir: None,
            finetune: false,
            design: None,
            physics: PhysicsOverrides::default(),
            episode: EpisodeSettings::default(),
            train: TrainSettings::default(),
            policy: PolicyConfig::default(),
            ppo: PpoConfig {
                gamma: default_gamma(env),
                ..PpoConfig::default()
            },
            evo: EvoConfig::default(),
        }
    }

    /// Parse a TOML config. Unknown keys are rejected. The discount
    /// defaults per environment unless `ppo.gamma` is given.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        let has_gamma = raw
            .get("ppo")
            .and_then(|v| v.as_table())
            .is_some_and(|t| t.contains_key("gamma"));
        let mut cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if !has_gamma {
            cfg.ppo.gamma = default_gamma(cfg.env);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&read_string(path)?)?;
        // relative design paths are relative to the config file
        if let (Some(d), Some(dir)) = (&cfg.design, path.parent()) {
            if d.is_relative() {
                cfg.design = Some(dir.join(d));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if !(self.budget_scale > 0.0 && self.budget_scale.is_finite()) {
            return bad("budget_scale must be positive");
        }
        if self.total_steps() == 0 {
            return bad("budget rounds to zero execution steps");
        }
        if self.train.batch_size == 0 || self.train.lanes == 0 {
            return bad("batch_size and lanes must be positive");
        }
        if self.finetune && self.method != Method::Transform2Act {
            return bad("finetune applies to transform2act only");
        }
        if self.finetune && self.design.is_none() {
            return bad("finetune needs an expert design file");
        }
        if self.env == EnvKind::Reward3dTest {
            return bad("reward3d-test has no simulator; it only backs reward unit tests");
        }
        self.ppo.validate()?;
        self.env_config().validate()?;
        if self.method.evo_kind().is_some() {
            self.evo.validate()?;
        }
        Ok(())
    }

    /// Total execution-step budget.
    pub fn total_steps(&self) -> usize {
        (FULL_BUDGET * self.budget_scale).round() as usize
    }

    pub fn env_config(&self) -> EnvConfig {
        let mut env = EnvConfig::for_kind(self.env);
        let p = &self.physics;
        if let Some(v) = p.horizon {
            env.horizon = v;
        }
        if let Some(v) = p.dt {
            env.dt = v;
        }
        if let Some(v) = p.substeps {
            env.substeps = v;
        }
        if let Some(v) = p.viscosity {
            env.viscosity = v;
        }
        if let Some(v) = p.drag_normal {
            env.drag_normal = v;
        }
        if let Some(v) = p.drag_tangent {
            env.drag_tangent = v;
        }
        if let Some(v) = p.max_children {
            env.max_children = v;
        }
        if p.termination_height.is_some() {
            env.termination_height = p.termination_height;
        }
        env
    }

    /// Policy config with the observation width of the environment and a
    /// seed derived from the run seed.
    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            obs_dim: self.env_config().obs_dim(),
            seed: derive_seed(self.seed, &[hash_str("policy"), self.policy.seed]),
            ..self.policy.clone()
        }
    }

    pub fn initial_design(&self) -> Result<DesignGraph> {
        let env = self.env_config();
        match &self.design {
            Some(path) => {
                let d = DesignGraph::deserialize(&read_string(path)?)?;
                if d.max_children() > env.max_children {
                    return Err(ExperimentError::Config(format!(
                        "design allows {} children per joint, environment {}",
                        d.max_children(),
                        env.max_children
                    )));
                }
                Ok(d)
            }
            None => Ok(default_design(env.max_children)),
        }
    }

    pub fn episode_config(&self, design: DesignGraph) -> EpisodeConfig {
        match self.method {
            Method::Transform2Act if self.finetune => EpisodeConfig::finetune(design, self.episode.n_attribute),
            Method::Transform2Act => EpisodeConfig {
                n_skeleton: self.episode.n_skeleton,
                n_attribute: self.episode.n_attribute,
                initial_design: design,
                skeleton_stage_enabled: true,
            },
            _ => EpisodeConfig::fixed(design),
        }
    }
}

/// Default initial design: a root with two descendants in a chain, all
/// attributes at mid range.
pub fn default_design(max_children: usize) -> DesignGraph {
    DesignGraph::chain(&[AttrVector::new(0.5, 0.0, 0.0, 0.0); 3], max_children, DEFAULT_MAX_JOINTS)
}

/// Hand-built three-link swimmer: long slender links with strong motors.
pub fn swimmer_expert(max_children: usize) -> DesignGraph {
    DesignGraph::chain(&[AttrVector::new(1.0, 0.0, -0.6, 0.6); 3], max_children, DEFAULT_MAX_JOINTS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub epoch: usize,
    /// Cumulative execution steps.
    pub steps: usize,
    pub mean_return: f64,
    pub max_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub joint_count: f64,
}

pub const METRICS_HEADER: [&str; 10] = [
    "method",
    "epoch",
    "steps",
    "mean_return",
    "max_return",
    "policy_loss",
    "value_loss",
    "kl",
    "clip_frac",
    "joint_count",
];

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(ExperimentError::Plot(format!(
            "{}: unexpected columns {:?}",
            path.display(),
            header
        )));
    }
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Metrics file that is rewritten after every row, so it is always a
/// complete CSV even if the process dies.
struct MetricsLog {
    path: PathBuf,
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    fn push(&mut self, row: MetricsRow) -> Result<()> {
        log::info!(
            "{} epoch {} steps {} mean {:.3} max {:.3} kl {:.5} joints {:.2}",
            row.method,
            row.epoch,
            row.steps,
            row.mean_return,
            row.max_return,
            row.kl,
            row.joint_count
        );
        self.rows.push(row);
        write_metrics(&self.path, &self.rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub env: EnvKind,
    pub seed: u64,
    pub epochs: usize,
    pub exec_steps: usize,
    /// Mean return of deterministic (argmax) evaluation episodes. For the
    /// evolutionary methods: the best agent of the final population.
    pub eval_return: f64,
    pub final_joints: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    epoch: usize,
    steps: usize,
    adam_steps: [u64; 2],
    experiment: String,
    initial_design: String,
}

fn checkpoint_dir(run: &Path) -> PathBuf {
    run.join("checkpoints")
}

fn save_checkpoint(path: &Path, policy: &Transform2ActPolicy, adam: &Adam, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = policy.named_tensors();
    let names: Vec<String> = policy.store().iter().map(|(_, p)| p.name.clone()).collect();
    for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
        tensors.push(NamedTensor {
            name: format!("adam.m.{}", names[i]),
            value: m.clone(),
        });
        tensors.push(NamedTensor {
            name: format!("adam.v.{}", names[i]),
            value: v.clone(),
        });
    }
    let meta = serde_json::to_string(meta).expect("plain struct");
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    write_tensors(BufWriter::new(file), &meta, &tensors)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub struct LoadedCheckpoint {
    pub config: ExperimentConfig,
    pub initial_design: DesignGraph,
    pub policy: Transform2ActPolicy,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub steps: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let (meta, tensors) = read_tensors(BufReader::new(file))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta).map_err(|e| ExperimentError::Version(format!("unreadable metadata: {e}")))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(ExperimentError::Version(format!(
            "checkpoint has version {}, this build reads {}",
            meta.version, CHECKPOINT_VERSION
        )));
    }
    let config = ExperimentConfig::from_toml_str(&meta.experiment)
        .map_err(|e| ExperimentError::Version(format!("embedded config: {e}")))?;
    let initial_design = DesignGraph::deserialize(&meta.initial_design)?;
    let (adam_t, net_t): (Vec<NamedTensor>, Vec<NamedTensor>) =
        tensors.into_iter().partition(|t| t.name.starts_with("adam."));
    let mut policy = Transform2ActPolicy::new(config.policy_config());
    policy
        .load_tensors(&net_t)
        .map_err(|e| ExperimentError::Version(format!("tensors do not match the embedded config: {e}")))?;
    let mut adam = Adam {
        steps: meta.adam_steps,
        ..Adam::default()
    };
    for (i, (_, p)) in policy.store().iter().enumerate() {
        let m = adam_t.iter().find(|t| t.name == format!("adam.m.{}", p.name));
        let v = adam_t.iter().find(|t| t.name == format!("adam.v.{}", p.name));
        match (m, v) {
            (Some(m), Some(v)) if m.value.dim() == p.value.dim() && v.value.dim() == p.value.dim() => {
                adam.m.push(m.value.clone());
                adam.v.push(v.value.clone());
            }
            (None, None) if adam.m.len() == i => break,
            _ => return Err(ExperimentError::Version(format!("optimizer state for {} is malformed", p.name))),
        }
    }
    Ok(LoadedCheckpoint {
        config,
        initial_design,
        policy,
        adam,
        epoch: meta.epoch,
        steps: meta.steps,
    })
}

/// Highest-epoch checkpoint of a run directory.
pub fn latest_checkpoint(run: &Path) -> Option<PathBuf> {
    let mut ckpts: Vec<PathBuf> = fs::read_dir(checkpoint_dir(run))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    ckpts.sort();
    ckpts.pop()
}

fn prepare_run_dir(cfg: &ExperimentConfig, dir: &Path, resume: bool) -> Result<()> {
    fs::create_dir_all(checkpoint_dir(dir)).map_err(io_err(dir))?;
    let cfg_path = dir.join("config.toml");
    let text = cfg.to_toml();
    if resume && cfg_path.exists() {
        let old = ExperimentConfig::from_toml_str(&read_string(&cfg_path)?)?;
        if &old != cfg {
            return Err(ExperimentError::Version(format!(
                "{} was written by a different config",
                dir.display()
            )));
        }
    }
    write_string(&cfg_path, &text)
}

/// Run the configured method to completion in `dir`.
pub fn train(cfg: &ExperimentConfig, dir: &Path, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    prepare_run_dir(cfg, dir, resume)?;
    let design = cfg.initial_design()?;
    write_string(&dir.join("initial.design"), &design.serialize())?;
    let summary = match cfg.method.evo_kind() {
        Some(kind) => train_evolution(cfg, kind, design, dir)?,
        None => train_ppo(cfg, design, dir, resume)?,
    };
    let json = serde_json::to_string_pretty(&summary).expect("plain struct");
    write_string(&dir.join("summary.json"), &json)?;
    Ok(summary)
}

fn train_ppo(cfg: &ExperimentConfig, design: DesignGraph, dir: &Path, resume: bool) -> Result<RunSummary> {
    let env = cfg.env_config();
    let ep = cfg.episode_config(design.clone());
    let total = cfg.total_steps();
    let batch = cfg.train.batch_size.min(total);
    let epochs = total.div_ceil(batch);
    let metrics_path = dir.join("metrics.csv");

    let mut policy = Transform2ActPolicy::new(cfg.policy_config());
    let mut adam = Adam::default();
    let mut start = 0;
    let mut steps = 0;
    let mut rows = Vec::new();
    if resume {
        if let Some(path) = latest_checkpoint(dir) {
            let ck = load_checkpoint(&path)?;
            if &ck.config != cfg {
                return Err(ExperimentError::Version(format!("{} belongs to a different config", path.display())));
            }
            log::info!("resuming from {} (epoch {})", path.display(), ck.epoch);
            policy = ck.policy;
            adam = ck.adam;
            start = ck.epoch;
            steps = ck.steps;
            if metrics_path.exists() {
                rows = read_metrics(&metrics_path)?;
                rows.retain(|r| r.epoch < start);
            }
        }
    }
    let mut log = MetricsLog {
        path: metrics_path,
        rows,
    };
    if log.rows.is_empty() {
        write_metrics(&log.path, &[])?;
    }

    let stream = derive_seed(cfg.seed, &[hash_str("train")]);
    for epoch in start..epochs {
        let b = batch.min(total - steps);
        let t0 = Instant::now();
        let mem = collect_batch(&policy, &env, &ep, b, stream, epoch as u64, cfg.train.lanes)?;
        let t1 = Instant::now();
        let stats = ppo_update(&mut policy, &mut adam, &mem, &cfg.ppo, stream, epoch as u64)?;
        log::debug!(
            "epoch {epoch}: collect {:.2}s update {:.2}s",
            (t1 - t0).as_secs_f64(),
            t1.elapsed().as_secs_f64()
        );
        // after the update, so the update itself runs on the statistics the
        // batch was collected with
        if policy.config().normalize_obs {
            policy.normalizer_mut().update(mem.observations());
        }
        steps += mem.exec_steps;
        let rets = mem.episode_returns();
        let joints: Vec<f64> = mem.episodes.iter().map(|e| e.design.len() as f64).collect();
        log.push(MetricsRow {
            method: cfg.method.name().to_string(),
            epoch,
            steps,
            mean_return: rets.iter().sum::<f64>() / rets.len().max(1) as f64,
            max_return: rets.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            kl: stats.kl,
            clip_frac: stats.clip_frac,
            joint_count: joints.iter().sum::<f64>() / joints.len().max(1) as f64,
        })?;
        let done = epoch + 1;
        if done % cfg.train.checkpoint_every.max(1) == 0 || done == epochs {
            let meta = CheckpointMeta {
                version: CHECKPOINT_VERSION,
                epoch: done,
                steps,
                adam_steps: adam.steps,
                experiment: cfg.to_toml(),
                initial_design: design.serialize(),
            };
            save_checkpoint(&checkpoint_dir(dir).join(format!("epoch_{done:06}.ckpt")), &policy, &adam, &meta)?;
        }
    }

    let report = evaluate(&policy, cfg, &design, cfg.train.eval_episodes)?;
    write_string(&dir.join("final.design"), &report.design.serialize())?;
    Ok(RunSummary {
        method: cfg.method,
        env: cfg.env,
        seed: cfg.seed,
        epochs,
        exec_steps: steps,
        eval_return: report.mean_return,
        final_joints: report.design.len(),
    })
}

fn train_evolution(cfg: &ExperimentConfig, kind: EvoKind, design: DesignGraph, dir: &Path) -> Result<RunSummary> {
    let env = cfg.env_config();
    let policy = cfg.policy_config();
    let setup = EvoSetup {
        kind,
        env: &env,
        initial_design: &design,
        policy: &policy,
        ppo: &cfg.ppo,
        evo: &cfg.evo,
        batch_size: cfg.train.batch_size,
        total_steps: cfg.total_steps(),
        seed: derive_seed(cfg.seed, &[hash_str("train")]),
        lanes: cfg.train.lanes,
        eval_episodes: cfg.train.eval_episodes,
    };
    let mut log = MetricsLog {
        path: dir.join("metrics.csv"),
        rows: Vec::new(),
    };
    write_metrics(&log.path, &[])?;
    let mut io_result = Ok(());
    let result = run_evolution(&setup, |g| {
        if io_result.is_ok() {
            io_result = log.push(MetricsRow {
                method: cfg.method.name().to_string(),
                epoch: g.generation,
                steps: g.steps,
                mean_return: g.mean_return,
                max_return: g.best_so_far,
                policy_loss: g.policy_loss,
                value_loss: g.value_loss,
                kl: g.kl,
                clip_frac: g.clip_frac,
                joint_count: g.best_joints as f64,
            });
        }
    })?;
    io_result?;
    write_string(&dir.join("final.design"), &result.best_design.serialize())?;
    Ok(RunSummary {
        method: cfg.method,
        env: cfg.env,
        seed: cfg.seed,
        epochs: result.records.len(),
        exec_steps: result.exec_steps,
        eval_return: result.best_eval_return,
        final_joints: result.best_design.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    /// Argmax transform of the initial design.
    pub design: DesignGraph,
}

/// Deterministic evaluation: argmax actions in every stage. With zero
/// episodes only the design is produced.
pub fn evaluate(
    policy: &Transform2ActPolicy,
    cfg: &ExperimentConfig,
    initial: &DesignGraph,
    episodes: usize,
) -> Result<EvalReport> {
    let env = cfg.env_config();
    let ep = cfg.episode_config(initial.clone());
    let seed = derive_seed(cfg.seed, &[hash_str("eval")]);
    let design = transformed_design(policy, &ep, &mut rng_from(seed, &[0]), ActMode::Argmax)?;
    let returns: Vec<f64> = evaluate_policy(policy, &env, &ep, episodes, seed)?
        .iter()
        .map(|e| e.total_reward())
        .collect();
    let (mean_return, std_return) = if returns.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&returns) };
    Ok(EvalReport {
        returns,
        mean_return,
        std_return,
        design,
    })
}

pub fn evaluate_checkpoint(path: &Path, episodes: usize) -> Result<EvalReport> {
    let ck = load_checkpoint(path)?;
    evaluate(&ck.policy, &ck.config, &ck.initial_design, episodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub steps: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Mean ± std of `mean_return` across runs, aligned by epoch. Runs must
/// share method and epoch grid.
pub fn aggregate_runs(runs: &[PathBuf]) -> Result<Vec<CurvePoint>> {
    if runs.is_empty() {
        return Err(ExperimentError::Plot("no run directories given".into()));
    }
    let mut all = Vec::with_capacity(runs.len());
    for r in runs {
        let path = r.join("metrics.csv");
        if !path.exists() {
            return Err(ExperimentError::Plot(format!("{} has no metrics.csv", r.display())));
        }
        let rows = read_metrics(&path)?;
        if rows.is_empty() {
            return Err(ExperimentError::Plot(format!("{} is empty", path.display())));
        }
        all.push(rows);
    }
    let first = &all[0];
    for (rows, dir) in all.iter().zip(runs).skip(1) {
        let same_grid = rows.len() == first.len()
            && rows.iter().zip(first).all(|(a, b)| a.epoch == b.epoch && a.method == b.method);
        if !same_grid {
            return Err(ExperimentError::Plot(format!(
                "{} does not share method and epochs with {}",
                dir.display(),
                runs[0].display()
            )));
        }
    }
    Ok((0..first.len())
        .map(|i| {
            let vals: Vec<f64> = all.iter().map(|r| r[i].mean_return).collect();
            let steps: Vec<f64> = all.iter().map(|r| r[i].steps as f64).collect();
            let (mean, std) = mean_std(&vals);
            CurvePoint {
                epoch: first[i].epoch,
                steps: mean_std(&steps).0,
                mean,
                std,
                runs: all.len(),
            }
        })
        .collect())
}

/// Write `curve.csv` and `curve.svg` into `out`.
pub fn plot(runs: &[PathBuf], out: &Path) -> Result<Vec<CurvePoint>> {
    let curve = aggregate_runs(runs)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let csv_path = out.join("curve.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for p in &curve {
        w.serialize(p)?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    write_string(&out.join("curve.svg"), &render_svg(&curve))?;
    Ok(curve)
}

fn render_svg(curve: &[CurvePoint]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let x_max = curve.iter().map(|p| p.steps).fold(1.0, f64::max);
    let lo = curve.iter().map(|p| p.mean - p.std).fold(f64::INFINITY, f64::min);
    let hi = curve.iter().map(|p| p.mean + p.std).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let px = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);
    let upper: Vec<String> = curve
        .iter()
        .map(|p| format!("{:.2},{:.2}", px(p.steps), py(p.mean + p.std)))
        .collect();
    let lower: Vec<String> = curve
        .iter()
        .rev()
        .map(|p| format!("{:.2},{:.2}", px(p.steps), py(p.mean - p.std)))
        .collect();
    let line: Vec<String> = curve
        .iter()
        .map(|p| format!("{:.2},{:.2}", px(p.steps), py(p.mean)))
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<line x1=\"{pad}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<polygon points=\"{band}\" fill=\"steelblue\" fill-opacity=\"0.25\" stroke=\"none\"/>\n",
            "<polyline points=\"{line}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
            "<text x=\"{xm}\" y=\"{xl}\" text-anchor=\"middle\" font-size=\"12\">execution steps (max {x_max})</text>\n",
            "<text x=\"12\" y=\"{ym}\" font-size=\"12\" transform=\"rotate(-90 12 {ym})\" text-anchor=\"middle\">return [{lo:.1}, {hi:.1}]</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        yb = h - pad,
        xr = w - pad,
        band = [upper, lower].concat().join(" "),
        line = line.join(" "),
        xm = w / 2.0,
        xl = h - 15.0,
        x_max = x_max,
        ym = h / 2.0,
        lo = lo,
        hi = hi,
    )
}
