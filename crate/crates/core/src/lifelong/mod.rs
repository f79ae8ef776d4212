//! The deploy-optimize loop: expert warm start, intervention-labeled
//! deployment, preference optimization against a re-frozen reference, and
//! per-iteration evaluation with resumable artifacts.

pub mod intervenor;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

pub use intervenor::{
    ExpertIntervenor, Intervenor, IntervenorConfig, IntervenorRegistry, NullIntervenor,
    ScheduleIntervenor, ThresholdIntervenor, TraceEntry,
};

use crate::config::{parse_value, FlatConfig};
use crate::data::{relabel_interventions, Dataset, EpisodeMeta, Label, Source, Step, Trajectory};
use crate::env::{self, Disruption, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{self, IterationRecord};
use crate::optim::{adam_step, AdamState, HapoConfig, LossReport, Objective, ObjectiveContext, ObjectiveRegistry};
use crate::policy::{PolicyDims, PolicyParams};
use crate::rng::{self, derive_indexed, indexed_rng, stream, LabRng};
use crate::tokenizer::TokenizerConfig;

/// Which stored trajectories feed each optimization phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixture {
    /// Everything collected so far, expert demonstrations included.
    Cumulative,
    /// The first `expert` demonstrations plus the latest `interaction` rollouts.
    Recent { expert: usize, interaction: usize },
}

impl Mixture {
    pub fn select(&self, ds: &Dataset) -> Dataset {
        match *self {
            Mixture::Cumulative => ds.clone(),
            Mixture::Recent {
                expert,
                interaction,
            } => ds.mixture(Some(expert), Some(interaction)),
        }
    }
}

impl std::fmt::Display for Mixture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mixture::Cumulative => f.write_str("cumulative"),
            Mixture::Recent {
                expert,
                interaction,
            } => write!(f, "recent:{expert}:{interaction}"),
        }
    }
}

impl std::str::FromStr for Mixture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cumulative" {
            return Ok(Mixture::Cumulative);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["recent", e, i] => Ok(Mixture::Recent {
                expert: parse_value("mixture", e)?,
                interaction: parse_value("mixture", i)?,
            }),
            _ => Err(Error::Config(format!(
                "mixture must be `cumulative` or `recent:<expert>:<interaction>`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartConfig {
    pub n_demos: usize,
    /// Task the demonstrations are collected on.
    pub disruption: Disruption,
    pub bc_max_steps: usize,
    pub bc_batch: usize,
    pub bc_lr: f64,
    /// Stop once the smoothed loss has not improved for this many steps.
    pub plateau_patience: usize,
    pub max_expert_failure: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            n_demos: 50,
            disruption: Disruption::None,
            bc_max_steps: 4000,
            bc_batch: 64,
            bc_lr: 3e-3,
            plateau_patience: 400,
            max_expert_failure: 0.05,
        }
    }
}

impl FlatConfig for WarmStartConfig {
    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("n_demos".into(), self.n_demos.to_string()),
            ("disruption".into(), self.disruption.to_string()),
            ("bc_max_steps".into(), self.bc_max_steps.to_string()),
            ("bc_batch".into(), self.bc_batch.to_string()),
            ("bc_lr".into(), self.bc_lr.to_string()),
            ("plateau_patience".into(), self.plateau_patience.to_string()),
            ("max_expert_failure".into(), self.max_expert_failure.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_demos" => self.n_demos = parse_value(key, value)?,
            "disruption" => self.disruption = value.parse()?,
            "bc_max_steps" => self.bc_max_steps = parse_value(key, value)?,
            "bc_batch" => self.bc_batch = parse_value(key, value)?,
            "bc_lr" => self.bc_lr = parse_value(key, value)?,
            "plateau_patience" => self.plateau_patience = parse_value(key, value)?,
            "max_expert_failure" => self.max_expert_failure = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown warm key `{key}`"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    /// Outer deploy-optimize iterations after the warm start.
    pub iterations: u32,
    pub rollouts_per_iter: usize,
    pub grad_steps: usize,
    pub eval_episodes: usize,
    pub eval_seeds: Vec<u64>,
    pub objective: String,
    pub intervenor: String,
    pub mixture: Mixture,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            rollouts_per_iter: 20,
            grad_steps: 1500,
            eval_episodes: 100,
            eval_seeds: vec![101, 202, 303],
            objective: "hapo".into(),
            intervenor: "threshold".into(),
            mixture: Mixture::Cumulative,
        }
    }
}

impl FlatConfig for LoopConfig {
    fn to_pairs(&self) -> Vec<(String, String)> {
        let seeds: Vec<String> = self.eval_seeds.iter().map(u64::to_string).collect();
        vec![
            ("X".into(), self.iterations.to_string()),
            ("rollouts_per_iter".into(), self.rollouts_per_iter.to_string()),
            ("grad_steps".into(), self.grad_steps.to_string()),
            ("eval_episodes".into(), self.eval_episodes.to_string()),
            ("eval_seeds".into(), seeds.join(",")),
            ("objective".into(), self.objective.clone()),
            ("intervenor".into(), self.intervenor.clone()),
            ("mixture".into(), self.mixture.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "X" | "iterations" => self.iterations = parse_value(key, value)?,
            "rollouts_per_iter" => self.rollouts_per_iter = parse_value(key, value)?,
            "grad_steps" => self.grad_steps = parse_value(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_value(key, value)?,
            "eval_seeds" => {
                self.eval_seeds = value
                    .split(',')
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_>>()?
            }
            "objective" => self.objective = value.to_string(),
            "intervenor" => self.intervenor = value.to_string(),
            "mixture" => self.mixture = value.parse()?,
            _ => return Err(Error::Config(format!("unknown loop key `{key}`"))),
        }
        Ok(())
    }
}

/// Complete configuration of a run, flattened as `section.key = value`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabConfig {
    /// Deployment and evaluation task.
    pub task: TaskSpec,
    pub tokenizer: TokenizerConfig,
    pub policy: PolicyDims,
    pub hapo: HapoConfig,
    pub warm: WarmStartConfig,
    pub looping: LoopConfig,
    pub intervenor: IntervenorConfig,
}

impl FlatConfig for LabConfig {
    fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut add = |prefix: &str, pairs: Vec<(String, String)>| {
            out.extend(pairs.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)));
        };
        add("env", self.task.to_pairs());
        add("tokenizer", self.tokenizer.to_pairs());
        add("policy", self.policy.to_pairs());
        add("hapo", self.hapo.to_pairs());
        add("warm", self.warm.to_pairs());
        add("loop", self.looping.to_pairs());
        let i = &self.intervenor;
        add(
            "intervenor",
            vec![
                ("deviation_threshold".into(), i.deviation_threshold.to_string()),
                ("deviation_steps".into(), i.deviation_steps.to_string()),
                ("stall_steps".into(), i.stall_steps.to_string()),
                ("hold_steps".into(), i.hold_steps.to_string()),
            ],
        );
        out
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, k) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("config key `{key}` needs a section prefix")))?;
        match section {
            "env" => self.task.set(k, value),
            "tokenizer" => self.tokenizer.set(k, value),
            "policy" => self.policy.set(k, value),
            "hapo" => self.hapo.set(k, value),
            "warm" => self.warm.set(k, value),
            "loop" => self.looping.set(k, value),
            "intervenor" => {
                let i = &mut self.intervenor;
                match k {
                    "deviation_threshold" => i.deviation_threshold = parse_value(key, value)?,
                    "deviation_steps" => i.deviation_steps = parse_value(key, value)?,
                    "stall_steps" => i.stall_steps = parse_value(key, value)?,
                    "hold_steps" => i.hold_steps = parse_value(key, value)?,
                    _ => return Err(Error::Config(format!("unknown intervenor key `{k}`"))),
                }
                Ok(())
            }
            _ => Err(Error::Config(format!("unknown config section `{section}`"))),
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.hapo.validate()?;
        if self.policy.bins != self.tokenizer.bins as usize || self.policy.dims != self.tokenizer.dims {
            return Err(Error::Config("policy bins/dims must match the tokenizer".into()));
        }
        if self.looping.rollouts_per_iter == 0 || self.looping.eval_episodes == 0 {
            return Err(Error::Config("loop counts must be positive".into()));
        }
        Ok(())
    }
}

/// Rolls out the scripted expert; returns `None` if it failed.
pub fn expert_trajectory(spec: &TaskSpec, tokenizer: &TokenizerConfig, rollout_id: u64) -> Result<Option<Trajectory>> {
    let mut state = env::reset(spec);
    let mut steps = Vec::new();
    loop {
        let a = env::expert_action(&state, spec).clamped();
        steps.push(Step {
            o: state.observation().to_vec(),
            a,
            tokens: tokenizer.encode(&a)?,
            c: Label::Acceptable,
            t: state.t,
        });
        let out = env::step(spec, &state, &a)?;
        state = out.state;
        if out.done {
            return Ok(out.success.then_some(Trajectory {
                steps,
                source: Source::Expert,
                success: true,
                meta: EpisodeMeta {
                    spec: *spec,
                    rollout_id,
                    iteration: 0,
                },
            }));
        }
    }
}

/// Environment seed of expert demonstration `i`.
pub fn demo_env_seed(master: u64, i: usize) -> u64 {
    derive_indexed(master, "env/expert", i as u64)
}

/// Environment seed of interaction rollout `rollout_id`.
pub fn rollout_env_seed(master: u64, rollout_id: u64) -> u64 {
    derive_indexed(master, stream::ENV, rollout_id)
}

/// Policy-action sampler of interaction rollout `rollout_id`.
pub fn rollout_rng(master: u64, rollout_id: u64) -> LabRng {
    indexed_rng(master, "sampler/rollout", rollout_id)
}

/// Collects `n` successful expert demonstrations, aborting if the expert
/// fails on more than `max_failure` of its attempts.
pub fn collect_expert(
    n: usize,
    template: &TaskSpec,
    tokenizer: &TokenizerConfig,
    master: u64,
    max_failure: f64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::NoExpertData);
    }
    let mut ds = Dataset::new(*tokenizer, *template);
    let (mut attempts, mut failures) = (0usize, 0usize);
    while ds.trajectories().len() < n {
        let spec = template.with_seed(demo_env_seed(master, attempts));
        match expert_trajectory(&spec, tokenizer, attempts as u64)? {
            Some(t) => ds.push(t),
            None => failures += 1,
        }
        attempts += 1;
        let rate = failures as f64 / attempts as f64;
        if attempts >= 20 && rate > max_failure {
            return Err(Error::ExpertFailureRate {
                rate,
                limit: max_failure,
            });
        }
    }
    let rate = failures as f64 / attempts as f64;
    if rate > max_failure {
        return Err(Error::ExpertFailureRate {
            rate,
            limit: max_failure,
        });
    }
    Ok(ds)
}

/// Behavior cloning on the expert class until the smoothed loss plateaus or
/// `max_steps` is reached. Returns the per-step losses.
pub fn train_bc(
    params: &mut PolicyParams,
    ds: &Dataset,
    cfg: &WarmStartConfig,
    tokenizer: &TokenizerConfig,
    rng: &mut LabRng,
) -> Result<Vec<f64>> {
    let registry = ObjectiveRegistry::default();
    let bc = registry.get("bc")?;
    let hcfg = HapoConfig {
        batch: cfg.bc_batch,
        ..HapoConfig::default()
    };
    let mut adam = AdamState::for_params(params);
    let mut losses = Vec::with_capacity(cfg.bc_max_steps);
    let mut ema: Option<f64> = None;
    let (mut best, mut since_best) = (f64::INFINITY, 0usize);
    for _ in 0..cfg.bc_max_steps {
        let reference = params.clone();
        let ctx = ObjectiveContext {
            params,
            reference: &reference,
            cfg: &hcfg,
            tokenizer,
        };
        let batch = bc.draw_batch(ds, &ctx, rng)?;
        let (report, grad) = bc.loss_and_grad(&ctx, &batch)?;
        adam_step(params, &grad, &mut adam, cfg.bc_lr)?;
        losses.push(report.loss);
        let e = ema.map_or(report.loss, |e| 0.98 * e + 0.02 * report.loss);
        ema = Some(e);
        if e < best - 1e-3 {
            best = e;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.plateau_patience {
                break;
            }
        }
    }
    Ok(losses)
}

/// Warm-start phase: expert demonstrations, then behavior cloning.
/// The returned dataset doubles as the initial interaction dataset.
pub fn warm_start(cfg: &LabConfig, master: u64) -> Result<(PolicyParams, Dataset)> {
    let template = TaskSpec {
        disruption: cfg.warm.disruption,
        ..cfg.task
    };
    let ds = collect_expert(
        cfg.warm.n_demos,
        &template,
        &cfg.tokenizer,
        master,
        cfg.warm.max_expert_failure,
    )?;
    let mut params = PolicyParams::init(rng::derive_seed(master, stream::INIT), cfg.policy);
    let mut rng = rng::stream_rng(master, "sampler/bc");
    let losses = train_bc(&mut params, &ds, &cfg.warm, &cfg.tokenizer, &mut rng)?;
    info!(
        steps = losses.len(),
        final_loss = losses.last().copied().unwrap_or(f64::NAN),
        "warm start finished"
    );
    Ok((params, ds))
}

/// Shared per-rollout settings.
#[derive(Debug, Clone, Copy)]
pub struct DeployContext<'a> {
    pub task: &'a TaskSpec,
    pub tokenizer: &'a TokenizerConfig,
    pub k: usize,
    pub master: u64,
    pub iteration: u32,
}

/// One interaction rollout. Intervenor-controlled steps get `c=2`, policy
/// steps `c=1`, and the K steps before each takeover become `c=0`.
/// Returns `None` when the intervenor became unavailable mid-episode.
pub fn run_rollout(
    params: &PolicyParams,
    intervenor: &mut dyn Intervenor,
    ctx: &DeployContext<'_>,
    rollout_id: u64,
) -> Result<Option<Trajectory>> {
    let spec = ctx.task.with_seed(rollout_env_seed(ctx.master, rollout_id));
    let mut rng = rollout_rng(ctx.master, rollout_id);
    intervenor.reset(&spec);
    let mut state = env::reset(&spec);
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut steps = Vec::new();
    let mut in_control = false;
    let success = loop {
        if in_control {
            if intervenor.should_release(&state, &trace, &spec) {
                in_control = false;
            }
        } else if intervenor.wants_control(&state, &trace, &spec) {
            in_control = true;
        }
        let obs = state.observation();
        let (a, tokens, c) = if in_control {
            let a = match intervenor.corrective_action(&state, &spec) {
                Ok(a) => a.clamped(),
                Err(Error::IntervenorUnavailable) => {
                    warn!(rollout_id, "intervenor unavailable; episode aborted");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            (a, ctx.tokenizer.encode(&a)?, Label::Intervention)
        } else {
            let tokens = params.sample(&obs, &mut rng);
            (ctx.tokenizer.decode(&tokens)?, tokens, Label::Acceptable)
        };
        steps.push(Step {
            o: obs.to_vec(),
            a,
            tokens,
            c,
            t: state.t,
        });
        trace.push(TraceEntry {
            state,
            action: a,
            by_intervenor: in_control,
        });
        let out = env::step(&spec, &state, &a)?;
        state = out.state;
        if out.done {
            break out.success;
        }
    };
    let traj = Trajectory {
        steps,
        source: Source::Interaction,
        success,
        meta: EpisodeMeta {
            spec,
            rollout_id,
            iteration: ctx.iteration,
        },
    };
    relabel_interventions(&traj, ctx.k).map(Some)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeploymentSummary {
    pub appended: usize,
    pub aborted: usize,
    pub successes: usize,
    pub intervention_steps: usize,
    pub total_steps: usize,
}

/// Runs `n` rollouts and appends the completed ones to `ds`.
pub fn deployment(
    params: &PolicyParams,
    ds: &mut Dataset,
    n: usize,
    intervenor: &mut dyn Intervenor,
    ctx: &DeployContext<'_>,
) -> Result<DeploymentSummary> {
    let mut summary = DeploymentSummary::default();
    for r in 0..n {
        let rollout_id = u64::from(ctx.iteration) * 1_000_000 + r as u64;
        match run_rollout(params, intervenor, ctx, rollout_id)? {
            Some(t) => {
                summary.appended += 1;
                summary.successes += usize::from(t.success);
                summary.total_steps += t.steps.len();
                summary.intervention_steps +=
                    t.steps.iter().filter(|s| s.c == Label::Intervention).count();
                ds.push(t);
            }
            None => summary.aborted += 1,
        }
    }
    Ok(summary)
}

/// Optimization phase: `steps` rounds of draw → loss/gradient → Adam, with
/// `reference` frozen throughout. `on_step` receives each step's report.
#[allow(clippy::too_many_arguments)]
pub fn optimization(
    params: &PolicyParams,
    reference: &PolicyParams,
    ds: &Dataset,
    objective: &dyn Objective,
    cfg: &HapoConfig,
    tokenizer: &TokenizerConfig,
    steps: usize,
    rng: &mut LabRng,
    on_step: &mut dyn FnMut(usize, &LossReport),
) -> Result<PolicyParams> {
    let mut current = params.clone();
    let mut adam = AdamState::for_params(&current);
    for step in 0..steps {
        let ctx = ObjectiveContext {
            params: &current,
            reference,
            cfg,
            tokenizer,
        };
        let batch = objective.draw_batch(ds, &ctx, rng)?;
        let (report, grad) = objective.loss_and_grad(&ctx, &batch)?;
        adam_step(&mut current, &grad, &mut adam, cfg.lr_at(step, steps))?;
        on_step(step, &report);
    }
    Ok(current)
}

/// Files written by a lifelong run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn checkpoint(&self, i: u32) -> PathBuf {
        self.root.join("checkpoints").join(format!("policy_iter{i}.bin"))
    }

    pub fn dataset(&self, i: u32) -> PathBuf {
        self.root.join("datasets").join(format!("dataset_iter{i}.jsonl"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn opt_metrics(&self) -> PathBuf {
        self.root.join("opt_metrics.jsonl")
    }

    pub fn progress(&self) -> PathBuf {
        self.root.join("progress.json")
    }

    pub fn episodes(&self, i: u32) -> PathBuf {
        self.root.join("episodes").join(format!("eval_iter{i}.jsonl"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    seed: u64,
    completed: u32,
    mixture: String,
    records: Vec<IterationRecord>,
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    serde_json::to_writer(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn evaluate_iteration(
    cfg: &LabConfig,
    params: &PolicyParams,
    iteration: u32,
    ratio: Option<f64>,
    n_rollouts: usize,
    master: u64,
    paths: &RunPaths,
) -> Result<IterationRecord> {
    let report = eval::evaluate(
        params,
        &cfg.tokenizer,
        &cfg.task,
        cfg.looping.eval_episodes,
        &cfg.looping.eval_seeds,
    )?;
    std::fs::create_dir_all(paths.episodes(iteration).parent().expect("has parent"))?;
    std::fs::write(paths.episodes(iteration), report.episode_log())?;
    Ok(IterationRecord {
        iteration,
        success_rate: report.success_rate,
        median_seed_success: report.median_seed_success(),
        intervention_ratio: ratio,
        n_rollouts,
        seed: master,
    })
}

/// Re-writes `metrics.jsonl` from `records` so a resumed run ends with the
/// same file as an uninterrupted one.
fn write_metrics(paths: &RunPaths, records: &[IterationRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(paths.metrics(), text)?;
    Ok(())
}

/// Drops optimizer records of iterations after `completed`, left behind by an
/// interrupted run.
fn truncate_opt_metrics(paths: &RunPaths, completed: u32) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(paths.opt_metrics()) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(_) => continue,
        };
        if v["iteration"].as_u64().is_some_and(|i| i <= u64::from(completed)) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(paths.opt_metrics(), kept)?;
    Ok(())
}

/// Warm start (or resume), then `cfg.looping.iterations` deploy-optimize
/// iterations. Each iteration re-freezes the reference to the current
/// policy, deploys it, optimizes, evaluates and persists checkpoint, dataset
/// snapshot and metrics.
pub fn lifelong(cfg: &LabConfig, master: u64, out: &Path) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    let paths = RunPaths::new(out);
    std::fs::create_dir_all(out)?;
    let objectives = ObjectiveRegistry::default();
    let objective = objectives.get(&cfg.looping.objective)?;
    let intervenors = IntervenorRegistry::default();
    let mut intervenor = intervenors.build(&cfg.looping.intervenor, &cfg.intervenor)?;

    let resumed: Option<Progress> = std::fs::read_to_string(paths.progress())
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .filter(|p: &Progress| p.seed == master);

    let (mut params, mut ds, mut records, start) = match resumed {
        Some(p) => {
            info!(completed = p.completed, "resuming lifelong run");
            let params = PolicyParams::load(&paths.checkpoint(p.completed), Some(&cfg.policy))?;
            let ds = Dataset::load(&paths.dataset(p.completed))?;
            let mut records = p.records;
            records.truncate(p.completed as usize + 1);
            truncate_opt_metrics(&paths, p.completed)?;
            (params, ds, records, p.completed + 1)
        }
        None => {
            let (params, mut ds) = warm_start(cfg, master)?;
            ds.env = cfg.task;
            params.save(&paths.checkpoint(0))?;
            ds.save(&paths.dataset(0))?;
            let rec = evaluate_iteration(cfg, &params, 0, None, 0, master, &paths)?;
            (params, ds, vec![rec], 1)
        }
    };
    let save_progress = |completed: u32, records: &[IterationRecord]| -> Result<()> {
        write_metrics(&paths, records)?;
        let p = Progress {
            seed: master,
            completed,
            mixture: cfg.looping.mixture.to_string(),
            records: records.to_vec(),
        };
        std::fs::write(paths.progress(), serde_json::to_string_pretty(&p)?)?;
        Ok(())
    };
    save_progress(start - 1, &records)?;

    for i in start..=cfg.looping.iterations {
        let reference = params.clone();
        let ctx = DeployContext {
            task: &cfg.task,
            tokenizer: &cfg.tokenizer,
            k: cfg.hapo.k,
            master,
            iteration: i,
        };
        let summary = deployment(&params, &mut ds, cfg.looping.rollouts_per_iter, intervenor.as_mut(), &ctx)?;
        let ratio = eval::iteration_intervention_ratio(ds.trajectories(), i).ok();
        info!(iteration = i, ?summary, "deployment finished");
        let train = cfg.looping.mixture.select(&ds);
        let mut rng = indexed_rng(master, "sampler/batch", u64::from(i));
        let metrics_path = paths.opt_metrics();
        let mut sink_err = None;
        let objective_name = objective.name();
        params = optimization(
            &params,
            &reference,
            &train,
            objective,
            &cfg.hapo,
            &cfg.tokenizer,
            cfg.looping.grad_steps,
            &mut rng,
            &mut |step, report| {
                let mut rec = report.metrics_record(step, objective_name);
                rec["iteration"] = serde_json::json!(i);
                if let Err(e) = append_line(&metrics_path, &rec) {
                    sink_err.get_or_insert(e);
                }
            },
        )?;
        if let Some(e) = sink_err {
            return Err(e);
        }
        params.save(&paths.checkpoint(i))?;
        ds.save(&paths.dataset(i))?;
        let rec = evaluate_iteration(cfg, &params, i, ratio, summary.appended, master, &paths)?;
        info!(iteration = i, success = rec.success_rate, "iteration evaluated");
        records.push(rec);
        save_progress(i, &records)?;
    }
    Ok(records)
}
