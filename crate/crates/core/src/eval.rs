//! Success-rate evaluation, intervention ratios, disruption comparisons and
//! lifelong-run reports.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Label, Source, Trajectory};
use crate::env::{self, ContinuousAction, Disruption, EnvState, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng::derive_indexed;
use crate::tokenizer::TokenizerConfig;

/// Anything that maps a state to an action without learning.
pub trait Controller {
    fn act(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<ContinuousAction>;
}

/// Greedy token decoding of a policy.
pub struct GreedyController<'a> {
    pub params: &'a PolicyParams,
    pub tokenizer: &'a TokenizerConfig,
}

impl Controller for GreedyController<'_> {
    fn act(&mut self, state: &EnvState, _spec: &TaskSpec) -> Result<ContinuousAction> {
        self.tokenizer
            .decode(&self.params.greedy_decode(&state.observation()))
    }
}

pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<ContinuousAction> {
        Ok(env::expert_action(state, spec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub episode: usize,
    pub env_seed: u64,
    pub success: bool,
    pub length: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedBreakdown {
    pub seed: u64,
    pub success_rate: f64,
    pub mean_episode_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub disruption: Disruption,
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    pub per_seed: Vec<SeedBreakdown>,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn median_seed_success(&self) -> f64 {
        median(self.per_seed.iter().map(|s| s.success_rate).collect())
    }

    /// Line-delimited per-episode log.
    pub fn episode_log(&self) -> String {
        let mut out = String::new();
        for e in &self.episodes {
            out.push_str(&serde_json::to_string(e).expect("episode record serializes"));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Environment seed of episode `episode` under evaluation seed `seed`.
pub fn eval_env_seed(seed: u64, episode: usize) -> u64 {
    derive_indexed(seed, "eval", episode as u64)
}

pub fn run_episode<C: Controller + ?Sized>(controller: &mut C, spec: &TaskSpec) -> Result<(bool, u32)> {
    let mut state = env::reset(spec);
    loop {
        let a = controller.act(&state, spec)?;
        let out = env::step(spec, &state, &a)?;
        state = out.state;
        if out.done {
            return Ok((out.success, state.t));
        }
    }
}

pub fn evaluate_controller<C: Controller + ?Sized>(
    controller: &mut C,
    spec: &TaskSpec,
    n_episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    if n_episodes == 0 || seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode and seed".into()));
    }
    let mut episodes = Vec::with_capacity(n_episodes * seeds.len());
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (mut wins, mut len) = (0usize, 0u64);
        for e in 0..n_episodes {
            let env_seed = eval_env_seed(seed, e);
            let (success, length) = run_episode(controller, &spec.with_seed(env_seed))?;
            wins += usize::from(success);
            len += u64::from(length);
            episodes.push(EpisodeRecord {
                seed,
                episode: e,
                env_seed,
                success,
                length,
            });
        }
        per_seed.push(SeedBreakdown {
            seed,
            success_rate: wins as f64 / n_episodes as f64,
            mean_episode_length: len as f64 / n_episodes as f64,
        });
    }
    let total = episodes.len() as f64;
    Ok(EvalReport {
        task: format!("insert/{}", spec.disruption),
        disruption: spec.disruption,
        n_episodes,
        seeds: seeds.to_vec(),
        success_rate: episodes.iter().filter(|e| e.success).count() as f64 / total,
        mean_episode_length: episodes.iter().map(|e| f64::from(e.length)).sum::<f64>() / total,
        per_seed,
        episodes,
    })
}

/// Greedy-decode rollouts without intervention.
pub fn evaluate(
    params: &PolicyParams,
    tokenizer: &TokenizerConfig,
    spec: &TaskSpec,
    n_episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    let mut c = GreedyController { params, tokenizer };
    evaluate_controller(&mut c, spec, n_episodes, seeds)
}

/// Fraction of interaction steps executed under intervenor control.
pub fn intervention_ratio<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for t in trajs.into_iter().filter(|t| t.source == Source::Interaction) {
        total += t.steps.len();
        hits += t.steps.iter().filter(|s| s.c == Label::Intervention).count();
    }
    if total == 0 {
        return Err(Error::NoInteractionData);
    }
    Ok(hits as f64 / total as f64)
}

/// Intervention ratio over the trajectories collected in one iteration.
pub fn iteration_intervention_ratio(trajs: &[Trajectory], iteration: u32) -> Result<f64> {
    intervention_ratio(trajs.iter().filter(|t| t.meta.iteration == iteration))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub template: TaskSpec,
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub policy: &'static str,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisruptionTable {
    pub rows: Vec<SuiteRow>,
}

impl DisruptionTable {
    pub fn success(&self, policy: &str, d: Disruption) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.report.disruption == d)
            .map(|r| r.report.success_rate)
    }

    /// tuned − base success under disruption `d`.
    pub fn delta(&self, d: Disruption) -> f64 {
        self.success("tuned", d).unwrap_or(0.0) - self.success("base", d).unwrap_or(0.0)
    }

    /// tuned − base on the nominal task.
    pub fn retention_delta(&self) -> f64 {
        self.delta(Disruption::None)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,disruption,n_episodes,success_rate,delta_vs_base\n");
        for r in &self.rows {
            let delta = if r.policy == "tuned" { self.delta(r.report.disruption) } else { 0.0 };
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4}",
                r.policy,
                r.report.disruption,
                r.report.episodes.len(),
                r.report.success_rate,
                delta
            );
        }
        s
    }
}

pub fn disruption_suite(
    base: &PolicyParams,
    tuned: &PolicyParams,
    tokenizer: &TokenizerConfig,
    suite: &SuiteConfig,
) -> Result<DisruptionTable> {
    let mut rows = Vec::with_capacity(8);
    for (name, params) in [("base", base), ("tuned", tuned)] {
        for d in Disruption::ALL {
            let spec = TaskSpec {
                disruption: d,
                ..suite.template
            };
            rows.push(SuiteRow {
                policy: name,
                report: evaluate(params, tokenizer, &spec, suite.n_episodes, &suite.seeds)?,
            });
        }
    }
    Ok(DisruptionTable { rows })
}

/// One evaluation row of a lifelong run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub success_rate: f64,
    pub median_seed_success: f64,
    /// `None` before any interaction data exists.
    pub intervention_ratio: Option<f64>,
    pub n_rollouts: usize,
    pub seed: u64,
}

pub const SUMMARY_HEADER: &str =
    "iteration,success_rate,median_seed_success,intervention_ratio,n_rollouts,seed";

/// Writes `summary.csv` and `summary.txt` under `dir`. Output depends only
/// on `records`, so re-emission is byte-identical.
pub fn emit_report(records: &[IterationRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut csv = format!("{SUMMARY_HEADER}\n");
    let mut txt = format!(
        "{:>9}  {:>12}  {:>14}  {:>18}  {:>10}  {:>6}\n",
        "iteration", "success_rate", "median_success", "intervention_ratio", "n_rollouts", "seed"
    );
    for r in records {
        let ratio = r.intervention_ratio.map(|x| format!("{x:.4}")).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{:.4},{:.4},{},{},{}",
            r.iteration, r.success_rate, r.median_seed_success, ratio, r.n_rollouts, r.seed
        );
        let _ = writeln!(
            txt,
            "{:>9}  {:>12.4}  {:>14.4}  {:>18}  {:>10}  {:>6}",
            r.iteration,
            r.success_rate,
            r.median_seed_success,
            if ratio.is_empty() { "-".to_string() } else { ratio },
            r.n_rollouts,
            r.seed
        );
    }
    let csv_path = dir.join("summary.csv");
    let txt_path = dir.join("summary.txt");
    std::fs::File::create(&csv_path)?.write_all(csv.as_bytes())?;
    std::fs::File::create(&txt_path)?.write_all(txt.as_bytes())?;
    Ok(vec![csv_path, txt_path])
}
