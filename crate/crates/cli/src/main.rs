//! `hapo`: expert collection, behavior cloning, intervention-labeled
//! deployment, preference optimization, the lifelong loop, evaluation and
//! the live bridge, all from one master seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hapo_core::bridge::{self, ServeConfig, SessionConfig};
use hapo_core::config::{read_flat, FlatConfig};
use hapo_core::data::Dataset;
use hapo_core::env::{Disruption, TaskSpec};
use hapo_core::eval::{self, DisruptionTable, IterationRecord, SuiteConfig};
use hapo_core::lifelong::{
    self, collect_expert, deployment, optimization, train_bc, DeployContext, IntervenorRegistry, LabConfig,
};
use hapo_core::manifest::RunManifest;
use hapo_core::optim::ObjectiveRegistry;
use hapo_core::policy::PolicyParams;
use hapo_core::rng::{self, stream};

#[derive(Parser, Debug)]
#[command(name = "hapo", version, about = "Human-assisted action preference optimization lab")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, env = "HAPO_SEED")]
    seed: Option<u64>,
    /// Flat `key = value` config file, or a run's manifest.json.
    #[arg(long, global = true, env = "HAPO_CONFIG")]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, env = "HAPO_OUT", default_value = "runs/default")]
    out: PathBuf,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, env = "HAPO_SET", value_delimiter = ';', value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Log verbosity.
    #[arg(long, global = true, env = "HAPO_LOG", default_value = "info")]
    log: tracing_subscriber::filter::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DeployMode {
    Scripted,
    Serve,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the scripted expert and store successful demonstrations.
    CollectExpert {
        #[arg(long, env = "HAPO_DEMOS")]
        demos: Option<usize>,
        #[arg(long, env = "HAPO_DISRUPTION")]
        disruption: Option<Disruption>,
    },
    /// Behavior cloning on an expert dataset.
    TrainBc {
        #[arg(long, env = "HAPO_DATASET")]
        dataset: Option<PathBuf>,
    },
    /// Deploy a checkpoint with an intervenor and record labeled rollouts.
    Deploy {
        #[arg(long, env = "HAPO_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        /// Existing dataset to append to.
        #[arg(long, env = "HAPO_DATASET")]
        dataset: Option<PathBuf>,
        #[arg(long, env = "HAPO_ROLLOUTS")]
        rollouts: Option<usize>,
        #[arg(long, env = "HAPO_INTERVENOR")]
        intervenor: Option<String>,
        #[arg(long, env = "HAPO_ITERATION", default_value_t = 1)]
        iteration: u32,
        #[arg(long, env = "HAPO_DISRUPTION")]
        disruption: Option<Disruption>,
        #[arg(long, env = "HAPO_MODE", value_enum, default_value = "scripted")]
        mode: DeployMode,
        #[arg(long, env = "HAPO_PORT", default_value_t = 7878)]
        port: u16,
        #[arg(long, env = "HAPO_TICK_HZ", default_value_t = 10.0)]
        tick_hz: f64,
    },
    /// Preference optimization of a checkpoint on a labeled dataset.
    Optimize {
        #[arg(long, env = "HAPO_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "HAPO_DATASET")]
        dataset: Option<PathBuf>,
        /// Frozen reference policy; defaults to the checkpoint.
        #[arg(long, env = "HAPO_REFERENCE")]
        reference: Option<PathBuf>,
        #[arg(long, env = "HAPO_OBJECTIVE")]
        objective: Option<String>,
        #[arg(long, env = "HAPO_STEPS")]
        steps: Option<usize>,
    },
    /// Warm start, then the deploy-optimize loop.
    Lifelong,
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long, env = "HAPO_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "HAPO_DISRUPTION")]
        disruption: Option<Disruption>,
        /// Compare against this checkpoint on every disruption.
        #[arg(long, env = "HAPO_BASE")]
        base: Option<PathBuf>,
        #[arg(long, env = "HAPO_EPISODES")]
        episodes: Option<usize>,
    },
    /// Summary tables from a lifelong run's metrics.
    Report {
        /// Run directory to read; defaults to --out.
        #[arg(long, env = "HAPO_RUN")]
        run: Option<PathBuf>,
    },
    /// Live session a human client can join and take over.
    Serve {
        #[arg(long, env = "HAPO_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "HAPO_TASK")]
        task: Option<Disruption>,
        #[arg(long, env = "HAPO_PORT", default_value_t = 7878)]
        port: u16,
        #[arg(long, env = "HAPO_TICK_HZ", default_value_t = 10.0)]
        tick_hz: f64,
        #[arg(long, env = "HAPO_EPISODES")]
        episodes: Option<usize>,
        #[arg(long, env = "HAPO_OUT_DATASET")]
        out_dataset: Option<PathBuf>,
        #[arg(long, env = "HAPO_ITERATION", default_value_t = 1)]
        iteration: u32,
        /// Wait for a client before the first tick.
        #[arg(long, env = "HAPO_WAIT")]
        wait: bool,
    },
}

fn need<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| anyhow!("missing required flag {flag}"))
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        bail!("missing artifact {}", path.display())
    }
}

/// Run context: resolved config and seed plus the run manifest.
struct Run {
    cfg: LabConfig,
    seed: u64,
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn open(cli: &Cli) -> Result<Run> {
        let existing_manifest = RunManifest::load(&cli.out)?;
        let mut cfg = match &existing_manifest {
            Some(m) => m.lab_config()?,
            None => LabConfig::default(),
        };
        let mut seed = existing_manifest.as_ref().map(|m| m.master_seed);
        if let Some(path) = &cli.config {
            if path.extension().is_some_and(|e| e == "json") {
                let dir = path.parent().unwrap_or(Path::new("."));
                let m = RunManifest::load(dir)?.ok_or_else(|| anyhow!("missing artifact {}", path.display()))?;
                cfg = m.lab_config()?;
                seed = Some(m.master_seed);
            } else {
                for (k, v) in read_flat(path)? {
                    cfg.set(&k, &v).with_context(|| format!("config file {}", path.display()))?;
                }
            }
        }
        for kv in &cli.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        let seed = cli.seed.or(seed).unwrap_or(0);
        let manifest = RunManifest::open_or_create(&cli.out, &cfg, seed)?;
        Ok(Run {
            cfg,
            seed,
            out: cli.out.clone(),
            manifest,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn record(&mut self, name: &str, rel: &str) {
        self.manifest.add_artifact(name, Path::new(rel));
    }

    fn finish(mut self, phase: &str) -> Result<()> {
        self.manifest.complete(phase);
        self.manifest.save(&self.out)?;
        Ok(())
    }

    fn load_params(&self, path: &Path) -> Result<PolicyParams> {
        Ok(PolicyParams::load(existing(path)?, Some(&self.cfg.policy))?)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CollectExpert { demos, disruption } => {
            let mut run = Run::open(&cli)?;
            let template = TaskSpec {
                disruption: disruption.unwrap_or(run.cfg.warm.disruption),
                ..run.cfg.task
            };
            let n = demos.unwrap_or(run.cfg.warm.n_demos);
            let ds = collect_expert(n, &template, &run.cfg.tokenizer, run.seed, run.cfg.warm.max_expert_failure)?;
            let rel = "datasets/expert.jsonl";
            ds.save(&run.path(rel))?;
            println!("collected {} expert trajectories ({} steps) -> {}", n, ds.len_steps(), run.path(rel).display());
            run.record("expert_dataset", rel);
            run.finish("collect-expert")
        }
        Command::TrainBc { ref dataset } => {
            let dataset = need(dataset.clone(), "--dataset")?;
            let mut run = Run::open(&cli)?;
            let ds = Dataset::load(existing(&dataset)?)?;
            let mut params = PolicyParams::init(rng::derive_seed(run.seed, stream::INIT), run.cfg.policy);
            let mut rng = rng::stream_rng(run.seed, "sampler/bc");
            let losses = train_bc(&mut params, &ds, &run.cfg.warm, &run.cfg.tokenizer, &mut rng)?;
            let rel = "checkpoints/bc.bin";
            params.save(&run.path(rel))?;
            println!(
                "behavior cloning: {} steps, final loss {:.4} -> {}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                run.path(rel).display()
            );
            run.record("bc_checkpoint", rel);
            run.finish("train-bc")
        }
        Command::Deploy {
            ref checkpoint,
            ref dataset,
            rollouts,
            ref intervenor,
            iteration,
            disruption,
            mode,
            port,
            tick_hz,
        } => {
            let checkpoint = need(checkpoint.clone(), "--checkpoint")?;
            let mut run = Run::open(&cli)?;
            let params = run.load_params(&checkpoint)?;
            let task = TaskSpec {
                disruption: disruption.unwrap_or(run.cfg.task.disruption),
                ..run.cfg.task
            };
            let n = rollouts.unwrap_or(run.cfg.looping.rollouts_per_iter);
            let mut ds = match dataset {
                Some(p) => Dataset::load(existing(p)?)?,
                None => Dataset::new(run.cfg.tokenizer, task),
            };
            let rel = format!("datasets/deploy_iter{iteration}.jsonl");
            match mode {
                DeployMode::Scripted => {
                    let name = intervenor.clone().unwrap_or_else(|| run.cfg.looping.intervenor.clone());
                    let mut iv = IntervenorRegistry::default().build(&name, &run.cfg.intervenor)?;
                    let ctx = DeployContext {
                        task: &task,
                        tokenizer: &run.cfg.tokenizer,
                        k: run.cfg.hapo.k,
                        master: run.seed,
                        iteration,
                    };
                    let s = deployment(&params, &mut ds, n, iv.as_mut(), &ctx)?;
                    println!(
                        "deployed {} rollouts ({} aborted, {} successes), intervention ratio {:.4}",
                        s.appended,
                        s.aborted,
                        s.successes,
                        s.intervention_steps as f64 / s.total_steps.max(1) as f64
                    );
                }
                DeployMode::Serve => {
                    let out = serve_session(&run, &params, task, port, tick_hz, n, iteration, false)?;
                    ds.extend(out.dataset.trajectories().iter().cloned());
                }
            }
            ds.save(&run.path(&rel))?;
            println!("dataset -> {}", run.path(&rel).display());
            run.record(&format!("deploy_dataset_{iteration}"), &rel);
            run.finish("deploy")
        }
        Command::Optimize {
            ref checkpoint,
            ref dataset,
            ref reference,
            ref objective,
            steps,
        } => {
            let dataset = need(dataset.clone(), "--dataset")?;
            let checkpoint = need(checkpoint.clone(), "--checkpoint")?;
            let mut run = Run::open(&cli)?;
            let ds = Dataset::load(existing(&dataset)?)?;
            let params = run.load_params(&checkpoint)?;
            let reference = match reference {
                Some(p) => run.load_params(p)?,
                None => params.clone(),
            };
            let name = objective.clone().unwrap_or_else(|| run.cfg.looping.objective.clone());
            let registry = ObjectiveRegistry::default();
            let obj = registry.get(&name)?;
            let steps = steps.unwrap_or(run.cfg.looping.grad_steps);
            let mut rng = rng::stream_rng(run.seed, "sampler/batch");
            let mut lines = String::new();
            let mut last = f64::NAN;
            let tuned = optimization(
                &params,
                &reference,
                &ds,
                obj,
                &run.cfg.hapo,
                &run.cfg.tokenizer,
                steps,
                &mut rng,
                &mut |step, report| {
                    last = report.loss;
                    lines.push_str(&report.metrics_record(step, obj.name()).to_string());
                    lines.push('\n');
                },
            )?;
            let rel = "checkpoints/optimized.bin";
            tuned.save(&run.path(rel))?;
            write_file(&run.path("optimize_metrics.jsonl"), &lines)?;
            println!("{name}: {steps} steps, final loss {last:.5} -> {}", run.path(rel).display());
            run.record("optimized_checkpoint", rel);
            run.record("optimize_metrics", "optimize_metrics.jsonl");
            run.finish("optimize")
        }
        Command::Lifelong => {
            let mut run = Run::open(&cli)?;
            let records = lifelong::lifelong(&run.cfg, run.seed, &run.out)?;
            print_records(&records);
            for r in &records {
                let i = r.iteration;
                run.record(&format!("checkpoint_{i}"), &format!("checkpoints/policy_iter{i}.bin"));
                run.record(&format!("dataset_{i}"), &format!("datasets/dataset_iter{i}.jsonl"));
                run.record(&format!("episodes_{i}"), &format!("episodes/eval_iter{i}.jsonl"));
            }
            run.record("metrics", "metrics.jsonl");
            run.record("opt_metrics", "opt_metrics.jsonl");
            run.record("progress", "progress.json");
            run.finish("lifelong")
        }
        Command::Eval {
            ref checkpoint,
            disruption,
            ref base,
            episodes,
        } => {
            let checkpoint = need(checkpoint.clone(), "--checkpoint")?;
            let mut run = Run::open(&cli)?;
            let params = run.load_params(&checkpoint)?;
            let n = episodes.unwrap_or(run.cfg.looping.eval_episodes);
            let seeds = run.cfg.looping.eval_seeds.clone();
            match base {
                Some(b) => {
                    let base = run.load_params(b)?;
                    let suite = SuiteConfig {
                        template: run.cfg.task,
                        n_episodes: n,
                        seeds,
                    };
                    let table: DisruptionTable = eval::disruption_suite(&base, &params, &run.cfg.tokenizer, &suite)?;
                    let csv = table.to_csv();
                    write_file(&run.path("eval/suite.csv"), &csv)?;
                    print!("{csv}");
                    println!("retention delta {:+.4}", table.retention_delta());
                    run.record("eval_suite", "eval/suite.csv");
                }
                None => {
                    let spec = TaskSpec {
                        disruption: disruption.unwrap_or(run.cfg.task.disruption),
                        ..run.cfg.task
                    };
                    let report = eval::evaluate(&params, &run.cfg.tokenizer, &spec, n, &seeds)?;
                    let name = format!("eval/{}", spec.disruption);
                    let mut csv = String::from("seed,success_rate,mean_episode_length\n");
                    for s in &report.per_seed {
                        csv.push_str(&format!("{},{:.4},{:.2}\n", s.seed, s.success_rate, s.mean_episode_length));
                    }
                    write_file(&run.path(&format!("{name}.csv")), &csv)?;
                    write_file(&run.path(&format!("{name}_episodes.jsonl")), &report.episode_log())?;
                    println!(
                        "{}: success {:.4} over {} episodes (median per seed {:.4})",
                        report.task,
                        report.success_rate,
                        report.episodes.len(),
                        report.median_seed_success()
                    );
                    run.record(&format!("eval_{}", spec.disruption), &format!("{name}.csv"));
                    run.record(&format!("eval_{}_episodes", spec.disruption), &format!("{name}_episodes.jsonl"));
                }
            }
            run.finish("eval")
        }
        Command::Report { ref run } => {
            let dir = run.clone().unwrap_or_else(|| cli.out.clone());
            let metrics = dir.join("metrics.jsonl");
            let text = std::fs::read_to_string(existing(&metrics)?)?;
            let records: Vec<IterationRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .with_context(|| format!("parsing {}", metrics.display()))?;
            let files = eval::emit_report(&records, &dir.join("report"))?;
            print_records(&records);
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Serve {
            ref checkpoint,
            task,
            port,
            tick_hz,
            episodes,
            ref out_dataset,
            iteration,
            wait,
        } => {
            let checkpoint = need(checkpoint.clone(), "--checkpoint")?;
            let mut run = Run::open(&cli)?;
            let params = run.load_params(&checkpoint)?;
            let spec = TaskSpec {
                disruption: task.unwrap_or(run.cfg.task.disruption),
                ..run.cfg.task
            };
            let n = episodes.unwrap_or(run.cfg.looping.rollouts_per_iter);
            let out = serve_session(&run, &params, spec, port, tick_hz, n, iteration, wait)?;
            let rel = format!("datasets/serve_iter{iteration}.jsonl");
            let path = out_dataset.clone().unwrap_or_else(|| run.path(&rel));
            out.dataset.save(&path)?;
            let journal_rel = format!("journals/serve_iter{iteration}.jsonl");
            let mut journal = String::new();
            for e in &out.journal {
                journal.push_str(&serde_json::to_string(e)?);
                journal.push('\n');
            }
            write_file(&run.path(&journal_rel), &journal)?;
            println!(
                "served {} episodes over {} ticks; dataset -> {}",
                out.dataset.trajectories().len(),
                out.ticks,
                path.display()
            );
            if out_dataset.is_none() {
                run.record(&format!("serve_dataset_{iteration}"), &rel);
            }
            run.record(&format!("serve_journal_{iteration}"), &journal_rel);
            run.finish("serve")
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn serve_session(
    run: &Run,
    params: &PolicyParams,
    task: TaskSpec,
    port: u16,
    tick_hz: f64,
    episodes: usize,
    iteration: u32,
    wait_for_client: bool,
) -> Result<bridge::ServeOutcome> {
    let listener = bridge::bind(port)?;
    let addr = listener.local_addr()?;
    eprintln!("listening on {addr}");
    let cfg = ServeConfig {
        session: SessionConfig {
            id: run.manifest.run_id.clone(),
            task,
            tokenizer: run.cfg.tokenizer,
            k: run.cfg.hapo.k,
            master: run.seed,
            iteration,
            episodes,
            tick_hz,
        },
        wait_for_client,
    };
    Ok(bridge::serve(params, &cfg, listener)?)
}

fn print_records(records: &[IterationRecord]) {
    println!("iteration  success  median  intervention_ratio");
    for r in records {
        let ratio = r.intervention_ratio.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!("{:>9}  {:.4}  {:.4}  {ratio}", r.iteration, r.success_rate, r.median_seed_success);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(cli.log)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
