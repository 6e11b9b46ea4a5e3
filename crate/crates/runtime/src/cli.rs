use std::error::Error;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gui_agent::action::Action;
use gui_agent::datalab::{
    augment_multipath, count_correct, evaluate_group, filter_by_difficulty, read_jsonl, score_response, split_trajectory,
    write_jsonl, DatasetHeader, RewardConfig, DEFAULT_KEEP_ZERO_FRACTION, DIFFICULTY_RUNS,
};
use gui_agent::events::RunEvent;
use gui_agent::evolve::{
    apply_patch, expand_queries, export_finetune_file, gate_trajectory, group_edits, read_records, rollout,
    write_records, Diversity, QueryPool, QueueEntry, Route, StepEdit,
};
use gui_agent::executor::{Origin, RunContext, Trajectory};
use gui_agent::gateway::{Backend, FailingBackend};
use gui_agent::knowledge::{read_dir_docs, KnowledgeStore};
use gui_agent::orchestration::PlanRun;
use gui_agent::persona::{extract_intention_flows, personalize, PersonaStore};
use gui_agent::sim::{replay, Environment, Scenario};

use crate::bench::{run_bench, BenchSuite};
use crate::catalog::Catalog;
use crate::config::RuntimeConfig;
use crate::session::SessionManager;

type CliResult = Result<(), Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(name = "gui-agent", version, about = "Drive GUI tasks against simulated apps, prepare training data, and serve sessions")]
pub struct Cli {
    /// Service configuration file (TOML). GUI_AGENT_* variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario file, or a scenario name from the configured directory.
    #[arg(long)]
    pub scenario: String,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run one instruction on a scenario task.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the task's own instruction.
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long)]
        script: Option<PathBuf>,
        /// Answers handed out in order when the agent asks. With none left the run is cancelled.
        #[arg(long = "answer")]
        answers: Vec<String>,
        /// Print every run event as a JSON line.
        #[arg(long)]
        events: bool,
        /// Write the trajectories as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a task suite and print a success table.
    Bench {
        suite: PathBuf,
        /// Overrides the suite's script.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Replay an action list and print the log hash.
    SimReplay {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON lines, one action each.
        #[arg(long)]
        actions: PathBuf,
        /// Write the trajectory log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Split trajectories (JSON lines) into step samples.
    DatagenSplit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add equally valid alternate actions to samples.
    DatagenAugment {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Script for the multipath judge; without one only the scenario's table is used.
        #[arg(long)]
        judge_script: Option<PathBuf>,
    },
    /// Drop samples the policy always solves and thin out the never-solved ones.
    DatagenFilter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_KEEP_ZERO_FRACTION)]
        keep_zero: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Policy script used to count correct answers for samples that lack a count.
        #[arg(long)]
        policy_script: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Score raw replies (JSON string per line) against samples, in order.
    Score {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value_t = gui_agent::datalab::DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Group advantages and objective for groups given as JSON lines.
    GrpoEval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
    },
    /// Grow a query pool with variations of its seed queries.
    EvolveExpand {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 2)]
        per_seed: usize,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Run every pooled query several times.
    EvolveRollout {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        vary_start: bool,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge trajectories; sound ones go to the finetune set, the rest to the correction queue.
    EvolveGate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        finetune: PathBuf,
        #[arg(long)]
        queue: PathBuf,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Apply step edits to queued trajectories and re-gate the results.
    EvolveCorrect {
        #[arg(long)]
        queue: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        /// Corrected trajectories that pass the gate are appended here.
        #[arg(long)]
        finetune: PathBuf,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Turn finetune-set trajectories into a step-sample dataset.
    EvolveExport {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a user's SOPs and preference profile from their history.
    PersonaBuild {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Rewrite a query with a user's SOPs and preferences.
    PersonaApply {
        #[arg(long)]
        user: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Add documents from a directory to a knowledge directory.
    KbImport {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        into: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn load_config(path: Option<&Path>) -> Result<RuntimeConfig, Box<dyn Error>> {
    let mut cfg = match path {
        Some(p) => RuntimeConfig::load(p)?,
        None => RuntimeConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

fn load_scenario(cfg: &RuntimeConfig, arg: &ScenarioArgs) -> Result<Arc<Scenario>, Box<dyn Error>> {
    let p = Path::new(&arg.scenario);
    if p.is_file() {
        return Ok(Arc::new(Scenario::load_path(p)?));
    }
    let catalog = Catalog::load_dir(&cfg.scenarios_dir)?;
    catalog.get(&arg.scenario).cloned().ok_or_else(|| format!("unknown scenario {:?}", arg.scenario).into())
}

/// The configured backend, or rule-only judging when none is configured.
fn judge(cfg: &RuntimeConfig, script: Option<&Path>) -> Arc<dyn Backend> {
    cfg.backend(script).unwrap_or_else(|_| Arc::new(FailingBackend))
}

fn read(path: &Path) -> Result<String, Box<dyn Error>> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()).into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupInput {
    rewards: Vec<f64>,
    #[serde(default)]
    ratios: Option<Vec<f64>>,
    #[serde(default)]
    ref_ratios: Option<Vec<f64>>,
}

pub fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("GUI_AGENT_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

pub fn execute(cli: Cli) -> CliResult {
    let cfg = load_config(cli.config.as_deref())?;
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Cmd::Run { scenario, task, seed, instruction, script, answers, events, out } => {
            let sc = load_scenario(&cfg, &scenario)?;
            let def = sc.task(&task).ok_or_else(|| format!("unknown task {task:?}"))?;
            let instruction = instruction.unwrap_or_else(|| def.instruction.clone());
            let gw = cfg.backend(script.as_deref())?;
            let kb = match &cfg.knowledge_dir {
                Some(d) => KnowledgeStore::load_dir(d)?,
                None => KnowledgeStore::new(),
            };
            let mut env = Environment::new(Arc::clone(&sc));
            env.reset(&task, seed)?;
            let ctx = RunContext::new(gw.as_ref(), &cfg.executor).with_knowledge(&kb);
            let origin = Origin { scenario: sc.name.clone(), task_id: task.clone(), seed, start: None };
            let mut plan = PlanRun::new(instruction, "run", cfg.plan).with_origin(origin);
            let mut lines = Vec::new();
            let mut sink = |e: RunEvent| {
                if events {
                    lines.push(serde_json::to_string(&e).expect("events serialize"));
                }
            };
            let mut queue = answers.into_iter();
            let outcome = plan.run_to_end(&mut env, &ctx, &mut sink, &mut |_| queue.next())?;
            for l in lines {
                writeln!(stdout, "{l}")?;
            }
            if let Some(p) = out {
                write(&p, &write_records(&plan.trajectories()))?;
            }
            let steps: usize = plan.trajectories().iter().map(|t| t.steps.len()).sum();
            writeln!(stdout, "outcome: {:?} {} ({steps} steps)", outcome.status, outcome.reason)?;
        }
        Cmd::Bench { suite, script, json } => {
            let mut suite = BenchSuite::load(&suite)?;
            if script.is_some() {
                suite.script = script;
            }
            let sc = Arc::new(Scenario::load_path(&suite.scenario)?);
            let script = suite.script.clone();
            let make = || cfg.backend(script.as_deref()).map_err(|e| e.to_string());
            let report = run_bench(&suite, &sc, &cfg.executor, None, &make)?;
            if json {
                writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                write!(stdout, "{}", report.table())?;
            }
        }
        Cmd::SimReplay { scenario, task, seed, actions, log } => {
            let sc = load_scenario(&cfg, &scenario)?;
            let actions: Vec<Action> = read_records(&read(&actions)?)?;
            let mut env = Environment::new(sc);
            let trace = replay(&mut env, &task, seed, &actions)?;
            if let Some(p) = log {
                write(&p, &trace.to_jsonl())?;
            }
            writeln!(stdout, "{}", trace.hash())?;
        }
        Cmd::DatagenSplit { input, out } => {
            let trajs: Vec<Trajectory> = read_records(&read(&input)?)?;
            let mut samples = Vec::new();
            for t in &trajs {
                samples.extend(split_trajectory(t)?);
            }
            write(&out, &write_jsonl(&DatasetHeader::new("split"), &samples))?;
            writeln!(stdout, "{} samples from {} trajectories", samples.len(), trajs.len())?;
        }
        Cmd::DatagenAugment { scenario, input, out, judge_script } => {
            let sc = load_scenario(&cfg, &scenario)?;
            let (header, samples) = read_jsonl(&read(&input)?)?;
            let judge = judge_script.map(|p| cfg.backend(Some(&p))).transpose()?;
            let mut added = 0;
            let mut augmented = Vec::with_capacity(samples.len());
            for s in &samples {
                let j = augment_multipath(s, &sc, judge.as_deref());
                if let Some(w) = j.warning {
                    tracing::warn!("{w}");
                }
                added += j.value.alternates.len() - s.alternates.len();
                augmented.push(j.value);
            }
            write(&out, &write_jsonl(&header, &augmented))?;
            writeln!(stdout, "{added} alternates added to {} samples", augmented.len())?;
        }
        Cmd::DatagenFilter { input, out, keep_zero, seed, policy_script, temperature } => {
            let (header, mut samples) = read_jsonl(&read(&input)?)?;
            if let Some(p) = policy_script {
                let policy = cfg.backend(Some(&p))?;
                for s in samples.iter_mut().filter(|s| s.difficulty_count.is_none()) {
                    s.difficulty_count = Some(count_correct(s, policy.as_ref(), DIFFICULTY_RUNS, temperature));
                }
            }
            let kept = filter_by_difficulty(&samples, keep_zero, seed)?;
            write(&out, &write_jsonl(&header, &kept))?;
            writeln!(stdout, "kept {} of {} samples", kept.len(), samples.len())?;
        }
        Cmd::Score { samples, responses, alpha } => {
            let (_, samples) = read_jsonl(&read(&samples)?)?;
            let replies: Vec<String> = read_records(&read(&responses)?)?;
            if replies.len() != samples.len() {
                return Err(format!("{} replies for {} samples", replies.len(), samples.len()).into());
            }
            let rc = RewardConfig { alpha, ..RewardConfig::default() };
            let scores: Vec<_> = samples.iter().zip(&replies).map(|(s, r)| score_response(r, s, &rc)).collect();
            write!(stdout, "{}", write_records(&scores))?;
        }
        Cmd::GrpoEval { input, epsilon, beta } => {
            let groups: Vec<GroupInput> = read_records(&read(&input)?)?;
            let mut evals = Vec::with_capacity(groups.len());
            for g in &groups {
                evals.push(evaluate_group(&g.rewards, g.ratios.as_deref(), g.ref_ratios.as_deref(), epsilon, beta)?);
            }
            write!(stdout, "{}", write_records(&evals))?;
        }
        Cmd::EvolveExpand { pool, per_seed, script } => {
            let mut qp = QueryPool::from_jsonl(&read(&pool)?)?;
            let gw = cfg.backend(script.as_deref())?;
            let report = expand_queries(&mut qp, per_seed, gw.as_ref())?;
            for w in &report.warnings {
                tracing::warn!("{w}");
            }
            write(&pool, &qp.to_jsonl())?;
            writeln!(stdout, "{} queries added, pool has {}", report.added.len(), qp.len())?;
        }
        Cmd::EvolveRollout { scenario, pool, repeats, vary_start, temperature, seed, script, out } => {
            let sc = load_scenario(&cfg, &scenario)?;
            let qp = QueryPool::from_jsonl(&read(&pool)?)?;
            let diversity = Diversity { vary_start, temperature };
            let mut trajs = Vec::new();
            let mut failed = 0;
            for q in qp.records() {
                // A fresh backend per query keeps scripted replies independent of pool order.
                let gw = cfg.backend(script.as_deref())?;
                for r in rollout(q, &sc, repeats, gw.as_ref(), diversity, &cfg.executor, seed)? {
                    if let Some(e) = &r.error {
                        tracing::warn!(query = %q.id, repeat = r.repeat, "{e}");
                        failed += 1;
                    }
                    trajs.extend(r.trajectory);
                }
            }
            write(&out, &write_records(&trajs))?;
            writeln!(stdout, "{} trajectories, {failed} runs ended in an error", trajs.len())?;
        }
        Cmd::EvolveGate { input, finetune, queue, script } => {
            let trajs: Vec<Trajectory> = read_records(&read(&input)?)?;
            let gw = judge(&cfg, script.as_deref());
            let (mut accepted, mut queued) = (Vec::new(), Vec::new());
            for t in trajs {
                let g = gate_trajectory(&t, gw.as_ref());
                for w in &g.warnings {
                    tracing::warn!(trajectory = %t.id, "{w}");
                }
                match g.routed_to {
                    Route::FinetuneSet => accepted.push(t),
                    Route::CorrectionQueue => queued.push(QueueEntry { trajectory: t, gate: g }),
                }
            }
            gui_agent::evolve::append_records(&finetune, &accepted)?;
            gui_agent::evolve::append_records(&queue, &queued)?;
            writeln!(stdout, "{} accepted, {} queued for correction", accepted.len(), queued.len())?;
        }
        Cmd::EvolveCorrect { queue, patch, finetune, script } => {
            let entries: Vec<QueueEntry> = read_records(&read(&queue)?)?;
            let edits = group_edits(read_records::<StepEdit>(&read(&patch)?)?);
            let gw = judge(&cfg, script.as_deref());
            let mut catalog: Option<Catalog> = None;
            let (mut fixed, mut still_bad) = (Vec::new(), 0);
            for (id, list) in &edits {
                let entry = entries
                    .iter()
                    .find(|e| &e.trajectory.id == id)
                    .ok_or_else(|| format!("patch names {id:?}, which is not in the queue"))?;
                let origin = entry.trajectory.origin.as_ref().ok_or_else(|| format!("{id} has no origin"))?;
                if catalog.is_none() {
                    catalog = Some(Catalog::load_dir(&cfg.scenarios_dir)?);
                }
                let sc = catalog
                    .as_ref()
                    .and_then(|c| c.get(&origin.scenario))
                    .ok_or_else(|| format!("unknown scenario {:?}", origin.scenario))?;
                let corrected = apply_patch(&entry.trajectory, list, sc)?;
                let g = gate_trajectory(&corrected, gw.as_ref());
                if g.routed_to == Route::FinetuneSet {
                    fixed.push(corrected);
                } else {
                    still_bad += 1;
                }
            }
            gui_agent::evolve::append_records(&finetune, &fixed)?;
            writeln!(stdout, "{} corrected and accepted, {still_bad} still rejected", fixed.len())?;
        }
        Cmd::EvolveExport { input, out } => {
            let trajs: Vec<Trajectory> = read_records(&read(&input)?)?;
            let n = export_finetune_file(&trajs, &out)?;
            writeln!(stdout, "{n} samples exported")?;
        }
        Cmd::PersonaBuild { history, user, store, script } => {
            let trajs: Vec<Trajectory> = read_records(&read(&history)?)?;
            let gw = judge(&cfg, script.as_deref());
            let flows = extract_intention_flows(&trajs, &user, gw.as_ref());
            for w in &flows.warnings {
                tracing::warn!("{w}");
            }
            PersonaStore::new(store).save(&flows)?;
            writeln!(stdout, "{} SOPs, {} preferences", flows.sops.len(), flows.profile.preferences.len())?;
        }
        Cmd::PersonaApply { user, store, query, script } => {
            let (sops, profile) = PersonaStore::new(store).load(&user)?;
            let gw = judge(&cfg, script.as_deref());
            let (pq, warnings) = personalize(&query, &sops, &profile, gw.as_ref());
            for w in &warnings {
                tracing::warn!("{w}");
            }
            writeln!(stdout, "{}", serde_json::to_string_pretty(&pq)?)?;
        }
        Cmd::KbImport { from, into } => {
            let docs = read_dir_docs(&from)?;
            let kb = if into.is_dir() { KnowledgeStore::load_dir(&into)? } else { KnowledgeStore::new() };
            let n = kb.ingest(docs)?;
            kb.save_dir(&into)?;
            writeln!(stdout, "{n} documents imported, {} in store", kb.len())?;
        }
        Cmd::Serve { addr } => {
            let catalog = Catalog::load_dir(&cfg.scenarios_dir)?;
            let kb = match &cfg.knowledge_dir {
                Some(d) if d.is_dir() => KnowledgeStore::load_dir(d)?,
                _ => KnowledgeStore::new(),
            };
            let manager = Arc::new(SessionManager::open(cfg, catalog, Arc::new(kb), None)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::api::serve(manager, addr))?;
        }
    }
    Ok(())
}
