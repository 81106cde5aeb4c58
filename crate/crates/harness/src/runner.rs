//! The subcommands, as library functions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bfm_core::bfm::{pretrain, BfmModel};
use bfm_core::envs::{make_task_suite, SuiteTask, TaskKind, TaskSuite};
use bfm_core::features::make_features;
use bfm_core::lola::run_lola;
use bfm_core::mdp::TabularMdp;
use bfm_core::model_io::{load_model, save_model, write_atomic};
use bfm_core::rela::{run_rela, run_td3z_scratch};
use bfm_core::report::{AdaptationReport, EvalRecord};
use bfm_core::zeroshot::{evaluate_policy_rollouts, infer};
use log::{debug, info};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_q_learning, QInit};
use crate::config::{Algorithm, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::format::num;

pub const RUN_CSV_HEADER: &str = "env_steps,episode,mean_return,stderr,improvement_pct,cosine_to_zr";
pub const ABLATION_CSV_HEADER: &str = "variant,task,seed,env_steps,return,improvement_pct,cosine";
pub const EVAL_CSV_HEADER: &str =
    "task,on_span,degenerate,optimal_return,zero_shot_return,rollout_mean,rollout_stderr,fraction_of_optimal";
pub const IMPROVEMENT_DEFINITION: &str =
    "improvement_pct = 100 * (R - R_zs) / max(|R_zs|, 0.01 * |R_opt|); R = discounted return from d0";

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub jobs: usize,
    pub seed_offset: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, seed_offset: 0 }
    }
}

/// Environment, model and tasks shared by every run of an experiment.
pub struct Context {
    pub config: ExperimentConfig,
    pub mdp: TabularMdp,
    pub model: BfmModel,
    pub suite: TaskSuite,
}

impl Context {
    /// Builds the task suite against an already loaded model.
    pub fn new(config: ExperimentConfig, model: BfmModel) -> Result<Self> {
        let mdp = config.build_mdp()?;
        if model.n_states() != mdp.n_states() || model.n_actions() != mdp.n_actions() {
            return Err(HarnessError::File(format!(
                "model has {}x{} states x actions but the environment has {}x{}",
                model.n_states(),
                model.n_actions(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        if model.discount() != mdp.discount() {
            return Err(HarnessError::File(format!(
                "model discount {} differs from config gamma {}",
                model.discount(),
                mdp.discount()
            )));
        }
        let suite = make_task_suite(
            &mdp,
            model.features(),
            model.rho(),
            &config.tasks,
            Some(model.codebook()),
            config.horizon,
            config.eval_episodes,
        )
        .map_err(HarnessError::setup)?;
        Ok(Self { config, mdp, model, suite })
    }

    pub fn load(config: ExperimentConfig, out: &Path) -> Result<Self> {
        let path = config.model_path(out);
        if !path.exists() {
            return Err(HarnessError::File(format!("model file {} not found; run pretrain first", path.display())));
        }
        let model = load_model(&path).map_err(HarnessError::file)?;
        Self::new(config, model)
    }

    pub fn seeds(&self, offset: u64) -> Vec<u64> {
        self.config.seeds.iter().map(|s| s + offset).collect()
    }
}

pub fn build_model(config: &ExperimentConfig) -> Result<BfmModel> {
    let mdp = config.build_mdp()?;
    let features = make_features(&mdp, &config.features).map_err(HarnessError::setup)?;
    let rho = config.build_rho(&mdp)?;
    let b = &config.bfm;
    pretrain(&mdp, &features, &rho, b.codebook_size, b.codebook_seed, b.temperatures).map_err(HarnessError::setup)
}

/// Returns the model path and a one-line consistency report.
pub fn cmd_pretrain(config: &ExperimentConfig, out: &Path) -> Result<(PathBuf, String)> {
    let started = Instant::now();
    let model = build_model(config)?;
    model.check_consistency().map_err(|e| HarnessError::Invariant(e.to_string()))?;
    let path = config.model_path(out);
    save_model(&model, &path).map_err(HarnessError::file)?;
    let report = format!(
        "pretrain consistency OK: {} skills, d = {}, {} states x {} actions, gamma = {} ({:.2}s)",
        model.codebook().len(),
        model.dim(),
        model.n_states(),
        model.n_actions(),
        model.discount(),
        started.elapsed().as_secs_f64()
    );
    info!("model written to {}", path.display());
    Ok((path, report))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub task: String,
    pub kind: TaskKind,
    pub on_span: bool,
    pub degenerate: bool,
    pub z_r: Vec<f64>,
    pub policy_latent: Vec<f64>,
    pub zero_shot_return: f64,
    pub optimal_return: f64,
}

pub fn infer_all(ctx: &Context) -> Result<Vec<InferenceRecord>> {
    ctx.suite
        .tasks
        .iter()
        .map(|t| {
            let inf = infer(&ctx.model, &t.task, ctx.config.rela.ridge).map_err(HarnessError::run)?;
            let zs = bfm_core::mdp::exact_return(&ctx.mdp, &ctx.model.at(&inf.policy_latent).table(), &t.task.reward)
                .map_err(HarnessError::run)?;
            Ok(InferenceRecord {
                task: t.task.name.clone(),
                kind: t.kind.clone(),
                on_span: t.on_span,
                degenerate: inf.degenerate,
                z_r: inf.z_r.iter().copied().collect(),
                policy_latent: inf.policy_latent.iter().copied().collect(),
                zero_shot_return: zs,
                optimal_return: t.optimal_value,
            })
        })
        .collect()
}

pub fn cmd_infer(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let ctx = Context::load(config.clone(), out)?;
    let records = infer_all(&ctx)?;
    let path = out.join("inference.json");
    write_json(&path, &records)?;
    Ok(path)
}

pub fn cmd_eval(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let ctx = Context::load(config.clone(), out)?;
    let records = infer_all(&ctx)?;
    let seed = ctx.config.seeds[0];
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    for (rec, t) in records.iter().zip(&ctx.suite.tasks) {
        let policy = ctx.model.at(&DVector::from_column_slice(&rec.policy_latent)).table();
        let stats = evaluate_policy_rollouts(&ctx.mdp, &policy, &t.task, t.task.eval_episodes.max(1), seed)
            .map_err(HarnessError::run)?;
        let frac = if rec.optimal_return != 0.0 { rec.zero_shot_return / rec.optimal_return } else { f64::NAN };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            rec.task,
            rec.on_span,
            rec.degenerate,
            num(rec.optimal_return),
            num(rec.zero_shot_return),
            num(stats.mean_discounted),
            num(stats.stderr_discounted),
            num(frac)
        );
    }
    let path = out.join("eval.csv");
    write_atomic(&path, csv.as_bytes()).map_err(HarnessError::file)?;
    Ok(path)
}

/// One cell of the ablation grid, or the single algorithm of `adapt`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Lola { no_i: bool, no_r: bool },
    Rela { no_i: bool, no_r: bool },
    RelaWarmStart,
    Td3zScratch,
    QLearning(QInit),
}

pub const WARM_START_STEPS: usize = 500;

impl Variant {
    pub fn slug(self) -> &'static str {
        match self {
            Self::Lola { no_i: false, no_r: false } => "lola",
            Self::Lola { no_i: true, no_r: false } => "lola_no_i",
            Self::Lola { no_i: false, no_r: true } => "lola_no_r",
            Self::Lola { no_i: true, no_r: true } => "lola_no_i_no_r",
            Self::Rela { no_i: false, no_r: false } => "rela",
            Self::Rela { no_i: true, no_r: false } => "rela_no_i",
            Self::Rela { no_i: false, no_r: true } => "rela_no_r",
            Self::Rela { no_i: true, no_r: true } => "rela_no_i_no_r",
            Self::RelaWarmStart => "rela_warm_start",
            Self::Td3zScratch => "td3z_scratch",
            Self::QLearning(QInit::ZeroShotGreedy) => "q_learning_zero_shot",
            Self::QLearning(QInit::Random) => "q_learning_random",
        }
    }

    pub fn for_algorithm(algorithm: Algorithm, config: &ExperimentConfig) -> Self {
        match algorithm {
            Algorithm::Rela => Self::Rela { no_i: !config.rela.zero_shot_init, no_r: !config.rela.residual },
            Algorithm::Lola => Self::Lola { no_i: !config.lola.zero_shot_init, no_r: !config.lola.bootstrap },
            Algorithm::Td3zScratch => Self::Td3zScratch,
            Algorithm::QLearningActionSpace => Self::QLearning(config.q_learning.init),
        }
    }
}

pub const ABLATION_GRID: [Variant; 12] = [
    Variant::Lola { no_i: false, no_r: false },
    Variant::Lola { no_i: true, no_r: false },
    Variant::Lola { no_i: false, no_r: true },
    Variant::Lola { no_i: true, no_r: true },
    Variant::Rela { no_i: false, no_r: false },
    Variant::Rela { no_i: true, no_r: false },
    Variant::Rela { no_i: false, no_r: true },
    Variant::Rela { no_i: true, no_r: true },
    Variant::RelaWarmStart,
    Variant::Td3zScratch,
    Variant::QLearning(QInit::ZeroShotGreedy),
    Variant::QLearning(QInit::Random),
];

/// Runs one variant on one task with one seed.
pub fn run_variant(ctx: &Context, variant: Variant, task: &SuiteTask, seed: u64) -> Result<AdaptationReport> {
    let (mdp, model, cfg) = (&ctx.mdp, &ctx.model, &ctx.config);
    let t = &task.task;
    let report = match variant {
        Variant::Lola { no_i, no_r } => {
            let mut c = cfg.lola.clone();
            c.zero_shot_init = !no_i;
            c.bootstrap = !no_r;
            run_lola(mdp, model, t, &c, seed)
        }
        Variant::Rela { no_i, no_r } => {
            let mut c = cfg.rela.clone();
            c.zero_shot_init = !no_i;
            c.residual = !no_r;
            run_rela(mdp, model, t, &c, seed)
        }
        Variant::RelaWarmStart => {
            let mut c = cfg.rela.clone();
            c.warm_start_steps = WARM_START_STEPS;
            run_rela(mdp, model, t, &c, seed)
        }
        Variant::Td3zScratch => run_td3z_scratch(mdp, model, t, &t.reward, &cfg.rela, seed),
        Variant::QLearning(init) => {
            let mut c = cfg.q_learning.clone();
            c.init = init;
            baseline_q_learning(mdp, model, t, &c, seed)
        }
    };
    let mut report = report.map_err(HarnessError::run)?;
    report.algorithm = variant.slug().into();
    check_report(&report)?;
    debug!("{} {} seed {}: final {:.4}", variant.slug(), t.name, seed, report.final_return());
    Ok(report)
}

fn check_report(report: &AdaptationReport) -> Result<()> {
    if report.records.is_empty() {
        return Err(HarnessError::Invariant(format!("{} produced no evaluation records", report.algorithm)));
    }
    if report.records.windows(2).any(|w| w[1].env_steps < w[0].env_steps) {
        return Err(HarnessError::Invariant(format!("{} reported decreasing env_steps", report.algorithm)));
    }
    if report.records.iter().any(|r| !r.mean_return.is_finite()) {
        return Err(HarnessError::Invariant(format!("{} reported a non-finite return", report.algorithm)));
    }
    Ok(())
}

/// Runs `jobs` in a pool of `width` threads, preserving input order.
fn run_jobs<J, T, F>(width: usize, jobs: &[J], f: F) -> Result<Vec<T>>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(width.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(&f).collect())
}

pub fn run_csv(report: &AdaptationReport) -> String {
    let mut out = format!("{RUN_CSV_HEADER}\n");
    for r in &report.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.env_steps,
            r.episode,
            num(r.mean_return),
            num(r.stderr),
            num(r.improvement_pct),
            num(r.cosine_to_zr)
        );
    }
    out
}

pub fn run_csv_path(out: &Path, algorithm: &str, task: &str, seed: u64) -> PathBuf {
    out.join("runs").join(algorithm).join(task).join(format!("seed_{seed}.csv"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub episode: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub stderr_return: f64,
    pub mean_improvement_pct: f64,
    pub stderr_improvement_pct: f64,
    /// `None` when the algorithm has no latent.
    pub mean_cosine_to_zr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub on_span: bool,
    pub degenerate_inference: bool,
    pub optimal_return: f64,
    pub zero_shot_return: f64,
    pub seeds: Vec<u64>,
    pub points: Vec<PointSummary>,
}

impl TaskSummary {
    pub fn final_point(&self) -> &PointSummary {
        self.points.last().expect("summaries have at least one point")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub improvement_definition: String,
    pub tasks: Vec<TaskSummary>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates the seeds of one task point by point.
pub fn summarize_task(task: &SuiteTask, reports: &[AdaptationReport]) -> Result<TaskSummary> {
    let first = reports.first().ok_or_else(|| HarnessError::Invariant("no runs to summarize".into()))?;
    let schedule: Vec<(usize, u64)> = first.records.iter().map(|r| (r.episode, r.env_steps)).collect();
    for r in reports {
        let s: Vec<(usize, u64)> = r.records.iter().map(|r| (r.episode, r.env_steps)).collect();
        if s != schedule {
            return Err(HarnessError::Invariant(format!("seeds of task {} disagree on the evaluation schedule", task.task.name)));
        }
    }
    let column = |i: usize, f: fn(&EvalRecord) -> f64| -> Vec<f64> { reports.iter().map(|r| f(&r.records[i])).collect() };
    let points = schedule
        .iter()
        .enumerate()
        .map(|(i, &(episode, env_steps))| {
            let (mean_return, stderr_return) = mean_stderr(&column(i, |r| r.mean_return));
            let (mean_improvement_pct, stderr_improvement_pct) = mean_stderr(&column(i, |r| r.improvement_pct));
            let (cos, _) = mean_stderr(&column(i, |r| r.cosine_to_zr));
            PointSummary {
                episode,
                env_steps,
                mean_return,
                stderr_return,
                mean_improvement_pct,
                stderr_improvement_pct,
                mean_cosine_to_zr: cos.is_finite().then_some(cos),
            }
        })
        .collect();
    let zs: Vec<f64> = reports.iter().map(|r| r.zero_shot_return).collect();
    Ok(TaskSummary {
        task: task.task.name.clone(),
        on_span: task.on_span,
        degenerate_inference: first.degenerate_inference,
        optimal_return: task.optimal_value,
        zero_shot_return: mean_stderr(&zs).0,
        seeds: reports.iter().map(|r| r.seed).collect(),
        points,
    })
}

/// Every run of one variant over tasks × seeds, grouped by task.
pub fn run_grid(ctx: &Context, variant: Variant, opts: RunOptions) -> Result<Vec<Vec<AdaptationReport>>> {
    let seeds = ctx.seeds(opts.seed_offset);
    let jobs: Vec<(usize, u64)> = (0..ctx.suite.tasks.len()).flat_map(|t| seeds.iter().map(move |&s| (t, s))).collect();
    let reports = run_jobs(opts.jobs, &jobs, |&(t, s)| run_variant(ctx, variant, &ctx.suite.tasks[t], s))?;
    let mut grouped: Vec<Vec<AdaptationReport>> = (0..ctx.suite.tasks.len()).map(|_| Vec::new()).collect();
    for ((t, _), r) in jobs.into_iter().zip(reports) {
        grouped[t].push(r);
    }
    Ok(grouped)
}

pub fn adapt_with(ctx: &Context, out: &Path, opts: RunOptions) -> Result<Summary> {
    let variant = Variant::for_algorithm(ctx.config.algorithm, &ctx.config);
    let started = Instant::now();
    let grouped = run_grid(ctx, variant, opts)?;
    let algorithm = ctx.config.algorithm.name();
    let mut tasks = Vec::with_capacity(grouped.len());
    for (task, reports) in ctx.suite.tasks.iter().zip(&grouped) {
        for r in reports {
            let path = run_csv_path(out, algorithm, &task.task.name, r.seed);
            write_atomic(&path, run_csv(r).as_bytes()).map_err(HarnessError::file)?;
        }
        let summary = summarize_task(task, reports)?;
        let fin = summary.final_point();
        info!(
            "{algorithm} {}: final {:.4} (zero-shot {:.4}, optimum {:.4}), improvement {:.1}%",
            summary.task, fin.mean_return, summary.zero_shot_return, summary.optimal_return, fin.mean_improvement_pct
        );
        tasks.push(summary);
    }
    let summary = Summary { algorithm: algorithm.into(), improvement_definition: IMPROVEMENT_DEFINITION.into(), tasks };
    write_json(&out.join("summary.json"), &summary)?;
    info!("adapt finished in {:.2}s", started.elapsed().as_secs_f64());
    Ok(summary)
}

pub fn cmd_adapt(config: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<Summary> {
    let ctx = Context::load(config.clone(), out)?;
    adapt_with(&ctx, out, opts)
}

pub fn ablation_csv(rows: &[(Variant, AdaptationReport)]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for (variant, report) in rows {
        for r in &report.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                variant.slug(),
                report.task,
                report.seed,
                r.env_steps,
                num(r.mean_return),
                num(r.improvement_pct),
                num(r.cosine_to_zr)
            );
        }
    }
    out
}

pub fn ablate_with(ctx: &Context, out: &Path, opts: RunOptions) -> Result<Vec<(Variant, AdaptationReport)>> {
    let seeds = ctx.seeds(opts.seed_offset);
    let mut jobs = Vec::new();
    for v in ABLATION_GRID {
        for t in 0..ctx.suite.tasks.len() {
            jobs.extend(seeds.iter().map(|&s| (v, t, s)));
        }
    }
    let reports = run_jobs(opts.jobs, &jobs, |&(v, t, s)| run_variant(ctx, v, &ctx.suite.tasks[t], s))?;
    let rows: Vec<(Variant, AdaptationReport)> = jobs.into_iter().map(|(v, _, _)| v).zip(reports).collect();
    write_atomic(&out.join("ablation.csv"), ablation_csv(&rows).as_bytes()).map_err(HarnessError::file)?;
    Ok(rows)
}

pub fn cmd_ablate(config: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<Vec<(Variant, AdaptationReport)>> {
    let ctx = Context::load(config.clone(), out)?;
    ablate_with(&ctx, out, opts)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Invariant(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(HarnessError::file)
}
