//! `che`: generate cohorts, train base / PW / CHE models, evaluate, sweep and
//! attribute.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use che_core::attribution::{attribute_split, summarize};
use che_core::checkpoint::to_canonical_json;
use che_core::config::{RunConfig, SplitProtocol};
use che_core::experiment::{approach_name, pick_split, run_method, run_parallel, Benchmark, MetricsReport, RunOutcome};
use che_core::metrics::evaluate;
use che_core::synth::{generate_cohort, load_cohort, save_cohort, split_by_environment, split_random, Cohort, CohortMeta, FORMAT_VERSION};
use che_core::{Checkpoint, Error, Method, ModelKind};

const SNAPSHOT: &str = "resolved.conf";

#[derive(Parser, Debug)]
#[command(name = "che", version, about = "HSIC sample weighting for two-stream diagnosis prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `gen.seed` for `gen`, `train.seed` otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Concurrent runs for `sweep`.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training- and test-environment cohorts.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Patients per cohort.
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Train one method and write its checkpoint, curve and weights.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// `random` or `env`.
        #[arg(long)]
        split: Option<String>,
    },
    /// Evaluate a checkpoint on one part of a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train`, `val` or `test`.
        #[arg(long, default_value = "test")]
        part: String,
        /// Comma-separated cutoffs.
        #[arg(long)]
        ks: Option<String>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Every (method, grid point, seed) run, aggregated into one report.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Per-visit gradient attributions of a checkpoint.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        part: String,
        #[arg(long)]
        split: Option<String>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::InvalidConfig(_))));
        if config {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow!(msg))
}

fn resolve(common: &Common, extra: &[(&str, String)]) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut pairs: Vec<(String, String)> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn opt(pairs: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<String>) {
    if let Some(v) = v {
        pairs.push((key, v.clone()));
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::Runtime)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::Runtime)
}

fn cohort_path(data: &Path, env: &str) -> PathBuf {
    data.join(format!("{env}.jsonl"))
}

fn load(data: &Path, env: &str) -> CliResult<Cohort> {
    let path = cohort_path(data, env);
    load_cohort(&path).with_context(|| format!("loading cohort {}", path.display())).map_err(Failure::Runtime)
}

fn benchmark(cfg: &RunConfig, data: &Path) -> CliResult<Benchmark> {
    let train_env = load(data, &cfg.generator.train_env.name)?;
    let split = match cfg.split {
        SplitProtocol::Random => split_random(&train_env.records, cfg.split_seed)?,
        SplitProtocol::Env => {
            let test_env = load(data, &cfg.generator.test_env.name)?;
            if (test_env.meta.m, test_env.meta.n) != (train_env.meta.m, train_env.meta.n) {
                return Err(Failure::Runtime(anyhow!(
                    "cohorts disagree on vocabulary: M={} N={} vs M={} N={}",
                    train_env.meta.m,
                    train_env.meta.n,
                    test_env.meta.m,
                    test_env.meta.n
                )));
            }
            split_by_environment(&train_env.records, &test_env.records, cfg.split_seed)?
        }
    };
    Ok(Benchmark { split, dims_m: train_env.meta.m, dims_n: train_env.meta.n, spec: train_env.meta.causal_spec })
}

fn cmd_gen(common: &Common, patients: Option<usize>) -> CliResult<()> {
    let mut extra = Vec::new();
    if let Some(s) = common.seed {
        extra.push(("gen.seed", s.to_string()));
    }
    if let Some(p) = patients {
        extra.push(("gen.patients", p.to_string()));
    }
    let cfg = resolve(common, &extra)?;
    let g = &cfg.generator;
    create_dir(&common.out)?;
    for env in [&g.train_env, &g.test_env] {
        let generated = generate_cohort(g, env)?;
        let cohort = Cohort {
            meta: CohortMeta {
                format_version: FORMAT_VERSION,
                m: g.m,
                n: g.n,
                generator: Some(g.clone()),
                causal_spec: Some(generated.spec),
            },
            records: generated.records,
        };
        let path = cohort_path(&common.out, &env.name);
        save_cohort(&path, &cohort)?;
        info!("wrote {} patients to {}", cohort.records.len(), path.display());
    }
    write(&common.out.join(SNAPSHOT), &cfg.to_text())
}

fn write_run(dir: &Path, cfg: &RunConfig, run: &RunOutcome) -> CliResult<()> {
    create_dir(dir)?;
    Checkpoint::from_model(&run.model, cfg.train.seed).save(&dir.join("checkpoint.json"))?;
    write(&dir.join("curve.csv"), &run.state.curve_csv())?;
    write(&dir.join("weights.json"), &to_canonical_json(&run.weights.to_map())?)?;
    let mut summary = serde_json::json!({
        "method": run.method.as_str(),
        "model": cfg.model.as_str(),
        "seed": run.seed,
        "epochs": run.state.epochs,
        "best_epoch": run.state.best_epoch,
        "best_val_ndcg10": run.state.best_validation,
        "hsic_initial": run.state.hsic_initial,
        "test": run.test.named().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
    });
    if let Some(auc) = run.holdout_auc {
        summary["propensity_holdout_auc"] = serde_json::json!(auc);
    }
    write(&dir.join("summary.json"), &to_canonical_json(&summary)?)?;
    write(&dir.join(SNAPSHOT), &cfg.to_text())
}

fn cmd_train(common: &Common, data: &Path, method: &Option<String>, model: &Option<String>, split: &Option<String>) -> CliResult<()> {
    let mut extra = Vec::new();
    if let Some(s) = common.seed {
        extra.push(("train.seed", s.to_string()));
    }
    opt(&mut extra, "run.method", method);
    opt(&mut extra, "run.model", model);
    opt(&mut extra, "run.split", split);
    let cfg = resolve(common, &extra)?;
    let bench = benchmark(&cfg, data)?;
    let run = run_method(cfg.method, cfg.model, &bench, &cfg.train, &cfg.pw, &cfg.ks)?;
    if let Some(auc) = run.holdout_auc {
        info!("propensity holdout AUC {auc:.4}");
    }
    write_run(&common.out, &cfg, &run)
}

fn load_checkpoint(path: &Path, bench: &Benchmark) -> CliResult<che_core::Model> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display())).map_err(Failure::Runtime)?;
    if ck.dims.m != bench.dims_m || ck.dims.n != bench.dims_n {
        return Err(Error::VocabMismatch { model_m: ck.dims.m, model_n: ck.dims.n, data_m: bench.dims_m, data_n: bench.dims_n }.into());
    }
    Ok(ck.into_model()?)
}

fn cmd_eval(common: &Common, data: &Path, checkpoint: &Path, part: &str, ks: &Option<String>, split: &Option<String>) -> CliResult<()> {
    let mut extra = Vec::new();
    opt(&mut extra, "run.ks", ks);
    opt(&mut extra, "run.split", split);
    let cfg = resolve(common, &extra)?;
    let bench = benchmark(&cfg, data)?;
    let model = load_checkpoint(checkpoint, &bench)?;
    let records = pick_split(&bench.split, part)?;
    let res = evaluate(&model, records, &cfg.ks)?;
    let mut report = MetricsReport::from_runs(&[(model.kind.to_string(), cfg.train.seed, res)])?;
    report.warnings.clear();
    report.metadata.insert("checkpoint".into(), checkpoint.display().to_string());
    report.metadata.insert("part".into(), part.to_string());
    create_dir(&common.out)?;
    write(&common.out.join("report.json"), &report.to_json()?)?;
    write(&common.out.join("report.csv"), &report.to_csv())?;
    write(&common.out.join(SNAPSHOT), &cfg.to_text())
}

struct Job {
    method: Method,
    epsilon: f64,
    model_lr: f64,
    seed: u64,
}

impl Job {
    fn dir(&self) -> String {
        format!("{}_eps{}_lr{}_seed{}", self.method, self.epsilon, self.model_lr, self.seed)
    }
}

fn cmd_sweep(common: &Common, data: &Path, model: &Option<String>, split: &Option<String>) -> CliResult<()> {
    let mut extra = Vec::new();
    opt(&mut extra, "run.model", model);
    opt(&mut extra, "run.split", split);
    let cfg = resolve(common, &extra)?;
    let bench = benchmark(&cfg, data)?;
    let mut jobs = Vec::new();
    for &method in &cfg.sweep.methods {
        let eps: Vec<f64> = if method == Method::Che { cfg.sweep.epsilon.clone() } else { vec![cfg.train.epsilon] };
        for &epsilon in &eps {
            for &model_lr in &cfg.sweep.model_lr {
                for &seed in &cfg.sweep.seeds {
                    jobs.push(Job { method, epsilon, model_lr, seed });
                }
            }
        }
    }
    info!("sweep: {} runs on {} threads", jobs.len(), common.jobs);
    create_dir(&common.out)?;
    let tasks: Vec<_> = jobs
        .iter()
        .map(|job| {
            let bench = &bench;
            let cfg = &cfg;
            let out = common.out.join(job.dir());
            move || -> CliResult<RunOutcome> {
                let mut run_cfg = cfg.clone();
                run_cfg.method = job.method;
                run_cfg.train.epsilon = job.epsilon;
                run_cfg.train.model_lr = job.model_lr;
                run_cfg.train.seed = job.seed;
                let run = run_method(job.method, cfg.model, bench, &run_cfg.train, &run_cfg.pw, &cfg.ks)?;
                write_run(&out, &run_cfg, &run)?;
                Ok(run)
            }
        })
        .collect();
    let results = run_parallel(common.jobs, tasks);

    // Per method, keep the grid point with the best mean validation NDCG@10.
    let mut grouped: std::collections::BTreeMap<(usize, String), Vec<(u64, RunOutcome)>> = Default::default();
    let mut failures = 0;
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok(run) => {
                let order = cfg.sweep.methods.iter().position(|m| *m == job.method).unwrap_or(0);
                let key = (order, format!("{}|{}", job.epsilon, job.model_lr));
                grouped.entry(key).or_default().push((job.seed, run));
            }
            Err(Failure::Usage(e)) | Err(Failure::Runtime(e)) => {
                failures += 1;
                warn!("run {} failed: {e:#}", job.dir());
            }
        }
    }
    let mut best: std::collections::BTreeMap<usize, (f64, String, Vec<(u64, RunOutcome)>)> = Default::default();
    for ((order, point), runs) in grouped {
        let val = runs.iter().map(|(_, r)| r.state.best_validation).sum::<f64>() / runs.len() as f64;
        if best.get(&order).map_or(true, |(v, _, _)| val > *v) {
            best.insert(order, (val, point, runs));
        }
    }
    let mut rows = Vec::new();
    let mut chosen = serde_json::Map::new();
    for (_, (_, point, runs)) in best {
        let name = approach_name(runs[0].1.method, cfg.model);
        chosen.insert(name.clone(), serde_json::json!(point));
        for (seed, run) in runs {
            rows.push((name.clone(), seed, run.test));
        }
    }
    let mut report = MetricsReport::from_runs(&rows).map_err(|e| Failure::Runtime(anyhow!("{e}")))?;
    if failures > 0 {
        report.warnings.push(format!("{failures} runs failed and were left out"));
    }
    report.metadata.insert("selected_grid_points".into(), serde_json::Value::Object(chosen).to_string());
    report.metadata.insert("runs".into(), jobs.len().to_string());
    write(&common.out.join("report.json"), &report.to_json()?)?;
    write(&common.out.join("report.csv"), &report.to_csv())?;
    write(&common.out.join(SNAPSHOT), &cfg.to_text())
}

fn cmd_attribute(common: &Common, data: &Path, checkpoint: &Path, part: &str, split: &Option<String>) -> CliResult<()> {
    let mut extra = Vec::new();
    opt(&mut extra, "run.split", split);
    let cfg = resolve(common, &extra)?;
    let bench = benchmark(&cfg, data)?;
    let model = load_checkpoint(checkpoint, &bench)?;
    let reports = attribute_split(&model, pick_split(&bench.split, part)?)?;
    let summary = summarize(&reports);
    create_dir(&common.out)?;
    write(&common.out.join("attributions.json"), &to_canonical_json(&reports)?)?;
    let mut csv = String::from("patient,prefix,target,visit,dx,px\n");
    for r in &reports {
        for v in &r.visits {
            csv.push_str(&format!("{},{},{},{},{},{}\n", r.patient, r.prefix, r.target, v.visit, v.dx, v.px));
        }
    }
    write(&common.out.join("attributions.csv"), &csv)?;
    write(&common.out.join("attribution_summary.json"), &to_canonical_json(&summary)?)?;
    write(&common.out.join(SNAPSHOT), &cfg.to_text())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen { common, patients } => cmd_gen(common, *patients),
        Command::Train { common, data, method, model, split } => {
            if let Some(m) = method {
                m.parse::<Method>()?;
            }
            if let Some(m) = model {
                m.parse::<ModelKind>()?;
            }
            cmd_train(common, data, method, model, split)
        }
        Command::Eval { common, data, checkpoint, part, ks, split } => cmd_eval(common, data, checkpoint, part, ks, split),
        Command::Sweep { common, data, model, split } => cmd_sweep(common, data, model, split),
        Command::Attribute { common, data, checkpoint, part, split } => cmd_attribute(common, data, checkpoint, part, split),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHE_LOG", "info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
