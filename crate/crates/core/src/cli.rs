//! The subcommands behind the `pfdl` binary, callable as library functions.

use std::path::{Path, PathBuf};

use crate::data::format::{read_task_stream, write_task_stream, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::MetricsMatrix;
use crate::federation::{run_experiment_with_data, metrics_from_checkpoints, ExperimentData, FederationConfig, Mode, RunOptions};
use crate::gradcheck::{self, GradcheckReport};
use crate::io::{self, ExperimentManifest, OutputDir, SummaryRow};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "PFDL_THREADS";

/// λ values swept by `compare --lambda-sweep`.
pub const LAMBDA_SWEEP: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];

/// Reads [`THREADS_ENV`]; unset means "let rayon decide".
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::config(THREADS_ENV, format!("expected a positive integer, got `{v}`"))),
        },
    }
}

/// The benchmark preset unless a config file is given.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<FederationConfig> {
    let mut cfg = match path {
        Some(p) => io::load_config(p)?,
        None => FederationConfig::benchmark(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the experiment inputs, from a gen-data directory when given.
///
/// Returns the data and its hash.
pub fn load_data(cfg: &FederationConfig, data_dir: Option<&Path>) -> Result<(ExperimentData, String)> {
    match data_dir {
        Some(dir) => {
            let (manifest, tasks) = read_task_stream(dir)?;
            if manifest.config != cfg.data {
                return Err(Error::Data(format!(
                    "dataset in {} was generated from a different data config",
                    dir.display()
                )));
            }
            let hash = manifest.hash();
            Ok((ExperimentData::from_tasks(cfg, tasks)?, hash))
        }
        None => {
            let data = ExperimentData::build(cfg)?;
            let hash = DatasetManifest::describe(&cfg.data, cfg.seed, &data.tasks).hash();
            Ok((data, hash))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub data: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// One (mode, seed) experiment with its full record written under `out`.
pub fn cmd_run(args: &RunArgs) -> Result<SummaryRow> {
    let mut cfg = resolve_config(args.config.as_deref(), args.seed)?;
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    let (data, data_hash) = load_data(&cfg, args.data.as_deref())?;

    let mut out = OutputDir::create(&args.out)?;
    let mut manifest = ExperimentManifest::new("run", &cfg, data_hash, vec![cfg.seed], vec![cfg.mode]);
    manifest.data_dir = args.data.as_ref().map(|p| p.display().to_string());
    manifest.write(out.root())?;
    out.write("config.json", io::config_to_json(&cfg).as_bytes())?;

    let options = RunOptions {
        threads: args.threads,
        record_rounds: false,
    };
    let result = run_experiment_with_data(&cfg, &data, options)?;

    let rows = io::metrics_rows(cfg.mode, cfg.seed, &result.metrics);
    out.write("metrics.csv", &io::metrics_csv(&rows))?;
    out.write("metrics.json", &serde_json::to_vec_pretty(&result.metrics).expect("metrics serialize"))?;
    let summary = SummaryRow::of(cfg.mode, cfg.seed, &result);
    out.write("summary.csv", &io::summary_csv(std::slice::from_ref(&summary)))?;
    out.write("events.jsonl", &io::events_jsonl(&result.events))?;
    out.write("rounds.csv", &io::rounds_csv(&result.events))?;
    io::write_checkpoints(&mut out, &result.checkpoints)?;

    manifest.outputs = out.written().to_vec();
    manifest.finish(out.root())?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct CompareArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub lambda_sweep: bool,
    pub threads: Option<usize>,
}

/// Every mode on every seed; writes summary, metrics, per-task table and an
/// optional λ sweep of the matching method.
pub fn cmd_compare(args: &CompareArgs) -> Result<Vec<SummaryRow>> {
    if args.modes.is_empty() {
        return Err(Error::config("modes", "at least one mode is required"));
    }
    if args.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let base = resolve_config(args.config.as_deref(), None)?;
    let mut out = OutputDir::create(&args.out)?;
    let mut manifest = ExperimentManifest::new(
        "compare",
        &base,
        String::new(),
        args.seeds.clone(),
        args.modes.clone(),
    );
    manifest.write(out.root())?;
    let options = RunOptions {
        threads: args.threads,
        record_rounds: false,
    };

    let mut summaries = Vec::new();
    let mut metric_rows = Vec::new();
    let mut matrices: Vec<(Mode, u64, MetricsMatrix)> = Vec::new();
    let mut hashes = Vec::new();
    for &seed in &args.seeds {
        let cfg = base.clone().with_seed(seed);
        let (data, hash) = load_data(&cfg, None)?;
        hashes.push(hash);
        for &mode in &args.modes {
            let run_cfg = cfg.clone().with_mode(mode);
            let result = run_experiment_with_data(&run_cfg, &data, options)?;
            metric_rows.extend(io::metrics_rows(mode, seed, &result.metrics));
            summaries.push(SummaryRow::of(mode, seed, &result));
            matrices.push((mode, seed, result.metrics));
        }
    }
    manifest.dataset_hash = io::sha256_hex(hashes.join(",").as_bytes());

    out.write("summary.csv", &io::summary_csv(&summaries))?;
    out.write("metrics.csv", &io::metrics_csv(&metric_rows))?;
    let refs: Vec<(Mode, u64, &MetricsMatrix)> = matrices.iter().map(|(m, s, x)| (*m, *s, x)).collect();
    out.write("table.csv", &io::table_csv(&refs))?;

    if args.lambda_sweep {
        let mut rows = Vec::new();
        for &seed in &args.seeds {
            let cfg = base.clone().with_seed(seed).with_mode(Mode::Pfeddil);
            let (data, _) = load_data(&cfg, None)?;
            for lambda in LAMBDA_SWEEP {
                let mut c = cfg.clone();
                c.lambda = lambda;
                let r = run_experiment_with_data(&c, &data, options)?;
                rows.push(io::LambdaRow {
                    lambda,
                    seed,
                    avg_final: r.metrics.avg_final,
                    mean_forgetting: r.metrics.mean_forgetting(),
                    pool_size_mean: r.pool_size_mean,
                });
            }
        }
        out.write("lambda_sweep.csv", &io::lambda_sweep_csv(&rows))?;
    }

    manifest.outputs = out.written().to_vec();
    manifest.finish(out.root())?;
    Ok(summaries)
}

/// Median of each summary column per mode, in `modes` order.
pub fn medians_by_mode(rows: &[SummaryRow], modes: &[Mode]) -> Vec<(Mode, f64, f64)> {
    modes
        .iter()
        .map(|&m| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.mode == m).map(|r| r.avg_final).collect();
            let fgt: Vec<f64> = rows.iter().filter(|r| r.mode == m).map(|r| r.mean_forgetting).collect();
            (m, median(&acc), median(&fgt))
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: MetricsMatrix,
    pub matches_recorded: bool,
}

/// Recomputes the metrics of a `run` directory from its checkpoints and
/// checks them against the recorded ones.
pub fn cmd_eval(run_dir: &Path, threads: Option<usize>) -> Result<EvalReport> {
    let manifest = ExperimentManifest::read(run_dir)?;
    if manifest.command != "run" {
        return Err(Error::input(format!(
            "{} was written by `{}`; eval reads `run` directories",
            run_dir.display(),
            manifest.command
        )));
    }
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let data_dir = manifest.data_dir.as_ref().map(PathBuf::from);
    let (data, hash) = load_data(&cfg, data_dir.as_deref())?;
    if hash != manifest.dataset_hash {
        return Err(Error::Data("regenerated dataset does not match the recorded hash".into()));
    }
    let checkpoints = io::read_checkpoints(run_dir, cfg.num_tasks(), cfg.num_clients)?;
    let metrics = metrics_from_checkpoints(&cfg, &data, &checkpoints, threads)?;

    let recorded_path = run_dir.join("metrics.json");
    let text = std::fs::read_to_string(&recorded_path).map_err(|e| Error::io(&recorded_path, e))?;
    let recorded: MetricsMatrix = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: recorded_path,
        message: e.to_string(),
    })?;
    let matches_recorded = recorded == metrics;
    if !matches_recorded {
        return Err(Error::Invariant(
            "metrics recomputed from checkpoints differ from the recorded ones".into(),
        ));
    }
    Ok(EvalReport { metrics, matches_recorded })
}

/// Runs every finite-difference suite; fails with an invariant error if any
/// exceeds the tolerance.
pub fn cmd_gradcheck(cases: usize, seed: u64, out: Option<&Path>) -> Result<Vec<GradcheckReport>> {
    if cases == 0 {
        return Err(Error::config("cases", "must be at least 1"));
    }
    let reports = gradcheck::run_all(cases, seed)?;
    if let Some(dir) = out {
        let mut o = OutputDir::create(dir)?;
        o.write("gradcheck.json", &serde_json::to_vec_pretty(&reports).expect("reports serialize"))?;
    }
    if let Some(bad) = reports.iter().find(|r| !r.passed()) {
        return Err(Error::Invariant(format!(
            "gradient check `{}` max relative error {:.3e} exceeds {:.0e}",
            bad.suite,
            bad.max_rel_err,
            gradcheck::TOLERANCE
        )));
    }
    Ok(reports)
}

/// Writes the task stream of a config to `out`. Returns the dataset hash.
pub fn cmd_gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<String> {
    let cfg = resolve_config(config, seed)?;
    let tasks = cfg.data.build_tasks(cfg.seed)?;
    write_task_stream(out, &cfg.data, cfg.seed, &tasks)?;
    Ok(DatasetManifest::describe(&cfg.data, cfg.seed, &tasks).hash())
}
