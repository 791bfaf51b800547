//! Configuration parsing and experiment persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{state_format, ClientSidecar, ClientState};
use crate::error::{Error, Result};
use crate::eval::MetricsMatrix;
use crate::federation::{Event, ExperimentOutput, FederationConfig, Mode};

/// Strict JSON: unknown keys are rejected, missing keys take defaults.
pub fn parse_config(text: &str) -> Result<FederationConfig> {
    let cfg: FederationConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<FederationConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn config_to_json(cfg: &FederationConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Record of one invocation, written before round 1 and completed at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub code_version: String,
    pub config: FederationConfig,
    /// SHA-256 of the pretty-printed config; equal hashes mean a re-run.
    pub config_hash: String,
    pub dataset_hash: String,
    /// Directory of a pre-generated dataset, if one was used.
    #[serde(default)]
    pub data_dir: Option<String>,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub started_at_unix: u64,
    pub finished_at_unix: Option<u64>,
}

impl ExperimentManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(command: &str, config: &FederationConfig, dataset_hash: String, seeds: Vec<u64>, modes: Vec<Mode>) -> Self {
        ExperimentManifest {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            config_hash: sha256_hex(config_to_json(config).as_bytes()),
            dataset_hash,
            data_dir: None,
            seeds,
            modes,
            outputs: Vec::new(),
            started_at_unix: unix_seconds(),
            finished_at_unix: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&dir.join(Self::FILE), json.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })
    }

    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.outputs.sort();
        self.outputs.dedup();
        self.finished_at_unix = Some(unix_seconds());
        self.write(dir)
    }
}

/// Collects files written under one output directory so the manifest can
/// list them.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.root.join(rel), bytes)?;
        self.written.push(rel.to_string());
        Ok(())
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }
}

pub const METRICS_HEADER: [&str; 6] = ["mode", "seed", "client_weighting", "n", "m", "accuracy"];
pub const SUMMARY_HEADER: [&str; 6] = [
    "mode",
    "seed",
    "avg_final",
    "mean_forgetting",
    "pool_size_mean",
    "param_count_total",
];

pub const CLIENT_WEIGHTING: &str = "test_size";

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn metrics_rows(mode: Mode, seed: u64, m: &MetricsMatrix) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (n, row) in m.a.iter().enumerate() {
        for (j, acc) in row.iter().enumerate() {
            rows.push(vec![
                mode.to_string(),
                seed.to_string(),
                CLIENT_WEIGHTING.to_string(),
                n.to_string(),
                j.to_string(),
                fmt_f64(*acc),
            ]);
        }
    }
    rows
}

pub fn metrics_csv(rows: &[Vec<String>]) -> Vec<u8> {
    csv_bytes(&METRICS_HEADER, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub seed: u64,
    pub avg_final: f64,
    pub mean_forgetting: f64,
    pub pool_size_mean: f64,
    pub param_count_total: usize,
}

impl SummaryRow {
    pub fn of(mode: Mode, seed: u64, out: &ExperimentOutput) -> Self {
        SummaryRow {
            mode,
            seed,
            avg_final: out.metrics.avg_final,
            mean_forgetting: out.metrics.mean_forgetting(),
            pool_size_mean: out.pool_size_mean,
            param_count_total: out.param_count_total,
        }
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.mode.to_string(),
            self.seed.to_string(),
            fmt_f64(self.avg_final),
            fmt_f64(self.mean_forgetting),
            fmt_f64(self.pool_size_mean),
            self.param_count_total.to_string(),
        ]
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> Vec<u8> {
    let cells: Vec<Vec<String>> = rows.iter().map(SummaryRow::cells).collect();
    csv_bytes(&SUMMARY_HEADER, &cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub seed: u64,
    pub avg_final: f64,
    pub mean_forgetting: f64,
    pub pool_size_mean: f64,
}

pub fn lambda_sweep_csv(rows: &[LambdaRow]) -> Vec<u8> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.lambda),
                r.seed.to_string(),
                fmt_f64(r.avg_final),
                fmt_f64(r.mean_forgetting),
                fmt_f64(r.pool_size_mean),
            ]
        })
        .collect();
    csv_bytes(&["lambda", "seed", "avg_final", "mean_forgetting", "pool_size_mean"], &cells)
}

/// Per-task accuracies in both views, one row per (mode, seed, view).
pub fn table_csv(entries: &[(Mode, u64, &MetricsMatrix)]) -> Vec<u8> {
    let n = entries.first().map_or(0, |e| e.2.num_tasks());
    let mut header = vec!["mode".to_string(), "seed".to_string(), "view".to_string()];
    header.extend((0..n).map(|t| format!("task_{t}")));
    header.push("avg".to_string());
    let mut rows = Vec::new();
    for (mode, seed, m) in entries {
        let last = m.a.last().cloned().unwrap_or_default();
        for (view, vals) in [("when_current", &m.diag), ("final", &last)] {
            let mut r = vec![mode.to_string(), seed.to_string(), view.to_string()];
            r.extend(vals.iter().map(|v| fmt_f64(*v)));
            r.push(fmt_f64(vals.iter().sum::<f64>() / vals.len().max(1) as f64));
            rows.push(r);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(&header, &rows)
}

/// Per-round loss and parameter norm, for plotting training curves.
pub fn rounds_csv(events: &[Event]) -> Vec<u8> {
    let rows: Vec<Vec<String>> = events
        .iter()
        .filter_map(|e| match e {
            Event::Round {
                round,
                task,
                mode,
                sampled_clients,
                train_loss_mean,
                global_param_norm,
            } => Some(vec![
                mode.to_string(),
                task.to_string(),
                round.to_string(),
                sampled_clients.len().to_string(),
                train_loss_mean.map(fmt_f64).unwrap_or_default(),
                global_param_norm.map(fmt_f64).unwrap_or_default(),
            ]),
            _ => None,
        })
        .collect();
    csv_bytes(
        &["mode", "task", "round", "num_sampled", "train_loss_mean", "global_param_norm"],
        &rows,
    )
}

pub fn events_jsonl(events: &[Event]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e).expect("event serializes");
        out.push(b'\n');
    }
    out
}

pub fn read_events_jsonl(path: &Path) -> Result<Vec<Event>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn checkpoint_path(task: usize, client: usize) -> String {
    format!("checkpoints/task_{task}/client_{client}.pfcs")
}

pub fn sidecar_path(task: usize, client: usize) -> String {
    format!("checkpoints/task_{task}/client_{client}.json")
}

pub fn write_checkpoints(out: &mut OutputDir, checkpoints: &[Vec<ClientState>]) -> Result<()> {
    for (n, states) in checkpoints.iter().enumerate() {
        for s in states {
            out.write(&checkpoint_path(n, s.client_id), &state_format::encode(s))?;
            let sidecar = serde_json::to_vec_pretty(&ClientSidecar::of(s)).expect("sidecar serializes");
            out.write(&sidecar_path(n, s.client_id), &sidecar)?;
        }
    }
    Ok(())
}

/// Reads `checkpoints/task_n/client_k.*` for every task and client.
pub fn read_checkpoints(dir: &Path, num_tasks: usize, num_clients: usize) -> Result<Vec<Vec<ClientState>>> {
    (0..num_tasks)
        .map(|n| {
            (0..num_clients)
                .map(|k| {
                    let path = dir.join(checkpoint_path(n, k));
                    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    let mut state = state_format::decode(&bytes).map_err(|e| Error::Format {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                    let side_path = dir.join(sidecar_path(n, k));
                    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
                    let sidecar: ClientSidecar = serde_json::from_str(&text).map_err(|e| Error::Format {
                        path: side_path.clone(),
                        message: e.to_string(),
                    })?;
                    if sidecar.client_id != state.client_id || state.client_id != k {
                        return Err(Error::Format {
                            path,
                            message: format!("expected client {k}"),
                        });
                    }
                    state.reports = sidecar.reports;
                    Ok(state)
                })
                .collect()
        })
        .collect()
}
