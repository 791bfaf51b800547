//! Versioned binary dataset files and their JSON manifest.
//!
//! ```text
//! magic        4 bytes  "PFDS"
//! version      u32
//! task_id      u32
//! input_dim    u32
//! num_classes  u32
//! seed         u64
//! n_train      u64
//! n_test       u64
//! samples      train then test; each input_dim × f64 followed by label u32
//! ```
//! The domain description lives in the manifest, not in the binary file.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataConfig, DomainSpec, Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_f64, read_u32, read_u64, write_f64, write_u32, write_u64};

pub const MAGIC: &[u8; 4] = b"PFDS";
pub const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Data(format!("dataset: {}", msg.into()))
}

pub fn encode_dataset(task: &TaskDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    let w = &mut buf;
    w.extend_from_slice(MAGIC);
    write_u32(w, VERSION).expect("vec write");
    write_u32(w, task.task_id as u32).expect("vec write");
    write_u32(w, task.input_dim as u32).expect("vec write");
    write_u32(w, task.num_classes as u32).expect("vec write");
    write_u64(w, task.seed).expect("vec write");
    write_u64(w, task.train.len() as u64).expect("vec write");
    write_u64(w, task.test.len() as u64).expect("vec write");
    for s in task.train.iter().chain(&task.test) {
        for v in &s.x {
            write_f64(w, *v).expect("vec write");
        }
        write_u32(w, s.y as u32).expect("vec write");
    }
    buf
}

fn read_samples<R: Read>(r: &mut R, n: u64, dim: usize) -> Result<Vec<Sample>> {
    let io = |e: std::io::Error| corrupt(format!("truncated samples: {e}"));
    let mut out = Vec::with_capacity(n.min(1 << 20) as usize);
    for _ in 0..n {
        let x = (0..dim)
            .map(|_| read_f64(r))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let y = read_u32(r).map_err(io)? as usize;
        out.push(Sample { x, y });
    }
    Ok(out)
}

/// Decodes a dataset file; the domain is supplied by the caller (from the manifest).
pub fn decode_dataset(bytes: &[u8], domain: DomainSpec) -> Result<TaskDataset> {
    let r = &mut &bytes[..];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| corrupt(e.to_string()))?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let io = |e: std::io::Error| corrupt(format!("truncated header: {e}"));
    let version = read_u32(r).map_err(io)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let task_id = read_u32(r).map_err(io)? as usize;
    let input_dim = read_u32(r).map_err(io)? as usize;
    let num_classes = read_u32(r).map_err(io)? as usize;
    let seed = read_u64(r).map_err(io)?;
    let n_train = read_u64(r).map_err(io)?;
    let n_test = read_u64(r).map_err(io)?;
    let train = read_samples(r, n_train, input_dim)?;
    let test = read_samples(r, n_test, input_dim)?;
    if !r.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", r.len())));
    }
    let task = TaskDataset {
        task_id,
        domain,
        num_classes,
        input_dim,
        seed,
        train,
        test,
    };
    task.validate()?;
    Ok(task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task_id: usize,
    pub domain: DomainSpec,
    pub file: String,
    pub num_train: usize,
    pub num_test: usize,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
    /// SHA-256 of the binary file, hex.
    pub sha256: String,
}

/// Human-readable description of a generated task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: DataConfig,
    pub tasks: Vec<TaskEntry>,
}

impl DatasetManifest {
    pub fn describe(config: &DataConfig, seed: u64, tasks: &[TaskDataset]) -> Self {
        let entries = tasks
            .iter()
            .map(|t| TaskEntry {
                task_id: t.task_id,
                domain: t.domain.clone(),
                file: task_file_name(t.task_id),
                num_train: t.train.len(),
                num_test: t.test.len(),
                train_class_counts: TaskDataset::class_counts(&t.train, t.num_classes),
                test_class_counts: TaskDataset::class_counts(&t.test, t.num_classes),
                sha256: hex::encode(Sha256::digest(encode_dataset(t))),
            })
            .collect();
        DatasetManifest {
            format_version: VERSION,
            seed,
            config: config.clone(),
            tasks: entries,
        }
    }

    /// Stable hash of the manifest content; identical data gives identical hashes.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub fn task_file_name(task_id: usize) -> String {
    format!("task_{task_id}.pfds")
}

/// Writes every task file plus `manifest.json` into `dir`. Returns the written paths.
pub fn write_task_stream(dir: &Path, config: &DataConfig, seed: u64, tasks: &[TaskDataset]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest::describe(config, seed, tasks);
    let mut written = Vec::new();
    for t in tasks {
        let path = dir.join(task_file_name(t.task_id));
        std::fs::write(&path, encode_dataset(t)).map_err(|e| Error::io(&path, e))?;
        written.push(path.display().to_string());
    }
    let path = dir.join("manifest.json");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| corrupt(e.to_string()))?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    written.push(path.display().to_string());
    Ok(written)
}

/// Reads `manifest.json` and every task file it lists, checking hashes.
pub fn read_task_stream(dir: &Path) -> Result<(DatasetManifest, Vec<TaskDataset>)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let p = dir.join(&entry.file);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != entry.sha256 {
            return Err(Error::Format {
                path: p,
                message: "sha256 mismatch with manifest".into(),
            });
        }
        tasks.push(decode_dataset(&bytes, entry.domain.clone())?);
    }
    Ok((manifest, tasks))
}
