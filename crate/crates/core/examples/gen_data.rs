//! Writes the default task stream to a directory and reads it back.
//!
//! `cargo run --example gen_data -- [dir]`

use std::path::PathBuf;

use pfdl::data::format::{read_task_stream, write_task_stream};
use pfdl::data::DataConfig;

fn main() -> pfdl::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pfdl-gen-data"));
    let cfg = DataConfig::default();
    let tasks = cfg.build_tasks(0)?;
    for path in write_task_stream(&dir, &cfg, 0, &tasks)? {
        println!("wrote {path}");
    }
    let (manifest, back) = read_task_stream(&dir)?;
    assert_eq!(back, tasks);
    println!("read back {} tasks, dataset hash {}", back.len(), manifest.hash());
    Ok(())
}
