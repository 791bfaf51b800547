//! Label skew of the Dirichlet partition at three concentrations.

use pfdl::data::{dirichlet_partition, DataConfig, HeterogeneityConfig, TaskDataset};

fn main() -> pfdl::Result<()> {
    let task = DataConfig::default().build_tasks(0)?.remove(0);
    for alpha in [0.1, 1.0, 10.0] {
        let shards = dirichlet_partition(&task, &HeterogeneityConfig { alpha, num_clients: 5, seed: 0 })?;
        println!("alpha = {alpha}");
        let mut total = 0;
        for s in &shards {
            let samples: Vec<_> = s.samples(&task).cloned().collect();
            println!("  client {}: {:?}", s.client_id, TaskDataset::class_counts(&samples, task.num_classes));
            total += s.len();
        }
        println!("  {total} of {} train samples assigned", task.num_train());
    }
    Ok(())
}
