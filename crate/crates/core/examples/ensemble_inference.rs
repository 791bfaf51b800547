//! Two models whose auxiliary heads were fitted on different domains: the
//! ensemble weights follow the domain of each test input.

use pfdl::data::{DataConfig, Sample};
use pfdl::eval::ensemble_predict_weighted;
use pfdl::matching::{train_auxiliary, AuxTraining, NegativeSynthesisSpec};
use pfdl::nn::{ArchSpec, PersonalModel};
use pfdl::rng::Rng;
use rand::SeedableRng;

fn main() -> pfdl::Result<()> {
    let tasks = DataConfig::default().build_tasks(0)?;
    let arch = ArchSpec::new(tasks[0].input_dim, vec![64, 32], tasks[0].num_classes)?;
    let params = AuxTraining {
        epochs: 20,
        lr: 0.05,
        batch_size: 32,
        weight_decay: 1e-3,
    };
    let mut pool = Vec::new();
    for (i, d) in [0usize, 3].into_iter().enumerate() {
        let mut m = PersonalModel::init(&arch, 10 + i as u64)?;
        let shard: Vec<&Sample> = tasks[d].train.iter().collect();
        train_auxiliary(&mut m, &shard, NegativeSynthesisSpec::default(), params, &mut Rng::seed_from_u64(i as u64))?;
        pool.push(m);
    }
    for t in &tasks {
        let mut mean = [0.0; 2];
        for s in &t.test {
            let (_, w) = ensemble_predict_weighted(&pool, &s.x)?;
            mean[0] += w.alpha[0];
            mean[1] += w.alpha[1];
        }
        let n = t.test.len() as f64;
        println!(
            "{:<12} mean weight on model(0°) {:.3}, model(180°) {:.3}",
            t.domain.name,
            mean[0] / n,
            mean[1] / n
        );
    }
    Ok(())
}
