//! Fits one model's auxiliary head on the first domain, then scores every
//! domain against it and shows the matching decision each would trigger.

use pfdl::data::{DataConfig, Sample};
use pfdl::matching::{matching_intensity, select_strategy, train_auxiliary, AuxTraining, NegativeSynthesisSpec};
use pfdl::nn::{ArchSpec, PersonalModel};
use pfdl::rng::Rng;
use rand::SeedableRng;

fn main() -> pfdl::Result<()> {
    let tasks = DataConfig::default().build_tasks(0)?;
    let arch = ArchSpec::new(tasks[0].input_dim, vec![64, 32], tasks[0].num_classes)?;
    let mut model = PersonalModel::init(&arch, 1)?;
    let shard: Vec<&Sample> = tasks[0].train.iter().collect();
    let params = AuxTraining {
        epochs: 20,
        lr: 0.05,
        batch_size: 32,
        weight_decay: 1e-3,
    };
    train_auxiliary(&mut model, &shard, NegativeSynthesisSpec::default(), params, &mut Rng::seed_from_u64(2))?;

    let pool = vec![model];
    let lambda = 0.5;
    for t in &tasks {
        let test: Vec<&Sample> = t.test.iter().collect();
        let rho = matching_intensity(&pool, &test)?;
        let report = select_strategy(&rho, lambda, pool.len(), 10)?;
        println!("{:<12} rho {:.3}  -> {:?}", t.domain.name, rho[0], report.decision);
    }
    Ok(())
}
