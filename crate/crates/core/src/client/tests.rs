use super::*;
use crate::data::{DataConfig, TaskDataset};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch() -> ArchSpec {
    ArchSpec::new(16, vec![12, 8], 5).unwrap()
}

fn tasks() -> Vec<TaskDataset> {
    let mut cfg = DataConfig::default();
    cfg.base.samples_per_class = 40;
    cfg.build_tasks(3).unwrap()
}

fn shard(task: &TaskDataset) -> Vec<&Sample> {
    task.train.iter().collect()
}

fn params(epochs: usize) -> TrainParams {
    TrainParams {
        epochs,
        lr: 0.01,
        weight_decay: 1e-3,
        batch_size: 32,
        negatives: NegativeSynthesisSpec::default(),
    }
}

fn matching(lambda: f64) -> TaskPolicy {
    TaskPolicy::Matching {
        lambda,
        max_pool_size: 10,
        include_self: false,
    }
}

#[test]
fn migration_examples() {
    assert_eq!(migration_loss(&[1.0, 2.0], &[], &[]).unwrap(), 0.0);
    let snaps = vec![vec![0.0, 0.0]];
    assert_eq!(migration_loss(&[1.0, 1.0], &snaps, &[0.5]).unwrap(), 1.0);
    assert_eq!(migration_grad(&[1.0, 1.0], &snaps, &[0.5]).unwrap(), vec![1.0, 1.0]);
    assert!(migration_loss(&[1.0], &snaps, &[0.5]).is_err());
    assert!(migration_loss(&[1.0, 1.0], &snaps, &[0.5, 0.1]).is_err());
}

#[test]
fn migration_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    // The loss is quadratic, so a central difference is exact up to roundoff.
    let h = 1e-3;
    for _ in 0..20 {
        let n = 100;
        let d = rng.random_range(1..4);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let snaps: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let rho: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = migration_grad(&w, &snaps, &rho).unwrap();
        for i in 0..n {
            let mut p = w.clone();
            p[i] += h;
            let mut m = w.clone();
            m[i] -= h;
            let fd = (migration_loss(&p, &snaps, &rho).unwrap() - migration_loss(&m, &snaps, &rho).unwrap()) / (2.0 * h);
            let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-6, "entry {i}: analytic {} vs fd {fd}", g[i]);
        }
    }
}

#[test]
fn first_task_opens_a_fresh_model() {
    let tasks = tasks();
    let mut c = ClientState::new(0);
    let report = c.begin_task(0, &shard(&tasks[0]), matching(0.5), &arch(), 1).unwrap().unwrap();
    assert!(report.rho.is_empty());
    assert_eq!(report.decision, Decision::NewModel);
    assert_eq!(c.pool.len(), 1);
    assert!(c.snapshots.is_empty());
    assert_eq!(c.pool[0], PersonalModel::init(&arch(), fresh_model_seed(1, 0)).unwrap());
}

#[test]
fn lambda_zero_reuses_without_migration() {
    let tasks = tasks();
    let mut c = ClientState::new(0);
    c.begin_task(0, &shard(&tasks[0]), matching(0.0), &arch(), 1).unwrap();
    let report = c.begin_task(1, &shard(&tasks[1]), matching(0.0), &arch(), 1).unwrap().unwrap();
    assert_eq!(report.decision, Decision::Reuse(0));
    assert_eq!(report.rho.len(), 1);
    assert!(c.snapshots.is_empty());
    assert!(c.current_rho.is_empty());
    assert_eq!(c.pool.len(), 1);
}

#[test]
fn lambda_one_binds_every_task_to_its_own_model() {
    let tasks = tasks();
    let mut c = ClientState::new(0);
    for (t, task) in tasks.iter().enumerate() {
        c.begin_task(t, &shard(task), matching(1.0), &arch(), 1).unwrap();
        assert_eq!(c.snapshots.len(), t);
        assert_eq!(c.current_rho.len(), t);
    }
    assert_eq!(c.pool.len(), 4);
    let bound: std::collections::BTreeSet<usize> = c.bindings.values().copied().collect();
    assert_eq!(bound.len(), 4);
}

#[test]
fn self_anchor_switch_includes_bound_model() {
    let tasks = tasks();
    let mut c = ClientState::new(0);
    let policy = TaskPolicy::Matching {
        lambda: 0.0,
        max_pool_size: 10,
        include_self: true,
    };
    c.begin_task(0, &shard(&tasks[0]), policy, &arch(), 1).unwrap();
    assert!(c.snapshots.is_empty());
    let report = c.begin_task(1, &shard(&tasks[1]), policy, &arch(), 1).unwrap().unwrap();
    assert_eq!(c.snapshots.len(), 1);
    assert_eq!(c.current_rho, report.rho);
}

#[test]
fn empty_shard_sits_the_task_out() {
    let tasks = tasks();
    let mut c = ClientState::new(2);
    assert!(c.begin_task(0, &[], matching(0.5), &arch(), 1).unwrap().is_none());
    assert!(!c.active);
    assert!(c.bindings.is_empty());
    let out = c
        .local_train_round(None, &shard(&tasks[0]), &params(1), 1, 0)
        .unwrap();
    assert!(out.is_none());
}

#[test]
fn snapshots_stay_frozen_during_training() {
    let tasks = tasks();
    let mut c = ClientState::new(0);
    c.begin_task(0, &shard(&tasks[0]), matching(1.0), &arch(), 5).unwrap();
    c.local_train_round(None, &shard(&tasks[0]), &params(2), 5, 0).unwrap();
    c.begin_task(1, &shard(&tasks[1]), matching(1.0), &arch(), 5).unwrap();
    let frozen = c.snapshots.clone();
    let pool0 = c.pool[0].clone();
    for round in 0..3 {
        c.local_train_round(None, &shard(&tasks[1]), &params(2), 5, round).unwrap();
    }
    assert_eq!(c.snapshots, frozen);
    assert_eq!(c.pool[0], pool0);
    assert_ne!(c.pool[1].to_flat(), frozen[0]);
}

#[test]
fn no_snapshots_matches_plain_joint_training() {
    let tasks = tasks();
    let arch = arch();
    let mut a = ClientState::new(3);
    let mut b = ClientState::new(3);
    a.begin_task(0, &shard(&tasks[0]), matching(0.0), &arch, 9).unwrap();
    b.begin_task(0, &shard(&tasks[0]), TaskPolicy::SingleModel, &arch, 9).unwrap();
    let ua = a.local_train_round(None, &shard(&tasks[0]), &params(3), 9, 0).unwrap().unwrap();
    let ub = b.local_train_round(None, &shard(&tasks[0]), &params(3), 9, 0).unwrap().unwrap();
    assert_eq!(ua, ub);
    a.begin_task(1, &shard(&tasks[1]), matching(0.0), &arch, 9).unwrap();
    b.begin_task(1, &shard(&tasks[1]), TaskPolicy::SingleModel, &arch, 9).unwrap();
    let ua = a.local_train_round(None, &shard(&tasks[1]), &params(3), 9, 1).unwrap().unwrap();
    let ub = b.local_train_round(None, &shard(&tasks[1]), &params(3), 9, 1).unwrap().unwrap();
    assert_eq!(ua, ub);
}

#[test]
fn local_update_is_deterministic() {
    let tasks = tasks();
    let mut c = ClientState::new(1);
    c.begin_task(0, &shard(&tasks[0]), matching(0.5), &arch(), 2).unwrap();
    c.local_train_round(None, &shard(&tasks[0]), &params(2), 2, 0).unwrap();
    c.begin_task(1, &shard(&tasks[1]), matching(1.0), &arch(), 2).unwrap();
    let global = PersonalModel::init(&arch(), 99).unwrap();
    let mut d = c.clone();
    let u1 = c.local_train_round(Some(&global), &shard(&tasks[1]), &params(2), 2, 4).unwrap();
    let u2 = d.local_train_round(Some(&global), &shard(&tasks[1]), &params(2), 2, 4).unwrap();
    assert_eq!(u1, u2);
    let u = u1.unwrap();
    assert_eq!(u.num_samples, tasks[1].train.len());
    assert_eq!(u.task_id, 1);
}

#[test]
fn local_objective_decreases_over_a_round() {
    let tasks = tasks();
    let mut c = ClientState::new(0);
    let s = shard(&tasks[0]);
    c.begin_task(0, &s, matching(0.5), &arch(), 4).unwrap();
    let before = c.local_objective(&c.pool[0], &s).unwrap();
    c.local_train_round(None, &s, &params(20), 4, 0).unwrap();
    let after = c.local_objective(&c.pool[0], &s).unwrap();
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn shared_trunk_policy_swaps_heads_only() {
    let tasks = tasks();
    let mut c = ClientState::new(0);
    c.begin_task(0, &shard(&tasks[0]), TaskPolicy::SharedTrunk, &arch(), 1).unwrap();
    c.local_train_round(None, &shard(&tasks[0]), &params(1), 1, 0).unwrap();
    c.begin_task(1, &shard(&tasks[1]), TaskPolicy::SharedTrunk, &arch(), 1).unwrap();
    assert_eq!(c.pool.len(), 2);
    assert_eq!(c.pool[1].trunk, c.pool[0].trunk);
    assert_ne!(c.pool[1].cls_head, c.pool[0].cls_head);
    c.local_train_round(None, &shard(&tasks[1]), &params(1), 1, 0).unwrap();
    let global = c.pool[1].clone();
    c.finish_task(&global, true);
    assert_eq!(c.pool[0].trunk, global.trunk);
}

#[test]
fn state_record_roundtrip() {
    let tasks = tasks();
    let mut c = ClientState::new(7);
    for (t, task) in tasks.iter().take(2).enumerate() {
        c.begin_task(t, &shard(task), matching(1.0), &arch(), 0).unwrap();
    }
    let bytes = state_format::encode(&c);
    assert_eq!(&bytes[..4], b"PFCS");
    let back = state_format::decode(&bytes).unwrap();
    assert_eq!(back.client_id, 7);
    assert_eq!(back.pool, c.pool);
    assert_eq!(back.bindings, c.bindings);
    assert!(state_format::decode(&bytes[..bytes.len() - 2]).is_err());
    let sidecar = ClientSidecar::of(&c);
    let json = serde_json::to_string(&sidecar).unwrap();
    assert_eq!(serde_json::from_str::<ClientSidecar>(&json).unwrap(), sidecar);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn pool_grows_by_at_most_one(lambdas in prop::collection::vec(0.0f64..=1.0, 4), budget in 1usize..4) {
        let tasks = tasks();
        let mut c = ClientState::new(0);
        let mut last = 0;
        for (t, (task, &lambda)) in tasks.iter().zip(&lambdas).enumerate() {
            let policy = TaskPolicy::Matching { lambda, max_pool_size: budget, include_self: false };
            c.begin_task(t, &shard(task), policy, &arch(), 0).unwrap();
            prop_assert!(c.pool.len() >= last && c.pool.len() <= last + 1);
            prop_assert!(c.pool.len() <= budget);
            prop_assert_eq!(c.snapshots.len(), c.current_rho.len());
            last = c.pool.len();
        }
        prop_assert_eq!(c.bindings.len(), 4);
    }
}
