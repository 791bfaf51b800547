use super::*;
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> ArchSpec {
    ArchSpec::new(2, vec![4], 3).unwrap()
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

/// Straight-line forward pass: explicit index loops, no shared helpers.
fn naive_forward(m: &PersonalModel, x: &[f64]) -> (Vec<f64>, f64) {
    let mut h = x.to_vec();
    for layer in &m.trunk {
        let mut next = vec![0.0; layer.out_dim];
        for o in 0..layer.out_dim {
            let mut acc = layer.bias[o];
            for i in 0..layer.in_dim {
                acc += layer.weights[o * layer.in_dim + i] * h[i];
            }
            next[o] = if acc > 0.0 { acc } else { 0.0 };
        }
        h = next;
    }
    let mut logits = vec![0.0; m.cls_head.out_dim];
    for o in 0..m.cls_head.out_dim {
        let mut acc = m.cls_head.bias[o];
        for i in 0..m.cls_head.in_dim {
            acc += m.cls_head.weights[o * m.cls_head.in_dim + i] * h[i];
        }
        logits[o] = acc;
    }
    let mut z = m.aux_head.bias[0];
    for i in 0..m.aux_head.in_dim {
        z += m.aux_head.weights[i] * h[i];
    }
    (logits, 1.0 / (1.0 + (-z).exp()))
}

/// Central differences on the flat parameter vector.
fn finite_difference(m: &PersonalModel, batch: &[Example<'_>], spec: LossSpec, h: f64) -> Vec<f64> {
    let base = m.to_flat();
    let mut probe = m.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        probe.set_flat(&plus).unwrap();
        let lp = probe.loss(batch, spec).unwrap();
        let mut minus = base.clone();
        minus[i] -= h;
        probe.set_flat(&minus).unwrap();
        let lm = probe.loss(batch, spec).unwrap();
        out.push((lp - lm) / (2.0 * h));
    }
    out
}

fn min_preactivation(m: &PersonalModel, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let mut margin = f64::INFINITY;
    for layer in &m.trunk {
        let z = layer.affine(&h);
        margin = z.iter().fold(margin, |acc, v| acc.min(v.abs()));
        h = z.iter().map(|v| v.max(0.0)).collect();
    }
    margin
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn init_is_deterministic() {
    let arch = ArchSpec::new(16, vec![64, 32], 5).unwrap();
    assert_eq!(
        PersonalModel::init(&arch, 3).unwrap(),
        PersonalModel::init(&arch, 3).unwrap()
    );
    assert_ne!(
        PersonalModel::init(&arch, 3).unwrap().to_flat(),
        PersonalModel::init(&arch, 4).unwrap().to_flat()
    );
}

#[test]
fn parameter_count_of_small_arch() {
    let arch = small_arch();
    assert_eq!(arch.param_count(), 2 * 4 + 4 + 4 * 3 + 3 + 4 + 1);
    assert_eq!(arch.param_count(), 32);
    assert_eq!(PersonalModel::init(&arch, 0).unwrap().param_count(), 32);
}

#[test]
fn glorot_bounds_and_zero_bias() {
    let arch = ArchSpec::new(10, vec![6], 4).unwrap();
    let m = PersonalModel::init(&arch, 9).unwrap();
    for layer in m.layers() {
        let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
        assert!(layer.weights.iter().all(|w| w.abs() <= limit));
        assert!(layer.bias.iter().all(|b| *b == 0.0));
    }
}

#[test]
fn invalid_arch_is_rejected() {
    assert!(ArchSpec::new(4, vec![], 3).is_err());
    assert!(ArchSpec::new(0, vec![3], 3).is_err());
    assert!(ArchSpec::new(4, vec![3, 0], 3).is_err());
}

#[test]
fn zero_model_outputs() {
    let m = PersonalModel::zeros(&small_arch()).unwrap();
    let f = m.forward(&[1.5, -2.0]).unwrap();
    assert_eq!(f.class_logits, vec![0.0; 3]);
    assert_eq!(f.aux_score, 0.5);
}

#[test]
fn forward_rejects_wrong_dimension() {
    let m = PersonalModel::init(&small_arch(), 1).unwrap();
    assert!(matches!(m.forward(&[1.0]), Err(Error::Input(_))));
}

#[test]
fn forward_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..20 {
        let arch = ArchSpec::new(7, vec![9, 5, 6], 4).unwrap();
        let mut m = PersonalModel::init(&arch, seed).unwrap();
        for v in m.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        for x in random_inputs(&mut rng, 5, 7) {
            let f = m.forward(&x).unwrap();
            let (logits, score) = naive_forward(&m, &x);
            for (a, b) in f.class_logits.iter().zip(&logits) {
                assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-14);
            }
            assert_relative_eq!(f.aux_score, score, max_relative = 1e-12);
            assert!(f.aux_score > 0.0 && f.aux_score < 1.0);
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let mut kept = 0;
    for case in 0..60u64 {
        let arch = ArchSpec::new(3, vec![5, 4], 3).unwrap();
        let mut m = PersonalModel::init(&arch, case).unwrap();
        for v in m.values_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        let xs = random_inputs(&mut rng, 6, 3);
        // A ReLU kink inside the probe interval makes the difference quotient
        // meaningless; such cases are dropped whole.
        if xs.iter().any(|x| min_preactivation(&m, x) < 1e-4) {
            continue;
        }
        let batch: Vec<Example> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| match i % 3 {
                0 => Example::both(x, rng.random_range(0..3), true),
                1 => Example::aux(x, false),
                _ => Example::class(x, rng.random_range(0..3)),
            })
            .collect();
        for spec in [LossSpec::Cls, LossSpec::Aux, LossSpec::Joint] {
            let g = m.backward(&batch, spec).unwrap().to_flat();
            let fd = finite_difference(&m, &batch, spec, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                worst = worst.max(rel_err(*a, *b));
            }
        }
        kept += 1;
    }
    assert!(kept >= 30, "only {kept} kink-free cases");
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn cls_loss_leaves_aux_head_untouched() {
    let m = PersonalModel::init(&small_arch(), 2).unwrap();
    let xs = [[0.3, -0.4], [1.0, 0.2]];
    let batch = [Example::both(&xs[0], 1, true), Example::both(&xs[1], 2, false)];
    let g = m.backward(&batch, LossSpec::Cls).unwrap();
    assert!(g.aux_head().values().all(|v| *v == 0.0));
    let g = m.backward(&batch, LossSpec::Aux).unwrap();
    assert!(g.cls_head().values().all(|v| *v == 0.0));
}

#[test]
fn joint_gradient_is_sum_of_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = ArchSpec::new(5, vec![8, 6], 4).unwrap();
    let m = PersonalModel::init(&arch, 8).unwrap();
    let xs = random_inputs(&mut rng, 10, 5);
    let batch: Vec<Example> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if i % 2 == 0 {
                Example::both(x, i % 4, true)
            } else {
                Example::aux(x, false)
            }
        })
        .collect();
    let mut sum = m.backward(&batch, LossSpec::Cls).unwrap();
    sum.add_assign(&m.backward(&batch, LossSpec::Aux).unwrap());
    let joint = m.backward(&batch, LossSpec::Joint).unwrap();
    for (a, b) in joint.values().zip(sum.values()) {
        assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-15);
    }
}

#[test]
fn empty_batch_is_an_error() {
    let m = PersonalModel::init(&small_arch(), 2).unwrap();
    assert!(matches!(m.backward(&[], LossSpec::Joint), Err(Error::Input(_))));
    let x = [0.0, 0.0];
    assert!(m.backward(&[Example::aux(&x, true)], LossSpec::Cls).is_err());
}

#[test]
fn sgd_step_arithmetic() {
    let mut m = PersonalModel::zeros(&small_arch()).unwrap();
    for v in m.values_mut() {
        *v = 1.0;
    }
    let g = GradientSet::zeros_like(&m);
    let before = m.clone();
    m.sgd_step(&g, 0.1, 0.0);
    assert_eq!(m, before);
    m.sgd_step(&g, 0.1, 1e-3);
    assert!(m.values().all(|v| (v - 0.9999).abs() < 1e-15));
}

#[test]
fn sgd_step_reduces_loss() {
    let arch = small_arch();
    let mut m = PersonalModel::init(&arch, 12).unwrap();
    let xs = [[1.0, 2.0], [-1.0, 0.5], [0.3, -0.7]];
    let batch = [
        Example::both(&xs[0], 0, true),
        Example::both(&xs[1], 1, false),
        Example::class(&xs[2], 2),
    ];
    let (before, g) = m.loss_and_grad(&batch, LossSpec::Joint).unwrap();
    m.sgd_step(&g, 0.01, 0.0);
    let after = m.loss(&batch, LossSpec::Joint).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn trunk_is_shared_between_heads() {
    let arch = small_arch();
    let mut m = PersonalModel::init(&arch, 5).unwrap();
    let x = [0.8, -0.3];
    let f0 = m.forward(&x).unwrap();
    for v in m.trunk[0].values_mut() {
        *v *= 1.5;
    }
    let f1 = m.forward(&x).unwrap();
    assert_ne!(f0.class_logits, f1.class_logits);
    assert_ne!(f0.aux_score, f1.aux_score);
    assert_eq!(
        m.param_count(),
        arch.trunk_param_count() + arch.cls_head_param_count() + arch.aux_head_param_count()
    );
}

proptest! {
    #[test]
    fn backward_is_deterministic(seed in 0u64..1000) {
        let arch = ArchSpec::new(3, vec![4], 2).unwrap();
        let m = PersonalModel::init(&arch, seed).unwrap();
        let x = [0.1 * seed as f64, -0.5, 0.25];
        let batch = [Example::both(&x, (seed % 2) as usize, seed % 3 == 0)];
        let a = m.backward(&batch, LossSpec::Joint).unwrap();
        let b = m.backward(&batch, LossSpec::Joint).unwrap();
        prop_assert_eq!(a, b);
    }
}
