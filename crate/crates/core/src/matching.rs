//! Knowledge matching between a new task and a client's pooled models.
//!
//! Each pooled model carries an auxiliary binary head trained to recognise
//! samples from the task(s) it was trained on. The mean auxiliary score of the
//! new task's local samples under model `i` is that model's matching
//! intensity `ρ_i`. The intensity vector then decides whether the client
//! reuses the best-matching model or starts a fresh one.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{Example, LossSpec, PersonalModel};
use crate::rng::Rng;

/// How negatives for the auxiliary classifier are synthesized from positives.
///
/// Previous-task data is never available, so every negative is derived from
/// a current-task sample: either by adding strong Gaussian noise scaled to the
/// per-feature spread of the shard, or by shuffling its coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativeSynthesisSpec {
    /// Noise standard deviation as a multiple of each feature's std.
    pub noise_sigma_scale: f64,
    /// Fraction of negatives produced by coordinate permutation.
    pub permute_fraction: f64,
}

impl Default for NegativeSynthesisSpec {
    fn default() -> Self {
        NegativeSynthesisSpec {
            noise_sigma_scale: 1.5,
            permute_fraction: 0.5,
        }
    }
}

impl NegativeSynthesisSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.permute_fraction) {
            return Err(Error::config(
                "negatives.permute_fraction",
                "must lie in [0, 1]",
            ));
        }
        if !(self.noise_sigma_scale >= 0.0 && self.noise_sigma_scale.is_finite()) {
            return Err(Error::config(
                "negatives.noise_sigma_scale",
                "must be finite and non-negative",
            ));
        }
        let noise_on = self.noise_sigma_scale > 0.0 && self.permute_fraction < 1.0;
        let permute_on = self.permute_fraction > 0.0;
        if !noise_on && !permute_on {
            return Err(Error::config(
                "negatives",
                "at least one synthesis mode must be enabled",
            ));
        }
        Ok(())
    }
}

/// Negative sampler fitted to one shard's per-feature spread.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    spec: NegativeSynthesisSpec,
    noise: Vec<Normal<f64>>,
}

impl NegativeSampler {
    pub fn fit<'a>(spec: NegativeSynthesisSpec, samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        // Welford, per feature.
        for s in samples {
            if mean.is_empty() {
                mean = vec![0.0; s.x.len()];
                m2 = vec![0.0; s.x.len()];
            }
            n += 1;
            for (j, &v) in s.x.iter().enumerate() {
                let d = v - mean[j];
                mean[j] += d / n as f64;
                m2[j] += d * (v - mean[j]);
            }
        }
        if n == 0 {
            return Err(Error::input("cannot fit negatives to an empty shard"));
        }
        let noise = m2
            .iter()
            .map(|&m| {
                let std = (m / n as f64).sqrt();
                // A constant feature gets unit spread.
                let std = if std > 1e-8 { std } else { 1.0 };
                Normal::new(0.0, spec.noise_sigma_scale * std).expect("finite std")
            })
            .collect();
        Ok(NegativeSampler { spec, noise })
    }

    pub fn synthesize(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let permute = self.spec.permute_fraction > 0.0 && rng.random::<f64>() < self.spec.permute_fraction;
        if permute {
            let mut v = x.to_vec();
            v.shuffle(rng);
            v
        } else {
            x.iter()
                .zip(&self.noise)
                .map(|(v, n)| v + n.sample(rng))
                .collect()
        }
    }
}

/// Builds one balanced auxiliary minibatch: every positive contributes itself
/// (class label and membership 1) and one synthesized negative (membership 0).
pub(crate) fn balanced_batch<'a>(
    positives: &[&'a Sample],
    sampler: &NegativeSampler,
    rng: &mut Rng,
    negatives: &'a mut Vec<Vec<f64>>,
) -> Vec<Example<'a>> {
    negatives.clear();
    negatives.extend(positives.iter().map(|s| sampler.synthesize(&s.x, rng)));
    let negatives: &'a Vec<Vec<f64>> = negatives;
    positives
        .iter()
        .map(|s| Example::both(&s.x, s.y, true))
        .chain(negatives.iter().map(|x| Example::aux(x, false)))
        .collect()
}

/// Hyper-parameters of a standalone auxiliary-classifier fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

/// Trains the auxiliary head (and, through it, the trunk) to separate the
/// shard's samples from synthesized negatives. Zero epochs is a no-op.
pub fn train_auxiliary(
    model: &mut PersonalModel,
    shard: &[&Sample],
    neg_spec: NegativeSynthesisSpec,
    params: AuxTraining,
    rng: &mut Rng,
) -> Result<()> {
    if shard.is_empty() {
        return Err(Error::input("auxiliary training needs a non-empty shard"));
    }
    if params.batch_size == 0 {
        return Err(Error::input("batch size must be positive"));
    }
    if params.epochs == 0 {
        return Ok(());
    }
    let sampler = NegativeSampler::fit(neg_spec, shard.iter().copied())?;
    let mut order: Vec<&Sample> = shard.to_vec();
    let mut neg_buf = Vec::new();
    for _ in 0..params.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(params.batch_size) {
            let batch = balanced_batch(chunk, &sampler, rng, &mut neg_buf);
            let grads = model.backward(&batch, LossSpec::Aux)?;
            model.sgd_step(&grads, params.lr, params.weight_decay);
        }
    }
    Ok(())
}

/// `ρ_i = (1/N) Σ_j f(x_j; θ_i)` for every pooled model. An empty pool gives
/// an empty vector.
pub fn matching_intensity(pool: &[PersonalModel], shard: &[&Sample]) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    if shard.is_empty() {
        return Err(Error::input("matching intensity needs a non-empty shard"));
    }
    pool.iter()
        .map(|m| {
            let mut sum = 0.0;
            for s in shard {
                sum += m.aux_score(&s.x)?;
            }
            Ok(sum / shard.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    NewModel,
    Reuse(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub rho: Vec<f64>,
    pub lambda: f64,
    pub decision: Decision,
    pub budget_forced: bool,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if *v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Chooses between a fresh model and reusing the best-matching pooled model.
///
/// - empty pool: new model
/// - `max ρ ≥ λ`: reuse the argmax
/// - otherwise a new model while the pool is under budget, else reuse the
///   argmax with `budget_forced` set
pub fn select_strategy(rho: &[f64], lambda: f64, pool_size: usize, max_pool_size: usize) -> Result<MatchingReport> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("lambda {lambda} outside [0, 1]")));
    }
    if rho.len() != pool_size {
        return Err(Error::input(format!(
            "intensity vector has {} entries for a pool of {pool_size}",
            rho.len()
        )));
    }
    let report = |decision, budget_forced| MatchingReport {
        rho: rho.to_vec(),
        lambda,
        decision,
        budget_forced,
    };
    let Some(best) = argmax_lowest(rho) else {
        return Ok(report(Decision::NewModel, false));
    };
    if rho[best] >= lambda {
        Ok(report(Decision::Reuse(best), false))
    } else if pool_size < max_pool_size {
        Ok(report(Decision::NewModel, false))
    } else {
        Ok(report(Decision::Reuse(best), true))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_domain, make_base_dataset, BaseSpec, DomainSpec};
    use crate::nn::ArchSpec;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    #[test]
    fn strategy_examples() {
        let r = select_strategy(&[0.3, 0.7], 0.5, 2, 10).unwrap();
        assert_eq!(r.decision, Decision::Reuse(1));
        assert!(!r.budget_forced);

        let r = select_strategy(&[0.3, 0.2], 0.5, 2, 10).unwrap();
        assert_eq!(r.decision, Decision::NewModel);

        let r = select_strategy(&[0.3, 0.2], 0.5, 2, 2).unwrap();
        assert_eq!(r.decision, Decision::Reuse(0));
        assert!(r.budget_forced);

        let r = select_strategy(&[], 0.5, 0, 1).unwrap();
        assert_eq!(r.decision, Decision::NewModel);

        for rho in [[0.0, 0.0], [1e-9, 0.3], [0.9, 0.1]] {
            let r = select_strategy(&rho, 0.0, 2, 10).unwrap();
            assert!(matches!(r.decision, Decision::Reuse(_)));
        }
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let r = select_strategy(&[0.6, 0.8, 0.8], 0.5, 3, 10).unwrap();
        assert_eq!(r.decision, Decision::Reuse(1));
        assert_eq!(argmax_lowest(&[1.0, 1.0]), Some(0));
        assert_eq!(argmax_lowest(&[]), None);
    }

    #[test]
    fn lambda_outside_unit_interval_is_rejected() {
        assert!(select_strategy(&[0.5], 1.5, 1, 10).is_err());
        assert!(select_strategy(&[0.5], -0.1, 1, 10).is_err());
        assert!(select_strategy(&[0.5], 0.5, 2, 10).is_err());
    }

    #[test]
    fn zero_classifier_scores_one_half() {
        let arch = ArchSpec::new(3, vec![4], 2).unwrap();
        let pool = vec![PersonalModel::zeros(&arch).unwrap()];
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample {
                x: vec![i as f64, 1.0, -2.0],
                y: 0,
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        assert_eq!(matching_intensity(&pool, &refs).unwrap(), vec![0.5]);
        assert!(matching_intensity(&[], &refs).unwrap().is_empty());
        assert!(matching_intensity(&pool, &[]).is_err());
    }

    #[test]
    fn single_sample_intensity_is_its_score() {
        let arch = ArchSpec::new(3, vec![4], 2).unwrap();
        let pool = vec![
            PersonalModel::init(&arch, 1).unwrap(),
            PersonalModel::init(&arch, 2).unwrap(),
        ];
        let s = Sample {
            x: vec![0.4, -1.0, 2.0],
            y: 1,
        };
        let rho = matching_intensity(&pool, &[&s]).unwrap();
        for (r, m) in rho.iter().zip(&pool) {
            assert_eq!(*r, m.aux_score(&s.x).unwrap());
            assert!((0.0..=1.0).contains(r));
        }
    }

    #[test]
    fn balanced_batches() {
        let samples: Vec<Sample> = (0..7)
            .map(|i| Sample {
                x: vec![i as f64, 2.0 * i as f64],
                y: i % 2,
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let sampler = NegativeSampler::fit(NegativeSynthesisSpec::default(), refs.iter().copied()).unwrap();
        let mut rng = stream_rng(0, Stream::LocalTrain, &[]);
        let mut buf = Vec::new();
        let batch = balanced_batch(&refs[..4], &sampler, &mut rng, &mut buf);
        let pos = batch.iter().filter(|e| e.aux == Some(true)).count();
        let neg = batch.iter().filter(|e| e.aux == Some(false)).count();
        assert_eq!((pos, neg), (4, 4));
        assert!(batch.iter().filter(|e| e.aux == Some(false)).all(|e| e.class.is_none()));
    }

    #[test]
    fn negative_spec_validation() {
        assert!(NegativeSynthesisSpec::default().validate().is_ok());
        let off = NegativeSynthesisSpec {
            noise_sigma_scale: 0.0,
            permute_fraction: 0.0,
        };
        assert!(off.validate().is_err());
        let only_perm = NegativeSynthesisSpec {
            noise_sigma_scale: 0.0,
            permute_fraction: 1.0,
        };
        assert!(only_perm.validate().is_ok());
        let bad = NegativeSynthesisSpec {
            noise_sigma_scale: 1.0,
            permute_fraction: 1.5,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let arch = ArchSpec::new(2, vec![3], 2).unwrap();
        let mut m = PersonalModel::init(&arch, 4).unwrap();
        let before = m.clone();
        let s = Sample { x: vec![1.0, 2.0], y: 0 };
        let params = AuxTraining {
            epochs: 0,
            lr: 0.1,
            batch_size: 4,
            weight_decay: 0.0,
        };
        let mut rng = stream_rng(1, Stream::LocalTrain, &[]);
        train_auxiliary(&mut m, &[&s], NegativeSynthesisSpec::default(), params, &mut rng).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn trained_discriminator_separates_rotated_domain() {
        let base = make_base_dataset(&BaseSpec::default(), 13).unwrap();
        let task = apply_domain(&base, &DomainSpec::rotation_degrees(0.0, 0.3), 0).unwrap();
        let rotated = apply_domain(&base, &DomainSpec::rotation_degrees(90.0, 0.3), 1).unwrap();
        let arch = ArchSpec::new(16, vec![64, 32], 5).unwrap();
        let mut m = PersonalModel::init(&arch, 0).unwrap();
        let shard: Vec<&Sample> = task.train.iter().collect();
        let mut rng = stream_rng(13, Stream::LocalTrain, &[0]);
        let params = AuxTraining {
            epochs: 20,
            lr: 0.01,
            batch_size: 32,
            weight_decay: 1e-3,
        };
        train_auxiliary(&mut m, &shard, NegativeSynthesisSpec::default(), params, &mut rng).unwrap();
        let mean = |xs: &[Sample]| xs.iter().map(|s| m.aux_score(&s.x).unwrap()).sum::<f64>() / xs.len() as f64;
        let gap = mean(&task.test) - mean(&rotated.test);
        assert!(gap >= 0.2, "held-out gap {gap}");
    }

    proptest! {
        #[test]
        fn intensity_is_permutation_equivariant(seeds in prop::collection::vec(0u64..1000, 1..5), rot in 0usize..5) {
            let arch = ArchSpec::new(3, vec![4], 2).unwrap();
            let pool: Vec<PersonalModel> = seeds.iter().map(|&s| PersonalModel::init(&arch, s).unwrap()).collect();
            let samples: Vec<Sample> = (0..6).map(|i| Sample { x: vec![i as f64 * 0.3, -1.0, 0.5], y: 0 }).collect();
            let refs: Vec<&Sample> = samples.iter().collect();
            let rho = matching_intensity(&pool, &refs).unwrap();
            let k = rot % pool.len();
            let mut rotated = pool.clone();
            rotated.rotate_left(k);
            let mut expected = rho.clone();
            expected.rotate_left(k);
            prop_assert_eq!(matching_intensity(&rotated, &refs).unwrap(), expected);
            prop_assert!(rho.iter().all(|r| (0.0..=1.0).contains(r)));
        }

        #[test]
        fn reuse_index_survives_uniform_rescaling(rho in prop::collection::vec(0.0f64..1.0, 1..8), scale in 0.01f64..1.0) {
            let scaled: Vec<f64> = rho.iter().map(|r| r * scale).collect();
            prop_assert_eq!(argmax_lowest(&rho), argmax_lowest(&scaled));
            let a = select_strategy(&rho, 0.0, rho.len(), 100).unwrap();
            let b = select_strategy(&scaled, 0.0, rho.len(), 100).unwrap();
            prop_assert_eq!(a.decision, b.decision);
        }

        #[test]
        fn lambda_one_always_starts_fresh(rho in prop::collection::vec(0.0f64..0.999, 1..8)) {
            let r = select_strategy(&rho, 1.0, rho.len(), usize::MAX).unwrap();
            prop_assert_eq!(r.decision, Decision::NewModel);
        }
    }
}
