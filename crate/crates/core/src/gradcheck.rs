//! Central finite-difference checks of the analytic gradients.

use rand::Rng as _;
use serde::Serialize;

use crate::client::{migration_grad, migration_loss};
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Example, LossSpec, PersonalModel};
use crate::rng::{stream_rng, Stream};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Preactivations closer than this to zero put a ReLU kink inside the probe
/// interval; such cases are redrawn.
const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub suite: &'static str,
    pub cases: usize,
    pub entries: usize,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn central_difference(base: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = base.to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        probe[i] = base[i] + STEP;
        let lp = f(&probe)?;
        probe[i] = base[i] - STEP;
        let lm = f(&probe)?;
        probe[i] = base[i];
        out.push((lp - lm) / (2.0 * STEP));
    }
    Ok(out)
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

struct Case {
    model: PersonalModel,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Case {
    fn batch(&self) -> Vec<Example<'_>> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (x, &y))| match i % 3 {
                0 => Example::both(x, y, true),
                1 => Example::aux(x, false),
                _ => Example::class(x, y),
            })
            .collect()
    }
}

/// Draws kink-free random (model, batch) cases.
fn draw_cases(count: usize, seed: u64) -> Result<Vec<Case>> {
    let mut rng = stream_rng(seed, Stream::Eval, &[0x6772_6164]);
    let mut cases = Vec::with_capacity(count);
    let mut attempts = 0;
    while cases.len() < count {
        attempts += 1;
        if attempts > count * 50 {
            return Err(Error::Invariant("could not draw kink-free gradient-check cases".into()));
        }
        let input_dim = rng.random_range(2..6);
        let depth = rng.random_range(1..3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..7)).collect();
        let classes = rng.random_range(2..5);
        let arch = ArchSpec::new(input_dim, hidden, classes)?;
        let mut model = PersonalModel::init(&arch, rng.random())?;
        for v in model.values_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        let n = rng.random_range(3..7);
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        if inputs.iter().any(|x| min_preactivation(&model, x) < KINK_MARGIN) {
            continue;
        }
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        cases.push(Case { model, inputs, labels });
    }
    Ok(cases)
}

/// Classification, auxiliary and joint loss gradients of the network.
pub fn joint_loss_suite(cases: usize, seed: u64) -> Result<GradcheckReport> {
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for case in draw_cases(cases, seed)? {
        let batch = case.batch();
        let mut probe = case.model.clone();
        for spec in [LossSpec::Cls, LossSpec::Aux, LossSpec::Joint] {
            let g = case.model.backward(&batch, spec)?.to_flat();
            let fd = central_difference(&case.model.to_flat(), |w| {
                probe.set_flat(w)?;
                probe.loss(&batch, spec)
            })?;
            for (a, b) in g.iter().zip(&fd) {
                worst = worst.max(rel_err(*a, *b));
            }
            entries += g.len();
        }
    }
    Ok(GradcheckReport {
        suite: "joint_loss",
        cases,
        entries,
        max_rel_err: worst,
    })
}

/// The migration penalty alone, on random flat vectors.
pub fn migration_suite(cases: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = stream_rng(seed, Stream::Eval, &[0x6b6d]);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..120);
        let d = rng.random_range(0..4);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let snaps: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let rho: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = migration_grad(&w, &snaps, &rho)?;
        let fd = central_difference(&w, |p| migration_loss(p, &snaps, &rho))?;
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b));
        }
        entries += n;
    }
    Ok(GradcheckReport {
        suite: "migration_loss",
        cases,
        entries,
        max_rel_err: worst,
    })
}

/// The full local objective: joint loss plus migration toward random anchors.
pub fn local_objective_suite(cases: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = stream_rng(seed, Stream::Eval, &[0x6c6f]);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for case in draw_cases(cases, seed ^ 0x5eed)? {
        let batch = case.batch();
        let w = case.model.to_flat();
        let d = rng.random_range(1..3);
        let snaps: Vec<Vec<f64>> = (0..d)
            .map(|_| w.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect())
            .collect();
        let rho: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut g = case.model.backward(&batch, LossSpec::Joint)?.to_flat();
        for (gi, mi) in g.iter_mut().zip(migration_grad(&w, &snaps, &rho)?) {
            *gi += mi;
        }
        let mut probe = case.model.clone();
        let fd = central_difference(&w, |p| {
            probe.set_flat(p)?;
            Ok(probe.loss(&batch, LossSpec::Joint)? + migration_loss(p, &snaps, &rho)?)
        })?;
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b));
        }
        entries += g.len();
    }
    Ok(GradcheckReport {
        suite: "local_objective",
        cases,
        entries,
        max_rel_err: worst,
    })
}

/// Every suite with `cases` random cases each.
pub fn run_all(cases: usize, seed: u64) -> Result<Vec<GradcheckReport>> {
    Ok(vec![
        joint_loss_suite(cases, seed)?,
        migration_suite(cases, seed)?,
        local_objective_suite(cases, seed)?,
    ])
}
