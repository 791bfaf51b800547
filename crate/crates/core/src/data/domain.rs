use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// One label-preserving feature transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    Identity,
    /// Rotates every consecutive coordinate pair `(2i, 2i+1)` by `angle`
    /// radians. With an odd dimension the last coordinate is left alone.
    Rotation { angle: f64 },
    /// `x ↦ A x + b`, with `A` given row by row.
    Affine { matrix: Vec<Vec<f64>>, shift: Vec<f64> },
    /// Adds fresh isotropic Gaussian noise to each sample.
    Noise { sigma: f64 },
    /// `x'[i] = x[permutation[i]]`.
    Permute { permutation: Vec<usize> },
}

/// An ordered composition of transforms applied to the base features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub transforms: Vec<Transform>,
}

impl DomainSpec {
    pub fn identity() -> Self {
        DomainSpec {
            name: "identity".into(),
            transforms: Vec::new(),
        }
    }

    pub fn rotation_degrees(degrees: f64, noise_sigma: f64) -> Self {
        let mut transforms = vec![Transform::Rotation {
            angle: degrees.to_radians(),
        }];
        if noise_sigma > 0.0 {
            transforms.push(Transform::Noise { sigma: noise_sigma });
        }
        DomainSpec {
            name: format!("rot{degrees}"),
            transforms,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for t in &self.transforms {
            t.validate(dim)?;
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.transforms.iter().all(|t| matches!(t, Transform::Identity))
    }

    /// Applies every transform in order. Noise draws come from `rng`.
    pub fn apply(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let mut v = x.to_vec();
        for t in &self.transforms {
            t.validate(v.len())?;
            v = t.apply(&v, rng);
        }
        Ok(v)
    }
}

impl Transform {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Transform::Identity => Ok(()),
            Transform::Rotation { angle } => {
                if angle.is_finite() {
                    Ok(())
                } else {
                    Err(Error::input("rotation angle must be finite"))
                }
            }
            Transform::Affine { matrix, shift } => {
                if matrix.len() != dim || shift.len() != dim {
                    return Err(Error::input(format!(
                        "affine transform is {}x? with shift {}, features have dimension {dim}",
                        matrix.len(),
                        shift.len()
                    )));
                }
                if matrix.iter().any(|row| row.len() != dim) {
                    return Err(Error::input(format!(
                        "affine matrix rows must have length {dim}"
                    )));
                }
                Ok(())
            }
            Transform::Noise { sigma } => {
                if *sigma >= 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::input("noise sigma must be finite and non-negative"))
                }
            }
            Transform::Permute { permutation } => {
                let mut seen = vec![false; dim];
                if permutation.len() != dim {
                    return Err(Error::input(format!(
                        "permutation has length {}, features have dimension {dim}",
                        permutation.len()
                    )));
                }
                for &p in permutation {
                    if p >= dim || seen[p] {
                        return Err(Error::input("permutation is not a bijection"));
                    }
                    seen[p] = true;
                }
                Ok(())
            }
        }
    }

    fn apply(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        match self {
            Transform::Identity => x.to_vec(),
            Transform::Rotation { angle } => {
                let (s, c) = angle.sin_cos();
                let mut out = x.to_vec();
                for pair in out.chunks_exact_mut(2) {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = c * a - s * b;
                    pair[1] = s * a + c * b;
                }
                out
            }
            Transform::Affine { matrix, shift } => matrix
                .iter()
                .zip(shift)
                .map(|(row, b)| b + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                .collect(),
            Transform::Noise { sigma } => {
                if *sigma == 0.0 {
                    return x.to_vec();
                }
                let normal = Normal::new(0.0, *sigma).expect("validated sigma");
                x.iter().map(|v| v + normal.sample(rng)).collect()
            }
            Transform::Permute { permutation } => permutation.iter().map(|&i| x[i]).collect(),
        }
    }
}
