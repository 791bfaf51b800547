use crate::error::{Error, Result};

/// Clamp applied to sigmoid scores before taking logarithms.
pub const SCORE_EPS: f64 = 1e-12;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `-log softmax(logits)[label]`, computed as `logsumexp(logits) - logits[label]`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}

pub fn binary_cross_entropy(score: f64, label: bool) -> f64 {
    let s = score.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    if label {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}
