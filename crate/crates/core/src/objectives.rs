//! Separation and classification losses, and the evaluation metrics.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Relative guard on the distortion energy: a perfect estimate scores
/// `10·log10(1/eps)` = 80 dB whatever its scale.
pub const SI_SDR_EPS: f64 = 1e-8;
/// Returned whenever the projected target energy vanishes.
pub const SI_SDR_FLOOR_DB: f64 = -80.0;
/// Relative guard of [`snr`]; same 80 dB ceiling as SI-SDR.
pub const SNR_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the classification term in the combined loss.
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 0.5 }
    }
}

impl LossWeights {
    pub fn new(lambda_cls: f64) -> Result<Self> {
        if !(lambda_cls >= 0.0 && lambda_cls.is_finite()) {
            return Err(Error::usage(format!("lambda_cls must be a finite value >= 0, got {lambda_cls}")));
        }
        Ok(LossWeights { lambda_cls })
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("signal lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::dim("empty signals"));
    }
    Ok(())
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB together with its gradient w.r.t. the estimate.
///
/// Both signals are mean-removed; the reference is projected onto the
/// estimate's direction via `α = ⟨ŝ, s⟩ / ‖s‖²`.
pub fn si_sdr_with_grad(estimate: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(estimate, reference)?;
    let r = zero_mean(reference);
    let energy = dot(&r, &r);
    if energy == 0.0 {
        return Err(Error::usage("si_sdr reference is identically zero (after mean removal)"));
    }
    let e = zero_mean(estimate);
    let proj = dot(&e, &r);
    let alpha = proj / energy;
    let num = alpha * alpha * energy;
    let distortion: f64 = e
        .iter()
        .zip(&r)
        .map(|(ev, rv)| {
            let d = alpha * rv - ev;
            d * d
        })
        .sum();
    let den = distortion + SI_SDR_EPS * num;
    let floor = || (SI_SDR_FLOOR_DB, vec![0.0; estimate.len()]);
    if num == 0.0 {
        return Ok(floor());
    }
    let value = 10.0 * (num / den).log10();
    if !(value > SI_SDR_FLOOR_DB) {
        return Ok(floor());
    }
    let k = 10.0 / LN_10;
    let mut grad: Vec<f64> = e
        .iter()
        .zip(&r)
        .map(|(ev, rv)| k * (2.0 * rv / proj - (2.0 * (ev - alpha * rv) + SI_SDR_EPS * 2.0 * alpha * rv) / den))
        .collect();
    // mean removal of the estimate is linear; its adjoint centers the gradient
    let gm = grad.iter().sum::<f64>() / grad.len() as f64;
    grad.iter_mut().for_each(|g| *g -= gm);
    Ok((value, grad))
}

pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(si_sdr_with_grad(estimate, reference)?.0)
}

/// Negative SI-SDR, the separation loss.
pub fn loss_separation(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(-si_sdr(estimate, reference)?)
}

/// Records the separation loss of a waveform node on the tape.
pub fn loss_separation_node(graph: &mut Graph, estimate: Var, reference: &[f64]) -> Result<Var> {
    let (value, grad) = si_sdr_with_grad(graph.value(estimate).data(), reference)?;
    graph.fused_scalar(estimate, -value, grad.into_iter().map(|g| -g).collect())
}

fn check_classification(probs: &[f64], targets: &[f64]) -> Result<()> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::dim(format!(
            "classification lengths differ: {} vs {}",
            probs.len(),
            targets.len()
        )));
    }
    if probs.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::usage("class probabilities must lie strictly inside (0, 1)"));
    }
    if targets.iter().any(|&o| o != 0.0 && o != 1.0) {
        return Err(Error::usage("class targets must be binary"));
    }
    Ok(())
}

/// Binary cross-entropy averaged over classes.
pub fn loss_classification(probs: &[f64], targets: &[f64]) -> Result<f64> {
    check_classification(probs, targets)?;
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(&p, &o)| -(o * p.ln() + (1.0 - o) * (1.0 - p).ln()))
        .sum::<f64>()
        / n)
}

pub fn loss_classification_node(graph: &mut Graph, probs: Var, targets: &[f64]) -> Result<Var> {
    let p = graph.value(probs).data().to_vec();
    let value = loss_classification(&p, targets)?;
    let n = p.len() as f64;
    let grad = p
        .iter()
        .zip(targets)
        .map(|(&p, &o)| (p - o) / (p * (1.0 - p)) / n)
        .collect();
    graph.fused_scalar(probs, value, grad)
}

pub fn loss_combined(separation: f64, classification: f64, weights: LossWeights) -> f64 {
    separation + weights.lambda_cls * classification
}

pub fn loss_combined_node(graph: &mut Graph, separation: Var, classification: Var, weights: LossWeights) -> Result<Var> {
    let scaled = graph.scale(classification, weights.lambda_cls);
    graph.add(separation, scaled)
}

/// SI-SDR improvement of `estimate` over the unprocessed `mixture`.
pub fn si_snri(estimate: &[f64], reference: &[f64], mixture: &[f64]) -> Result<f64> {
    Ok(si_sdr(estimate, reference)? - si_sdr(mixture, reference)?)
}

pub fn snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(estimate, reference)?;
    let signal = dot(reference, reference);
    if signal == 0.0 {
        return Err(Error::usage("snr reference is identically zero"));
    }
    let noise: f64 = estimate.iter().zip(reference).map(|(e, s)| (s - e) * (s - e)).sum();
    Ok(10.0 * (signal / (noise + SNR_EPS * signal)).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn si_sdr_hand_case() {
        let s = [1.0, 0.0, -1.0, 0.0];
        let e = [1.0, 1.0, -1.0, -1.0];
        assert_abs_diff_eq!(si_sdr(&e, &s).unwrap(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn si_sdr_ceiling_is_scale_invariant() {
        let s: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let a = si_sdr(&s, &s).unwrap();
        let b = si_sdr(&twice, &s).unwrap();
        assert_abs_diff_eq!(a, 80.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn orthogonal_estimate_hits_floor() {
        let s = [1.0, -1.0, 1.0, -1.0];
        let e = [1.0, 1.0, -1.0, -1.0];
        assert_eq!(si_sdr(&e, &s).unwrap(), SI_SDR_FLOOR_DB);
        assert_eq!(si_sdr(&[3.0; 4], &s).unwrap(), SI_SDR_FLOOR_DB);
    }

    #[test]
    fn zero_reference_is_usage_error() {
        assert!(matches!(si_sdr(&[1.0, 2.0], &[0.5, 0.5]), Err(Error::Usage(_))));
        assert!(matches!(si_sdr(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn bce_values() {
        assert_abs_diff_eq!(loss_classification(&[0.5], &[1.0]).unwrap(), 0.693_147, epsilon = 1e-4);
        let good = loss_classification(&[0.001, 0.999], &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(good, -(0.999f64).ln(), epsilon = 1e-12);
        let p = [0.2, 0.7, 0.9];
        let o = [1.0, 0.0, 1.0];
        let flipped_p: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let flipped_o: Vec<f64> = o.iter().map(|v| 1.0 - v).collect();
        assert_abs_diff_eq!(
            loss_classification(&p, &o).unwrap(),
            loss_classification(&flipped_p, &flipped_o).unwrap(),
            epsilon = 1e-12
        );
        assert!(matches!(loss_classification(&[1.0], &[1.0]), Err(Error::Usage(_))));
        assert!(matches!(loss_classification(&[0.5], &[0.5]), Err(Error::Usage(_))));
    }

    #[test]
    fn combined_arithmetic() {
        assert_eq!(loss_combined(-8.0, 0.7, LossWeights::new(0.5).unwrap()), -7.65);
        assert_eq!(loss_combined(-8.0, 0.7, LossWeights::new(0.0).unwrap()), -8.0);
        assert_eq!(LossWeights::default().lambda_cls, 0.5);
        assert!(LossWeights::new(-0.1).is_err());
    }

    #[test]
    fn improvement_metrics() {
        let s: Vec<f64> = (0..200).map(|i| (i as f64 * 0.05).sin()).collect();
        let x: Vec<f64> = s.iter().enumerate().map(|(i, v)| v + 0.3 * (i as f64 * 1.7).cos()).collect();
        assert_abs_diff_eq!(si_snri(&x, &s, &x).unwrap(), 0.0, epsilon = 1e-12);
        assert!(si_snri(&s, &s, &x).unwrap() > 0.0);
        assert_abs_diff_eq!(snr(&s, &s).unwrap(), 80.0, epsilon = 1e-9);
    }
}
