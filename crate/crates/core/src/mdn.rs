//! Diagonal-Gaussian mixture density output.
//!
//! A frame is described by `K` mixture logits, `K x D` means and `K x D`
//! log standard deviations, stored component-major (`k * D + d`).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numeric::{argmax, logsumexp, softmax_into};

/// Log standard deviations are clamped from below at this value.
pub const LOG_SIGMA_FLOOR: f64 = -7.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MdnParams {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_sigmas: Vec<f64>,
}

impl MdnParams {
    pub fn new(logits: Vec<f64>, means: Vec<f64>, log_sigmas: Vec<f64>) -> Result<Self> {
        let k = logits.len();
        if k == 0 {
            return Err(Error::Invalid(
                "mixture needs at least one component".into(),
            ));
        }
        if means.len() != log_sigmas.len() || means.len() % k != 0 || means.is_empty() {
            return Err(Error::Invalid(format!(
                "mixture shape mismatch: {} logits, {} means, {} log-sigmas",
                k,
                means.len(),
                log_sigmas.len()
            )));
        }
        Ok(MdnParams {
            logits,
            means,
            log_sigmas,
        })
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means.len() / self.logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.logits.len()];
        softmax_into(&self.logits, &mut w);
        w
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.log_sigmas
            .iter()
            .map(|&s| s.max(LOG_SIGMA_FLOOR).exp())
            .collect()
    }
}

/// Negative log-likelihood of `target` under the mixture.
pub fn mdn_nll(mdn: &MdnParams, target: &[f64]) -> Result<f64> {
    if target.len() != mdn.dim() {
        return Err(Error::Invalid(format!(
            "target has {} dims, mixture has {}",
            target.len(),
            mdn.dim()
        )));
    }
    Ok(row_nll(
        &mdn.logits,
        &mdn.means,
        &mdn.log_sigmas,
        target,
        None,
    ))
}

/// Mean of the highest-weight component; ties go to the lower index.
pub fn mdn_point(mdn: &MdnParams) -> Vec<f64> {
    let d = mdn.dim();
    let k = argmax(&mdn.logits);
    mdn.means[k * d..(k + 1) * d].to_vec()
}

/// Gradient buffers for one row: logits, means, log-sigmas.
pub(crate) struct RowGrad<'a> {
    pub logits: &'a mut [f64],
    pub means: &'a mut [f64],
    pub log_sigmas: &'a mut [f64],
    pub scale: f64,
}

/// NLL of one frame; when `grad` is given, accumulates `scale * dNLL/dparam`.
pub(crate) fn row_nll(
    logits: &[f64],
    means: &[f64],
    log_sigmas: &[f64],
    target: &[f64],
    grad: Option<RowGrad<'_>>,
) -> f64 {
    let k = logits.len();
    let d = target.len();
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let log_norm = logsumexp(logits);

    let mut comp = vec![0.0; k];
    for c in 0..k {
        let mut ll = logits[c] - log_norm;
        for j in 0..d {
            let ls = log_sigmas[c * d + j].max(LOG_SIGMA_FLOOR);
            let z = (target[j] - means[c * d + j]) * (-ls).exp();
            ll -= half_log_2pi + ls + 0.5 * z * z;
        }
        comp[c] = ll;
    }
    let total = logsumexp(&comp);
    let nll = -total;

    if let Some(g) = grad {
        let mut prior = vec![0.0; k];
        softmax_into(logits, &mut prior);
        for c in 0..k {
            let resp = (comp[c] - total).exp();
            g.logits[c] += g.scale * (prior[c] - resp);
            for j in 0..d {
                let raw = log_sigmas[c * d + j];
                let ls = raw.max(LOG_SIGMA_FLOOR);
                let inv = (-ls).exp();
                let diff = target[j] - means[c * d + j];
                let z = diff * inv;
                g.means[c * d + j] -= g.scale * resp * diff * inv * inv;
                if raw > LOG_SIGMA_FLOOR {
                    g.log_sigmas[c * d + j] += g.scale * resp * (1.0 - z * z);
                }
            }
        }
    }
    nll
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_at_its_mean() {
        let d = 5;
        let target = vec![0.3; d];
        let mdn = MdnParams::new(vec![0.0], target.clone(), vec![0.0; d]).unwrap();
        let expect = d as f64 / 2.0 * (2.0 * PI).ln();
        assert!((mdn_nll(&mdn, &target).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_components_reduce_to_one() {
        let target = vec![1.0, -2.0, 0.5];
        let one = MdnParams::new(vec![0.0], target.clone(), vec![0.0; 3]).unwrap();
        let mut means = target.clone();
        means.extend(&target);
        let two = MdnParams::new(vec![2.0, -1.3], means, vec![0.0; 6]).unwrap();
        let a = mdn_nll(&one, &target).unwrap();
        let b = mdn_nll(&two, &target).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn point_picks_heaviest_component() {
        let means = vec![1.0, 2.0, 3.0, 4.0];
        let w = |l: Vec<f64>| MdnParams::new(l, means.clone(), vec![0.0; 4]).unwrap();
        assert_eq!(
            mdn_point(&w(vec![0.9f64.ln(), 0.1f64.ln()])),
            vec![1.0, 2.0]
        );
        assert_eq!(
            mdn_point(&w(vec![0.1f64.ln(), 0.9f64.ln()])),
            vec![3.0, 4.0]
        );
        assert_eq!(
            mdn_point(&w(vec![0.5f64.ln(), 0.5f64.ln()])),
            vec![1.0, 2.0]
        );
        let single = MdnParams::new(vec![0.0], vec![7.0, 8.0], vec![0.0; 2]).unwrap();
        assert_eq!(mdn_point(&single), vec![7.0, 8.0]);
    }

    #[test]
    fn floor_keeps_nll_finite() {
        let mdn = MdnParams::new(vec![0.0], vec![0.0], vec![-500.0]).unwrap();
        assert!(mdn_nll(&mdn, &[1e-3]).unwrap().is_finite());
        assert_eq!(mdn.sigmas()[0], LOG_SIGMA_FLOOR.exp());
    }

    #[test]
    fn weights_sum_to_one() {
        let mdn = MdnParams::new(vec![3.0, -1.0, 0.2], vec![0.0; 6], vec![0.0; 6]).unwrap();
        assert!((mdn.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
