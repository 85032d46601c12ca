//! Laplace-quantile threshold on predicted uncertainty and the resulting
//! pseudo-label selection.

use crate::data::raster::Raster;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdParams {
    /// Median of σ (upper median for even counts).
    pub mu: f64,
    /// Mean absolute deviation of σ from `mu`.
    pub b: f64,
    pub alpha: f64,
    pub tau: f64,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.5 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha = {alpha} must lie in the open interval (0.5, 1)")))
    }
}

/// `tau = mu + b * ln(2 (1 - alpha))`. For σ drawn from a Laplace law this
/// keeps roughly a `1 - alpha` fraction of the pixels.
pub fn threshold_params(sigma: &[f64], alpha: f64) -> Result<ThresholdParams> {
    check_alpha(alpha)?;
    if sigma.is_empty() {
        return Err(Error::Contract("cannot threshold an empty uncertainty map".into()));
    }
    let mut sorted = sigma.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mu = sorted[sorted.len() / 2];
    let b = sigma.iter().map(|s| (s - mu).abs()).sum::<f64>() / sigma.len() as f64;
    let tau = mu + b * (2.0 * (1.0 - alpha)).ln();
    Ok(ThresholdParams { mu, b, alpha, tau })
}

pub fn compute_threshold(sigma: &[f64], alpha: f64) -> Result<f64> {
    Ok(threshold_params(sigma, alpha)?.tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    /// `H x W x 2`.
    pub correspondence: Raster<f32>,
    /// `H x W x 1`, 1 where `σ < τ`.
    pub validity: Raster<f32>,
    pub threshold: f64,
    pub coverage: f64,
}

/// Keeps the pixels of `field` whose uncertainty is strictly below the threshold.
pub fn make_pseudo_labels(field: &Raster<f32>, sigma: &Raster<f32>, alpha: f64) -> Result<PseudoLabelSet> {
    if (field.height, field.width, field.channels) != (sigma.height, sigma.width, 2) || sigma.channels != 1 {
        return Err(Error::Contract(format!(
            "field {:?} and uncertainty {:?} do not match",
            field.shape(),
            sigma.shape()
        )));
    }
    let values: Vec<f64> = sigma.data.iter().map(|&s| s as f64).collect();
    let tau = compute_threshold(&values, alpha)?;
    let mut validity = Raster::filled(sigma.height, sigma.width, 1, 0.0f32);
    let mut kept = 0usize;
    for (v, &s) in validity.data.iter_mut().zip(&values) {
        if s < tau {
            *v = 1.0;
            kept += 1;
        }
    }
    Ok(PseudoLabelSet {
        correspondence: field.clone(),
        validity,
        threshold: tau,
        coverage: kept as f64 / values.len() as f64,
    })
}
