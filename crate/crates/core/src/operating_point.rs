//! Sweeping the risk level `alpha`, grouping the sweep into plateaus of equal
//! calibrated `lambda`, and choosing the operating point.
//!
//! The chosen `alpha` is the lower end of the longest plateau: a long run of
//! identical `lambda_hat` means the calibrated rule is insensitive to small
//! changes of `alpha`. Ties go to the plateau with lower empirical risk, then
//! to the lower `alpha`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::Dataset;
use crate::riskcontrol::{calibrate_lambda, empirical_risk, mean_set_size, LambdaGrid, SetLoss};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub alpha: f64,
    pub lambda_hat: f64,
    /// Plain mean loss on the calibration data at `lambda_hat`.
    pub empirical_risk: f64,
    pub avg_set_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub length: usize,
    pub lambda_hat: f64,
    pub risk: f64,
    pub avg_set_size: f64,
}

/// `{0.05, 0.10, ..., 0.95}`.
pub fn default_alpha_grid() -> Vec<f64> {
    alpha_range(0.05, 0.95, 0.05)
}

/// Inclusive range `start, start + step, ...` up to `end`, each value computed
/// by multiplication and rounded to 1e-12 so that `0.1 + 0.05 * 1` prints as
/// `0.15`.
pub fn alpha_range(start: f64, end: f64, step: f64) -> Vec<f64> {
    if step <= 0.0 || end < start {
        return vec![];
    }
    let count = ((end - start) / step + 1e-9).floor() as usize;
    (0..=count)
        .map(|i| ((start + step * i as f64) * 1e12).round() / 1e12)
        .collect()
}

pub fn sweep_alpha(
    calibration: &Dataset,
    alpha_grid: &[f64],
    lambda_grid: &LambdaGrid,
    loss: &dyn SetLoss,
) -> Result<Vec<OperatingPoint>> {
    if alpha_grid.is_empty() {
        return Err(Error::EmptyInput("alpha grid is empty".into()));
    }
    if alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("alpha grid must be strictly ascending".into()));
    }
    alpha_grid
        .iter()
        .map(|&alpha| {
            let cal = calibrate_lambda(calibration, alpha, lambda_grid, loss)?;
            Ok(OperatingPoint {
                alpha,
                lambda_hat: cal.lambda_hat,
                empirical_risk: empirical_risk(calibration, cal.lambda_hat, loss)?,
                avg_set_size: mean_set_size(calibration, cal.lambda_hat)?,
            })
        })
        .collect()
}

/// Maximal runs of consecutive points sharing the same `lambda_hat`.
pub fn detect_plateaus(points: &[OperatingPoint]) -> Vec<Plateau> {
    let mut plateaus: Vec<Plateau> = Vec::new();
    for p in points {
        match plateaus.last_mut() {
            Some(last) if last.lambda_hat == p.lambda_hat => {
                last.alpha_hi = p.alpha;
                last.length += 1;
            }
            _ => plateaus.push(Plateau {
                alpha_lo: p.alpha,
                alpha_hi: p.alpha,
                length: 1,
                lambda_hat: p.lambda_hat,
                risk: p.empirical_risk,
                avg_set_size: p.avg_set_size,
            }),
        }
    }
    plateaus
}

/// Index into `plateaus` of the selected one.
pub fn select_plateau(plateaus: &[Plateau]) -> Result<usize> {
    plateaus
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            b.length
                .cmp(&a.length)
                .then(a.risk.partial_cmp(&b.risk).unwrap_or(Ordering::Equal))
                .then(a.alpha_lo.partial_cmp(&b.alpha_lo).unwrap_or(Ordering::Equal))
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::EmptyInput("no plateaus to select from".into()))
}

pub fn select_alpha(plateaus: &[Plateau]) -> Result<f64> {
    select_plateau(plateaus).map(|i| plateaus[i].alpha_lo)
}
