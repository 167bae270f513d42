//! Prediction sets, the false-negative-rate loss, and conformal risk control
//! calibration of the conservativeness parameter `lambda`.
//!
//! A class `k` belongs to the prediction set at `lambda` when its score reaches
//! the threshold `1 - lambda` (see [`includes`]). Larger `lambda` means a lower
//! threshold, so sets are nested: `lambda_1 <= lambda_2` implies
//! `C(x, lambda_1) ⊆ C(x, lambda_2)`.
//!
//! Calibration picks the smallest grid value whose finite-sample adjusted risk
//! `(sum_i L_i(lambda) + 1) / (n + 1)` is at most `alpha`. For a loss that is
//! bounded in `[0, 1]` and non-increasing in `lambda`, the expected test loss at
//! that value is at most `alpha` under exchangeability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::Dataset;

/// Membership test shared by every caller: `score >= 1 - lambda`.
///
/// Non-strict so that `lambda = 1` (threshold 0) always yields the full set.
#[inline]
pub fn includes(score: f64, lambda: f64) -> bool {
    score >= 1.0 - lambda
}

/// Number of steps in the default grid `{0, 0.001, ..., 1}`.
pub const DEFAULT_GRID_STEPS: usize = 1000;

/// Candidate `lambda` values: strictly ascending, within `[0, 1]`, ending at 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LambdaGrid(Vec<f64>);

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidGrid(format!("{v} is outside [0, 1]")));
        }
        if let Some(w) = values.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid(format!(
                "values must be strictly ascending ({} then {})",
                w[0], w[1]
            )));
        }
        if values.last() != Some(&1.0) {
            return Err(Error::InvalidGrid("the last value must be 1.0".into()));
        }
        Ok(Self(values))
    }

    /// `{0, 1/steps, 2/steps, ..., 1}`, each value computed as `i / steps`.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Self::new(vec![1.0]);
        }
        Self::new((0..=steps).map(|i| i as f64 / steps as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        *self.0.last().expect("grid is non-empty")
    }

    /// Index of the first grid value at which `score` is included, or
    /// `len()` when it never is.
    fn entry_index(&self, score: f64) -> usize {
        self.0.partition_point(|&lambda| !includes(score, lambda))
    }
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self::uniform(DEFAULT_GRID_STEPS).expect("default grid is valid")
    }
}

impl<'de> Deserialize<'de> for LambdaGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        LambdaGrid::new(values).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub case_id: String,
    /// Class indices in ascending order.
    pub members: Vec<usize>,
    pub lambda_used: f64,
}

impl PredictionSet {
    pub fn contains(&self, class: usize) -> bool {
        self.members.binary_search(&class).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Range(format!("lambda {lambda} is outside [0, 1]")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Range(format!("alpha {alpha} is outside [0, 1]")))
    }
}

pub fn prediction_set(case_id: &str, scores: &[f64], lambda: f64) -> Result<PredictionSet> {
    check_lambda(lambda)?;
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Range(format!("score {s} is outside [0, 1]")));
    }
    Ok(PredictionSet {
        case_id: case_id.to_string(),
        members: scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| includes(s, lambda))
            .map(|(k, _)| k)
            .collect(),
        lambda_used: lambda,
    })
}

/// Prediction sets for every row of `dataset` at one `lambda`.
pub fn prediction_sets(dataset: &Dataset, lambda: f64) -> Result<Vec<PredictionSet>> {
    dataset
        .scores
        .case_ids()
        .iter()
        .zip(dataset.scores.rows())
        .map(|(id, row)| prediction_set(id, row, lambda))
        .collect()
}

/// A per-case loss evaluated on a prediction set.
///
/// Implementations must return values in `[0, 1]`, and conformal guarantees
/// additionally require the loss to be non-increasing as the set grows; use
/// [`verify_monotone`] to check that on data.
pub trait SetLoss: Sync {
    fn name(&self) -> &str;

    /// `members` is sorted ascending; `truth` has one bit per class.
    fn evaluate(&self, members: &[usize], truth: &[u8]) -> f64;
}

/// Fraction of true positives missing from the set; 0 when there are none.
#[derive(Debug, Clone, Copy, Default)]
pub struct FalseNegativeRate;

impl SetLoss for FalseNegativeRate {
    fn name(&self) -> &str {
        "fnr"
    }

    fn evaluate(&self, members: &[usize], truth: &[u8]) -> f64 {
        let mut positives = 0usize;
        let mut missed = 0usize;
        for (k, &y) in truth.iter().enumerate() {
            if y == 1 {
                positives += 1;
                if members.binary_search(&k).is_err() {
                    missed += 1;
                }
            }
        }
        missed as f64 / positives.max(1) as f64
    }
}

pub fn fnr_loss(set: &PredictionSet, truth: &[u8]) -> f64 {
    FalseNegativeRate.evaluate(&set.members, truth)
}

/// Piecewise-constant loss of one case over the grid: `values[s]` holds on
/// grid indices `starts[s]..starts[s + 1]` (the last segment runs to the end).
struct LossProfile {
    starts: Vec<usize>,
    values: Vec<f64>,
}

impl LossProfile {
    fn new(row: &[f64], truth: &[u8], grid: &LambdaGrid, loss: &dyn SetLoss) -> Result<Self> {
        let mut entries: Vec<(usize, usize)> = row
            .iter()
            .enumerate()
            .map(|(k, &s)| (grid.entry_index(s), k))
            .collect();
        entries.sort_unstable();

        let mut members = Vec::with_capacity(row.len());
        let mut starts = Vec::with_capacity(row.len() + 1);
        let mut values = Vec::with_capacity(row.len() + 1);
        let mut next = 0;
        // segment boundaries are 0 plus every distinct entry index below len()
        let mut boundary = 0;
        loop {
            while next < entries.len() && entries[next].0 <= boundary {
                let pos = members.binary_search(&entries[next].1).unwrap_err();
                members.insert(pos, entries[next].1);
                next += 1;
            }
            let value = loss.evaluate(&members, truth);
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Range(format!(
                    "loss {} returned {value}, outside [0, 1]",
                    loss.name()
                )));
            }
            starts.push(boundary);
            values.push(value);
            match entries.get(next) {
                Some(&(idx, _)) if idx < grid.len() => boundary = idx,
                _ => break,
            }
        }
        Ok(Self { starts, values })
    }

    fn segments(&self, grid_len: usize) -> impl Iterator<Item = (std::ops::Range<usize>, f64)> + '_ {
        (0..self.starts.len()).map(move |s| {
            let end = self.starts.get(s + 1).copied().unwrap_or(grid_len);
            (self.starts[s]..end, self.values[s])
        })
    }
}

/// `sum_i L_i(lambda_j)` for every grid index `j`, accumulated in case order.
fn summed_losses(dataset: &Dataset, grid: &LambdaGrid, loss: &dyn SetLoss) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; grid.len()];
    for (row, truth) in dataset.scores.rows().zip(dataset.labels.rows()) {
        let profile = LossProfile::new(row, truth, grid, loss)?;
        for (range, value) in profile.segments(grid.len()) {
            for s in &mut sums[range] {
                *s += value;
            }
        }
    }
    Ok(sums)
}

/// Mean per-case loss of the prediction sets at `lambda`.
pub fn empirical_risk(dataset: &Dataset, lambda: f64, loss: &dyn SetLoss) -> Result<f64> {
    check_lambda(lambda)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut members = Vec::with_capacity(dataset.k());
    for (row, truth) in dataset.scores.rows().zip(dataset.labels.rows()) {
        members.clear();
        members.extend((0..row.len()).filter(|&k| includes(row[k], lambda)));
        total += loss.evaluate(&members, truth);
    }
    Ok(total / dataset.n() as f64)
}

/// Mean prediction-set size at `lambda`.
pub fn mean_set_size(dataset: &Dataset, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: usize = dataset
        .scores
        .rows()
        .map(|row| row.iter().filter(|&&s| includes(s, lambda)).count())
        .sum();
    Ok(total as f64 / dataset.n() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub lambda_hat: f64,
    /// True when no grid value met the bound and `lambda_hat` fell back to
    /// the grid maximum.
    pub vacuous: bool,
    pub n_calibration: usize,
    /// `(lambda, adjusted risk)` pairs in grid order.
    pub risk_curve: Vec<(f64, f64)>,
}

impl CalibrationResult {
    pub fn adjusted_risk_at(&self, lambda: f64) -> Option<f64> {
        self.risk_curve
            .iter()
            .find(|(l, _)| *l == lambda)
            .map(|(_, r)| *r)
    }
}

/// Adjusted risk curve `(sum_i L_i(lambda) + 1) / (n + 1)` over the grid.
pub fn adjusted_risk_curve(
    dataset: &Dataset,
    grid: &LambdaGrid,
    loss: &dyn SetLoss,
) -> Result<Vec<(f64, f64)>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let denom = (dataset.n() + 1) as f64;
    Ok(summed_losses(dataset, grid, loss)?
        .into_iter()
        .zip(grid.values())
        .map(|(sum, &lambda)| (lambda, (sum + 1.0) / denom))
        .collect())
}

/// Smallest grid `lambda` whose adjusted risk is at most `alpha`.
pub fn calibrate_lambda(
    dataset: &Dataset,
    alpha: f64,
    grid: &LambdaGrid,
    loss: &dyn SetLoss,
) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    let risk_curve = adjusted_risk_curve(dataset, grid, loss)?;
    let chosen = risk_curve.iter().find(|(_, risk)| *risk <= alpha);
    let (lambda_hat, vacuous) = match chosen {
        Some(&(lambda, _)) => (lambda, false),
        None => (grid.max(), true),
    };
    Ok(CalibrationResult {
        alpha,
        lambda_hat,
        vacuous,
        n_calibration: dataset.n(),
        risk_curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneViolation {
    pub case_id: String,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub loss_lo: f64,
    pub loss_hi: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub loss: String,
    pub violations: Vec<MonotoneViolation>,
}

impl MonotoneReport {
    pub fn is_monotone(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every adjacent grid pair at which some case's loss increases.
///
/// Any increase between non-adjacent grid values implies one between an
/// adjacent pair, so an empty report certifies monotonicity on this data.
pub fn verify_monotone(
    loss: &dyn SetLoss,
    dataset: &Dataset,
    grid: &LambdaGrid,
) -> Result<MonotoneReport> {
    let mut violations = Vec::new();
    for ((id, row), truth) in dataset
        .scores
        .case_ids()
        .iter()
        .zip(dataset.scores.rows())
        .zip(dataset.labels.rows())
    {
        let profile = LossProfile::new(row, truth, grid, loss)?;
        for s in 1..profile.starts.len() {
            let (before, after) = (profile.values[s - 1], profile.values[s]);
            if after > before {
                let j = profile.starts[s];
                violations.push(MonotoneViolation {
                    case_id: id.clone(),
                    lambda_lo: grid.values()[j - 1],
                    lambda_hi: grid.values()[j],
                    loss_lo: before,
                    loss_hi: after,
                });
            }
        }
    }
    Ok(MonotoneReport {
        loss: loss.name().to_string(),
        violations,
    })
}
