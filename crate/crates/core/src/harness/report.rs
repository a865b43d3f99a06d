use std::time::Duration;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::randomizers::BudgetLedger;
use crate::rng::SeedPath;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// One protocol execution.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub estimate: Vec<f64>,
    pub exact: Vec<f64>,
    /// `(estimate − exact)²`, the largest coordinate for vector estimates.
    pub squared_error: f64,
    /// Not written to any report, which must stay byte-reproducible.
    pub wall_time: Duration,
}

impl TrialResult {
    pub fn new(trial: usize, estimate: Vec<f64>, exact: Vec<f64>) -> Self {
        let squared_error = estimate
            .iter()
            .zip(&exact)
            .map(|(e, x)| (e - x) * (e - x))
            .fold(0.0, f64::max);
        TrialResult {
            trial,
            estimate,
            exact,
            squared_error,
            wall_time: Duration::ZERO,
        }
    }
}

/// Summary of one `(n, ε)` grid cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub statistic: String,
    pub protocol: String,
    pub k: usize,
    pub n: usize,
    pub epsilon: f64,
    pub trials: usize,
    /// MSE, or for vector estimates the largest per-coordinate MSE.
    pub mse: f64,
    pub mse_ci_lo: f64,
    pub mse_ci_hi: f64,
    /// Mean error at the coordinate defining `mse`.
    pub bias: f64,
    pub seed: u64,
    #[serde(skip)]
    pub std: f64,
    #[serde(skip)]
    pub ledger: BudgetLedger,
}

/// Per-coordinate MSE maximized over coordinates, with that coordinate.
fn max_coordinate_mse(results: &[TrialResult], picks: impl Iterator<Item = usize> + Clone) -> (f64, usize) {
    let dim = results[0].exact.len();
    let count = picks.clone().count() as f64;
    (0..dim)
        .map(|j| {
            let s: f64 = picks
                .clone()
                .map(|t| {
                    let r = &results[t];
                    (r.estimate[j] - r.exact[j]).powi(2)
                })
                .sum();
            (s / count, j)
        })
        .fold(
            (f64::NEG_INFINITY, 0),
            |best, cur| if cur.0 > best.0 { cur } else { best },
        )
}

/// `(mse, bias, std, ci_lo, ci_hi)` with a seeded percentile bootstrap.
pub fn summarize_errors(results: &[TrialResult], bootstrap_seed: SeedPath) -> Result<(f64, f64, f64, f64, f64)> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no trials to summarize".into()));
    }
    let t = results.len();
    let (mse, j) = max_coordinate_mse(results, 0..t);
    let errs: Vec<f64> = results.iter().map(|r| r.estimate[j] - r.exact[j]).collect();
    let bias = errs.iter().sum::<f64>() / t as f64;
    let mean_est = results.iter().map(|r| r.estimate[j]).sum::<f64>() / t as f64;
    let std = if t > 1 {
        (results.iter().map(|r| (r.estimate[j] - mean_est).powi(2)).sum::<f64>() / (t - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut rng = bootstrap_seed.rng();
    let mut boot: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let picks: Vec<usize> = (0..t).map(|_| rng.random_range(0..t)).collect();
            max_coordinate_mse(results, picks.into_iter()).0
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let lo = boot[(0.025 * BOOTSTRAP_RESAMPLES as f64) as usize];
    let hi = boot[(0.975 * BOOTSTRAP_RESAMPLES as f64) as usize - 1];
    Ok((mse, bias, std, lo, hi))
}

/// Least-squares slope of `ln mse` against `ln n`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(n, m)| n <= 0.0 || m <= 0.0) {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let c = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / c, ys.iter().sum::<f64>() / c);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// CSV rows, plus the fitted slope for every `ε` with at least two `n`.
pub fn mse_report(summaries: &[CellSummary]) -> Result<(String, Vec<(f64, f64)>)> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in summaries {
        w.serialize(s).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    let csv = String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))?;

    let mut epsilons: Vec<f64> = summaries.iter().map(|s| s.epsilon).collect();
    epsilons.sort_by(f64::total_cmp);
    epsilons.dedup();
    let slopes = epsilons
        .into_iter()
        .filter_map(|eps| {
            let pts: Vec<(f64, f64)> = summaries
                .iter()
                .filter(|s| s.epsilon == eps)
                .map(|s| (s.n as f64, s.mse))
                .collect();
            loglog_slope(&pts).map(|m| (eps, m))
        })
        .collect();
    Ok((csv, slopes))
}
