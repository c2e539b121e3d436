use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::TrainRecord;

/// Least-squares line of loss against `log10(tokens)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub points: Vec<(f64, f64)>,
    /// Loss change per decade of tokens.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl ScalingFit {
    pub fn predict(&self, tokens: f64) -> f64 {
        self.intercept + self.slope * tokens.log10()
    }
}

/// Ordinary least squares over `(tokens, loss)` points. When the losses are
/// constant the fit is exact and `r_squared` is 1.
pub fn fit_scaling_law(points: &[(f64, f64)]) -> Result<ScalingFit> {
    for &(t, loss) in points {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::config(format!("token counts must be positive, got {t}")));
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at {t} tokens")));
        }
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        return Err(Error::config("scaling fit needs at least two distinct token counts"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(points).map(|(x, p)| (x - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(points)
        .map(|(x, p)| {
            let r = p.1 - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(ScalingFit {
        points: points.to_vec(),
        slope,
        intercept,
        r_squared,
    })
}

/// Fit over `(tokens_seen, eval_loss)` of a training log. Records taken
/// before any tokens were seen are skipped.
pub fn fit_training_log(records: &[TrainRecord]) -> Result<ScalingFit> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.tokens_seen > 0)
        .map(|r| (r.tokens_seen as f64, r.eval_loss))
        .collect();
    fit_scaling_law(&points)
}
