//! Log-log decay fits and observed convergence orders.

use crate::error::{Error, Result};

/// Ordinary least squares of `log value` on `log N`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Pairs that entered the fit.
    pub used: Vec<(f64, f64)>,
    /// Pairs dropped because the value was zero, negative or nonfinite.
    pub excluded: Vec<(f64, f64)>,
}

impl LogLogFit {
    /// Fitted value at `x`.
    pub fn predict(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }
}

pub fn loglog_fit(pairs: &[(f64, f64)]) -> Result<LogLogFit> {
    let (used, excluded): (Vec<_>, Vec<_>) =
        pairs.iter().copied().partition(|&(x, y)| x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite());
    if used.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "{} usable (positive) pairs out of {}, need at least 3",
            used.len(),
            pairs.len()
        )));
    }
    let lx: Vec<f64> = used.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = used.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all abscissae coincide".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LogLogFit { slope, intercept, r_squared, used, excluded })
}

/// Observed order `log₂(|y_h − y_{h/2}| / |y_{h/2} − y_{h/4}|)` from three
/// successively halved solutions.
pub fn observed_order(coarse: f64, mid: f64, fine: f64) -> f64 {
    ((coarse - mid).abs() / (mid - fine).abs()).log2()
}
