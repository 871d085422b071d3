use serde::{Deserialize, Serialize};

use crate::error::{Result, ThermoError};

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Smallest and largest x used.
    pub beta_range: [f64; 2],
    pub points: usize,
}

impl SlopeFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }
}

fn check_points(points: &[(f64, f64)]) -> Result<()> {
    if points.len() < 4 {
        return Err(ThermoError::FitRefused(format!(
            "need at least 4 points, got {}",
            points.len()
        )));
    }
    if let Some(&(x, y)) = points
        .iter()
        .find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(ThermoError::FitRefused(format!(
            "log-log fit needs positive finite values, got ({x}, {y})"
        )));
    }
    Ok(())
}

pub fn fit_loglog(points: &[(f64, f64)]) -> Result<SlopeFit> {
    check_points(points)?;
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return Err(ThermoError::FitRefused("all x values are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
        beta_range: [lo, hi],
        points: points.len(),
    })
}

/// Coefficient `c` of `y = c x^p` for a fixed exponent, fitted in log space.
pub fn fit_coefficient(points: &[(f64, f64)], exponent: f64) -> Result<f64> {
    check_points(points)?;
    let n = points.len() as f64;
    let mean = points
        .iter()
        .map(|(x, y)| y.ln() - exponent * x.ln())
        .sum::<f64>()
        / n;
    Ok(mean.exp())
}
