//! Small summary-statistics and least-squares helpers shared by the
//! verification harness and the experiment runner.

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample (n−1) standard deviation; 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Standard error of the mean: sample std / √n.
pub fn standard_error(xs: &[f64]) -> f64 {
    sample_std(xs) / (xs.len() as f64).sqrt()
}

/// Ordinary least-squares line fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; 0 when the fit is exact or has no
    /// residual degrees of freedom (n = 2).
    pub slope_stderr: f64,
}

pub fn ols_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config(format!(
            "least-squares fit needs two or more paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("degenerate fit: all x values identical".into()));
    }
    // A constant response is fit exactly; returning it directly avoids the
    // round-off slope that `my` would otherwise leak into the cross term.
    if ys.iter().all(|&y| y == ys[0]) {
        return Ok(LineFit { slope: 0.0, intercept: ys[0], slope_stderr: 0.0 });
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if xs.len() > 2 {
        let ss_res: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let e = y - (intercept + slope * x);
                e * e
            })
            .sum();
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit { slope, intercept, slope_stderr })
}
