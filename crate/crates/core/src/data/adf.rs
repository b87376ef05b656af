use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Augmented Dickey-Fuller outcome at the 1% level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdfResult {
    pub statistic: f64,
    pub critical_value_1pct: f64,
    pub lags: usize,
    pub nobs: usize,
    pub is_stationary: bool,
}

/// `floor(12 (n / 100)^(1/4))`.
pub fn adf_lag_order(n: usize) -> usize {
    (12.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize
}

/// MacKinnon's response-surface 1% critical value, constant-only case.
pub fn adf_critical_value_1pct(nobs: usize) -> f64 {
    let t = nobs as f64;
    -3.43035 - 6.5393 / t - 16.786 / (t * t) - 79.433 / (t * t * t)
}

/// Regresses `Δx_t` on a constant, `x_{t-1}` and `p` lagged differences,
/// and reports the t-ratio of the `x_{t-1}` coefficient.
pub fn adf_test(series: &[f64]) -> Result<AdfResult> {
    let n = series.len();
    if n < 30 {
        return Err(Error::input(format!("ADF test needs at least 30 points, got {n}")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("ADF test input contains non-finite values"));
    }
    let p = adf_lag_order(n);
    let diff: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let nobs = diff.len() - p;
    let k = p + 2;
    if nobs <= k {
        return Err(Error::input("too few observations for the lag order"));
    }
    // Row i explains diff[p + i].
    let x = DMatrix::from_fn(nobs, k, |i, j| {
        let t = p + i;
        match j {
            0 => 1.0,
            1 => series[t],
            _ => diff[t - (j - 1)],
        }
    });
    let y = DVector::from_iterator(nobs, diff[p..].iter().copied());
    let xtx = x.transpose() * &x;
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::input("ADF regression is singular"))?;
    let beta = &inv * x.transpose() * &y;
    let resid = &y - &x * &beta;
    let sigma2 = resid.norm_squared() / (nobs - k) as f64;
    let se = (sigma2 * inv[(1, 1)]).sqrt();
    if se.is_nan() || se <= 0.0 || se.is_infinite() {
        return Err(Error::input("ADF regression is singular"));
    }
    let statistic = beta[1] / se;
    let critical = adf_critical_value_1pct(nobs);
    Ok(AdfResult {
        statistic,
        critical_value_1pct: critical,
        lags: p,
        nobs,
        is_stationary: statistic < critical,
    })
}
