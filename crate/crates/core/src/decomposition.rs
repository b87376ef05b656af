//! Trend/seasonal split by a centered moving average over a replicate-padded
//! series.

use crate::array::Array2;
use crate::error::{Error, Result};

/// Trend and seasonal parts of a series; `trend + seasonal` is the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub trend: Array2,
    pub seasonal: Array2,
}

/// Centered moving average per column. The series is padded by repeating its
/// first and last rows `(window - 1) / 2` times so the output keeps the input
/// length.
pub fn moving_average(x: &Array2, window: usize) -> Result<Array2> {
    let (len, dims) = x.shape();
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::config(format!(
            "moving average window must be odd and positive, got {window}"
        )));
    }
    if len == 0 || window > 2 * len - 1 {
        return Err(Error::config(format!(
            "moving average window {window} exceeds 2L-1 for L = {len}"
        )));
    }
    let half = (window - 1) / 2;
    let mut out = Array2::zeros(len, dims);
    let inv = 1.0 / window as f64;
    for c in 0..dims {
        // Running sum over the padded column.
        let at = |i: isize| -> f64 {
            let idx = i.clamp(0, len as isize - 1) as usize;
            x.get(idx, c)
        };
        let mut sum: f64 = (-(half as isize)..=half as isize).map(at).sum();
        out.set(0, c, sum * inv);
        for t in 1..len {
            let t = t as isize;
            sum += at(t + half as isize) - at(t - half as isize - 1);
            out.set(t as usize, c, sum * inv);
        }
    }
    Ok(out)
}

/// Smallest odd window covering `period` steps.
pub fn window_for_period(period: usize) -> usize {
    period | 1
}

/// Splits `x` into trend and seasonal parts. The window is `period` rounded
/// up to odd, capped at the largest odd value that fits the series.
pub fn decompose(x: &Array2, period: usize) -> Result<Decomposition> {
    let len = x.rows();
    if len < 2 {
        return Err(Error::input(format!(
            "decomposition needs at least 2 steps, got {len}"
        )));
    }
    if period == 0 {
        return Err(Error::config("decomposition period must be positive"));
    }
    let window = window_for_period(period).min(2 * len - 1);
    let trend = moving_average(x, window)?;
    let seasonal_data = x
        .data()
        .iter()
        .zip(trend.data())
        .map(|(v, t)| v - t)
        .collect();
    let seasonal = Array2::new(len, x.cols(), seasonal_data)?;
    Ok(Decomposition { trend, seasonal })
}
