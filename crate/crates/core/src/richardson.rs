//! Richardson extrapolation of grid sequences `m_h = m + C·h^q`.

use serde::Serialize;

use crate::error::{MassError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RichardsonFit {
    pub spacings: Vec<f64>,
    pub values: Vec<f64>,
    /// Order `q` assumed by the fit.
    pub order: f64,
    pub extrapolated: f64,
    pub coefficient: f64,
    /// Half the last increment `|m_{h_k} − m_{h_{k−1}}|`.
    pub error_bar: f64,
    /// Order solved from the last three values, when they are monotone.
    pub observed_order: Option<f64>,
}

/// Least-squares fit of `m + C·h^order` through `(h_i, m_i)`, ordered from
/// coarse to fine.
pub fn extrapolate(spacings: &[f64], values: &[f64], order: f64) -> Result<RichardsonFit> {
    if spacings.len() != values.len() || spacings.len() < 2 {
        return Err(MassError::Config(
            "Richardson extrapolation needs at least two (h, m) pairs".into(),
        ));
    }
    if spacings.windows(2).any(|w| !(w[1] < w[0])) || spacings.iter().any(|&h| !(h > 0.0)) {
        return Err(MassError::Config(
            "spacings must be positive and decreasing".into(),
        ));
    }
    let x: Vec<f64> = spacings.iter().map(|h| h.powf(order)).collect();
    let k = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / k, values.iter().sum::<f64>() / k);
    let sxy: f64 = x.iter().zip(values).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let coefficient = sxy / sxx;
    let n = values.len();
    Ok(RichardsonFit {
        spacings: spacings.to_vec(),
        values: values.to_vec(),
        order,
        extrapolated: my - coefficient * mx,
        coefficient,
        error_bar: 0.5 * (values[n - 1] - values[n - 2]).abs(),
        observed_order: if n >= 3 {
            observed_order(&spacings[n - 3..], &values[n - 3..])
        } else {
            None
        },
    })
}

/// Solves `(m₁ − m₂)/(m₂ − m₃) = (h₁^q − h₂^q)/(h₂^q − h₃^q)` for `q` by bisection.
pub fn observed_order(h: &[f64], m: &[f64]) -> Option<f64> {
    let (d1, d2) = (m[0] - m[1], m[1] - m[2]);
    if d2 == 0.0 || d1 / d2 <= 0.0 {
        return None;
    }
    let target = d1 / d2;
    let g = |q: f64| (h[0].powf(q) - h[1].powf(q)) / (h[1].powf(q) - h[2].powf(q)) - target;
    let (mut lo, mut hi) = (1e-3, 12.0);
    if g(lo).signum() == g(hi).signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid).signum() == g(lo).signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Slope of `log|e|` against `log x` by least squares.
pub fn log_log_slope(x: &[f64], e: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let le: Vec<f64> = e.iter().map(|v| v.abs().ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, le.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&le).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recovers_an_exact_quadratic_model() {
        let h = [1.0 / 32.0, 1.0 / 48.0, 1.0 / 64.0];
        let m: Vec<f64> = h.iter().map(|h| -0.3 + 4.0 * h * h).collect();
        let fit = extrapolate(&h, &m, 2.0).unwrap();
        assert!((fit.extrapolated + 0.3).abs() < 1e-14);
        assert!((fit.coefficient - 4.0).abs() < 1e-10);
        assert!((fit.observed_order.unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(fit.error_bar, 0.5 * (m[2] - m[1]).abs());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(extrapolate(&[0.1], &[1.0], 2.0).is_err());
        assert!(extrapolate(&[0.1, 0.2], &[1.0, 2.0], 2.0).is_err());
        assert!(observed_order(&[0.3, 0.2, 0.1], &[1.0, 2.0, 1.5]).is_none());
    }

    proptest! {
        #[test]
        fn observed_order_inverts_power_laws(q in 0.5f64..4.0, c in 0.1f64..10.0, m in -1.0f64..1.0) {
            let h: [f64; 3] = [0.05, 0.035, 0.02];
            let v: Vec<f64> = h.iter().map(|h| m + c * h.powf(q)).collect();
            prop_assert!((observed_order(&h, &v).unwrap() - q).abs() < 1e-6);
            prop_assert!((log_log_slope(&h, &h.map(|h| c * h.powf(q))) - q).abs() < 1e-10);
        }
    }
}
