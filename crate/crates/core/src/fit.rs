//! Weighted linear least squares and a log-linear exponential fit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearFit {
    pub params: Vec<f64>,
    /// Row-major `p x p` parameter covariance `(A^T W A)^-1`.
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
}

impl LinearFit {
    pub fn sigma(&self, i: usize) -> f64 {
        self.covariance[i][i].max(0.0).sqrt()
    }
}

/// Minimizes `sum ((y - A p) / sigma)^2`. Rows with non-positive sigma are
/// rejected.
pub fn weighted_least_squares(design: &DMatrix<f64>, y: &[f64], sigma: &[f64]) -> Result<LinearFit> {
    let (rows, cols) = design.shape();
    if rows != y.len() || rows != sigma.len() {
        return Err(Error::DimMismatch {
            expected: rows,
            found: y.len().min(sigma.len()),
        });
    }
    if rows < cols {
        return Err(Error::InsufficientData(format!("{rows} points for {cols} parameters")));
    }
    if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit data"));
    }
    let mut a = design.clone();
    let mut b = DVector::from_column_slice(y);
    for r in 0..rows {
        let w = 1.0 / sigma[r];
        a.row_mut(r).scale_mut(w);
        b[r] *= w;
    }
    // Column scaling keeps the normal matrix well conditioned when parameters
    // differ by many orders of magnitude.
    let scales: Vec<f64> = (0..cols)
        .map(|c| {
            let n = a.column(c).norm();
            if n > 0.0 { n } else { 1.0 }
        })
        .collect();
    for (c, s) in scales.iter().enumerate() {
        a.column_mut(c).unscale_mut(*s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::SingularFit(format!(
            "design matrix is rank deficient (condition {:.3e})",
            smax / smin
        )));
    }
    let ps = svd.solve(&b, 0.0).map_err(|e| Error::SingularFit(e.to_string()))?;
    let v = svd.v_t.expect("requested").transpose();
    let inv_s2 = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / (s * s)));
    let cov_s = &v * inv_s2 * v.transpose();

    let params: Vec<f64> = (0..cols).map(|c| ps[c] / scales[c]).collect();
    let covariance = (0..cols)
        .map(|i| (0..cols).map(|j| cov_s[(i, j)] / (scales[i] * scales[j])).collect())
        .collect();
    let resid = a * ps - b;
    Ok(LinearFit {
        params,
        covariance,
        chi2: resid.norm_squared(),
        dof: rows - cols,
    })
}

/// Straight line `y = intercept + slope x`.
pub fn fit_line(x: &[f64], y: &[f64], sigma: &[f64]) -> Result<LinearFit> {
    let design = DMatrix::from_fn(x.len(), 2, |r, c| if c == 0 { 1.0 } else { x[r] });
    weighted_least_squares(&design, y, sigma)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExponentialFit {
    pub amplitude: f64,
    pub tau: f64,
    pub sigma_tau: f64,
}

/// Fits `survivors / trials = A exp(-t / tau)` by weighted regression of the
/// log fraction with binomial errors. Points with no survivors carry no
/// information on the log scale and are skipped.
pub fn fit_exponential_decay(t: &[f64], survivors: &[u64], trials: &[u64]) -> Result<ExponentialFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ss = Vec::new();
    for ((&ti, &k), &n) in t.iter().zip(survivors).zip(trials) {
        if k == 0 || n == 0 {
            continue;
        }
        let p = k as f64 / n as f64;
        xs.push(ti);
        ys.push(p.ln());
        // binomial variance of ln p, floored so that p = 1 keeps finite weight
        let var = ((1.0 - p) / (n as f64 * p)).max(1.0 / (n as f64 * n as f64));
        ss.push(var.sqrt());
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData("fewer than two populated delays".into()));
    }
    let line = fit_line(&xs, &ys, &ss)?;
    let slope = line.params[1];
    if !(slope < 0.0) {
        return Err(Error::SingularFit(format!("non-decaying population (slope {slope:e})")));
    }
    Ok(ExponentialFit {
        amplitude: line.params[0].exp(),
        tau: -1.0 / slope,
        sigma_tau: line.sigma(1) / (slope * slope),
    })
}
