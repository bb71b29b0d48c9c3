//! Truncated Fock-space math for a single bosonic mode.
//!
//! Displacement matrix elements are evaluated from the closed form
//!
//! ```text
//! <m|D(a)|n> = sqrt(n!/m!) a^(m-n) exp(-|a|^2/2) L_n^(m-n)(|a|^2),   m >= n
//! ```
//!
//! (and its adjoint partner for `m < n`), so the truncated operator is the
//! top-left block of the infinite-dimensional one. It is exactly unitary only
//! away from the truncation edge; that loss is reported, never hidden.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Pure state of one mode truncated to `dim` Fock levels.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amps: Vec<Complex64>,
}

impl StateVector {
    /// Wraps raw amplitudes without normalizing them.
    pub fn from_amplitudes(amps: Vec<Complex64>) -> Result<Self> {
        if amps.len() < 2 {
            return Err(Error::DimTooSmall(amps.len()));
        }
        if amps.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::NonFinite("state amplitudes"));
        }
        Ok(Self { amps })
    }

    pub fn vacuum(dim: usize) -> Result<Self> {
        fock(dim, 0)
    }

    /// Coherent state `D(alpha)|0>` on the truncated space. The returned
    /// [`Applied`] carries the probability lost past the truncation edge.
    pub fn coherent(dim: usize, alpha: Complex64) -> Result<Applied> {
        let d = displacement_operator(dim, alpha)?;
        apply(&d, &Self::vacuum(dim)?, false)
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm_sqr().sqrt();
        if n > 0.0 {
            self.amps.iter_mut().for_each(|a| *a /= n);
        }
        self
    }

    /// Photon-number distribution `|amps[k]|^2`.
    pub fn populations(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `<n>` for the (possibly unnormalized) state.
    pub fn mean_photon_number(&self) -> f64 {
        self.amps
            .iter()
            .enumerate()
            .map(|(k, a)| k as f64 * a.norm_sqr())
            .sum::<f64>()
            / self.norm_sqr()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> Result<Complex64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }
}

/// Dense operator on a truncated Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    entries: DMatrix<Complex64>,
}

impl Operator {
    pub fn from_matrix(entries: DMatrix<Complex64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimMismatch {
                expected: entries.nrows(),
                found: entries.ncols(),
            });
        }
        if entries.nrows() < 2 {
            return Err(Error::DimTooSmall(entries.nrows()));
        }
        Ok(Self { entries })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_matrix(DMatrix::identity(dim, dim))
    }

    /// Annihilation operator `a` with `<k-1|a|k> = sqrt(k)`.
    pub fn annihilation(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimTooSmall(dim));
        }
        let mut m = DMatrix::zeros(dim, dim);
        for k in 1..dim {
            m[(k - 1, k)] = Complex64::new((k as f64).sqrt(), 0.0);
        }
        Ok(Self { entries: m })
    }

    pub fn creation(dim: usize) -> Result<Self> {
        Ok(Self::annihilation(dim)?.adjoint())
    }

    /// Photon parity `(-1)^{a^dag a}`.
    pub fn parity(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimTooSmall(dim));
        }
        let diag = (0..dim).map(|k| if k % 2 == 0 { ONE } else { -ONE });
        Ok(Self {
            entries: DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(dim, diag)),
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn adjoint(&self) -> Self {
        Self {
            entries: self.entries.adjoint(),
        }
    }

    pub fn compose(&self, rhs: &Operator) -> Result<Self> {
        check_dim(self.dim(), rhs.dim())?;
        Ok(Self {
            entries: &self.entries * &rhs.entries,
        })
    }

    /// Largest entry of `|U^dag U - I|` restricted to indices below `upto`.
    pub fn unitarity_defect(&self, upto: usize) -> f64 {
        let p = &self.entries.adjoint() * &self.entries;
        let upto = upto.min(self.dim());
        let mut worst = 0.0_f64;
        for i in 0..upto {
            for j in 0..upto {
                let target = if i == j { ONE } else { ZERO };
                worst = worst.max((p[(i, j)] - target).norm());
            }
        }
        worst
    }
}

/// Result of applying an operator: the output state and `1 - |psi'|^2`.
#[derive(Debug, Clone)]
pub struct Applied {
    pub state: StateVector,
    pub truncation_loss: f64,
}

/// `|n>` in a `dim`-level truncation.
pub fn fock(dim: usize, n: usize) -> Result<StateVector> {
    if dim < 2 {
        return Err(Error::DimTooSmall(dim));
    }
    if n >= dim {
        return Err(Error::FockOutOfRange { n, dim });
    }
    let mut amps = vec![ZERO; dim];
    amps[n] = ONE;
    Ok(StateVector { amps })
}

/// Matrix-vector product. With `renormalize` the output is rescaled to unit
/// norm; the truncation loss is reported either way.
pub fn apply(op: &Operator, state: &StateVector, renormalize: bool) -> Result<Applied> {
    check_dim(op.dim(), state.dim())?;
    let before = state.norm_sqr();
    let v = nalgebra::DVector::from_column_slice(&state.amps);
    let out = &op.entries * v;
    let mut state = StateVector {
        amps: out.iter().copied().collect(),
    };
    let truncation_loss = before - state.norm_sqr();
    if renormalize {
        state = state.normalized();
    }
    Ok(Applied {
        state,
        truncation_loss,
    })
}

/// `ln(n!)`, summed directly; exact enough for every index this crate touches.
pub fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Generalized Laguerre polynomial `L_n^(k)(x)` by the three-term recurrence.
pub fn assoc_laguerre(n: usize, k: usize, x: f64) -> f64 {
    let k = k as f64;
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = 1.0 + k - x;
    for i in 1..n {
        let i = i as f64;
        let next = ((2.0 * i + 1.0 + k - x) * cur - (i + k) * prev) / (i + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// `<m|D(alpha)|n>` of the untruncated displacement operator.
pub fn displacement_element(m: usize, n: usize, alpha: Complex64) -> Complex64 {
    let x = alpha.norm_sqr();
    let (lo, hi) = if m >= n { (n, m) } else { (m, n) };
    let k = hi - lo;
    // a^k for m >= n, (-a*)^k otherwise
    let base = if m >= n { alpha } else { -alpha.conj() };
    let lag = assoc_laguerre(lo, k, x);
    if k == 0 {
        return Complex64::new((-0.5 * x).exp() * lag, 0.0);
    }
    if x == 0.0 {
        return ZERO;
    }
    let ln_mag =
        0.5 * (ln_factorial(lo) - ln_factorial(hi)) + k as f64 * base.norm().ln() - 0.5 * x;
    let phase = Complex64::from_polar(1.0, k as f64 * base.arg());
    phase * (ln_mag.exp() * lag)
}

/// Truncated displacement operator `D(alpha) = exp(alpha a^dag - alpha* a)`.
pub fn displacement_operator(dim: usize, alpha: Complex64) -> Result<Operator> {
    if dim < 2 {
        return Err(Error::DimTooSmall(dim));
    }
    if !alpha.re.is_finite() || !alpha.im.is_finite() {
        return Err(Error::NonFinite("displacement amplitude"));
    }
    if alpha == ZERO {
        return Operator::identity(dim);
    }
    let m = DMatrix::from_fn(dim, dim, |r, c| displacement_element(r, c, alpha));
    Ok(Operator { entries: m })
}

/// `P_{n,l}(nbar) = |<l|D(alpha)|n>|^2` for `|alpha|^2 = nbar`:
/// `(n_<! / n_>!) nbar^{|l-n|} e^{-nbar} [L_{n_<}^{|l-n|}(nbar)]^2`.
pub fn displacement_prob(n: usize, l: usize, nbar: f64) -> Result<f64> {
    if nbar.is_nan() || nbar < 0.0 {
        return Err(Error::NegativeOccupation(nbar));
    }
    if !nbar.is_finite() {
        return Err(Error::NonFinite("mean occupation"));
    }
    let (lo, hi) = (n.min(l), n.max(l));
    let k = hi - lo;
    if nbar == 0.0 {
        return Ok(if k == 0 { 1.0 } else { 0.0 });
    }
    let lag = assoc_laguerre(lo, k, nbar);
    let ln_pref = ln_factorial(lo) - ln_factorial(hi) + k as f64 * nbar.ln() - nbar;
    Ok((ln_pref.exp() * lag * lag).clamp(0.0, 1.0))
}

/// Sampled Wigner function on a rectangular grid of displacements.
#[derive(Debug, Clone)]
pub struct WignerGrid {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    /// `values[i][j]` at `beta = re[i] + i im[j]`.
    pub values: Vec<Vec<f64>>,
}

impl WignerGrid {
    /// `sum W dRe dIm` with the grid spacing (uniform grids only).
    pub fn integral(&self) -> f64 {
        let step = |v: &[f64]| {
            if v.len() > 1 {
                (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64
            } else {
                1.0
            }
        };
        let area = step(&self.re) * step(&self.im);
        self.values.iter().flatten().sum::<f64>() * area
    }

    /// Location and value of the grid maximum.
    pub fn peak(&self) -> (Complex64, f64) {
        let mut best = (ZERO, f64::NEG_INFINITY);
        for (i, row) in self.values.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if w > best.1 {
                    best = (Complex64::new(self.re[i], self.im[j]), w);
                }
            }
        }
        best
    }

    /// CSV with header `re_beta,im_beta,w`, one row per grid point.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "re_beta,im_beta,w")?;
        for (i, row) in self.values.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                writeln!(out, "{},{},{}", self.re[i], self.im[j], w)?;
            }
        }
        Ok(())
    }
}

/// Uniform axis of `points` samples over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// `W(beta) = (2/pi) <psi| D(beta) P D(beta)^dag |psi>` at a single point.
pub fn wigner_point(state: &StateVector, beta: Complex64) -> f64 {
    let dim = state.dim();
    let r = beta.norm();
    // D(-beta)|m> spreads to roughly m + |beta|^2 +- a few sqrt widths
    let work = dim + (r * r + 10.0 * r + 20.0).ceil() as usize;
    let mut w = 0.0;
    for k in 0..work {
        let amp: Complex64 = state
            .amps
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != ZERO)
            .map(|(m, a)| displacement_element(k, m, -beta) * a)
            .sum();
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        w += sign * amp.norm_sqr();
    }
    2.0 / PI * w
}

/// Wigner function over the product grid `re x im`.
pub fn wigner(state: &StateVector, re: &[f64], im: &[f64]) -> Result<WignerGrid> {
    if re.iter().chain(im).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wigner grid"));
    }
    let values = re
        .iter()
        .map(|&x| {
            im.iter()
                .map(|&y| wigner_point(state, Complex64::new(x, y)))
                .collect()
        })
        .collect();
    Ok(WignerGrid {
        re: re.to_vec(),
        im: im.to_vec(),
        values,
    })
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimMismatch { expected, found });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Scaling-and-squaring Taylor exponential, kept independent of the
    /// Laguerre route.
    fn expm(a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let norm: f64 = a.iter().map(|z| z.norm()).sum::<f64>().max(1e-300);
        let squarings = (norm.log2().ceil() + 4.0).max(0.0) as u32;
        let scaled = a / Complex64::new(2f64.powi(squarings as i32), 0.0);
        let n = a.nrows();
        let mut result = DMatrix::<Complex64>::identity(n, n);
        let mut term = DMatrix::<Complex64>::identity(n, n);
        for k in 1..40 {
            term = &term * &scaled / Complex64::new(k as f64, 0.0);
            result += &term;
        }
        for _ in 0..squarings {
            result = &result * &result;
        }
        result
    }

    fn generator(dim: usize, alpha: Complex64) -> DMatrix<Complex64> {
        let a = Operator::annihilation(dim).unwrap().entries;
        let ad = a.adjoint();
        ad * alpha - a * alpha.conj()
    }

    #[test]
    fn fock_basis_vectors() {
        let s = fock(8, 0).unwrap();
        assert_eq!(s.amplitudes()[0], ONE);
        let s = fock(8, 4).unwrap();
        assert_eq!(s.amplitudes()[4], ONE);
        assert_relative_eq!(s.norm_sqr(), 1.0);
        assert!(matches!(fock(4, 7), Err(Error::FockOutOfRange { n: 7, dim: 4 })));
        assert!(matches!(fock(1, 0), Err(Error::DimTooSmall(1))));
    }

    #[test]
    fn zero_displacement_is_identity() {
        let d = displacement_operator(12, ZERO).unwrap();
        assert_eq!(d, Operator::identity(12).unwrap());
    }

    #[test]
    fn vacuum_to_one_photon_amplitude() {
        let alpha = Complex64::from_polar(0.1, 0.7);
        let d = displacement_operator(40, alpha).unwrap();
        let p = d.matrix()[(1, 0)].norm_sqr();
        assert_relative_eq!(p, 0.01 * (-0.01f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(p, 9.900e-3, max_relative = 1e-4);
    }

    #[test]
    fn matches_matrix_exponential_oracle() {
        let alpha = Complex64::new(0.3, 0.0);
        let analytic = displacement_operator(60, alpha).unwrap();
        let oracle = expm(&generator(60, alpha));
        let mut worst = 0.0_f64;
        for r in 0..40 {
            for c in 0..40 {
                worst = worst.max((analytic.matrix()[(r, c)] - oracle[(r, c)]).norm());
            }
        }
        assert!(worst < 1e-8, "max diff {worst}");
    }

    #[test]
    fn complex_phase_matches_oracle() {
        let alpha = Complex64::from_polar(0.25, -2.1);
        let analytic = displacement_operator(50, alpha).unwrap();
        let oracle = expm(&generator(50, alpha));
        for r in 0..15 {
            for c in 0..15 {
                assert!((analytic.matrix()[(r, c)] - oracle[(r, c)]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn unitary_away_from_edge() {
        // D|n> spreads by ~|alpha| sqrt(2n+1) levels, so the clean block
        // shrinks with both |alpha| and n
        for &mag in &[0.1, 0.5, 1.0] {
            let d = displacement_operator(40, Complex64::from_polar(mag, 0.3)).unwrap();
            assert!(d.unitarity_defect(20) < 1e-8, "|alpha| = {mag}");
        }
        let d = displacement_operator(40, Complex64::new(0.1, 0.0)).unwrap();
        assert!(d.unitarity_defect(30) < 1e-8);
        // the edge is visibly non-unitary, which is why loss is reported
        let d = displacement_operator(10, Complex64::new(1.0, 0.0)).unwrap();
        assert!(d.unitarity_defect(10) > 1e-4);
    }

    #[test]
    fn vacuum_transition_probability() {
        let p = displacement_prob(0, 1, 0.01).unwrap();
        assert_relative_eq!(p, 0.01 * (-0.01f64).exp(), max_relative = 1e-12);
        assert!(displacement_prob(0, 1, -0.1).is_err());
        assert_eq!(displacement_prob(3, 3, 0.0).unwrap(), 1.0);
        assert_eq!(displacement_prob(3, 4, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn stimulated_emission_and_absorption_ratios() {
        let nbar = 1e-4;
        let p01 = displacement_prob(0, 1, nbar).unwrap();
        let up = displacement_prob(10, 11, nbar).unwrap() / p01;
        let down = displacement_prob(10, 9, nbar).unwrap() / p01;
        assert!((up / 11.0 - 1.0).abs() < 0.01, "{up}");
        assert!((down / 10.0 - 1.0).abs() < 0.01, "{down}");
    }

    #[test]
    fn analytic_probability_matches_matrix_oracle() {
        let oracle = expm(&generator(60, Complex64::new(0.3, 0.0)));
        for n in 0..12 {
            for l in 0..12 {
                let p = displacement_prob(n, l, 0.09).unwrap();
                let q = oracle[(l, n)].norm_sqr();
                assert!((p - q).abs() < 1e-8, "n={n} l={l}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        for n in 0..10 {
            for &nbar in &[1e-4, 0.05, 0.3, 1.0] {
                let s: f64 = (0..40).map(|l| displacement_prob(n, l, nbar).unwrap()).sum();
                assert!((s - 1.0).abs() < 1e-9, "n={n} nbar={nbar} sum={s}");
            }
        }
    }

    #[test]
    fn small_signal_law() {
        let nbar = 1e-4;
        for n in 0..=10 {
            let r = displacement_prob(n, n + 1, nbar).unwrap() / nbar;
            assert!((r / (n as f64 + 1.0) - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn apply_identity_and_displacements() {
        let s = fock(10, 3).unwrap();
        let out = apply(&Operator::identity(10).unwrap(), &s, false).unwrap();
        assert_eq!(out.state, s);
        assert_eq!(out.truncation_loss, 0.0);

        let alpha = Complex64::from_polar(1.0, 0.4);
        let coh = StateVector::coherent(40, alpha).unwrap();
        assert!(coh.truncation_loss.abs() < 1e-12);
        assert!((coh.state.mean_photon_number() - 1.0).abs() < 1e-6);

        let dp = displacement_operator(40, alpha).unwrap();
        let dm = displacement_operator(40, -alpha).unwrap();
        let back = apply(&dp.compose(&dm).unwrap(), &fock(40, 3).unwrap(), false).unwrap();
        for (k, a) in back.state.amplitudes().iter().enumerate() {
            let want = if k == 3 { ONE } else { ZERO };
            assert!((a - want).norm() < 1e-8);
        }

        assert!(matches!(
            apply(&dp, &fock(8, 0).unwrap(), false),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn apply_reports_truncation_loss() {
        let d = displacement_operator(6, Complex64::new(1.5, 0.0)).unwrap();
        let raw = apply(&d, &fock(6, 4).unwrap(), false).unwrap();
        assert!(raw.truncation_loss > 1e-3);
        let renorm = apply(&d, &fock(6, 4).unwrap(), true).unwrap();
        assert_relative_eq!(renorm.state.norm_sqr(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(renorm.truncation_loss, raw.truncation_loss, epsilon = 1e-14);
    }

    #[test]
    fn wigner_parity_at_origin() {
        let w0 = wigner_point(&fock(20, 0).unwrap(), ZERO);
        assert_relative_eq!(w0, 2.0 / PI, epsilon = 1e-12);
        let w1 = wigner_point(&fock(20, 1).unwrap(), ZERO);
        assert_relative_eq!(w1, -2.0 / PI, epsilon = 1e-12);
    }

    #[test]
    fn coherent_wigner_is_displaced_gaussian() {
        let alpha = Complex64::new(1.0, 0.0);
        let state = StateVector::coherent(40, alpha).unwrap().state;
        let axis = linspace(-3.0, 3.0, 41);
        let grid = wigner(&state, &axis, &axis).unwrap();
        let (peak, value) = grid.peak();
        assert!((peak - alpha).norm() < 0.08, "peak at {peak}");
        assert_relative_eq!(value, 2.0 / PI, max_relative = 1e-2);
        for (i, &x) in grid.re.iter().enumerate() {
            for (j, &y) in grid.im.iter().enumerate() {
                let beta = Complex64::new(x, y);
                let closed = 2.0 / PI * (-2.0 * (beta - alpha).norm_sqr()).exp();
                assert!((grid.values[i][j] - closed).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn wigner_normalization() {
        let axis = linspace(-4.0, 4.0, 81);
        for n in 0..2 {
            let grid = wigner(&fock(20, n).unwrap(), &axis, &axis).unwrap();
            assert!((grid.integral() - 1.0).abs() < 0.02, "n={n}");
        }
    }

    #[test]
    fn wigner_csv_layout() {
        let axis = linspace(-1.0, 1.0, 3);
        let grid = wigner(&fock(4, 0).unwrap(), &axis, &axis).unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with("re_beta,im_beta,w\n-1,-1,"));
    }

    proptest::proptest! {
        #[test]
        fn displaced_probabilities_form_a_distribution(n in 0usize..12, nbar in 0.0f64..1.0) {
            let probs: Vec<f64> = (0..45).map(|l| displacement_prob(n, l, nbar).unwrap()).collect();
            proptest::prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
            let s: f64 = probs.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-9, "sum {}", s);
        }

        #[test]
        fn displacement_preserves_norm_away_from_edge(re in -1.0f64..1.0, im in -1.0f64..1.0, n in 0usize..10) {
            let d = displacement_operator(40, Complex64::new(re, im)).unwrap();
            let out = apply(&d, &fock(40, n).unwrap(), false).unwrap();
            proptest::prop_assert!(out.truncation_loss.abs() < 1e-8, "loss {}", out.truncation_loss);
        }
    }
}
