//! Dispersive qubit-cavity propagation and GRAPE state-transfer synthesis.
//!
//! Frame convention. The lab-frame Hamiltonian is
//! `H = w_s a^dag a + (w_q + chi a^dag a) sigma_z / 2` plus drives. Moving to
//! the frame generated by `(w_s - chi/2) a^dag a + w_q |e><e|` leaves the drift
//! `chi a^dag a |e><e|`, so the `|g,n> <-> |e,n>` line sits at `n chi` and a
//! cavity drive is resonant with the `g` manifold. Drives are written
//!
//! ```text
//! H_drive = eq sigma+ + eq* sigma- + ec a^dag + ec* a        (rad/s)
//! ```
//!
//! with `eq` riding on a `w_q` carrier and `ec` on a `w_s - chi/2` carrier in
//! the lab frame. A constant real `eq` therefore rotates the qubit by
//! `2 |eq| t`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qstate::{self, StateVector};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Number of real control channels per time step: Re/Im qubit, Re/Im cavity.
pub const CONTROLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    /// Doubly rotating frame, drift `chi a^dag a |e><e|`.
    Rotating,
    /// Full lab-frame Hamiltonian with drive carriers, integrated by RK4.
    Lab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Qubit {
    G,
    E,
}

impl Qubit {
    fn index(self) -> usize {
        match self {
            Qubit::G => 0,
            Qubit::E => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispersiveHamiltonian {
    pub cavity_dim: usize,
    /// Cavity angular frequency (rad/s); only used in the lab frame.
    pub omega_s: f64,
    /// Qubit angular frequency (rad/s); only used in the lab frame.
    pub omega_q: f64,
    /// Dispersive shift (rad/s).
    pub chi: f64,
    pub frame: Frame,
}

impl DispersiveHamiltonian {
    pub fn rotating(cavity_dim: usize, chi: f64) -> Self {
        Self {
            cavity_dim,
            omega_s: 0.0,
            omega_q: 0.0,
            chi,
            frame: Frame::Rotating,
        }
    }

    pub fn joint_dim(&self) -> usize {
        2 * self.cavity_dim
    }

    fn validate(&self) -> Result<()> {
        if self.cavity_dim < 2 {
            return Err(Error::DimTooSmall(self.cavity_dim));
        }
        if self.chi == 0.0 || !self.chi.is_finite() {
            return Err(Error::invalid("chi", "dispersive shift must be finite and non-zero"));
        }
        if !self.omega_s.is_finite() || !self.omega_q.is_finite() {
            return Err(Error::NonFinite("hamiltonian frequencies"));
        }
        Ok(())
    }

    /// Diagonal of the time-independent part in the chosen frame.
    fn drift_diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.joint_dim()];
        for n in 0..self.cavity_dim {
            let nf = n as f64;
            match self.frame {
                Frame::Rotating => {
                    d[idx(n, Qubit::E)] = self.chi * nf;
                }
                Frame::Lab => {
                    let half = 0.5 * (self.omega_q + self.chi * nf);
                    d[idx(n, Qubit::G)] = self.omega_s * nf - half;
                    d[idx(n, Qubit::E)] = self.omega_s * nf + half;
                }
            }
        }
        d
    }

    /// Control operators in channel order Re/Im qubit, Re/Im cavity.
    pub fn control_operators(&self) -> [DMatrix<Complex64>; CONTROLS] {
        let dim = self.joint_dim();
        let mut sp = DMatrix::zeros(dim, dim); // sigma+
        let mut ad = DMatrix::zeros(dim, dim); // a^dag
        for n in 0..self.cavity_dim {
            sp[(idx(n, Qubit::E), idx(n, Qubit::G))] = Complex64::new(1.0, 0.0);
            if n + 1 < self.cavity_dim {
                let amp = Complex64::new(((n + 1) as f64).sqrt(), 0.0);
                for q in [Qubit::G, Qubit::E] {
                    ad[(idx(n + 1, q), idx(n, q))] = amp;
                }
            }
        }
        let sm = sp.adjoint();
        let a = ad.adjoint();
        [
            &sp + &sm,
            (&sp - &sm) * I,
            &ad + &a,
            (&ad - &a) * I,
        ]
    }

    fn step_hamiltonian(
        &self,
        drift: &[f64],
        ops: &[DMatrix<Complex64>; CONTROLS],
        controls: [f64; CONTROLS],
    ) -> DMatrix<Complex64> {
        let mut h = DMatrix::from_diagonal(&DVector::from_iterator(
            drift.len(),
            drift.iter().map(|&v| Complex64::new(v, 0.0)),
        ));
        for (op, &u) in ops.iter().zip(&controls) {
            if u != 0.0 {
                h += op * Complex64::new(u, 0.0);
            }
        }
        h
    }
}

#[inline]
fn idx(n: usize, q: Qubit) -> usize {
    2 * n + q.index()
}

/// Joint cavity-qubit pure state, index `2 n + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    cavity_dim: usize,
    amps: Vec<Complex64>,
}

impl JointState {
    pub fn basis(cavity_dim: usize, n: usize, q: Qubit) -> Result<Self> {
        if cavity_dim < 2 {
            return Err(Error::DimTooSmall(cavity_dim));
        }
        if n >= cavity_dim {
            return Err(Error::FockOutOfRange { n, dim: cavity_dim });
        }
        let mut amps = vec![ZERO; 2 * cavity_dim];
        amps[idx(n, q)] = Complex64::new(1.0, 0.0);
        Ok(Self { cavity_dim, amps })
    }

    /// `|q> (x) |cavity>`.
    pub fn product(q: Qubit, cavity: &StateVector) -> Self {
        let cavity_dim = cavity.dim();
        let mut amps = vec![ZERO; 2 * cavity_dim];
        for (n, a) in cavity.amplitudes().iter().enumerate() {
            amps[idx(n, q)] = *a;
        }
        Self { cavity_dim, amps }
    }

    pub fn cavity_dim(&self) -> usize {
        self.cavity_dim
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn amplitude(&self, n: usize, q: Qubit) -> Complex64 {
        self.amps[idx(n, q)]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Photon-number distribution traced over the qubit.
    pub fn cavity_populations(&self) -> Vec<f64> {
        (0..self.cavity_dim)
            .map(|n| self.amps[idx(n, Qubit::G)].norm_sqr() + self.amps[idx(n, Qubit::E)].norm_sqr())
            .collect()
    }

    pub fn excited_population(&self) -> f64 {
        (0..self.cavity_dim)
            .map(|n| self.amps[idx(n, Qubit::E)].norm_sqr())
            .sum()
    }

    /// `|<self|other>|^2`.
    pub fn fidelity(&self, other: &JointState) -> f64 {
        overlap(&self.amps, &other.amps).norm_sqr()
    }
}

fn overlap(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Piecewise-constant complex drive envelopes.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    pub dt: f64,
    pub qubit_drive: Vec<Complex64>,
    pub cavity_drive: Vec<Complex64>,
}

impl PulseSequence {
    pub fn zeros(steps: usize, dt: f64) -> Self {
        Self {
            dt,
            qubit_drive: vec![ZERO; steps],
            cavity_drive: vec![ZERO; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.qubit_drive.len()
    }

    pub fn total_duration(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn max_amplitude(&self) -> f64 {
        self.qubit_drive
            .iter()
            .chain(&self.cavity_drive)
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    fn controls(&self, k: usize) -> [f64; CONTROLS] {
        let q = self.qubit_drive[k];
        let c = self.cavity_drive[k];
        [q.re, q.im, c.re, c.im]
    }

    fn set_controls(&mut self, k: usize, u: [f64; CONTROLS]) {
        self.qubit_drive[k] = Complex64::new(u[0], u[1]);
        self.cavity_drive[k] = Complex64::new(u[2], u[3]);
    }

    fn validate(&self) -> Result<()> {
        if self.qubit_drive.len() != self.cavity_drive.len() {
            return Err(Error::DimMismatch {
                expected: self.qubit_drive.len(),
                found: self.cavity_drive.len(),
            });
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", "step length must be positive"));
        }
        let bad = |z: &Complex64| !z.re.is_finite() || !z.im.is_finite();
        if self.qubit_drive.iter().chain(&self.cavity_drive).any(bad) {
            return Err(Error::NonFinite("pulse amplitudes"));
        }
        Ok(())
    }

    /// Plain-text table: `#` header lines with `dt_s` and the frame
    /// convention, then `step re_qubit im_qubit re_cavity im_cavity` rows in
    /// rad/s.
    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# fockscan pulse sequence")?;
        writeln!(out, "# dt_s = {:e}", self.dt)?;
        writeln!(out, "# steps = {}", self.steps())?;
        writeln!(
            out,
            "# frame = rotating (drift chi*n*|e><e|; qubit carrier omega_q, cavity carrier omega_s - chi/2)"
        )?;
        writeln!(
            out,
            "# units = rad/s; H_drive = eq*sigma+ + conj(eq)*sigma- + ec*adag + conj(ec)*a"
        )?;
        writeln!(out, "step re_qubit im_qubit re_cavity im_cavity")?;
        for k in 0..self.steps() {
            let [a, b, c, d] = self.controls(k);
            writeln!(out, "{k} {a:e} {b:e} {c:e} {d:e}")?;
        }
        Ok(())
    }

    pub fn read_table<R: BufRead>(input: R) -> Result<Self> {
        let mut dt = None;
        let mut seq = PulseSequence::zeros(0, 1.0);
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if let Some(h) = line.strip_prefix('#') {
                if let Some(v) = h.trim().strip_prefix("dt_s =") {
                    dt = Some(v.trim().parse::<f64>().map_err(|e| Error::invalid("dt_s", e.to_string()))?);
                }
                continue;
            }
            if line.is_empty() || line.starts_with("step") {
                continue;
            }
            let cols: Vec<f64> = line
                .split_whitespace()
                .skip(1)
                .map(|t| t.parse::<f64>().map_err(|e| Error::invalid("pulse row", e.to_string())))
                .collect::<Result<_>>()?;
            if cols.len() != CONTROLS {
                return Err(Error::invalid("pulse row", format!("expected 5 columns: {line}")));
            }
            seq.qubit_drive.push(Complex64::new(cols[0], cols[1]));
            seq.cavity_drive.push(Complex64::new(cols[2], cols[3]));
        }
        seq.dt = dt.ok_or_else(|| Error::invalid("dt_s", "missing header"))?;
        seq.validate()?;
        Ok(seq)
    }
}

/// Per-step propagator `exp(-i H dt)` with its eigendecomposition, reused by
/// the gradient.
struct StepPropagator {
    vecs: DMatrix<Complex64>,
    vals: Vec<f64>,
    unitary: DMatrix<Complex64>,
}

impl StepPropagator {
    fn new(h: DMatrix<Complex64>, dt: f64) -> Self {
        let eig = SymmetricEigen::new(h);
        let vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let vecs = eig.eigenvectors;
        let phases = DMatrix::from_diagonal(&DVector::from_iterator(
            vals.len(),
            vals.iter().map(|&l| Complex64::from_polar(1.0, -l * dt)),
        ));
        let unitary = &vecs * phases * vecs.adjoint();
        Self {
            vecs,
            vals,
            unitary,
        }
    }
}

fn check_state(h: &DispersiveHamiltonian, s: &JointState) -> Result<()> {
    if s.cavity_dim != h.cavity_dim {
        return Err(Error::DimMismatch {
            expected: h.cavity_dim,
            found: s.cavity_dim,
        });
    }
    Ok(())
}

fn mat_vec(m: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    (m * DVector::from_column_slice(v)).iter().copied().collect()
}

/// Evolves `initial` under the piecewise-constant pulses. Rotating-frame
/// steps are exact exponentials; lab-frame steps are integrated with RK4 so
/// that the drive carriers are treated continuously.
pub fn propagate(
    h: &DispersiveHamiltonian,
    pulses: &PulseSequence,
    initial: &JointState,
) -> Result<JointState> {
    Ok(propagate_trajectory(h, pulses, initial)?
        .pop()
        .expect("trajectory always holds the initial state"))
}

/// Like [`propagate`] but returns the state after every step (index 0 is the
/// initial state).
pub fn propagate_trajectory(
    h: &DispersiveHamiltonian,
    pulses: &PulseSequence,
    initial: &JointState,
) -> Result<Vec<JointState>> {
    h.validate()?;
    pulses.validate()?;
    check_state(h, initial)?;
    let mut out = Vec::with_capacity(pulses.steps() + 1);
    out.push(initial.clone());
    match h.frame {
        Frame::Rotating => {
            let drift = h.drift_diagonal();
            let ops = h.control_operators();
            let mut psi = initial.amps.clone();
            for k in 0..pulses.steps() {
                let step =
                    StepPropagator::new(h.step_hamiltonian(&drift, &ops, pulses.controls(k)), pulses.dt);
                check_step_unitarity(&step.unitary, k)?;
                psi = mat_vec(&step.unitary, &psi);
                out.push(JointState {
                    cavity_dim: h.cavity_dim,
                    amps: psi.clone(),
                });
            }
        }
        Frame::Lab => {
            let mut psi = initial.amps.clone();
            for k in 0..pulses.steps() {
                psi = lab_step(h, pulses, k, psi);
                out.push(JointState {
                    cavity_dim: h.cavity_dim,
                    amps: psi.clone(),
                });
            }
        }
    }
    Ok(out)
}

fn check_step_unitarity(u: &DMatrix<Complex64>, step: usize) -> Result<()> {
    let p = u.adjoint() * u;
    let defect = (p - DMatrix::<Complex64>::identity(u.nrows(), u.ncols()))
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if !(defect < 1e-9) {
        return Err(Error::invalid(
            "pulses",
            format!("step {step} propagator is not unitary (defect {defect:e})"),
        ));
    }
    Ok(())
}

/// One lab-frame step of length `dt` with carriers `w_q` and `w_s - chi/2`.
fn lab_step(
    h: &DispersiveHamiltonian,
    pulses: &PulseSequence,
    k: usize,
    psi: Vec<Complex64>,
) -> Vec<Complex64> {
    let drift = h.drift_diagonal();
    let [sx, sy, cx, cy] = h.control_operators();
    // sigma+ and a^dag recovered from the Hermitian channel pair
    let sp = (&sx - &sy * I) * Complex64::new(0.5, 0.0);
    let ad = (&cx - &cy * I) * Complex64::new(0.5, 0.0);
    let eq = pulses.qubit_drive[k];
    let ec = pulses.cavity_drive[k];
    let wc = h.omega_s - 0.5 * h.chi;
    let scale = drift.iter().map(|v| v.abs()).fold(0.0, f64::max)
        + 2.0 * (eq.norm() + ec.norm() * (h.cavity_dim as f64).sqrt());
    let sub = ((scale * pulses.dt / 0.02).ceil() as usize).max(1);
    let hstep = pulses.dt / sub as f64;
    let t0 = k as f64 * pulses.dt;

    let deriv = |t: f64, v: &[Complex64]| -> Vec<Complex64> {
        let qd = eq * Complex64::from_polar(1.0, -h.omega_q * t);
        let cd = ec * Complex64::from_polar(1.0, -wc * t);
        let hm = &sp * qd + sp.adjoint() * qd.conj() + &ad * cd + ad.adjoint() * cd.conj();
        let hv = mat_vec(&hm, v);
        v.iter()
            .zip(&drift)
            .zip(hv)
            .map(|((x, d), y)| -I * (x * d + y))
            .collect()
    };
    let axpy = |a: &[Complex64], b: &[Complex64], s: f64| -> Vec<Complex64> {
        a.iter().zip(b).map(|(x, y)| x + y * s).collect()
    };

    let mut v = psi;
    for j in 0..sub {
        let t = t0 + j as f64 * hstep;
        let k1 = deriv(t, &v);
        let k2 = deriv(t + 0.5 * hstep, &axpy(&v, &k1, 0.5 * hstep));
        let k3 = deriv(t + 0.5 * hstep, &axpy(&v, &k2, 0.5 * hstep));
        let k4 = deriv(t + hstep, &axpy(&v, &k3, hstep));
        v = v
            .iter()
            .enumerate()
            .map(|(i, x)| x + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (hstep / 6.0))
            .collect();
    }
    v
}

/// `dF/du` for `F = |<target|U|initial>|^2`, one `[Re q, Im q, Re c, Im c]`
/// row per step, via forward states, backward co-states and the exact
/// derivative of each step exponential.
pub fn grape_gradient(
    h: &DispersiveHamiltonian,
    pulses: &PulseSequence,
    initial: &JointState,
    target: &JointState,
) -> Result<Vec<[f64; CONTROLS]>> {
    Ok(fidelity_and_gradient(h, pulses, initial, target)?.1)
}

fn fidelity_and_gradient(
    h: &DispersiveHamiltonian,
    pulses: &PulseSequence,
    initial: &JointState,
    target: &JointState,
) -> Result<(f64, Vec<[f64; CONTROLS]>)> {
    h.validate()?;
    pulses.validate()?;
    check_state(h, initial)?;
    check_state(h, target)?;
    if h.frame != Frame::Rotating {
        return Err(Error::invalid("frame", "GRAPE runs in the rotating frame"));
    }
    let n = pulses.steps();
    let drift = h.drift_diagonal();
    let ops = h.control_operators();
    let steps: Vec<StepPropagator> = (0..n)
        .map(|k| StepPropagator::new(h.step_hamiltonian(&drift, &ops, pulses.controls(k)), pulses.dt))
        .collect();

    let mut forward = Vec::with_capacity(n + 1);
    forward.push(initial.amps.clone());
    for s in &steps {
        let next = mat_vec(&s.unitary, forward.last().unwrap());
        forward.push(next);
    }
    let c = overlap(&target.amps, &forward[n]);
    let fidelity = c.norm_sqr();

    let mut grad = vec![[0.0; CONTROLS]; n];
    let mut costate = target.amps.clone();
    let dt = pulses.dt;
    for k in (0..n).rev() {
        let s = &steps[k];
        let x = mat_vec(&s.vecs.adjoint(), &costate);
        let y = mat_vec(&s.vecs.adjoint(), &forward[k]);
        let d = s.vals.len();
        // Daleckii-Krein kernel for d/du exp(-i H dt)
        let mut phi = DMatrix::<Complex64>::zeros(d, d);
        for a in 0..d {
            let ea = Complex64::from_polar(1.0, -s.vals[a] * dt);
            for b in 0..d {
                let gap = s.vals[a] - s.vals[b];
                phi[(a, b)] = if gap.abs() * dt > 1e-8 {
                    let eb = Complex64::from_polar(1.0, -s.vals[b] * dt);
                    (ea - eb) / gap
                } else {
                    -I * dt * ea
                };
            }
        }
        for (j, op) in ops.iter().enumerate() {
            let m = s.vecs.adjoint() * op * &s.vecs;
            let mut dc = ZERO;
            for a in 0..d {
                let xa = x[a].conj();
                if xa == ZERO {
                    continue;
                }
                for b in 0..d {
                    dc += xa * phi[(a, b)] * m[(a, b)] * y[b];
                }
            }
            let g = 2.0 * (c.conj() * dc).re;
            if !g.is_finite() {
                return Err(Error::GradientNan(k));
            }
            grad[k][j] = g;
        }
        costate = mat_vec(&s.unitary.adjoint(), &costate);
    }
    Ok((fidelity, grad))
}

/// State-transfer fidelity `|<target|U(pulses)|initial>|^2`.
pub fn transfer_fidelity(
    h: &DispersiveHamiltonian,
    pulses: &PulseSequence,
    initial: &JointState,
    target: &JointState,
) -> Result<f64> {
    check_state(h, target)?;
    Ok(propagate(h, pulses, initial)?.fidelity(target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Momentum {
    None,
    /// Fixed heavy-ball coefficient.
    Fixed(f64),
    /// Polak-Ribiere coefficient, reset to zero when negative.
    PolakRibiere,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrapeConfig {
    pub max_iterations: usize,
    pub target_fidelity: f64,
    /// Cap on `|eq|` and `|ec|` (rad/s).
    pub amplitude_cap: f64,
    /// Weight of the mean squared normalized amplitude subtracted from F.
    pub amplitude_penalty: f64,
    pub momentum: Momentum,
    /// First trial step in normalized amplitude units.
    pub initial_step: f64,
    pub max_halvings: usize,
    /// Initial guess: uniform random in `[-init_scale, init_scale] * cap`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for GrapeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            target_fidelity: 0.99,
            amplitude_cap: 2.0 * std::f64::consts::PI * 4.0e6,
            amplitude_penalty: 0.0,
            momentum: Momentum::PolakRibiere,
            initial_step: 1.0,
            max_halvings: 40,
            init_scale: 0.1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GrapeResult {
    pub pulses: PulseSequence,
    pub fidelity: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fidelity before the first update and after each accepted update.
    pub fidelity_history: Vec<f64>,
}

impl GrapeResult {
    /// CSV `iteration,fidelity`.
    pub fn write_history_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,fidelity")?;
        for (i, f) in self.fidelity_history.iter().enumerate() {
            writeln!(out, "{i},{f}")?;
        }
        Ok(())
    }
}

struct Objective<'a> {
    h: &'a DispersiveHamiltonian,
    initial: &'a JointState,
    target: &'a JointState,
    dt: f64,
    cap: f64,
    penalty: f64,
}

impl Objective<'_> {
    fn pulses(&self, x: &[f64]) -> PulseSequence {
        let steps = x.len() / CONTROLS;
        let mut p = PulseSequence::zeros(steps, self.dt);
        for k in 0..steps {
            let u = [
                x[CONTROLS * k] * self.cap,
                x[CONTROLS * k + 1] * self.cap,
                x[CONTROLS * k + 2] * self.cap,
                x[CONTROLS * k + 3] * self.cap,
            ];
            p.set_controls(k, u);
        }
        p
    }

    fn penalty_value(&self, x: &[f64]) -> f64 {
        if self.penalty == 0.0 {
            return 0.0;
        }
        self.penalty * x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }

    /// (fidelity, objective)
    fn value(&self, x: &[f64]) -> Result<(f64, f64)> {
        let f = transfer_fidelity(self.h, &self.pulses(x), self.initial, self.target)?;
        Ok((f, f - self.penalty_value(x)))
    }

    fn gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (f, g) = fidelity_and_gradient(self.h, &self.pulses(x), self.initial, self.target)?;
        let scale = 2.0 * self.penalty / x.len() as f64;
        let flat = g
            .iter()
            .flatten()
            .zip(x)
            .map(|(gi, xi)| gi * self.cap - scale * xi)
            .collect();
        Ok((f, flat))
    }
}

/// Rescales each complex (Re, Im) pair to modulus at most 1.
fn project(x: &mut [f64]) {
    for pair in x.chunks_mut(2) {
        let r = (pair[0] * pair[0] + pair[1] * pair[1]).sqrt();
        if r > 1.0 {
            pair[0] /= r;
            pair[1] /= r;
        }
    }
}

/// Gradient ascent on the state-transfer fidelity with backtracking line
/// search, optional momentum, an amplitude cap and an optional quadratic
/// amplitude penalty. A step is accepted only if it raises both the
/// penalized objective and the bare fidelity.
pub fn grape_optimize(
    h: &DispersiveHamiltonian,
    initial: &JointState,
    target: &JointState,
    steps: usize,
    dt: f64,
    config: &GrapeConfig,
) -> Result<GrapeResult> {
    h.validate()?;
    check_state(h, initial)?;
    check_state(h, target)?;
    for (name, s) in [("initial", initial), ("target", target)] {
        if (s.norm_sqr() - 1.0).abs() > 1e-8 {
            return Err(Error::invalid(name, "state must be normalized"));
        }
    }
    if !(config.amplitude_cap > 0.0) {
        return Err(Error::invalid("amplitude_cap", "must be positive"));
    }

    let zero = PulseSequence::zeros(steps, dt);
    let f0 = transfer_fidelity(h, &zero, initial, target)?;
    if f0 >= config.target_fidelity || steps == 0 {
        return Ok(GrapeResult {
            pulses: zero,
            fidelity: f0,
            iterations: 0,
            converged: f0 >= config.target_fidelity,
            fidelity_history: vec![f0],
        });
    }

    let obj = Objective {
        h,
        initial,
        target,
        dt,
        cap: config.amplitude_cap,
        penalty: config.amplitude_penalty,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x: Vec<f64> = (0..steps * CONTROLS)
        .map(|_| config.init_scale * rng.random_range(-1.0..=1.0))
        .collect();
    project(&mut x);

    let (mut fid, mut val) = obj.value(&x)?;
    let mut history = vec![fid];
    let mut step = config.initial_step;
    let mut prev_grad: Option<Vec<f64>> = None;
    let mut direction: Vec<f64> = Vec::new();
    let mut iterations = 0;

    while iterations < config.max_iterations && fid < config.target_fidelity {
        let (_, g) = obj.gradient(&x)?;
        let beta = match (config.momentum, &prev_grad) {
            (Momentum::None, _) | (_, None) => 0.0,
            (Momentum::Fixed(b), Some(_)) => b,
            (Momentum::PolakRibiere, Some(gp)) => {
                let num: f64 = g.iter().zip(gp).map(|(a, b)| a * (a - b)).sum();
                let den: f64 = gp.iter().map(|a| a * a).sum();
                if den > 0.0 { (num / den).max(0.0) } else { 0.0 }
            }
        };
        let mut dir: Vec<f64> = if beta > 0.0 && direction.len() == g.len() {
            g.iter().zip(&direction).map(|(a, d)| a + beta * d).collect()
        } else {
            g.clone()
        };
        if dir.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() <= 0.0 {
            dir = g.clone();
        }

        let mut accepted = false;
        let mut all_nonfinite = true;
        for attempt in 0..2 {
            let mut s = step;
            for _ in 0..config.max_halvings {
                let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
                project(&mut trial);
                let (tf, tv) = obj.value(&trial)?;
                if tv.is_finite() {
                    all_nonfinite = false;
                }
                if tv > val && tf >= fid {
                    x = trial;
                    fid = tf;
                    val = tv;
                    step = s * 1.5;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if accepted || attempt == 1 {
                break;
            }
            // retry along the bare gradient
            dir = g.clone();
            step = config.initial_step;
        }
        if all_nonfinite {
            return Err(Error::DivergentLineSearch(config.max_halvings));
        }
        if !accepted {
            break;
        }
        iterations += 1;
        history.push(fid);
        direction = dir;
        prev_grad = Some(g);
    }

    Ok(GrapeResult {
        pulses: obj.pulses(&x),
        fidelity: fid,
        iterations,
        converged: fid >= config.target_fidelity,
        fidelity_history: history,
    })
}

/// Replays fixed preparation pulses on `|g> (x) D(sqrt(nbar))|0>` and reports
/// `(nbar, fidelity with target)` for each requested occupation.
pub fn prep_fidelity_vs_occupation(
    h: &DispersiveHamiltonian,
    pulses: &PulseSequence,
    target: &JointState,
    nbar_initial: &[f64],
) -> Result<Vec<(f64, f64)>> {
    nbar_initial
        .iter()
        .map(|&nbar| {
            if nbar.is_nan() || nbar < 0.0 {
                return Err(Error::NegativeOccupation(nbar));
            }
            let cavity =
                StateVector::coherent(h.cavity_dim, Complex64::new(nbar.sqrt(), 0.0))?.state;
            let initial = JointState::product(Qubit::G, &cavity);
            Ok((nbar, transfer_fidelity(h, pulses, &initial, target)?))
        })
        .collect()
}

/// Smallest occupation at which the fidelity has dropped by more than
/// `max_drop` relative to the first point, linearly interpolated.
pub fn max_tolerable_occupation(curve: &[(f64, f64)], max_drop: f64) -> Option<f64> {
    let (_, f0) = *curve.first()?;
    curve.windows(2).find_map(|w| {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        let (d0, d1) = (f0 - y0, f0 - y1);
        (d0 <= max_drop && d1 > max_drop).then(|| x0 + (max_drop - d0) / (d1 - d0) * (x1 - x0))
    })
}

/// `|g> (x) |n>` for a truncated cavity.
pub fn ground_fock(cavity_dim: usize, n: usize) -> Result<JointState> {
    Ok(JointState::product(Qubit::G, &qstate::fock(cavity_dim, n)?))
}
