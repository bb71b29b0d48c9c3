//! Dark-photon statistics: background-count fits, conversion of the coherent
//! signal coefficient to a kinetic-mixing limit, lineshape-dependent
//! exclusion curves and the scan-rate budget.
//!
//! Units. Times are seconds, angular frequencies rad/s, volumes m^3. The dark
//! matter density is configured in GeV/cm^3. The signal coefficient `a0`
//! (s^-2) relates to the mixing angle by `a0 = eps^2 rho m G V / hbar^2`
//! with `m = hbar omega`, i.e. `a0 = eps^2 (rho / hbar) omega G V`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit;
use crate::hmm;
use crate::trajsim::{self, DeviceParams, ProtocolConfig};

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// One GeV in joules.
pub const GEV: f64 = 1.602_176_634e-10;

/// Fitted signal coefficient and its two quoted uncertainties (s^-2).
pub const A0_FIT: f64 = 1.9e3;
pub const SIGMA_A0_FIT: f64 = 7.662e5;
pub const SIGMA_A0_SYSTEMATICS: f64 = 9.807e5;

/// One background measurement: `counts` positives out of `n_trials` at dwell
/// `tau` with the cavity prepared in `|n>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRow {
    pub n: usize,
    pub tau: f64,
    pub n_trials: u64,
    pub counts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundDataset {
    pub rows: Vec<BackgroundRow>,
}

impl BackgroundDataset {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Empty("background dataset"));
        }
        for r in &self.rows {
            if r.counts > r.n_trials {
                return Err(Error::invalid("counts", format!("{} counts exceed {} trials", r.counts, r.n_trials)));
            }
            if !(r.tau > 0.0) {
                return Err(Error::invalid("tau", "dwell must be positive"));
            }
        }
        Ok(())
    }

    /// Distinct Fock levels in order of first appearance, sorted.
    pub fn levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// CSV with header `n,tau_us,n_trials,counts`.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with('n')) {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::invalid("background csv", format!("expected 4 columns: {line}")));
            }
            let bad = |what: &str| Error::invalid("background csv", format!("bad {what} in: {line}"));
            rows.push(BackgroundRow {
                n: f[0].parse().map_err(|_| bad("n"))?,
                tau: f[1].parse::<f64>().map_err(|_| bad("tau_us"))? * 1e-6,
                n_trials: f[2].parse().map_err(|_| bad("n_trials"))?,
                counts: f[3].parse().map_err(|_| bad("counts"))?,
            });
        }
        let d = Self { rows };
        d.validate()?;
        Ok(d)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,tau_us,n_trials,counts")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.n, r.tau * 1e6, r.n_trials, r.counts)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    /// Least squares weighted by observed counts, `sigma^2 = max(k, 1)`.
    Ols,
    /// Poisson maximum likelihood via iteratively reweighted least squares.
    Mle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundFit {
    pub a0: f64,
    pub b: f64,
    /// `(n, c_n)` per Fock level.
    pub c: Vec<(usize, f64)>,
    /// Order: a0, b, then c_n in level order.
    pub covariance: Vec<Vec<f64>>,
    pub method: FitMethod,
    pub iterations: usize,
}

impl BackgroundFit {
    pub fn sigma_a0(&self) -> f64 {
        self.covariance[0][0].max(0.0).sqrt()
    }

    pub fn sigma_b(&self) -> f64 {
        self.covariance[1][1].max(0.0).sqrt()
    }

    pub fn sigma_c(&self, i: usize) -> f64 {
        self.covariance[2 + i][2 + i].max(0.0).sqrt()
    }

    pub fn c_for(&self, n: usize) -> Option<f64> {
        self.c.iter().find(|(m, _)| *m == n).map(|(_, v)| *v)
    }
}

/// Expected counts `a0 (n+1) tau^2 N + b tau N + c_n N`.
pub fn background_model(a0: f64, b: f64, c_n: f64, row: &BackgroundRow) -> f64 {
    let nt = row.n_trials as f64;
    a0 * (row.n as f64 + 1.0) * row.tau * row.tau * nt + b * row.tau * nt + c_n * nt
}

fn background_design(data: &BackgroundDataset, levels: &[usize]) -> DMatrix<f64> {
    let cols = 2 + levels.len();
    DMatrix::from_fn(data.rows.len(), cols, |r, c| {
        let row = &data.rows[r];
        let nt = row.n_trials as f64;
        match c {
            0 => (row.n as f64 + 1.0) * row.tau * row.tau * nt,
            1 => row.tau * nt,
            k => {
                if levels[k - 2] == row.n {
                    nt
                } else {
                    0.0
                }
            }
        }
    })
}

pub fn fit_background(data: &BackgroundDataset, method: FitMethod) -> Result<BackgroundFit> {
    data.validate()?;
    let levels = data.levels();
    let mut taus: Vec<f64> = data.rows.iter().map(|r| r.tau).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    if levels.len() < 2 || taus.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need >= 2 Fock levels and >= 2 dwell times, got {} and {}",
            levels.len(),
            taus.len()
        )));
    }
    let design = background_design(data, &levels);
    let y: Vec<f64> = data.rows.iter().map(|r| r.counts as f64).collect();
    let neyman: Vec<f64> = y.iter().map(|k| k.max(1.0).sqrt()).collect();
    let mut f = fit::weighted_least_squares(&design, &y, &neyman)?;
    let mut iterations = 1;
    if method == FitMethod::Mle {
        // Reweighting by the fitted mean converges to the Poisson MLE for a
        // linear mean model.
        for _ in 0..100 {
            let mu: Vec<f64> = (0..y.len())
                .map(|r| {
                    let m: f64 = (0..f.params.len()).map(|c| design[(r, c)] * f.params[c]).sum();
                    m.max(0.05)
                })
                .collect();
            let s: Vec<f64> = mu.iter().map(|m| m.sqrt()).collect();
            let next = fit::weighted_least_squares(&design, &y, &s)?;
            iterations += 1;
            let moved = next
                .params
                .iter()
                .zip(&f.params)
                .enumerate()
                .map(|(i, (a, b))| (a - b).abs() / next.sigma(i).max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max);
            f = next;
            if moved < 1e-8 {
                break;
            }
        }
    }
    Ok(BackgroundFit {
        a0: f.params[0],
        b: f.params[1],
        c: levels.iter().copied().zip(f.params[2..].iter().copied()).collect(),
        covariance: f.covariance,
        method,
        iterations,
    })
}

/// True parameters for synthetic background data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTruth {
    pub a0: f64,
    pub b: f64,
    pub c: Vec<(usize, f64)>,
}

impl BackgroundTruth {
    /// The fitted values of the published dataset.
    pub fn published() -> Self {
        Self {
            a0: A0_FIT,
            b: -7.26,
            c: vec![(0, 3.402e-4), (1, 1.419e-3), (2, 5.860e-4), (4, 7.330e-3)],
        }
    }

    pub fn expected(&self, row: &BackgroundRow) -> Result<f64> {
        let c = self
            .c
            .iter()
            .find(|(n, _)| *n == row.n)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid("c", format!("no c_n for |{}>", row.n)))?;
        Ok(background_model(self.a0, self.b, c, row))
    }
}

/// Rows for every `(level, tau)` pair with `n_trials` each and zero counts.
pub fn background_layout(levels: &[usize], taus: &[f64], n_trials: u64) -> BackgroundDataset {
    BackgroundDataset {
        rows: levels
            .iter()
            .flat_map(|&n| taus.iter().map(move |&tau| BackgroundRow { n, tau, n_trials, counts: 0 }))
            .collect(),
    }
}

/// Poisson counts around the truth, clipped to the number of trials.
pub fn synthesize_background<R: Rng + ?Sized>(
    truth: &BackgroundTruth,
    layout: &BackgroundDataset,
    rng: &mut R,
) -> Result<BackgroundDataset> {
    let rows = layout
        .rows
        .iter()
        .map(|r| {
            let mu = truth.expected(r)?;
            if !(mu >= 0.0) {
                return Err(Error::invalid("background truth", format!("negative mean {mu} for {r:?}")));
            }
            let k = if mu > 0.0 {
                Poisson::new(mu).map_err(|e| Error::invalid("mu", e.to_string()))?.sample(rng) as u64
            } else {
                0
            };
            Ok(BackgroundRow { counts: k.min(r.n_trials), ..*r })
        })
        .collect::<Result<_>>()?;
    Ok(BackgroundDataset { rows })
}

/// Expected counts rounded to integers, a noise-free reference dataset.
pub fn asimov_background(truth: &BackgroundTruth, layout: &BackgroundDataset) -> Result<BackgroundDataset> {
    let rows = layout
        .rows
        .iter()
        .map(|r| Ok(BackgroundRow { counts: truth.expected(r)?.max(0.0).round() as u64, ..*r }))
        .collect::<Result<_>>()?;
    Ok(BackgroundDataset { rows })
}

/// Background counts from simulated no-drive protocol runs: every passed
/// trial with likelihood ratio above threshold is a count.
pub fn simulate_background(
    params: &DeviceParams,
    levels: &[usize],
    taus: &[f64],
    n_trials: usize,
    lambda_thresh: f64,
    seed: u64,
) -> Result<BackgroundDataset> {
    let base = ProtocolConfig {
        n_trials,
        rng_seed: seed,
        ..ProtocolConfig::default()
    };
    simulate_background_with(params, levels, taus, &base, lambda_thresh)
}

/// As [`simulate_background`], with every protocol setting except the target
/// level, dwell and drive taken from `base`.
pub fn simulate_background_with(
    params: &DeviceParams,
    levels: &[usize],
    taus: &[f64],
    base: &ProtocolConfig,
    lambda_thresh: f64,
) -> Result<BackgroundDataset> {
    let mut rows = Vec::new();
    for (i, &n) in levels.iter().enumerate() {
        let model = hmm::build_model(params, n + 1)?;
        for (j, &tau) in taus.iter().enumerate() {
            let cell = (i * taus.len() + j) as u64;
            let config = ProtocolConfig {
                target_n: n,
                dwell_tau: tau,
                alpha_drive: Complex64::new(0.0, 0.0),
                rng_seed: base.rng_seed ^ cell.wrapping_mul(0xD1B5_4A32_D192_ED03),
                ..base.clone()
            };
            let trials = trajsim::run_protocol(params, &config)?;
            let records: Vec<_> = trials.into_iter().map(|t| t.record).collect();
            let c = hmm::classify_stream(&model, &records, lambda_thresh)?;
            rows.push(BackgroundRow { n, tau, n_trials: c.passed(), counts: c.positive });
        }
    }
    Ok(BackgroundDataset { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsParams {
    pub rho_dm_gev_per_cm3: f64,
    pub sigma_rho_dm_gev_per_cm3: f64,
    /// Candidate mass as an angular frequency; `None` means on resonance.
    pub m_dm: Option<f64>,
    pub omega_s: f64,
    pub sigma_omega_s: f64,
    pub q_s: f64,
    pub sigma_q_s: f64,
    /// Cavity volume (m^3).
    pub volume: f64,
    pub sigma_volume: f64,
    /// Configured geometric form factor.
    pub g: f64,
    pub sigma_g: f64,
    /// Use the closed-form rectangular-mode factor instead of `g`.
    pub g_from_formula: bool,
    pub q_dm: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            rho_dm_gev_per_cm3: 0.4,
            sigma_rho_dm_gev_per_cm3: 0.0,
            m_dm: None,
            omega_s: 2.0 * PI * 5.965e9,
            sigma_omega_s: 2.0 * PI * 25.0,
            q_s: 5.11e7,
            sigma_q_s: 1.4e5,
            volume: 43.13e-6,
            sigma_volume: 1.2e-6,
            g: 0.002,
            sigma_g: 0.0002,
            g_from_formula: false,
            q_dm: 1e6,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho_dm_gev_per_cm3", self.rho_dm_gev_per_cm3),
            ("omega_s", self.omega_s),
            ("volume", self.volume),
            ("g", self.form_factor().used),
            ("q_dm", self.q_dm),
            ("q_s", self.q_s),
            ("m_dm", self.mass()),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn mass(&self) -> f64 {
        self.m_dm.unwrap_or(self.omega_s)
    }

    /// `rho / hbar` in s^-1 m^-3.
    pub fn rho_angular_per_m3(&self) -> f64 {
        self.rho_dm_gev_per_cm3 * GEV * 1e6 / HBAR
    }

    pub fn form_factor(&self) -> FormFactor {
        let formula = form_factor_rectangular();
        FormFactor {
            formula,
            configured: self.g,
            used: if self.g_from_formula { formula } else { self.g },
        }
    }

    /// `a0 / eps^2` (s^-2).
    pub fn conversion(&self) -> f64 {
        self.rho_angular_per_m3() * self.mass() * self.form_factor().used * self.volume
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormFactor {
    pub formula: f64,
    pub configured: f64,
    pub used: f64,
}

/// `(1/3) |int E_z|^2 / (V int |E_z|^2)` for the `sin(pi x/l) sin(pi y/w)`
/// mode: `(1/3) 64 / pi^4`.
pub fn form_factor_rectangular() -> f64 {
    64.0 / (3.0 * PI.powi(4))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UncertaintyTerm {
    pub name: &'static str,
    pub value: f64,
    pub sigma: f64,
    /// Contribution to `sigma_eps` (same units as eps).
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExclusionResult {
    pub a0: f64,
    pub sigma_a0: f64,
    /// `a0 / eps^2` (s^-2).
    pub conversion: f64,
    pub epsilon0: f64,
    pub sigma_epsilon: f64,
    pub epsilon_90: f64,
    pub terms: Vec<UncertaintyTerm>,
    pub form_factor: FormFactor,
}

/// One-sided 90% quantile of a unit Gaussian, as a multiple of sigma.
pub const Z90: f64 = 1.28;

/// `eps0 = sqrt(a0 / K)` with first-order propagation of every parameter
/// uncertainty. For `a0 <= 0` the estimate is floored at zero and `sigma_eps`
/// becomes the one-standard-error excursion `sqrt(sigma_a / K)`.
pub fn epsilon_from_a0(a0: f64, sigma_a0: f64, phys: &PhysicsParams) -> Result<ExclusionResult> {
    phys.validate()?;
    if !a0.is_finite() || !(sigma_a0 >= 0.0) {
        return Err(Error::NonFinite("a0"));
    }
    let k = phys.conversion();
    let ff = phys.form_factor();
    let sigma_g = if phys.g_from_formula { 0.0 } else { phys.sigma_g };
    let rel = [
        ("rho_dm", phys.rho_dm_gev_per_cm3, phys.sigma_rho_dm_gev_per_cm3),
        ("omega_s", phys.mass(), if phys.m_dm.is_none() { phys.sigma_omega_s } else { 0.0 }),
        ("volume", phys.volume, phys.sigma_volume),
        ("g", ff.used, sigma_g),
    ];
    let mut terms = Vec::new();
    let (epsilon0, sigma_epsilon) = if a0 > 0.0 {
        let eps = (a0 / k).sqrt();
        terms.push(UncertaintyTerm {
            name: "a0",
            value: a0,
            sigma: sigma_a0,
            contribution: eps * sigma_a0 / (2.0 * a0),
        });
        for (name, v, s) in rel {
            terms.push(UncertaintyTerm { name, value: v, sigma: s, contribution: 0.5 * eps * s / v });
        }
        terms.push(UncertaintyTerm { name: "q_s", value: phys.q_s, sigma: phys.sigma_q_s, contribution: 0.0 });
        let var: f64 = terms.iter().map(|t| t.contribution * t.contribution).sum();
        (eps, var.sqrt())
    } else {
        let s = (sigma_a0 / k).sqrt();
        terms.push(UncertaintyTerm { name: "a0", value: a0, sigma: sigma_a0, contribution: s });
        (0.0, s)
    };
    Ok(ExclusionResult {
        a0,
        sigma_a0,
        conversion: k,
        epsilon0,
        sigma_epsilon,
        epsilon_90: epsilon0 + Z90 * sigma_epsilon,
        terms,
        form_factor: ff,
    })
}

/// Monte Carlo counterpart of the analytic `sigma_eps`. Parameters are drawn
/// from independent Gaussians and pushed through `eps^2 = a0 / K`; the spread
/// of `eps^2` is mapped back with the same first-order step as the analytic
/// result, `sigma_eps = sigma(eps^2) / (2 eps0)`, which stays defined when
/// draws of `a0` go negative.
pub fn monte_carlo_sigma_epsilon(
    a0: f64,
    sigma_a0: f64,
    phys: &PhysicsParams,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    phys.validate()?;
    if draws < 2 {
        return Err(Error::InsufficientData("need at least two draws".into()));
    }
    let g_sigma = if phys.g_from_formula { 0.0 } else { phys.sigma_g };
    let mass_sigma = if phys.m_dm.is_none() { phys.sigma_omega_s } else { 0.0 };
    let normal = |m: f64, s: f64| Normal::new(m, s).map_err(|e| Error::invalid("sigma", e.to_string()));
    let dists = [
        normal(a0, sigma_a0)?,
        normal(phys.rho_dm_gev_per_cm3, phys.sigma_rho_dm_gev_per_cm3)?,
        normal(phys.mass(), mass_sigma)?,
        normal(phys.volume, phys.sigma_volume)?,
        normal(phys.form_factor().used, g_sigma)?,
    ];
    let scale = GEV * 1e6 / HBAR;
    const CHUNK: usize = 4096;
    let chunks = draws.div_ceil(CHUNK);
    let sums: Vec<(f64, f64, usize)> = (0..chunks as u64)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let count = CHUNK.min(draws - c as usize * CHUNK);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let v: Vec<f64> = dists.iter().map(|d| d.sample(&mut rng)).collect();
                let k = v[1] * scale * v[2] * v[3] * v[4];
                let e2 = v[0] / k;
                s1 += e2;
                s2 += e2 * e2;
            }
            (s1, s2, count)
        })
        .collect();
    let (s1, s2, n) = sums.iter().fold((0.0, 0.0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    let n = n as f64;
    let mean = s1 / n;
    let sd = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0).sqrt();
    let eps0 = (a0 / phys.conversion()).max(0.0).sqrt();
    Ok(if eps0 > 0.0 { sd / (2.0 * eps0) } else { sd.sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lineshape {
    /// Lorentzian dark-matter line (FWHM `nu / Q_DM`) seen through a
    /// Gaussian resolved-pulse acceptance of spectral width
    /// `1 / (2 pi sigma_t)`.
    LorentzianGaussian { pulse_sigma_t: f64 },
    /// Lorentzian line through a flat acceptance band of full width
    /// `bandwidth` (Hz).
    TopHat { bandwidth: f64 },
}

impl Default for Lineshape {
    fn default() -> Self {
        // 3 us resolved pulse, Gaussian envelope with sigma = T/4
        Lineshape::LorentzianGaussian { pulse_sigma_t: 0.75e-6 }
    }
}

/// Half width at half maximum of the dark-matter line (Hz).
pub fn dm_half_linewidth(phys: &PhysicsParams) -> f64 {
    phys.mass() / (2.0 * PI) / (2.0 * phys.q_dm)
}

/// Fraction of a Lorentzian line detuned by `detuning` (Hz) that falls in the
/// acceptance, relative to zero detuning.
pub fn relative_acceptance(lineshape: Lineshape, phys: &PhysicsParams, detuning: f64) -> Result<f64> {
    let hw = dm_half_linewidth(phys);
    let overlap = |d: f64| -> Result<f64> {
        match lineshape {
            Lineshape::TopHat { bandwidth } => {
                if !(bandwidth > 0.0) {
                    return Err(Error::invalid("bandwidth", "must be positive"));
                }
                let h = 0.5 * bandwidth;
                Ok((((h - d) / hw).atan() + ((h + d) / hw).atan()) / PI)
            }
            Lineshape::LorentzianGaussian { pulse_sigma_t } => {
                if !(pulse_sigma_t > 0.0) {
                    return Err(Error::invalid("pulse_sigma_t", "must be positive"));
                }
                let sf = 1.0 / (2.0 * PI * pulse_sigma_t);
                // f = d + hw tan(theta) maps the Lorentzian to a flat measure
                let steps = 20_000;
                let h = PI / steps as f64;
                let acc = |theta: f64| {
                    let f = d + hw * theta.tan();
                    (-0.5 * (f / sf).powi(2)).exp()
                };
                let mut s = 0.0;
                for i in 0..steps {
                    let th = -0.5 * PI + (i as f64 + 0.5) * h;
                    s += acc(th);
                }
                Ok(s * h / PI)
            }
        }
    };
    let r0 = overlap(0.0)?;
    Ok(overlap(detuning)? / r0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapConfig {
    /// Largest injected occupation that leaves state preparation intact.
    pub nbar_max: f64,
    /// Free evolution before the preparation pulse, during which the
    /// dark-matter field builds up without measurement resets.
    pub buildup_time: f64,
}

impl Default for CapConfig {
    fn default() -> Self {
        Self {
            nbar_max: 0.05,
            // reset plus preparation window of the default timing
            buildup_time: 8e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub detuning_hz: f64,
    pub mass_ghz: f64,
    pub acceptance: f64,
    pub epsilon_90: f64,
    /// Mixing angle above which the injected occupation breaks preparation.
    pub epsilon_cap: f64,
}

/// `eps_90(detuning) = eps_90(0) / sqrt(acceptance)`, since counts scale as
/// `eps^2`, together with the preparation-failure ceiling
/// `sqrt(nbar_max / (K t_b^2 acceptance))`.
pub fn exclusion_curve(
    result: &ExclusionResult,
    phys: &PhysicsParams,
    lineshape: Lineshape,
    detunings_hz: &[f64],
    cap: &CapConfig,
) -> Result<Vec<CurvePoint>> {
    if detunings_hz.is_empty() {
        return Err(Error::Empty("mass grid"));
    }
    let nu = phys.mass() / (2.0 * PI);
    detunings_hz
        .iter()
        .map(|&d| {
            let r = relative_acceptance(lineshape, phys, d)?;
            let (eps, cap_eps) = if r > 0.0 {
                (
                    result.epsilon_90 / r.sqrt(),
                    (cap.nbar_max / (result.conversion * cap.buildup_time.powi(2) * r)).sqrt(),
                )
            } else {
                (f64::INFINITY, f64::INFINITY)
            };
            Ok(CurvePoint {
                detuning_hz: d,
                mass_ghz: (nu + d) / 1e9,
                acceptance: r,
                epsilon_90: eps,
                epsilon_cap: cap_eps,
            })
        })
        .collect()
}

/// CSV `mass_GHz,detuning_Hz,acceptance,epsilon90,epsilon_cap`.
pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], mut out: W) -> Result<()> {
    writeln!(out, "mass_GHz,detuning_Hz,acceptance,epsilon90,epsilon_cap")?;
    for p in curve {
        writeln!(
            out,
            "{:.12},{},{},{:e},{:e}",
            p.mass_ghz, p.detuning_hz, p.acceptance, p.epsilon_90, p.epsilon_cap
        )?;
    }
    Ok(())
}

/// One protocol repetition: preparation, pre-checks, dwell, measurement
/// train and reset (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanTiming {
    pub prep: f64,
    pub n_prechecks: usize,
    pub dwell: f64,
    pub n_repeats: usize,
    pub t_m: f64,
    pub reset: f64,
    pub trials_per_step: u64,
}

impl Default for ScanTiming {
    fn default() -> Self {
        Self {
            prep: 2e-6,
            n_prechecks: 3,
            dwell: 20e-6,
            n_repeats: 30,
            t_m: 5e-6,
            reset: 6e-6,
            trials_per_step: 20_000,
        }
    }
}

impl ScanTiming {
    pub fn sequence_time(&self) -> f64 {
        self.prep + self.n_prechecks as f64 * self.t_m + self.dwell + self.n_repeats as f64 * self.t_m + self.reset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRate {
    /// Frequency step per setting, `nu / Q_DM` (Hz).
    pub step_hz: f64,
    pub half_linewidth_hz: f64,
    pub sequence_time: f64,
    pub time_per_step: f64,
    pub duty_cycle: f64,
    /// Hz of dark-matter mass covered per second of wall time.
    pub rate_hz_per_s: f64,
}

pub fn scan_rate(phys: &PhysicsParams, timing: &ScanTiming) -> Result<ScanRate> {
    phys.validate()?;
    for (name, v) in [("prep", timing.prep), ("dwell", timing.dwell), ("t_m", timing.t_m), ("reset", timing.reset)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(name, "must be a non-negative time"));
        }
    }
    let seq = timing.sequence_time();
    if !(seq > 0.0) || timing.trials_per_step == 0 {
        return Err(Error::invalid("timing", "empty sequence"));
    }
    let step = phys.mass() / (2.0 * PI) / phys.q_dm;
    let per_step = seq * timing.trials_per_step as f64;
    Ok(ScanRate {
        step_hz: step,
        half_linewidth_hz: 0.5 * step,
        sequence_time: seq,
        time_per_step: per_step,
        duty_cycle: timing.dwell / seq,
        rate_hz_per_s: step / per_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference_layout() -> BackgroundDataset {
        background_layout(&[0, 1, 2, 4], &[1e-6, 5e-6, 10e-6, 20e-6], 20_000)
    }

    #[test]
    fn rho_anchor_is_per_cubic_metre() {
        let p = PhysicsParams::default();
        let anchor = 2.0 * PI * 9.67e19 * 1e9;
        assert_relative_eq!(p.rho_angular_per_m3(), anchor, max_relative = 1e-3);
    }

    #[test]
    fn conversion_from_first_principles() {
        let p = PhysicsParams::default();
        let rho_j_per_m3 = 0.4 * 1.602_176_634e-10 / 1e-6;
        let k = rho_j_per_m3 * p.omega_s * p.g * p.volume / HBAR;
        assert_relative_eq!(p.conversion(), k, max_relative = 1e-12);
        assert_relative_eq!(p.conversion(), 1.965e33, max_relative = 1e-3);
    }

    #[test]
    fn form_factor_values() {
        assert_relative_eq!(form_factor_rectangular(), 0.2190, max_relative = 1e-3);
        let p = PhysicsParams::default();
        assert_eq!(p.form_factor().used, 0.002);
        let q = PhysicsParams { g_from_formula: true, ..p };
        assert_eq!(q.form_factor().used, form_factor_rectangular());
        assert_eq!(q.form_factor().configured, 0.002);
    }

    #[test]
    fn epsilon_square_root_law() {
        let p = PhysicsParams::default();
        let a = epsilon_from_a0(1.0e4, 0.0, &p).unwrap();
        let b = epsilon_from_a0(4.0e4, 0.0, &p).unwrap();
        assert_relative_eq!(b.epsilon0, 2.0 * a.epsilon0, max_relative = 1e-12);
    }

    #[test]
    fn zero_signal_gives_one_sided_limit() {
        let p = PhysicsParams::default();
        let r = epsilon_from_a0(0.0, SIGMA_A0_SYSTEMATICS, &p).unwrap();
        assert_eq!(r.epsilon0, 0.0);
        assert_relative_eq!(r.epsilon_90, 1.28 * r.sigma_epsilon, max_relative = 1e-12);
        let neg = epsilon_from_a0(-5e4, SIGMA_A0_SYSTEMATICS, &p).unwrap();
        assert_eq!(neg.epsilon0, 0.0);
    }

    #[test]
    fn propagation_dominated_by_a0() {
        let p = PhysicsParams::default();
        let r = epsilon_from_a0(A0_FIT, SIGMA_A0_FIT, &p).unwrap();
        let a = r.terms.iter().find(|t| t.name == "a0").unwrap().contribution;
        assert!(a / r.sigma_epsilon > 0.999);
        assert_relative_eq!(r.sigma_epsilon / r.epsilon0, SIGMA_A0_FIT / (2.0 * A0_FIT), max_relative = 1e-4);
        assert_relative_eq!(r.epsilon_90, r.epsilon0 + 1.28 * r.sigma_epsilon, max_relative = 1e-12);
    }

    #[test]
    fn bad_physics_rejected() {
        let p = PhysicsParams { volume: -1.0, ..PhysicsParams::default() };
        assert!(epsilon_from_a0(1.0, 1.0, &p).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_linear_propagation() {
        let p = PhysicsParams::default();
        for (a0, sa) in [(A0_FIT, SIGMA_A0_SYSTEMATICS), (1e6, 1e5)] {
            let r = epsilon_from_a0(a0, sa, &p).unwrap();
            let mc = monte_carlo_sigma_epsilon(a0, sa, &p, 100_000, 5).unwrap();
            assert!((mc - r.sigma_epsilon).abs() / r.sigma_epsilon < 0.05, "{mc} vs {}", r.sigma_epsilon);
        }
    }

    #[test]
    fn scan_budget() {
        let s = scan_rate(&PhysicsParams::default(), &ScanTiming::default()).unwrap();
        assert_relative_eq!(s.sequence_time, 193e-6, max_relative = 1e-12);
        assert_relative_eq!(s.duty_cycle, 20.0 / 193.0, max_relative = 1e-12);
        assert_eq!(format!("{:.0}%", 100.0 * s.duty_cycle), "10%");
        assert_relative_eq!(s.half_linewidth_hz, 2982.5, max_relative = 1e-9);
        assert_eq!(format!("{:.0} kHz", s.half_linewidth_hz / 1e3), "3 kHz");
        assert_relative_eq!(s.time_per_step, 3.86, max_relative = 1e-9);
        let longer = ScanTiming { dwell: 40e-6, ..ScanTiming::default() };
        assert!(scan_rate(&PhysicsParams::default(), &longer).unwrap().duty_cycle > s.duty_cycle);
    }

    #[test]
    fn acceptance_shapes() {
        let p = PhysicsParams::default();
        for shape in [Lineshape::default(), Lineshape::TopHat { bandwidth: 300e3 }] {
            assert_relative_eq!(relative_acceptance(shape, &p, 0.0).unwrap(), 1.0, epsilon = 1e-12);
            let mut last = 1.0;
            for d in [1e3, 1e4, 5e4, 1e5, 2e5, 4e5] {
                let r = relative_acceptance(shape, &p, d).unwrap();
                assert!(r < last && r > 0.0);
                let mirror = relative_acceptance(shape, &p, -d).unwrap();
                assert_relative_eq!(r, mirror, max_relative = 1e-9);
                last = r;
            }
        }
    }

    #[test]
    fn gaussian_acceptance_oracle() {
        // A line much narrower than the band sees the band itself.
        let p = PhysicsParams { q_dm: 1e12, ..PhysicsParams::default() };
        let st = 0.75e-6;
        let sf = 1.0 / (2.0 * PI * st);
        let d = 150e3;
        let r = relative_acceptance(Lineshape::LorentzianGaussian { pulse_sigma_t: st }, &p, d).unwrap();
        assert_relative_eq!(r, (-0.5 * (d / sf).powi(2)).exp(), max_relative = 1e-6);
    }

    #[test]
    fn curve_on_resonance_and_cap() {
        let p = PhysicsParams::default();
        let r = epsilon_from_a0(A0_FIT, SIGMA_A0_SYSTEMATICS, &p).unwrap();
        let c = exclusion_curve(&r, &p, Lineshape::default(), &[0.0, 5e4, -5e4], &CapConfig::default()).unwrap();
        assert_relative_eq!(c[0].epsilon_90, r.epsilon_90, max_relative = 1e-12);
        assert!(c[1].epsilon_90 > c[0].epsilon_90);
        assert!(c[0].epsilon_cap > c[0].epsilon_90);
        assert_relative_eq!(c[0].mass_ghz, 5.965, max_relative = 1e-12);
        assert!(exclusion_curve(&r, &p, Lineshape::default(), &[], &CapConfig::default()).is_err());
    }

    #[test]
    fn zero_counts_fit_to_zero() {
        let d = reference_layout();
        for m in [FitMethod::Ols, FitMethod::Mle] {
            let f = fit_background(&d, m).unwrap();
            assert!(f.a0.abs() < 1e-6 && f.b.abs() < 1e-9);
            assert!(f.c.iter().all(|(_, c)| c.abs() < 1e-12));
            assert!(f.covariance.iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn exact_counts_are_recovered() {
        let truth = BackgroundTruth { a0: 2e6, b: 40.0, c: vec![(0, 1e-3), (1, 2e-3), (3, 5e-4)] };
        let layout = background_layout(&[0, 1, 3], &[2e-6, 10e-6, 30e-6], 1_000_000);
        let rows = layout
            .rows
            .iter()
            .map(|r| BackgroundRow { counts: truth.expected(r).unwrap() as u64, ..*r })
            .collect();
        let d = BackgroundDataset { rows };
        let f = fit_background(&d, FitMethod::Mle).unwrap();
        assert!((f.a0 - truth.a0).abs() < 3.0 * f.sigma_a0());
        assert!((f.b - truth.b).abs() < 3.0 * f.sigma_b());
    }

    #[test]
    fn published_truth_reproduces_quoted_error_scale() {
        let d = asimov_background(&BackgroundTruth::published(), &reference_layout()).unwrap();
        let f = fit_background(&d, FitMethod::Mle).unwrap();
        // same order as the published 7.662e5
        assert!(f.sigma_a0() > 2e5 && f.sigma_a0() < 3e6, "{}", f.sigma_a0());
    }

    #[test]
    fn rank_deficient_layouts_rejected() {
        let one_level = background_layout(&[1], &[1e-6, 5e-6], 100);
        assert!(matches!(fit_background(&one_level, FitMethod::Ols), Err(Error::InsufficientData(_))));
        let one_tau = background_layout(&[0, 1], &[5e-6], 100);
        assert!(matches!(fit_background(&one_tau, FitMethod::Ols), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn more_exposure_tightens_the_limit() {
        let p = PhysicsParams::default();
        let truth = BackgroundTruth::published();
        let mut last = f64::INFINITY;
        for n_trials in [20_000, 80_000, 320_000] {
            let layout = background_layout(&[0, 1, 2, 4], &[1e-6, 5e-6, 10e-6, 20e-6], n_trials);
            let f = fit_background(&asimov_background(&truth, &layout).unwrap(), FitMethod::Mle).unwrap();
            let e = epsilon_from_a0(0.0, f.sigma_a0(), &p).unwrap().epsilon_90;
            assert!(e < last);
            last = e;
        }
    }

    #[test]
    fn higher_fock_levels_shrink_a0_error() {
        let truth = BackgroundTruth {
            a0: 1e5,
            b: 5.0,
            c: (0..8).map(|n| (n, 5e-4)).collect(),
        };
        let taus = [1e-6, 5e-6, 10e-6, 20e-6];
        let sigma = |levels: &[usize]| {
            let layout = background_layout(levels, &taus, 40_000);
            fit_background(&asimov_background(&truth, &layout).unwrap(), FitMethod::Mle)
                .unwrap()
                .sigma_a0()
        };
        let low = sigma(&[0, 1]);
        let mid = sigma(&[2, 3]);
        let high = sigma(&[5, 6]);
        assert!(low > mid && mid > high, "{low} {mid} {high}");
    }

    #[test]
    fn csv_round_trip() {
        let d = reference_layout();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = BackgroundDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.rows.len(), d.rows.len());
        for (a, b) in back.rows.iter().zip(&d.rows) {
            assert_eq!(a.n, b.n);
            assert_relative_eq!(a.tau, b.tau, max_relative = 1e-12);
        }
        let bad = "n,tau_us,n_trials,counts\n0,5,10,11\n";
        assert!(BackgroundDataset::read_csv(bad.as_bytes()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn epsilon_90_is_one_sided_bound(a0 in -1e6f64..1e6, sigma in 1e2f64..1e7) {
            let r = epsilon_from_a0(a0, sigma, &PhysicsParams::default()).unwrap();
            proptest::prop_assert!(r.epsilon0 >= 0.0 && r.sigma_epsilon > 0.0);
            let expected = r.epsilon0 + 1.28 * r.sigma_epsilon;
            proptest::prop_assert!((r.epsilon_90 - expected).abs() <= 1e-12 * expected);
        }

        #[test]
        fn synthetic_counts_never_exceed_trials(seed in proptest::prelude::any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = synthesize_background(&BackgroundTruth::published(), &reference_layout(), &mut rng).unwrap();
            proptest::prop_assert!(d.rows.iter().all(|r| r.counts <= r.n_trials));
        }
    }
}
