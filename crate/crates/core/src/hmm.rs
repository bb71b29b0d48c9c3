//! Hidden Markov model for repeated number-resolved qubit measurements.
//!
//! Hidden states are `[n'g, n'e, ng, ne]` where `n` is the probed Fock level
//! `n0` and `n'` is every other level. One transition covers a measurement
//! interval: stochastic cavity and qubit relaxation, then the next resolved
//! pi-pulse, which flips the qubit iff the cavity is in `n0`.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit;
use crate::qstate;
use crate::trajsim::{self, DeviceParams, Readout, SweepCell, Trial};

pub const N_PRIME_G: usize = 0;
pub const N_PRIME_E: usize = 1;
pub const N_G: usize = 2;
pub const N_E: usize = 3;

/// Per-cycle cavity and qubit transition probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionElements {
    /// Leaving `n0` by decay, heating or demolition.
    pub p_nn_prime: f64,
    /// Entering `n0` by heating from `n0 - 1`.
    pub p_n_prime_n: f64,
    pub p_ge: f64,
    pub p_eg: f64,
}

impl TransitionElements {
    pub fn from_params(params: &DeviceParams, n0: usize) -> Self {
        let t = params.t_m;
        let leave = params.decay_probability(n0, t)
            + params.heating_probability(n0, t)
            + if n0 > 0 { params.demolition_probability(n0) } else { 0.0 };
        let enter = if n0 > 0 {
            params.heating_probability(n0 - 1, t)
        } else {
            0.0
        };
        Self {
            p_nn_prime: leave.min(1.0),
            p_n_prime_n: enter.min(1.0),
            p_ge: params.qubit_heating_probability(t),
            p_eg: params.qubit_decay_probability(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub n0: usize,
    /// Row-stochastic, `t[from][to]`.
    pub t: [[f64; 4]; 4],
    /// `e[state][readout]` with readout 0 = G, 1 = E.
    pub e: [[f64; 2]; 4],
    pub elements: TransitionElements,
    pub built_from: DeviceParams,
}

/// Builds the model for probing `|n0>`.
pub fn build_model(params: &DeviceParams, n0: usize) -> Result<HmmModel> {
    params.validate()?;
    let el = TransitionElements::from_params(params, n0);
    for (name, p) in [
        ("p_nn_prime", el.p_nn_prime),
        ("p_n_prime_n", el.p_n_prime_n),
        ("p_ge", el.p_ge),
        ("p_eg", el.p_eg),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(name, format!("probability {p} outside [0,1]")));
        }
    }
    // cavity class: 0 = n', 1 = n
    let cav = [
        [1.0 - el.p_n_prime_n, el.p_n_prime_n],
        [el.p_nn_prime, 1.0 - el.p_nn_prime],
    ];
    // qubit: 0 = g, 1 = e
    let qub = [[1.0 - el.p_ge, el.p_ge], [el.p_eg, 1.0 - el.p_eg]];

    let mut t = [[0.0; 4]; 4];
    for from in 0..4 {
        let (c, q) = (from / 2, from % 2);
        for c2 in 0..2 {
            for q_relaxed in 0..2 {
                let q2 = if c2 == 1 { 1 - q_relaxed } else { q_relaxed };
                t[from][2 * c2 + q2] += cav[c][c2] * qub[q][q_relaxed];
            }
        }
    }
    let g = [params.f_gg, 1.0 - params.f_gg];
    let ex = [1.0 - params.f_ee, params.f_ee];
    Ok(HmmModel {
        n0,
        t,
        e: [g, ex, g, ex],
        elements: el,
        built_from: params.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Probability that the cavity was in `n0` at the first readout.
    pub p_target: f64,
    pub lambda: f64,
    pub ln_lambda: f64,
    /// `ln P(record | n0)` with the uniform qubit prior.
    pub ln_likelihood_target: f64,
    pub ln_likelihood_other: f64,
    /// Both hypotheses assign zero probability to the record.
    pub degenerate: bool,
}

impl DetectionResult {
    pub fn positive(&self, lambda_thresh: f64) -> bool {
        self.lambda > lambda_thresh
    }
}

fn symbol(r: Readout) -> usize {
    match r {
        Readout::G => 0,
        Readout::E => 1,
    }
}

/// Backward algorithm with per-step rescaling. Returns the scaled backward
/// vector at step 0 and the accumulated log scale.
fn backward(model: &HmmModel, record: &[Readout]) -> ([f64; 4], f64) {
    let last = symbol(*record.last().expect("checked non-empty"));
    let mut beta = [0.0; 4];
    for s in 0..4 {
        beta[s] = model.e[s][last];
    }
    let mut ln_scale = 0.0;
    for &r in record[..record.len() - 1].iter().rev() {
        let r = symbol(r);
        let mut next = [0.0; 4];
        for s in 0..4 {
            let mut acc = 0.0;
            for s2 in 0..4 {
                acc += model.t[s][s2] * beta[s2];
            }
            next[s] = model.e[s][r] * acc;
        }
        let norm: f64 = next.iter().sum();
        if norm > 0.0 {
            next.iter_mut().for_each(|v| *v /= norm);
            ln_scale += norm.ln();
        }
        beta = next;
    }
    (beta, ln_scale)
}

/// Probability that the cavity was in `n0`, and the likelihood ratio against
/// any other level, from one readout record. The qubit prior at the first
/// readout is uniform and so is the prior over the two cavity hypotheses.
pub fn backward_probability(model: &HmmModel, record: &[Readout]) -> Result<DetectionResult> {
    if record.is_empty() {
        return Err(Error::Empty("readout record"));
    }
    let (beta, ln_scale) = backward(model, record);
    let target = 0.5 * (beta[N_G] + beta[N_E]);
    let other = 0.5 * (beta[N_PRIME_G] + beta[N_PRIME_E]);
    let degenerate = target == 0.0 && other == 0.0;
    let (p_target, ln_lambda) = if degenerate {
        (0.0, f64::NEG_INFINITY)
    } else {
        (target / (target + other), target.ln() - other.ln())
    };
    Ok(DetectionResult {
        p_target,
        lambda: ln_lambda.exp(),
        ln_lambda,
        ln_likelihood_target: target.ln() + ln_scale,
        ln_likelihood_other: other.ln() + ln_scale,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCounts {
    pub positive: u64,
    pub negative: u64,
    pub aborted: u64,
}

impl StreamCounts {
    pub fn passed(&self) -> u64 {
        self.positive + self.negative
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.passed() == 0 {
            0.0
        } else {
            self.positive as f64 / self.passed() as f64
        }
    }

    pub fn abort_fraction(&self) -> f64 {
        let total = self.passed() + self.aborted;
        if total == 0 {
            0.0
        } else {
            self.aborted as f64 / total as f64
        }
    }
}

/// Counts records whose likelihood ratio exceeds the threshold among those
/// that passed the pre-checks.
pub fn classify_stream(
    model: &HmmModel,
    records: &[trajsim::MeasurementRecord],
    lambda_thresh: f64,
) -> Result<StreamCounts> {
    let flags: Vec<Option<bool>> = records
        .par_iter()
        .map(|r| {
            if !r.passed_prechecks {
                return Ok(None);
            }
            Ok(Some(backward_probability(model, &r.readouts)?.positive(lambda_thresh)))
        })
        .collect::<Result<_>>()?;
    let mut c = StreamCounts::default();
    for f in flags {
        match f {
            None => c.aborted += 1,
            Some(true) => c.positive += 1,
            Some(false) => c.negative += 1,
        }
    }
    Ok(c)
}

/// Positive fraction among passed trials whose hidden photon number never
/// equalled the probed level during the measurement train, i.e. positives
/// caused by qubit and readout errors alone.
pub fn detector_false_positive_fraction(model: &HmmModel, trials: &[Trial], lambda_thresh: f64) -> Result<(u64, u64)> {
    let flags: Vec<Option<bool>> = trials
        .par_iter()
        .map(|t| {
            let clean = t.record.passed_prechecks && t.truth.cycles.iter().all(|h| h.photon != model.n0);
            if !clean {
                return Ok(None);
            }
            Ok(Some(backward_probability(model, &t.record.readouts)?.positive(lambda_thresh)))
        })
        .collect::<Result<_>>()?;
    let considered = flags.iter().filter(|f| f.is_some()).count() as u64;
    let positives = flags.iter().filter(|f| **f == Some(true)).count() as u64;
    Ok((positives, considered))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorPoint {
    pub nbar: f64,
    pub trials: u64,
    pub positives: u64,
    pub positive_fraction: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorFit {
    pub n: usize,
    pub eta: f64,
    pub delta: f64,
    pub sigma_eta: f64,
    pub sigma_delta: f64,
    pub covariance: [[f64; 2]; 2],
    pub chi2: f64,
    pub background_fraction: f64,
    pub points: Vec<DetectorPoint>,
}

/// Fits `background-subtracted fraction = eta P_{n,n+1}(nbar) + delta` by
/// weighted least squares with Poisson errors `sqrt(max(k,1))/N`, the
/// background error added in quadrature.
pub fn fit_detector_points(n: usize, points: &[DetectorPoint]) -> Result<DetectorFit> {
    let bg = points
        .iter()
        .find(|p| p.nbar == 0.0)
        .ok_or_else(|| Error::InsufficientData(format!("no background (nbar = 0) cell for |{n}>")))?;
    let signal: Vec<&DetectorPoint> = points.iter().filter(|p| p.nbar > 0.0).collect();
    if signal.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 occupations for |{n}>, got {}",
            signal.len() + 1
        )));
    }
    let bg_var = bg.sigma * bg.sigma;
    let x: Vec<f64> = signal
        .iter()
        .map(|p| qstate::displacement_prob(n, n + 1, p.nbar))
        .collect::<Result<_>>()?;
    let y: Vec<f64> = signal.iter().map(|p| p.positive_fraction - bg.positive_fraction).collect();
    let s: Vec<f64> = signal.iter().map(|p| (p.sigma * p.sigma + bg_var).sqrt()).collect();
    let design = DMatrix::from_fn(x.len(), 2, |r, c| if c == 0 { x[r] } else { 1.0 });
    let f = fit::weighted_least_squares(&design, &y, &s)?;
    Ok(DetectorFit {
        n,
        eta: f.params[0],
        delta: f.params[1],
        sigma_eta: f.sigma(0),
        sigma_delta: f.sigma(1),
        covariance: [
            [f.covariance[0][0], f.covariance[0][1]],
            [f.covariance[1][0], f.covariance[1][1]],
        ],
        chi2: f.chi2,
        background_fraction: bg.positive_fraction,
        points: points.to_vec(),
    })
}

pub fn detector_point(nbar: f64, counts: StreamCounts) -> DetectorPoint {
    let trials = counts.passed();
    let n = trials.max(1) as f64;
    DetectorPoint {
        nbar,
        trials,
        positives: counts.positive,
        positive_fraction: counts.positive_fraction(),
        sigma: (counts.positive.max(1) as f64).sqrt() / n,
    }
}

/// Classifies every sweep cell with the model for its probed level and fits
/// one [`DetectorFit`] per Fock level, in the order levels first appear.
pub fn characterize_detector(
    params: &DeviceParams,
    cells: &[SweepCell],
    lambda_thresh: f64,
) -> Result<Vec<DetectorFit>> {
    let mut levels: Vec<usize> = Vec::new();
    for c in cells {
        if !levels.contains(&c.n) {
            levels.push(c.n);
        }
    }
    levels
        .into_iter()
        .map(|n| {
            let model = build_model(params, n + 1)?;
            let points: Vec<DetectorPoint> = cells
                .iter()
                .filter(|c| c.n == n)
                .map(|c| {
                    let records: Vec<_> = c.trials.iter().map(|t| t.record.clone()).collect();
                    Ok(detector_point(c.nbar, classify_stream(&model, &records, lambda_thresh)?))
                })
                .collect::<Result<_>>()?;
            let distinct = {
                let mut v: Vec<f64> = points.iter().map(|p| p.nbar).collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v.len()
            };
            if distinct < 2 {
                return Err(Error::SingularFit(format!("all occupations identical for |{n}>")));
            }
            fit_detector_points(n, &points)
        })
        .collect()
}

/// CSV `n,nbar,trials,positives,positive_fraction,sigma`.
pub fn write_detector_csv<W: Write>(fits: &[DetectorFit], mut out: W) -> Result<()> {
    writeln!(out, "n,nbar,trials,positives,positive_fraction,sigma")?;
    for f in fits {
        for p in &f.points {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                f.n, p.nbar, p.trials, p.positives, p.positive_fraction, p.sigma
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QndPoint {
    pub tau_rep: f64,
    pub tau_tot: f64,
    pub sigma_tau_tot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QndFit {
    pub tau_s: f64,
    pub sigma_tau_s: f64,
    pub p_d: f64,
    pub sigma_p_d: f64,
}

/// Fits `1/tau_tot = 1/tau_s + p_d / tau_rep`.
pub fn fit_qndness(points: &[QndPoint]) -> Result<QndFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 repetition intervals, got {}",
            points.len()
        )));
    }
    let x: Vec<f64> = points.iter().map(|p| 1.0 / p.tau_rep).collect();
    let y: Vec<f64> = points.iter().map(|p| 1.0 / p.tau_tot).collect();
    let s: Vec<f64> = points
        .iter()
        .map(|p| p.sigma_tau_tot / (p.tau_tot * p.tau_tot))
        .collect();
    let f = fit::fit_line(&x, &y, &s)?;
    let rate = f.params[0];
    Ok(QndFit {
        tau_s: 1.0 / rate,
        sigma_tau_s: f.sigma(0) / (rate * rate),
        p_d: f.params[1],
        sigma_p_d: f.sigma(1),
    })
}

/// Simulated interleaved-probe decay of `|n>` for each repetition interval,
/// reduced to `(tau_rep, tau_tot)` points by exponential fits.
pub fn simulate_qndness(
    params: &DeviceParams,
    n: usize,
    tau_reps: &[f64],
    probes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<QndPoint>> {
    tau_reps
        .iter()
        .enumerate()
        .map(|(i, &tau_rep)| {
            let surv = trajsim::qnd_decay_experiment(params, n, tau_rep, probes, trials, seed.wrapping_add(i as u64))?;
            let delays: Vec<f64> = probes.iter().map(|&k| k as f64 * tau_rep).collect();
            let fit = trajsim::fit_fock_lifetime(&delays, &surv, trials)?;
            Ok(QndPoint {
                tau_rep,
                tau_tot: fit.tau,
                sigma_tau_tot: fit.sigma_tau,
            })
        })
        .collect()
}
