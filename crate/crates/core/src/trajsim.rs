//! Monte Carlo generator of qubit readout records for the stimulated-emission
//! protocol: Fock preparation, conditional pre-checks, a displacement during
//! the dwell, then repeated number-resolved pi-pulse measurements.
//!
//! The hidden trajectory tracks the true photon number `0..=K` and the qubit
//! level. Dephasing does not enter population-basis records, so `T2` values
//! are carried for reference only.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{self, ExponentialFit};
use crate::qstate;

const US: f64 = 1e-6;

/// A per-Fock-level table entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelValue {
    pub n: usize,
    pub value: f64,
    #[serde(default)]
    pub sigma: f64,
}

impl LevelValue {
    pub const fn new(n: usize, value: f64, sigma: f64) -> Self {
        Self { n, value, sigma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceParams {
    /// Qubit relaxation time (s).
    pub t1_q: f64,
    pub t2_q: f64,
    pub t2_echo_q: f64,
    /// Residual qubit excited population.
    pub nbar_q: f64,
    /// Storage-cavity single-photon lifetime (s).
    pub t1_s: f64,
    pub t2_s: f64,
    /// Residual cavity occupation.
    pub nbar_c: f64,
    /// Dispersive shift (rad/s).
    pub chi: f64,
    pub omega_q: f64,
    pub omega_s: f64,
    /// Transmon anharmonicity (rad/s); not simulated.
    pub anharmonicity_q: f64,
    /// Time per measurement cycle (s).
    pub t_m: f64,
    pub f_gg: f64,
    pub f_ee: f64,
    /// Demolition probability per resonant measurement, by photon number.
    pub demolition: Vec<LevelValue>,
    /// Measured Fock-state lifetimes (s). Missing levels use `t1_s / n`.
    pub fock_lifetimes: Vec<LevelValue>,
    /// Preparation success probability for `|0>, |1>, ...`.
    pub prep_fidelity: Vec<f64>,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            t1_q: 115.0 * US,
            t2_q: 160.0 * US,
            t2_echo_q: 236.0 * US,
            nbar_q: 0.02,
            t1_s: 1360.0 * US,
            t2_s: 2390.0 * US,
            nbar_c: 6.3e-3,
            chi: -2.0 * PI * 1.285e6,
            omega_q: 2.0 * PI * 4.961e9,
            omega_s: 2.0 * PI * 5.965e9,
            anharmonicity_q: -2.0 * PI * 143.2e6,
            t_m: 5.0 * US,
            f_gg: 0.975,
            f_ee: 0.968,
            demolition: vec![
                LevelValue::new(1, 0.026, 0.002),
                LevelValue::new(2, 0.040, 0.004),
                LevelValue::new(3, 0.10, 0.05),
                LevelValue::new(4, 0.074, 0.012),
            ],
            fock_lifetimes: vec![
                LevelValue::new(1, 1360.0 * US, 0.0),
                LevelValue::new(2, 660.0 * US, 0.0),
                LevelValue::new(3, 527.0 * US, 0.0),
                LevelValue::new(4, 319.0 * US, 0.0),
            ],
            prep_fidelity: vec![0.952, 0.912, 0.873, 0.816, 0.636],
        }
    }
}

impl DeviceParams {
    /// No decay, heating, demolition or readout error.
    pub fn ideal() -> Self {
        Self {
            t1_q: f64::INFINITY,
            t1_s: f64::INFINITY,
            nbar_q: 0.0,
            nbar_c: 0.0,
            f_gg: 1.0,
            f_ee: 1.0,
            demolition: Vec::new(),
            fock_lifetimes: Vec::new(),
            prep_fidelity: vec![1.0; 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("nbar_q", self.nbar_q),
            ("nbar_c", self.nbar_c),
            ("f_gg", self.f_gg),
            ("f_ee", self.f_ee),
        ];
        for (name, p) in probs {
            check_prob(name, p)?;
        }
        for (name, t) in [("t1_q", self.t1_q), ("t1_s", self.t1_s), ("t_m", self.t_m)] {
            if !(t > 0.0) {
                return Err(Error::invalid(name, format!("time must be positive, got {t}")));
            }
        }
        for lv in &self.demolition {
            check_prob("demolition", lv.value)?;
        }
        for lv in &self.fock_lifetimes {
            if !(lv.value > 0.0) || lv.n == 0 {
                return Err(Error::invalid("fock_lifetimes", format!("bad entry {lv:?}")));
            }
        }
        for &p in &self.prep_fidelity {
            check_prob("prep_fidelity", p)?;
        }
        Ok(())
    }

    /// Lifetime of `|n>` (s). `|0>` uses the single-photon lifetime, which
    /// sets the heating rate out of vacuum.
    pub fn fock_lifetime(&self, n: usize) -> f64 {
        if n == 0 {
            return self.t1_s;
        }
        self.fock_lifetimes
            .iter()
            .find(|lv| lv.n == n)
            .map(|lv| lv.value)
            .unwrap_or(self.t1_s / n as f64)
    }

    /// Demolition probability when the resonant probe finds `|n>`. Levels
    /// missing from the table come from a least-squares line through it.
    pub fn demolition_probability(&self, n: usize) -> f64 {
        if let Some(lv) = self.demolition.iter().find(|lv| lv.n == n) {
            return lv.value;
        }
        match self.demolition.len() {
            0 => 0.0,
            1 => self.demolition[0].value,
            len => {
                let m = len as f64;
                let mx = self.demolition.iter().map(|lv| lv.n as f64).sum::<f64>() / m;
                let my = self.demolition.iter().map(|lv| lv.value).sum::<f64>() / m;
                let sxy: f64 = self
                    .demolition
                    .iter()
                    .map(|lv| (lv.n as f64 - mx) * (lv.value - my))
                    .sum();
                let sxx: f64 = self.demolition.iter().map(|lv| (lv.n as f64 - mx).powi(2)).sum();
                let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
                (my + slope * (n as f64 - mx)).clamp(0.0, 1.0)
            }
        }
    }

    pub fn prep_fidelity(&self, n: usize) -> Result<f64> {
        self.prep_fidelity.get(n).copied().ok_or_else(|| {
            Error::invalid("prep_fidelity", format!("no preparation fidelity for |{n}>"))
        })
    }

    /// `1 - exp(-dt / T1_n)`, the spontaneous decay probability of `|n>`.
    pub fn decay_probability(&self, n: usize, dt: f64) -> f64 {
        if n == 0 {
            0.0
        } else {
            -(-dt / self.fock_lifetime(n)).exp_m1()
        }
    }

    pub fn heating_probability(&self, n: usize, dt: f64) -> f64 {
        self.nbar_c * -(-dt / self.fock_lifetime(n)).exp_m1()
    }

    pub fn qubit_decay_probability(&self, dt: f64) -> f64 {
        -(-dt / self.t1_q).exp_m1()
    }

    pub fn qubit_heating_probability(&self, dt: f64) -> f64 {
        self.nbar_q * self.qubit_decay_probability(dt)
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(name, format!("probability out of [0,1]: {p}")));
    }
    Ok(())
}

/// Where the preparation lands when it fails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepFailureModel {
    /// Share of the failure mass sent to `|n-1>`.
    pub down_one: f64,
    /// Share of the remainder sent to `|n+1>`; the rest goes to `|n-2>`
    /// (or `|0>`).
    pub up_share_of_rest: f64,
}

impl Default for PrepFailureModel {
    fn default() -> Self {
        Self {
            down_one: 2.0 / 3.0,
            up_share_of_rest: 0.5,
        }
    }
}

/// Cavity start state forced with some probability, bypassing preparation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcedStart {
    pub photon: usize,
    pub probability: f64,
}

const AUTO_TRUNCATION_SPAN: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub target_n: usize,
    pub n_prechecks: usize,
    pub n_repeats: usize,
    /// Dwell between preparation and the first measurement (s).
    pub dwell_tau: f64,
    pub alpha_drive: Complex64,
    pub n_trials: usize,
    pub rng_seed: u64,
    /// Photon-number truncation. `None` picks the smallest level, at least
    /// `target_n + 4`, whose displacement tail is within `tail_tolerance`.
    pub truncation: Option<usize>,
    /// Largest displacement tail mass beyond the truncation that is tolerated.
    pub tail_tolerance: f64,
    pub prep_failure: PrepFailureModel,
    pub forced_start: Option<ForcedStart>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            target_n: 0,
            n_prechecks: 3,
            n_repeats: 30,
            dwell_tau: 0.0,
            alpha_drive: Complex64::new(0.0, 0.0),
            n_trials: 1000,
            rng_seed: 0,
            truncation: None,
            tail_tolerance: 1e-5,
            prep_failure: PrepFailureModel::default(),
            forced_start: None,
        }
    }
}

impl ProtocolConfig {
    pub fn truncation(&self) -> usize {
        if let Some(k) = self.truncation {
            return k;
        }
        let floor = self.target_n + 4;
        let nbar = self.alpha_drive.norm_sqr();
        if !nbar.is_finite() || nbar == 0.0 {
            return floor;
        }
        (floor..floor + AUTO_TRUNCATION_SPAN)
            .find(|&k| matches!(displaced_with_tail(self.target_n, nbar, k), Ok((_, t)) if t <= self.tail_tolerance))
            .unwrap_or(floor + AUTO_TRUNCATION_SPAN)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_repeats == 0 {
            return Err(Error::invalid("n_repeats", "need at least one measurement"));
        }
        if !(self.dwell_tau >= 0.0) {
            return Err(Error::invalid("dwell_tau", "must be non-negative"));
        }
        if !self.alpha_drive.re.is_finite() || !self.alpha_drive.im.is_finite() {
            return Err(Error::NonFinite("alpha_drive"));
        }
        if self.truncation() < self.target_n + 1 {
            return Err(Error::invalid("truncation", "must exceed the target level"));
        }
        check_prob("prep_failure.down_one", self.prep_failure.down_one)?;
        check_prob("prep_failure.up_share_of_rest", self.prep_failure.up_share_of_rest)?;
        if let Some(f) = self.forced_start {
            check_prob("forced_start.probability", f.probability)?;
            if f.photon > self.truncation() {
                return Err(Error::TruncationOverflow {
                    k: self.truncation(),
                    tail: f.probability,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Readout {
    G,
    E,
}

impl Readout {
    pub fn symbol(self) -> char {
        match self {
            Readout::G => 'G',
            Readout::E => 'E',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            'G' | 'g' => Some(Readout::G),
            'E' | 'e' => Some(Readout::E),
            _ => None,
        }
    }
}

pub fn readouts_to_string(r: &[Readout]) -> String {
    r.iter().map(|x| x.symbol()).collect()
}

pub fn parse_readouts(s: &str) -> Result<Vec<Readout>> {
    s.chars()
        .map(|c| Readout::from_symbol(c).ok_or_else(|| Error::invalid("readouts", format!("bad symbol {c:?}"))))
        .collect()
}

/// Hidden cavity-qubit state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenState {
    pub photon: usize,
    pub excited: bool,
}

/// One trial as seen by the analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub trial_id: u64,
    pub n_target: usize,
    pub alpha: Complex64,
    #[serde(with = "readout_string")]
    pub readouts: Vec<Readout>,
    pub passed_prechecks: bool,
}

mod readout_string {
    use super::{parse_readouts, readouts_to_string, Readout};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &[Readout], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&readouts_to_string(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Readout>, D::Error> {
        let s = String::deserialize(d)?;
        parse_readouts(&s).map_err(serde::de::Error::custom)
    }
}

/// Simulator-only ground truth for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTruth {
    pub trial_id: u64,
    pub prepared: usize,
    /// Photon number right after the displacement.
    pub displaced: usize,
    /// Photon number at the start of the measurement train.
    pub after_dwell: usize,
    /// Hidden state at each measurement readout.
    pub cycles: Vec<HiddenState>,
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub record: MeasurementRecord,
    pub truth: TrialTruth,
}

/// Samples one interval `dt` of cavity and qubit relaxation. Demolition is
/// added to the cavity loss only when `probe_n` matches the photon number.
/// Heating at the truncation edge is suppressed.
pub fn step_hidden<R: Rng + ?Sized>(
    state: HiddenState,
    params: &DeviceParams,
    probe_n: Option<usize>,
    dt: f64,
    truncation: usize,
    rng: &mut R,
) -> HiddenState {
    let n = state.photon;
    let mut loss = params.decay_probability(n, dt);
    if probe_n == Some(n) && n > 0 {
        loss += params.demolition_probability(n);
    }
    let loss = loss.min(1.0);
    let heat = if n < truncation {
        params.heating_probability(n, dt).min(1.0 - loss)
    } else {
        0.0
    };
    let u: f64 = rng.random();
    let photon = if u < loss {
        n - 1
    } else if u < loss + heat {
        n + 1
    } else {
        n
    };

    let v: f64 = rng.random();
    let excited = if state.excited {
        v >= params.qubit_decay_probability(dt)
    } else {
        v < params.qubit_heating_probability(dt)
    };
    HiddenState { photon, excited }
}

fn read<R: Rng + ?Sized>(excited: bool, params: &DeviceParams, rng: &mut R) -> Readout {
    let u: f64 = rng.random();
    match excited {
        false if u < params.f_gg => Readout::G,
        false => Readout::E,
        true if u < params.f_ee => Readout::E,
        true => Readout::G,
    }
}

/// Resolved pi-pulse on `probe`, readout, then one cycle of relaxation.
fn measure<R: Rng + ?Sized>(
    state: &mut HiddenState,
    params: &DeviceParams,
    probe: usize,
    truncation: usize,
    rng: &mut R,
) -> (Readout, HiddenState) {
    if state.photon == probe {
        state.excited = !state.excited;
    }
    let at_readout = *state;
    let r = read(state.excited, params, rng);
    *state = step_hidden(*state, params, Some(probe), params.t_m, truncation, rng);
    (r, at_readout)
}

fn sample_prepared<R: Rng + ?Sized>(
    params: &DeviceParams,
    config: &ProtocolConfig,
    rng: &mut R,
) -> Result<usize> {
    if let Some(f) = config.forced_start {
        if rng.random::<f64>() < f.probability {
            return Ok(f.photon);
        }
    }
    let n = config.target_n;
    let fid = params.prep_fidelity(n)?;
    let u: f64 = rng.random();
    if u < fid {
        return Ok(n);
    }
    if n == 0 {
        return Ok(1);
    }
    let w = (u - fid) / (1.0 - fid);
    let pf = config.prep_failure;
    Ok(if w < pf.down_one {
        n - 1
    } else if (w - pf.down_one) / (1.0 - pf.down_one) < pf.up_share_of_rest {
        n + 1
    } else {
        n.saturating_sub(2)
    })
}

/// Photon-number distribution after displacing `|n>` by `|alpha|`, cut at the
/// truncation. Errors when the mass beyond it exceeds the tolerance.
pub fn displaced_distribution(n: usize, nbar: f64, truncation: usize, tolerance: f64) -> Result<Vec<f64>> {
    let (probs, tail) = displaced_with_tail(n, nbar, truncation)?;
    if tail > tolerance {
        return Err(Error::TruncationOverflow { k: truncation, tail });
    }
    let kept = 1.0 - tail;
    Ok(probs.into_iter().map(|p| p / kept).collect())
}

/// Like [`displaced_distribution`] but the mass beyond the truncation is
/// piled onto the top level instead of rejected.
fn displaced_saturating(n: usize, nbar: f64, truncation: usize) -> Result<Vec<f64>> {
    let (mut probs, tail) = displaced_with_tail(n, nbar, truncation)?;
    probs[truncation] += tail;
    Ok(probs)
}

fn displaced_with_tail(n: usize, nbar: f64, truncation: usize) -> Result<(Vec<f64>, f64)> {
    let probs: Vec<f64> = (0..=truncation)
        .map(|l| qstate::displacement_prob(n, l, nbar))
        .collect::<Result<_>>()?;
    let tail = (1.0 - probs.iter().sum::<f64>()).max(0.0);
    Ok((probs, tail))
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Per-trial generator: seed plus a stream index equal to the trial id.
pub fn trial_rng(seed: u64, trial_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_id);
    rng
}

fn run_trial(
    params: &DeviceParams,
    config: &ProtocolConfig,
    displaced: &[Vec<f64>],
    trial_id: u64,
) -> Result<Trial> {
    let mut rng = trial_rng(config.rng_seed, trial_id);
    let k = config.truncation();
    let probe = config.target_n + 1;

    let prepared = sample_prepared(params, config, &mut rng)?;
    if prepared > k {
        return Err(Error::TruncationOverflow { k, tail: 1.0 });
    }
    let mut state = HiddenState {
        photon: prepared,
        excited: false,
    };
    let mut passed = true;
    for _ in 0..config.n_prechecks {
        let (r, _) = measure(&mut state, params, probe, k, &mut rng);
        if r == Readout::E {
            passed = false;
            break;
        }
    }

    let mut truth = TrialTruth {
        trial_id,
        prepared,
        displaced: state.photon,
        after_dwell: state.photon,
        cycles: Vec::new(),
    };
    let mut readouts = Vec::new();
    if passed {
        state.photon = sample_index(&displaced[state.photon], &mut rng);
        truth.displaced = state.photon;
        if config.dwell_tau > 0.0 {
            state = step_hidden(state, params, None, config.dwell_tau, k, &mut rng);
        }
        truth.after_dwell = state.photon;
        readouts.reserve(config.n_repeats);
        truth.cycles.reserve(config.n_repeats);
        for _ in 0..config.n_repeats {
            let (r, hidden) = measure(&mut state, params, probe, k, &mut rng);
            readouts.push(r);
            truth.cycles.push(hidden);
        }
    }
    Ok(Trial {
        record: MeasurementRecord {
            trial_id,
            n_target: config.target_n,
            alpha: config.alpha_drive,
            readouts,
            passed_prechecks: passed,
        },
        truth,
    })
}

/// Runs `config.n_trials` independent trials in parallel. The output is
/// ordered by trial id and identical for identical inputs.
pub fn run_protocol(params: &DeviceParams, config: &ProtocolConfig) -> Result<Vec<Trial>> {
    params.validate()?;
    config.validate()?;
    params.prep_fidelity(config.target_n)?;
    let k = config.truncation();
    let nbar = config.alpha_drive.norm_sqr();
    // Only the target level is held to the tolerance; rarer starting levels
    // saturate at the truncation like heating does.
    displaced_distribution(config.target_n, nbar, k, config.tail_tolerance)?;
    let displaced: Vec<Vec<f64>> = (0..=k)
        .map(|n| displaced_saturating(n, nbar, k))
        .collect::<Result<_>>()?;
    (0..config.n_trials as u64)
        .into_par_iter()
        .map(|id| run_trial(params, config, &displaced, id))
        .collect()
}

/// Writes records as NDJSON and, if given, the truth as a separate NDJSON
/// sidecar.
pub fn write_trials<W: Write, T: Write>(trials: &[Trial], mut records: W, truth: Option<T>) -> Result<()> {
    for t in trials {
        serde_json::to_writer(&mut records, &t.record)?;
        records.write_all(b"\n")?;
    }
    if let Some(mut out) = truth {
        for t in trials {
            serde_json::to_writer(&mut out, &t.truth)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_records<R: std::io::BufRead>(input: R) -> Result<Vec<MeasurementRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Records for one `(n, nbar)` cell of a detector-characterization sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub n: usize,
    pub nbar: f64,
    pub trials: Vec<Trial>,
}

/// Runs the protocol for every Fock level and injected occupation. A zero
/// occupation is always included so backgrounds can be subtracted. Each cell
/// gets its own seed derived from the base seed.
pub fn simulate_figure3_sweep(
    params: &DeviceParams,
    fock_list: &[usize],
    nbar_grid: &[f64],
    base: &ProtocolConfig,
) -> Result<Vec<SweepCell>> {
    let mut grid: Vec<f64> = nbar_grid.to_vec();
    if grid.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::NegativeOccupation(grid.iter().copied().fold(f64::NAN, f64::min)));
    }
    if !grid.contains(&0.0) {
        grid.insert(0, 0.0);
    }
    grid.sort_by(f64::total_cmp);
    let mut cells = Vec::new();
    for (i, &n) in fock_list.iter().enumerate() {
        for (j, &nbar) in grid.iter().enumerate() {
            let cell_index = (i * grid.len() + j) as u64;
            let config = ProtocolConfig {
                target_n: n,
                alpha_drive: Complex64::new(nbar.sqrt(), 0.0),
                rng_seed: base.rng_seed ^ cell_index.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                ..base.clone()
            };
            cells.push(SweepCell {
                n,
                nbar,
                trials: run_protocol(params, &config)?,
            });
        }
    }
    Ok(cells)
}

/// Survival of a perfectly prepared `|n>` after each delay, with relaxation
/// sampled in steps of at most `max_step`. Returns survivor counts per delay.
pub fn fock_decay_experiment(
    params: &DeviceParams,
    n: usize,
    delays: &[f64],
    trials: usize,
    max_step: f64,
    seed: u64,
) -> Result<Vec<u64>> {
    fock_survival(params, n, delays, trials, max_step, None, seed)
}

/// Decay of `|n>` with a resonant probe interleaved every `tau_rep`, as used
/// to separate the bare lifetime from the demolition per probe.
pub fn qnd_decay_experiment(
    params: &DeviceParams,
    n: usize,
    tau_rep: f64,
    probes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    let delays: Vec<f64> = probes.iter().map(|&k| k as f64 * tau_rep).collect();
    fock_survival(params, n, &delays, trials, tau_rep, Some(n), seed)
}

fn fock_survival(
    params: &DeviceParams,
    n: usize,
    delays: &[f64],
    trials: usize,
    step: f64,
    probe: Option<usize>,
    seed: u64,
) -> Result<Vec<u64>> {
    params.validate()?;
    if !(step > 0.0) {
        return Err(Error::invalid("step", "must be positive"));
    }
    if delays.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::invalid("delays", "must be non-negative"));
    }
    let k = n + 4;
    let steps: Vec<usize> = delays.iter().map(|d| (d / step).round() as usize).collect();
    let max_steps = steps.iter().copied().max().unwrap_or(0);
    let survived: Vec<Vec<bool>> = (0..trials as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = trial_rng(seed, id);
            let mut s = HiddenState {
                photon: n,
                excited: false,
            };
            // alive[j] = still in |n> without having left after j steps
            let mut alive = vec![true; max_steps + 1];
            let mut left = false;
            for slot in alive.iter_mut().skip(1) {
                if !left {
                    s = step_hidden(s, params, probe, step, k, &mut rng);
                    left = s.photon != n;
                }
                *slot = !left;
            }
            steps.iter().map(|&j| alive[j]).collect()
        })
        .collect();
    Ok((0..delays.len())
        .map(|i| survived.iter().filter(|row| row[i]).count() as u64)
        .collect())
}

/// Exponential fit to survival counts from [`fock_decay_experiment`].
pub fn fit_fock_lifetime(delays: &[f64], survivors: &[u64], trials: usize) -> Result<ExponentialFit> {
    fit::fit_exponential_decay(delays, survivors, &vec![trials as u64; survivors.len()])
}
