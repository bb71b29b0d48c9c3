//! Experiment configuration. Times are given in microseconds, carrier
//! frequencies in GHz (cycles, not radians), frequency offsets in Hz and
//! volumes in cm^3; every key carries its unit as a suffix. Values are
//! converted to SI and angular frequencies before they reach the simulation.

use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;

use fockscan::dmlimit::{CapConfig, FitMethod, Lineshape, PhysicsParams, ScanTiming};
use fockscan::pulsectl::{GrapeConfig, Momentum};
use fockscan::trajsim::{DeviceParams, LevelValue, PrepFailureModel, ProtocolConfig};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

const US: f64 = 1e-6;
const CM3: f64 = 1e-6;

fn angular(ghz: f64) -> f64 {
    2.0 * PI * ghz * 1e9
}

/// Rounds to 12 significant digits, hiding round-off from unit conversion.
fn tidy(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.11e}").parse().unwrap_or(x)
    } else {
        x
    }
}

fn cycles_ghz(omega: f64) -> f64 {
    tidy(omega / (2.0 * PI * 1e9))
}

fn micros(t: f64) -> f64 {
    tidy(t / US)
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: &str, reason: impl fmt::Display) -> ConfigError {
    ConfigError(format!("{field}: {reason}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Grape,
    Sweep,
    Characterize,
    Background,
    Limit,
    Wigner,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Grape => "grape",
            Pipeline::Sweep => "sweep",
            Pipeline::Characterize => "characterize",
            Pipeline::Background => "background",
            Pipeline::Limit => "limit",
            Pipeline::Wigner => "wigner",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub pipeline: Option<Pipeline>,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub device: DeviceSection,
    pub protocol: ProtocolSection,
    pub physics: PhysicsSection,
    pub grape: GrapeSection,
    pub sweep: SweepSection,
    pub background: BackgroundSection,
    pub limit: LimitSection,
    pub wigner: WignerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pipeline: None,
            seed: 1,
            output_dir: None,
            device: DeviceSection::default(),
            protocol: ProtocolSection::default(),
            physics: PhysicsSection::default(),
            grape: GrapeSection::default(),
            sweep: SweepSection::default(),
            background: BackgroundSection::default(),
            limit: LimitSection::default(),
            wigner: WignerSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemolitionRow {
    pub n: usize,
    pub p: f64,
    #[serde(default)]
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifetimeRow {
    pub n: usize,
    pub t1_us: f64,
    #[serde(default)]
    pub sigma_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    /// Start from an error-free device; explicit keys still override.
    pub ideal: bool,
    pub t1_q_us: f64,
    pub t2_q_us: f64,
    pub t2_echo_q_us: f64,
    pub nbar_q: f64,
    pub t1_s_us: f64,
    pub t2_s_us: f64,
    pub nbar_c: f64,
    pub chi_ghz: f64,
    pub f_q_ghz: f64,
    pub f_s_ghz: f64,
    pub anharmonicity_ghz: f64,
    pub t_m_us: f64,
    pub f_gg: f64,
    pub f_ee: f64,
    pub prep_fidelity: Vec<f64>,
    pub demolition: Vec<DemolitionRow>,
    pub fock_lifetime: Vec<LifetimeRow>,
}

impl Default for DeviceSection {
    fn default() -> Self {
        Self::from_params(&DeviceParams::default(), false)
    }
}

impl DeviceSection {
    pub fn from_params(p: &DeviceParams, ideal: bool) -> Self {
        Self {
            ideal,
            t1_q_us: micros(p.t1_q),
            t2_q_us: micros(p.t2_q),
            t2_echo_q_us: micros(p.t2_echo_q),
            nbar_q: p.nbar_q,
            t1_s_us: micros(p.t1_s),
            t2_s_us: micros(p.t2_s),
            nbar_c: p.nbar_c,
            chi_ghz: cycles_ghz(p.chi),
            f_q_ghz: cycles_ghz(p.omega_q),
            f_s_ghz: cycles_ghz(p.omega_s),
            anharmonicity_ghz: cycles_ghz(p.anharmonicity_q),
            t_m_us: micros(p.t_m),
            f_gg: p.f_gg,
            f_ee: p.f_ee,
            prep_fidelity: p.prep_fidelity.clone(),
            demolition: p
                .demolition
                .iter()
                .map(|lv| DemolitionRow {
                    n: lv.n,
                    p: lv.value,
                    sigma: lv.sigma,
                })
                .collect(),
            fock_lifetime: p
                .fock_lifetimes
                .iter()
                .map(|lv| LifetimeRow {
                    n: lv.n,
                    t1_us: micros(lv.value),
                    sigma_us: micros(lv.sigma),
                })
                .collect(),
        }
    }

    pub fn to_params(&self) -> DeviceParams {
        DeviceParams {
            t1_q: self.t1_q_us * US,
            t2_q: self.t2_q_us * US,
            t2_echo_q: self.t2_echo_q_us * US,
            nbar_q: self.nbar_q,
            t1_s: self.t1_s_us * US,
            t2_s: self.t2_s_us * US,
            nbar_c: self.nbar_c,
            chi: angular(self.chi_ghz),
            omega_q: angular(self.f_q_ghz),
            omega_s: angular(self.f_s_ghz),
            anharmonicity_q: angular(self.anharmonicity_ghz),
            t_m: self.t_m_us * US,
            f_gg: self.f_gg,
            f_ee: self.f_ee,
            demolition: self
                .demolition
                .iter()
                .map(|r| LevelValue::new(r.n, r.p, r.sigma))
                .collect(),
            fock_lifetimes: self
                .fock_lifetime
                .iter()
                .map(|r| LevelValue::new(r.n, r.t1_us * US, r.sigma_us * US))
                .collect(),
            prep_fidelity: self.prep_fidelity.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub n_prechecks: usize,
    pub n_repeats: usize,
    pub trials_per_cell: usize,
    pub lambda_thresh: f64,
    pub truncation: Option<usize>,
    pub tail_tolerance: f64,
    pub prep_down_one: f64,
    pub prep_up_share_of_rest: f64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            n_prechecks: p.n_prechecks,
            n_repeats: p.n_repeats,
            trials_per_cell: 20_000,
            lambda_thresh: 1e3,
            truncation: p.truncation,
            tail_tolerance: p.tail_tolerance,
            prep_down_one: p.prep_failure.down_one,
            prep_up_share_of_rest: p.prep_failure.up_share_of_rest,
        }
    }
}

impl ProtocolSection {
    pub fn base(&self, seed: u64, dwell_us: f64) -> ProtocolConfig {
        ProtocolConfig {
            n_prechecks: self.n_prechecks,
            n_repeats: self.n_repeats,
            dwell_tau: dwell_us * US,
            alpha_drive: Complex64::new(0.0, 0.0),
            n_trials: self.trials_per_cell,
            rng_seed: seed,
            truncation: self.truncation,
            tail_tolerance: self.tail_tolerance,
            prep_failure: PrepFailureModel {
                down_one: self.prep_down_one,
                up_share_of_rest: self.prep_up_share_of_rest,
            },
            ..ProtocolConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsSection {
    pub rho_gev_per_cm3: f64,
    pub sigma_rho_gev_per_cm3: f64,
    /// Candidate mass as a frequency; unset means the cavity frequency.
    pub m_dm_ghz: Option<f64>,
    pub sigma_f_s_ghz: f64,
    pub q_s: f64,
    pub sigma_q_s: f64,
    pub volume_cm3: f64,
    pub sigma_volume_cm3: f64,
    pub g: f64,
    pub sigma_g: f64,
    pub g_from_formula: bool,
    pub q_dm: f64,
}

impl Default for PhysicsSection {
    fn default() -> Self {
        let p = PhysicsParams::default();
        Self {
            rho_gev_per_cm3: p.rho_dm_gev_per_cm3,
            sigma_rho_gev_per_cm3: p.sigma_rho_dm_gev_per_cm3,
            m_dm_ghz: p.m_dm.map(cycles_ghz),
            sigma_f_s_ghz: cycles_ghz(p.sigma_omega_s),
            q_s: p.q_s,
            sigma_q_s: p.sigma_q_s,
            volume_cm3: tidy(p.volume / CM3),
            sigma_volume_cm3: tidy(p.sigma_volume / CM3),
            g: p.g,
            sigma_g: p.sigma_g,
            g_from_formula: p.g_from_formula,
            q_dm: p.q_dm,
        }
    }
}

impl PhysicsSection {
    /// The cavity frequency comes from the device section.
    pub fn to_params(&self, device: &DeviceSection) -> PhysicsParams {
        PhysicsParams {
            rho_dm_gev_per_cm3: self.rho_gev_per_cm3,
            sigma_rho_dm_gev_per_cm3: self.sigma_rho_gev_per_cm3,
            m_dm: self.m_dm_ghz.map(angular),
            omega_s: angular(device.f_s_ghz),
            sigma_omega_s: angular(self.sigma_f_s_ghz),
            q_s: self.q_s,
            sigma_q_s: self.sigma_q_s,
            volume: self.volume_cm3 * CM3,
            sigma_volume: self.sigma_volume_cm3 * CM3,
            g: self.g,
            sigma_g: self.sigma_g,
            g_from_formula: self.g_from_formula,
            q_dm: self.q_dm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrapeSection {
    pub cavity_dim: usize,
    pub initial_n: usize,
    pub target_n: usize,
    pub steps: usize,
    /// Unset means `max(1, |target - initial|)` dispersive periods.
    pub duration_us: Option<f64>,
    pub amplitude_cap_ghz: f64,
    pub amplitude_penalty: f64,
    pub max_iterations: usize,
    pub target_fidelity: f64,
    pub momentum: Momentum,
    pub initial_step: f64,
    pub max_halvings: usize,
    pub init_scale: f64,
    pub occupation_grid: Vec<f64>,
    pub max_fidelity_drop: f64,
}

impl Default for GrapeSection {
    fn default() -> Self {
        let g = GrapeConfig::default();
        Self {
            cavity_dim: 10,
            initial_n: 0,
            target_n: 3,
            steps: 200,
            duration_us: None,
            amplitude_cap_ghz: cycles_ghz(g.amplitude_cap),
            amplitude_penalty: g.amplitude_penalty,
            max_iterations: g.max_iterations,
            target_fidelity: g.target_fidelity,
            momentum: g.momentum,
            initial_step: g.initial_step,
            max_halvings: g.max_halvings,
            init_scale: g.init_scale,
            occupation_grid: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2],
            max_fidelity_drop: 0.05,
        }
    }
}

impl GrapeSection {
    pub fn duration(&self, device: &DeviceSection) -> f64 {
        self.duration_us.map(|d| d * US).unwrap_or_else(|| {
            let periods = self.target_n.abs_diff(self.initial_n).max(1) as f64;
            periods / (device.chi_ghz.abs() * 1e9)
        })
    }

    pub fn to_config(&self, seed: u64) -> GrapeConfig {
        GrapeConfig {
            max_iterations: self.max_iterations,
            target_fidelity: self.target_fidelity,
            amplitude_cap: angular(self.amplitude_cap_ghz),
            amplitude_penalty: self.amplitude_penalty,
            momentum: self.momentum,
            initial_step: self.initial_step,
            max_halvings: self.max_halvings,
            init_scale: self.init_scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub fock_levels: Vec<usize>,
    /// Injected occupations; zero is always added for background subtraction.
    pub nbar_grid: Vec<f64>,
    pub dwell_us: f64,
    pub write_truth: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            fock_levels: vec![0, 1, 2, 4],
            nbar_grid: vec![0.02, 0.05, 0.1, 0.15],
            dwell_us: 0.0,
            write_truth: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundSource {
    /// Protocol runs without drive, classified by the detector model.
    Simulate,
    /// Poisson counts around the reference background fit.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundSection {
    pub source: BackgroundSource,
    pub fock_levels: Vec<usize>,
    pub dwell_us: Vec<f64>,
    pub method: FitMethod,
}

impl Default for BackgroundSection {
    fn default() -> Self {
        Self {
            source: BackgroundSource::Simulate,
            fock_levels: vec![0, 1, 2, 4],
            dwell_us: vec![1.0, 5.0, 10.0, 20.0],
            method: FitMethod::Mle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineshapeKind {
    LorentzianGaussian,
    TopHat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitSection {
    /// Background dataset; unset means `background.csv` in the output
    /// directory.
    pub background_csv: Option<PathBuf>,
    /// Pins the signal coefficient (s^-2) instead of fitting a dataset.
    pub a0: Option<f64>,
    pub sigma_a0: Option<f64>,
    pub monte_carlo_draws: usize,
    pub lineshape: LineshapeKind,
    pub pulse_sigma_us: f64,
    pub top_hat_bandwidth_hz: f64,
    pub detuning_span_hz: f64,
    pub detuning_points: usize,
    pub cap_nbar_max: f64,
    pub cap_buildup_us: f64,
    pub prep_us: f64,
    pub dwell_us: f64,
    pub reset_us: f64,
    pub trials_per_step: u64,
}

impl Default for LimitSection {
    fn default() -> Self {
        let cap = CapConfig::default();
        let timing = ScanTiming::default();
        let pulse_sigma_t = match Lineshape::default() {
            Lineshape::LorentzianGaussian { pulse_sigma_t } => pulse_sigma_t,
            Lineshape::TopHat { .. } => 0.75e-6,
        };
        Self {
            background_csv: None,
            a0: None,
            sigma_a0: None,
            monte_carlo_draws: 200_000,
            lineshape: LineshapeKind::LorentzianGaussian,
            pulse_sigma_us: micros(pulse_sigma_t),
            top_hat_bandwidth_hz: 1.0 / (4.0 * pulse_sigma_t),
            detuning_span_hz: 30e3,
            detuning_points: 121,
            cap_nbar_max: cap.nbar_max,
            cap_buildup_us: micros(cap.buildup_time),
            prep_us: micros(timing.prep),
            dwell_us: micros(timing.dwell),
            reset_us: micros(timing.reset),
            trials_per_step: timing.trials_per_step,
        }
    }
}

impl LimitSection {
    pub fn lineshape(&self) -> Lineshape {
        match self.lineshape {
            LineshapeKind::LorentzianGaussian => Lineshape::LorentzianGaussian {
                pulse_sigma_t: self.pulse_sigma_us * US,
            },
            LineshapeKind::TopHat => Lineshape::TopHat {
                bandwidth: self.top_hat_bandwidth_hz,
            },
        }
    }

    pub fn cap(&self) -> CapConfig {
        CapConfig {
            nbar_max: self.cap_nbar_max,
            buildup_time: self.cap_buildup_us * US,
        }
    }

    pub fn timing(&self, protocol: &ProtocolSection, device: &DeviceSection) -> ScanTiming {
        ScanTiming {
            prep: self.prep_us * US,
            n_prechecks: protocol.n_prechecks,
            dwell: self.dwell_us * US,
            n_repeats: protocol.n_repeats,
            t_m: device.t_m_us * US,
            reset: self.reset_us * US,
            trials_per_step: self.trials_per_step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WignerState {
    Fock,
    Coherent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WignerSection {
    pub state: WignerState,
    pub cavity_dim: usize,
    pub n: usize,
    pub alpha_re: f64,
    pub alpha_im: f64,
    pub extent: f64,
    pub points: usize,
}

impl Default for WignerSection {
    fn default() -> Self {
        Self {
            state: WignerState::Fock,
            cavity_dim: 30,
            n: 1,
            alpha_re: 1.0,
            alpha_im: 0.0,
            extent: 3.0,
            points: 81,
        }
    }
}

/// A parsed configuration together with the keys the user actually set.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub user: Table,
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

const UNIT_SUFFIXES: [&str; 5] = ["_us", "_ghz", "_hz", "_cm3", "_gev_per_cm3"];

/// Turns serde's unknown-field message into one that points at the
/// unit-suffixed spelling when the user left the unit off.
fn explain(err: toml::de::Error) -> ConfigError {
    let msg = err.message().to_string();
    if let Some(name) = msg
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next())
    {
        for suffix in UNIT_SUFFIXES {
            let candidate = format!("`{name}{suffix}`");
            if msg.contains(&candidate) {
                return ConfigError(format!(
                    "unknown field `{name}`: give it with its unit as {}",
                    candidate.trim_matches('`')
                ));
            }
        }
    }
    ConfigError(msg)
}

impl ExperimentConfig {
    fn base(ideal: bool) -> Self {
        let mut c = Self::default();
        if ideal {
            c.device = DeviceSection::from_params(&DeviceParams::ideal(), true);
        }
        c
    }

    pub fn parse(text: &str) -> Result<Loaded, ConfigError> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError(format!("malformed config: {}", e.message())))?;
        let ideal = user
            .get("device")
            .and_then(|d| d.get("ideal"))
            .and_then(Value::as_bool)
            .unwrap_or(false);
        let base = Self::base(ideal);
        let Value::Table(mut merged) =
            Value::try_from(&base).map_err(|e| ConfigError(format!("internal defaults: {e}")))?
        else {
            return Err(ConfigError("internal defaults are not a table".into()));
        };
        merge(&mut merged, &user);
        let config: ExperimentConfig = Value::Table(merged).try_into().map_err(explain)?;
        config.validate()?;
        Ok(Loaded { config, user })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        // every microsecond key must be a non-negative time
        let Value::Table(t) = Value::try_from(self).map_err(|e| ConfigError(e.to_string()))? else {
            return Err(ConfigError("config is not a table".into()));
        };
        for entry in flatten(&t, &Table::new()) {
            if entry.path.ends_with("_us") {
                if let Some(v) = entry.number {
                    if !(v >= 0.0) {
                        return Err(bad(&entry.path, format!("time must be non-negative, got {v}")));
                    }
                }
            }
        }
        let d = &self.device;
        for (name, v) in [("device.t1_q_us", d.t1_q_us), ("device.t1_s_us", d.t1_s_us), ("device.t_m_us", d.t_m_us)] {
            if !(v > 0.0) {
                return Err(bad(name, format!("must be positive, got {v}")));
            }
        }
        d.to_params().validate().map_err(|e| bad("device", e))?;

        let p = &self.protocol;
        if p.n_repeats == 0 {
            return Err(bad("protocol.n_repeats", "need at least one measurement"));
        }
        if p.trials_per_cell == 0 {
            return Err(bad("protocol.trials_per_cell", "must be positive"));
        }
        if !(p.lambda_thresh > 0.0) {
            return Err(bad("protocol.lambda_thresh", "must be positive"));
        }
        p.base(self.seed, 0.0).validate().map_err(|e| bad("protocol", e))?;

        self.physics
            .to_params(d)
            .validate()
            .map_err(|e| bad("physics", e))?;

        let g = &self.grape;
        if g.initial_n >= g.cavity_dim || g.target_n >= g.cavity_dim {
            return Err(bad("grape.cavity_dim", "must exceed initial_n and target_n"));
        }
        if g.steps == 0 {
            return Err(bad("grape.steps", "must be positive"));
        }
        if !(g.duration(d) > 0.0) {
            return Err(bad("grape.duration_us", "must be positive"));
        }
        if !(g.amplitude_cap_ghz > 0.0) {
            return Err(bad("grape.amplitude_cap_ghz", "must be positive"));
        }

        if self.sweep.fock_levels.is_empty() {
            return Err(bad("sweep.fock_levels", "empty"));
        }
        if self.sweep.nbar_grid.iter().any(|v| !(*v >= 0.0)) {
            return Err(bad("sweep.nbar_grid", "occupations must be non-negative"));
        }
        for &n in self.sweep.fock_levels.iter().chain(&self.background.fock_levels) {
            if n >= d.prep_fidelity.len() {
                return Err(bad("device.prep_fidelity", format!("no entry for |{n}>")));
            }
        }

        let l = &self.limit;
        match (l.a0, l.sigma_a0) {
            (None, None) => {}
            (Some(_), Some(s)) if s > 0.0 => {}
            (Some(_), Some(s)) => return Err(bad("limit.sigma_a0", format!("must be positive, got {s}"))),
            _ => return Err(bad("limit.a0", "a0 and sigma_a0 must be given together")),
        }
        if l.detuning_points == 0 {
            return Err(bad("limit.detuning_points", "must be positive"));
        }
        if l.monte_carlo_draws < 2 {
            return Err(bad("limit.monte_carlo_draws", "need at least two draws"));
        }

        let w = &self.wigner;
        if w.points < 2 || !(w.extent > 0.0) {
            return Err(bad("wigner", "need at least two points and a positive extent"));
        }
        if w.state == WignerState::Fock && w.n >= w.cavity_dim {
            return Err(bad("wigner.n", "must be below cavity_dim"));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration, excluding where it is written.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut c = self.clone();
        c.output_dir = None;
        let text = toml::to_string(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }

    /// One line per parameter with its unit and whether it was set by the
    /// user.
    pub fn report(&self, user: &Table) -> Vec<ReportEntry> {
        match Value::try_from(self) {
            Ok(Value::Table(t)) => flatten(&t, user),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub path: String,
    pub value: String,
    pub number: Option<f64>,
    pub unit: &'static str,
    pub source: &'static str,
}

fn unit_of(key: &str) -> &'static str {
    if key.ends_with("_gev_per_cm3") {
        "GeV/cm^3"
    } else if key.ends_with("_us") {
        "us"
    } else if key.ends_with("_ghz") {
        "GHz"
    } else if key.ends_with("_hz") {
        "Hz"
    } else if key.ends_with("_cm3") {
        "cm^3"
    } else if key == "a0" || key == "sigma_a0" {
        "1/s^2"
    } else {
        "-"
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Float(f) => format!("{:?}", tidy(*f)),
        Value::Array(items) => format!("[{}]", items.iter().map(render).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

fn flatten(table: &Table, user: &Table) -> Vec<ReportEntry> {
    let mut out = Vec::new();
    walk(table, Some(user), "", false, &mut out);
    out
}

fn walk(table: &Table, user: Option<&Table>, prefix: &str, overridden: bool, out: &mut Vec<ReportEntry>) {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let user_value = user.and_then(|u| u.get(key));
        let set = overridden || user_value.is_some();
        match value {
            Value::Table(t) => walk(t, user_value.and_then(Value::as_table), &path, overridden, out),
            Value::Array(rows) if !rows.is_empty() && rows.iter().all(|r| r.get("n").is_some()) => {
                // table rows are labelled by their photon number
                for row in rows {
                    let n = row.get("n").map(render).unwrap_or_default();
                    if let Some(t) = row.as_table() {
                        let mut fields = t.clone();
                        fields.remove("n");
                        walk(&fields, None, &format!("{path}[n={n}]"), set, out);
                    }
                }
            }
            leaf => out.push(ReportEntry {
                path,
                value: render(leaf),
                number: leaf.as_float().or_else(|| leaf.as_integer().map(|i| i as f64)),
                unit: unit_of(key),
                source: if set { "override" } else { "default" },
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value<'a>(r: &'a [ReportEntry], path: &str) -> &'a ReportEntry {
        r.iter().find(|e| e.path == path).unwrap_or_else(|| panic!("{path} missing"))
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let l = ExperimentConfig::parse("").unwrap();
        assert_eq!(l.config, ExperimentConfig::default());
        let r = l.config.report(&l.user);
        assert!(r.len() > 60);
        assert!(r.iter().all(|e| e.source == "default"));
    }

    #[test]
    fn default_literals() {
        let c = ExperimentConfig::default();
        let d = &c.device;
        assert_eq!((d.t1_q_us, d.t1_s_us, d.t_m_us), (115.0, 1360.0, 5.0));
        assert!((d.chi_ghz + 1.285e-3).abs() < 1e-15);
        assert!((d.f_s_ghz - 5.965).abs() < 1e-12);
        assert_eq!((d.f_gg, d.f_ee, d.nbar_c), (0.975, 0.968, 0.0063));
        assert_eq!(d.prep_fidelity, [0.952, 0.912, 0.873, 0.816, 0.636]);
        let rows: Vec<_> = d.demolition.iter().map(|r| (r.n, r.p, r.sigma)).collect();
        assert_eq!(rows, [(1, 0.026, 0.002), (2, 0.040, 0.004), (3, 0.10, 0.05), (4, 0.074, 0.012)]);
        let t1: Vec<_> = d.fock_lifetime.iter().map(|r| r.t1_us).collect();
        assert_eq!(t1, [1360.0, 660.0, 527.0, 319.0]);
        let p = &c.physics;
        assert_eq!((p.rho_gev_per_cm3, p.q_s, p.g, p.q_dm), (0.4, 5.11e7, 0.002, 1e6));
        assert!((p.volume_cm3 - 43.13).abs() < 1e-9 && (p.sigma_volume_cm3 - 1.2).abs() < 1e-9);
        assert_eq!((c.protocol.n_prechecks, c.protocol.n_repeats), (3, 30));
        assert_eq!(c.protocol.lambda_thresh, 1e3);
        assert_eq!((c.limit.dwell_us, c.limit.cap_nbar_max), (20.0, 0.05));
    }

    #[test]
    fn round_trip_of_units() {
        let d = DeviceSection::default();
        let back = DeviceSection::from_params(&d.to_params(), false);
        assert!((back.t1_s_us - 1360.0).abs() < 1e-9);
        assert!((back.chi_ghz + 1.285e-3).abs() < 1e-15);
        let (p, q) = (d.to_params(), DeviceParams::default());
        assert!((p.t1_q - q.t1_q).abs() < 1e-18 && (p.chi - q.chi).abs() < 1e-6);
        assert_eq!(p.demolition, q.demolition);
        let p = PhysicsSection::default().to_params(&d);
        assert!((p.volume - 43.13e-6).abs() < 1e-18);
        assert!((p.omega_s - PhysicsParams::default().omega_s).abs() < 1e-3);
    }

    #[test]
    fn overrides_are_tagged() {
        let l = ExperimentConfig::parse("[device]\nt1_s_us = 1000.0\n").unwrap();
        let r = l.config.report(&l.user);
        let e = value(&r, "device.t1_s_us");
        assert_eq!(e.source, "override");
        assert_eq!(e.unit, "us");
        assert_eq!(value(&r, "device.t1_q_us").source, "default");
        assert_eq!(l.config.device.to_params().t1_s, 1000e-6);
    }

    #[test]
    fn negative_lifetime_names_the_field() {
        let err = ExperimentConfig::parse("[device]\nt1_s_us = -5.0\n").unwrap_err();
        assert!(err.0.contains("device.t1_s_us"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("[device]\nbogus = 1\n").unwrap_err();
        assert!(err.0.contains("bogus"), "{err}");
        let err = ExperimentConfig::parse("colour = 1\n").unwrap_err();
        assert!(err.0.contains("colour"), "{err}");
    }

    #[test]
    fn missing_unit_suffix_is_explained() {
        let err = ExperimentConfig::parse("[device]\nt1_s = 0.00136\n").unwrap_err();
        assert!(err.0.contains("t1_s_us"), "{err}");
    }

    #[test]
    fn demolition_rows_are_traced() {
        let l = ExperimentConfig::parse("").unwrap();
        let r = l.config.report(&l.user);
        let e = value(&r, "device.demolition[n=3].p");
        assert_eq!(e.number, Some(0.10));
        assert_eq!(e.source, "default");
        assert_eq!(value(&r, "device.demolition[n=3].sigma").number, Some(0.05));
    }

    #[test]
    fn ideal_device_keeps_overrides() {
        let l = ExperimentConfig::parse("[device]\nideal = true\nf_gg = 0.9\n").unwrap();
        let p = l.config.device.to_params();
        assert_eq!(p.t1_s, f64::INFINITY);
        assert!(p.demolition.is_empty());
        assert_eq!(p.f_gg, 0.9);
        assert_eq!(p.f_ee, 1.0);
    }

    #[test]
    fn pinned_a0_needs_both_values() {
        assert!(ExperimentConfig::parse("[limit]\na0 = 1900.0\n").is_err());
        assert!(ExperimentConfig::parse("[limit]\na0 = 1900.0\nsigma_a0 = 9.807e5\n").is_ok());
    }

    #[test]
    fn digest_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.digest(), b.digest());
        b.seed = 2;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn default_grape_duration_is_three_dispersive_periods() {
        let c = ExperimentConfig::default();
        let t = c.grape.duration(&c.device);
        assert!((t - 3.0 / 1.285e6).abs() < 1e-15);
    }
}
