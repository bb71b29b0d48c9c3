use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fockscan::dmlimit::{self, BackgroundDataset, BackgroundFit, BackgroundTruth, ExclusionResult, ScanRate};
use fockscan::hmm::{self, DetectorFit};
use fockscan::pulsectl::{self, DispersiveHamiltonian};
use fockscan::qstate::{self, StateVector};
use fockscan::trajsim::{self, SweepCell};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BackgroundSource, ExperimentConfig, Pipeline, WignerState};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub fockscan_cli: String,
    pub fockscan: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Everything but `wall_time_s` is determined by the configuration and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: Pipeline,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: Versions,
    pub outputs: Vec<OutputFile>,
    pub wall_time_s: f64,
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        body(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }
}

fn file_entry(dir: &Path, name: &str) -> Result<OutputFile> {
    let bytes = fs::read(dir.join(name)).with_context(|| format!("reading back {name}"))?;
    Ok(OutputFile {
        path: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: format!("{:x}", Sha256::digest(&bytes)),
    })
}

/// Runs one pipeline into `out` and writes its manifest there.
pub fn run(pipeline: Pipeline, config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs = Outputs { dir: out, written: Vec::new() };
    match pipeline {
        Pipeline::Grape => grape(config, &mut outputs)?,
        Pipeline::Sweep => sweep(config, &mut outputs)?,
        Pipeline::Characterize => characterize(config, &mut outputs)?,
        Pipeline::Background => background(config, &mut outputs)?,
        Pipeline::Limit => limit(config, &mut outputs)?,
        Pipeline::Wigner => wigner(config, &mut outputs)?,
    }
    let files = outputs
        .written
        .iter()
        .map(|name| file_entry(out, name))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        pipeline,
        config_sha256: config.digest(),
        seed: config.seed,
        versions: Versions {
            fockscan_cli: env!("CARGO_PKG_VERSION").to_string(),
            fockscan: fockscan::VERSION.to_string(),
        },
        outputs: files,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let mut w = BufWriter::new(File::create(out.join(MANIFEST))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(manifest)
}

#[derive(Serialize)]
struct GrapeSummary {
    initial_n: usize,
    target_n: usize,
    cavity_dim: usize,
    steps: usize,
    duration_s: f64,
    fidelity: f64,
    iterations: usize,
    converged: bool,
    max_qubit_amplitude: f64,
    max_cavity_amplitude: f64,
    prep_fidelity_vs_nbar: Vec<(f64, f64)>,
    max_tolerable_nbar: Option<f64>,
}

fn grape(c: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let g = &c.grape;
    let device = c.device.to_params();
    let h = DispersiveHamiltonian::rotating(g.cavity_dim, device.chi);
    let initial = pulsectl::ground_fock(g.cavity_dim, g.initial_n)?;
    let target = pulsectl::ground_fock(g.cavity_dim, g.target_n)?;
    let duration = g.duration(&c.device);
    let result = pulsectl::grape_optimize(&h, &initial, &target, g.steps, duration / g.steps as f64, &g.to_config(c.seed))?;
    let curve = pulsectl::prep_fidelity_vs_occupation(&h, &result.pulses, &target, &g.occupation_grid)?;
    let peak = |v: &[Complex64]| v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    out.write("pulses.txt", |w| Ok(result.pulses.write_table(w)?))?;
    out.write("grape_history.csv", |w| Ok(result.write_history_csv(w)?))?;
    out.json(
        "grape.json",
        &GrapeSummary {
            initial_n: g.initial_n,
            target_n: g.target_n,
            cavity_dim: g.cavity_dim,
            steps: g.steps,
            duration_s: duration,
            fidelity: result.fidelity,
            iterations: result.iterations,
            converged: result.converged,
            max_qubit_amplitude: peak(&result.pulses.qubit_drive),
            max_cavity_amplitude: peak(&result.pulses.cavity_drive),
            max_tolerable_nbar: pulsectl::max_tolerable_occupation(&curve, g.max_fidelity_drop),
            prep_fidelity_vs_nbar: curve,
        },
    )
}

fn sweep_cells(c: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let base = c.protocol.base(c.seed, c.sweep.dwell_us);
    Ok(trajsim::simulate_figure3_sweep(
        &c.device.to_params(),
        &c.sweep.fock_levels,
        &c.sweep.nbar_grid,
        &base,
    )?)
}

fn sweep(c: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let cells = sweep_cells(c)?;
    let dir = out.dir.to_path_buf();
    let mut truth = if c.sweep.write_truth {
        Some(BufWriter::new(File::create(dir.join("truth.ndjson"))?))
    } else {
        None
    };
    out.write("records.ndjson", |w| {
        for cell in &cells {
            trajsim::write_trials(&cell.trials, &mut *w, truth.as_mut())?;
        }
        Ok(())
    })?;
    if let Some(mut t) = truth {
        t.flush()?;
        out.written.push("truth.ndjson".into());
    }
    out.write("sweep_cells.csv", |w| {
        writeln!(w, "n,nbar,trials,passed")?;
        for cell in &cells {
            let passed = cell.trials.iter().filter(|t| t.record.passed_prechecks).count();
            writeln!(w, "{},{},{},{}", cell.n, cell.nbar, cell.trials.len(), passed)?;
        }
        Ok(())
    })
}

fn characterize(c: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let cells = sweep_cells(c)?;
    let fits: Vec<DetectorFit> = hmm::characterize_detector(&c.device.to_params(), &cells, c.protocol.lambda_thresh)?;
    out.write("detector_points.csv", |w| Ok(hmm::write_detector_csv(&fits, w)?))?;
    out.json("detector_fits.json", &fits)
}

#[derive(Serialize)]
struct BackgroundReport<'a> {
    source: BackgroundSource,
    fit: &'a BackgroundFit,
    sigma_a0: f64,
}

fn background(c: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let b = &c.background;
    let taus: Vec<f64> = b.dwell_us.iter().map(|t| t * 1e-6).collect();
    let data = match b.source {
        BackgroundSource::Simulate => dmlimit::simulate_background_with(
            &c.device.to_params(),
            &b.fock_levels,
            &taus,
            &c.protocol.base(c.seed, 0.0),
            c.protocol.lambda_thresh,
        )?,
        BackgroundSource::Synthetic => {
            let layout = dmlimit::background_layout(&b.fock_levels, &taus, c.protocol.trials_per_cell as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
            dmlimit::synthesize_background(&BackgroundTruth::published(), &layout, &mut rng)?
        }
    };
    let fit = dmlimit::fit_background(&data, b.method)?;
    out.write("background.csv", |w| Ok(data.write_csv(w)?))?;
    out.json(
        "background_fit.json",
        &BackgroundReport {
            source: b.source,
            sigma_a0: fit.sigma_a0(),
            fit: &fit,
        },
    )
}

#[derive(Serialize)]
struct LimitReport<'a> {
    a0_source: &'static str,
    background_csv: Option<String>,
    fit: Option<&'a BackgroundFit>,
    result: &'a ExclusionResult,
    sigma_epsilon_monte_carlo: f64,
    monte_carlo_draws: usize,
    scan: &'a ScanRate,
}

fn limit(c: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let l = &c.limit;
    let phys = c.physics.to_params(&c.device);
    let (a0, sigma_a0, fit, csv) = match (l.a0, l.sigma_a0) {
        (Some(a0), Some(s)) => (a0, s, None, None),
        _ => {
            let path: PathBuf = l.background_csv.clone().unwrap_or_else(|| out.dir.join("background.csv"));
            if !path.exists() {
                bail!(
                    "no background dataset at {}; run the background pipeline first or pin limit.a0",
                    path.display()
                );
            }
            let data = BackgroundDataset::read_csv(BufReader::new(File::open(&path)?))
                .with_context(|| format!("reading {}", path.display()))?;
            let fit = dmlimit::fit_background(&data, c.background.method)?;
            (fit.a0, fit.sigma_a0(), Some(fit), Some(path.display().to_string()))
        }
    };
    let result = dmlimit::epsilon_from_a0(a0, sigma_a0, &phys)?;
    let mc = dmlimit::monte_carlo_sigma_epsilon(a0, sigma_a0, &phys, l.monte_carlo_draws, c.seed)?;
    let detunings = qstate::linspace(-l.detuning_span_hz, l.detuning_span_hz, l.detuning_points);
    let curve = dmlimit::exclusion_curve(&result, &phys, l.lineshape(), &detunings, &l.cap())?;
    let scan = dmlimit::scan_rate(&phys, &l.timing(&c.protocol, &c.device))?;
    out.json(
        "exclusion.json",
        &LimitReport {
            a0_source: if fit.is_some() { "fit" } else { "pinned" },
            background_csv: csv,
            fit: fit.as_ref(),
            result: &result,
            sigma_epsilon_monte_carlo: mc,
            monte_carlo_draws: l.monte_carlo_draws,
            scan: &scan,
        },
    )?;
    out.write("exclusion_curve.csv", |w| Ok(dmlimit::write_curve_csv(&curve, w)?))
}

fn wigner(c: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let w = &c.wigner;
    let state: StateVector = match w.state {
        WignerState::Fock => qstate::fock(w.cavity_dim, w.n)?,
        WignerState::Coherent => StateVector::coherent(w.cavity_dim, Complex64::new(w.alpha_re, w.alpha_im))?.state,
    };
    let axis = qstate::linspace(-w.extent, w.extent, w.points);
    let grid = qstate::wigner(&state, &axis, &axis)?;
    out.write("wigner.csv", |f| Ok(grid.write_csv(f)?))
}
