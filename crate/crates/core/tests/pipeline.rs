use fockscan::dmlimit::{
    background_layout, epsilon_from_a0, fit_background, simulate_background, synthesize_background, BackgroundTruth,
    FitMethod, PhysicsParams,
};
use fockscan::hmm::{self, DetectorPoint, StreamCounts};
use fockscan::qstate;
use fockscan::trajsim::{self, DeviceParams, ProtocolConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

/// 3-sigma binomial band around `p` for `k` successes in `n` draws.
fn binomial_consistent(k: usize, n: usize, p: f64) -> bool {
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    (k as f64 / n as f64 - p).abs() <= 3.0 * sd
}

#[test]
fn ideal_vacuum_detector_has_unit_efficiency() {
    let base = ProtocolConfig {
        n_trials: 40_000,
        rng_seed: 101,
        ..ProtocolConfig::default()
    };
    let p = DeviceParams::ideal();
    let cells = trajsim::simulate_figure3_sweep(&p, &[0], &[0.02, 0.05, 0.1, 0.15], &base).unwrap();
    let fit = &hmm::characterize_detector(&p, &cells, 1e3).unwrap()[0];
    assert!((fit.eta - 1.0).abs() < 0.03, "eta {}", fit.eta);
    assert!(fit.delta.abs() < 1e-3, "delta {}", fit.delta);
    assert_eq!(fit.background_fraction, 0.0);
}

#[test]
fn default_device_keep_background_low() {
    let p = DeviceParams::default();
    let cfg = ProtocolConfig {
        n_trials: 20_000,
        rng_seed: 102,
        ..ProtocolConfig::default()
    };
    let trials = trajsim::run_protocol(&p, &cfg).unwrap();
    let records: Vec<_> = trials.into_iter().map(|t| t.record).collect();
    let c = hmm::classify_stream(&hmm::build_model(&p, 1).unwrap(), &records, 1e3).unwrap();
    assert!(c.positive_fraction() < 1e-3, "{c:?}");
    assert!(c.abort_fraction() < 0.2, "{c:?}");
}

#[test]
fn default_device_degrade_efficiency_with_fock_level() {
    let p = DeviceParams::default();
    let base = ProtocolConfig {
        n_trials: 20_000,
        rng_seed: 103,
        ..ProtocolConfig::default()
    };
    let cells = trajsim::simulate_figure3_sweep(&p, &[0, 4], &[0.02, 0.05, 0.1, 0.15], &base).unwrap();
    let fits = hmm::characterize_detector(&p, &cells, 1e3).unwrap();
    println!("eta(0) = {:.3}, eta(4) = {:.3}", fits[0].eta, fits[1].eta);
    assert!(fits[0].eta > fits[1].eta);
    assert!(fits[1].eta * 5.0 > fits[0].eta, "enhancement lost");
}

#[test]
fn synthetic_efficiency_fit_is_calibrated() {
    let (eta, delta, n) = (0.45, 1e-4, 4usize);
    let trials = 100_000u64;
    let grid = [0.02, 0.05, 0.1, 0.15, 0.2];
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let replicates = 300;
    let (mut eta_in, mut delta_in, mut sum) = (0, 0, 0.0);
    for _ in 0..replicates {
        let mut points = vec![hmm::detector_point(
            0.0,
            StreamCounts {
                positive: 0,
                negative: trials,
                aborted: 0,
            },
        )];
        for &nbar in &grid {
            let prob = eta * qstate::displacement_prob(n, n + 1, nbar).unwrap() + delta;
            let k = Binomial::new(trials, prob).unwrap().sample(&mut rng);
            points.push(hmm::detector_point(
                nbar,
                StreamCounts {
                    positive: k,
                    negative: trials - k,
                    aborted: 0,
                },
            ));
        }
        let fit = hmm::fit_detector_points(n, &points).unwrap();
        eta_in += usize::from((fit.eta - eta).abs() <= fit.sigma_eta);
        delta_in += usize::from((fit.delta - delta).abs() <= fit.sigma_delta);
        sum += fit.eta;
    }
    assert!(binomial_consistent(eta_in, replicates, 0.683), "eta coverage {eta_in}");
    assert!(binomial_consistent(delta_in, replicates, 0.683), "delta coverage {delta_in}");
    assert!((sum / replicates as f64 - eta).abs() < 0.005);
}

#[test]
fn detector_fit_rejects_identical_occupations() {
    let pt = |nbar: f64, k: u64| DetectorPoint {
        nbar,
        trials: 1000,
        positives: k,
        positive_fraction: k as f64 / 1000.0,
        sigma: (k.max(1) as f64).sqrt() / 1000.0,
    };
    let points = [pt(0.0, 0), pt(0.1, 10), pt(0.1, 12), pt(0.1, 9)];
    assert!(hmm::fit_detector_points(1, &points).is_err());
}

#[test]
fn two_photon_demolition_is_recovered() {
    let p = DeviceParams::default();
    let tau_reps = [10e-6, 20e-6, 50e-6, 100e-6, 200e-6];
    let probes: Vec<usize> = (0..=10).map(|k| k * 8).collect();
    let points = hmm::simulate_qndness(&p, 2, &tau_reps, &probes, 4000, 105).unwrap();
    let fit = hmm::fit_qndness(&points).unwrap();
    // per-interval loss d + p compounds, so the slope converges to p + p^2/2
    let p_d = p.demolition_probability(2);
    let expected = p_d + p_d * p_d / 2.0;
    assert!((fit.p_d - expected).abs() <= 2.0 * fit.sigma_p_d, "{fit:?}");
    assert!((fit.p_d - p_d).abs() <= 0.05 * p_d, "{fit:?}");
}

#[test]
fn background_fit_coverage_matches_gaussian_rate() {
    let truth = BackgroundTruth::published();
    let layout = background_layout(&[0, 1, 2, 4], &[1e-6, 5e-6, 10e-6, 20e-6], 20_000);
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let replicates = 500;
    let mut covered = 0;
    let mut a0s = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let data = synthesize_background(&truth, &layout, &mut rng).unwrap();
        let fit = fit_background(&data, FitMethod::Mle).unwrap();
        covered += usize::from((fit.a0 - truth.a0).abs() <= fit.sigma_a0());
        a0s.push(fit.a0);
    }
    assert!(binomial_consistent(covered, replicates, 0.683), "coverage {covered}/{replicates}");
    let mean = a0s.iter().sum::<f64>() / replicates as f64;
    let sd = (a0s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (replicates - 1) as f64).sqrt();
    let se = sd / (replicates as f64).sqrt();
    assert!((mean - truth.a0).abs() < 3.0 * se, "mean {mean} se {se}");
}

#[test]
fn simulated_background_has_no_drive_signal() {
    let p = DeviceParams::default();
    let taus = [1e-6, 5e-6, 10e-6, 20e-6];
    let data = simulate_background(&p, &[0, 1, 2, 4], &taus, 20_000, 1e3, 107).unwrap();
    let fit = fit_background(&data, FitMethod::Mle).unwrap();
    assert!(fit.a0.abs() < 3.0 * fit.sigma_a0(), "{fit:?}");
    let res = epsilon_from_a0(fit.a0, fit.sigma_a0(), &PhysicsParams::default()).unwrap();
    assert!(res.epsilon_90 > 0.0 && res.epsilon_90.is_finite());
}
