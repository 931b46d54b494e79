use std::f64::consts::PI;

use qsec::dynamics::HamiltonianParams;
use qsec::estimation::{self, FitModel, GammaPrior, PosteriorSettings};
use qsec::experiments::{self, ExperimentConfig, Grid};
use qsec::sequences::{self, GateSet, SignalSpec};

fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

#[test]
fn qsec_schedule_listing_matches_golden() {
    let g = GateSet::ideal(HamiltonianParams::default());
    let s = experiments::qsec_schedule(&g, 100e3, 40e-6, 2, &[]).unwrap();
    assert_eq!(s.listing(), golden("qsec_nec2.txt"));
}

#[test]
fn cpmg_listing_matches_golden() {
    let signal = SignalSpec { amplitude: 10e3, frequency: 100e3, phase: 0.0 };
    let s = sequences::cpmg_block(4, sequences::resonant_spacing(100e3), &signal, 0.0, 0.6e-6).unwrap();
    assert_eq!(s.listing(), golden("cpmg_n4.txt"));
}

#[test]
fn posterior_mode_ratio_between_ec_and_bare_curves() {
    let mut cfg = ExperimentConfig::default();
    cfg.qsec_rabi.n_ec = vec![0, 2];
    cfg.qsec_rabi.shots = 20_000;
    let curves = experiments::run_qsec_rabi(&cfg).unwrap();
    let settings = PosteriorSettings { chains: 2, samples: 3000, burn_in: 1500, seed: 3, ..Default::default() };
    let mode = |i: usize| {
        let c = &curves[i];
        estimation::posterior_gamma(&c.x, &c.y_sampled, &c.y_err, FitModel::Single, GammaPrior { gamma_max: 1e6 }, &settings)
            .unwrap()
            .mode
    };
    let ratio = mode(0) / mode(1);
    assert!((ratio - 1.5).abs() <= 0.3, "posterior mode ratio {ratio}");
}

#[test]
fn bitflip_composite_sits_between_delay_extremes() {
    let mut cfg = ExperimentConfig::default();
    cfg.bitflip_cpmg.amplitudes = Grid::linear(0.0, 160e3, 21);
    cfg.bitflip_cpmg.thetas = vec![PI];
    cfg.bitflip_cpmg.n_ec = vec![1];
    let r = experiments::run_bitflip_cpmg(&cfg).unwrap();
    let s0 = r.find(PI, Some(0.0), 1).unwrap().sensitivity;
    let s_avg = r.find(PI, None, 1).unwrap().sensitivity;
    assert!(s_avg.is_finite() && s_avg > s0);
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let mut cfg = ExperimentConfig::default();
    cfg.qsec_rabi.times = Grid::linear(0.0, 50e-6, 21);
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = serial.install(|| experiments::run_qsec_rabi(&cfg).unwrap());
    let b = wide.install(|| experiments::run_qsec_rabi(&cfg).unwrap());
    assert_eq!(a, b);
}
