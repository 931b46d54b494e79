//! End-to-end protocol runners.
//!
//! Every runner evaluates the exact density-matrix probability at each grid
//! point and draws a binomial shot estimate next to it. Grid points are
//! independent: each has its own random stream derived from the config seed,
//! and results are collected in grid order.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels::{self, ReadoutModel, ResetModel};
use crate::dynamics::{Axis, DephasingLaw, Evolver, Frame, HamiltonianParams, Rotation};
use crate::estimation::{self, FitModel};
use crate::hilbert::DensityMatrix;
use crate::sequences::{self, CzImplementation, GateSet, PulseSchedule, SignalSpec, Step};
use crate::{rng, Error, Result};

/// Largest supported number of error-correction rounds.
pub const MAX_EC_ROUNDS: u8 = 2;

/// A sweep axis: either `{ start, stop, points }` (inclusive) or a list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Linear { start: f64, stop: f64, points: usize },
    Values(Vec<f64>),
}

impl Grid {
    pub fn linear(start: f64, stop: f64, points: usize) -> Self {
        Grid::Linear { start, stop, points }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Grid::Linear { start, stop, points } => match points {
                0 => Vec::new(),
                1 => vec![*start],
                n => (0..*n)
                    .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
                    .collect(),
            },
            Grid::Values(v) => v.clone(),
        }
    }

    fn check(&self, field: &str) -> Result<()> {
        let v = self.values();
        if v.is_empty() {
            return Err(Error::config(field, "grid is empty"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::config(field, "grid contains non-finite values"));
        }
        if v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(field, "grid must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DephasingConfig {
    pub enabled: bool,
    #[serde(flatten)]
    pub law: DephasingLaw,
}

impl Default for DephasingConfig {
    fn default() -> Self {
        DephasingConfig {
            enabled: true,
            law: DephasingLaw::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub cz: CzImplementation,
    /// Fidelity of each entangling gate; mapped to a depolarizing keep
    /// fraction. 1 means perfect gates.
    pub entangling_fidelity: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            cz: CzImplementation::Ideal,
            entangling_fidelity: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QsecRabiConfig {
    /// MW Rabi frequency (Hz).
    pub rabi: f64,
    pub frame: Frame,
    pub n_ec: Vec<u8>,
    /// Total sensing time (s).
    pub times: Grid,
    /// Share of the sensing time per block; empty means equal blocks.
    pub block_fractions: Vec<f64>,
    pub shots: u64,
}

impl Default for QsecRabiConfig {
    fn default() -> Self {
        QsecRabiConfig {
            rabi: 100e3,
            frame: Frame::Tracked,
            n_ec: vec![0, 1, 2],
            times: Grid::linear(0.0, 200e-6, 161),
            block_fractions: Vec::new(),
            shots: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleErrorConfig {
    pub rabi: f64,
    pub frame: Frame,
    /// Electron z-rotation angle of the injected error.
    pub angle: f64,
    /// Dephasing during this protocol (on top of `dephasing.enabled`).
    pub noise: bool,
    pub times: Grid,
    pub shots: u64,
}

impl Default for SingleErrorConfig {
    fn default() -> Self {
        SingleErrorConfig {
            rabi: 100e3,
            frame: Frame::Tracked,
            angle: PI,
            noise: false,
            times: Grid::linear(0.0, 100e-6, 161),
            shots: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BitflipConfig {
    /// AC signal frequency (Hz).
    pub frequency: f64,
    pub n_pulses: usize,
    /// Pulse spacing; defaults to the resonant `1/(2f)`.
    pub spacing: Option<f64>,
    pub frame: Frame,
    /// Signal amplitudes swept to measure the response slope (Hz).
    pub amplitudes: Grid,
    pub thetas: Vec<f64>,
    /// Error time measured back from the end of each CPMG block (s).
    pub delays: Vec<f64>,
    pub n_ec: Vec<u8>,
    pub shots: u64,
}

impl Default for BitflipConfig {
    fn default() -> Self {
        BitflipConfig {
            frequency: 100e3,
            n_pulses: 4,
            spacing: None,
            frame: Frame::Tracked,
            amplitudes: Grid::linear(0.0, 160e3, 41),
            thetas: vec![0.5 * PI, 0.75 * PI, PI],
            delays: vec![0.0, 0.6e-6, 1.2e-6, 1.8e-6],
            n_ec: vec![0, 1, 2],
            shots: 2000,
        }
    }
}

impl BitflipConfig {
    pub fn spacing(&self) -> f64 {
        self.spacing.unwrap_or_else(|| sequences::resonant_spacing(self.frequency))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResetCoherenceConfig {
    pub resets: usize,
    pub shots: u64,
}

impl Default for ResetCoherenceConfig {
    fn default() -> Self {
        ResetCoherenceConfig {
            resets: 20,
            shots: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoNoiseConfig {
    pub rabi: f64,
    pub frame: Frame,
    pub times: Grid,
    pub shots: u64,
}

impl Default for NoNoiseConfig {
    fn default() -> Self {
        NoNoiseConfig {
            rabi: 10e3,
            frame: Frame::Lab,
            times: Grid::linear(0.0, 399.5e-6, 800),
            shots: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub hamiltonian: HamiltonianParams,
    pub dephasing: DephasingConfig,
    pub reset: ResetModel,
    pub readout: ReadoutModel,
    pub gates: GateConfig,
    pub qsec_rabi: QsecRabiConfig,
    pub single_error: SingleErrorConfig,
    pub bitflip_cpmg: BitflipConfig,
    pub reset_coherence: ResetCoherenceConfig,
    pub no_noise: NoNoiseConfig,
}

fn check_n_ec(field: &str, values: &[u8]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config(field, "list is empty"));
    }
    if let Some(n) = values.iter().find(|&&n| n > MAX_EC_ROUNDS) {
        return Err(Error::config(
            field,
            format!("n_ec = {n} exceeds the supported maximum of {MAX_EC_ROUNDS}; the protocol runs up to two rounds of repetitive error correction"),
        ));
    }
    Ok(())
}

fn check_shots(field: &str, shots: u64) -> Result<()> {
    if shots == 0 {
        return Err(Error::config(field, "shots must be at least 1"));
    }
    Ok(())
}

fn check_non_negative(field: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::config(field, format!("must be finite and non-negative, got {v}")));
    }
    Ok(())
}

fn check_unit(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(field, format!("must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn check_times(field: &str, grid: &Grid) -> Result<()> {
    grid.check(field)?;
    if grid.values()[0] < 0.0 {
        return Err(Error::config(field, "times must be non-negative"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let span = e.span().map(|s| format!(" (bytes {}..{})", s.start, s.end)).unwrap_or_default();
            Error::config("toml", format!("{}{span}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hamiltonian;
        for (f, v) in [("hamiltonian.a", h.a), ("hamiltonian.delta_nv", h.delta_nv), ("hamiltonian.delta_c13", h.delta_c13)] {
            if !v.is_finite() {
                return Err(Error::config(f, "must be finite"));
            }
        }
        let t = self.dephasing.law.t;
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::config("dephasing.t", format!("dephasing time T must be positive, got {t}")));
        }
        check_unit("reset.eta", self.reset.eta)?;
        check_unit("readout.fidelity_read", self.readout.fidelity_read)?;
        check_unit("readout.fidelity_init", self.readout.fidelity_init)?;
        if let Some(p) = &self.readout.photon {
            check_non_negative("readout.photon.rate_up", p.rate_up)?;
            check_non_negative("readout.photon.rate_down", p.rate_down)?;
            if p.repetitions == 0 {
                return Err(Error::config("readout.photon.repetitions", "must be at least 1"));
            }
        }
        let f = self.gates.entangling_fidelity;
        if !(0.25..=1.0).contains(&f) {
            return Err(Error::config("gates.entangling_fidelity", format!("must lie in [0.25, 1], got {f}")));
        }
        if self.gates.cz == CzImplementation::Hyperfine && h.a == 0.0 {
            return Err(Error::config("gates.cz", "hyperfine gate needs a non-zero coupling A"));
        }

        let q = &self.qsec_rabi;
        check_non_negative("qsec_rabi.rabi", q.rabi)?;
        check_n_ec("qsec_rabi.n_ec", &q.n_ec)?;
        check_times("qsec_rabi.times", &q.times)?;
        check_shots("qsec_rabi.shots", q.shots)?;
        if !q.block_fractions.is_empty() {
            if q.block_fractions.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::config("qsec_rabi.block_fractions", "fractions must be positive"));
            }
            for &n in &q.n_ec {
                if q.block_fractions.len() != blocks_for(n) {
                    return Err(Error::config(
                        "qsec_rabi.block_fractions",
                        format!("{} fractions given but n_ec = {n} uses {} sensing blocks", q.block_fractions.len(), blocks_for(n)),
                    ));
                }
            }
        }

        let s = &self.single_error;
        check_non_negative("single_error.rabi", s.rabi)?;
        check_times("single_error.times", &s.times)?;
        check_shots("single_error.shots", s.shots)?;

        let b = &self.bitflip_cpmg;
        if !(b.frequency > 0.0) {
            return Err(Error::config("bitflip_cpmg.frequency", "signal frequency must be positive"));
        }
        if b.n_pulses == 0 {
            return Err(Error::config("bitflip_cpmg.n_pulses", "need at least one pulse"));
        }
        let spacing = b.spacing();
        if !(spacing > 0.0) {
            return Err(Error::config("bitflip_cpmg.spacing", "must be positive"));
        }
        b.amplitudes.check("bitflip_cpmg.amplitudes")?;
        if b.thetas.is_empty() {
            return Err(Error::config("bitflip_cpmg.thetas", "list is empty"));
        }
        Grid::Values(b.delays.clone()).check("bitflip_cpmg.delays")?;
        if let Some(d) = b.delays.iter().find(|d| !(0.0..=spacing / 2.0).contains(*d)) {
            return Err(Error::config(
                "bitflip_cpmg.delays",
                format!("delay {d:e} s lies outside the last free interval [0, {:e}] s", spacing / 2.0),
            ));
        }
        check_n_ec("bitflip_cpmg.n_ec", &b.n_ec)?;
        check_shots("bitflip_cpmg.shots", b.shots)?;

        check_shots("reset_coherence.shots", self.reset_coherence.shots)?;
        let n = &self.no_noise;
        check_non_negative("no_noise.rabi", n.rabi)?;
        check_times("no_noise.times", &n.times)?;
        check_shots("no_noise.shots", n.shots)?;
        Ok(())
    }

    pub fn gates(&self) -> GateSet {
        GateSet {
            params: self.hamiltonian,
            cz: self.gates.cz,
            cz_keep: channels::depolarizing_keep(self.gates.entangling_fidelity),
            reset: self.reset,
        }
    }

    pub fn evolver(&self, frame: Frame) -> Evolver {
        Evolver::new(&self.hamiltonian, frame, self.dephasing.law).with_noise(self.dephasing.enabled)
    }
}

/// One sampled curve plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveData {
    pub label: String,
    pub x: Vec<f64>,
    pub y_exact: Vec<f64>,
    pub y_sampled: Vec<f64>,
    pub y_err: Vec<f64>,
    pub shots: u64,
    pub config_hash: String,
    pub seed: u64,
    /// Extra `key: value` header lines.
    pub metadata: Vec<(String, String)>,
}

impl CurveData {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Peak-to-peak range of the exact curve.
    pub fn exact_contrast(&self) -> f64 {
        let hi = self.y_exact.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.y_exact.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    /// Tab-separated table with a `#` header. Values use shortest
    /// round-trip formatting so a parsed table is bit-identical.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# label: {}", self.label);
        let _ = writeln!(out, "# config_hash: {}", self.config_hash);
        let _ = writeln!(out, "# seed: {}", self.seed);
        let _ = writeln!(out, "# shots: {}", self.shots);
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out.push_str("x\ty_exact\ty_sampled\ty_err\n");
        for i in 0..self.x.len() {
            let _ = writeln!(out, "{:?}\t{:?}\t{:?}\t{:?}", self.x[i], self.y_exact[i], self.y_sampled[i], self.y_err[i]);
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut c = CurveData {
            label: String::new(),
            x: Vec::new(),
            y_exact: Vec::new(),
            y_sampled: Vec::new(),
            y_err: Vec::new(),
            shots: 0,
            config_hash: String::new(),
            seed: 0,
            metadata: Vec::new(),
        };
        let bad = |line: usize, message: String| Error::Table { line, message };
        let mut saw_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let Some((k, v)) = meta.split_once(':') else { continue };
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "label" => c.label = v.to_string(),
                    "config_hash" => c.config_hash = v.to_string(),
                    "seed" => c.seed = v.parse().map_err(|e| bad(i + 1, format!("seed: {e}")))?,
                    "shots" => c.shots = v.parse().map_err(|e| bad(i + 1, format!("shots: {e}")))?,
                    _ => c.metadata.push((k.to_string(), v.to_string())),
                }
                continue;
            }
            if !saw_header {
                if line.split('\t').next() != Some("x") {
                    return Err(bad(i + 1, "expected column header `x\\ty_exact\\ty_sampled\\ty_err`".into()));
                }
                saw_header = true;
                continue;
            }
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != 4 {
                return Err(bad(i + 1, format!("expected 4 columns, found {}", cells.len())));
            }
            let mut v = [0.0; 4];
            for (slot, cell) in v.iter_mut().zip(&cells) {
                *slot = cell.trim().parse().map_err(|e| bad(i + 1, format!("`{cell}`: {e}")))?;
            }
            c.x.push(v[0]);
            c.y_exact.push(v[1]);
            c.y_sampled.push(v[2]);
            c.y_err.push(v[3]);
        }
        if !saw_header {
            return Err(bad(0, "no data header found".into()));
        }
        Ok(c)
    }
}

/// Number of sensing blocks for `n_ec` rounds: each block is followed by a
/// round, and without correction the whole window is one block.
pub fn blocks_for(n_ec: u8) -> usize {
    (n_ec as usize).max(1)
}

pub fn sensing_end_marker(k: usize) -> String {
    format!("sensing_{k}_end")
}

/// Encode, sensing blocks of the given durations with an EC round after each
/// block flagged in `ec_after`, decode and map to the nuclear readout basis.
/// A marker [`sensing_end_marker`]`(k)` follows block `k`.
pub fn phase_code_schedule(g: &GateSet, rabi: f64, blocks: &[f64], ec_after: &[bool]) -> Result<PulseSchedule> {
    let mut s = sequences::encode(g)?;
    for (k, &d) in blocks.iter().enumerate() {
        s.append(&sequences::sensing_block(d, rabi));
        s.mark(sensing_end_marker(k));
        if ec_after.get(k).copied().unwrap_or(false) {
            s.append(&sequences::ec_round(g)?);
        }
    }
    s.append(&sequences::decode(g)?);
    s.append(&sequences::readout_map());
    Ok(s)
}

/// QSEC Rabi schedule for total sensing time `t` and `n_ec` rounds.
pub fn qsec_schedule(g: &GateSet, rabi: f64, t: f64, n_ec: u8, fractions: &[f64]) -> Result<PulseSchedule> {
    let nb = blocks_for(n_ec);
    let blocks: Vec<f64> = if fractions.is_empty() {
        vec![t / nb as f64; nb]
    } else {
        let total: f64 = fractions.iter().sum();
        fractions.iter().map(|f| t * f / total).collect()
    };
    let ec: Vec<bool> = (0..nb).map(|k| k < n_ec as usize).collect();
    phase_code_schedule(g, rabi, &blocks, &ec)
}

fn y_err(k: u64, n: u64) -> f64 {
    // Half-count regularised estimate so zero and full counts keep a
    // non-zero error bar.
    let p = (k as f64 + 0.5) / (n as f64 + 1.0);
    (p * (1.0 - p) / n as f64).sqrt()
}

fn sample_probability(p: f64, shots: u64, seed: u64, stream_id: u64, index: usize) -> (f64, f64) {
    let mut r = rng::stream(rng::derive_seed(seed, stream_id), index as u64);
    let k = Binomial::new(shots, p.clamp(0.0, 1.0)).expect("valid binomial").sample(&mut r);
    (k as f64 / shots as f64, y_err(k, shots))
}

struct CurveSpec<'a> {
    label: String,
    stream_id: u64,
    shots: u64,
    cfg: &'a ExperimentConfig,
    metadata: Vec<(String, String)>,
}

/// Evaluate `exact(x)` over the grid in parallel and attach shot estimates.
fn build_curve<F>(spec: CurveSpec<'_>, xs: &[f64], exact: F) -> Result<CurveData>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let seed = spec.cfg.seed;
    let rows: Vec<(f64, f64, f64)> = xs
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let p = exact(x)?;
            let (ys, e) = sample_probability(p, spec.shots, seed, spec.stream_id, i);
            Ok((p, ys, e))
        })
        .collect::<Result<_>>()?;
    Ok(CurveData {
        label: spec.label,
        x: xs.to_vec(),
        y_exact: rows.iter().map(|r| r.0).collect(),
        y_sampled: rows.iter().map(|r| r.1).collect(),
        y_err: rows.iter().map(|r| r.2).collect(),
        shots: spec.shots,
        config_hash: spec.cfg.hash(),
        seed,
        metadata: spec.metadata,
    })
}

fn reported_up(s: &PulseSchedule, ev: &Evolver, readout: &ReadoutModel) -> Result<f64> {
    let (rho, _) = s.run(&channels::initial_state(readout), ev, 0.0)?;
    Ok(channels::p_report_up(&rho, readout))
}

/// Sequence time spent outside sensing (gates, resets).
fn overhead(s: &PulseSchedule, sensing: f64) -> f64 {
    (s.duration() - sensing).max(0.0)
}

/// One curve per configured `n_ec`: readout probability against total
/// sensing time.
pub fn run_qsec_rabi(cfg: &ExperimentConfig) -> Result<Vec<CurveData>> {
    cfg.validate()?;
    let q = &cfg.qsec_rabi;
    let g = cfg.gates();
    let ev = cfg.evolver(q.frame);
    let xs = q.times.values();
    q.n_ec
        .iter()
        .map(|&n| {
            let probe = qsec_schedule(&g, q.rabi, 0.0, n, &q.block_fractions)?;
            let spec = CurveSpec {
                label: format!("qsec_rabi_nec{n}"),
                stream_id: 100 + n as u64,
                shots: q.shots,
                cfg,
                metadata: vec![
                    ("n_ec".into(), n.to_string()),
                    ("rabi".into(), format!("{:?}", q.rabi)),
                    ("x_unit".into(), "s".into()),
                    ("overhead_per_point_s".into(), format!("{:?}", overhead(&probe, 0.0))),
                ],
            };
            build_curve(spec, &xs, |t| {
                let s = qsec_schedule(&g, q.rabi, t, n, &q.block_fractions)?;
                reported_up(&s, &ev, &cfg.readout)
            })
        })
        .collect()
}

/// The four curves of the single phase-flip experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleErrorCurves {
    /// Two EC rounds, error injected before the first (intermediate) round.
    pub ec_with_error: CurveData,
    pub ec_error_free: CurveData,
    /// No correction, error injected in the middle of the sensing window.
    pub no_ec_with_error: CurveData,
    pub no_ec_error_free: CurveData,
}

pub fn run_single_phase_error(cfg: &ExperimentConfig) -> Result<SingleErrorCurves> {
    cfg.validate()?;
    let c = &cfg.single_error;
    let g = cfg.gates();
    let ev = cfg.evolver(c.frame).with_noise(cfg.dephasing.enabled && c.noise);
    let xs = c.times.values();
    let error = Step::PhaseError { angle: c.angle };

    let make = |label: &str, id: u64, ec: bool, inject: bool| -> Result<CurveData> {
        let spec = CurveSpec {
            label: label.to_string(),
            stream_id: id,
            shots: c.shots,
            cfg,
            metadata: vec![
                ("error_angle".into(), format!("{:?}", if inject { c.angle } else { 0.0 })),
                ("n_ec".into(), if ec { "2" } else { "0" }.into()),
                ("x_unit".into(), "s".into()),
            ],
        };
        build_curve(spec, &xs, |t| {
            let mut s = if ec {
                phase_code_schedule(&g, c.rabi, &[t / 2.0, t / 2.0], &[true, true])?
            } else {
                phase_code_schedule(&g, c.rabi, &[t / 2.0, t / 2.0], &[false, false])?
            };
            if inject {
                s.insert_at(&sensing_end_marker(0), error)?;
            }
            reported_up(&s, &ev, &cfg.readout)
        })
    };
    Ok(SingleErrorCurves {
        ec_with_error: make("single_error_ec", 200, true, true)?,
        ec_error_free: make("single_error_ec_reference", 201, true, false)?,
        no_ec_with_error: make("single_error_no_ec", 202, false, true)?,
        no_ec_error_free: make("single_error_no_ec_reference", 203, false, false)?,
    })
}

/// Bit-code schedule: `max(n_ec, 1)` CPMG blocks, each with a y-rotation
/// error `delay` before its end and followed by an EC round while rounds
/// remain, then decode and readout map.
pub fn bitflip_schedule(g: &GateSet, b: &BitflipConfig, amplitude: f64, n_ec: u8, theta: f64, delay: f64) -> Result<PulseSchedule> {
    let spacing = b.spacing();
    let signal = SignalSpec {
        amplitude,
        frequency: b.frequency,
        phase: 0.0,
    };
    let mut s = sequences::encode_bit(g)?;
    let mut t_signal = 0.0;
    for k in 0..blocks_for(n_ec) {
        let mut block = sequences::cpmg_block(b.n_pulses, spacing, &signal, t_signal, delay)?;
        if theta != 0.0 {
            block.insert_at(sequences::ERROR_MARKER, Step::BitFlip { theta })?;
        }
        t_signal += block.duration();
        s.append(&block);
        if k < n_ec as usize {
            s.append(&sequences::ec_round_bit(g)?);
        }
    }
    s.append(&sequences::decode_bit(g)?);
    s.append(&sequences::readout_map());
    Ok(s)
}

/// One `(θ, delay, n_ec)` case of the bit-flip sweep. `delay` is `None` for
/// the composite that averages over all configured delays.
#[derive(Clone, Debug, PartialEq)]
pub struct BitflipCase {
    pub theta: f64,
    pub delay: Option<f64>,
    pub n_ec: u8,
    /// Readout probability against signal amplitude.
    pub curve: CurveData,
    /// Peak-to-peak response `C`.
    pub contrast: f64,
    /// Phase response `dΦ/db` (rad/Hz).
    pub slope: f64,
    /// Sensing time (s), gates and resets excluded.
    pub sensing_time: f64,
    /// `√t/(C·|dΦ/db|)`; infinite when no response is left.
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BitflipReport {
    /// Error-free references, one per `n_ec`, listed first.
    pub cases: Vec<BitflipCase>,
}

impl BitflipReport {
    pub fn find(&self, theta: f64, delay: Option<f64>, n_ec: u8) -> Option<&BitflipCase> {
        self.cases.iter().find(|c| {
            (c.theta - theta).abs() < 1e-12
                && c.n_ec == n_ec
                && match (c.delay, delay) {
                    (Some(a), Some(b)) => (a - b).abs() < 1e-15,
                    (None, None) => true,
                    _ => false,
                }
        })
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::from("theta\tdelay\tn_ec\tcontrast\tslope\tsensing_time\tsensitivity\n");
        for c in &self.cases {
            let delay = c.delay.map(|d| format!("{d:?}")).unwrap_or_else(|| "avg".into());
            let _ = writeln!(
                out,
                "{:?}\t{delay}\t{}\t{:?}\t{:?}\t{:?}\t{:?}",
                c.theta, c.n_ec, c.contrast, c.slope, c.sensing_time, c.sensitivity
            );
        }
        out
    }
}

/// Contrast and phase slope of a response curve `P(b)`.
fn response(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let fit = match estimation::fit_curve(xs, ys, None, FitModel::Single, None) {
        Ok(f) => f,
        Err(Error::FitNotConverged { best, .. }) => *best,
        Err(_) => return (0.0, 0.0),
    };
    let spread = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    if !fit.gamma_identified || spread < 1e-9 {
        return (0.0, 0.0);
    }
    (fit.contrast(), fit.omega().abs())
}

fn bitflip_case(
    theta: f64,
    delay: Option<f64>,
    n_ec: u8,
    curve: CurveData,
    sensing_time: f64,
) -> BitflipCase {
    let (contrast, slope) = response(&curve.x, &curve.y_exact);
    let sensitivity = if contrast > 1e-9 && slope > 0.0 {
        sensing_time.sqrt() / (contrast * slope)
    } else {
        f64::INFINITY
    };
    BitflipCase {
        theta,
        delay,
        n_ec,
        curve,
        contrast,
        slope,
        sensing_time,
        sensitivity,
    }
}

pub fn run_bitflip_cpmg(cfg: &ExperimentConfig) -> Result<BitflipReport> {
    cfg.validate()?;
    let b = &cfg.bitflip_cpmg;
    let spacing = b.spacing();
    let resonant = sequences::resonant_spacing(b.frequency);
    if (spacing - resonant).abs() > 1e-9 * resonant {
        log::warn!(
            "CPMG spacing {spacing:e} s is not resonant with the {:e} Hz signal (resonant spacing {resonant:e} s)",
            b.frequency
        );
    }
    let g = cfg.gates();
    let ev = cfg.evolver(b.frame);
    let amps = b.amplitudes.values();
    let mut cases = Vec::new();
    let mut id = 300u64;

    let mut run = |theta: f64, delay: f64, n_ec: u8, label: String| -> Result<CurveData> {
        id += 1;
        let spec = CurveSpec {
            label,
            stream_id: id,
            shots: b.shots,
            cfg,
            metadata: vec![
                ("theta".into(), format!("{theta:?}")),
                ("delay".into(), format!("{delay:?}")),
                ("n_ec".into(), n_ec.to_string()),
                ("x_unit".into(), "Hz".into()),
            ],
        };
        build_curve(spec, &amps, |amp| {
            let s = bitflip_schedule(&g, b, amp, n_ec, theta, delay)?;
            reported_up(&s, &ev, &cfg.readout)
        })
    };

    for &n in &b.n_ec {
        let t = blocks_for(n) as f64 * b.n_pulses as f64 * spacing;
        let curve = run(0.0, 0.0, n, format!("bitflip_reference_nec{n}"))?;
        cases.push(bitflip_case(0.0, Some(0.0), n, curve, t));
    }
    for &theta in &b.thetas {
        for &n in &b.n_ec {
            let t = blocks_for(n) as f64 * b.n_pulses as f64 * spacing;
            let mut per_delay = Vec::new();
            for &d in &b.delays {
                let curve = run(theta, d, n, format!("bitflip_theta{theta:.4}_delay{d:e}_nec{n}"))?;
                per_delay.push(curve.clone());
                cases.push(bitflip_case(theta, Some(d), n, curve, t));
            }
            // Error time spread uniformly over the delay grid.
            let m = per_delay.len() as f64;
            let mut avg = per_delay[0].clone();
            avg.label = format!("bitflip_theta{theta:.4}_avg_nec{n}");
            for i in 0..amps.len() {
                avg.y_exact[i] = per_delay.iter().map(|c| c.y_exact[i]).sum::<f64>() / m;
                avg.y_sampled[i] = per_delay.iter().map(|c| c.y_sampled[i]).sum::<f64>() / m;
                avg.y_err[i] = (per_delay.iter().map(|c| c.y_err[i].powi(2)).sum::<f64>()).sqrt() / m;
            }
            avg.metadata.retain(|(k, _)| k != "delay");
            avg.metadata.push(("delay".into(), "avg".into()));
            cases.push(bitflip_case(theta, None, n, avg, t));
        }
    }
    Ok(BitflipReport { cases })
}

/// Nuclear coherence after `k = 0..=resets` optical resets. The exact
/// column is `2|ρ_↑↓|`; the sampled column converts the coherence to a
/// population with a nuclear −π/2 and estimates `2P(↑) − 1` from shots.
pub fn run_reset_coherence(cfg: &ExperimentConfig) -> Result<CurveData> {
    cfg.validate()?;
    let r = &cfg.reset_coherence;
    let prepare = Rotation::nuclear(Axis::Y, FRAC_PI_2).unitary()?;
    let convert = Rotation::nuclear(Axis::Y, -FRAC_PI_2).unitary()?;
    let start = DensityMatrix::basis(crate::hilbert::BasisLabel::ALL[0]).transform(&prepare);
    let mut states = Vec::with_capacity(r.resets + 1);
    let mut rho = start;
    states.push(rho);
    for _ in 0..r.resets {
        rho = channels::optical_reset(&rho, &cfg.reset);
        states.push(rho);
    }
    let rows: Vec<(f64, f64, f64)> = states
        .par_iter()
        .enumerate()
        .map(|(k, rho)| {
            let coh = 2.0 * rho.partial_trace_electron()[(0, 1)].norm();
            let p = channels::p_up(&rho.transform(&convert));
            let (ps, e) = sample_probability(p, r.shots, cfg.seed, 400, k);
            (coh, 2.0 * ps - 1.0, 2.0 * e)
        })
        .collect();
    Ok(CurveData {
        label: "reset_coherence".into(),
        x: (0..=r.resets).map(|k| k as f64).collect(),
        y_exact: rows.iter().map(|r| r.0).collect(),
        y_sampled: rows.iter().map(|r| r.1).collect(),
        y_err: rows.iter().map(|r| r.2).collect(),
        shots: r.shots,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        metadata: vec![
            ("eta".into(), format!("{:?}", cfg.reset.eta)),
            ("x_unit".into(), "resets".into()),
        ],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoNoiseCurves {
    pub no_ec: CurveData,
    pub ec: CurveData,
    /// Beat frequency checked in the spectra, `A/2`.
    pub beat_frequency: f64,
    /// Blackman-windowed power within one bin of the beat, relative to all
    /// non-DC power.
    pub beat_power_no_ec: f64,
    pub beat_power_ec: f64,
}

/// Resonant drive only: no dephasing, ideal gates, ideal reset and readout.
/// n_ec ∈ {0, 2}.
pub fn run_no_noise_sim(cfg: &ExperimentConfig) -> Result<NoNoiseCurves> {
    cfg.validate()?;
    let c = &cfg.no_noise;
    let g = GateSet {
        cz: cfg.gates.cz,
        ..GateSet::ideal(cfg.hamiltonian)
    };
    let ev = cfg.evolver(c.frame).with_noise(false);
    let readout = ReadoutModel::ideal();
    let xs = c.times.values();
    let beat = cfg.hamiltonian.a.abs() / 2.0;
    let make = |n: u8| -> Result<CurveData> {
        let spec = CurveSpec {
            label: format!("no_noise_nec{n}"),
            stream_id: 500 + n as u64,
            shots: c.shots,
            cfg,
            metadata: vec![("n_ec".into(), n.to_string()), ("x_unit".into(), "s".into())],
        };
        build_curve(spec, &xs, |t| {
            let s = qsec_schedule(&g, c.rabi, t, n, &[])?;
            reported_up(&s, &ev, &readout)
        })
    };
    let mut no_ec = make(0)?;
    let mut ec = make(2)?;
    let beat_power_no_ec = estimation::band_power_fraction(&no_ec.x, &no_ec.y_exact, beat, 1);
    let beat_power_ec = estimation::band_power_fraction(&ec.x, &ec.y_exact, beat, 1);
    no_ec.metadata.push(("beat_power".into(), format!("{beat_power_no_ec:?}")));
    ec.metadata.push(("beat_power".into(), format!("{beat_power_ec:?}")));
    Ok(NoNoiseCurves {
        no_ec,
        ec,
        beat_frequency: beat,
        beat_power_no_ec,
        beat_power_ec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.qsec_rabi.times = Grid::linear(0.0, 60e-6, 25);
        c.single_error.times = Grid::linear(0.0, 40e-6, 21);
        c.bitflip_cpmg.amplitudes = Grid::linear(0.0, 160e3, 21);
        c.no_noise.times = Grid::linear(0.0, 100e-6, 41);
        c
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = ExperimentConfig::from_toml_str("seed = 5\n[qsec_rabi]\nn_ec = [2]\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.qsec_rabi.n_ec, vec![2]);
        assert_eq!(c.hamiltonian.a, 50e3);
        assert_eq!(c.dephasing.law.t, 40e-6);
        assert_eq!(c.readout.fidelity_read, 0.98);
    }

    #[test]
    fn rejects_bad_configs() {
        let err = |s: &str| match ExperimentConfig::from_toml_str(s) {
            Err(Error::Config { field, message }) => (field, message),
            other => panic!("expected config error, got {other:?}"),
        };
        let (f, m) = err("[qsec_rabi]\nn_ec = [0, 3]\n");
        assert_eq!(f, "qsec_rabi.n_ec");
        assert!(m.contains("two rounds"));
        assert_eq!(err("[dephasing]\nt = -1e-6\n").0, "dephasing.t");
        assert_eq!(err("[qsec_rabi]\nshots = 0\n").0, "qsec_rabi.shots");
        assert_eq!(err("[qsec_rabi]\ntimes = [2e-6, 1e-6]\n").0, "qsec_rabi.times");
        assert_eq!(err("[qsec_rabi]\ntimes = []\n").0, "qsec_rabi.times");
        assert_eq!(err("[bitflip_cpmg]\ndelays = [3e-6]\n").0, "bitflip_cpmg.delays");
        assert_eq!(err("[qsec_rabi]\nblock_fractions = [0.5, 0.5]\n").0, "qsec_rabi.block_fractions");
        assert_eq!(err("nonsense = 1\n").0, "toml");
    }

    #[test]
    fn grid_values() {
        assert_eq!(Grid::linear(0.0, 1.0, 3).values(), vec![0.0, 0.5, 1.0]);
        assert_eq!(Grid::linear(2.0, 9.0, 1).values(), vec![2.0]);
        assert_eq!(Grid::Values(vec![1.0, 4.0]).values(), vec![1.0, 4.0]);
    }

    #[test]
    fn curve_table_round_trip() {
        let cfg = small();
        let curves = run_qsec_rabi(&cfg).unwrap();
        let c = &curves[0];
        let back = CurveData::from_table(&c.to_table()).unwrap();
        assert_eq!(&back, c);
        assert!(CurveData::from_table("1\t2\t3\t4\n").is_err());
    }

    #[test]
    fn qsec_rabi_is_deterministic_and_valid() {
        let cfg = small();
        let a = run_qsec_rabi(&cfg).unwrap();
        let b = run_qsec_rabi(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for c in &a {
            assert!(c.y_exact.iter().chain(&c.y_sampled).all(|y| (0.0..=1.0).contains(y)));
            assert!(c.y_err.iter().all(|e| *e > 0.0));
            assert_eq!(c.config_hash, cfg.hash());
        }
        let mut other = cfg.clone();
        other.seed = 1;
        let c = run_qsec_rabi(&other).unwrap();
        assert_eq!(c[0].y_exact, a[0].y_exact);
        assert_ne!(c[0].y_sampled, a[0].y_sampled);
    }

    #[test]
    fn ideal_start_is_extremal() {
        let mut cfg = small();
        cfg.readout = ReadoutModel::ideal();
        cfg.reset = ResetModel::ideal();
        cfg.dephasing.enabled = false;
        for c in run_qsec_rabi(&cfg).unwrap() {
            assert!((c.y_exact[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_converges_at_root_shots_rate() {
        let mut cfg = small();
        cfg.qsec_rabi.n_ec = vec![2];
        let idx = [3, 11, 19];
        let mut ratio = Vec::new();
        for shots in [1_000u64, 100_000] {
            cfg.qsec_rabi.shots = shots;
            let mut dev = 0.0;
            for seed in 0..20 {
                cfg.seed = seed;
                let c = &run_qsec_rabi(&cfg).unwrap()[0];
                dev += idx.iter().map(|&i| (c.y_sampled[i] - c.y_exact[i]).powi(2)).sum::<f64>();
            }
            ratio.push((dev / 60.0).sqrt() * (shots as f64).sqrt());
        }
        // Same scaled RMS deviation at both shot counts.
        assert!((ratio[0] / ratio[1] - 1.0).abs() < 0.35, "{ratio:?}");
    }

    fn fitted_gamma(c: &CurveData) -> f64 {
        estimation::fit_curve(&c.x, &c.y_exact, None, FitModel::Single, None).unwrap().gamma()
    }

    #[test]
    fn ec_benefit_is_monotone() {
        let mut cfg = ExperimentConfig::default();
        cfg.qsec_rabi.times = Grid::linear(0.0, 200e-6, 121);
        let curves = run_qsec_rabi(&cfg).unwrap();
        let g: Vec<f64> = curves.iter().map(fitted_gamma).collect();
        assert!(g[2] < g[1] && g[1] < g[0], "{g:?}");
    }

    #[test]
    fn gate_penalty_lowers_contrast_not_frequency() {
        let mut cfg = ExperimentConfig::default();
        cfg.qsec_rabi.times = Grid::linear(0.0, 100e-6, 121);
        cfg.qsec_rabi.n_ec = vec![2];
        let fit = |c: &CurveData| estimation::fit_curve(&c.x, &c.y_exact, None, FitModel::Single, None).unwrap();
        let clean = fit(&run_qsec_rabi(&cfg).unwrap()[0]);
        cfg.gates.entangling_fidelity = 0.8;
        let noisy = fit(&run_qsec_rabi(&cfg).unwrap()[0]);
        assert!(noisy.contrast() < 0.9 * clean.contrast());
        assert!((noisy.omega() / clean.omega() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn single_error_examples() {
        let mut cfg = small();
        let r = run_single_phase_error(&cfg).unwrap();
        let diff = r
            .ec_with_error
            .y_exact
            .iter()
            .zip(&r.ec_error_free.y_exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
        assert!(r.no_ec_with_error.exact_contrast() <= 1e-6);
        assert!(r.no_ec_error_free.exact_contrast() > 0.5);

        cfg.single_error.angle = 0.0;
        let z = run_single_phase_error(&cfg).unwrap();
        for (a, b) in z.no_ec_with_error.y_exact.iter().zip(&z.no_ec_error_free.y_exact) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bitflip_examples() {
        let mut cfg = small();
        cfg.bitflip_cpmg.thetas = vec![PI];
        cfg.bitflip_cpmg.n_ec = vec![0, 1];
        let r = run_bitflip_cpmg(&cfg).unwrap();
        let reference = |n| r.find(0.0, Some(0.0), n).unwrap().contrast;
        let off = r.find(PI, Some(0.0), 0).unwrap();
        let on = r.find(PI, Some(0.0), 1).unwrap();
        assert!(off.contrast <= 0.05 * reference(0));
        assert!(on.contrast >= 0.99 * reference(1), "{} vs {}", on.contrast, reference(1));
        assert!(off.sensitivity / on.sensitivity > 10.0);
        let s: Vec<f64> = cfg.bitflip_cpmg.delays.iter().map(|&d| r.find(PI, Some(d), 1).unwrap().sensitivity).collect();
        assert!(s.windows(2).all(|w| w[1] > w[0]), "{s:?}");
        assert!(r.find(PI, None, 1).is_some());
    }

    #[test]
    fn reference_slope_matches_cpmg_phase() {
        let mut cfg = small();
        cfg.dephasing.enabled = false;
        cfg.readout = ReadoutModel::ideal();
        cfg.bitflip_cpmg.thetas = vec![PI];
        cfg.bitflip_cpmg.delays = vec![0.0];
        cfg.bitflip_cpmg.n_ec = vec![0];
        let r = run_bitflip_cpmg(&cfg).unwrap();
        let c = r.find(0.0, Some(0.0), 0).unwrap();
        let want = sequences::cpmg_phase(1.0, c.sensing_time);
        assert!((c.slope / want - 1.0).abs() < 1e-3, "{} vs {want}", c.slope);
        assert!((c.contrast - 1.0).abs() < 1e-3);
    }

    #[test]
    fn reset_coherence_examples() {
        let mut cfg = small();
        let c = run_reset_coherence(&cfg).unwrap();
        assert!((c.y_exact[0] - 1.0).abs() < 1e-12);
        assert!((c.y_exact[20] - 0.95).abs() < 1e-12);
        cfg.reset = ResetModel::ideal();
        let flat = run_reset_coherence(&cfg).unwrap();
        assert!(flat.y_exact.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn no_noise_examples() {
        let r = run_no_noise_sim(&ExperimentConfig::default()).unwrap();
        assert!(r.beat_power_no_ec < 1e-6, "{}", r.beat_power_no_ec);
        assert!(r.beat_power_ec > 0.05, "{}", r.beat_power_ec);
        assert!((r.no_ec.y_exact[0] - 1.0).abs() < 1e-12);
        assert!((r.ec.y_exact[0] - 1.0).abs() < 1e-12);
    }
}
