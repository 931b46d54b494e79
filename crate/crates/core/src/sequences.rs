//! Protocol building blocks assembled into [`PulseSchedule`]s.
//!
//! Two codes are used.
//!
//! * Phase code, for MW sensing: code space `{|+↑⟩, |−↓⟩}`, error space
//!   `{|−↑⟩, |+↓⟩}` reached by an electron phase flip. The encoder
//!   prepares `(|+↑⟩ + |−↓⟩)/√2` from `|0↑⟩`.
//! * Bit code, for CPMG sensing of an AC field: code space
//!   `{|0↑⟩, |−1↓⟩}`, error space reached by an electron y-rotation.
//!
//! The entangling primitive is the controlled phase `diag(1, 1, 1, −1)`,
//! produced exactly (up to a global phase) by free evolution under the
//! default `H0` for `1/(2A)`. Its ideal form is a π z-rotation of the
//! electron conditioned on nuclear ↓ followed by a nuclear z-rotation by
//! π/2 that removes the local phase.
//!
//! Readout convention: an accumulated code phase Φ is read as
//! `P(↑) = (1 + cos Φ)/2`, so Φ = 0 gives `P(↑) = 1`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::channels::{self, ResetModel};
use crate::dynamics::{
    AcSignal, Axis, ClockMode, Condition, Evolver, HamiltonianParams, Rotation, Segment,
};
use crate::hilbert::{DensityMatrix, ElectronState, NuclearState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Step {
    Segment(Segment),
    /// Electron z-rotation by `angle` (π is a phase flip).
    PhaseError { angle: f64 },
    /// Electron y-rotation by `theta`.
    BitFlip { theta: f64 },
    Reset(ResetModel),
    /// `keep·ρ + (1 − keep)·1/4`.
    Depolarize { keep: f64 },
}

impl Step {
    pub fn duration(&self) -> f64 {
        match self {
            Step::Segment(s) => s.duration(),
            _ => 0.0,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Step::Segment(s) => s.describe(),
            Step::PhaseError { angle } => format!("phase_error angle={angle:.6}"),
            Step::BitFlip { theta } => format!("bit_flip theta={theta:.6}"),
            Step::Reset(r) => format!("optical_reset eta={:.6}", r.eta),
            Step::Depolarize { keep } => format!("depolarize keep={keep:.6}"),
        }
    }
}

impl From<Segment> for Step {
    fn from(s: Segment) -> Self {
        Step::Segment(s)
    }
}

impl From<Rotation> for Step {
    fn from(r: Rotation) -> Self {
        Step::Segment(Segment::Rotation(r))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Marker {
    pub name: String,
    /// Index of the step that follows the marker.
    pub index: usize,
    pub time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PulseSchedule {
    steps: Vec<Step>,
    markers: Vec<Marker>,
}

impl PulseSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    pub fn marker(&self, name: &str) -> Option<&Marker> {
        self.markers.iter().find(|m| m.name == name)
    }

    pub fn duration(&self) -> f64 {
        self.steps.iter().map(Step::duration).sum()
    }

    pub fn push(&mut self, step: impl Into<Step>) -> &mut Self {
        self.steps.push(step.into());
        self
    }

    /// Place a named marker at the current end of the schedule.
    pub fn mark(&mut self, name: impl Into<String>) -> &mut Self {
        let time = self.duration();
        self.markers.push(Marker {
            name: name.into(),
            index: self.steps.len(),
            time,
        });
        self
    }

    pub fn append(&mut self, other: &PulseSchedule) -> &mut Self {
        let (offset, t0) = (self.steps.len(), self.duration());
        self.steps.extend_from_slice(&other.steps);
        self.markers.extend(other.markers.iter().map(|m| Marker {
            name: m.name.clone(),
            index: m.index + offset,
            time: m.time + t0,
        }));
        self
    }

    /// Insert `step` at the named marker. Zero-duration insertions leave
    /// every marker time unchanged.
    pub fn insert_at(&mut self, marker: &str, step: impl Into<Step>) -> Result<()> {
        let step = step.into();
        let at = self
            .marker(marker)
            .ok_or_else(|| Error::UnknownMarker(marker.to_string()))?
            .index;
        let dt = step.duration();
        self.steps.insert(at, step);
        for m in &mut self.markers {
            if m.index > at || (m.index == at && m.name != marker) {
                m.index += 1;
                m.time += dt;
            }
        }
        Ok(())
    }

    /// Human-readable listing, one step per line with its start time.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        let mut t = 0.0;
        for (i, step) in self.steps.iter().enumerate() {
            for m in self.markers.iter().filter(|m| m.index == i) {
                let _ = writeln!(out, "# marker {} t={:.6e}", m.name, m.time);
            }
            let _ = writeln!(out, "{i:>3} t={t:.6e} {}", step.describe());
            t += step.duration();
        }
        for m in self.markers.iter().filter(|m| m.index >= self.steps.len()) {
            let _ = writeln!(out, "# marker {} t={:.6e}", m.name, m.time);
        }
        out
    }

    /// Execute the schedule from dephasing-clock time `t_clock`.
    pub fn run(
        &self,
        rho: &DensityMatrix,
        evolver: &Evolver,
        t_clock: f64,
    ) -> Result<(DensityMatrix, f64)> {
        let mut rho = *rho;
        let mut clock = t_clock;
        for step in &self.steps {
            match step {
                Step::Segment(s) => {
                    let (r, c) = evolver.evolve_segment(&rho, s, clock)?;
                    rho = r;
                    clock = c;
                }
                Step::PhaseError { angle } => rho = channels::phase_error(&rho, *angle),
                Step::BitFlip { theta } => rho = channels::bit_flip(&rho, *theta),
                Step::Reset(model) => {
                    rho = channels::optical_reset(&rho, model);
                    if evolver.law().clock_mode == ClockMode::PerReset {
                        clock = 0.0;
                    }
                }
                Step::Depolarize { keep } => rho = channels::depolarize(&rho, *keep),
            }
        }
        Ok((rho, clock))
    }
}

impl FromIterator<Step> for PulseSchedule {
    fn from_iter<T: IntoIterator<Item = Step>>(iter: T) -> Self {
        PulseSchedule {
            steps: iter.into_iter().collect(),
            markers: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CzImplementation {
    /// Instantaneous conditional rotations.
    #[default]
    Ideal,
    /// Free evolution for `1/(2A)`; exact only in the lab frame.
    Hyperfine,
}

/// Everything the gate builders need to know.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateSet {
    pub params: HamiltonianParams,
    pub cz: CzImplementation,
    /// Depolarizing keep fraction applied after every entangling gate.
    pub cz_keep: f64,
    pub reset: ResetModel,
}

impl GateSet {
    pub fn ideal(params: HamiltonianParams) -> Self {
        GateSet {
            params,
            cz: CzImplementation::Ideal,
            cz_keep: 1.0,
            reset: ResetModel::ideal(),
        }
    }
}

fn rx(angle: f64) -> Rotation {
    Rotation::electron(Axis::X, angle)
}

/// Controlled phase `diag(1, 1, 1, −1)` up to a global phase.
pub fn cz(g: &GateSet) -> Result<PulseSchedule> {
    let wait = g.params.cnot_wait()?;
    let mut s = PulseSchedule::new();
    match g.cz {
        CzImplementation::Ideal => {
            s.push(Rotation::electron(Axis::Z, PI).when(Condition::Nuclear(NuclearState::Down)));
            s.push(Rotation::nuclear(Axis::Z, FRAC_PI_2));
        }
        CzImplementation::Hyperfine => {
            s.push(Segment::Free {
                duration: wait,
                noise: true,
                signal: None,
            });
        }
    }
    if g.cz_keep < 1.0 {
        s.push(Step::Depolarize { keep: g.cz_keep });
    }
    Ok(s)
}

/// Electron π/2, controlled phase, electron π/2: a flip of the electron
/// conditioned on nuclear ↓ (acting as −σ_y on that branch). With
/// [`CzImplementation::Hyperfine`] this is the literal half-hyperfine-period
/// gate. It is its own inverse.
pub fn cnot_z(g: &GateSet) -> Result<PulseSchedule> {
    let mut s = PulseSchedule::new();
    s.push(rx(-FRAC_PI_2));
    s.append(&cz(g)?);
    s.push(rx(FRAC_PI_2));
    Ok(s)
}

/// Phase-code encoder from `|0↑⟩`: nuclear π/2 (RF, about y), electron −π/2
/// about x (`|0⟩ → |+⟩`), controlled phase.
pub fn encode(g: &GateSet) -> Result<PulseSchedule> {
    let mut s = PulseSchedule::new();
    s.push(Rotation::nuclear(Axis::Y, FRAC_PI_2));
    s.push(rx(-FRAC_PI_2));
    s.append(&cz(g)?);
    s.mark("encoded");
    Ok(s)
}

/// Controlled phase then electron π/2. Code-space input leaves the electron
/// in |0⟩ with the phase on the nucleus; error-space input leaves it in |−1⟩.
pub fn decode(g: &GateSet) -> Result<PulseSchedule> {
    let mut s = cz(g)?;
    s.push(rx(FRAC_PI_2));
    Ok(s)
}

/// Decode, optical reset, re-entangle.
pub fn ec_round(g: &GateSet) -> Result<PulseSchedule> {
    let mut s = PulseSchedule::new();
    s.mark("ec_start");
    s.append(&decode(g)?);
    s.push(Step::Reset(g.reset));
    s.push(rx(-FRAC_PI_2));
    s.append(&cz(g)?);
    s.mark("ec_end");
    Ok(s)
}

/// Nuclear −π/2 about y, only in the electron-|0⟩ branch.
pub fn readout_map() -> PulseSchedule {
    let mut s = PulseSchedule::new();
    s.push(Rotation::nuclear(Axis::Y, -FRAC_PI_2).when(Condition::Electron(ElectronState::E0)));
    s
}

/// Resonant MW drive about y. Within the phase code this advances the code
/// phase at `2π·rabi` and reverses direction in the error space.
pub fn sensing_block(duration: f64, rabi: f64) -> PulseSchedule {
    let mut s = PulseSchedule::new();
    s.push(Segment::mw(duration, rabi, FRAC_PI_2));
    s
}

/// Bit-code encoder: nuclear π/2 then [`cnot_z`].
pub fn encode_bit(g: &GateSet) -> Result<PulseSchedule> {
    let mut s = PulseSchedule::new();
    s.push(Rotation::nuclear(Axis::Y, FRAC_PI_2));
    s.append(&cnot_z(g)?);
    s.mark("encoded");
    Ok(s)
}

pub fn decode_bit(g: &GateSet) -> Result<PulseSchedule> {
    cnot_z(g)
}

pub fn ec_round_bit(g: &GateSet) -> Result<PulseSchedule> {
    let mut s = PulseSchedule::new();
    s.mark("ec_start");
    s.append(&decode_bit(g)?);
    s.push(Step::Reset(g.reset));
    s.append(&cnot_z(g)?);
    s.mark("ec_end");
    Ok(s)
}

/// AC field seen during CPMG.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    /// Field amplitude b (Hz).
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

pub const ERROR_MARKER: &str = "error";

/// CPMG block `τ/2 − π − τ − π − … − π − τ/2` with instantaneous x pulses.
///
/// `t_signal` is the signal time at the start of the block (phase locking).
/// A marker named [`ERROR_MARKER`] sits `error_delay` before the end of the
/// last free interval.
pub fn cpmg_block(
    n_pulses: usize,
    spacing: f64,
    signal: &SignalSpec,
    t_signal: f64,
    error_delay: f64,
) -> Result<PulseSchedule> {
    if n_pulses == 0 {
        return Err(Error::InvalidArgument("CPMG needs at least one pulse".into()));
    }
    if !(0.0..=spacing / 2.0).contains(&error_delay) {
        return Err(Error::InvalidArgument(format!(
            "error delay {error_delay:e} s lies outside the last free interval ({:e} s)",
            spacing / 2.0
        )));
    }
    let mut s = PulseSchedule::new();
    let mut t = t_signal;
    let free = |s: &mut PulseSchedule, d: f64, t: &mut f64| {
        if d > 0.0 {
            s.push(Segment::Free {
                duration: d,
                noise: true,
                signal: Some(AcSignal {
                    amplitude: signal.amplitude,
                    frequency: signal.frequency,
                    phase: signal.phase,
                    t_offset: *t,
                }),
            });
            *t += d;
        }
    };
    free(&mut s, spacing / 2.0, &mut t);
    for k in 0..n_pulses {
        s.push(rx(PI));
        let d = if k + 1 == n_pulses { spacing / 2.0 - error_delay } else { spacing };
        free(&mut s, d, &mut t);
    }
    s.mark(ERROR_MARKER);
    free(&mut s, error_delay, &mut t);
    Ok(s)
}

/// Resonant CPMG spacing `1/(2f)`.
pub fn resonant_spacing(frequency: f64) -> f64 {
    1.0 / (2.0 * frequency)
}

/// Phase accumulated by a phase-locked resonant CPMG block,
/// `(2/π)·(2π·b)·t_total`.
pub fn cpmg_phase(amplitude: f64, t_total: f64) -> f64 {
    2.0 / PI * TAU * amplitude * t_total
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseBudget {
    pub phi_code: f64,
    pub phi_error: f64,
    pub delta_phi: f64,
}

/// Phase split between code and error space when a flip at `t_error` is
/// corrected at `t_correct` under a resonant MW drive. The error space
/// accumulates with reversed sign.
pub fn phase_mismatch(rabi: f64, t_error: f64, t_correct: f64) -> Result<PhaseBudget> {
    if t_error > t_correct {
        return Err(Error::InvalidArgument(format!(
            "error time {t_error:e} s is after the correction at {t_correct:e} s"
        )));
    }
    let phi_code = TAU * rabi * (t_correct - t_error);
    let phi_error = -phi_code;
    Ok(PhaseBudget {
        phi_code,
        phi_error,
        delta_phi: (phi_code - phi_error).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{optical_reset, p_up};
    use crate::dynamics::{DephasingLaw, Frame};
    use crate::hilbert::{
        basis_ket, code_state, code_state_with_phase, fidelity, random_density_matrix, BasisLabel,
        Ket, Mat4, Operator, C64,
    };
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const E0_UP: BasisLabel = BasisLabel::new(ElectronState::E0, NuclearState::Up);

    fn ideal() -> GateSet {
        GateSet::ideal(HamiltonianParams::default())
    }

    fn quiet(frame: Frame) -> Evolver {
        Evolver::new(&HamiltonianParams::default(), frame, DephasingLaw::default()).with_noise(false)
    }

    fn run(s: &PulseSchedule, rho: &DensityMatrix) -> DensityMatrix {
        s.run(rho, &quiet(Frame::Tracked), 0.0).unwrap().0
    }

    fn max_abs(m: &Mat4) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Product of exact step unitaries; free evolution is `exp(−iH0·t)`
    /// with diagonal `H0`.
    fn unitary_of(s: &PulseSchedule, frame: Frame) -> Mat4 {
        let h0 = match frame {
            Frame::Lab => crate::dynamics::build_h0(&HamiltonianParams::default()).0,
            Frame::Tracked => Mat4::zeros(),
        };
        let mut u = Mat4::identity();
        for step in s.steps() {
            let m = match step {
                Step::Segment(Segment::Rotation(r)) => r.unitary().unwrap(),
                Step::Segment(Segment::Free { duration, signal: None, .. }) => Mat4::from_diagonal(
                    &Ket::from_fn(|i, _| C64::from_polar(1.0, -h0[(i, i)].re * duration)),
                ),
                other => panic!("not a unitary step: {}", other.describe()),
            };
            u = m * u;
        }
        u
    }

    #[test]
    fn cz_forms_agree() {
        let g = ideal();
        let hyper = GateSet { cz: CzImplementation::Hyperfine, ..g };
        let want = Mat4::from_diagonal(&crate::hilbert::Ket::new(
            C64::from(1.0),
            C64::from(1.0),
            C64::from(1.0),
            C64::from(-1.0),
        ));
        for gs in [g, hyper] {
            let u = unitary_of(&cz(&gs).unwrap(), Frame::Lab);
            let phase = u[(0, 0)];
            assert_abs_diff_eq!(phase.norm(), 1.0, epsilon = 1e-12);
            assert!(max_abs(&(u / phase - want)) < 1e-12);
        }
        assert!(matches!(cz(&GateSet::ideal(HamiltonianParams::zero())), Err(Error::ZeroCoupling)));
    }

    #[test]
    fn cnot_wait_is_ten_us() {
        let g = GateSet { cz: CzImplementation::Hyperfine, ..ideal() };
        let s = cnot_z(&g).unwrap();
        assert_abs_diff_eq!(s.duration(), 10e-6, epsilon = 1e-18);
        assert!(matches!(
            cnot_z(&GateSet { params: HamiltonianParams::zero(), ..g }),
            Err(Error::ZeroCoupling)
        ));
    }

    #[test]
    fn cnot_truth_table() {
        // On ↑ the fragment is Rx(π/2)·Rx(−π/2) = 1. On ↓ the electron sees
        // Rx(π/2)·σ_z·Rx(−π/2) = −σ_y, which sends |0⟩ to −i|−1⟩.
        let g = GateSet { cz: CzImplementation::Hyperfine, ..ideal() };
        let u = unitary_of(&cnot_z(&g).unwrap(), Frame::Lab);
        let phase = u[(0, 0)];
        let col_up = u.column(0) / phase;
        let col_down = u.column(1) / phase;
        assert_abs_diff_eq!(col_up[0].norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(col_down[3].norm(), 1.0, epsilon = 1e-12);
        assert!(col_down[1].norm() < 1e-12);
        assert!(Operator(u).is_unitary(1e-10));
        let twice = u * u;
        let p = twice[(0, 0)];
        assert!(max_abs(&(twice / p - Mat4::identity())) < 1e-9);
    }

    #[test]
    fn encode_reaches_code_state() {
        let rho = DensityMatrix::basis(E0_UP);
        let out = run(&encode(&ideal()).unwrap(), &rho);
        assert_abs_diff_eq!(fidelity(&out, &code_state()), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.purity(), 1.0, epsilon = 1e-12);

        // The literal hyperfine gate gives the same state in the lab frame.
        let g = GateSet { cz: CzImplementation::Hyperfine, ..ideal() };
        let out = encode(&g).unwrap().run(&rho, &quiet(Frame::Lab), 0.0).unwrap().0;
        assert_abs_diff_eq!(fidelity(&out, &code_state()), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn encode_decode_round_trip() {
        let g = ideal();
        let rho = DensityMatrix::basis(E0_UP);
        let mut s = encode(&g).unwrap();
        s.append(&decode(&g).unwrap());
        let out = run(&s, &rho);
        assert_abs_diff_eq!(out.electron_populations()[0], 1.0, epsilon = 1e-12);
        // Nucleus is back in (↑ + ↓)/√2 before mapping; undo the RF pulse.
        let mut back = s.clone();
        back.push(Rotation::nuclear(Axis::Y, -FRAC_PI_2));
        assert_abs_diff_eq!(run(&back, &rho).population(E0_UP), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn decode_maps_phase_to_nucleus() {
        let g = ideal();
        for phi in [0.0, PI / 4.0, FRAC_PI_2] {
            let rho = DensityMatrix::pure(&code_state_with_phase(phi)).unwrap();
            let out = run(&decode(&g).unwrap(), &rho);
            assert_abs_diff_eq!(out.electron_populations()[0], 1.0, epsilon = 1e-12);
            let n = out.partial_trace_electron();
            // ρ_n[0,1] = ⟨↑|ρ|↓⟩ = e^{−iΦ}/2.
            assert_abs_diff_eq!(n[(0, 1)].norm(), 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(-n[(0, 1)].arg(), phi, epsilon = 1e-9);
        }
        let flipped = channels::phase_flip(&DensityMatrix::pure(&code_state()).unwrap());
        let out = run(&decode(&g).unwrap(), &flipped);
        assert_abs_diff_eq!(out.electron_populations()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ec_round_examples() {
        let g = ideal();
        let code = DensityMatrix::pure(&code_state_with_phase(0.7)).unwrap();
        let ec = ec_round(&g).unwrap();
        let out = run(&ec, &code);
        assert!(max_abs(&(out.matrix() - code.matrix())) < 1e-9);

        let out = run(&ec, &channels::phase_flip(&code));
        assert_abs_diff_eq!(fidelity(&out, &code_state_with_phase(0.7)), 1.0, epsilon = 1e-9);

        let leaky = GateSet { reset: ResetModel::default(), ..g };
        let mut two = ec_round(&leaky).unwrap();
        two.append(&ec_round(&leaky).unwrap());
        let out = run(&two, &code);
        let start = run(&decode(&g).unwrap(), &code).partial_trace_electron()[(0, 1)].norm();
        let after = run(&decode(&g).unwrap(), &out).partial_trace_electron()[(0, 1)].norm();
        assert_abs_diff_eq!(after / start, ResetModel::default().eta.powi(2), epsilon = 1e-12);
    }

    #[test]
    fn readout_map_convention() {
        let g = ideal();
        for (phi, want) in [(0.0, 1.0), (FRAC_PI_2, 0.5), (PI, 0.0)] {
            let rho = DensityMatrix::pure(&code_state_with_phase(phi)).unwrap();
            let mut s = decode(&g).unwrap();
            s.append(&readout_map());
            assert_abs_diff_eq!(p_up(&run(&s, &rho)), want, epsilon = 1e-9);
        }
        // Error branch: electron in |−1⟩, phase not converted.
        for phi in [0.0, 1.0, 2.0] {
            let rho = channels::phase_flip(&DensityMatrix::pure(&code_state_with_phase(phi)).unwrap());
            let mut s = decode(&g).unwrap();
            s.append(&readout_map());
            assert_abs_diff_eq!(p_up(&run(&s, &rho)), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn sensing_advances_code_phase() {
        let g = ideal();
        let rabi = 20e3;
        let ev = quiet(Frame::Tracked);
        let code = DensityMatrix::pure(&code_state()).unwrap();
        assert_eq!(sensing_block(0.0, rabi).run(&code, &ev, 0.0).unwrap().0, code);
        for t in [5e-6, 12.5e-6, 31e-6] {
            let (out, _) = sensing_block(t, rabi).run(&code, &ev, 0.0).unwrap();
            let phi = TAU * rabi * t;
            assert_abs_diff_eq!(fidelity(&out, &code_state_with_phase(phi)), 1.0, epsilon = 1e-9);
            let mut s = decode(&g).unwrap();
            s.append(&readout_map());
            assert_abs_diff_eq!(p_up(&run(&s, &out)), (1.0 + phi.cos()) / 2.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn lab_frame_sensing_beats_at_quarter_a() {
        // In the lab frame the electron transition in the ↓ branch is detuned
        // by A, so a y-drive on the code state picks up components away from
        // the drive frequency; the readout is no longer a single cosine.
        let g = ideal();
        let lab = quiet(Frame::Lab);
        let code = DensityMatrix::pure(&code_state()).unwrap();
        let rabi = 10e3;
        let mut worst: f64 = 0.0;
        for k in 1..40 {
            let t = k as f64 * 5e-6;
            let (out, _) = sensing_block(t, rabi).run(&code, &lab, 0.0).unwrap();
            let mut s = decode(&g).unwrap();
            s.append(&readout_map());
            let p = p_up(&run(&s, &out));
            worst = worst.max((p - (1.0 + (TAU * rabi * t).cos()) / 2.0).abs());
        }
        assert!(worst > 0.05, "{worst}");
    }

    #[test]
    fn bit_code_round_trip() {
        let g = ideal();
        let rho = DensityMatrix::basis(E0_UP);
        let enc = run(&encode_bit(&g).unwrap(), &rho);
        // (|0↑⟩ − i|−1↓⟩)/√2
        let target = (basis_ket(E0_UP) + basis_ket(BasisLabel::ALL[3]) * (-crate::hilbert::I))
            * C64::from(std::f64::consts::FRAC_1_SQRT_2);
        assert_abs_diff_eq!(fidelity(&enc, &target), 1.0, epsilon = 1e-9);
        let mut s = decode_bit(&g).unwrap();
        s.append(&readout_map());
        assert_abs_diff_eq!(p_up(&run(&s, &enc)), 1.0, epsilon = 1e-9);

        // A full bit flip right before the round is corrected exactly.
        let flipped = channels::bit_flip(&enc, PI);
        let fixed = run(&ec_round_bit(&g).unwrap(), &flipped);
        assert_abs_diff_eq!(fidelity(&fixed, &target), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn cpmg_zero_signal() {
        let sig = SignalSpec { amplitude: 0.0, frequency: 100e3, phase: 0.0 };
        let s = cpmg_block(4, resonant_spacing(100e3), &sig, 0.0, 0.0).unwrap();
        let g = ideal();
        let enc = run(&encode_bit(&g).unwrap(), &DensityMatrix::basis(E0_UP));
        let out = run(&s, &enc);
        assert_abs_diff_eq!(fidelity(&out, &enc_target()), 1.0, epsilon = 1e-9);
    }

    fn enc_target() -> crate::hilbert::Ket {
        (basis_ket(E0_UP) + basis_ket(BasisLabel::ALL[3]) * (-crate::hilbert::I))
            * C64::from(std::f64::consts::FRAC_1_SQRT_2)
    }

    #[test]
    fn cpmg_resonant_spacing() {
        assert_abs_diff_eq!(resonant_spacing(100e3), 5e-6, epsilon = 1e-18);
    }

    #[test]
    fn cpmg_phase_matches_rectified_integral() {
        let f = 100e3;
        let b = 3e3;
        let n = 4;
        let spacing = resonant_spacing(f);
        let sig = SignalSpec { amplitude: b, frequency: f, phase: 0.0 };
        let s = cpmg_block(n, spacing, &sig, 0.0, 0.0).unwrap();
        let t_total = s.duration();
        assert_abs_diff_eq!(t_total, n as f64 * spacing, epsilon = 1e-18);
        let g = ideal();
        let enc = run(&encode_bit(&g).unwrap(), &DensityMatrix::basis(E0_UP));
        let out = run(&s, &enc);
        // Relative phase between |0↑⟩ and |−1↓⟩ amplitudes.
        let c = out.entry(3, 0) / enc.entry(3, 0);
        let phi = c.arg().abs();
        assert_abs_diff_eq!(phi, cpmg_phase(b, t_total), epsilon = 1e-3);
        assert_abs_diff_eq!(c.norm(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn cpmg_error_marker_position() {
        let sig = SignalSpec { amplitude: 0.0, frequency: 100e3, phase: 0.0 };
        for d in [0.0, 0.6e-6, 1.2e-6, 1.8e-6] {
            let s = cpmg_block(4, 5e-6, &sig, 0.0, d).unwrap();
            let m = s.marker(ERROR_MARKER).unwrap();
            assert_abs_diff_eq!(s.duration() - m.time, d, epsilon = 1e-15);
        }
        assert!(cpmg_block(4, 5e-6, &sig, 0.0, 3e-6).is_err());
        assert!(cpmg_block(0, 5e-6, &sig, 0.0, 0.0).is_err());
    }

    #[test]
    fn phase_mismatch_examples() {
        let b = phase_mismatch(100e3, 4e-6, 4e-6).unwrap();
        assert_eq!(b.delta_phi, 0.0);
        for d in [0.0, 0.6e-6, 1.2e-6, 1.8e-6] {
            let b = phase_mismatch(100e3, 10e-6 - d, 10e-6).unwrap();
            assert_abs_diff_eq!(b.delta_phi, 2.0 * TAU * 100e3 * d, epsilon = 1e-12);
        }
        assert!(phase_mismatch(1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn phase_mismatch_predicts_contrast_loss() {
        // A z-rotation by π/2 splits the state evenly between code and error
        // space; after a gap dt and correction the two branches differ by
        // ΔΦ, leaving nuclear coherence |cos(ΔΦ/2)| of the ideal value.
        let g = ideal();
        let rabi = 20e3;
        let ev = quiet(Frame::Tracked);
        for dt in [0.0, 2e-6, 5e-6, 9e-6] {
            let b = phase_mismatch(rabi, 0.0, dt).unwrap();
            let code = DensityMatrix::pure(&code_state()).unwrap();
            let mut s = PulseSchedule::new();
            s.push(Step::PhaseError { angle: FRAC_PI_2 });
            s.append(&sensing_block(dt, rabi));
            s.append(&ec_round(&g).unwrap());
            s.append(&decode(&g).unwrap());
            let out = s.run(&code, &ev, 0.0).unwrap().0;
            let coh = 2.0 * out.partial_trace_electron()[(0, 1)].norm();
            assert_abs_diff_eq!(coh, (b.delta_phi / 2.0).cos().abs(), epsilon = 1e-6);
        }
    }

    #[test]
    fn marker_insertion() {
        let g = ideal();
        let mut s = encode(&g).unwrap();
        s.append(&sensing_block(10e-6, 1e3));
        s.mark("flip");
        s.append(&ec_round(&g).unwrap());
        let before = s.steps().len();
        s.insert_at("flip", Step::PhaseError { angle: PI }).unwrap();
        assert_eq!(s.steps().len(), before + 1);
        let m = s.marker("flip").unwrap();
        assert!(matches!(s.steps()[m.index], Step::PhaseError { .. }));
        assert!(matches!(s.insert_at("nope", Step::BitFlip { theta: 1.0 }), Err(Error::UnknownMarker(_))));
        for m in s.markers() {
            assert!(m.time >= 0.0 && m.time <= s.duration());
        }
    }

    #[test]
    fn reset_clock_restart() {
        let law = DephasingLaw { t: 40e-6, clock_mode: ClockMode::PerReset };
        let ev = Evolver::new(&HamiltonianParams::default(), Frame::Tracked, law);
        let mut s = sensing_block(10e-6, 1e3);
        s.push(Step::Reset(ResetModel::ideal()));
        let (_, clock) = s.run(&DensityMatrix::basis(E0_UP), &ev, 0.0).unwrap();
        assert_eq!(clock, 0.0);
        let law = DephasingLaw { clock_mode: ClockMode::Global, ..law };
        let ev = Evolver::new(&HamiltonianParams::default(), Frame::Tracked, law);
        let (_, clock) = s.run(&DensityMatrix::basis(E0_UP), &ev, 0.0).unwrap();
        assert_abs_diff_eq!(clock, 10e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn encode_decode_identity_on_nucleus(seed in any::<u64>()) {
            // encode∘decode∘(RF⁻¹) acts as identity on |0⟩ ⊗ ρ_n-prepared inputs.
            let g = ideal();
            let mut r = rng::stream(seed, 9);
            let any = random_density_matrix(&mut r, 2);
            let rho = optical_reset(&any, &ResetModel::ideal());
            let mut s = PulseSchedule::new();
            s.append(&encode(&g).unwrap());
            s.append(&decode(&g).unwrap());
            s.push(Rotation::nuclear(Axis::Y, -FRAC_PI_2));
            let out = run(&s, &rho);
            prop_assert!(max_abs(&(out.matrix() - rho.matrix())) < 1e-9);
        }

        #[test]
        fn ec_after_flip_restores_any_state(phi in 0.0f64..TAU) {
            let g = ideal();
            let code = DensityMatrix::pure(&code_state_with_phase(phi)).unwrap();
            let a = run(&ec_round(&g).unwrap(), &code);
            let b = run(&ec_round(&g).unwrap(), &channels::phase_flip(&code));
            prop_assert!(max_abs(&(a.matrix() - b.matrix())) < 1e-9);
        }

        #[test]
        fn cpmg_refocuses_static_detuning(delta in -30e3f64..30e3, pairs in 1usize..4) {
            let g = ideal();
            let sig = SignalSpec { amplitude: delta, frequency: 0.0, phase: 0.0 };
            let s = cpmg_block(2 * pairs, 5e-6, &sig, 0.0, 0.0).unwrap();
            let enc = run(&encode_bit(&g).unwrap(), &DensityMatrix::basis(E0_UP));
            let out = run(&s, &enc);
            prop_assert!((fidelity(&out, &enc_target()) - 1.0).abs() < 1e-9);
        }
    }
}
