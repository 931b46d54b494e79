//! Time evolution of the register.
//!
//! The master equation is
//!
//! ```text
//! dρ/dt = −i[H(t), ρ] + γ(t)·(S_z ρ S_z − ρ/4),   γ(t) = t/T²
//! ```
//!
//! integrated with fixed-step RK4; noise-free segments without a
//! time-dependent signal are propagated exactly. Off-diagonal electron coherences decay
//! as `exp(−t²/(4T²))` when the clock starts at zero.
//!
//! Two frames are supported. In [`Frame::Lab`] the register Hamiltonian
//! `H0` acts during every timed segment. In [`Frame::Tracked`] `H0` is
//! absorbed into the phases of the control pulses, so a timed segment only
//! carries its own drive; this is the frame in which ideal instantaneous
//! gates are exact.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::hilbert::{
    electron_projector, identity2, kron, nuclear_projector, sigma_x, sigma_y, sigma_z,
    spin_operators, DensityMatrix, ElectronState, Mat2, Mat4, NuclearState, Operator, C64, I,
};
use crate::{rng, Error, Result};

/// Register constants in ordinary Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HamiltonianParams {
    /// Hyperfine coupling A.
    pub a: f64,
    /// MW detuning Δ_NV.
    pub delta_nv: f64,
    /// RF detuning Δ_13C.
    pub delta_c13: f64,
}

impl Default for HamiltonianParams {
    fn default() -> Self {
        HamiltonianParams {
            a: 50e3,
            delta_nv: -25e3,
            delta_c13: -25e3,
        }
    }
}

impl HamiltonianParams {
    pub fn zero() -> Self {
        HamiltonianParams {
            a: 0.0,
            delta_nv: 0.0,
            delta_c13: 0.0,
        }
    }

    /// Half a hyperfine period, `1/(2A)`.
    pub fn cnot_wait(&self) -> Result<f64> {
        if self.a == 0.0 || !self.a.is_finite() {
            return Err(Error::ZeroCoupling);
        }
        Ok(1.0 / (2.0 * self.a.abs()))
    }
}

/// `H0 = 2π(Δ_NV S_z + A S_z I_z + Δ_13C I_z)` in rad/s.
pub fn build_h0(p: &HamiltonianParams) -> Operator {
    let s = spin_operators();
    let m = s.sz.0 * C64::from(p.delta_nv)
        + s.sz.0 * s.iz.0 * C64::from(p.a)
        + s.iz.0 * C64::from(p.delta_c13);
    Operator(m * C64::from(TAU))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// γ(t) runs on total sequence time.
    Global,
    /// The clock restarts at every optical reset of the electron.
    #[default]
    PerReset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DephasingLaw {
    /// Dephasing time T in seconds.
    pub t: f64,
    pub clock_mode: ClockMode,
}

impl Default for DephasingLaw {
    fn default() -> Self {
        DephasingLaw {
            t: 40e-6,
            clock_mode: ClockMode::default(),
        }
    }
}

impl DephasingLaw {
    /// γ(t) = t/T² (s⁻¹).
    pub fn rate(&self, t: f64) -> f64 {
        t.max(0.0) / (self.t * self.t)
    }

    /// Coherence envelope for a clock starting at zero: `exp(−t²/(4T²))`.
    pub fn envelope(&self, t: f64) -> f64 {
        (-t * t / (4.0 * self.t * self.t)).exp()
    }

    /// Detuning spread σ (Hz) whose Gaussian ensemble reproduces
    /// [`DephasingLaw::envelope`]: `2πσ = 1/(√2·T)`.
    pub fn matched_sigma(&self) -> f64 {
        1.0 / (TAU * std::f64::consts::SQRT_2 * self.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    #[default]
    Lab,
    Tracked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Qubit {
    Electron,
    Nuclear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }

    fn pauli(self) -> Mat2 {
        match self {
            Axis::X => sigma_x(),
            Axis::Y => sigma_y(),
            Axis::Z => sigma_z(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Electron(ElectronState),
    Nuclear(NuclearState),
}

/// `exp(−i·angle·σ/2)`
pub fn rotation_2x2(axis: Axis, angle: f64) -> Mat2 {
    let (s, c) = (angle / 2.0).sin_cos();
    identity2() * C64::from(c) - axis.pauli() * (I * s)
}

/// Instantaneous rotation of one qubit, optionally conditioned on a basis
/// state of the other.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    pub target: Qubit,
    pub axis: Axis,
    pub angle: f64,
    pub condition: Option<Condition>,
}

impl Rotation {
    pub fn electron(axis: Axis, angle: f64) -> Self {
        Rotation {
            target: Qubit::Electron,
            axis,
            angle,
            condition: None,
        }
    }

    pub fn nuclear(axis: Axis, angle: f64) -> Self {
        Rotation {
            target: Qubit::Nuclear,
            axis,
            angle,
            condition: None,
        }
    }

    pub fn when(mut self, condition: Condition) -> Self {
        self.condition = Some(condition);
        self
    }

    pub fn unitary(&self) -> Result<Mat4> {
        let u = rotation_2x2(self.axis, self.angle);
        let full = |u: &Mat2| match self.target {
            Qubit::Electron => kron(u, &identity2()),
            Qubit::Nuclear => kron(&identity2(), u),
        };
        match (self.target, self.condition) {
            (_, None) => Ok(full(&u)),
            (Qubit::Electron, Some(Condition::Nuclear(n))) => {
                let p = nuclear_projector(n);
                Ok(full(&u) * p + (Mat4::identity() - p))
            }
            (Qubit::Nuclear, Some(Condition::Electron(e))) => {
                let p = electron_projector(e);
                Ok(full(&u) * p + (Mat4::identity() - p))
            }
            _ => Err(Error::SelfCondition),
        }
    }
}

pub fn instant_rotation(rho: &DensityMatrix, rotation: &Rotation) -> Result<DensityMatrix> {
    Ok(rho.transform(&rotation.unitary()?))
}

/// Phase-locked AC field `b·cos(2πf(t₀ + s) + φ)` coupling through S_z.
/// `s` is time since the start of the segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcSignal {
    /// Field amplitude b in Hz.
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    /// Signal time at the start of the segment.
    pub t_offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Segment {
    Free {
        duration: f64,
        noise: bool,
        signal: Option<AcSignal>,
    },
    /// Electron drive `2πΩ(cos φ S_x + sin φ S_y)`, optionally selective on
    /// one nuclear state.
    MwDrive {
        duration: f64,
        rabi: f64,
        phase: f64,
        condition: Option<NuclearState>,
        noise: bool,
    },
    /// Nuclear drive `2πΩ(cos φ I_x + sin φ I_y)`, optionally selective on
    /// one electron state.
    RfDrive {
        duration: f64,
        rabi: f64,
        phase: f64,
        condition: Option<ElectronState>,
        noise: bool,
    },
    Rotation(Rotation),
}

impl Segment {
    pub fn free(duration: f64) -> Self {
        Segment::Free {
            duration,
            noise: true,
            signal: None,
        }
    }

    pub fn mw(duration: f64, rabi: f64, phase: f64) -> Self {
        Segment::MwDrive {
            duration,
            rabi,
            phase,
            condition: None,
            noise: true,
        }
    }

    pub fn rf(duration: f64, rabi: f64, phase: f64) -> Self {
        Segment::RfDrive {
            duration,
            rabi,
            phase,
            condition: None,
            noise: true,
        }
    }

    pub fn duration(&self) -> f64 {
        match *self {
            Segment::Free { duration, .. }
            | Segment::MwDrive { duration, .. }
            | Segment::RfDrive { duration, .. } => duration,
            Segment::Rotation(_) => 0.0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Segment::Free { .. } => "free",
            Segment::MwDrive { .. } => "mw_drive",
            Segment::RfDrive { .. } => "rf_drive",
            Segment::Rotation(_) => "instant_rotation",
        }
    }

    fn noise(&self) -> bool {
        match *self {
            Segment::Free { noise, .. }
            | Segment::MwDrive { noise, .. }
            | Segment::RfDrive { noise, .. } => noise,
            Segment::Rotation(_) => false,
        }
    }

    /// One-line description used in schedule listings and error messages.
    pub fn describe(&self) -> String {
        let cond = |c: Option<String>| c.map(|c| format!(" if {c}")).unwrap_or_default();
        match *self {
            Segment::Free {
                duration,
                noise,
                signal,
            } => {
                let sig = signal
                    .map(|s| {
                        format!(
                            " ac(b={:.6e} Hz, f={:.6e} Hz, phase={:.6}, t0={:.6e} s)",
                            s.amplitude, s.frequency, s.phase, s.t_offset
                        )
                    })
                    .unwrap_or_default();
                format!("free {duration:.6e} s noise={noise}{sig}")
            }
            Segment::MwDrive {
                duration,
                rabi,
                phase,
                condition,
                noise,
            } => format!(
                "mw_drive {duration:.6e} s rabi={rabi:.6e} Hz phase={phase:.6} noise={noise}{}",
                cond(condition.map(|n| format!("{n:?}").to_lowercase()))
            ),
            Segment::RfDrive {
                duration,
                rabi,
                phase,
                condition,
                noise,
            } => format!(
                "rf_drive {duration:.6e} s rabi={rabi:.6e} Hz phase={phase:.6} noise={noise}{}",
                cond(condition.map(|e| format!("{e:?}").to_lowercase()))
            ),
            Segment::Rotation(r) => {
                let target = match r.target {
                    Qubit::Electron => "electron",
                    Qubit::Nuclear => "nuclear",
                };
                let c = r.condition.map(|c| match c {
                    Condition::Electron(e) => format!("{e:?}").to_lowercase(),
                    Condition::Nuclear(n) => format!("{n:?}").to_lowercase(),
                });
                format!(
                    "instant_rotation {target} {} angle={:.6}{}",
                    r.axis.name(),
                    r.angle,
                    cond(c)
                )
            }
        }
    }
}

/// `exp(−iHt)` for Hermitian `H`, from its eigendecomposition.
pub fn unitary_propagator(h: &Mat4, t: f64) -> Mat4 {
    let herm = (h + h.adjoint()) * C64::from(0.5);
    let eig = nalgebra::SymmetricEigen::new(herm);
    let phases = eig.eigenvalues.map(|l| (-I * C64::from(l * t)).exp());
    eig.eigenvectors * Mat4::from_diagonal(&phases) * eig.eigenvectors.adjoint()
}

/// Upper bound on RK4 steps for one segment.
pub const MAX_STEPS: f64 = 2e7;

/// Integrates timed segments under a fixed frame and dephasing law.
#[derive(Clone, Debug)]
pub struct Evolver {
    h_reg: Mat4,
    law: DephasingLaw,
    noise_enabled: bool,
    refine: u32,
}

impl Evolver {
    pub fn new(params: &HamiltonianParams, frame: Frame, law: DephasingLaw) -> Self {
        let h_reg = match frame {
            Frame::Lab => build_h0(params).0,
            Frame::Tracked => Mat4::zeros(),
        };
        Evolver {
            h_reg,
            law,
            noise_enabled: true,
            refine: 1,
        }
    }

    /// Turn dephasing off globally (segment flags are ignored).
    pub fn with_noise(mut self, enabled: bool) -> Self {
        self.noise_enabled = enabled;
        self
    }

    /// Multiply the step count by `k` (convergence checks).
    pub fn with_refinement(mut self, k: u32) -> Self {
        self.refine = k.max(1);
        self
    }

    pub fn law(&self) -> &DephasingLaw {
        &self.law
    }

    pub fn noise_enabled(&self) -> bool {
        self.noise_enabled
    }

    /// Evolve through one segment starting at dephasing-clock time `t_clock`.
    /// Returns the new state and the advanced clock.
    pub fn evolve_segment(
        &self,
        rho: &DensityMatrix,
        segment: &Segment,
        t_clock: f64,
    ) -> Result<(DensityMatrix, f64)> {
        if let Segment::Rotation(r) = segment {
            return Ok((instant_rotation(rho, r)?, t_clock));
        }
        let duration = segment.duration();
        if duration <= 0.0 {
            return Ok((*rho, t_clock));
        }
        let s = spin_operators();
        let (h_static, signal) = match *segment {
            Segment::Free { signal, .. } => (self.h_reg, signal),
            Segment::MwDrive {
                rabi,
                phase,
                condition,
                ..
            } => {
                let mut d = (s.sx.0 * C64::from(phase.cos()) + s.sy.0 * C64::from(phase.sin()))
                    * C64::from(TAU * rabi);
                if let Some(n) = condition {
                    d *= nuclear_projector(n);
                }
                (self.h_reg + d, None)
            }
            Segment::RfDrive {
                rabi,
                phase,
                condition,
                ..
            } => {
                let mut d = (s.ix.0 * C64::from(phase.cos()) + s.iy.0 * C64::from(phase.sin()))
                    * C64::from(TAU * rabi);
                if let Some(e) = condition {
                    d *= electron_projector(e);
                }
                (self.h_reg + d, None)
            }
            Segment::Rotation(_) => unreachable!(),
        };
        let noisy = self.noise_enabled && segment.noise();
        if !noisy && signal.is_none() {
            // Time-independent and unitary: propagate exactly.
            let u = unitary_propagator(&h_static, duration);
            return Ok((rho.transform(&u), t_clock + duration));
        }

        let diag: Vec<f64> = (0..4).map(|i| self.h_reg[(i, i)].re).collect();
        let spread = diag.iter().cloned().fold(f64::MIN, f64::max)
            - diag.iter().cloned().fold(f64::MAX, f64::min);
        let drive = match *segment {
            Segment::MwDrive { rabi, .. } | Segment::RfDrive { rabi, .. } => TAU * rabi.abs(),
            _ => 0.0,
        };
        let ac = signal
            .map(|sg| TAU * (sg.amplitude.abs() + sg.frequency.abs()))
            .unwrap_or(0.0);
        let gamma_max = if noisy {
            self.law.rate(t_clock + duration)
        } else {
            0.0
        };
        let f_max = spread + drive + ac + gamma_max;
        let base = (duration * 50.0 * f_max).ceil().max(50.0);
        let steps = base * self.refine as f64;
        if !steps.is_finite() || steps > MAX_STEPS {
            return Err(Error::StepUnderflow {
                segment: segment.describe(),
                steps,
            });
        }
        let n = steps as usize;
        let h = duration / n as f64;

        // Sign of s_z per basis index; the dissipator only touches entries
        // with opposite electron states, scaling them by −1/2.
        let sz = [0.5, 0.5, -0.5, -0.5];
        let deph_mask = Mat4::from_fn(|r, c| C64::from(sz[r] * sz[c] - 0.25));
        let sz_op = s.sz.0;

        let rhs = |tau: f64, m: &Mat4| -> Mat4 {
            let hm = match signal {
                Some(sg) => {
                    let coeff = TAU
                        * sg.amplitude
                        * (TAU * sg.frequency * (sg.t_offset + tau) + sg.phase).cos();
                    h_static + sz_op * C64::from(coeff)
                }
                None => h_static,
            };
            let mut out = (hm * m - m * hm) * (-I);
            if noisy {
                let g = self.law.rate(t_clock + tau);
                out += m.component_mul(&deph_mask) * C64::from(g);
            }
            out
        };

        let mut m = *rho.matrix();
        let half = C64::from(h / 2.0);
        let full = C64::from(h);
        let sixth = C64::from(h / 6.0);
        for k in 0..n {
            let t = k as f64 * h;
            let k1 = rhs(t, &m);
            let k2 = rhs(t + h / 2.0, &(m + k1 * half));
            let k3 = rhs(t + h / 2.0, &(m + k2 * half));
            let k4 = rhs(t + h, &(m + k3 * full));
            m += (k1 + k2 * C64::from(2.0) + k3 * C64::from(2.0) + k4) * sixth;
        }
        let m = (m + m.adjoint()) * C64::from(0.5);
        Ok((DensityMatrix::from_raw(m), t_clock + duration))
    }
}

/// `|⟨exp(i·2πδt)⟩|` over `δ ~ Normal(0, σ)` at each time.
///
/// Samples are drawn in fixed chunks, each from its own `(seed, chunk)`
/// stream, so the result is independent of the thread count.
pub fn quasistatic_ensemble_fid(sigma: f64, times: &[f64], n_samples: usize, seed: u64) -> Vec<f64> {
    const CHUNK: usize = 8192;
    let n_samples = n_samples.max(1);
    if sigma == 0.0 {
        return vec![1.0; times.len()];
    }
    let normal = Normal::new(0.0, sigma.abs()).expect("finite sigma");
    let n_chunks = n_samples.div_ceil(CHUNK);
    let partial: Vec<Vec<(f64, f64)>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut r = rng::stream(seed, chunk as u64);
            let count = CHUNK.min(n_samples - chunk * CHUNK);
            let mut acc = vec![(0.0, 0.0); times.len()];
            for _ in 0..count {
                let delta = normal.sample(&mut r);
                for (a, &t) in acc.iter_mut().zip(times) {
                    let (s, c) = (TAU * delta * t).sin_cos();
                    a.0 += c;
                    a.1 += s;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![(0.0, 0.0); times.len()];
    for p in &partial {
        for (t, v) in total.iter_mut().zip(p) {
            t.0 += v.0;
            t.1 += v.1;
        }
    }
    total
        .into_iter()
        .map(|(c, s)| (c * c + s * s).sqrt() / n_samples as f64)
        .collect()
}

/// Analytic Gaussian characteristic function `exp(−(2πσ)²t²/2)`.
pub fn quasistatic_envelope(sigma: f64, t: f64) -> f64 {
    let w = 2.0 * PI * sigma * t;
    (-w * w / 2.0).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{
        electron_ket, fidelity, kron_ket, minus, nuclear_ket, plus, random_density_matrix,
        BasisLabel, Ket2,
    };
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    const E0_UP: BasisLabel = BasisLabel::new(ElectronState::E0, NuclearState::Up);
    const EM1_UP: BasisLabel = BasisLabel::new(ElectronState::Em1, NuclearState::Up);

    fn max_abs(m: &Mat4) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn h0_zero_params() {
        assert_eq!(max_abs(&build_h0(&HamiltonianParams::zero()).0), 0.0);
    }

    #[test]
    fn h0_default_diagonal() {
        let p = HamiltonianParams::default();
        let h = build_h0(&p);
        assert!(h.is_hermitian(0.0));
        // Hand expansion of Δ s + A s i + Δ i with Δ = −25, A = 50 (kHz):
        //   (+½,+½): −12.5 + 12.5 − 12.5 = −12.5
        //   (+½,−½): −12.5 − 12.5 + 12.5 = −12.5
        //   (−½,+½): +12.5 − 12.5 − 12.5 = −12.5
        //   (−½,−½): +12.5 + 12.5 + 12.5 = +37.5
        let expected_khz = [-12.5, -12.5, -12.5, 37.5];
        for (i, e) in expected_khz.iter().enumerate() {
            assert_abs_diff_eq!(h.0[(i, i)].re / TAU / 1e3, e, epsilon = 1e-12);
            assert_eq!(h.0[(i, i)].im, 0.0);
        }
        for r in 0..4 {
            for c in 0..4 {
                if r != c {
                    assert_eq!(h.0[(r, c)], C64::from(0.0));
                }
            }
        }
    }

    #[test]
    fn h0_transition_difference_is_a() {
        let h = build_h0(&HamiltonianParams::default()).0;
        let e = |i: usize| h[(i, i)].re / TAU;
        let up = e(2) - e(0);
        let down = e(3) - e(1);
        assert_abs_diff_eq!((up - down).abs(), 50e3, epsilon = 1e-9);
    }

    #[test]
    fn cnot_wait_values() {
        assert_abs_diff_eq!(HamiltonianParams::default().cnot_wait().unwrap(), 10e-6, epsilon = 1e-18);
        assert!(matches!(HamiltonianParams::zero().cnot_wait(), Err(Error::ZeroCoupling)));
    }

    fn superposition_up() -> DensityMatrix {
        let e = Ket2::new(C64::from(1.0), C64::from(1.0)) * C64::from(std::f64::consts::FRAC_1_SQRT_2);
        DensityMatrix::pure(&kron_ket(&e, &nuclear_ket(NuclearState::Up))).unwrap()
    }

    #[test]
    fn zero_duration_is_identity() {
        let ev = Evolver::new(&HamiltonianParams::default(), Frame::Lab, DephasingLaw::default());
        let rho = superposition_up();
        let (out, t) = ev.evolve_segment(&rho, &Segment::free(0.0), 3e-6).unwrap();
        assert_eq!(out, rho);
        assert_eq!(t, 3e-6);
    }

    #[test]
    fn fid_at_t_equals_t() {
        let law = DephasingLaw {
            t: 40e-6,
            clock_mode: ClockMode::Global,
        };
        let ev = Evolver::new(&HamiltonianParams::zero(), Frame::Lab, law);
        let (out, clock) = ev
            .evolve_segment(&superposition_up(), &Segment::free(40e-6), 0.0)
            .unwrap();
        assert_abs_diff_eq!(clock, 40e-6);
        // ½·exp(−1/4)
        assert_abs_diff_eq!(out.entry(0, 2).norm(), 0.389_400_391_535_702_4, epsilon = 1e-9);
    }

    #[test]
    fn resonant_pi_pulse() {
        let ev = Evolver::new(&HamiltonianParams::zero(), Frame::Lab, DephasingLaw::default())
            .with_noise(false);
        let rabi = 100e3;
        let rho = DensityMatrix::basis(E0_UP);
        let (out, _) = ev
            .evolve_segment(&rho, &Segment::mw(1.0 / (2.0 * rabi), rabi, 0.0), 0.0)
            .unwrap();
        assert!(out.population(EM1_UP) > 1.0 - 1e-6);
    }

    #[test]
    fn rotation_examples() {
        let rho = superposition_up();
        let same = instant_rotation(&rho, &Rotation::electron(Axis::X, 0.0)).unwrap();
        assert!(max_abs(&(same.matrix() - rho.matrix())) < 1e-15);

        let plus_up = DensityMatrix::pure(&kron_ket(&plus(), &nuclear_ket(NuclearState::Up))).unwrap();
        let target = kron_ket(&minus(), &nuclear_ket(NuclearState::Up));
        let flipped = instant_rotation(&plus_up, &Rotation::electron(Axis::Z, PI)).unwrap();
        assert_abs_diff_eq!(fidelity(&flipped, &target), 1.0, epsilon = 1e-12);

        let c = Condition::Nuclear(NuclearState::Up);
        let half = Rotation::electron(Axis::X, FRAC_PI_2).when(c).unwrap_unitary();
        let full = Rotation::electron(Axis::X, PI).when(c).unwrap_unitary();
        assert!(max_abs(&(half * half - full)) < 1e-12);
    }

    #[test]
    fn self_condition_rejected() {
        let r = Rotation::electron(Axis::X, PI).when(Condition::Electron(ElectronState::E0));
        assert!(matches!(r.unitary(), Err(Error::SelfCondition)));
    }

    trait UnwrapUnitary {
        fn unwrap_unitary(self) -> Mat4;
    }
    impl UnwrapUnitary for Rotation {
        fn unwrap_unitary(self) -> Mat4 {
            self.unitary().unwrap()
        }
    }

    #[test]
    fn quasistatic_sigma_zero() {
        let c = quasistatic_ensemble_fid(0.0, &[0.0, 1e-5, 1e-4], 10, 1);
        assert_eq!(c, vec![1.0; 3]);
    }

    #[test]
    fn quasistatic_analytic_limit() {
        let sigma = 5e3;
        let t = 1.0 / (TAU * sigma * std::f64::consts::SQRT_2);
        assert_abs_diff_eq!(quasistatic_envelope(sigma, t), (-0.25f64).exp(), epsilon = 1e-15);
        let c = quasistatic_ensemble_fid(sigma, &[t], 100_000, 11);
        assert_abs_diff_eq!(c[0], (-0.25f64).exp(), epsilon = 1e-2);
    }

    #[test]
    fn quasistatic_deterministic() {
        let times = [1e-6, 2e-5];
        let a = quasistatic_ensemble_fid(3e3, &times, 20_000, 5);
        let b = quasistatic_ensemble_fid(3e3, &times, 20_000, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn step_underflow_names_segment() {
        let ev = Evolver::new(&HamiltonianParams::default(), Frame::Lab, DephasingLaw::default());
        let seg = Segment::mw(1.0, 1e9, 0.0);
        match ev.evolve_segment(&superposition_up(), &seg, 0.0) {
            Err(Error::StepUnderflow { segment, .. }) => assert!(segment.starts_with("mw_drive")),
            other => panic!("expected underflow, got {other:?}"),
        }
    }

    #[test]
    fn conditional_mw_drive_is_selective() {
        let ev = Evolver::new(&HamiltonianParams::zero(), Frame::Lab, DephasingLaw::default())
            .with_noise(false);
        let rabi = 50e3;
        let seg = Segment::MwDrive {
            duration: 1.0 / (2.0 * rabi),
            rabi,
            phase: 0.0,
            condition: Some(NuclearState::Down),
            noise: false,
        };
        let rho = DensityMatrix::basis(E0_UP);
        let (out, _) = ev.evolve_segment(&rho, &seg, 0.0).unwrap();
        assert!(out.population(E0_UP) > 1.0 - 1e-9);
    }

    fn arb_segment() -> impl Strategy<Value = Segment> {
        prop_oneof![
            (0.0f64..30e-6).prop_map(Segment::free),
            (0.0f64..20e-6, 0.0f64..200e3, 0.0f64..TAU).prop_map(|(d, r, p)| Segment::mw(d, r, p)),
            (0.0f64..20e-6, 0.0f64..50e3, 0.0f64..TAU).prop_map(|(d, r, p)| Segment::rf(d, r, p)),
            (0.0f64..20e-6, -50e3f64..50e3, 50e3f64..150e3).prop_map(|(d, b, f)| Segment::Free {
                duration: d,
                noise: true,
                signal: Some(AcSignal { amplitude: b, frequency: f, phase: 0.3, t_offset: 1e-6 }),
            }),
            (0.0f64..TAU, 0usize..3).prop_map(|(a, k)| {
                let axis = [Axis::X, Axis::Y, Axis::Z][k];
                Segment::Rotation(Rotation::electron(axis, a).when(Condition::Nuclear(NuclearState::Down)))
            }),
        ]
    }

    #[test]
    fn exact_propagator_matches_rk4() {
        // A huge T keeps the noisy (RK4) path while making γ negligible.
        let slow = DephasingLaw { t: 1e6, clock_mode: ClockMode::Global };
        let p = HamiltonianParams::default();
        let rk4 = Evolver::new(&p, Frame::Lab, slow);
        let exact = Evolver::new(&p, Frame::Lab, slow).with_noise(false);
        let rho = random_density_matrix(&mut rng::stream(7, 0), 4);
        for seg in [Segment::free(13e-6), Segment::mw(7e-6, 80e3, 0.4), Segment::rf(9e-6, 20e3, 1.1)] {
            let (a, _) = rk4.evolve_segment(&rho, &seg, 0.0).unwrap();
            let (b, _) = exact.evolve_segment(&rho, &seg, 0.0).unwrap();
            let d = max_abs(&(a.matrix() - b.matrix()));
            assert!(d < 1e-8, "{} {d:e}", seg.describe());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn evolution_is_cptp(seed in any::<u64>(), seg in arb_segment(), t0 in 0.0f64..60e-6) {
            let mut r = rng::stream(seed, 0);
            let rho = random_density_matrix(&mut r, 4);
            let ev = Evolver::new(&HamiltonianParams::default(), Frame::Lab, DephasingLaw::default());
            let (out, clock) = ev.evolve_segment(&rho, &seg, t0).unwrap();
            prop_assert!((out.trace().re - 1.0).abs() < 1e-8);
            prop_assert!(out.min_eigenvalue() >= -1e-8);
            prop_assert!((clock - t0 - seg.duration()).abs() < 1e-18);
        }

        #[test]
        fn dephasing_spares_nucleus(e in 0.0f64..1.0, phase in 0.0f64..TAU, a in 0.0f64..1.0, t in 0.0f64..80e-6) {
            let ke = Ket2::new(C64::from(e.sqrt()), C64::from_polar((1.0 - e).sqrt(), phase));
            let kn = Ket2::new(C64::from(a.sqrt()), C64::from_polar((1.0 - a).sqrt(), 0.7));
            let rho = DensityMatrix::product(&(ke * ke.adjoint()), &(kn * kn.adjoint())).unwrap();
            let ev = Evolver::new(&HamiltonianParams::zero(), Frame::Lab, DephasingLaw::default());
            let (out, _) = ev.evolve_segment(&rho, &Segment::free(t), 0.0).unwrap();
            let d = out.partial_trace_electron() - rho.partial_trace_electron();
            prop_assert!(d.iter().all(|z| z.norm() < 1e-9));
        }

        #[test]
        fn rotations_are_unitary(a in -10.0f64..10.0, k in 0usize..3, cond in 0usize..3) {
            let axis = [Axis::X, Axis::Y, Axis::Z][k];
            for mut r in [Rotation::electron(axis, a), Rotation::nuclear(axis, a)] {
                r.condition = match (r.target, cond) {
                    (_, 0) => None,
                    (Qubit::Electron, 1) => Some(Condition::Nuclear(NuclearState::Up)),
                    (Qubit::Electron, _) => Some(Condition::Nuclear(NuclearState::Down)),
                    (Qubit::Nuclear, 1) => Some(Condition::Electron(ElectronState::E0)),
                    (Qubit::Nuclear, _) => Some(Condition::Electron(ElectronState::Em1)),
                };
                prop_assert!(Operator(r.unitary().unwrap()).is_unitary(1e-12));
            }
        }
    }

    #[test]
    fn halving_step_converges() {
        let ev = Evolver::new(&HamiltonianParams::default(), Frame::Lab, DephasingLaw::default());
        let fine = ev.clone().with_refinement(2);
        let e = electron_ket(ElectronState::E0) + electron_ket(ElectronState::Em1) * I;
        let rho = DensityMatrix::pure(&kron_ket(&e, &(nuclear_ket(NuclearState::Up) + nuclear_ket(NuclearState::Down)))).unwrap();
        for seg in [
            Segment::mw(50e-6, 100e3, FRAC_PI_2),
            Segment::free(40e-6),
            Segment::Free {
                duration: 20e-6,
                noise: true,
                signal: Some(AcSignal { amplitude: 20e3, frequency: 100e3, phase: 0.0, t_offset: 0.0 }),
            },
        ] {
            let (a, _) = ev.evolve_segment(&rho, &seg, 10e-6).unwrap();
            let (b, _) = fine.evolve_segment(&rho, &seg, 10e-6).unwrap();
            assert!(max_abs(&(a.matrix() - b.matrix())) < 1e-6, "{}", seg.describe());
        }
    }
}
