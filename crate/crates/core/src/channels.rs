//! Non-unitary and stochastic operations on the register: discrete errors,
//! optical reset of the electron, depolarizing gate penalty and single-shot
//! nuclear readout.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Axis, Rotation};
use crate::hilbert::{
    kron, nuclear_projector, DensityMatrix, Mat2, Mat4, NuclearState, C64,
};
use crate::{Error, Result};

/// Electron z-rotation by `angle`. `angle = π` is the phase flip `|+⟩ ↔ |−⟩`.
pub fn phase_error(rho: &DensityMatrix, angle: f64) -> DensityMatrix {
    rotate(rho, Rotation::electron(Axis::Z, angle))
}

pub fn phase_flip(rho: &DensityMatrix) -> DensityMatrix {
    phase_error(rho, PI)
}

/// Electron y-rotation by `theta`.
pub fn bit_flip(rho: &DensityMatrix, theta: f64) -> DensityMatrix {
    rotate(rho, Rotation::electron(Axis::Y, theta))
}

fn rotate(rho: &DensityMatrix, r: Rotation) -> DensityMatrix {
    rho.transform(&r.unitary().expect("unconditioned rotation"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResetModel {
    /// Nuclear coherence retained per reset.
    pub eta: f64,
}

impl ResetModel {
    /// 20 resets retain 95 % of the nuclear coherence.
    pub fn calibrated() -> Self {
        ResetModel {
            eta: 0.95f64.powf(1.0 / 20.0),
        }
    }

    pub fn ideal() -> Self {
        ResetModel { eta: 1.0 }
    }
}

impl Default for ResetModel {
    fn default() -> Self {
        ResetModel::calibrated()
    }
}

/// `|0⟩⟨0| ⊗ ρ_n`, with the off-diagonals of `ρ_n = Tr_e ρ` scaled by eta.
pub fn optical_reset(rho: &DensityMatrix, model: &ResetModel) -> DensityMatrix {
    let mut n = rho.partial_trace_electron();
    n[(0, 1)] *= model.eta;
    n[(1, 0)] *= model.eta;
    let e0 = Mat2::new(C64::from(1.0), C64::from(0.0), C64::from(0.0), C64::from(0.0));
    DensityMatrix::from_raw(kron(&e0, &n))
}

/// `keep·ρ + (1 − keep)·1/4`.
pub fn depolarize(rho: &DensityMatrix, keep: f64) -> DensityMatrix {
    let m = rho.matrix() * C64::from(keep) + Mat4::identity() * C64::from((1.0 - keep) / 4.0);
    DensityMatrix::from_raw(m)
}

/// Keep fraction for which a pure state passed through [`depolarize`] has
/// the given fidelity with itself: `F = keep + (1 − keep)/4`.
pub fn depolarizing_keep(fidelity: f64) -> f64 {
    (4.0 * fidelity - 1.0) / 3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotonModel {
    /// Mean photon counts per repetition for nuclear ↑.
    pub rate_up: f64,
    /// Mean photon counts per repetition for nuclear ↓.
    pub rate_down: f64,
    /// Classification threshold on the accumulated count.
    pub threshold: f64,
    pub repetitions: u32,
}

impl Default for PhotonModel {
    fn default() -> Self {
        // Means 130 and 70 counts: separated by more than 4σ of either mode.
        PhotonModel {
            rate_up: 0.013,
            rate_down: 0.007,
            threshold: 100.0,
            repetitions: 10_000,
        }
    }
}

impl PhotonModel {
    pub fn classify(&self, count: u64) -> Outcome {
        let bright = count as f64 > self.threshold;
        match (bright, self.rate_up >= self.rate_down) {
            (true, true) | (false, false) => Outcome::Up,
            _ => Outcome::Down,
        }
    }

    pub fn mean(&self, state: NuclearState) -> f64 {
        let rate = match state {
            NuclearState::Up => self.rate_up,
            NuclearState::Down => self.rate_down,
        };
        rate * self.repetitions as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadoutModel {
    /// Probability the reported outcome is correct.
    pub fidelity_read: f64,
    /// Nuclear ↑ population after post-selected initialization.
    pub fidelity_init: f64,
    pub photon: Option<PhotonModel>,
}

impl Default for ReadoutModel {
    fn default() -> Self {
        ReadoutModel {
            fidelity_read: 0.98,
            fidelity_init: 0.99,
            photon: Some(PhotonModel::default()),
        }
    }
}

impl ReadoutModel {
    pub fn ideal() -> Self {
        ReadoutModel {
            fidelity_read: 1.0,
            fidelity_init: 1.0,
            photon: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Up,
    Down,
}

impl Outcome {
    fn state(self) -> NuclearState {
        match self {
            Outcome::Up => NuclearState::Up,
            Outcome::Down => NuclearState::Down,
        }
    }

    fn flipped(self) -> Outcome {
        match self {
            Outcome::Up => Outcome::Down,
            Outcome::Down => Outcome::Up,
        }
    }
}

/// Register after initialization: electron in |0⟩, nucleus ↑ with
/// probability `fidelity_init`, otherwise ↓.
pub fn initial_state(model: &ReadoutModel) -> DensityMatrix {
    let f = model.fidelity_init;
    let mut m = Mat4::zeros();
    m[(0, 0)] = C64::from(f);
    m[(1, 1)] = C64::from(1.0 - f);
    DensityMatrix::from_raw(m)
}

/// True nuclear ↑ population.
pub fn p_up(rho: &DensityMatrix) -> f64 {
    rho.nuclear_populations()[0].clamp(0.0, 1.0)
}

/// Probability that the readout reports ↑, including symmetric flips.
pub fn p_report_up(rho: &DensityMatrix, model: &ReadoutModel) -> f64 {
    let p = p_up(rho);
    let f = model.fidelity_read;
    f * p + (1.0 - f) * (1.0 - p)
}

/// Projective nuclear measurement. The true outcome is drawn from the
/// nuclear populations and the reported one is flipped with probability
/// `1 − fidelity_read`. The post-measurement state is projected on the
/// true outcome; the electron is untouched.
pub fn readout_nuclear<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    model: &ReadoutModel,
    rng: &mut R,
) -> (Outcome, DensityMatrix) {
    let truth = if rng.random::<f64>() < p_up(rho) {
        Outcome::Up
    } else {
        Outcome::Down
    };
    let p = nuclear_projector(truth.state());
    let m = p * rho.matrix() * p;
    let tr = m.trace().re;
    let post = DensityMatrix::from_raw(m / C64::from(tr));
    let reported = if rng.random::<f64>() < model.fidelity_read {
        truth
    } else {
        truth.flipped()
    };
    (reported, post)
}

/// Photon-count histogram from single-shot readout.
#[derive(Clone, Debug, PartialEq)]
pub struct SsrHistogram {
    /// `(count, occurrences)` for every count between the observed extremes.
    pub bins: Vec<(u64, u64)>,
    pub shots: usize,
    /// Shots whose threshold classification disagrees with the drawn state.
    pub misclassified: usize,
}

impl SsrHistogram {
    pub fn classification_error(&self) -> f64 {
        self.misclassified as f64 / self.shots as f64
    }

    /// Number of local maxima after merging `width` adjacent bins.
    pub fn modes(&self, width: usize) -> usize {
        let merged: Vec<u64> = self
            .bins
            .chunks(width.max(1))
            .map(|c| c.iter().map(|b| b.1).sum())
            .collect();
        let total: u64 = merged.iter().sum();
        let floor = total / 100;
        (0..merged.len())
            .filter(|&i| {
                let v = merged[i];
                let left = if i == 0 { 0 } else { merged[i - 1] };
                let right = merged.get(i + 1).copied().unwrap_or(0);
                v > floor && v >= left && v > right
            })
            .count()
    }

    pub fn mean(&self) -> f64 {
        let n: u64 = self.bins.iter().map(|b| b.1).sum();
        self.bins.iter().map(|&(c, k)| c as f64 * k as f64).sum::<f64>() / n as f64
    }

    /// Two-column `bin_center<TAB>count` table.
    pub fn to_table(&self) -> String {
        let mut out = String::from("bin_center\tcount\n");
        for (c, k) in &self.bins {
            let _ = writeln!(out, "{c}\t{k}");
        }
        out
    }
}

pub fn ssr_histogram<R: Rng + ?Sized>(
    p_up: f64,
    model: &ReadoutModel,
    n_shots: usize,
    rng: &mut R,
) -> Result<SsrHistogram> {
    let photon = model.photon.ok_or(Error::NoPhotonModel)?;
    let dist = |s: NuclearState| {
        let mean = photon.mean(s).max(f64::MIN_POSITIVE);
        Poisson::new(mean).map_err(|e| Error::config("readout.photon", e.to_string()))
    };
    let up = dist(NuclearState::Up)?;
    let down = dist(NuclearState::Down)?;
    let mut counts = Vec::with_capacity(n_shots);
    let mut misclassified = 0;
    for _ in 0..n_shots {
        let truth = if rng.random::<f64>() < p_up {
            Outcome::Up
        } else {
            Outcome::Down
        };
        let c = match truth {
            Outcome::Up => up.sample(rng),
            Outcome::Down => down.sample(rng),
        } as u64;
        if photon.classify(c) != truth {
            misclassified += 1;
        }
        counts.push(c);
    }
    let lo = counts.iter().copied().min().unwrap_or(0);
    let hi = counts.iter().copied().max().unwrap_or(0);
    let mut bins: Vec<(u64, u64)> = (lo..=hi).map(|c| (c, 0)).collect();
    for c in counts {
        bins[(c - lo) as usize].1 += 1;
    }
    Ok(SsrHistogram {
        bins,
        shots: n_shots,
        misclassified,
    })
}
