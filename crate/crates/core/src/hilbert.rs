//! Operators, basis states and density matrices for the electron ⊗ nuclear
//! register.
//!
//! Index of `|e, n⟩` is `2·e + n` with `e ∈ {0 ↦ |0⟩, 1 ↦ |−1⟩}` and
//! `n ∈ {0 ↦ |↑⟩, 1 ↦ |↓⟩}`. Spin operators are σ/2, so `S_z |0⟩ = +½ |0⟩`.
//!
//! Matrices serialize as four lines of four whitespace-separated `re,im`
//! pairs in row-major order (see [`matrix_to_text`]).

use std::fmt;

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector2, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type C64 = Complex64;
pub type Mat2 = Matrix2<C64>;
pub type Mat4 = Matrix4<C64>;
pub type Ket2 = Vector2<C64>;
pub type Ket = Vector4<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElectronState {
    /// m_s = 0
    E0,
    /// m_s = −1
    Em1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuclearState {
    Up,
    Down,
}

impl ElectronState {
    pub fn index(self) -> usize {
        match self {
            ElectronState::E0 => 0,
            ElectronState::Em1 => 1,
        }
    }
}

impl NuclearState {
    pub fn index(self) -> usize {
        match self {
            NuclearState::Up => 0,
            NuclearState::Down => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BasisLabel {
    pub electron: ElectronState,
    pub nuclear: NuclearState,
}

impl BasisLabel {
    pub const ALL: [BasisLabel; 4] = [
        BasisLabel::new(ElectronState::E0, NuclearState::Up),
        BasisLabel::new(ElectronState::E0, NuclearState::Down),
        BasisLabel::new(ElectronState::Em1, NuclearState::Up),
        BasisLabel::new(ElectronState::Em1, NuclearState::Down),
    ];

    pub const fn new(electron: ElectronState, nuclear: NuclearState) -> Self {
        BasisLabel { electron, nuclear }
    }

    pub fn index(self) -> usize {
        2 * self.electron.index() + self.nuclear.index()
    }
}

impl fmt::Display for BasisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = match self.electron {
            ElectronState::E0 => "0",
            ElectronState::Em1 => "-1",
        };
        let n = match self.nuclear {
            NuclearState::Up => "up",
            NuclearState::Down => "down",
        };
        write!(f, "|{e},{n}>")
    }
}

pub fn identity2() -> Mat2 {
    Mat2::identity()
}

pub fn sigma_x() -> Mat2 {
    Mat2::new(ZERO, ONE, ONE, ZERO)
}

pub fn sigma_y() -> Mat2 {
    Mat2::new(ZERO, -I, I, ZERO)
}

pub fn sigma_z() -> Mat2 {
    Mat2::new(ONE, ZERO, ZERO, -ONE)
}

/// Kronecker product `a ⊗ b` with `a` acting on the electron.
pub fn kron(a: &Mat2, b: &Mat2) -> Mat4 {
    Mat4::from_fn(|r, c| a[(r / 2, c / 2)] * b[(r % 2, c % 2)])
}

pub fn kron_ket(a: &Ket2, b: &Ket2) -> Ket {
    Ket::from_fn(|r, _| a[r / 2] * b[r % 2])
}

pub fn electron_ket(s: ElectronState) -> Ket2 {
    match s {
        ElectronState::E0 => Ket2::new(ONE, ZERO),
        ElectronState::Em1 => Ket2::new(ZERO, ONE),
    }
}

pub fn nuclear_ket(s: NuclearState) -> Ket2 {
    match s {
        NuclearState::Up => Ket2::new(ONE, ZERO),
        NuclearState::Down => Ket2::new(ZERO, ONE),
    }
}

/// `|+⟩ = (|0⟩ + i|−1⟩)/√2`
pub fn plus() -> Ket2 {
    Ket2::new(ONE, I) * C64::from(std::f64::consts::FRAC_1_SQRT_2)
}

/// `|−⟩ = (|0⟩ − i|−1⟩)/√2`
pub fn minus() -> Ket2 {
    Ket2::new(ONE, -I) * C64::from(std::f64::consts::FRAC_1_SQRT_2)
}

pub fn basis_ket(label: BasisLabel) -> Ket {
    kron_ket(&electron_ket(label.electron), &nuclear_ket(label.nuclear))
}

/// Normalised `(|+↑⟩ + |−↓⟩)/√2`, the state prepared by the phase-code encoder.
pub fn code_state() -> Ket {
    code_state_with_phase(0.0)
}

/// Normalised `(|+↑⟩ + e^{iΦ}|−↓⟩)/√2`.
pub fn code_state_with_phase(phi: f64) -> Ket {
    let up = nuclear_ket(NuclearState::Up);
    let down = nuclear_ket(NuclearState::Down);
    (kron_ket(&plus(), &up) + kron_ket(&minus(), &down) * C64::from_polar(1.0, phi))
        * C64::from(std::f64::consts::FRAC_1_SQRT_2)
}

/// Projector `|e⟩⟨e| ⊗ 1`.
pub fn electron_projector(s: ElectronState) -> Mat4 {
    let k = electron_ket(s);
    kron(&(k * k.adjoint()), &identity2())
}

/// Projector `1 ⊗ |n⟩⟨n|`.
pub fn nuclear_projector(s: NuclearState) -> Mat4 {
    let k = nuclear_ket(s);
    kron(&identity2(), &(k * k.adjoint()))
}

fn max_abs(m: &Mat4) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// A 4×4 operator on the register.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Operator(pub Mat4);

impl Operator {
    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn electron(m: &Mat2) -> Self {
        Operator(kron(m, &identity2()))
    }

    pub fn nuclear(m: &Mat2) -> Self {
        Operator(kron(&identity2(), m))
    }

    pub fn dagger(&self) -> Self {
        Operator(self.0.adjoint())
    }

    pub fn commutator(&self, other: &Operator) -> Self {
        Operator(self.0 * other.0 - other.0 * self.0)
    }

    /// Largest entrywise deviation from Hermiticity.
    pub fn hermiticity_error(&self) -> f64 {
        max_abs(&(self.0 - self.0.adjoint()))
    }

    /// Largest entrywise deviation of `U†U` from the identity.
    pub fn unitarity_error(&self) -> f64 {
        max_abs(&(self.0.adjoint() * self.0 - Mat4::identity()))
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_error() <= tol
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = (self.0 + self.0.adjoint()) * C64::from(0.5);
        let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }
}

impl std::ops::Mul for Operator {
    type Output = Operator;
    fn mul(self, rhs: Operator) -> Operator {
        Operator(self.0 * rhs.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpinOperators {
    pub sx: Operator,
    pub sy: Operator,
    pub sz: Operator,
    pub ix: Operator,
    pub iy: Operator,
    pub iz: Operator,
}

impl SpinOperators {
    pub fn named(&self) -> [(&'static str, Operator); 6] {
        [
            ("S_x", self.sx),
            ("S_y", self.sy),
            ("S_z", self.sz),
            ("I_x", self.ix),
            ("I_y", self.iy),
            ("I_z", self.iz),
        ]
    }
}

pub fn spin_operators() -> SpinOperators {
    let h = C64::from(0.5);
    SpinOperators {
        sx: Operator::electron(&(sigma_x() * h)),
        sy: Operator::electron(&(sigma_y() * h)),
        sz: Operator::electron(&(sigma_z() * h)),
        ix: Operator::nuclear(&(sigma_x() * h)),
        iy: Operator::nuclear(&(sigma_y() * h)),
        iz: Operator::nuclear(&(sigma_z() * h)),
    }
}

/// Tolerances used by [`DensityMatrix::new`].
pub const STATE_TOL: f64 = 1e-9;

/// Register state. Construction through [`DensityMatrix::new`] validates
/// Hermiticity, unit trace and positivity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMatrix(Mat4);

impl DensityMatrix {
    pub fn new(m: Mat4) -> Result<Self> {
        let rho = DensityMatrix(m);
        rho.check(STATE_TOL)?;
        Ok(rho)
    }

    /// Wrap without validation. Callers guarantee a physical state.
    pub(crate) fn from_raw(m: Mat4) -> Self {
        DensityMatrix(m)
    }

    pub fn pure(ket: &Ket) -> Result<Self> {
        let norm = ket.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        let k = ket / C64::from(norm);
        Ok(DensityMatrix(k * k.adjoint()))
    }

    pub fn basis(label: BasisLabel) -> Self {
        let mut m = Mat4::zeros();
        let i = label.index();
        m[(i, i)] = ONE;
        DensityMatrix(m)
    }

    pub fn maximally_mixed() -> Self {
        DensityMatrix(Mat4::identity() * C64::from(0.25))
    }

    /// `ρ_e ⊗ ρ_n`; both factors must be valid qubit states.
    pub fn product(rho_e: &Mat2, rho_n: &Mat2) -> Result<Self> {
        DensityMatrix::new(kron(rho_e, rho_n))
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn into_matrix(self) -> Mat4 {
        self.0
    }

    pub fn entry(&self, r: usize, c: usize) -> C64 {
        self.0[(r, c)]
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn purity(&self) -> f64 {
        (self.0 * self.0).trace().re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        Operator(self.0).eigenvalues()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        let herm = Operator(self.0).hermiticity_error();
        if herm > tol {
            return Err(Error::InvalidState(format!("not Hermitian (error {herm:.2e})")));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > tol || tr.im.abs() > tol {
            return Err(Error::InvalidState(format!("trace {tr}")));
        }
        let min = self.min_eigenvalue();
        if min < -tol {
            return Err(Error::InvalidState(format!("negative eigenvalue {min:.3e}")));
        }
        Ok(())
    }

    pub fn populations(&self) -> [f64; 4] {
        [0, 1, 2, 3].map(|i| self.0[(i, i)].re)
    }

    pub fn population(&self, label: BasisLabel) -> f64 {
        let i = label.index();
        self.0[(i, i)].re
    }

    /// `[P(|0⟩), P(|−1⟩)]`
    pub fn electron_populations(&self) -> [f64; 2] {
        let p = self.populations();
        [p[0] + p[1], p[2] + p[3]]
    }

    /// `[P(↑), P(↓)]`
    pub fn nuclear_populations(&self) -> [f64; 2] {
        let p = self.populations();
        [p[0] + p[2], p[1] + p[3]]
    }

    /// `U ρ U†`
    pub fn transform(&self, u: &Mat4) -> Self {
        DensityMatrix(u * self.0 * u.adjoint())
    }

    /// Reduced nuclear state `Tr_e ρ`.
    pub fn partial_trace_electron(&self) -> Mat2 {
        Mat2::from_fn(|r, c| self.0[(r, c)] + self.0[(r + 2, c + 2)])
    }

    /// Reduced electron state `Tr_n ρ`.
    pub fn partial_trace_nuclear(&self) -> Mat2 {
        Mat2::from_fn(|r, c| self.0[(2 * r, 2 * c)] + self.0[(2 * r + 1, 2 * c + 1)])
    }

    pub fn to_text(&self) -> String {
        matrix_to_text(&self.0)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        DensityMatrix::new(matrix_from_text(s)?)
    }
}

/// Random mixed state from the Ginibre ensemble of the given rank.
pub fn random_density_matrix<R: rand::Rng + ?Sized>(rng: &mut R, rank: usize) -> DensityMatrix {
    use rand_distr::StandardNormal;
    let rank = rank.clamp(1, 4);
    let mut g = Mat4::zeros();
    for r in 0..4 {
        for c in 0..rank {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            g[(r, c)] = C64::new(re, im);
        }
    }
    let m = g * g.adjoint();
    let tr = m.trace();
    DensityMatrix(m / tr)
}

/// `⟨ψ|ρ|ψ⟩` for a normalised target.
pub fn fidelity(rho: &DensityMatrix, target: &Ket) -> f64 {
    (target.adjoint() * rho.matrix() * target)[(0, 0)].re
}

/// `|ψ⟩⟨ψ|` from raw amplitudes, normalised.
pub fn pure_state(amplitudes: &[C64; 4]) -> Result<DensityMatrix> {
    DensityMatrix::pure(&Ket::from_column_slice(amplitudes))
}

pub fn matrix_to_text(m: &Mat4) -> String {
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4)
            .map(|c| format!("{},{}", m[(r, c)].re, m[(r, c)].im))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn matrix_from_text(s: &str) -> Result<Mat4> {
    let rows: Vec<&str> = s
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if rows.len() != 4 {
        return Err(Error::Parse(format!("expected 4 rows, found {}", rows.len())));
    }
    let mut m = Mat4::zeros();
    for (r, line) in rows.iter().enumerate() {
        let cells: Vec<&str> = line.split_whitespace().collect();
        if cells.len() != 4 {
            return Err(Error::Parse(format!(
                "row {r}: expected 4 entries, found {}",
                cells.len()
            )));
        }
        for (c, cell) in cells.iter().enumerate() {
            let (re, im) = cell
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("entry ({r},{c}) is not `re,im`")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("entry ({r},{c}): {e}")))
            };
            m[(r, c)] = C64::new(parse(re)?, parse(im)?);
        }
    }
    Ok(m)
}
