//! Decay-cosine fits, posteriors over the decay rate and sensitivity curves.
//!
//! Models:
//!
//! ```text
//! single: A·e^{−γx}·cos(ωx + φ) + c                      [A, γ, ω, φ, c]
//! double: Σ_k A_k·e^{−Γ_k x}·cos(ω_k x + φ_k) + c          [A1, Γ1, ω1, φ1, A2, Γ2, ω2, φ2, c]
//! ```
//!
//! ω is angular (rad per unit of x). Internally x is rescaled to `[0, 1]`
//! so rates and frequencies are well conditioned.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    #[default]
    Single,
    Double,
}

impl FitModel {
    pub fn n_params(self) -> usize {
        match self {
            FitModel::Single => 5,
            FitModel::Double => 9,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            FitModel::Single => &["A", "gamma", "omega", "phi", "c"],
            FitModel::Double => &["A1", "Gamma1", "omega1", "phi1", "A2", "Gamma2", "omega2", "phi2", "c"],
        }
    }

    fn n_components(self) -> usize {
        match self {
            FitModel::Single => 1,
            FitModel::Double => 2,
        }
    }

    /// Model value at `x`.
    pub fn eval(self, p: &[f64], x: f64) -> f64 {
        let mut v = p[p.len() - 1];
        for k in 0..self.n_components() {
            let q = &p[4 * k..4 * k + 4];
            v += q[0] * (-q[1] * x).exp() * (q[2] * x + q[3]).cos();
        }
        v
    }

    fn grad(self, p: &[f64], x: f64, g: &mut [f64]) {
        for k in 0..self.n_components() {
            let q = &p[4 * k..4 * k + 4];
            let e = (-q[1] * x).exp();
            let (sn, cs) = (q[2] * x + q[3]).sin_cos();
            g[4 * k] = e * cs;
            g[4 * k + 1] = -x * q[0] * e * cs;
            g[4 * k + 2] = -x * q[0] * e * sn;
            g[4 * k + 3] = -q[0] * e * sn;
        }
        let n = g.len();
        g[n - 1] = 1.0;
    }

    fn parse(s: &str) -> Option<FitModel> {
        match s {
            "single" => Some(FitModel::Single),
            "double" => Some(FitModel::Double),
            _ => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            FitModel::Single => "single",
            FitModel::Double => "double",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub model: FitModel,
    /// Parameters in the units of the data (`x` in seconds gives γ in s⁻¹).
    pub params: Vec<f64>,
    /// One-sigma uncertainties from the Gauss-Newton curvature.
    pub stderr: Vec<f64>,
    /// `sqrt(Σ r²)` with residuals weighted by `1/y_err` when given.
    pub residual_norm: f64,
    pub iterations: usize,
    pub n_points: usize,
    /// False when the data carry no oscillation, so γ is meaningless.
    pub gamma_identified: bool,
}

impl FitResult {
    pub fn eval(&self, x: f64) -> f64 {
        self.model.eval(&self.params, x)
    }

    /// Index of the component with the largest |A|.
    fn dominant(&self) -> usize {
        match self.model {
            FitModel::Single => 0,
            FitModel::Double => {
                if self.params[0].abs() >= self.params[4].abs() {
                    0
                } else {
                    1
                }
            }
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.params[4 * self.dominant()]
    }

    pub fn gamma(&self) -> f64 {
        self.params[4 * self.dominant() + 1]
    }

    pub fn omega(&self) -> f64 {
        self.params[4 * self.dominant() + 2]
    }

    pub fn offset(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Peak-to-peak oscillation amplitude of the dominant component, `2|A|`.
    pub fn contrast(&self) -> f64 {
        2.0 * self.amplitude().abs()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# model: {}", self.model.label());
        let _ = writeln!(out, "# residual_norm: {:e}", self.residual_norm);
        let _ = writeln!(out, "# iterations: {}", self.iterations);
        let _ = writeln!(out, "# n_points: {}", self.n_points);
        let _ = writeln!(out, "# gamma_identified: {}", self.gamma_identified);
        out.push_str("param\tvalue\tstderr\n");
        for ((name, v), e) in self.model.names().iter().zip(&self.params).zip(&self.stderr) {
            let _ = writeln!(out, "{name}\t{v:e}\t{e:e}");
        }
        out
    }

    pub fn from_table(text: &str) -> Result<FitResult> {
        let mut model = None;
        let mut residual_norm = 0.0;
        let mut iterations = 0;
        let mut n_points = 0;
        let mut gamma_identified = true;
        let mut params = Vec::new();
        let mut stderr = Vec::new();
        let bad = |line: usize, message: String| Error::Table { line, message };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once(':') {
                    let v = v.trim();
                    match k.trim() {
                        "model" => {
                            model = Some(FitModel::parse(v).ok_or_else(|| bad(i + 1, format!("unknown model `{v}`")))?)
                        }
                        "residual_norm" => residual_norm = v.parse().map_err(|e| bad(i + 1, format!("{e}")))?,
                        "iterations" => iterations = v.parse().map_err(|e| bad(i + 1, format!("{e}")))?,
                        "n_points" => n_points = v.parse().map_err(|e| bad(i + 1, format!("{e}")))?,
                        "gamma_identified" => gamma_identified = v == "true",
                        _ => {}
                    }
                }
                continue;
            }
            if line.starts_with("param") {
                continue;
            }
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != 3 {
                return Err(bad(i + 1, "expected `param<TAB>value<TAB>stderr`".into()));
            }
            params.push(cells[1].parse().map_err(|e| bad(i + 1, format!("{e}")))?);
            stderr.push(cells[2].parse().map_err(|e| bad(i + 1, format!("{e}")))?);
        }
        let model = model.ok_or_else(|| bad(0, "missing `# model:` header".into()))?;
        if params.len() != model.n_params() {
            return Err(bad(0, format!("expected {} parameters, found {}", model.n_params(), params.len())));
        }
        Ok(FitResult {
            model,
            params,
            stderr,
            residual_norm,
            iterations,
            n_points,
            gamma_identified,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iter: 3000 }
    }
}

/// Affine map of x onto `[0, 1]`. Rates and frequencies scale with `span`;
/// phases pick up `ω·x0`.
#[derive(Clone, Copy, Debug)]
struct Scale {
    x0: f64,
    span: f64,
}

impl Scale {
    fn of(x: &[f64]) -> Scale {
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        Scale { x0: lo, span }
    }

    fn x(&self, x: f64) -> f64 {
        (x - self.x0) / self.span
    }

    /// Data-unit parameters to scaled ones.
    fn scaled(&self, model: FitModel, p: &[f64]) -> Vec<f64> {
        let mut q = p.to_vec();
        for k in 0..model.n_components() {
            let (a, g, w, f) = (p[4 * k], p[4 * k + 1], p[4 * k + 2], p[4 * k + 3]);
            // A e^{−γx} cos(ωx + φ) with x = x0 + span·u.
            q[4 * k] = a * (-g * self.x0).exp();
            q[4 * k + 1] = g * self.span;
            q[4 * k + 2] = w * self.span;
            q[4 * k + 3] = f + w * self.x0;
        }
        q
    }

    fn unscaled(&self, model: FitModel, q: &[f64]) -> Vec<f64> {
        let mut p = q.to_vec();
        for k in 0..model.n_components() {
            let g = q[4 * k + 1] / self.span;
            let w = q[4 * k + 2] / self.span;
            p[4 * k] = q[4 * k] * (g * self.x0).exp();
            p[4 * k + 1] = g;
            p[4 * k + 2] = w;
            p[4 * k + 3] = q[4 * k + 3] - w * self.x0;
        }
        p
    }

    fn stderr_to_data(&self, model: FitModel, q: &[f64], e: &[f64]) -> Vec<f64> {
        let mut out = e.to_vec();
        for k in 0..model.n_components() {
            let g = q[4 * k + 1] / self.span;
            out[4 * k] = e[4 * k] * (g * self.x0).exp();
            out[4 * k + 1] = e[4 * k + 1] / self.span;
            out[4 * k + 2] = e[4 * k + 2] / self.span;
        }
        out
    }
}

/// Periodogram of uniformly sampled data: `(frequency, power)` pairs for
/// the non-negative half spectrum, in cycles per unit of x.
pub fn periodogram(x: &[f64], y: &[f64], window: Window, pad: usize) -> Vec<(f64, f64)> {
    let n = y.len();
    if n < 2 {
        return Vec::new();
    }
    let dx = (x[n - 1] - x[0]) / (n - 1) as f64;
    let mean = y.iter().sum::<f64>() / n as f64;
    let m = n * pad.max(1);
    let mut buf: Vec<Complex<f64>> = (0..m)
        .map(|i| {
            if i < n {
                Complex::new((y[i] - mean) * window.weight(i, n), 0.0)
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    (0..=m / 2)
        .map(|k| (k as f64 / (m as f64 * dx), buf[k].norm_sqr()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Rectangular,
    Hann,
    Blackman,
}

impl Window {
    fn weight(self, i: usize, n: usize) -> f64 {
        let t = TAU * i as f64 / (n - 1) as f64;
        match self {
            Window::Rectangular => 1.0,
            Window::Hann => 0.5 - 0.5 * t.cos(),
            Window::Blackman => 0.42 - 0.5 * t.cos() + 0.08 * (2.0 * t).cos(),
        }
    }
}

/// Fraction of the (mean-removed, Blackman-windowed) spectral power that
/// falls within `half_width` bins of frequency `f0`.
pub fn band_power_fraction(x: &[f64], y: &[f64], f0: f64, half_width: usize) -> f64 {
    let spec = periodogram(x, y, Window::Blackman, 1);
    if spec.len() < 2 {
        return 0.0;
    }
    let df = spec[1].0;
    let k0 = (f0 / df).round() as isize;
    let total: f64 = spec.iter().skip(1).map(|s| s.1).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let band: f64 = spec
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(k, _)| (*k as isize - k0).abs() <= half_width as isize)
        .map(|(_, s)| s.1)
        .sum();
    band / total
}

/// Frequencies (cycles per unit x) of the strongest local maxima, strongest
/// first, at least `min_sep` apart.
pub fn spectral_peaks(x: &[f64], y: &[f64], count: usize) -> Vec<f64> {
    let pad = 16;
    let spec = periodogram(x, y, Window::Hann, pad);
    if spec.len() < 3 {
        return Vec::new();
    }
    let n = y.len();
    let span = x[n - 1] - x[0];
    let min_sep = 1.0 / span;
    let mut maxima: Vec<(f64, f64)> = (1..spec.len() - 1)
        .filter(|&k| spec[k].1 > spec[k - 1].1 && spec[k].1 >= spec[k + 1].1)
        .map(|k| spec[k])
        .collect();
    maxima.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut out: Vec<f64> = Vec::new();
    for (f, _) in maxima {
        if out.iter().all(|g| (g - f).abs() >= min_sep) {
            out.push(f);
        }
        if out.len() == count {
            break;
        }
    }
    out
}

/// Weighted residuals and Jacobian in scaled coordinates.
struct Problem<'a> {
    model: FitModel,
    u: Vec<f64>,
    y: &'a [f64],
    w: Vec<f64>,
}

impl Problem<'_> {
    fn cost(&self, q: &[f64]) -> f64 {
        self.u
            .iter()
            .zip(self.y)
            .zip(&self.w)
            .map(|((&u, &y), &w)| {
                let r = (y - self.model.eval(q, u)) * w;
                r * r
            })
            .sum::<f64>()
            * 0.5
    }

    fn normal_equations(&self, q: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let p = q.len();
        let mut jtj = DMatrix::zeros(p, p);
        let mut jtr = DVector::zeros(p);
        let mut g = vec![0.0; p];
        for ((&u, &y), &w) in self.u.iter().zip(self.y).zip(&self.w) {
            self.model.grad(q, u, &mut g);
            let r = (y - self.model.eval(q, u)) * w;
            for a in 0..p {
                let ga = g[a] * w;
                jtr[a] += ga * r;
                for b in a..p {
                    jtj[(a, b)] += ga * g[b] * w;
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        (jtj, jtr)
    }

    fn project(&self, q: &mut [f64]) {
        for k in 0..self.model.n_components() {
            q[4 * k + 1] = q[4 * k + 1].max(0.0);
        }
    }

    /// Levenberg-Marquardt from `q0`. Returns `(q, cost, iterations, converged)`.
    fn solve(&self, q0: &[f64], max_iter: usize) -> (Vec<f64>, f64, usize, bool) {
        let mut q = q0.to_vec();
        self.project(&mut q);
        let mut cost = self.cost(&q);
        let mut lambda = 1e-3;
        for iter in 1..=max_iter {
            let (jtj, jtr) = self.normal_equations(&q);
            let mut accepted = false;
            while lambda < 1e20 {
                let mut a = jtj.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
                }
                let Some(chol) = a.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = chol.solve(&jtr);
                let mut trial: Vec<f64> = q.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
                self.project(&mut trial);
                let c = self.cost(&trial);
                if c.is_finite() && c <= cost {
                    let step: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                    let size: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gain = cost - c;
                    q = trial;
                    cost = c;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if gain <= 1e-15 * cost || step <= 1e-13 * (size + 1e-13) || cost < 1e-32 {
                        return (q, cost, iter, true);
                    }
                    break;
                }
                lambda *= 4.0;
            }
            if !accepted {
                // No descent direction left at any damping: a stationary point.
                return (q, cost, iter, true);
            }
        }
        (q, cost, max_iter, false)
    }

    /// Linear least squares for amplitudes and offset at fixed rates and
    /// frequencies; returns a full parameter vector.
    fn linear_seed(&self, rates: &[f64], omegas: &[f64]) -> Option<Vec<f64>> {
        let nc = rates.len();
        let cols = 2 * nc + 1;
        let n = self.u.len();
        let mut a = DMatrix::zeros(n, cols);
        let mut b = DVector::zeros(n);
        for (i, (&u, (&y, &w))) in self.u.iter().zip(self.y.iter().zip(&self.w)).enumerate() {
            for k in 0..nc {
                let e = (-rates[k] * u).exp();
                let (sn, cs) = (omegas[k] * u).sin_cos();
                a[(i, 2 * k)] = e * cs * w;
                a[(i, 2 * k + 1)] = -e * sn * w;
            }
            a[(i, cols - 1)] = w;
            b[i] = y * w;
        }
        let sol = a.svd(true, true).solve(&b, 1e-12).ok()?;
        let mut q = Vec::with_capacity(4 * nc + 1);
        for k in 0..nc {
            let (c, s) = (sol[2 * k], sol[2 * k + 1]);
            q.extend_from_slice(&[c.hypot(s), rates[k], omegas[k], s.atan2(c)]);
        }
        q.push(sol[cols - 1]);
        Some(q)
    }
}

fn wrap_phase(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(TAU);
    if p > PI {
        p -= TAU;
    }
    p
}

/// Make amplitudes non-negative, wrap phases, order components by ω.
fn canonical(model: FitModel, p: &mut [f64]) {
    for k in 0..model.n_components() {
        if p[4 * k + 2] < 0.0 {
            p[4 * k + 2] = -p[4 * k + 2];
            p[4 * k + 3] = -p[4 * k + 3];
        }
        if p[4 * k] < 0.0 {
            p[4 * k] = -p[4 * k];
            p[4 * k + 3] += PI;
        }
        p[4 * k + 3] = wrap_phase(p[4 * k + 3]);
    }
    if model == FitModel::Double && p[2] > p[6] {
        for i in 0..4 {
            p.swap(i, i + 4);
        }
    }
}

/// Least-squares fit of `model` to `(x, y)`. Residuals are weighted by
/// `1/y_err` when errors are given and positive. Without `init`, frequency
/// seeds come from a zero-padded periodogram and several decay-rate seeds
/// are tried.
pub fn fit_curve(
    x: &[f64],
    y: &[f64],
    y_err: Option<&[f64]>,
    model: FitModel,
    init: Option<&[f64]>,
) -> Result<FitResult> {
    fit_curve_with(x, y, y_err, model, init, FitOptions::default())
}

pub fn fit_curve_with(
    x: &[f64],
    y: &[f64],
    y_err: Option<&[f64]>,
    model: FitModel,
    init: Option<&[f64]>,
    opts: FitOptions,
) -> Result<FitResult> {
    let np = model.n_params();
    if x.len() != y.len() || x.len() < 3 * np {
        return Err(Error::TooFewPoints {
            needed: 3 * np,
            got: x.len().min(y.len()),
        });
    }
    let n = x.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let spread = y.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * mean.abs().max(1.0) {
        let mut params = vec![0.0; np];
        params[np - 1] = mean;
        return Ok(FitResult {
            model,
            params,
            stderr: vec![f64::NAN; np],
            residual_norm: (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt(),
            iterations: 0,
            n_points: n,
            gamma_identified: false,
        });
    }

    let scale = Scale::of(x);
    let w: Vec<f64> = match y_err {
        Some(e) if e.iter().all(|v| *v > 0.0) => e.iter().map(|v| 1.0 / v).collect(),
        _ => vec![1.0; n],
    };
    let prob = Problem {
        model,
        u: x.iter().map(|&v| scale.x(v)).collect(),
        y,
        w,
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(p0) = init {
        starts.push(scale.scaled(model, p0));
    } else {
        let peaks: Vec<f64> = spectral_peaks(&prob.u, y, 2).iter().map(|f| TAU * f).collect();
        let nc = model.n_components();
        let mut omegas = peaks.clone();
        let first = omegas.first().copied().unwrap_or(TAU);
        while omegas.len() < nc {
            let last = *omegas.last().unwrap_or(&first);
            omegas.push(last * 1.25 + TAU);
        }
        let omega_sets: Vec<Vec<f64>> = match nc {
            1 => peaks.iter().take(2).map(|&w| vec![w]).collect::<Vec<_>>(),
            _ => vec![omegas[..2].to_vec()],
        };
        let omega_sets = if omega_sets.is_empty() { vec![omegas[..nc].to_vec()] } else { omega_sets };
        for ws in &omega_sets {
            for &g in &[0.0, 0.5, 2.0, 5.0] {
                let rates = vec![g; nc];
                if let Some(q) = prob.linear_seed(&rates, ws) {
                    starts.push(q);
                }
            }
        }
    }

    let mut best: Option<(Vec<f64>, f64, usize, bool)> = None;
    for q0 in &starts {
        let run = prob.solve(q0, opts.max_iter);
        let better = match &best {
            None => true,
            Some(b) => run.1 < b.1,
        };
        if better {
            best = Some(run);
        }
    }
    let (q, cost, iterations, converged) = best.expect("at least one start");

    let (jtj, _) = prob.normal_equations(&q);
    let dof = (n - np).max(1) as f64;
    let s2 = if y_err.is_some() { 1.0 } else { 2.0 * cost / dof };
    let stderr_scaled: Vec<f64> = match jtj.clone().try_inverse() {
        Some(inv) => (0..np).map(|i| (inv[(i, i)].abs() * s2).sqrt()).collect(),
        None => vec![f64::NAN; np],
    };
    let mut params = scale.unscaled(model, &q);
    let stderr = scale.stderr_to_data(model, &q, &stderr_scaled);
    canonical(model, &mut params);
    let amp_max = (0..model.n_components()).map(|k| params[4 * k].abs()).fold(0.0, f64::max);
    let result = FitResult {
        model,
        params,
        stderr,
        residual_norm: (2.0 * cost).sqrt(),
        iterations,
        n_points: n,
        gamma_identified: amp_max > 1e-9 * spread,
    };
    if !converged {
        return Err(Error::FitNotConverged {
            iterations,
            cost,
            best: Box::new(result),
        });
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorSettings {
    pub chains: usize,
    /// Recorded sweeps per chain after burn-in.
    pub samples: usize,
    pub burn_in: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for PosteriorSettings {
    fn default() -> Self {
        PosteriorSettings {
            chains: 4,
            samples: 10_000,
            burn_in: 3_000,
            bins: 80,
            seed: 0,
        }
    }
}

/// Uniform prior on the decay rate(s), `[0, gamma_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPrior {
    pub gamma_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    /// Bin centres over γ.
    pub grid: Vec<f64>,
    /// Normalised density at each bin centre.
    pub pdf: Vec<f64>,
    pub mode: f64,
    pub mean: f64,
    pub std: f64,
    pub level: f64,
    pub ci: (f64, f64),
    pub acceptance_rate: f64,
    pub r_hat: f64,
    pub chains: usize,
    pub samples_per_chain: usize,
    pub burn_in: usize,
    pub warnings: Vec<String>,
    /// Least-squares fit used to start the chains.
    pub start: FitResult,
}

impl Posterior {
    pub fn integral(&self) -> f64 {
        if self.grid.len() < 2 {
            return 1.0;
        }
        let w = self.grid[1] - self.grid[0];
        self.pdf.iter().sum::<f64>() * w
    }

    /// `gamma<TAB>pdf` grid.
    pub fn to_table(&self) -> String {
        let mut out = String::from("gamma\tpdf\n");
        for (g, p) in self.grid.iter().zip(&self.pdf) {
            let _ = writeln!(out, "{g:e}\t{p:e}");
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::from("key\tvalue\n");
        let rows = [
            ("mode", self.mode),
            ("mean", self.mean),
            ("std", self.std),
            ("ci_level", self.level),
            ("ci_low", self.ci.0),
            ("ci_high", self.ci.1),
            ("acceptance_rate", self.acceptance_rate),
            ("r_hat", self.r_hat),
            ("chains", self.chains as f64),
            ("samples_per_chain", self.samples_per_chain as f64),
            ("burn_in", self.burn_in as f64),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k}\t{v:e}");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "# warning: {w}");
        }
        out
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = pos - lo as f64;
    sorted[lo] * (1.0 - f) + sorted[hi] * f
}

fn gelman_rubin(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    if m < 2 || n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m - 1) as f64 * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if w <= 0.0 {
        return 1.0;
    }
    let var = (n - 1) as f64 / n as f64 * w + b / n as f64;
    (var / w).sqrt()
}

/// Random-walk Metropolis over all model parameters with a Gaussian
/// likelihood, marginalised to the decay rate of the dominant component.
///
/// Updates are one parameter at a time; each step size is tuned during burn-in
/// towards an acceptance of 0.44. Amplitudes are kept non-negative and every
/// rate is restricted to the prior support.
pub fn posterior_gamma(
    x: &[f64],
    y: &[f64],
    y_err: &[f64],
    model: FitModel,
    prior: GammaPrior,
    settings: &PosteriorSettings,
) -> Result<Posterior> {
    if y_err.len() != y.len() || y_err.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("posterior needs positive y_err for every point".into()));
    }
    if settings.chains < 2 {
        return Err(Error::InvalidArgument("posterior needs at least 2 chains".into()));
    }
    let start = match fit_curve(x, y, Some(y_err), model, None) {
        Ok(f) => f,
        Err(Error::FitNotConverged { best, .. }) => *best,
        Err(e) => return Err(e),
    };
    let scale = Scale::of(x);
    let prob = Problem {
        model,
        u: x.iter().map(|&v| scale.x(v)).collect(),
        y,
        w: y_err.iter().map(|e| 1.0 / e).collect(),
    };
    let g_max = prior.gamma_max * scale.span;
    let nc = model.n_components();
    let np = model.n_params();
    let mut q0 = scale.scaled(model, &start.params);
    for k in 0..nc {
        q0[4 * k + 1] = q0[4 * k + 1].clamp(0.0, g_max);
    }
    let in_support = |q: &[f64]| (0..nc).all(|k| q[4 * k] >= 0.0 && (0.0..=g_max).contains(&q[4 * k + 1]));
    let steps0: Vec<f64> = {
        let (jtj, _) = prob.normal_equations(&q0);
        let inv = jtj.try_inverse();
        (0..np)
            .map(|i| {
                let s = inv.as_ref().map(|m| m[(i, i)].abs().sqrt()).unwrap_or(f64::NAN);
                if s.is_finite() && s > 0.0 {
                    s
                } else {
                    1e-3 * (q0[i].abs() + 1e-3)
                }
            })
            .collect()
    };
    let dominant_rate = |q: &[f64]| -> f64 {
        let k = if nc == 2 && q[4] > q[0] { 1 } else { 0 };
        q[4 * k + 1] / scale.span
    };

    let runs: Vec<(Vec<f64>, usize, usize)> = (0..settings.chains)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(settings.seed, c as u64);
            let mut steps = steps0.clone();
            let mut q = q0.clone();
            for i in 0..np {
                let z: f64 = r.sample(StandardNormal);
                let trial = q[i] + 0.5 * steps[i] * z;
                let mut t = q.clone();
                t[i] = trial;
                if in_support(&t) {
                    q = t;
                }
            }
            let mut logl = -prob.cost(&q);
            let mut acc_window = vec![0usize; np];
            let mut trace = Vec::with_capacity(settings.samples);
            let (mut accepted, mut proposed) = (0usize, 0usize);
            for sweep in 0..settings.burn_in + settings.samples {
                for i in 0..np {
                    let z: f64 = r.sample(StandardNormal);
                    let old = q[i];
                    q[i] = old + steps[i] * z;
                    let ok = if in_support(&q) {
                        let cand = -prob.cost(&q);
                        let u: f64 = r.random();
                        if u.ln() < cand - logl {
                            logl = cand;
                            true
                        } else {
                            false
                        }
                    } else {
                        false
                    };
                    if !ok {
                        q[i] = old;
                    }
                    if sweep < settings.burn_in {
                        acc_window[i] += ok as usize;
                    } else {
                        proposed += 1;
                        accepted += ok as usize;
                    }
                }
                if sweep < settings.burn_in && (sweep + 1) % 50 == 0 {
                    for i in 0..np {
                        let rate = acc_window[i] as f64 / 50.0;
                        steps[i] *= if rate > 0.44 { 1.25 } else { 0.8 };
                        acc_window[i] = 0;
                    }
                }
                if sweep >= settings.burn_in {
                    trace.push(dominant_rate(&q));
                }
            }
            (trace, accepted, proposed)
        })
        .collect();

    let accepted: usize = runs.iter().map(|r| r.1).sum();
    let proposed: usize = runs.iter().map(|r| r.2).sum();
    let acceptance_rate = accepted as f64 / proposed.max(1) as f64;
    let traces: Vec<Vec<f64>> = runs.into_iter().map(|r| r.0).collect();
    let r_hat = gelman_rubin(&traces);
    let mut pooled: Vec<f64> = traces.iter().flatten().copied().collect();
    pooled.sort_by(|a, b| a.total_cmp(b));
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let std = (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let level = 0.95;
    let ci = (quantile(&pooled, (1.0 - level) / 2.0), quantile(&pooled, (1.0 + level) / 2.0));

    let bins = settings.bins.max(2);
    let lo = pooled[0];
    let hi = pooled[pooled.len() - 1];
    let width = if hi > lo { (hi - lo) / bins as f64 } else { lo.abs().max(1e-300) * 1e-9 };
    let mut counts = vec![0usize; bins];
    for v in &pooled {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let grid: Vec<f64> = (0..bins).map(|k| lo + (k as f64 + 0.5) * width).collect();
    let pdf: Vec<f64> = counts.iter().map(|&c| c as f64 / (n * width)).collect();
    let kmax = (0..bins).max_by_key(|&k| counts[k]).unwrap_or(0);
    let mode = grid[kmax];

    let mut warnings = Vec::new();
    if !(0.1..=0.6).contains(&acceptance_rate) {
        let hint = if acceptance_rate < 0.1 { "lengthen burn-in or check y_err" } else { "lengthen burn-in so step sizes can grow" };
        let w = format!("acceptance rate {acceptance_rate:.3} outside [0.1, 0.6]; {hint}");
        log::warn!("{w}");
        warnings.push(w);
    }
    if r_hat > 1.1 {
        let w = format!("Gelman-Rubin R-hat {r_hat:.3} > 1.1; chains have not mixed");
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(Posterior {
        grid,
        pdf,
        mode,
        mean,
        std,
        level,
        ci,
        acceptance_rate,
        r_hat,
        chains: settings.chains,
        samples_per_chain: settings.samples,
        burn_in: settings.burn_in,
        warnings,
        start,
    })
}

/// Exponential contrast envelope `C(τ) = C0·e^{−γτ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Envelope {
    pub c0: f64,
    pub gamma: f64,
}

impl Envelope {
    /// Envelope of the dominant component of a fit.
    pub fn from_fit(fit: &FitResult) -> Envelope {
        Envelope {
            c0: fit.contrast(),
            gamma: fit.gamma(),
        }
    }

    pub fn contrast(&self, tau: f64) -> f64 {
        self.c0 * (-self.gamma * tau).exp()
    }

    /// `S(τ) = 1/(C(τ)·√τ)` in arbitrary units.
    pub fn sensitivity(&self, tau: f64) -> f64 {
        1.0 / (self.contrast(tau) * tau.sqrt())
    }

    fn log_s(&self, tau: f64) -> f64 {
        self.gamma * tau - 0.5 * tau.ln() - self.c0.ln()
    }

    /// `argmin S`, found by bisection on the sign of `d ln S/dτ`.
    /// `None` when S decreases monotonically (γ = 0).
    pub fn tau_star(&self) -> Option<f64> {
        if !(self.gamma > 0.0) {
            return None;
        }
        // d ln S/dτ = γ − 1/(2τ); C0 drops out.
        let slope = |t: f64| self.gamma - 0.5 / t;
        let (mut lo, mut hi) = (1e-9 / self.gamma, 1e3 / self.gamma);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if slope(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi / lo - 1.0 < 1e-14 {
                break;
            }
        }
        Some((lo * hi).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityCurve {
    pub tau: Vec<f64>,
    pub s: Vec<f64>,
    pub tau_star: Option<f64>,
}

impl SensitivityCurve {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(t) = self.tau_star {
            let _ = writeln!(out, "# tau_star: {t:e}");
        }
        out.push_str("tau\tsensitivity\n");
        for (t, s) in self.tau.iter().zip(&self.s) {
            let _ = writeln!(out, "{t:e}\t{s:e}");
        }
        out
    }
}

pub fn envelope_sensitivity(env: &Envelope, times: &[f64]) -> Result<SensitivityCurve> {
    if !(env.c0 > 0.0) {
        return Err(Error::NonPositiveContrast(env.c0));
    }
    Ok(SensitivityCurve {
        tau: times.to_vec(),
        s: times.iter().map(|&t| env.sensitivity(t)).collect(),
        tau_star: env.tau_star(),
    })
}

pub fn sensitivity_curve(fit: &FitResult, times: &[f64]) -> Result<SensitivityCurve> {
    envelope_sensitivity(&Envelope::from_fit(fit), times)
}

/// First τ in `[lo, hi]` beyond which `S_a < S_b`, located by a log-spaced
/// scan followed by bisection. `None` when the curves do not cross there.
pub fn crossover(a: &Envelope, b: &Envelope, lo: f64, hi: f64) -> Option<f64> {
    let d = |t: f64| a.log_s(t) - b.log_s(t);
    let n = 400;
    let grid: Vec<f64> = (0..=n).map(|k| lo * (hi / lo).powf(k as f64 / n as f64)).collect();
    for w in grid.windows(2) {
        let (l, r) = (w[0], w[1]);
        if d(l) >= 0.0 && d(r) < 0.0 {
            let (mut l, mut r) = (l, r);
            for _ in 0..200 {
                let m = 0.5 * (l + r);
                if d(m) >= 0.0 {
                    l = m;
                } else {
                    r = m;
                }
            }
            return Some(0.5 * (l + r));
        }
    }
    None
}
