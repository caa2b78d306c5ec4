// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

//! Noise spectra, stochastic trajectories, Monte-Carlo ensembles, quasi-static
//! sweeps and filter functions.
//!
//! Spectra are two-sided, `S(ω) = ∫ c(τ) e^{−iωτ} dτ`, normalized so that
//! `(1/2π)∫ S(ω) dω = c(0) = rms²`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densemath::{expm, pauli_basis, CMatrix, C64};
use crate::error::{Error, Result};
use crate::model::{AutocorrTerm, NoiseChannel, NoiseOperator, PulseGrid, SystemModel};
use crate::objective::phi0;
use crate::propagation::propagate;

/// Spectral shape of a time-dependent noise source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsdKind {
    /// `S(ω) ∝ 1/(A² + (ω−ω′)²)`, symmetrized in `ω`.
    Lorentzian { center: f64, width: f64 },
    /// `S(ω) ∝ 1/|ω|` on `[ω_l, ω_h]`.
    OneOverF { low: f64, high: f64 },
    ExpSum { terms: Vec<AutocorrTerm> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsdModel {
    #[serde(flatten)]
    pub kind: PsdKind,
    /// Noise rms in rad/s.
    pub rms: f64,
}

/// Autocorrelation expansion together with its fit quality.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub terms: Vec<AutocorrTerm>,
    /// Largest deviation of the normalized autocorrelation, relative to `c(0)`.
    pub residual: f64,
    pub warning: Option<String>,
}

impl PsdModel {
    pub fn lorentzian(center: f64, width: f64, rms: f64) -> Self {
        Self { kind: PsdKind::Lorentzian { center, width }, rms }
    }

    pub fn one_over_f(low: f64, high: f64, rms: f64) -> Self {
        Self { kind: PsdKind::OneOverF { low, high }, rms }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rms >= 0.0 && self.rms.is_finite()) {
            return Err(Error::InvalidArgument(format!("PSD rms must be finite and non-negative, got {}", self.rms)));
        }
        match &self.kind {
            PsdKind::Lorentzian { center, width } => {
                if !(*width > 0.0 && center.is_finite()) {
                    return Err(Error::InvalidArgument("Lorentzian PSD needs width > 0".into()));
                }
            }
            PsdKind::OneOverF { low, high } => {
                if !(*low > 0.0 && high > low && high.is_finite()) {
                    return Err(Error::InvalidArgument("1/f PSD needs 0 < ω_l < ω_h".into()));
                }
            }
            PsdKind::ExpSum { terms } => {
                NoiseChannel::time_dependent("psd", CMatrix::identity(1), 0.0, terms.clone())?;
                pair_up(terms)?;
            }
        }
        Ok(())
    }

    /// Spectrum of the expansion actually used for sampling and penalties.
    pub fn spectrum(&self, expansion: &[AutocorrTerm], omega: f64) -> f64 {
        expansion_spectrum(expansion, omega) * self.rms * self.rms
    }

    /// The analytic spectrum the expansion approximates.
    pub fn nominal_spectrum(&self, omega: f64) -> f64 {
        let r2 = self.rms * self.rms;
        match &self.kind {
            PsdKind::Lorentzian { center, width } => {
                let l = |x: f64| width / (width * width + x * x);
                r2 * (l(omega - center) + l(omega + center))
            }
            PsdKind::OneOverF { low, high } => {
                let w = omega.abs();
                if w < *low || w > *high {
                    0.0
                } else {
                    r2 * PI / ((high / low).ln() * w)
                }
            }
            PsdKind::ExpSum { terms } => r2 * expansion_spectrum(terms, omega),
        }
    }
}

/// `Σ_i 2·Re(−a_i/(b_i − iω))` for a unit-variance expansion.
fn expansion_spectrum(terms: &[AutocorrTerm], omega: f64) -> f64 {
    terms.iter().map(|t| 2.0 * (-t.a / (t.b - C64::new(0.0, omega))).re).sum()
}

/// Normalized autocorrelation expansion `c(τ)/rms² = Σ a_i e^{b_i τ}`, `τ ≥ 0`.
pub fn autocorr_from_psd(psd: &PsdModel) -> Result<Expansion> {
    psd.validate()?;
    match &psd.kind {
        PsdKind::Lorentzian { center, width } => {
            let terms = if *center == 0.0 {
                vec![AutocorrTerm::real(1.0, -width)]
            } else {
                vec![
                    AutocorrTerm { a: C64::new(0.5, 0.0), b: C64::new(-width, *center) },
                    AutocorrTerm { a: C64::new(0.5, 0.0), b: C64::new(-width, -center) },
                ]
            };
            Ok(Expansion { terms, residual: 0.0, warning: None })
        }
        PsdKind::OneOverF { low, high } => fit_one_over_f(*low, *high),
        PsdKind::ExpSum { terms } => Ok(Expansion { terms: terms.clone(), residual: 0.0, warning: None }),
    }
}

/// Cosine integral `Ci(x)` for `x > 0`.
fn cos_integral(x: f64) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    if x <= 2.0 {
        let x2 = x * x;
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 1..60 {
            let k2 = (2 * k) as f64;
            term *= -x2 / ((k2 - 1.0) * k2);
            let add = term / k2;
            sum += add;
            if add.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        EULER + x.ln() + sum
    } else {
        // continued fraction for E₁(ix) (modified Lentz)
        let tiny = 1e-300;
        let mut b = C64::new(1.0, x);
        let mut c = C64::new(1.0 / tiny, 0.0);
        let mut d = C64::new(1.0, 0.0) / b;
        let mut h = d;
        for i in 2..1000 {
            let a = -((i - 1) as f64).powi(2);
            b += 2.0;
            d = C64::new(1.0, 0.0) / (d * a + b);
            c = b + C64::new(a, 0.0) / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).norm() < 1e-16 {
                break;
            }
        }
        let h = C64::new(x.cos(), -x.sin()) * h;
        -h.re
    }
}

/// Band-limited `1/f` autocorrelation normalized to `c(0) = 1`.
fn one_over_f_autocorr(low: f64, high: f64, tau: f64) -> f64 {
    if tau == 0.0 {
        return 1.0;
    }
    (cos_integral(high * tau) - cos_integral(low * tau)) / (high / low).ln()
}

/// Lawson–Hanson non-negative least squares for small dense systems.
fn nnls(a: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = a[0].len();
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let residual_grad = |x: &[f64]| -> Vec<f64> {
        let mut w = vec![0.0; n];
        for (row, yk) in a.iter().zip(y) {
            let r = yk - row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
            for j in 0..n {
                w[j] += row[j] * r;
            }
        }
        w
    };
    // unconstrained least squares restricted to the passive set
    let solve_passive = |passive: &[bool]| -> Vec<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let k = idx.len();
        let mut mat = vec![vec![0.0; k + 1]; k];
        for row in a.iter().zip(y) {
            for (p, &i) in idx.iter().enumerate() {
                for (q, &j) in idx.iter().enumerate() {
                    mat[p][q] += row.0[i] * row.0[j];
                }
                mat[p][k] += row.0[i] * row.1;
            }
        }
        let z = gauss_solve(mat);
        let mut full = vec![0.0; n];
        for (p, &i) in idx.iter().enumerate() {
            full[i] = z[p];
        }
        full
    };
    for _ in 0..(3 * n + 10) {
        let w = residual_grad(&x);
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > 1e-14).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let z = solve_passive(&passive);
            if (0..n).all(|i| !passive[i] || z[i] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in 0..n {
                if passive[i] && z[i] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - z[i]));
                }
            }
            for i in 0..n {
                x[i] += alpha * (z[i] - x[i]);
                if passive[i] && x[i] <= 1e-15 {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    x
}

/// Gaussian elimination with partial pivoting on an augmented `k×(k+1)` system.
fn gauss_solve(mut m: Vec<Vec<f64>>) -> Vec<f64> {
    let k = m.len();
    for col in 0..k {
        let piv = (col..k).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).expect("non-empty");
        m.swap(col, piv);
        let p = m[col][col];
        if p == 0.0 {
            continue;
        }
        for r in (col + 1)..k {
            let f = m[r][col] / p;
            if f != 0.0 {
                for c in col..=k {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut z = vec![0.0; k];
    for r in (0..k).rev() {
        let s: f64 = ((r + 1)..k).map(|c| m[r][c] * z[c]).sum();
        z[r] = if m[r][r] == 0.0 { 0.0 } else { (m[r][k] - s) / m[r][r] };
    }
    z
}

/// One decaying exponential per half-decade of `[ω_l, ω_h]`, weights fitted
/// non-negatively to the relative spectral shape `1/ω` on a log grid.
fn fit_one_over_f(low: f64, high: f64) -> Result<Expansion> {
    let half_decades = (2.0 * (high / low).log10()).ceil().max(1.0) as usize;
    let rates: Vec<f64> =
        (0..=half_decades).map(|i| low * (high / low).powf(i as f64 / half_decades as f64)).collect();
    let level = PI / (high / low).ln();
    let samples = 40 * half_decades + 1;
    let mut rows = Vec::with_capacity(samples);
    for k in 0..samples {
        let w = low * (high / low).powf(k as f64 / (samples - 1) as f64);
        // each basis spectrum divided by the target level/ω
        rows.push(rates.iter().map(|g| 2.0 * g / (g * g + w * w) * w / level).collect::<Vec<_>>());
    }
    let weights = nnls(&rows, &vec![1.0; samples]);
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("1/f fit produced no positive weights".into()));
    }
    let terms: Vec<AutocorrTerm> =
        rates.iter().zip(&weights).filter(|(_, w)| **w > 0.0).map(|(g, w)| AutocorrTerm::real(w / total, -g)).collect();
    let mut residual: f64 = 0.0;
    for k in 0..400 {
        let tau = (0.01 / high) * (1e4 * high / low).powf(k as f64 / 399.0);
        let fit: f64 = terms.iter().map(|t| t.a.re * (t.b.re * tau).exp()).sum();
        residual = residual.max((fit - one_over_f_autocorr(low, high, tau)).abs());
    }
    let warning = (residual > 0.05).then(|| format!("1/f fit residual {residual:.3} exceeds 5% of c(0)"));
    Ok(Expansion { terms, residual, warning })
}

/// Groups an expansion into real terms and conjugate pairs (first index of each pair).
fn pair_up(terms: &[AutocorrTerm]) -> Result<Vec<(usize, bool)>> {
    let mut used = vec![false; terms.len()];
    let mut groups = Vec::new();
    for i in 0..terms.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let t = terms[i];
        if t.b.im == 0.0 {
            if t.a.im != 0.0 || t.a.re < 0.0 {
                return Err(Error::InvalidArgument(format!("term a = {} has negative or complex spectral weight", t.a)));
            }
            groups.push((i, false));
            continue;
        }
        let partner = (0..terms.len()).find(|&j| {
            !used[j] && (terms[j].b - t.b.conj()).norm() <= 1e-12 * t.b.norm() && (terms[j].a - t.a.conj()).norm() <= 1e-12
        });
        let Some(j) = partner else {
            return Err(Error::InvalidArgument(format!("complex term b = {} has no conjugate partner", t.b)));
        };
        used[j] = true;
        if t.a.im != 0.0 || t.a.re < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "pair with a = {} is not representable by a damped oscillator",
                t.a
            )));
        }
        groups.push((i, true));
    }
    Ok(groups)
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Stationary Gaussian samples at times `(m+½)·dt` with autocorrelation
/// `rms²·Σ a_i e^{b_i|τ|}`.
pub fn sample_trajectory(
    expansion: &[AutocorrTerm],
    rms: f64,
    segments: usize,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let groups = pair_up(expansion)?;
    let mut out = vec![0.0; segments];
    if rms == 0.0 {
        return Ok(out);
    }
    for (i, pair) in groups {
        let t = expansion[i];
        let decay = (t.b * dt).exp();
        let keep = (1.0 - decay.norm_sqr()).max(0.0).sqrt();
        if !pair {
            // Ornstein–Uhlenbeck
            let sd = rms * t.a.re.sqrt();
            let mut x = sd * normal(rng);
            for v in out.iter_mut() {
                *v += x;
                x = decay.re * x + keep * sd * normal(rng);
            }
        } else {
            // circular complex OU; Re z has covariance (s²/2)·e^{−γτ}cos(ωτ)
            let s = rms * (4.0 * t.a.re).sqrt();
            let sd = s / 2f64.sqrt();
            let mut z = C64::new(normal(rng), normal(rng)) * sd;
            for v in out.iter_mut() {
                *v += z.re;
                z = decay * z + C64::new(normal(rng), normal(rng)) * (sd * keep);
            }
        }
    }
    Ok(out)
}

/// How static offsets are drawn in an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticMode {
    /// Every realization uses the channel strength as a fixed offset.
    #[default]
    Fixed,
    /// Offsets are Gaussian with standard deviation equal to the strength.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub realizations: usize,
    pub seed: u64,
    pub static_mode: StaticMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub mean: f64,
    pub stderr: f64,
    pub realizations: usize,
}

/// Total propagator of `H[m] + Σ_j ε_j[m]·E_j[m]`.
pub fn perturbed_propagator(
    model: &SystemModel,
    pulse: &PulseGrid,
    noises: &[NoiseChannel],
    values: &[Vec<f64>],
) -> Result<CMatrix> {
    let dt = pulse.dt();
    let mut ops = Vec::with_capacity(noises.len());
    for n in noises {
        // fixed operators are segment independent; fetch once
        ops.push(match n.operator {
            NoiseOperator::Fixed(_) => Some(n.operator_at(model, pulse, 0)?),
            NoiseOperator::ControlProportional => None,
        });
    }
    let mut total = CMatrix::identity(model.dim_full());
    for m in 0..pulse.segments() {
        let mut h = model.hamiltonian_at(pulse, m)?;
        for ((n, op), v) in noises.iter().zip(&ops).zip(values) {
            let eps = v[m];
            if eps == 0.0 {
                continue;
            }
            match op {
                Some(e) => h.axpy_real(eps, e),
                None => h.axpy_real(eps, &n.operator_at(model, pulse, m)?),
            }
        }
        total = expm(&h.scale(C64::new(0.0, -dt)))?.matmul(&total);
    }
    Ok(total)
}

/// Per-realization noise values: one row of `M` samples per channel.
fn draw_realization(
    noises: &[NoiseChannel],
    expansions: &[Option<Vec<AutocorrTerm>>],
    pulse: &PulseGrid,
    mode: StaticMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let m = pulse.segments();
    let mut rows = Vec::with_capacity(noises.len());
    for (n, exp) in noises.iter().zip(expansions) {
        match exp {
            None => {
                let eps = match mode {
                    StaticMode::Fixed => n.strength,
                    StaticMode::Gaussian => n.strength * normal(rng),
                };
                rows.push(vec![eps; m]);
            }
            Some(terms) => rows.push(sample_trajectory(terms, n.strength, m, pulse.dt(), rng)?),
        }
    }
    Ok(rows)
}

/// Ensemble-averaged `Φ₀` (with local-Z compensation when the model asks for it).
///
/// Realization `k` draws from its own ChaCha8 stream `k` of the master seed,
/// and the mean is accumulated in realization order, so the result does not
/// depend on the thread count.
pub fn mc_noise_fidelity(
    model: &SystemModel,
    pulse: &PulseGrid,
    noises: &[NoiseChannel],
    settings: &McSettings,
) -> Result<McResult> {
    if settings.realizations == 0 {
        return Err(Error::InvalidArgument("at least one realization is required".into()));
    }
    for n in noises {
        n.validate()?;
    }
    let expansions: Vec<Option<Vec<AutocorrTerm>>> =
        noises.iter().map(|n| (!n.is_static()).then(|| n.autocorrelation().to_vec())).collect();
    let deterministic = noises.iter().all(|n| n.strength == 0.0 || (n.is_static() && settings.static_mode == StaticMode::Fixed));
    let count = if deterministic { 1 } else { settings.realizations };
    let values: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(k as u64);
            let rows = draw_realization(noises, &expansions, pulse, settings.static_mode, &mut rng)?;
            phi0(&perturbed_propagator(model, pulse, noises, &rows)?, model)
        })
        .collect::<Result<_>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(McResult { mean, stderr, realizations: settings.realizations })
}

/// One sweep axis: a static channel and the offsets to visit.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub noise: usize,
    pub values: Vec<f64>,
}

impl SweepAxis {
    pub fn linspace(noise: usize, lo: f64, hi: f64, steps: usize) -> Self {
        let values = if steps <= 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect()
        };
        Self { noise, values }
    }
}

/// Quasi-static fidelities, row-major over `(axis 1, axis 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub axes: Vec<SweepAxis>,
    pub fidelity: Vec<f64>,
}

pub fn quasi_static_sweep(
    model: &SystemModel,
    pulse: &PulseGrid,
    noises: &[NoiseChannel],
    axes: &[SweepAxis],
) -> Result<SweepGrid> {
    if axes.is_empty() || axes.len() > 2 {
        return Err(Error::InvalidArgument(format!("sweeps take one or two axes, got {}", axes.len())));
    }
    for ax in axes {
        let n = noises
            .get(ax.noise)
            .ok_or_else(|| Error::IndexOutOfRange(format!("sweep axis noise {} of {}", ax.noise, noises.len())))?;
        if !n.is_static() {
            return Err(Error::InvalidArgument(format!("sweep axis '{}' is time-dependent", n.name)));
        }
        if ax.values.is_empty() {
            return Err(Error::InvalidArgument(format!("sweep axis '{}' has no points", n.name)));
        }
    }
    if axes.len() == 2 && axes[0].noise == axes[1].noise {
        return Err(Error::InvalidArgument("sweep axes must use different noises".into()));
    }
    let chosen: Vec<NoiseChannel> = axes.iter().map(|a| noises[a.noise].clone()).collect();
    let second = axes.get(1).map(|a| a.values.clone()).unwrap_or_else(|| vec![0.0]);
    let points: Vec<(f64, f64)> = axes[0].values.iter().flat_map(|&x| second.iter().map(move |&y| (x, y))).collect();
    let m = pulse.segments();
    let fidelity = points
        .par_iter()
        .map(|&(x, y)| {
            let rows: Vec<Vec<f64>> = [x, y].iter().take(chosen.len()).map(|&v| vec![v; m]).collect();
            phi0(&perturbed_propagator(model, pulse, &chosen, &rows)?, model)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepGrid { axes: axes.to_vec(), fidelity })
}

/// `F(ω)` together with `G(ω) = F(ω)/ω²` (finite at `ω = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterFunctionTable {
    pub omega: Vec<f64>,
    pub values: Vec<f64>,
    pub reduced: Vec<f64>,
    pub label: String,
}

/// Log-spaced grid of `n` angular frequencies in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

/// Default filter-function grid: 400 points over `[2π·10², 2π·10⁸]` rad/s.
pub fn default_omega_grid() -> Vec<f64> {
    log_grid(2.0 * PI * 1e2, 2.0 * PI * 1e8, 400)
}

/// `F(ω) = Σ_k |−iω Σ_m Δt·X_k[m]·e^{iωt_m}|²` with
/// `X_k[m] = Tr(𝒮†Ẽ(t_m)𝒮·P_k)/d_q` over the non-identity Pauli words.
pub fn filter_function(
    model: &SystemModel,
    pulse: &PulseGrid,
    noise_op: &CMatrix,
    omega: &[f64],
) -> Result<FilterFunctionTable> {
    let dq = model.dim_q();
    let qubits = match dq {
        2 => 1,
        4 => 2,
        _ => return Err(Error::InvalidArgument(format!("filter functions need d_q = 2 or 4, got {dq}"))),
    };
    if noise_op.dim() != model.dim_full() {
        return Err(Error::DimensionMismatch("noise operator must act on the full space".into()));
    }
    let words = pauli_basis(qubits);
    let cache = propagate(model, pulse)?;
    let dt = pulse.dt();
    let mut coeffs: Vec<Vec<f64>> = vec![Vec::with_capacity(pulse.segments()); words.len() - 1];
    for m in 0..pulse.segments() {
        // U at the segment midpoint
        let h = model.hamiltonian_at(pulse, m)?;
        let half = expm(&h.scale(C64::new(0.0, -0.5 * dt)))?;
        let mid = match m {
            0 => half,
            _ => half.matmul(&cache.prefix_products[m - 1]),
        };
        let toggled = mid.adjoint().matmul(&noise_op.matmul(&mid));
        let proj = model.isometry.project(&toggled);
        for (k, p) in words.iter().skip(1).enumerate() {
            // Hermitian E gives real coefficients
            coeffs[k].push(proj.trace_product(p).re / dq as f64);
        }
    }
    let mut values = Vec::with_capacity(omega.len());
    let mut reduced = Vec::with_capacity(omega.len());
    for &w in omega {
        let mut g = 0.0;
        for xk in &coeffs {
            let mut acc = C64::new(0.0, 0.0);
            for (m, x) in xk.iter().enumerate() {
                acc += C64::from_polar(*x * dt, w * (m as f64 + 0.5) * dt);
            }
            g += acc.norm_sqr();
        }
        reduced.push(g);
        values.push(w * w * g);
    }
    Ok(FilterFunctionTable { omega: omega.to_vec(), values, reduced, label: String::new() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub fidelity: f64,
    /// `(1/2π)∫ S·F/ω² dω` over both signs of `ω`.
    pub infidelity: f64,
    /// Difference to the same rule on every other grid point, relative.
    pub quadrature_error: f64,
    pub warning: Option<String>,
}

fn overlap_integral(s: &[f64], table: &FilterFunctionTable, stride: usize) -> f64 {
    let idx: Vec<usize> = (0..table.omega.len()).step_by(stride).collect();
    let f = |i: usize| s[i] * table.reduced[i];
    // plateau below the first grid point
    let mut sum = f(idx[0]) * table.omega[idx[0]];
    for w in idx.windows(2) {
        sum += 0.5 * (f(w[0]) + f(w[1])) * (table.omega[w[1]] - table.omega[w[0]]);
    }
    // even integrand: (1/2π)·2·∫₀^∞
    sum / PI
}

/// `Φ ≈ 1 − (1/2π)∫ S(ω)F(ω)/ω² dω` by the trapezoidal rule on the table grid.
pub fn overlap_infidelity(psd: &PsdModel, expansion: &[AutocorrTerm], table: &FilterFunctionTable) -> Result<Overlap> {
    psd.validate()?;
    let n = table.omega.len();
    if n < 3 || table.omega.windows(2).any(|w| !(w[1] > w[0])) || table.omega[0] < 0.0 {
        return Err(Error::InvalidArgument("filter-function grid must be increasing, non-negative, ≥ 3 points".into()));
    }
    if psd.rms == 0.0 || table.reduced.iter().all(|g| *g == 0.0) {
        return Ok(Overlap { fidelity: 1.0, infidelity: 0.0, quadrature_error: 0.0, warning: None });
    }
    let s: Vec<f64> = table.omega.iter().map(|&w| psd.spectrum(expansion, w)).collect();
    let fine = overlap_integral(&s, table, 1);
    let coarse = overlap_integral(&s, table, 2);
    let quadrature_error = if fine > 0.0 { (fine - coarse).abs() / fine } else { 0.0 };
    let warning =
        (quadrature_error > 0.1).then(|| format!("quadrature error estimate {quadrature_error:.2} exceeds 10%"));
    Ok(Overlap { fidelity: 1.0 - fine, infidelity: fine, quadrature_error, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densemath::{sigma_x, sigma_z, CMatrix};
    use crate::model::{ControlChannel, Isometry};

    fn qubit(target: CMatrix) -> SystemModel {
        SystemModel::new(
            "qubit",
            CMatrix::zeros(2),
            vec![ControlChannel::new("x", sigma_x().scale_real(0.5))],
            Isometry::identity(2),
            target,
        )
        .unwrap()
    }

    #[test]
    fn cos_integral_reference_values() {
        // Abramowitz & Stegun table 5.1
        assert!((cos_integral(0.5) - (-0.177_784_078_806_612_4)).abs() < 1e-14);
        assert!((cos_integral(1.0) - 0.337_403_922_900_968_1).abs() < 1e-14);
        assert!((cos_integral(5.0) - (-0.190_029_749_656_643_9)).abs() < 1e-13);
        assert!((cos_integral(20.0) - 0.044_419_820_845_353_3).abs() < 1e-13);
    }

    #[test]
    fn zero_center_lorentzian_collapses() {
        let e = autocorr_from_psd(&PsdModel::lorentzian(0.0, 3.0, 1.0)).unwrap();
        assert_eq!(e.terms, vec![AutocorrTerm::real(1.0, -3.0)]);
    }

    #[test]
    fn lorentzian_spectrum_matches_numeric_transform() {
        let (center, width) = (2.0 * PI * 2e4, 2.0 * PI * 2e4);
        let psd = PsdModel::lorentzian(center, width, 1.0);
        let e = autocorr_from_psd(&psd).unwrap();
        // S(ω) = 2∫₀^∞ c(τ)cos ωτ dτ by composite Simpson on [0, 40/A]
        let c = |t: f64| e.terms.iter().map(|x| (x.a * (x.b * t).exp()).re).sum::<f64>();
        let numeric = |w: f64| {
            let n = 400_000;
            let h = 40.0 / width / n as f64;
            let mut s = c(0.0) + c(n as f64 * h) * (w * n as f64 * h).cos();
            for i in 1..n {
                let t = i as f64 * h;
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * c(t) * (w * t).cos();
            }
            2.0 * s * h / 3.0
        };
        for w in [center - 3.0 * width, center, center + 3.0 * width] {
            let exact = psd.nominal_spectrum(w);
            assert!((numeric(w) - exact).abs() < 1e-10 * exact, "{w}: {} vs {exact}", numeric(w));
            assert!((psd.spectrum(&e.terms, w) - exact).abs() < 1e-12 * exact);
        }
    }

    #[test]
    fn one_over_f_fit_tracks_the_band() {
        let (lo, hi) = (2.0 * PI * 1e4, 2.0 * PI * 1e8);
        let psd = PsdModel::one_over_f(lo, hi, 1.0);
        let e = autocorr_from_psd(&psd).unwrap();
        assert!(e.terms.len() <= 9);
        let sum: f64 = e.terms.iter().map(|t| t.a.re).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // the hard band edges give c(τ) negative lobes no positive sum can follow
        assert!(e.residual > 0.0 && e.residual < 0.2, "{}", e.residual);
        // unit variance is kept, so the edge terms leaking out of the band lower the in-band level
        let ratios: Vec<f64> =
            log_grid(2.0 * lo, 0.5 * hi, 200).iter().map(|&w| psd.spectrum(&e.terms, w) / psd.nominal_spectrum(w)).collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((0.7..1.0).contains(&mean), "level {mean}");
        for r in &ratios {
            assert!((r / mean - 1.0).abs() < 0.05, "ratio {r} against level {mean}");
        }
    }

    #[test]
    fn unrepresentable_expansions_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lonely = [AutocorrTerm { a: C64::new(1.0, 0.0), b: C64::new(-1.0, 2.0) }];
        assert!(sample_trajectory(&lonely, 1.0, 4, 0.1, &mut rng).is_err());
        let negative = [AutocorrTerm::real(1.5, -1.0), AutocorrTerm::real(-0.5, -2.0)];
        assert!(sample_trajectory(&negative, 1.0, 4, 0.1, &mut rng).is_err());
    }

    #[test]
    fn zero_rms_trajectory_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_trajectory(&[AutocorrTerm::real(1.0, -1.0)], 0.0, 16, 0.1, &mut rng).unwrap();
        assert!(t.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ou_lag_zero_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let t = sample_trajectory(&[AutocorrTerm::real(1.0, -2.0)], 1.5, 3, 0.1, &mut rng).unwrap();
            acc += t[2] * t[2];
        }
        let est = acc / n as f64;
        assert!((est / 2.25 - 1.0).abs() < 0.02, "{est}");
    }

    #[test]
    fn lorentzian_pair_autocorrelation_at_one_over_width() {
        let (center, width) = (3.0, 1.0);
        let e = autocorr_from_psd(&PsdModel::lorentzian(center, width, 1.0)).unwrap();
        let dt = 0.05;
        let lag = (1.0 / width / dt).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let mut prods = Vec::with_capacity(n);
        for _ in 0..n {
            let t = sample_trajectory(&e.terms, 1.0, lag + 1, dt, &mut rng).unwrap();
            prods.push(t[0] * t[lag]);
        }
        let mean = prods.iter().sum::<f64>() / n as f64;
        let sd = (prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt();
        let tau = lag as f64 * dt;
        let expect = (-width * tau).exp() * (center * tau).cos();
        assert!((mean - expect).abs() < 3.0 * sd, "{mean} vs {expect} ± {sd}");
    }

    #[test]
    fn zero_strength_ensemble_is_noise_free_fidelity() {
        let model = qubit(sigma_x());
        let pulse = PulseGrid::new(1.0, vec![vec![PI * 0.9; 10]]).unwrap();
        let noise = NoiseChannel::static_fixed("z", sigma_z().scale_real(0.5), 0.0).unwrap();
        let psd = autocorr_from_psd(&PsdModel::lorentzian(1.0, 1.0, 1.0)).unwrap();
        let td = NoiseChannel::time_dependent("zt", sigma_z().scale_real(0.5), 0.0, psd.terms).unwrap();
        let settings = McSettings { realizations: 7, seed: 5, static_mode: StaticMode::Gaussian };
        let res = mc_noise_fidelity(&model, &pulse, &[noise, td], &settings).unwrap();
        let exact = phi0(&propagate(&model, &pulse).unwrap().total, &model).unwrap();
        assert_eq!(res.mean, exact);
        assert_eq!(res.stderr, 0.0);
        let none = McSettings { realizations: 0, ..settings };
        assert!(mc_noise_fidelity(&model, &pulse, &[], &none).is_err());
    }

    #[test]
    fn ensemble_is_reproducible() {
        let model = qubit(sigma_x());
        let pulse = PulseGrid::new(1.0, vec![vec![PI; 20]]).unwrap();
        let e = autocorr_from_psd(&PsdModel::lorentzian(2.0, 1.0, 1.0)).unwrap();
        let td = NoiseChannel::time_dependent("zt", sigma_z().scale_real(0.5), 0.3, e.terms).unwrap();
        let s = McSettings { realizations: 50, seed: 11, static_mode: StaticMode::Fixed };
        let a = mc_noise_fidelity(&model, &pulse, std::slice::from_ref(&td), &s).unwrap();
        let b = mc_noise_fidelity(&model, &pulse, std::slice::from_ref(&td), &s).unwrap();
        assert_eq!(a, b);
        assert!(a.mean < 1.0 && a.stderr > 0.0);
    }

    #[test]
    fn weak_noise_infidelity_is_quadratic() {
        let model = qubit(sigma_x());
        let pulse = PulseGrid::new(1.0, vec![vec![PI; 20]]).unwrap();
        let e = autocorr_from_psd(&PsdModel::lorentzian(0.0, 2.0, 1.0)).unwrap();
        let s = McSettings { realizations: 400, seed: 4, static_mode: StaticMode::Fixed };
        let infid = |rms: f64| {
            let td = NoiseChannel::time_dependent("zt", sigma_z().scale_real(0.5), rms, e.terms.clone()).unwrap();
            1.0 - mc_noise_fidelity(&model, &pulse, &[td], &s).unwrap().mean
        };
        // common random numbers: the same streams at both strengths
        let ratio = infid(0.1) / infid(0.05);
        assert!((ratio - 4.0).abs() < 0.6, "{ratio}");
    }

    #[test]
    fn sweep_center_and_range() {
        let model = qubit(sigma_x());
        let pulse = PulseGrid::new(1.0, vec![vec![PI; 10]]).unwrap();
        let noises = vec![
            NoiseChannel::static_control("amp", 0.0).unwrap(),
            NoiseChannel::static_fixed("z", sigma_z().scale_real(0.5), 0.0).unwrap(),
        ];
        let axes = [SweepAxis::linspace(0, -0.1, 0.1, 5), SweepAxis::linspace(1, -1.0, 1.0, 5)];
        let g = quasi_static_sweep(&model, &pulse, &noises, &axes).unwrap();
        assert_eq!(g.fidelity.len(), 25);
        assert!((g.fidelity[12] - 1.0).abs() < 1e-12);
        assert!(g.fidelity.iter().all(|f| f.is_finite() && (0.0..=1.0 + 1e-12).contains(f)));
        assert_eq!(g, quasi_static_sweep(&model, &pulse, &noises, &axes).unwrap());
        let e = autocorr_from_psd(&PsdModel::lorentzian(0.0, 2.0, 1.0)).unwrap();
        let td = vec![NoiseChannel::time_dependent("zt", sigma_z(), 0.1, e.terms).unwrap()];
        assert!(quasi_static_sweep(&model, &pulse, &td, &[SweepAxis::linspace(0, 0.0, 1.0, 2)]).is_err());
    }

    #[test]
    fn free_evolution_filter_function() {
        // zero control, E = σz/2: X_z = 1/2 constant, F = ω²|Σ Δt/2·e^{iωt_m}|²
        let model = qubit(CMatrix::identity(2));
        let t_total = 2.0;
        let omega = [0.0, 0.3, 1.0, 4.0, 11.0];
        let closed = |w: f64| if w == 0.0 { 0.0 } else { (2.0 * (w * t_total / 2.0).sin()).powi(2) / 4.0 };
        let mut errs = Vec::new();
        for m in [200usize, 400] {
            let pulse = PulseGrid::zeros(t_total, 1, m).unwrap();
            let ff = filter_function(&model, &pulse, &sigma_z().scale_real(0.5), &omega).unwrap();
            errs.push(omega.iter().zip(&ff.values).map(|(w, f)| (f - closed(*w)).abs()).fold(0.0, f64::max));
            assert_eq!(ff.values[0], 0.0);
            assert!((ff.reduced[0] - 0.25 * t_total * t_total).abs() < 1e-12);
        }
        assert!(errs[1] < 1e-3 && errs[1] < 0.3 * errs[0], "{errs:?}");
        let zero = filter_function(&model, &PulseGrid::zeros(1.0, 1, 8).unwrap(), &CMatrix::zeros(2), &omega).unwrap();
        assert!(zero.values.iter().all(|f| *f == 0.0));
    }

    #[test]
    fn overlap_trivial_cases() {
        let model = qubit(CMatrix::identity(2));
        let pulse = PulseGrid::zeros(1.0, 1, 16).unwrap();
        let grid = log_grid(0.1, 1e3, 50);
        let ff = filter_function(&model, &pulse, &sigma_z().scale_real(0.5), &grid).unwrap();
        let psd0 = PsdModel::lorentzian(0.0, 1.0, 0.0);
        let e = autocorr_from_psd(&psd0).unwrap();
        assert_eq!(overlap_infidelity(&psd0, &e.terms, &ff).unwrap().fidelity, 1.0);
        let zero = filter_function(&model, &pulse, &CMatrix::zeros(2), &grid).unwrap();
        let psd = PsdModel::lorentzian(0.0, 1.0, 0.2);
        assert_eq!(overlap_infidelity(&psd, &e.terms, &zero).unwrap().fidelity, 1.0);
    }

    #[test]
    fn overlap_agrees_with_ensemble_for_weak_dephasing() {
        let model = qubit(CMatrix::identity(2));
        let pulse = PulseGrid::zeros(1.0, 1, 40).unwrap();
        let psd = PsdModel::lorentzian(0.0, 3.0, 0.15);
        let e = autocorr_from_psd(&psd).unwrap();
        let ff = filter_function(&model, &pulse, &sigma_z().scale_real(0.5), &log_grid(1e-3, 1e4, 4000)).unwrap();
        let ov = overlap_infidelity(&psd, &e.terms, &ff).unwrap();
        let td = NoiseChannel::time_dependent("z", sigma_z().scale_real(0.5), psd.rms, e.terms).unwrap();
        let s = McSettings { realizations: 4000, seed: 9, static_mode: StaticMode::Fixed };
        let mc = mc_noise_fidelity(&model, &pulse, &[td], &s).unwrap();
        let (a, b) = (ov.infidelity, 1.0 - mc.mean);
        assert!((a - b).abs() < 0.1 * b, "overlap {a} vs MC {b}");
    }
}
