// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

//! Fitness `Φ = Φ₀ − Σ λ‖𝒟‖²` and its gradient with respect to the controls.
//!
//! Gradients are computed in reverse mode. For a chain product
//! `V = V_{M−1}⋯V_0` and a seed `Y`, `∂ Re Tr(V·Y)/∂u_c[m]` equals
//! `Re Tr(dV_m · Λ_m)` with `Λ_m = (V_{m−1}⋯V_0)·Y·(V_{M−1}⋯V_{m+1})`.
//! In exact mode `Tr(dV_m Λ_m) = −iΔt·Tr(∂X·L(A_m, Λ_m))` uses one Fréchet
//! derivative per segment regardless of the channel count; first-order mode
//! replaces `L(A_m, Λ_m)` with `V_m Λ_m`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::densemath::{expm, expm_frechet, CMatrix, C64, ZERO};
use crate::error::{Error, Result};
use crate::model::{FidelityKind, GaussianSmoother, NoiseChannel, PulseGrid, RobustnessTerm, SystemModel};
use crate::propagation::{propagate_chain, term_picks, total_propagator, Chain, ChainPick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Exact,
    FirstOrder,
}

/// Noise model, penalty terms and Step-3 threshold.
#[derive(Debug, Clone)]
pub struct FitnessConfig {
    pub noises: Vec<NoiseChannel>,
    pub terms: Vec<RobustnessTerm>,
    pub phi0_threshold: f64,
    pub gradient_mode: GradientMode,
}

impl FitnessConfig {
    pub fn noiseless() -> Self {
        Self { noises: Vec::new(), terms: Vec::new(), phi0_threshold: 0.99, gradient_mode: GradientMode::Exact }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi0_threshold > 0.0 && self.phi0_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "phi0_threshold must lie in (0,1), got {}",
                self.phi0_threshold
            )));
        }
        for n in &self.noises {
            n.validate()?;
        }
        for t in &self.terms {
            t.validate(&self.noises)?;
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.weight).collect()
    }

    pub fn with_weights(&self, weights: &[f64]) -> Self {
        let mut out = self.clone();
        for (t, &w) in out.terms.iter_mut().zip(weights) {
            t.weight = w;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub phi0: f64,
    /// `λ·‖𝒟‖²`, aligned with the term list.
    pub penalties: Vec<f64>,
    /// `‖𝒟‖²` without the weight (zero for terms with `λ = 0`, which are skipped).
    pub derivative_norms: Vec<f64>,
    pub phi: f64,
    /// `1 − ‖U_q‖²_F / d_q`.
    pub leakage: f64,
    /// `∂Φ/∂u[c][m]`, or with respect to raw parameters when smoothing is used.
    pub gradient: Option<Vec<Vec<f64>>>,
}

fn check_total(total: &CMatrix, model: &SystemModel) -> Result<()> {
    if total.dim() != model.dim_full() {
        return Err(Error::DimensionMismatch(format!(
            "propagator is {}-dimensional, model is {}",
            total.dim(),
            model.dim_full()
        )));
    }
    Ok(())
}

/// `|Tr(U_q U_tar†)|² / d_q²` with `U_q = 𝒮†U(T)𝒮`.
pub fn gate_fidelity(total: &CMatrix, model: &SystemModel) -> Result<f64> {
    check_total(total, model)?;
    let uq = model.isometry.project(total);
    let d = model.dim_q() as f64;
    Ok((uq.trace_product(&model.target.adjoint()).norm_sqr() / (d * d)).max(0.0))
}

/// Optimal local Z phases for `diag(1, e^{iφ₂}, e^{iφ₁}, e^{i(φ₁+φ₂)})·U_q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalZ {
    pub phi1: f64,
    pub phi2: f64,
    pub fidelity: f64,
}

impl LocalZ {
    pub fn diagonal(&self) -> [C64; 4] {
        let e = |x: f64| C64::from_polar(1.0, x);
        [C64::new(1.0, 0.0), e(self.phi2), e(self.phi1), e(self.phi1 + self.phi2)]
    }
}

const LOCAL_Z_EXPONENTS: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];

/// `|Σ_k z_k w_k|²/16` and its gradient and Hessian in `(φ₁, φ₂)`.
fn local_z_objective(w: &[C64; 4], p1: f64, p2: f64) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let mut s = ZERO;
    let mut ds = [ZERO; 2];
    let mut dds = [[ZERO; 2]; 2];
    for (k, &(a, b)) in LOCAL_Z_EXPONENTS.iter().enumerate() {
        let t = C64::from_polar(1.0, a * p1 + b * p2) * w[k];
        let e = [a, b];
        s += t;
        for i in 0..2 {
            ds[i] += C64::new(0.0, e[i]) * t;
            for j in 0..2 {
                dds[i][j] -= t * (e[i] * e[j]);
            }
        }
    }
    let f = s.norm_sqr() / 16.0;
    let mut g = [0.0; 2];
    let mut h = [[0.0; 2]; 2];
    for i in 0..2 {
        g[i] = 2.0 * (s.conj() * ds[i]).re / 16.0;
        for j in 0..2 {
            h[i][j] = 2.0 * (ds[j].conj() * ds[i] + s.conj() * dds[i][j]).re / 16.0;
        }
    }
    (f, g, h)
}

/// Maximizes the local-Z fidelity of a projected two-qubit propagator.
///
/// Starts from the phases that align the diagonal of `U_q U_tar†`, checks a
/// 64×64 grid over the torus, then polishes the best point with Newton steps.
/// With `optimize_phases = false` only the analytic starting phases are used.
pub fn optimal_local_z(uq: &CMatrix, target: &CMatrix, optimize_phases: bool) -> Result<LocalZ> {
    if uq.dim() != 4 || target.dim() != 4 {
        return Err(Error::InvalidArgument("local-Z compensation needs a two-qubit (4-dim) gate".into()));
    }
    let prod = uq.matmul(&target.adjoint());
    let w = [prod[(0, 0)], prod[(1, 1)], prod[(2, 2)], prod[(3, 3)]];
    let phase = |z: C64| if z == ZERO { 0.0 } else { z.arg() };
    let mut best = (phase(w[0]) - phase(w[2]), phase(w[0]) - phase(w[1]));
    let mut best_f = local_z_objective(&w, best.0, best.1).0;
    if optimize_phases {
        const GRID: usize = 64;
        for i in 0..GRID {
            for j in 0..GRID {
                let (p1, p2) = (2.0 * PI * i as f64 / GRID as f64, 2.0 * PI * j as f64 / GRID as f64);
                let f = local_z_objective(&w, p1, p2).0;
                if f > best_f {
                    best_f = f;
                    best = (p1, p2);
                }
            }
        }
        // the grid point lies in the basin of the maximum; Newton steps are
        // accepted while they shrink the gradient, which stays resolvable after f saturates
        let gnorm = |g: [f64; 2]| g[0].hypot(g[1]);
        for _ in 0..60 {
            let (_, g, h) = local_z_objective(&w, best.0, best.1);
            if gnorm(g) < 1e-15 {
                break;
            }
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            let newton = det > 0.0 && h[0][0] < 0.0;
            let step = if newton {
                [-(h[1][1] * g[0] - h[0][1] * g[1]) / det, -(h[0][0] * g[1] - h[1][0] * g[0]) / det]
            } else {
                [g[0], g[1]]
            };
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let cand = (best.0 + t * step[0], best.1 + t * step[1]);
                let (_, gc, _) = local_z_objective(&w, cand.0, cand.1);
                if gnorm(gc) < gnorm(g) {
                    accepted = Some(cand);
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some(c) => best = c,
                None => break,
            }
        }
        best_f = local_z_objective(&w, best.0, best.1).0;
    }
    let wrap = |x: f64| x.rem_euclid(2.0 * PI);
    Ok(LocalZ { phi1: wrap(best.0), phi2: wrap(best.1), fidelity: best_f.max(0.0) })
}

/// Gate fidelity maximized over single-qubit Z phases (two-qubit targets only).
pub fn fidelity_with_local_z(total: &CMatrix, model: &SystemModel, optimize_phases: bool) -> Result<f64> {
    check_total(total, model)?;
    let uq = model.isometry.project(total);
    Ok(optimal_local_z(&uq, &model.target, optimize_phases)?.fidelity)
}

/// `Φ₀` according to the model's fidelity kind.
pub fn phi0(total: &CMatrix, model: &SystemModel) -> Result<f64> {
    match model.fidelity {
        FidelityKind::Plain => gate_fidelity(total, model),
        FidelityKind::LocalZ => fidelity_with_local_z(total, model, true),
    }
}

/// `Φ₀` and the seed `Y₀` with `dΦ₀ = Re Tr(dU·Y₀)`.
fn phi0_with_seed(total: &CMatrix, model: &SystemModel) -> Result<(f64, CMatrix)> {
    let uq = model.isometry.project(total);
    let d = model.dim_q() as f64;
    let mut tgt_adj = model.target.adjoint();
    if model.fidelity == FidelityKind::LocalZ {
        // envelope theorem: at the optimal phases only the explicit dependence on U remains
        let lz = optimal_local_z(&uq, &model.target, true)?;
        let z = lz.diagonal();
        for r in 0..4 {
            for (c, zc) in z.iter().enumerate() {
                tgt_adj[(r, c)] *= zc;
            }
        }
    }
    let tau = uq.trace_product(&tgt_adj);
    let seed = model.isometry.lift(&tgt_adj).scale(tau.conj() * (2.0 / (d * d)));
    Ok(((tau.norm_sqr() / (d * d)).max(0.0), seed))
}

pub fn leakage(total: &CMatrix, model: &SystemModel) -> f64 {
    let uq = model.isometry.project(total);
    1.0 - uq.frob_norm_sq() / model.dim_q() as f64
}

/// Accumulates `∂ Re Tr(V·Y)/∂u_c[m]` into `grad[c][m]`.
fn chain_gradient(
    model: &SystemModel,
    pulse: &PulseGrid,
    chain: &Chain,
    prefix: &[CMatrix],
    seed: &CMatrix,
    mode: GradientMode,
    grad: &mut [Vec<f64>],
) -> Result<()> {
    let dt = pulse.dt();
    let minus_i_dt = C64::new(0.0, -dt);
    let mut yl = seed.clone();
    for m in (0..pulse.segments()).rev() {
        let lambda = if m > 0 { prefix[m - 1].matmul(&yl) } else { yl.clone() };
        let a = chain.generator(model, pulse, m)?.scale(minus_i_dt);
        let (v, k) = match mode {
            GradientMode::Exact => expm_frechet(&a, &lambda)?,
            GradientMode::FirstOrder => {
                let v = expm(&a)?;
                let k = v.matmul(&lambda);
                (v, k)
            }
        };
        for (c, g) in grad.iter_mut().enumerate() {
            g[m] += (minus_i_dt * chain.control_trace(model, pulse, c, m, &k)).re;
        }
        yl = yl.matmul(&v);
    }
    Ok(())
}

/// Places `a` at block `(bi, bj)` of a `blocks·d` zero matrix, scaled by `w`, accumulating into `out`.
fn place(out: &mut CMatrix, a: &CMatrix, bi: usize, bj: usize, w: C64) {
    let d = a.dim();
    let n = out.dim();
    let dst = out.as_mut_slice();
    for r in 0..d {
        for (c, &v) in a.row(r).iter().enumerate() {
            dst[(bi * d + r) * n + bj * d + c] += w * v;
        }
    }
}

fn evaluate(model: &SystemModel, pulse: &PulseGrid, cfg: &FitnessConfig, with_gradient: bool) -> Result<FitnessReport> {
    cfg.validate()?;
    if pulse.channels() != model.channels.len() {
        return Err(Error::DimensionMismatch(format!(
            "pulse has {} channels, model has {}",
            pulse.channels(),
            model.channels.len()
        )));
    }
    let d = model.dim_full();
    let nterms = cfg.terms.len();
    let mut penalties = vec![0.0; nterms];
    let mut norms = vec![0.0; nterms];
    let mut grad = with_gradient.then(|| vec![vec![0.0; pulse.segments()]; pulse.channels()]);
    let mut phi0_value: Option<f64> = None;
    let mut total_u: Option<CMatrix> = None;

    for (ti, term) in cfg.terms.iter().enumerate() {
        if term.weight == 0.0 {
            continue;
        }
        let picks: Vec<ChainPick> = term_picks(&cfg.noises, term, pulse.duration)?;
        let products =
            picks.iter().map(|p| propagate_chain(model, pulse, &p.chain, with_gradient)).collect::<Result<Vec<_>>>()?;
        let mut deriv = CMatrix::zeros(d);
        for (pick, prod) in picks.iter().zip(&products) {
            for &(i, j, w) in &pick.blocks {
                deriv.axpy(w, &prod.total.block(i, j, d));
            }
        }
        norms[ti] = deriv.frob_norm_sq();
        penalties[ti] = term.weight * norms[ti];

        // Φ₀ rides on the first active chain: its (0,0) block is U(T)
        let phi0_seed = if phi0_value.is_none() {
            let u = products[0].total.block(0, 0, d);
            let (f, seed) = phi0_with_seed(&u, model)?;
            phi0_value = Some(if with_gradient { f } else { phi0(&u, model)? });
            total_u = Some(u);
            Some(seed)
        } else {
            None
        };
        if let Some(grad) = grad.as_mut() {
            let dadj = deriv.adjoint();
            for (pi, (pick, prod)) in picks.iter().zip(products.iter()).enumerate() {
                let mut seed = CMatrix::zeros(d * pick.chain.blocks());
                for &(i, j, w) in &pick.blocks {
                    // dP = 2λ Re Tr(dD·D†) and D ∋ w·V_{ij}; Φ carries −P
                    place(&mut seed, &dadj, j, i, w * (-2.0 * term.weight));
                }
                if pi == 0 {
                    if let Some(s0) = phi0_seed.as_ref() {
                        place(&mut seed, s0, 0, 0, C64::new(1.0, 0.0));
                    }
                }
                let prefix = prod.prefix.as_ref().expect("prefix kept for gradients");
                chain_gradient(model, pulse, &pick.chain, prefix, &seed, cfg.gradient_mode, grad)?;
            }
        }
    }

    let (phi0_value, total_u) = match (phi0_value, total_u) {
        (Some(f), Some(u)) => (f, u),
        _ => {
            let chain = Chain::plain();
            if let Some(grad) = grad.as_mut() {
                let prod = propagate_chain(model, pulse, &chain, true)?;
                let (f, seed) = phi0_with_seed(&prod.total, model)?;
                let prefix = prod.prefix.as_ref().expect("prefix kept for gradients");
                chain_gradient(model, pulse, &chain, prefix, &seed, cfg.gradient_mode, grad)?;
                (f, prod.total)
            } else {
                let u = total_propagator(model, pulse)?;
                (phi0(&u, model)?, u)
            }
        }
    };
    let phi = phi0_value - penalties.iter().sum::<f64>();
    Ok(FitnessReport {
        phi0: phi0_value,
        penalties,
        derivative_norms: norms,
        phi,
        leakage: leakage(&total_u, model),
        gradient: grad,
    })
}

/// `Φ₀`, per-term penalties and `Φ` for a pulse.
pub fn total_fitness(model: &SystemModel, pulse: &PulseGrid, cfg: &FitnessConfig) -> Result<FitnessReport> {
    evaluate(model, pulse, cfg, false)
}

/// Fitness report including `∂Φ/∂u[c][m]`.
pub fn fitness_and_gradient(model: &SystemModel, pulse: &PulseGrid, cfg: &FitnessConfig) -> Result<FitnessReport> {
    evaluate(model, pulse, cfg, true)
}

/// `∂Φ/∂u[c][m]`.
pub fn gradient(model: &SystemModel, pulse: &PulseGrid, cfg: &FitnessConfig) -> Result<Vec<Vec<f64>>> {
    Ok(fitness_and_gradient(model, pulse, cfg)?.gradient.expect("gradient requested"))
}

/// Applies Gaussian smoothing to raw parameters.
pub fn smoothed_pulse(raw: &PulseGrid, sigma: f64) -> Result<PulseGrid> {
    let s = GaussianSmoother::new(sigma)?;
    PulseGrid::new(raw.duration, raw.amplitudes.iter().map(|ch| s.apply(ch)).collect())
}

/// Fitness of the smoothed pulse, with the gradient taken with respect to the raw parameters.
pub fn raw_fitness(
    model: &SystemModel,
    raw: &PulseGrid,
    sigma: f64,
    cfg: &FitnessConfig,
    with_gradient: bool,
) -> Result<FitnessReport> {
    let s = GaussianSmoother::new(sigma)?;
    let pulse = PulseGrid::new(raw.duration, raw.amplitudes.iter().map(|ch| s.apply(ch)).collect())?;
    let mut report = evaluate(model, &pulse, cfg, with_gradient)?;
    if let Some(g) = report.gradient.as_mut() {
        for ch in g.iter_mut() {
            *ch = s.apply_transpose(ch);
        }
    }
    Ok(report)
}

/// Worst agreement between the analytic gradient and central differences of `Φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    /// `(channel, segment)` of the worst component.
    pub worst: (usize, usize),
    pub step: f64,
    pub components: usize,
}

/// Compares `∂Φ/∂u` at the given components against `(Φ(u+h) − Φ(u−h))/2h`.
/// Errors are relative to `max(|g|, 1e−3·max|g|)` so near-zero components do
/// not dominate.
pub fn gradient_check(
    model: &SystemModel,
    pulse: &PulseGrid,
    cfg: &FitnessConfig,
    components: &[(usize, usize)],
    step: f64,
) -> Result<GradientCheck> {
    if !(step > 0.0) || components.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs a positive step and components".into()));
    }
    for &(c, m) in components {
        if c >= pulse.channels() || m >= pulse.segments() {
            return Err(Error::IndexOutOfRange(format!("component ({c}, {m})")));
        }
    }
    let g = gradient(model, pulse, cfg)?;
    let gmax = g.iter().flatten().fold(0.0f64, |a, &x| a.max(x.abs()));
    let mut out = GradientCheck { max_rel_error: 0.0, worst: components[0], step, components: components.len() };
    for &(c, m) in components {
        let mut p = pulse.clone();
        p.amplitudes[c][m] += step;
        let fp = total_fitness(model, &p, cfg)?.phi;
        p.amplitudes[c][m] -= 2.0 * step;
        let fm = total_fitness(model, &p, cfg)?.phi;
        let fd = (fp - fm) / (2.0 * step);
        let err = (fd - g[c][m]).abs() / g[c][m].abs().max(1e-3 * gmax).max(f64::MIN_POSITIVE);
        if err > out.max_rel_error || err.is_nan() {
            out.max_rel_error = err;
            out.worst = (c, m);
        }
    }
    Ok(out)
}
