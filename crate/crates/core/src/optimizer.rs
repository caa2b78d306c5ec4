// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

//! GRAPE ascent: projected LBFGS on smoothed raw parameters with an outer
//! loop that relaxes the penalty weights until `Φ₀` reaches its threshold.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianSmoother, PulseGrid, SystemModel};
use crate::objective::{raw_fitness, smoothed_pulse, total_fitness, FitnessConfig, FitnessReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_inner_iters: usize,
    pub lbfgs_memory: usize,
    pub armijo_c: f64,
    pub backtrack_shrink: f64,
    pub max_backtracks: usize,
    /// Stop when `Ω_max` times the largest projected-gradient component falls below this.
    pub grad_tolerance: f64,
    /// Stop when an accepted step improves `Φ` by less than this.
    pub phi_tolerance: f64,
    /// Amplitude bound `Ω_max` in rad/s.
    pub omega_max: f64,
    /// Gaussian smoothing width in segments (0 disables smoothing).
    pub smoothing_sigma: f64,
    pub adjacency_bound: Option<f64>,
    pub lambda_decay: f64,
    /// Raise the weights by `1/lambda_decay` when `1 − Φ₀` is ten times below `1 − threshold`.
    pub lambda_reincrease: bool,
    pub max_outer_rounds: usize,
    pub rng_seed: u64,
    /// Half-width of the uniform initialization; `None` means `0.1·Ω_max`.
    pub init_scale: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_inner_iters: 200,
            lbfgs_memory: 10,
            armijo_c: 1e-4,
            backtrack_shrink: 0.5,
            max_backtracks: 40,
            grad_tolerance: 1e-12,
            phi_tolerance: 1e-15,
            omega_max: 1.0,
            smoothing_sigma: 0.0,
            adjacency_bound: None,
            lambda_decay: 0.5,
            lambda_reincrease: false,
            max_outer_rounds: 5,
            rng_seed: 0,
            init_scale: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.omega_max > 0.0 && self.omega_max.is_finite()) {
            return bad("omega_max must be positive");
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay < 1.0) {
            return bad("lambda_decay must lie in (0,1)");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) || !(self.backtrack_shrink > 0.0 && self.backtrack_shrink < 1.0) {
            return bad("line-search parameters must lie in (0,1)");
        }
        if self.lbfgs_memory == 0 || self.max_outer_rounds == 0 {
            return bad("lbfgs_memory and max_outer_rounds must be positive");
        }
        if let Some(s) = self.init_scale {
            if !(s >= 0.0 && s <= self.omega_max) {
                return bad("init_scale must lie in [0, omega_max]");
            }
        }
        if let Some(b) = self.adjacency_bound {
            if !(b > 0.0) {
                return bad("adjacency_bound must be positive");
            }
        }
        GaussianSmoother::new(self.smoothing_sigma)?;
        Ok(())
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale.unwrap_or(0.1 * self.omega_max)
    }
}

/// Curvature pairs `(s, y)` with `y = −Δ∇Φ`, newest last.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsHistory {
    memory: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LbfgsHistory {
    pub fn new(memory: usize) -> Self {
        Self { memory: memory.max(1), pairs: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores the pair unless its curvature `s·y` is not safely positive.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt()) || !sy.is_finite() {
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y));
        true
    }
}

/// Two-loop recursion: ascent direction `H·∇Φ`, or `∇Φ` with an empty history.
pub fn lbfgs_step(history: &LbfgsHistory, gradient: &[f64]) -> Vec<f64> {
    let mut q = gradient.to_vec();
    let Some((s_last, y_last)) = history.pairs.back() else {
        return q;
    };
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y) in history.pairs.iter().rev() {
        let rho = 1.0 / dot(s, y);
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push((a, rho));
    }
    let gamma = dot(s_last, y_last) / dot(y_last, y_last);
    q.iter_mut().for_each(|v| *v *= gamma);
    for ((s, y), (a, rho)) in history.pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStatus {
    GradientTolerance,
    Stalled,
    LineSearchFailed,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub round: usize,
    pub iteration: usize,
    pub phi0: f64,
    pub phi: f64,
    pub penalties: Vec<f64>,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub lambdas: Vec<f64>,
    pub phi0: f64,
    pub phi: f64,
    pub iterations: usize,
    pub status: InnerStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyViolation {
    pub channel: usize,
    pub segment: usize,
    pub jump: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// The returned pulse meets the `Φ₀` threshold.
    Converged,
    /// No round reached the threshold; the best pulse is returned anyway.
    BelowThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub iterations: Vec<IterationRecord>,
    pub rounds: Vec<RoundRecord>,
    pub status: RunStatus,
    /// Round whose pulse was returned.
    pub best_round: usize,
    pub adjacency_violations: Vec<AdjacencyViolation>,
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    /// Raw parameters before smoothing.
    pub raw: PulseGrid,
    /// Smoothed, clipped pulse.
    pub pulse: PulseGrid,
    /// Report of `pulse` under the weights of the returned round.
    pub report: FitnessReport,
    pub trace: OptimizationTrace,
}

/// Objective value, auxiliary report and gradient at a point.
pub struct Evaluation<T> {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub info: T,
}

/// Box-constrained LBFGS ascent on `f` over `|x_i| ≤ bound`.
pub struct InnerOutcome<T> {
    pub x: Vec<f64>,
    pub best: Evaluation<T>,
    pub status: InnerStatus,
    pub iterations: usize,
}

fn clip(x: f64, bound: f64) -> f64 {
    x.clamp(-bound, bound)
}

/// Zeroes components pinned at the bound whose gradient points outward.
fn project(x: &[f64], g: &[f64], bound: f64) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| {
            let pinned = xi.abs() >= bound * (1.0 - 1e-15);
            if pinned && gi * xi > 0.0 {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

/// One secant step on the directional derivative when the accepted point is
/// still far from stationary along `d`; kept only if it improves the value.
#[allow(clippy::too_many_arguments)]
fn refine<T>(
    f: &mut impl FnMut(&[f64]) -> Result<Evaluation<T>>,
    x: &[f64],
    d: &[f64],
    pg: &[f64],
    t: f64,
    trial: Vec<f64>,
    moved: Vec<f64>,
    ev: Evaluation<T>,
    bound: f64,
) -> Result<(Vec<f64>, Vec<f64>, Evaluation<T>)> {
    let p0 = dot(pg, d);
    let pt = dot(&project(&trial, &ev.gradient, bound), d);
    if !(pt.abs() > SECANT_TRIGGER * p0) || !(p0 - pt > 0.0) {
        return Ok((trial, moved, ev));
    }
    let ts = (t * p0 / (p0 - pt)).min(4.0 * t);
    let alt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| clip(xi + ts * di, bound)).collect();
    let alt_ev = f(&alt)?;
    if alt_ev.value.is_finite() && alt_ev.value > ev.value {
        let alt_moved = alt.iter().zip(x).map(|(a, b)| a - b).collect();
        Ok((alt, alt_moved, alt_ev))
    } else {
        Ok((trial, moved, ev))
    }
}

const SECANT_TRIGGER: f64 = 0.5;

pub fn maximize<T>(
    mut f: impl FnMut(&[f64]) -> Result<Evaluation<T>>,
    x0: Vec<f64>,
    bound: f64,
    cfg: &OptimizerConfig,
    mut on_iter: impl FnMut(usize, &Evaluation<T>, f64, f64),
) -> Result<InnerOutcome<T>> {
    let mut x: Vec<f64> = x0.into_iter().map(|v| clip(v, bound)).collect();
    let mut cur = f(&x)?;
    let mut history = LbfgsHistory::new(cfg.lbfgs_memory);
    // steepest-ascent restarts reuse the length of the last accepted move
    let mut prev_move = 0.1 * bound;
    let mut status = InnerStatus::MaxIterations;
    let mut iterations = 0;
    for it in 0..cfg.max_inner_iters {
        let pg = project(&x, &cur.gradient, bound);
        let gnorm = pg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gnorm * bound < cfg.grad_tolerance {
            status = InnerStatus::GradientTolerance;
            break;
        }
        let mut d = lbfgs_step(&history, &pg);
        d = project(&x, &d, bound);
        if !(dot(&d, &pg) > 0.0) {
            history.clear();
            d = pg.clone();
        }
        let mut t = if history.is_empty() { prev_move / d.iter().fold(0.0f64, |a, v| a.max(v.abs())) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| clip(xi + t * di, bound)).collect();
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let predicted = dot(&pg, &moved);
            let mut next = cfg.backtrack_shrink * t;
            if predicted > 0.0 {
                let ev = f(&trial)?;
                if ev.value.is_finite() && ev.value >= cur.value + cfg.armijo_c * predicted {
                    accepted = Some(refine(&mut f, &x, &d, &pg, t, trial, moved, ev, bound)?);
                    break;
                }
                // maximizer of the quadratic through f(0), f'(0) and f(t), kept within [0.1t, shrink·t]
                let curv = ev.value - cur.value - predicted;
                if ev.value.is_finite() && curv < 0.0 {
                    next = (-0.5 * predicted * t / curv).clamp(0.1 * t, next);
                }
            }
            t = next;
        }
        let Some((trial, s, ev)) = accepted else {
            if !history.is_empty() {
                history.clear();
                continue;
            }
            status = InnerStatus::LineSearchFailed;
            break;
        };
        iterations = it + 1;
        let gain = ev.value - cur.value;
        let y: Vec<f64> = cur.gradient.iter().zip(&ev.gradient).map(|(a, b)| a - b).collect();
        prev_move = s.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-6 * bound);
        history.push(s, y);
        x = trial;
        cur = ev;
        let gnew = project(&x, &cur.gradient, bound).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        on_iter(it, &cur, gnew, t);
        if gain < cfg.phi_tolerance {
            status = InnerStatus::Stalled;
            break;
        }
    }
    Ok(InnerOutcome { x, best: cur, status, iterations })
}

/// Clips to `±Ω_max` and audits adjacent jumps against the optional bound.
pub fn enforce_constraints(pulse: &PulseGrid, cfg: &OptimizerConfig) -> (PulseGrid, Vec<AdjacencyViolation>) {
    let mut out = pulse.clone();
    for ch in out.amplitudes.iter_mut() {
        ch.iter_mut().for_each(|u| *u = clip(*u, cfg.omega_max));
    }
    let mut violations = Vec::new();
    if let Some(bound) = cfg.adjacency_bound {
        for (c, ch) in out.amplitudes.iter().enumerate() {
            for (m, w) in ch.windows(2).enumerate() {
                let jump = (w[1] - w[0]).abs();
                if jump > bound {
                    violations.push(AdjacencyViolation { channel: c, segment: m, jump });
                }
            }
        }
    }
    (out, violations)
}

/// Step 1: uniform raw parameters in `±init_scale` from the seeded stream.
pub fn initial_raw(channels: usize, segments: usize, duration: f64, cfg: &OptimizerConfig) -> Result<PulseGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let s = cfg.init_scale();
    let amps = (0..channels)
        .map(|_| (0..segments).map(|_| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 }).collect())
        .collect();
    PulseGrid::new(duration, amps)
}

fn flatten(p: &PulseGrid) -> Vec<f64> {
    p.amplitudes.iter().flatten().copied().collect()
}

fn unflatten(x: &[f64], channels: usize, duration: f64) -> Result<PulseGrid> {
    let m = x.len() / channels;
    PulseGrid::new(duration, x.chunks(m).map(|c| c.to_vec()).collect())
}

/// Runs Steps 1–4 from the seeded initialization.
pub fn run_grape(
    model: &SystemModel,
    fitness: &FitnessConfig,
    cfg: &OptimizerConfig,
    duration: f64,
    segments: usize,
) -> Result<OptimizationResult> {
    let raw = initial_raw(model.channels.len(), segments, duration, cfg)?;
    run_grape_from(model, fitness, cfg, raw)
}

/// Steps 2–4 from given raw parameters.
pub fn run_grape_from(
    model: &SystemModel,
    fitness: &FitnessConfig,
    cfg: &OptimizerConfig,
    raw0: PulseGrid,
) -> Result<OptimizationResult> {
    cfg.validate()?;
    fitness.validate()?;
    raw0.validate()?;
    if raw0.channels() != model.channels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} raw channels for {} controls",
            raw0.channels(),
            model.channels.len()
        )));
    }
    let (duration, channels) = (raw0.duration, raw0.channels());
    let mut x = flatten(&raw0);
    let mut weights = fitness.weights();
    let mut iterations = Vec::new();
    let mut rounds = Vec::new();
    // (meets threshold, score, round, raw parameters, weights)
    let mut best: Option<(bool, f64, usize, Vec<f64>, Vec<f64>)> = None;
    for round in 0..cfg.max_outer_rounds {
        let fc = fitness.with_weights(&weights);
        let eval = |p: &[f64]| -> Result<Evaluation<FitnessReport>> {
            let mut rep = raw_fitness(model, &unflatten(p, channels, duration)?, cfg.smoothing_sigma, &fc, true)?;
            let g = rep.gradient.take().expect("gradient requested");
            Ok(Evaluation { value: rep.phi, gradient: g.into_iter().flatten().collect(), info: rep })
        };
        let outcome = maximize(eval, x.clone(), cfg.omega_max, cfg, |it, ev, gn, step| {
            iterations.push(IterationRecord {
                round,
                iteration: it,
                phi0: ev.info.phi0,
                phi: ev.info.phi,
                penalties: ev.info.penalties.clone(),
                grad_norm: gn,
                step,
            });
        })?;
        x = outcome.x;
        let rep = &outcome.best.info;
        rounds.push(RoundRecord {
            lambdas: weights.clone(),
            phi0: rep.phi0,
            phi: rep.phi,
            iterations: outcome.iterations,
            status: outcome.status,
        });
        let meets = rep.phi0 >= fitness.phi0_threshold;
        let score = if meets { rep.phi } else { rep.phi0 };
        let better = match &best {
            None => true,
            Some((bm, bs, ..)) => (meets && !bm) || (meets == *bm && score > *bs),
        };
        if better {
            best = Some((meets, score, round, x.clone(), weights.clone()));
        }
        // Step 3
        if !meets {
            weights.iter_mut().for_each(|w| *w *= cfg.lambda_decay);
        } else if cfg.lambda_reincrease && 1.0 - rep.phi0 < 0.1 * (1.0 - fitness.phi0_threshold) {
            weights.iter_mut().for_each(|w| *w /= cfg.lambda_decay);
        } else {
            break;
        }
    }
    let (meets, _, best_round, bx, bw) = best.expect("at least one round");
    let raw = unflatten(&bx, channels, duration)?;
    let smoothed = smoothed_pulse(&raw, cfg.smoothing_sigma)?;
    let (pulse, adjacency_violations) = enforce_constraints(&smoothed, cfg);
    let report = total_fitness(model, &pulse, &fitness.with_weights(&bw))?;
    let status = if meets { RunStatus::Converged } else { RunStatus::BelowThreshold };
    Ok(OptimizationResult {
        raw,
        pulse,
        report,
        trace: OptimizationTrace { iterations, rounds, status, best_round, adjacency_violations },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densemath::{sigma_x, sigma_y, sigma_z, CMatrix};
    use crate::model::{ControlChannel, Isometry, NoiseChannel, RobustnessTerm};
    use crate::propagation::vanloan_static;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn qubit() -> SystemModel {
        SystemModel::new(
            "qubit",
            CMatrix::zeros(2),
            vec![
                ControlChannel::new("x", sigma_x().scale_real(0.5)),
                ControlChannel::new("y", sigma_y().scale_real(0.5)),
            ],
            Isometry::identity(2),
            sigma_x(),
        )
        .unwrap()
    }

    #[test]
    fn empty_history_returns_gradient() {
        let g = vec![1.0, -2.0, 3.0];
        assert_eq!(lbfgs_step(&LbfgsHistory::new(5), &g), g);
    }

    #[test]
    fn negative_curvature_pair_is_skipped() {
        let mut h = LbfgsHistory::new(3);
        assert!(!h.push(vec![1.0, 0.0], vec![-1.0, 0.0]));
        assert!(h.is_empty());
        assert!(h.push(vec![1.0, 0.0], vec![2.0, 0.5]));
        let d = lbfgs_step(&h, &[1.0, 1.0]);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn quadratic_converges_in_ten_iterations() {
        // Φ = −½(x−c)ᵀA(x−c) with A symmetric positive definite
        let a = [
            [4.0, 1.0, 0.0, 0.0, 0.5],
            [1.0, 3.0, 0.2, 0.0, 0.0],
            [0.0, 0.2, 2.0, 0.3, 0.0],
            [0.0, 0.0, 0.3, 5.0, 1.0],
            [0.5, 0.0, 0.0, 1.0, 6.0],
        ];
        let c = [0.3, -0.2, 0.1, 0.25, -0.15];
        let f = |x: &[f64]| -> Result<Evaluation<()>> {
            let r: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
            let ar: Vec<f64> = a.iter().map(|row| dot(row, &r)).collect();
            Ok(Evaluation { value: -0.5 * dot(&r, &ar), gradient: ar.iter().map(|v| -v).collect(), info: () })
        };
        let cfg = OptimizerConfig { max_inner_iters: 10, grad_tolerance: 1e-11, phi_tolerance: 0.0, ..Default::default() };
        let out = maximize(f, vec![0.0; 5], 1.0, &cfg, |_, _, _, _| {}).unwrap();
        let err = out.x.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err} after {} iterations", out.iterations);
        assert!(out.iterations <= 10, "{} iterations", out.iterations);
    }

    #[test]
    fn bound_is_respected_when_optimum_is_outside() {
        let f = |x: &[f64]| -> Result<Evaluation<()>> {
            Ok(Evaluation { value: -(x[0] - 3.0).powi(2), gradient: vec![-2.0 * (x[0] - 3.0)], info: () })
        };
        let out = maximize(f, vec![0.0], 1.0, &OptimizerConfig::default(), |_, _, _, _| {}).unwrap();
        assert_eq!(out.x, vec![1.0]);
        assert_eq!(out.status, InnerStatus::GradientTolerance);
    }

    #[test]
    fn constraints_clip_and_audit() {
        let cfg = OptimizerConfig { omega_max: 1.0, adjacency_bound: Some(0.5), ..Default::default() };
        let inside = PulseGrid::new(1.0, vec![vec![0.1, 0.2, -0.3]]).unwrap();
        let (same, v) = enforce_constraints(&inside, &cfg);
        assert_eq!(same, inside);
        assert!(v.is_empty());
        let wild = PulseGrid::new(1.0, vec![vec![2.0, -2.0]]).unwrap();
        let (clipped, v) = enforce_constraints(&wild, &cfg);
        assert_eq!(clipped.amplitudes[0], vec![1.0, -1.0]);
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn smoothing_halves_a_step() {
        let s = GaussianSmoother::new(3.0).unwrap();
        let raw: Vec<f64> = (0..40).map(|m| if m < 20 { 0.0 } else { 1.0 }).collect();
        let u = s.apply(&raw);
        assert!(u.windows(2).all(|w| (w[1] - w[0]).abs() < 0.5));
    }

    #[test]
    fn x_gate_noiseless() {
        let model = qubit();
        let cfg = OptimizerConfig { omega_max: 40.0, max_inner_iters: 200, rng_seed: 7, ..Default::default() };
        let res = run_grape(&model, &FitnessConfig::noiseless(), &cfg, 1.0, 20).unwrap();
        assert!(res.report.phi0 > 1.0 - 1e-8, "{}", res.report.phi0);
        assert_eq!(res.trace.rounds.len(), 1);
        assert_eq!(res.trace.status, RunStatus::Converged);
        assert!(res.pulse.max_abs() <= cfg.omega_max);
    }

    #[test]
    fn robust_x_gate_suppresses_first_order_dephasing() {
        let model = qubit();
        let z = NoiseChannel::static_fixed("z", sigma_z().scale_real(0.5), 0.0).unwrap();
        let base = FitnessConfig {
            noises: vec![z],
            terms: vec![RobustnessTerm::first_order(0, 0.0)],
            phi0_threshold: 0.9999,
            ..FitnessConfig::noiseless()
        };
        let cfg = OptimizerConfig { omega_max: 40.0, max_inner_iters: 400, rng_seed: 3, ..Default::default() };
        let d1 = |p: &PulseGrid| {
            let vl = vanloan_static(&model, p, &[&base.noises[0]]).unwrap();
            vl.first_order(0).frob_norm_sq()
        };
        let plain = run_grape(&model, &base, &cfg, 1.0, 40).unwrap();
        let robust = run_grape(&model, &base.with_weights(&[0.1]), &cfg, 1.0, 40).unwrap();
        assert!(robust.report.phi0 > 0.9999, "{}", robust.report.phi0);
        assert!(d1(&robust.pulse) * 10.0 <= d1(&plain.pulse), "{} vs {}", d1(&robust.pulse), d1(&plain.pulse));
    }

    #[test]
    fn rounds_relax_weights_and_run_is_deterministic() {
        let model = qubit();
        let z = NoiseChannel::static_fixed("z", sigma_z().scale_real(0.5), 0.0).unwrap();
        // an absurd weight forces Φ₀ below threshold in the first round
        let fc = FitnessConfig {
            noises: vec![z],
            terms: vec![RobustnessTerm::first_order(0, 1e3)],
            phi0_threshold: 0.999,
            ..FitnessConfig::noiseless()
        };
        let cfg = OptimizerConfig {
            omega_max: 5.0,
            max_inner_iters: 30,
            max_outer_rounds: 4,
            smoothing_sigma: 1.5,
            rng_seed: 11,
            ..Default::default()
        };
        let a = run_grape(&model, &fc, &cfg, 1.0, 16).unwrap();
        let b = run_grape(&model, &fc, &cfg, 1.0, 16).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.pulse, b.pulse);
        for w in a.trace.rounds.windows(2) {
            assert!(w[1].lambdas[0] <= w[0].lambdas[0]);
        }
        assert!(a.pulse.max_abs() <= cfg.omega_max);
        // Φ never decreases within a round
        for w in a.trace.iterations.windows(2) {
            if w[0].round == w[1].round {
                assert!(w[1].phi >= w[0].phi);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn lbfgs_direction_is_ascent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h = LbfgsHistory::new(4);
            for _ in 0..6 {
                let s: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                h.push(s, y);
            }
            let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = lbfgs_step(&h, &g);
            // accepted pairs have s·y > 0, so the implied inverse Hessian is positive definite
            prop_assert!(dot(&d, &g) > 0.0);
        }
    }
}
