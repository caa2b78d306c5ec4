// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

//! Piecewise-constant propagation and Van Loan directional derivatives.
//!
//! A Van Loan *chain* is a block upper-bidiagonal generator with `H[m]` on
//! every diagonal block and noise operators on the superdiagonal. The ordered
//! product of its segment exponentials carries `U(T)` on the diagonal and
//! nested toggling-frame integrals above it:
//!
//! * block `(i, i+1)` is `−i·U(T)·∫ Ẽ_i(t) dt`,
//! * block `(i, i+2)` is `−U(T)·∫∫_{t₁>t₂} Ẽ_i(t₁)Ẽ_{i+1}(t₂)`.
//!
//! The second-order derivative `𝒟²(E₁,E₂) = ∂²U/∂ε₁∂ε₂` is the sum of both
//! orderings of the time-ordered double integral, so it equals twice the
//! `(0,2)` block when `E₁ = E₂`.

use rayon::prelude::*;

use crate::densemath::{expm, CMatrix, C64, ONE, ZERO};
use crate::error::{Error, Result};
use crate::model::{NoiseChannel, NoiseKind, NoiseOperator, PulseGrid, RobustnessTerm, SystemModel};

/// Segment propagators of `H[m]` and their running products.
#[derive(Debug, Clone)]
pub struct PropagationCache {
    pub segment_propagators: Vec<CMatrix>,
    /// `prefix_products[m] = U_m ⋯ U_0`.
    pub prefix_products: Vec<CMatrix>,
    pub total: CMatrix,
}

pub fn propagate(model: &SystemModel, pulse: &PulseGrid) -> Result<PropagationCache> {
    let dt = pulse.dt();
    let mut segment_propagators = Vec::with_capacity(pulse.segments());
    let mut prefix_products: Vec<CMatrix> = Vec::with_capacity(pulse.segments());
    for m in 0..pulse.segments() {
        let h = model.hamiltonian_at(pulse, m)?;
        let u = expm(&h.scale(C64::new(0.0, -dt)))?;
        let next = match prefix_products.last() {
            Some(prev) => u.matmul(prev),
            None => u.clone(),
        };
        segment_propagators.push(u);
        prefix_products.push(next);
    }
    let total = prefix_products.last().cloned().expect("pulse has at least one segment");
    Ok(PropagationCache { segment_propagators, prefix_products, total })
}

/// Total propagator only.
pub fn total_propagator(model: &SystemModel, pulse: &PulseGrid) -> Result<CMatrix> {
    Ok(propagate_chain(model, pulse, &Chain::plain(), false)?.total)
}

/// Superdiagonal entry `e^{rate·(t_m − t_ref)}·E[m]`.
#[derive(Debug, Clone)]
pub(crate) struct Link {
    op: NoiseOperator,
    rate: C64,
}

/// Block upper-bidiagonal generator layout.
#[derive(Debug, Clone)]
pub struct Chain {
    links: Vec<Link>,
    t_ref: f64,
}

impl Chain {
    /// The bare Hamiltonian (one block).
    pub fn plain() -> Self {
        Self { links: Vec::new(), t_ref: 0.0 }
    }

    /// Static operators `E_1..E_N` on the superdiagonal.
    pub fn static_noises(noises: &[&NoiseChannel]) -> Result<Self> {
        let mut links = Vec::with_capacity(noises.len());
        for n in noises {
            if !n.is_static() {
                return Err(Error::InvalidArgument(format!("noise '{}' is time-dependent", n.name)));
            }
            links.push(Link { op: n.operator.clone(), rate: ZERO });
        }
        Ok(Self { links, t_ref: 0.0 })
    }

    /// `[[H, e^{b t}E, 0], [0, H, e^{−b t}E], [0, 0, H]]` with `t` measured from `t_ref`.
    pub fn timedep_term(noise: &NoiseChannel, term: usize, t_ref: f64) -> Result<Self> {
        let terms = match &noise.kind {
            NoiseKind::Static => return Err(Error::InvalidArgument(format!("noise '{}' is static", noise.name))),
            NoiseKind::TimeDependent { autocorrelation } => autocorrelation,
        };
        let b = terms
            .get(term)
            .ok_or_else(|| Error::IndexOutOfRange(format!("autocorrelation term {term} >= {}", terms.len())))?
            .b;
        Ok(Self {
            links: vec![Link { op: noise.operator.clone(), rate: b }, Link { op: noise.operator.clone(), rate: -b }],
            t_ref,
        })
    }

    pub fn blocks(&self) -> usize {
        self.links.len() + 1
    }

    fn link_factor(&self, link: &Link, t: f64) -> C64 {
        if link.rate == ZERO {
            ONE
        } else {
            (link.rate * (t - self.t_ref)).exp()
        }
    }

    /// Generator `X[m]` of segment `m`.
    pub fn generator(&self, model: &SystemModel, pulse: &PulseGrid, m: usize) -> Result<CMatrix> {
        let hc = model.control_hamiltonian_at(pulse, m)?;
        if self.links.is_empty() {
            return Ok(&hc + &model.drift);
        }
        let d = model.dim_full();
        let t = model.sample_time(pulse, m);
        let h = &hc + &model.drift;
        let mut out = CMatrix::zeros(self.blocks() * d);
        for i in 0..self.blocks() {
            out.set_block(i, i, &h);
        }
        for (i, link) in self.links.iter().enumerate() {
            let f = self.link_factor(link, t);
            let e = match &link.op {
                NoiseOperator::Fixed(e) => {
                    if e.dim() != d {
                        return Err(Error::DimensionMismatch(format!(
                            "noise operator is {}-dimensional, model is {d}",
                            e.dim()
                        )));
                    }
                    e.scale(f)
                }
                NoiseOperator::ControlProportional => hc.scale(f),
            };
            out.set_block(i, i + 1, &e);
        }
        Ok(out)
    }

    /// `Tr(∂X[m]/∂u_c[m] · K)` for a chain-sized matrix `K`.
    pub fn control_trace(&self, model: &SystemModel, pulse: &PulseGrid, c: usize, m: usize, k: &CMatrix) -> C64 {
        let d = model.dim_full();
        let g = &model.channels[c].generator;
        let carrier = model.carrier_factor(pulse, c, m);
        if carrier == 0.0 {
            return ZERO;
        }
        let mut acc = ZERO;
        for i in 0..self.blocks() {
            acc += block_trace(g, k, i, i, d);
        }
        let t = model.sample_time(pulse, m);
        for (i, link) in self.links.iter().enumerate() {
            if matches!(link.op, NoiseOperator::ControlProportional) {
                // ∂X has G at block (i, i+1), which pairs with K's block (i+1, i)
                acc += self.link_factor(link, t) * block_trace(g, k, i + 1, i, d);
            }
        }
        acc * carrier
    }
}

/// `Tr(G · K_{bi,bj})` without extracting the block.
fn block_trace(g: &CMatrix, k: &CMatrix, bi: usize, bj: usize, d: usize) -> C64 {
    let n = k.dim();
    let ks = k.as_slice();
    let mut acc = ZERO;
    for r in 0..d {
        let grow = g.row(r);
        for (s, &gv) in grow.iter().enumerate() {
            if gv != ZERO {
                acc += gv * ks[(bi * d + s) * n + bj * d + r];
            }
        }
    }
    acc
}

/// Ordered product `V_{M−1} ⋯ V_0` of a chain, optionally with all prefixes.
#[derive(Debug, Clone)]
pub struct ChainProduct {
    pub total: CMatrix,
    /// `prefix[m] = V_m ⋯ V_0`, present when requested.
    pub prefix: Option<Vec<CMatrix>>,
}

pub fn propagate_chain(model: &SystemModel, pulse: &PulseGrid, chain: &Chain, keep_prefix: bool) -> Result<ChainProduct> {
    let dt = pulse.dt();
    let mut prefix = keep_prefix.then(|| Vec::with_capacity(pulse.segments()));
    let mut total: Option<CMatrix> = None;
    for m in 0..pulse.segments() {
        let x = chain.generator(model, pulse, m)?;
        let v = expm(&x.scale(C64::new(0.0, -dt)))?;
        let next = match &total {
            Some(prev) => v.matmul(prev),
            None => v,
        };
        if let Some(p) = prefix.as_mut() {
            p.push(next.clone());
        }
        total = Some(next);
    }
    Ok(ChainProduct { total: total.expect("pulse has at least one segment"), prefix })
}

/// Van Loan product of a static chain with `N` noise operators.
#[derive(Debug, Clone)]
pub struct VanLoanStatic {
    pub product: CMatrix,
    dim: usize,
}

impl VanLoanStatic {
    pub fn blocks(&self) -> usize {
        self.product.dim() / self.dim
    }

    pub fn block(&self, i: usize, j: usize) -> CMatrix {
        self.product.block(i, j, self.dim)
    }

    pub fn total(&self) -> CMatrix {
        self.block(0, 0)
    }

    /// `𝒟¹(E_j)`, the `(j, j+1)` block.
    pub fn first_order(&self, j: usize) -> CMatrix {
        self.block(j, j + 1)
    }
}

pub fn vanloan_static(model: &SystemModel, pulse: &PulseGrid, noises: &[&NoiseChannel]) -> Result<VanLoanStatic> {
    let chain = Chain::static_noises(noises)?;
    let product = propagate_chain(model, pulse, &chain, false)?.total;
    Ok(VanLoanStatic { product, dim: model.dim_full() })
}

/// `𝒟²(E_a, E_b) = ∂²U/∂ε_a∂ε_b` for static noises.
pub fn second_order_static(model: &SystemModel, pulse: &PulseGrid, a: &NoiseChannel, b: &NoiseChannel) -> Result<CMatrix> {
    let picks = static_second_order_picks(a, b)?;
    assemble(model, pulse, &picks)
}

/// `2·Σ_i a_i·[(0,2) block of Π_m exp(−iΔt·C_i[m])]`: the ensemble-averaged second-order term.
///
/// Equals [`second_order_static`] with both slots `E` when the expansion is one term with `b = 0`.
pub fn vanloan_timedep(model: &SystemModel, pulse: &PulseGrid, noise: &NoiseChannel) -> Result<CMatrix> {
    let picks = timedep_picks(noise, pulse.duration)?;
    assemble(model, pulse, &picks)
}

/// One chain and the weighted blocks of its product that enter a derivative.
#[derive(Debug, Clone)]
pub struct ChainPick {
    pub chain: Chain,
    /// `(row block, column block, weight)`.
    pub blocks: Vec<(usize, usize, C64)>,
}

fn static_second_order_picks(a: &NoiseChannel, b: &NoiseChannel) -> Result<Vec<ChainPick>> {
    if a == b {
        Ok(vec![ChainPick { chain: Chain::static_noises(&[a, a])?, blocks: vec![(0, 2, C64::new(2.0, 0.0))] }])
    } else {
        Ok(vec![ChainPick { chain: Chain::static_noises(&[a, b, a])?, blocks: vec![(0, 2, ONE), (1, 3, ONE)] }])
    }
}

fn timedep_picks(noise: &NoiseChannel, duration: f64) -> Result<Vec<ChainPick>> {
    let terms = noise.autocorrelation();
    if terms.is_empty() {
        return Err(Error::InvalidArgument(format!("noise '{}' is static", noise.name)));
    }
    // referencing e^{±b t} to mid-pulse keeps both exponentials O(e^{|b|T/2})
    let t_ref = 0.5 * duration;
    terms
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(ChainPick { chain: Chain::timedep_term(noise, i, t_ref)?, blocks: vec![(0, 2, 2.0 * t.a)] })
        })
        .collect()
}

/// Chains whose weighted blocks sum to the derivative of `term`.
pub fn term_picks(noises: &[NoiseChannel], term: &RobustnessTerm, duration: f64) -> Result<Vec<ChainPick>> {
    term.validate(noises)?;
    let first = &noises[term.noises[0]];
    match (term.order, first.is_static()) {
        (1, _) => Ok(vec![ChainPick { chain: Chain::static_noises(&[first])?, blocks: vec![(0, 1, ONE)] }]),
        (2, true) => static_second_order_picks(first, &noises[term.noises[1]]),
        (2, false) => timedep_picks(first, duration),
        _ => Err(Error::Unsupported(format!("order {} terms", term.order))),
    }
}

fn assemble(model: &SystemModel, pulse: &PulseGrid, picks: &[ChainPick]) -> Result<CMatrix> {
    let d = model.dim_full();
    let mut out = CMatrix::zeros(d);
    for pick in picks {
        let v = propagate_chain(model, pulse, &pick.chain, false)?.total;
        for &(i, j, w) in &pick.blocks {
            out.axpy(w, &v.block(i, j, d));
        }
    }
    Ok(out)
}

/// Directional derivative of one robustness term.
pub fn directional_derivative(
    model: &SystemModel,
    pulse: &PulseGrid,
    noises: &[NoiseChannel],
    term: &RobustnessTerm,
) -> Result<CMatrix> {
    assemble(model, pulse, &term_picks(noises, term, pulse.duration)?)
}

/// `U(T)` together with the derivative of every robustness term.
#[derive(Debug, Clone)]
pub struct VanLoanResult {
    pub total: CMatrix,
    /// Aligned with the term list.
    pub derivatives: Vec<CMatrix>,
}

pub fn vanloan_terms(
    model: &SystemModel,
    pulse: &PulseGrid,
    noises: &[NoiseChannel],
    terms: &[RobustnessTerm],
) -> Result<VanLoanResult> {
    let total = total_propagator(model, pulse)?;
    let derivatives =
        terms.par_iter().map(|t| directional_derivative(model, pulse, noises, t)).collect::<Result<Vec<_>>>()?;
    Ok(VanLoanResult { total, derivatives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densemath::{sigma_x, sigma_y, sigma_z, I};
    use crate::model::{AutocorrTerm, ControlChannel, Isometry};

    fn qubit(drift: CMatrix) -> SystemModel {
        SystemModel::new(
            "q",
            drift,
            vec![ControlChannel::new("x", sigma_x()), ControlChannel::new("y", sigma_y())],
            Isometry::identity(2),
            sigma_x(),
        )
        .unwrap()
    }

    fn wiggly_pulse(m: usize, t: f64) -> PulseGrid {
        let x = (0..m).map(|k| 1.3 * (0.4 * k as f64).sin() + 0.2).collect();
        let y = (0..m).map(|k| 0.7 * (0.9 * k as f64).cos()).collect();
        PulseGrid::new(t, vec![x, y]).unwrap()
    }

    #[test]
    fn zero_pulse_propagation() {
        let model = qubit(CMatrix::zeros(2));
        let pulse = PulseGrid::zeros(3.0, 2, 7).unwrap();
        assert!(propagate(&model, &pulse).unwrap().total.max_abs_diff(&CMatrix::identity(2)) < 1e-15);

        let model = qubit(CMatrix::from_real_diag(&[0.4, -1.1]));
        let total = propagate(&model, &pulse).unwrap().total;
        let expected = CMatrix::from_diag(&[(C64::new(0.0, -3.0 * 0.4)).exp(), (C64::new(0.0, 3.0 * 1.1)).exp()]);
        assert!(total.max_abs_diff(&expected) < 1e-13);
    }

    #[test]
    fn constant_x_rotation() {
        let t = 2.5;
        let model = qubit(CMatrix::zeros(2));
        let u = std::f64::consts::PI / (2.0 * t);
        let pulse = PulseGrid::new(t, vec![vec![u; 9], vec![0.0; 9]]).unwrap();
        let total = propagate(&model, &pulse).unwrap().total;
        assert!(total.max_abs_diff(&sigma_x().scale(-I)) < 1e-13);
    }

    #[test]
    fn cache_is_consistent() {
        let model = qubit(sigma_z().scale_real(0.8));
        let pulse = wiggly_pulse(25, 4.0);
        let cache = propagate(&model, &pulse).unwrap();
        let mut acc = CMatrix::identity(2);
        for (m, u) in cache.segment_propagators.iter().enumerate() {
            assert!(u.unitarity_error() < 1e-12);
            acc = u.matmul(&acc);
            assert!(acc.max_abs_diff(&cache.prefix_products[m]) < 1e-14);
        }
        assert!(acc.frob_dist(&cache.total) < 1e-12);
        assert!(total_propagator(&model, &pulse).unwrap().frob_dist(&cache.total) < 1e-12);
    }

    #[test]
    fn identity_noise_on_free_evolution() {
        let t = 1.7;
        let model = qubit(CMatrix::zeros(2));
        let pulse = PulseGrid::zeros(t, 2, 10).unwrap();
        let id = NoiseChannel::static_fixed("id", CMatrix::identity(2), 0.0).unwrap();
        let vl = vanloan_static(&model, &pulse, &[&id]).unwrap();
        assert!(vl.first_order(0).max_abs_diff(&CMatrix::identity(2).scale(C64::new(0.0, -t))) < 1e-13);
        let zero = NoiseChannel::static_fixed("zero", CMatrix::zeros(2), 0.0).unwrap();
        let vl = vanloan_static(&model, &wiggly_pulse(10, t), &[&zero, &zero]).unwrap();
        assert!(vl.block(0, 1).frob_norm() == 0.0 && vl.block(1, 2).frob_norm() == 0.0);
        assert!(vl.block(0, 2).frob_norm() == 0.0);
    }

    #[test]
    fn diagonal_blocks_equal_total_and_derivative_is_tangent() {
        let model = qubit(sigma_z().scale_real(0.3));
        let pulse = wiggly_pulse(40, 5.0);
        let z = NoiseChannel::static_fixed("z", sigma_z(), 0.0).unwrap();
        let amp = NoiseChannel::static_control("amp", 0.0).unwrap();
        let vl = vanloan_static(&model, &pulse, &[&z, &amp]).unwrap();
        let total = total_propagator(&model, &pulse).unwrap();
        for i in 0..3 {
            assert!(vl.block(i, i).frob_dist(&total) < 1e-12);
        }
        for j in 0..2 {
            let g = total.adjoint().matmul(&vl.first_order(j));
            assert!((&g + &g.adjoint()).frob_norm() < 1e-12);
        }
    }

    #[test]
    fn timedep_flat_term_matches_static_second_order() {
        let model = qubit(sigma_z().scale_real(0.3));
        let pulse = wiggly_pulse(30, 3.0);
        let td = NoiseChannel::time_dependent("td", sigma_z(), 1.0, vec![AutocorrTerm::real(1.0, 0.0)]).unwrap();
        let st = NoiseChannel::static_fixed("st", sigma_z(), 1.0).unwrap();
        let a = vanloan_timedep(&model, &pulse, &td).unwrap();
        let b = second_order_static(&model, &pulse, &st, &st).unwrap();
        assert!(a.frob_dist(&b) < 1e-12 * b.frob_norm());
    }

    #[test]
    fn timedep_closed_form_on_free_evolution() {
        // H = 0, E = 𝟙. Each segment contributes −Δt²/2 and every ordered pair
        // −Δt²·e^{b(t₁−t₂)}; the continuum limit is −2(e^{bT} − 1 − bT)/b².
        let t = 2.0;
        let model = qubit(CMatrix::zeros(2));
        for (b, m) in [(-0.3, 50usize), (-2.0, 50), (-11.0, 50), (-11.0, 4000)] {
            let pulse = PulseGrid::zeros(t, 2, m).unwrap();
            let n = NoiseChannel::time_dependent("n", CMatrix::identity(2), 1.0, vec![AutocorrTerm::real(1.0, b)])
                .unwrap();
            let d = vanloan_timedep(&model, &pulse, &n).unwrap();
            let dt = t / m as f64;
            let r = (b * dt).exp();
            let pairs: f64 = (1..m).map(|k| (m - k) as f64 * r.powi(k as i32)).sum();
            let discrete = -2.0 * dt * dt * (0.5 * m as f64 + pairs);
            assert!(d.frob_dist(&CMatrix::identity(2).scale_real(discrete)) < 1e-12 * discrete.abs(), "b={b}");
            let closed = -2.0 * ((b * t).exp() - 1.0 - b * t) / (b * b);
            let tol = 2.0 * (dt / t).powi(2) * (b * t).abs().max(1.0).powi(2);
            assert!((discrete - closed).abs() < tol * closed.abs(), "b={b} M={m}: {discrete} vs {closed}");
        }
    }

    #[test]
    fn conjugate_pair_penalty_is_real_and_reference_shift_is_harmless() {
        let model = qubit(sigma_z().scale_real(0.3));
        let pulse = wiggly_pulse(30, 3.0);
        let b = C64::new(-0.8, 2.1);
        let a = C64::new(0.5, 0.2);
        let pair = vec![AutocorrTerm { a, b }, AutocorrTerm { a: a.conj(), b: b.conj() }];
        let n = NoiseChannel::time_dependent("n", sigma_z(), 1.0, pair).unwrap();
        let d = vanloan_timedep(&model, &pulse, &n).unwrap();
        assert!(d.is_finite() && d.frob_norm() > 0.0);
        // the same derivative with exponentials referenced to t = 0
        let mut unshifted = CMatrix::zeros(2);
        for (i, term) in n.autocorrelation().iter().enumerate() {
            let chain = Chain::timedep_term(&n, i, 0.0).unwrap();
            let v = propagate_chain(&model, &pulse, &chain, false).unwrap().total;
            unshifted.axpy(2.0 * term.a, &v.block(0, 2, 2));
        }
        assert!(d.frob_dist(&unshifted) < 1e-12 * d.frob_norm());
    }

    #[test]
    fn block_trace_matches_extraction() {
        let k = CMatrix::from_fn(6, |i, j| C64::new(i as f64 - j as f64, (i * j) as f64 * 0.1));
        let g = sigma_y();
        for (bi, bj) in [(0, 0), (1, 2), (2, 1)] {
            let direct = g.matmul(&k.block(bi, bj, 2)).trace();
            assert!((block_trace(&g, &k, bi, bj, 2) - direct).norm() < 1e-14);
        }
    }
}
