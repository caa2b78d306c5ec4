// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

//! Test-support oracles: Dyson-series Riemann sums in the toggling frame.
//!
//! Nothing here is used by the optimizer. The sums are independent of the
//! Van Loan construction and converge to it as `O(Δt²)`.

use crate::densemath::{expm, CMatrix, C64};
use crate::error::{Error, Result};
use crate::model::{NoiseChannel, PulseGrid, SystemModel};

/// `U(t)` at each segment midpoint.
fn midpoint_propagators(model: &SystemModel, pulse: &PulseGrid) -> Result<(Vec<CMatrix>, CMatrix)> {
    let dt = pulse.dt();
    let mut mids = Vec::with_capacity(pulse.segments());
    let mut acc = CMatrix::identity(model.dim_full());
    for m in 0..pulse.segments() {
        let h = model.hamiltonian_at(pulse, m)?;
        let half = expm(&h.scale(C64::new(0.0, -0.5 * dt)))?;
        let mid = half.matmul(&acc);
        acc = half.matmul(&mid);
        mids.push(mid);
    }
    Ok((mids, acc))
}

fn toggle(u: &CMatrix, e: &CMatrix) -> CMatrix {
    u.adjoint().matmul(&e.matmul(u))
}

/// `U(T)·[𝟙 − i∫H̃_V − ∫∫_{t₁>t₂} H̃_V(t₁)H̃_V(t₂)]` truncated after `order`,
/// with `H_V(t_m) = Σ_j ε_j[m]·E_j[m]` built from sampled trajectories.
pub fn dyson_series(
    model: &SystemModel,
    pulse: &PulseGrid,
    noises: &[&NoiseChannel],
    trajectories: &[Vec<f64>],
    order: usize,
) -> Result<CMatrix> {
    if order > 2 {
        return Err(Error::Unsupported(format!("Dyson order {order}")));
    }
    if trajectories.len() != noises.len() || trajectories.iter().any(|t| t.len() != pulse.segments()) {
        return Err(Error::DimensionMismatch("one trajectory of M samples per noise is required".into()));
    }
    let (mids, total) = midpoint_propagators(model, pulse)?;
    let dt = pulse.dt();
    let d = model.dim_full();
    let mut first = CMatrix::zeros(d);
    let mut second = CMatrix::zeros(d);
    for (m, u) in mids.iter().enumerate() {
        let mut hv = CMatrix::zeros(d);
        for (n, traj) in noises.iter().zip(trajectories) {
            if traj[m] != 0.0 {
                hv.axpy_real(traj[m], &n.operator_at(model, pulse, m)?);
            }
        }
        let ht = toggle(u, &hv).scale_real(dt);
        if order >= 2 {
            // later times on the left; the diagonal cell of the ordered square counts half
            let mut cell = first.clone();
            cell.axpy_real(0.5, &ht);
            second += &ht.matmul(&cell);
        }
        first += &ht;
    }
    let mut series = CMatrix::identity(d);
    if order >= 1 {
        series.axpy(C64::new(0.0, -1.0), &first);
    }
    if order >= 2 {
        series -= &second;
    }
    Ok(total.matmul(&series))
}

/// Ensemble-averaged second-order term of a time-dependent noise:
/// `−2·U(T)·∫∫_{t₁>t₂} c(t₁−t₂)·Ẽ(t₁)Ẽ(t₂)` with `c(τ) = Σ_i a_i e^{b_i τ}`.
pub fn dyson_correlated(model: &SystemModel, pulse: &PulseGrid, noise: &NoiseChannel) -> Result<CMatrix> {
    let terms = noise.autocorrelation();
    if terms.is_empty() {
        return Err(Error::InvalidArgument(format!("noise '{}' is static", noise.name)));
    }
    let (mids, total) = midpoint_propagators(model, pulse)?;
    let dt = pulse.dt();
    let d = model.dim_full();
    // acc_i = Σ_{m₂<m} e^{b_i(t_m − t_{m₂})}·Ẽ(t_{m₂})Δt, advanced by e^{b_iΔt} per segment
    let mut acc = vec![CMatrix::zeros(d); terms.len()];
    let mut sum = CMatrix::zeros(d);
    for (m, u) in mids.iter().enumerate() {
        let et = toggle(u, &noise.operator_at(model, pulse, m)?).scale_real(dt);
        let c0: C64 = terms.iter().map(|t| t.a).sum();
        sum.axpy(0.5 * c0, &et.matmul(&et));
        for (t, a) in terms.iter().zip(acc.iter_mut()) {
            sum.axpy(t.a, &et.matmul(a));
            *a += &et;
            a.scale_mut((t.b * dt).exp());
        }
    }
    Ok(total.matmul(&sum).scale_real(-2.0))
}
