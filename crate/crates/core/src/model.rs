// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

//! Controlled systems, pulses and noise channels.
//!
//! Units: Hamiltonians and amplitudes are angular frequencies (rad/s), times
//! are seconds. Segment indices are zero-based throughout the crate; segment
//! `m` covers `[m·Δt, (m+1)·Δt)`.

use serde::{Deserialize, Serialize};

use crate::densemath::{CMatrix, C64, ONE, ZERO};
use crate::error::{Error, Result};

/// Where inside a segment time-dependent factors (carrier, `e^{b t}`) are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarrierSample {
    /// `t_m = (m + ½)Δt`.
    #[default]
    Midpoint,
    /// `t_m = (m + 1)Δt`, i.e. `mΔt` in one-based indexing.
    End,
}

/// How the projected propagator is scored against the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityKind {
    #[default]
    Plain,
    /// Maximized over single-qubit Z phases on both qubits (two-qubit targets only).
    LocalZ,
}

/// One control input: `u(t)·cos(ω_c t)·G`, or `u(t)·G` without a carrier.
#[derive(Debug, Clone)]
pub struct ControlChannel {
    pub name: String,
    pub generator: CMatrix,
    /// Carrier angular frequency (rad/s).
    pub carrier: Option<f64>,
}

impl ControlChannel {
    pub fn new(name: impl Into<String>, generator: CMatrix) -> Self {
        Self { name: name.into(), generator, carrier: None }
    }

    pub fn with_carrier(mut self, omega: f64) -> Self {
        self.carrier = Some(omega);
        self
    }

    /// Multiplier of the generator at time `t`.
    #[inline]
    pub fn carrier_factor(&self, t: f64) -> f64 {
        self.carrier.map_or(1.0, |w| (w * t).cos())
    }
}

/// Column-orthonormal embedding `𝒮` of the computational subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Isometry {
    rows: usize,
    cols: usize,
    /// Row-major `rows × cols`.
    data: Vec<C64>,
}

impl Isometry {
    pub fn identity(dim: usize) -> Self {
        Self::coordinate(dim, &(0..dim).collect::<Vec<_>>()).expect("identity embedding")
    }

    /// Embedding that maps basis vector `k` to full-space basis vector `indices[k]`.
    pub fn coordinate(full_dim: usize, indices: &[usize]) -> Result<Self> {
        let cols = indices.len();
        let mut data = vec![ZERO; full_dim * cols];
        for (k, &idx) in indices.iter().enumerate() {
            if idx >= full_dim {
                return Err(Error::IndexOutOfRange(format!("subspace index {idx} >= {full_dim}")));
            }
            data[idx * cols + k] = ONE;
        }
        let iso = Self { rows: full_dim, cols, data };
        iso.validate()?;
        Ok(iso)
    }

    pub fn from_columns(full_dim: usize, columns: &[Vec<C64>]) -> Result<Self> {
        let cols = columns.len();
        let mut data = vec![ZERO; full_dim * cols];
        for (k, col) in columns.iter().enumerate() {
            if col.len() != full_dim {
                return Err(Error::DimensionMismatch(format!(
                    "isometry column {k} has length {} but full dimension is {full_dim}",
                    col.len()
                )));
            }
            for (r, &z) in col.iter().enumerate() {
                data[r * cols + k] = z;
            }
        }
        let iso = Self { rows: full_dim, cols, data };
        iso.validate()?;
        Ok(iso)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cols == 0 || self.cols > self.rows {
            return Err(Error::InvalidArgument(format!(
                "isometry must be {}x{} with 0 < cols <= rows",
                self.rows, self.cols
            )));
        }
        let gram = self.project(&CMatrix::identity(self.rows));
        let err = gram.frob_dist(&CMatrix::identity(self.cols));
        if err > 1e-12 {
            return Err(Error::InvalidArgument(format!("isometry columns not orthonormal (error {err:.3e})")));
        }
        Ok(())
    }

    pub fn full_dim(&self) -> usize {
        self.rows
    }

    pub fn sub_dim(&self) -> usize {
        self.cols
    }

    /// `𝒮† A 𝒮`.
    pub fn project(&self, a: &CMatrix) -> CMatrix {
        assert_eq!(a.dim(), self.rows, "projection dimension mismatch");
        let (n, q) = (self.rows, self.cols);
        // T = A 𝒮 (n × q)
        let mut t = vec![ZERO; n * q];
        for i in 0..n {
            let row = a.row(i);
            for (k, &aik) in row.iter().enumerate() {
                if aik == ZERO {
                    continue;
                }
                let srow = &self.data[k * q..(k + 1) * q];
                for (j, &s) in srow.iter().enumerate() {
                    t[i * q + j] += aik * s;
                }
            }
        }
        CMatrix::from_fn(q, |i, j| (0..n).map(|k| self.data[k * q + i].conj() * t[k * q + j]).sum())
    }

    /// `𝒮 B 𝒮†`, lifting a subspace operator into the full space.
    pub fn lift(&self, b: &CMatrix) -> CMatrix {
        assert_eq!(b.dim(), self.cols, "lift dimension mismatch");
        let (n, q) = (self.rows, self.cols);
        let mut sb = vec![ZERO; n * q];
        for r in 0..n {
            for j in 0..q {
                sb[r * q + j] = (0..q).map(|k| self.data[r * q + k] * b[(k, j)]).sum();
            }
        }
        CMatrix::from_fn(n, |r, c| (0..q).map(|j| sb[r * q + j] * self.data[c * q + j].conj()).sum())
    }
}

/// Drift, controls, computational subspace and target gate.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub name: String,
    pub drift: CMatrix,
    pub channels: Vec<ControlChannel>,
    pub isometry: Isometry,
    pub target: CMatrix,
    pub fidelity: FidelityKind,
    pub carrier_sample: CarrierSample,
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        drift: CMatrix,
        channels: Vec<ControlChannel>,
        isometry: Isometry,
        target: CMatrix,
    ) -> Result<Self> {
        let model = Self {
            name: name.into(),
            drift,
            channels,
            isometry,
            target,
            fidelity: FidelityKind::Plain,
            carrier_sample: CarrierSample::Midpoint,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_fidelity(mut self, kind: FidelityKind) -> Self {
        self.fidelity = kind;
        self
    }

    pub fn with_carrier_sample(mut self, sample: CarrierSample) -> Self {
        self.carrier_sample = sample;
        self
    }

    pub fn dim_full(&self) -> usize {
        self.drift.dim()
    }

    pub fn dim_q(&self) -> usize {
        self.target.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.drift.dim();
        if !self.drift.is_hermitian(hermitian_tol(&self.drift)) {
            return Err(Error::InvalidArgument("drift Hamiltonian is not Hermitian".into()));
        }
        for ch in &self.channels {
            if ch.generator.dim() != n {
                return Err(Error::DimensionMismatch(format!(
                    "channel '{}' generator is {}-dimensional, drift is {n}",
                    ch.name,
                    ch.generator.dim()
                )));
            }
            if !ch.generator.is_hermitian(hermitian_tol(&ch.generator)) {
                return Err(Error::InvalidArgument(format!("channel '{}' generator is not Hermitian", ch.name)));
            }
        }
        if self.isometry.full_dim() != n || self.isometry.sub_dim() != self.target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "isometry is {}x{}, expected {n}x{}",
                self.isometry.full_dim(),
                self.isometry.sub_dim(),
                self.target.dim()
            )));
        }
        if !self.target.is_unitary(1e-12) {
            return Err(Error::InvalidArgument("target gate is not unitary".into()));
        }
        if self.fidelity == FidelityKind::LocalZ && self.target.dim() != 4 {
            return Err(Error::InvalidArgument("local-Z fidelity needs a two-qubit target".into()));
        }
        Ok(())
    }

    /// Sampling time of segment `m` for time-dependent factors.
    pub fn sample_time(&self, pulse: &PulseGrid, m: usize) -> f64 {
        let dt = pulse.dt();
        match self.carrier_sample {
            CarrierSample::Midpoint => (m as f64 + 0.5) * dt,
            CarrierSample::End => (m as f64 + 1.0) * dt,
        }
    }

    fn check_pulse(&self, pulse: &PulseGrid, m: usize) -> Result<()> {
        if pulse.channels() != self.channels.len() {
            return Err(Error::DimensionMismatch(format!(
                "pulse has {} channels, model has {}",
                pulse.channels(),
                self.channels.len()
            )));
        }
        if m >= pulse.segments() {
            return Err(Error::IndexOutOfRange(format!("segment {m} >= {}", pulse.segments())));
        }
        Ok(())
    }

    /// `∂H[m]/∂u_c[m]`: the channel generator times its carrier factor.
    pub fn control_derivative(&self, pulse: &PulseGrid, c: usize, m: usize) -> CMatrix {
        let ch = &self.channels[c];
        ch.generator.scale_real(ch.carrier_factor(self.sample_time(pulse, m)))
    }

    /// Carrier factor of channel `c` in segment `m`.
    pub fn carrier_factor(&self, pulse: &PulseGrid, c: usize, m: usize) -> f64 {
        self.channels[c].carrier_factor(self.sample_time(pulse, m))
    }

    /// `H_C[m] = Σ_c u_c[m]·cos(ω_c t_m)·G_c` (drift excluded).
    pub fn control_hamiltonian_at(&self, pulse: &PulseGrid, m: usize) -> Result<CMatrix> {
        self.check_pulse(pulse, m)?;
        let t = self.sample_time(pulse, m);
        let mut h = CMatrix::zeros(self.dim_full());
        for (c, ch) in self.channels.iter().enumerate() {
            let coeff = pulse.amplitudes[c][m] * ch.carrier_factor(t);
            if coeff != 0.0 {
                h.axpy_real(coeff, &ch.generator);
            }
        }
        Ok(h)
    }

    /// `H[m] = H_S + H_C[m]`.
    pub fn hamiltonian_at(&self, pulse: &PulseGrid, m: usize) -> Result<CMatrix> {
        let mut h = self.control_hamiltonian_at(pulse, m)?;
        h += &self.drift;
        Ok(h)
    }
}

fn hermitian_tol(a: &CMatrix) -> f64 {
    1e-12 * a.frob_norm().max(1.0)
}

/// Piecewise-constant control amplitudes (rad/s) on `M` equal segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseGrid {
    /// Total duration (s).
    pub duration: f64,
    /// `amplitudes[c][m]` for channel `c`, segment `m`.
    pub amplitudes: Vec<Vec<f64>>,
}

impl PulseGrid {
    pub fn new(duration: f64, amplitudes: Vec<Vec<f64>>) -> Result<Self> {
        let pulse = Self { duration, amplitudes };
        pulse.validate()?;
        Ok(pulse)
    }

    pub fn zeros(duration: f64, channels: usize, segments: usize) -> Result<Self> {
        Self::new(duration, vec![vec![0.0; segments]; channels])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidArgument(format!("pulse duration must be positive, got {}", self.duration)));
        }
        let m = self.amplitudes.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(Error::InvalidArgument("pulse needs at least one segment".into()));
        }
        if self.amplitudes.iter().any(|ch| ch.len() != m) {
            return Err(Error::InvalidArgument("all channels must have the same segment count".into()));
        }
        if self.amplitudes.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("pulse amplitudes must be finite".into()));
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.amplitudes.first().map_or(0, Vec::len)
    }

    pub fn channels(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn dt(&self) -> f64 {
        self.duration / self.segments() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.amplitudes.iter().flatten().fold(0.0, |a, &x| a.max(x.abs()))
    }

    /// Time-reversed copy.
    pub fn reversed(&self) -> Self {
        Self {
            duration: self.duration,
            amplitudes: self.amplitudes.iter().map(|ch| ch.iter().rev().copied().collect()).collect(),
        }
    }
}

/// One term `a·e^{bτ}` of a normalized autocorrelation expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutocorrTerm {
    pub a: C64,
    /// Rate (1/s); `Re b ≤ 0`.
    pub b: C64,
}

impl AutocorrTerm {
    pub fn real(a: f64, b: f64) -> Self {
        Self { a: C64::new(a, 0.0), b: C64::new(b, 0.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseOperator {
    /// Fixed Hermitian operator `E`.
    Fixed(CMatrix),
    /// `E(t) = H_C(t)`: relative amplitude error of all controls.
    ControlProportional,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    Static,
    /// Gaussian stationary process with `⟨ε̃(t)ε̃(t+τ)⟩ = Σ_i a_i e^{b_i τ}` for `τ > 0`.
    TimeDependent { autocorrelation: Vec<AutocorrTerm> },
}

/// A classical noise source `ε(t)·E(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseChannel {
    pub name: String,
    pub kind: NoiseKind,
    pub operator: NoiseOperator,
    /// RMS strength: dimensionless for control-proportional noise, rad/s otherwise.
    pub strength: f64,
}

impl NoiseChannel {
    pub fn static_fixed(name: impl Into<String>, op: CMatrix, strength: f64) -> Result<Self> {
        let ch = Self { name: name.into(), kind: NoiseKind::Static, operator: NoiseOperator::Fixed(op), strength };
        ch.validate()?;
        Ok(ch)
    }

    pub fn static_control(name: impl Into<String>, strength: f64) -> Result<Self> {
        let ch = Self {
            name: name.into(),
            kind: NoiseKind::Static,
            operator: NoiseOperator::ControlProportional,
            strength,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn time_dependent(
        name: impl Into<String>,
        op: CMatrix,
        strength: f64,
        autocorrelation: Vec<AutocorrTerm>,
    ) -> Result<Self> {
        let ch = Self {
            name: name.into(),
            kind: NoiseKind::TimeDependent { autocorrelation },
            operator: NoiseOperator::Fixed(op),
            strength,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn is_static(&self) -> bool {
        matches!(self.kind, NoiseKind::Static)
    }

    pub fn autocorrelation(&self) -> &[AutocorrTerm] {
        match &self.kind {
            NoiseKind::Static => &[],
            NoiseKind::TimeDependent { autocorrelation } => autocorrelation,
        }
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        Self { strength, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise '{}' strength must be >= 0", self.name)));
        }
        if let NoiseOperator::Fixed(op) = &self.operator {
            if !op.is_hermitian(hermitian_tol(op)) {
                return Err(Error::InvalidArgument(format!("noise '{}' operator is not Hermitian", self.name)));
            }
        }
        if let NoiseKind::TimeDependent { autocorrelation } = &self.kind {
            validate_expansion(&self.name, autocorrelation)?;
            if matches!(self.operator, NoiseOperator::ControlProportional) {
                return Err(Error::Unsupported(format!(
                    "time-dependent noise '{}' must use a fixed operator",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// `E[m]`: the fixed operator, or `H_C[m]` for control-proportional noise.
    pub fn operator_at(&self, model: &SystemModel, pulse: &PulseGrid, m: usize) -> Result<CMatrix> {
        match &self.operator {
            NoiseOperator::Fixed(op) => {
                if op.dim() != model.dim_full() {
                    return Err(Error::DimensionMismatch(format!(
                        "noise '{}' operator is {}-dimensional, model is {}",
                        self.name,
                        op.dim(),
                        model.dim_full()
                    )));
                }
                Ok(op.clone())
            }
            NoiseOperator::ControlProportional => model.control_hamiltonian_at(pulse, m),
        }
    }
}

fn validate_expansion(name: &str, terms: &[AutocorrTerm]) -> Result<()> {
    if terms.is_empty() {
        return Err(Error::InvalidArgument(format!("time-dependent noise '{name}' needs autocorrelation terms")));
    }
    let sum: C64 = terms.iter().map(|t| t.a).sum();
    if (sum.re - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "noise '{name}': autocorrelation not normalized (Re Σa = {})",
            sum.re
        )));
    }
    for t in terms {
        if t.b.re > 0.0 {
            return Err(Error::InvalidArgument(format!("noise '{name}': growing autocorrelation term b = {}", t.b)));
        }
    }
    // complex terms must pair with their conjugates so the process is real
    let mut used = vec![false; terms.len()];
    for i in 0..terms.len() {
        if used[i] {
            continue;
        }
        let t = terms[i];
        let is_real = t.a.im.abs() <= 1e-12 * t.a.norm().max(1e-300) && t.b.im.abs() <= 1e-12 * t.b.norm().max(1.0);
        if is_real {
            used[i] = true;
            continue;
        }
        let partner = (0..terms.len()).find(|&j| {
            j != i
                && !used[j]
                && (terms[j].a - t.a.conj()).norm() <= 1e-12 * t.a.norm()
                && (terms[j].b - t.b.conj()).norm() <= 1e-12 * t.b.norm()
        });
        match partner {
            Some(j) => {
                used[i] = true;
                used[j] = true;
            }
            None => {
                return Err(Error::InvalidArgument(format!(
                    "noise '{name}': complex term ({}, {}) has no conjugate partner",
                    t.a, t.b
                )))
            }
        }
    }
    Ok(())
}

/// One penalty `λ·‖𝒟‖²` on a directional derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTerm {
    /// 1 or 2.
    pub order: usize,
    /// Indices into the noise list: `order` entries for static terms, one for a time-dependent term.
    pub noises: Vec<usize>,
    pub weight: f64,
}

impl RobustnessTerm {
    pub fn first_order(noise: usize, weight: f64) -> Self {
        Self { order: 1, noises: vec![noise], weight }
    }

    pub fn second_order(a: usize, b: usize, weight: f64) -> Self {
        Self { order: 2, noises: vec![a, b], weight }
    }

    /// Second-order ensemble term of a time-dependent noise.
    pub fn time_dependent(noise: usize, weight: f64) -> Self {
        Self { order: 2, noises: vec![noise], weight }
    }

    pub fn validate(&self, noises: &[NoiseChannel]) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("robustness weight must be >= 0, got {}", self.weight)));
        }
        if !(1..=2).contains(&self.order) {
            return Err(Error::Unsupported(format!("directional derivatives of order {} are not implemented", self.order)));
        }
        for &j in &self.noises {
            if j >= noises.len() {
                return Err(Error::IndexOutOfRange(format!("noise reference {j} >= {}", noises.len())));
            }
        }
        let any_td = self.noises.iter().any(|&j| !noises[j].is_static());
        if any_td {
            if self.order != 2 || self.noises.len() != 1 {
                return Err(Error::InvalidArgument(
                    "a time-dependent noise may only appear in a second-order self term".into(),
                ));
            }
        } else if self.noises.len() != self.order {
            return Err(Error::InvalidArgument(format!(
                "static term of order {} needs {} noise references, got {}",
                self.order,
                self.order,
                self.noises.len()
            )));
        }
        Ok(())
    }

    pub fn label(&self, noises: &[NoiseChannel]) -> String {
        let names: Vec<&str> = self.noises.iter().map(|&j| noises.get(j).map_or("?", |n| n.name.as_str())).collect();
        format!("D{}({})", self.order, names.join(","))
    }
}

/// Van Loan generator `B[m]` for an ordered list of static noises.
///
/// Block layout: `H[m]` on the `N+1` diagonal blocks, `E_j[m]` on the superdiagonal.
pub fn build_block_static(
    model: &SystemModel,
    pulse: &PulseGrid,
    m: usize,
    noises: &[&NoiseChannel],
) -> Result<CMatrix> {
    if let Some(n) = noises.iter().find(|n| !n.is_static()) {
        return Err(Error::InvalidArgument(format!("noise '{}' is time-dependent", n.name)));
    }
    let h = model.hamiltonian_at(pulse, m)?;
    let ops = noises.iter().map(|n| n.operator_at(model, pulse, m)).collect::<Result<Vec<_>>>()?;
    Ok(bidiagonal(&h, &ops.iter().collect::<Vec<_>>()))
}

/// `[[H, e^{b t_m}E, 0], [0, H, e^{-b t_m}E], [0, 0, H]]` for autocorrelation term `term`.
pub fn build_block_timedep(
    model: &SystemModel,
    pulse: &PulseGrid,
    m: usize,
    noise: &NoiseChannel,
    term: usize,
) -> Result<CMatrix> {
    build_block_timedep_shifted(model, pulse, m, noise, term, 0.0)
}

/// As [`build_block_timedep`] with exponentials referenced to `t_ref`;
/// the `(1,3)` block of the propagated product does not depend on `t_ref`.
pub fn build_block_timedep_shifted(
    model: &SystemModel,
    pulse: &PulseGrid,
    m: usize,
    noise: &NoiseChannel,
    term: usize,
    t_ref: f64,
) -> Result<CMatrix> {
    let terms = match &noise.kind {
        NoiseKind::Static => {
            return Err(Error::InvalidArgument(format!("noise '{}' is static", noise.name)));
        }
        NoiseKind::TimeDependent { autocorrelation } => autocorrelation,
    };
    let t = terms
        .get(term)
        .ok_or_else(|| Error::IndexOutOfRange(format!("autocorrelation term {term} >= {}", terms.len())))?;
    let h = model.hamiltonian_at(pulse, m)?;
    let e = noise.operator_at(model, pulse, m)?;
    let tm = model.sample_time(pulse, m) - t_ref;
    let up = e.scale((t.b * tm).exp());
    let down = e.scale((-t.b * tm).exp());
    Ok(bidiagonal(&h, &[&up, &down]))
}

/// Block upper-bidiagonal matrix with `h` on the diagonal and `supers` above it.
pub(crate) fn bidiagonal(h: &CMatrix, supers: &[&CMatrix]) -> CMatrix {
    let d = h.dim();
    let k = supers.len() + 1;
    let mut out = CMatrix::zeros(k * d);
    for i in 0..k {
        out.set_block(i, i, h);
    }
    for (i, e) in supers.iter().enumerate() {
        out.set_block(i, i + 1, e);
    }
    out
}

/// Truncated Gaussian smoothing with symmetric (half-sample) reflection at the edges.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSmoother {
    sigma: f64,
    /// Normalized weights for offsets `-h..=h`.
    weights: Vec<f64>,
}

impl GaussianSmoother {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("smoothing width must be >= 0, got {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(Self { sigma, weights: vec![1.0] });
        }
        let half = (4.0 * sigma).ceil() as i64;
        let mut weights: Vec<f64> = (-half..=half).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { sigma, weights })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn half(&self) -> i64 {
        (self.weights.len() as i64 - 1) / 2
    }

    /// Index after reflecting at both edges (`d c b a | a b c d | d c b a`).
    fn reflect(i: i64, n: i64) -> usize {
        let period = 2 * n;
        let mut r = i.rem_euclid(period);
        if r >= n {
            r = period - 1 - r;
        }
        r as usize
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        if self.sigma == 0.0 {
            return raw.to_vec();
        }
        let n = raw.len() as i64;
        let h = self.half();
        (0..n)
            .map(|m| {
                self.weights
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| w * raw[Self::reflect(m + k as i64 - h, n)])
                    .sum()
            })
            .collect()
    }

    /// Transposed map `Jᵀ g`, used to chain gradients back to raw parameters.
    pub fn apply_transpose(&self, grad: &[f64]) -> Vec<f64> {
        if self.sigma == 0.0 {
            return grad.to_vec();
        }
        let n = grad.len() as i64;
        let h = self.half();
        let mut out = vec![0.0; grad.len()];
        for m in 0..n {
            let g = grad[m as usize];
            for (k, &w) in self.weights.iter().enumerate() {
                out[Self::reflect(m + k as i64 - h, n)] += w * g;
            }
        }
        out
    }

    /// Dense Jacobian `∂u[m]/∂raw[j]`.
    pub fn jacobian(&self, n: usize) -> Vec<Vec<f64>> {
        let mut jac = vec![vec![0.0; n]; n];
        let h = self.half();
        for (m, row) in jac.iter_mut().enumerate() {
            for (k, &w) in self.weights.iter().enumerate() {
                row[Self::reflect(m as i64 + k as i64 - h, n as i64)] += w;
            }
        }
        jac
    }
}

/// Smooths every channel of `raw` with width `sigma` (in segments).
pub fn smooth_pulse(raw: &[Vec<f64>], sigma: f64) -> Result<Vec<Vec<f64>>> {
    let s = GaussianSmoother::new(sigma)?;
    Ok(raw.iter().map(|ch| s.apply(ch)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densemath::{kron, sigma_x, sigma_z, I};
    use proptest::prelude::*;

    fn qubit_model() -> SystemModel {
        SystemModel::new(
            "qubit",
            sigma_z().scale_real(0.3),
            vec![ControlChannel::new("x", sigma_x())],
            Isometry::identity(2),
            sigma_x(),
        )
        .unwrap()
    }

    #[test]
    fn zero_amplitudes_give_drift() {
        let model = qubit_model();
        let pulse = PulseGrid::zeros(1.0, 1, 5).unwrap();
        for m in 0..5 {
            assert_eq!(model.hamiltonian_at(&pulse, m).unwrap(), model.drift);
        }
        assert!(model.hamiltonian_at(&pulse, 5).is_err());
    }

    #[test]
    fn carrier_free_unit_amplitude() {
        let model = qubit_model();
        let pulse = PulseGrid::new(1.0, vec![vec![0.0, 1.0, 0.0]]).unwrap();
        let h = model.hamiltonian_at(&pulse, 1).unwrap();
        assert!(h.max_abs_diff(&(&model.drift + &sigma_x())) < 1e-15);
    }

    #[test]
    fn carrier_sampling_conventions() {
        let omega = 2.0 * std::f64::consts::PI * 3.0;
        let mut model = qubit_model();
        model.channels[0] = ControlChannel::new("x", sigma_x()).with_carrier(omega);
        let pulse = PulseGrid::new(1.0, vec![vec![2.0; 10]]).unwrap();
        let h = model.control_hamiltonian_at(&pulse, 3).unwrap();
        assert!((h[(0, 1)].re - 2.0 * (omega * 0.35).cos()).abs() < 1e-14);
        let model = model.with_carrier_sample(CarrierSample::End);
        let h = model.control_hamiltonian_at(&pulse, 3).unwrap();
        assert!((h[(0, 1)].re - 2.0 * (omega * 0.4).cos()).abs() < 1e-14);
    }

    #[test]
    fn hamiltonian_is_linear_in_amplitude() {
        let model = qubit_model();
        let mk = |u: f64| PulseGrid::new(1.0, vec![vec![u, 0.5]]).unwrap();
        let h0 = model.hamiltonian_at(&mk(0.0), 0).unwrap();
        let h1 = model.hamiltonian_at(&mk(1.0), 0).unwrap();
        let h3 = model.hamiltonian_at(&mk(3.0), 0).unwrap();
        let lin = &h0 + &(&h1 - &h0).scale_real(3.0);
        assert!(h3.max_abs_diff(&lin) < 1e-14);
        assert!(h3.is_hermitian(1e-12));
    }

    #[test]
    fn static_block_layout() {
        let model = qubit_model();
        let pulse = PulseGrid::new(1.0, vec![vec![0.7, -0.2]]).unwrap();
        let h = model.hamiltonian_at(&pulse, 0).unwrap();
        assert_eq!(build_block_static(&model, &pulse, 0, &[]).unwrap(), h);

        let ident = NoiseChannel::static_fixed("id", CMatrix::identity(2), 0.0).unwrap();
        let b = build_block_static(&model, &pulse, 0, &[&ident]).unwrap();
        assert_eq!(b.block(0, 0, 2), h);
        assert_eq!(b.block(1, 1, 2), h);
        assert_eq!(b.block(0, 1, 2), CMatrix::identity(2));
        assert_eq!(b.block(1, 0, 2), CMatrix::zeros(2));

        let amp = NoiseChannel::static_control("amp", 0.01).unwrap();
        let b = build_block_static(&model, &pulse, 1, &[&amp, &ident]).unwrap();
        assert_eq!(b.block(0, 1, 2), model.control_hamiltonian_at(&pulse, 1).unwrap());
        assert_eq!(b.block(1, 2, 2), CMatrix::identity(2));
        assert_eq!(b.block(0, 2, 2), CMatrix::zeros(2));

        let td = NoiseChannel::time_dependent("td", sigma_z(), 1.0, vec![AutocorrTerm::real(1.0, -2.0)]).unwrap();
        assert!(build_block_static(&model, &pulse, 0, &[&td]).is_err());
    }

    #[test]
    fn timedep_block_layout() {
        let model = qubit_model();
        let pulse = PulseGrid::new(2.0, vec![vec![0.1, 0.4]]).unwrap();
        let h = model.hamiltonian_at(&pulse, 1).unwrap();
        let flat = NoiseChannel::time_dependent("id", CMatrix::identity(2), 1.0, vec![AutocorrTerm::real(1.0, 0.0)])
            .unwrap();
        let c = build_block_timedep(&model, &pulse, 1, &flat, 0).unwrap();
        let expected = bidiagonal(&h, &[&CMatrix::identity(2), &CMatrix::identity(2)]);
        assert_eq!(c, expected);

        let b = C64::new(-0.5, 1.5);
        let pair = vec![
            AutocorrTerm { a: C64::new(0.5, 0.0), b },
            AutocorrTerm { a: C64::new(0.5, 0.0), b: b.conj() },
        ];
        let td = NoiseChannel::time_dependent("z", sigma_z(), 1.0, pair).unwrap();
        let c = build_block_timedep(&model, &pulse, 1, &td, 0).unwrap();
        let tm = 1.5;
        assert!(c.block(0, 1, 2).max_abs_diff(&sigma_z().scale((b * tm).exp())) < 1e-15);
        assert!(c.block(1, 2, 2).max_abs_diff(&sigma_z().scale((-b * tm).exp())) < 1e-15);
        assert_eq!(c.block(0, 2, 2), CMatrix::zeros(2));
        let st = NoiseChannel::static_fixed("s", sigma_z(), 0.1).unwrap();
        assert!(build_block_timedep(&model, &pulse, 0, &st, 0).is_err());
        assert!(build_block_timedep(&model, &pulse, 0, &td, 2).is_err());
    }

    #[test]
    fn noise_validation() {
        let z = sigma_z();
        assert!(NoiseChannel::time_dependent("n", z.clone(), 1.0, vec![AutocorrTerm::real(0.9, -1.0)]).is_err());
        assert!(NoiseChannel::time_dependent("n", z.clone(), 1.0, vec![AutocorrTerm::real(1.0, 1.0)]).is_err());
        assert!(NoiseChannel::time_dependent("n", z.clone(), 1.0, vec![]).is_err());
        let lonely = AutocorrTerm { a: C64::new(1.0, 0.0), b: C64::new(-1.0, 2.0) };
        assert!(NoiseChannel::time_dependent("n", z.clone(), 1.0, vec![lonely]).is_err());
        assert!(NoiseChannel::static_fixed("n", z.scale(I), 1.0).is_err());
        assert!(NoiseChannel::static_fixed("n", z, -1.0).is_err());
    }

    #[test]
    fn robustness_term_validation() {
        let noises = vec![
            NoiseChannel::static_control("amp", 0.01).unwrap(),
            NoiseChannel::time_dependent("td", sigma_z(), 1.0, vec![AutocorrTerm::real(1.0, -1.0)]).unwrap(),
        ];
        assert!(RobustnessTerm::first_order(0, 1.0).validate(&noises).is_ok());
        assert!(RobustnessTerm::second_order(0, 0, 1.0).validate(&noises).is_ok());
        assert!(RobustnessTerm::time_dependent(1, 1.0).validate(&noises).is_ok());
        assert!(RobustnessTerm::first_order(1, 1.0).validate(&noises).is_err());
        assert!(RobustnessTerm::second_order(0, 1, 1.0).validate(&noises).is_err());
        assert!(RobustnessTerm::first_order(0, -1.0).validate(&noises).is_err());
        assert!(RobustnessTerm::first_order(5, 1.0).validate(&noises).is_err());
        let third = RobustnessTerm { order: 3, noises: vec![0, 0, 0], weight: 1.0 };
        assert!(matches!(third.validate(&noises), Err(Error::Unsupported(_))));
    }

    #[test]
    fn isometry_projection_and_lift() {
        let iso = Isometry::coordinate(6, &[0, 3]).unwrap();
        let a = CMatrix::from_fn(6, |i, j| C64::new(i as f64, j as f64));
        let p = iso.project(&a);
        assert_eq!(p[(0, 1)], C64::new(0.0, 3.0));
        assert_eq!(p[(1, 0)], C64::new(3.0, 0.0));
        let lifted = iso.lift(&p);
        assert_eq!(lifted[(3, 0)], C64::new(3.0, 0.0));
        assert_eq!(lifted[(1, 1)], ZERO);
        assert!(Isometry::coordinate(3, &[0, 0]).is_err());
        let model = SystemModel::new(
            "bad",
            CMatrix::zeros(4),
            vec![],
            Isometry::identity(4),
            kron(&sigma_x(), &sigma_x()).scale_real(2.0),
        );
        assert!(model.is_err());
    }

    #[test]
    fn smoothing_identity_and_constants() {
        let raw = vec![vec![1.0, -2.0, 3.5, 0.25]];
        assert_eq!(smooth_pulse(&raw, 0.0).unwrap(), raw);
        let flat = vec![vec![0.7; 40]];
        for s in [0.5, 1.0, 3.0, 12.0] {
            let out = smooth_pulse(&flat, s).unwrap();
            assert!(out[0].iter().all(|&x| (x - 0.7).abs() < 1e-14), "sigma {s}");
        }
        assert!(GaussianSmoother::new(-1.0).is_err());
    }

    #[test]
    fn smoothing_impulse_is_a_gaussian_bump() {
        let mut raw = vec![0.0; 101];
        raw[50] = 1.0;
        let s = GaussianSmoother::new(2.0).unwrap();
        let out = s.apply(&raw);
        let total: f64 = out.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // independent kernel evaluation
        let norm: f64 = (-8..=8).map(|k: i32| (-(k * k) as f64 / 8.0).exp()).sum();
        for k in -8i32..=8 {
            let expected = (-(k * k) as f64 / 8.0).exp() / norm;
            assert!((out[(50 + k) as usize] - expected).abs() < 1e-15);
        }
        assert_eq!(out[41], 0.0);
        assert_eq!(out[59], 0.0);
    }

    #[test]
    fn smoothing_transpose_matches_jacobian() {
        let s = GaussianSmoother::new(1.7).unwrap();
        let n = 23;
        let jac = s.jacobian(n);
        let g: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let jt = s.apply_transpose(&g);
        for j in 0..n {
            let expected: f64 = (0..n).map(|m| jac[m][j] * g[m]).sum();
            assert!((jt[j] - expected).abs() < 1e-14);
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = s.apply(&x);
        for m in 0..n {
            let expected: f64 = (0..n).map(|j| jac[m][j] * x[j]).sum();
            assert!((y[m] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn smoothing_composes_like_gaussians() {
        // interior of a long sequence so edge reflection does not enter
        let n = 400;
        let raw: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 17) as f64 / 17.0 - 0.5).collect();
        for (s1, s2) in [(1.0, 1.0), (1.5, 2.0), (3.0, 4.0)] {
            let twice = GaussianSmoother::new(s2).unwrap().apply(&GaussianSmoother::new(s1).unwrap().apply(&raw));
            let once = GaussianSmoother::new(f64::hypot(s1, s2)).unwrap().apply(&raw);
            let lo = 40;
            let num: f64 = (lo..n - lo).map(|i| (twice[i] - once[i]).powi(2)).sum::<f64>().sqrt();
            let den: f64 = (lo..n - lo).map(|i| once[i].powi(2)).sum::<f64>().sqrt();
            // bounded by the Gaussian mass dropped beyond 4σ by the three kernels
            let tail = 3.0 * libm::erfc(4.0 / std::f64::consts::SQRT_2);
            assert!(num / den < tail, "({s1},{s2}): relative error {}", num / den);
        }
    }

    proptest! {
        #[test]
        fn smoothing_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, sigma in 0.0f64..6.0) {
            let s = GaussianSmoother::new(sigma).unwrap();
            let x: Vec<f64> = (0..30).map(|i| (i as f64).cos()).collect();
            let y: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).sin()).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = s.apply(&combo);
            let (sx, sy) = (s.apply(&x), s.apply(&y));
            for i in 0..30 {
                prop_assert!((lhs[i] - (a * sx[i] + b * sy[i])).abs() < 1e-12);
            }
        }
    }
}
