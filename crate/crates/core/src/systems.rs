// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

//! Preset models: a two-ion Mølmer–Sørensen gate and a flux-tuned transmon CZ.
//!
//! All frequencies are angular (rad/s); `mhz(x)` is `2π·x·10⁶`.

use std::f64::consts::PI;

use crate::densemath::{kron_all, ladder_ops, sigma_x, sigma_y, sigma_z, CMatrix, C64};
use crate::error::{Error, Result};
use crate::model::{ControlChannel, FidelityKind, Isometry, NoiseChannel, PulseGrid, SystemModel};
use crate::noise_analysis::{autocorr_from_psd, PsdModel};
use crate::propagation::propagate;

pub fn khz(x: f64) -> f64 {
    2.0 * PI * x * 1e3
}

pub fn mhz(x: f64) -> f64 {
    2.0 * PI * x * 1e6
}

pub fn ghz(x: f64) -> f64 {
    2.0 * PI * x * 1e9
}

/// A model with its noise channels, in preset order.
#[derive(Debug, Clone)]
pub struct Preset {
    pub model: SystemModel,
    pub noises: Vec<NoiseChannel>,
    /// Spectral model of each time-dependent channel, aligned with `noises`.
    pub psds: Vec<Option<PsdModel>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IonMsParams {
    pub nu1: f64,
    pub nu2: f64,
    pub eta: f64,
    /// Carrier frequency `ω` of the bichromatic drive.
    pub omega: f64,
    /// Fock levels per motional mode.
    pub levels: (usize, usize),
    pub duration: f64,
    pub segments: usize,
    pub rabi: f64,
    /// Relative Rabi-frequency offset `Δu/u`.
    pub amp_noise: f64,
    /// Mode-1 frequency offset `Δω₁`.
    pub mode_noise: f64,
    /// Rms of the qubit detuning `ε(t)`.
    pub detuning_rms: f64,
    pub lorentz_center: f64,
    pub lorentz_width: f64,
}

impl IonMsParams {
    /// Baseline configuration for the constant-amplitude gate (`ν₂ = 2√2` MHz).
    pub fn original() -> Self {
        let nu1 = mhz(2.0);
        let mut p = Self {
            nu1,
            nu2: mhz(2.0 * 2f64.sqrt()),
            eta: 0.1,
            omega: 0.983 * nu1,
            levels: (6, 3),
            duration: 0.0,
            segments: 523,
            rabi: mhz(0.1275),
            amp_noise: 0.005,
            mode_noise: khz(0.5),
            detuning_rms: khz(2.0),
            lorentz_center: khz(20.0),
            lorentz_width: khz(20.0),
        };
        p.duration = p.ms_time(p.rabi);
        p
    }

    /// Configuration used for robust synthesis (`ν₂ = 2√3` MHz, 60 μs, 600 segments).
    pub fn robust() -> Self {
        Self { nu2: mhz(2.0 * 3f64.sqrt()), duration: 60e-6, segments: 600, ..Self::original() }
    }

    pub fn delta(&self) -> f64 {
        self.nu1 - self.omega
    }

    /// `T_MS = πδ/(2η²Ω²)`.
    pub fn ms_time(&self, rabi: f64) -> f64 {
        PI * self.delta() / (2.0 * self.eta * self.eta * rabi * rabi)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 0.3) {
            return Err(Error::InvalidArgument(format!("Lamb–Dicke parameter {} outside (0, 0.3)", self.eta)));
        }
        if self.levels.0 < 2 || self.levels.1 < 2 {
            return Err(Error::InvalidArgument(format!("phonon truncation {:?} below (2, 2)", self.levels)));
        }
        if !(self.nu1 > 0.0 && self.nu2 > 0.0 && self.omega > 0.0) {
            return Err(Error::InvalidArgument("ion frequencies must be positive".into()));
        }
        if !(self.lorentz_width > 0.0) {
            return Err(Error::InvalidArgument("Lorentzian width must be positive".into()));
        }
        Ok(())
    }
}

pub fn build_ion_ms(p: &IonMsParams) -> Result<Preset> {
    p.validate()?;
    let (n1, n2) = p.levels;
    let (i2, i_n1, i_n2) = (CMatrix::identity(2), CMatrix::identity(n1), CMatrix::identity(n2));
    let (a1, a1d) = ladder_ops(n1)?;
    let (a2, a2d) = ladder_ops(n2)?;
    let num1 = kron_all(&[&i2, &i2, &a1d.matmul(&a1), &i_n2]);
    let num2 = kron_all(&[&i2, &i2, &i_n1, &a2d.matmul(&a2)]);
    let x1 = kron_all(&[&i2, &i2, &(&a1 + &a1d), &i_n2]);
    let x2 = kron_all(&[&i2, &i2, &i_n1, &(&a2 + &a2d)]);
    let drift = &num1.scale_real(p.nu1) + &num2.scale_real(p.nu2);
    let on_qubit = |k: usize, s: &CMatrix| {
        let (first, second) = if k == 0 { (s, &i2) } else { (&i2, s) };
        kron_all(&[first, second, &i_n1, &i_n2])
    };
    let motion = &x1 + &x2;
    let mut channels = Vec::new();
    for k in 0..2 {
        let mut g = on_qubit(k, &sigma_x());
        g += &motion.matmul(&on_qubit(k, &sigma_y())).scale_real(p.eta);
        channels.push(ControlChannel::new(format!("u{}", k + 1), g).with_carrier(p.omega));
    }
    let dim = 4 * n1 * n2;
    let isometry = Isometry::coordinate(dim, &[0, n1 * n2, 2 * n1 * n2, 3 * n1 * n2])?;
    let model = SystemModel::new("ion_ms", drift, channels, isometry, ms_target())?;
    let zsum = &on_qubit(0, &sigma_z()) + &on_qubit(1, &sigma_z());
    let psd = PsdModel::lorentzian(p.lorentz_center, p.lorentz_width, p.detuning_rms);
    let noises = vec![
        NoiseChannel::static_control("rabi", p.amp_noise)?,
        NoiseChannel::static_fixed("mode1", num1, p.mode_noise)?,
        NoiseChannel::time_dependent("detuning", zsum.scale_real(0.5), p.detuning_rms, autocorr_from_psd(&psd)?.terms)?,
    ];
    Ok(Preset { model, noises, psds: vec![None, None, Some(psd)] })
}

/// `exp(iπ/4·σy⊗σy)`.
pub fn ms_target() -> CMatrix {
    let yy = kron_all(&[&sigma_y(), &sigma_y()]);
    let mut u = yy.scale(C64::new(0.0, (PI / 4.0).sin()));
    u.add_identity(C64::new((PI / 4.0).cos(), 0.0));
    u
}

/// Constant `u₁ = u₂ = Ω` for `T_MS` on `p.segments` segments.
pub fn original_ms_pulse(p: &IonMsParams) -> Result<PulseGrid> {
    if !(p.delta() > 0.0) {
        return Err(Error::InvalidArgument(format!("sideband detuning δ = {} must be positive", p.delta())));
    }
    PulseGrid::new(p.ms_time(p.rabi), vec![vec![p.rabi; p.segments]; 2])
}

/// Outcome of the effective-Hamiltonian comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsCheck {
    /// Fidelity against `exp(+i·η²Ω²t/(2δ)·σyσy)`, the sense in which `T_MS` reaches the target.
    pub fidelity: f64,
    /// Fidelity against the conjugate rotation.
    pub conjugate_fidelity: f64,
    /// Fidelity against the rotation summed over all four sidebands
    /// `ν_j ∓ ω`, the complete second-order effective coupling.
    pub all_sideband_fidelity: f64,
    pub duration: f64,
}

/// Propagates constant `Ω` for the whole number of carrier periods closest
/// to `T_MS(Ω)/10` and compares the projected gate with the effective
/// `σyσy` rotation. Each period uses `samples_per_period` midpoint segments
/// and is raised to the required power by squaring; whole periods leave no
/// residual carrier rotation.
pub fn ms_effective_check(p: &IonMsParams, rabi: f64, samples_per_period: usize) -> Result<MsCheck> {
    p.validate()?;
    let ratio = p.eta * rabi.abs() / p.delta();
    if !(ratio < 0.2) || p.delta() <= 0.0 {
        return Err(Error::InvalidArgument(format!("ηΩ/δ = {ratio} is not in the perturbative range (< 0.2)")));
    }
    if rabi == 0.0 {
        return Ok(MsCheck { fidelity: 1.0, conjugate_fidelity: 1.0, all_sideband_fidelity: 1.0, duration: 0.0 });
    }
    if samples_per_period < 4 {
        return Err(Error::InvalidArgument("at least 4 samples per carrier period".into()));
    }
    let preset = build_ion_ms(p)?;
    let model = &preset.model;
    let period = 2.0 * PI / p.omega;
    let periods = ((p.ms_time(rabi) / 10.0) / period).round().max(1.0) as u64;
    let one = PulseGrid::new(period, vec![vec![rabi; samples_per_period]; 2])?;
    let mut base = propagate(model, &one)?.total;
    let mut total = CMatrix::identity(model.dim_full());
    let mut k = periods;
    while k > 0 {
        if k & 1 == 1 {
            total = base.matmul(&total);
        }
        base = base.matmul(&base);
        k >>= 1;
    }
    let t = periods as f64 * period;
    let theta = p.eta * p.eta * rabi * rabi * t / (2.0 * p.delta());
    let uq = model.isometry.project(&total);
    let yy = kron_all(&[&sigma_y(), &sigma_y()]);
    let fid = |angle: f64| {
        let mut eff = yy.scale(C64::new(0.0, angle.sin()));
        eff.add_identity(C64::new(angle.cos(), 0.0));
        uq.trace_product(&eff.adjoint()).norm_sqr() / 16.0
    };
    let detunings = [p.nu1 - p.omega, p.nu1 + p.omega, p.nu2 - p.omega, p.nu2 + p.omega];
    let full = detunings.iter().map(|d| p.eta * p.eta * rabi * rabi * t / (2.0 * d)).sum::<f64>();
    Ok(MsCheck { fidelity: fid(theta), conjugate_fidelity: fid(-theta), all_sideband_fidelity: fid(full), duration: t })
}

/// Error-function ramp `(u_on/2)[erf((t−t′)/σ) − erf((t+t′−T)/σ)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trapezoid {
    pub u_on: f64,
    pub t_prime: f64,
    pub sigma: f64,
}

impl Trapezoid {
    pub fn at(&self, t: f64, duration: f64) -> f64 {
        0.5 * self.u_on * (libm::erf((t - self.t_prime) / self.sigma) - libm::erf((t + self.t_prime - duration) / self.sigma))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmonCzParams {
    pub omega1: f64,
    pub omega2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub coupling: f64,
    pub levels: usize,
    pub duration: f64,
    pub segments: usize,
    pub trapezoid: Trapezoid,
    /// Coupling offset `ΔJ`.
    pub coupling_noise: f64,
    /// Anharmonicity offset `Δα₁`.
    pub alpha_noise: f64,
    /// Rms of the 1/f frequency noise on transmon 1.
    pub freq_rms: f64,
    pub band: (f64, f64),
}

/// Gate time of the trapezoid baseline, chosen to maximize its noise-free
/// local-Z CZ fidelity at 0.1 ns resolution.
pub const TRAPEZOID_DURATION: f64 = 158.1e-9;

impl TransmonCzParams {
    /// Baseline trapezoid configuration.
    pub fn original() -> Self {
        let (omega1, omega2, alpha) = (ghz(7.5), ghz(6.5), mhz(-300.0));
        Self {
            omega1,
            omega2,
            alpha1: alpha,
            alpha2: alpha,
            coupling: mhz(25.0),
            levels: 4,
            duration: TRAPEZOID_DURATION,
            segments: (TRAPEZOID_DURATION / 0.1e-9).round() as usize,
            trapezoid: Trapezoid { u_on: omega2 - omega1 - alpha, t_prime: 62.5e-9, sigma: 11.1e-9 },
            coupling_noise: khz(10.0),
            alpha_noise: mhz(0.1),
            freq_rms: mhz(1.0),
            band: (2.0 * PI * 1e4, 2.0 * PI * 1e8),
        }
    }

    /// Configuration used for robust synthesis (22 ns on 220 segments).
    pub fn robust() -> Self {
        Self { duration: 22e-9, segments: 220, ..Self::original() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 < 0.0 && self.alpha2 < 0.0) {
            return Err(Error::InvalidArgument("transmon anharmonicities must be negative".into()));
        }
        if self.levels < 3 {
            return Err(Error::InvalidArgument(format!("transmon truncation {} below 3 levels", self.levels)));
        }
        Ok(())
    }
}

pub fn build_transmon_cz(p: &TransmonCzParams) -> Result<Preset> {
    p.validate()?;
    let n = p.levels;
    let id = CMatrix::identity(n);
    let (a, ad) = ladder_ops(n)?;
    let num = ad.matmul(&a);
    let anh = ad.matmul(&ad).matmul(&a).matmul(&a).scale_real(0.5);
    let on1 = |x: &CMatrix| kron_all(&[x, &id]);
    let on2 = |x: &CMatrix| kron_all(&[&id, x]);
    let xc = on1(&(&a - &ad)).matmul(&on2(&(&a - &ad)));
    let mut drift = on1(&num).scale_real(p.omega1);
    drift += &on2(&num).scale_real(p.omega2);
    drift += &on1(&anh).scale_real(p.alpha1);
    drift += &on2(&anh).scale_real(p.alpha2);
    drift.axpy_real(-p.coupling, &xc);
    let channels = vec![ControlChannel::new("u", on1(&num))];
    let isometry = Isometry::coordinate(n * n, &[0, 1, n, n + 1])?;
    let cz = CMatrix::from_real_diag(&[1.0, 1.0, 1.0, -1.0]);
    let model =
        SystemModel::new("transmon_cz", drift, channels, isometry, cz)?.with_fidelity(FidelityKind::LocalZ);
    let psd = PsdModel::one_over_f(p.band.0, p.band.1, p.freq_rms);
    let noises = vec![
        NoiseChannel::static_fixed("coupling", xc, p.coupling_noise)?,
        NoiseChannel::static_fixed("anharmonicity", on1(&anh), p.alpha_noise)?,
        NoiseChannel::time_dependent("flux", on1(&num), p.freq_rms, autocorr_from_psd(&psd)?.terms)?,
    ];
    Ok(Preset { model, noises, psds: vec![None, None, Some(psd)] })
}

/// The trapezoid sampled at segment midpoints on `p.duration`, `p.segments`.
pub fn trapezoid_pulse(p: &TransmonCzParams) -> Result<PulseGrid> {
    let tr = p.trapezoid;
    if !(tr.sigma > 0.0 && tr.t_prime > 0.0 && tr.t_prime < p.duration) {
        return Err(Error::InvalidArgument("trapezoid needs σ > 0 and 0 < t′ < T".into()));
    }
    if p.segments == 0 {
        return Err(Error::InvalidArgument("trapezoid needs at least one segment".into()));
    }
    let dt = p.duration / p.segments as f64;
    let u = (0..p.segments).map(|m| tr.at((m as f64 + 0.5) * dt, p.duration)).collect();
    PulseGrid::new(p.duration, vec![u])
}
