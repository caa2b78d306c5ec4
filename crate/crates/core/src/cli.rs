// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

//! Configuration files, pulse files and the command implementations behind
//! the `vlgrape` binary.
//!
//! Physical inputs are either plain numbers in SI units (seconds, rad/s) or
//! strings with a unit suffix such as `"22 ns"` or `"-700 MHz"`. Frequencies
//! given in Hz, kHz, MHz or GHz are multiplied by 2π.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::densemath::{CMatrix, C64};
use crate::error::{Error, Result};
use crate::model::{
    CarrierSample, ControlChannel, FidelityKind, Isometry, NoiseChannel, NoiseOperator, PulseGrid, RobustnessTerm,
    SystemModel,
};
use crate::noise_analysis::{
    autocorr_from_psd, filter_function, log_grid, mc_noise_fidelity, overlap_infidelity, quasi_static_sweep,
    McResult, McSettings, PsdKind, PsdModel, StaticMode, SweepAxis,
};
use crate::objective::{gradient_check, smoothed_pulse, total_fitness, FitnessConfig, FitnessReport, GradientMode};
use crate::optimizer::{enforce_constraints, initial_raw, run_grape_from, OptimizerConfig, RunStatus};
use crate::systems::{
    build_ion_ms, build_transmon_cz, original_ms_pulse, trapezoid_pulse, IonMsParams, Preset, TransmonCzParams,
    Trapezoid,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_BEST_EFFORT: i32 = 2;

pub const UNITS: &str = "angular frequencies in rad/s (1 MHz = 2π·1e6 rad/s), times in s";

/// Parses `"<number> <unit>"`; bare numbers are SI.
pub fn parse_quantity(text: &str) -> Result<f64> {
    let t = text.trim();
    let split = t
        .char_indices()
        .find(|&(i, c)| c.is_alphabetic() && !(matches!(c, 'e' | 'E') && next_is_exponent(t, i)) || c == 'μ' || c == 'µ')
        .map_or(t.len(), |(i, _)| i);
    let (num, unit) = t.split_at(split);
    // decimal exponents keep "22 ns" equal to 22e-9 exactly
    let (exponent, angular) = match unit.trim() {
        "" | "s" | "rad/s" => (0, false),
        "ms" => (-3, false),
        "us" | "μs" | "µs" => (-6, false),
        "ns" => (-9, false),
        "Hz" => (0, true),
        "kHz" => (3, true),
        "MHz" => (6, true),
        "GHz" => (9, true),
        u => return Err(Error::Config(format!("unknown unit '{u}' in '{text}'"))),
    };
    let num = num.trim();
    let bad = || Error::Config(format!("cannot parse quantity '{text}'"));
    let value: f64 = if exponent == 0 {
        num.parse().map_err(|_| bad())?
    } else {
        let (mantissa, e) = match num.find(['e', 'E']) {
            Some(i) => (&num[..i], num[i + 1..].parse::<i32>().map_err(|_| bad())?),
            None => (num, 0),
        };
        mantissa.parse::<f64>().map_err(|_| bad())?;
        format!("{mantissa}e{}", e + exponent).parse().map_err(|_| bad())?
    };
    Ok(if angular { 2.0 * PI * value } else { value })
}

fn next_is_exponent(t: &str, i: usize) -> bool {
    let rest = &t[i + 1..];
    let rest = rest.strip_prefix(['+', '-']).unwrap_or(rest);
    rest.chars().next().is_some_and(|c| c.is_ascii_digit())
}

/// A physical quantity stored in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Quantity(pub f64);

impl<'de> Deserialize<'de> for Quantity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Quantity(v)),
            Raw::Text(s) => parse_quantity(&s).map(Quantity).map_err(serde::de::Error::custom),
        }
    }
}

/// Real nested rows, or `{"re": rows, "im": rows}`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Real(Vec<Vec<f64>>),
    Complex { re: Vec<Vec<f64>>, im: Vec<Vec<f64>> },
}

impl MatrixSpec {
    pub fn to_matrix(&self, what: &str) -> Result<CMatrix> {
        let (re, im) = match self {
            MatrixSpec::Real(re) => (re, None),
            MatrixSpec::Complex { re, im } => (re, Some(im)),
        };
        let n = re.len();
        let square = |rows: &Vec<Vec<f64>>| rows.len() == n && rows.iter().all(|r| r.len() == n);
        if n == 0 || !square(re) || im.is_some_and(|m| !square(m)) {
            return Err(Error::Config(format!("{what}: matrix must be square and non-empty")));
        }
        Ok(CMatrix::from_fn(n, |i, j| C64::new(re[i][j], im.map_or(0.0, |m| m[i][j]))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Original,
    Robust,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub name: String,
    pub generator: MatrixSpec,
    pub carrier: Option<Quantity>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InlineSystem {
    pub drift: MatrixSpec,
    /// Multiplies the drift entries; defaults to 1 rad/s.
    pub drift_unit: Option<Quantity>,
    pub controls: Vec<ControlSpec>,
    /// Basis indices spanning the computational subspace; all by default.
    pub subspace: Option<Vec<usize>>,
    pub target: MatrixSpec,
    #[serde(default)]
    pub fidelity: FidelityKind,
    #[serde(default)]
    pub carrier_sample: CarrierSample,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    /// `ion_ms` or `transmon_cz`.
    pub preset: Option<String>,
    #[serde(default)]
    pub variant: Variant,
    pub inline: Option<InlineSystem>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsdSpec {
    Lorentzian { center: Quantity, width: Quantity },
    OneOverF { low: Quantity, high: Quantity },
}

impl PsdSpec {
    fn model(&self, rms: f64) -> PsdModel {
        match self {
            PsdSpec::Lorentzian { center, width } => PsdModel::lorentzian(center.0, width.0, rms),
            PsdSpec::OneOverF { low, high } => PsdModel::one_over_f(low.0, high.0, rms),
        }
    }
}

/// Overrides a preset channel by name, or defines an inline one.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub name: String,
    /// RMS strength: rad/s, or dimensionless for control-proportional noise.
    pub strength: Option<Quantity>,
    pub operator: Option<MatrixSpec>,
    #[serde(default)]
    pub control_proportional: bool,
    pub psd: Option<PsdSpec>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Random,
    Original,
    File(PathBuf),
    Trapezoid { u_on: Quantity, t_prime: Quantity, sigma: Quantity },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSpec {
    pub duration: Option<Quantity>,
    pub segments: Option<usize>,
    pub omega_max: Option<Quantity>,
    #[serde(default)]
    pub smoothing_sigma: f64,
    pub init_scale: Option<Quantity>,
    #[serde(default)]
    pub seed: u64,
    pub initial: Option<InitialSpec>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    /// One name for first-order or time-dependent terms, two for second order.
    pub noises: Vec<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FitnessSpec {
    #[serde(default)]
    pub terms: Vec<TermSpec>,
    #[serde(default = "default_threshold")]
    pub phi0_threshold: f64,
    #[serde(default)]
    pub gradient_mode: GradientMode,
}

fn default_threshold() -> f64 {
    0.99
}

impl Default for FitnessSpec {
    fn default() -> Self {
        Self { terms: Vec::new(), phi0_threshold: default_threshold(), gradient_mode: GradientMode::Exact }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub max_inner_iters: usize,
    pub lbfgs_memory: usize,
    pub armijo_c: f64,
    pub backtrack_shrink: f64,
    pub max_backtracks: usize,
    pub grad_tolerance: f64,
    pub phi_tolerance: f64,
    pub adjacency_bound: Option<Quantity>,
    pub lambda_decay: f64,
    pub lambda_reincrease: bool,
    pub max_outer_rounds: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            max_inner_iters: d.max_inner_iters,
            lbfgs_memory: d.lbfgs_memory,
            armijo_c: d.armijo_c,
            backtrack_shrink: d.backtrack_shrink,
            max_backtracks: d.max_backtracks,
            grad_tolerance: d.grad_tolerance,
            phi_tolerance: d.phi_tolerance,
            adjacency_bound: None,
            lambda_decay: d.lambda_decay,
            lambda_reincrease: d.lambda_reincrease,
            max_outer_rounds: d.max_outer_rounds,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaGridSpec {
    pub low: Quantity,
    pub high: Quantity,
    pub points: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub noise: String,
    pub low: Quantity,
    pub high: Quantity,
    pub steps: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    pub mc_realizations: usize,
    pub mc_seed: Option<u64>,
    pub static_mode: StaticMode,
    pub omega_grid: Option<OmegaGridSpec>,
    /// Channel for the filter function; the first time-dependent one by default.
    pub filter_noise: Option<String>,
    pub sweep: Vec<AxisSpec>,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            mc_realizations: 200,
            mc_seed: None,
            static_mode: StaticMode::Fixed,
            omega_grid: None,
            filter_noise: None,
            sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub pulse: PulseSpec,
    #[serde(default)]
    pub noises: Vec<NoiseSpec>,
    #[serde(default)]
    pub fitness: FitnessSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

/// A parsed config with the bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
    pub dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig =
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(LoadedConfig {
        config,
        hash: sha256_hex(&bytes),
        dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// A config resolved into a model, noise channels and grid.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub system_name: String,
    pub model: SystemModel,
    pub noises: Vec<NoiseChannel>,
    pub psds: Vec<Option<PsdModel>>,
    pub duration: f64,
    pub segments: usize,
    ion: Option<IonMsParams>,
    transmon: Option<TransmonCzParams>,
}

impl Resolved {
    pub fn noise_index(&self, name: &str) -> Result<usize> {
        self.noises
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::Config(format!("unknown noise '{name}'")))
    }
}

fn apply_noise_override(preset: &mut Preset, spec: &NoiseSpec) -> Result<()> {
    let i = preset
        .noises
        .iter()
        .position(|n| n.name == spec.name)
        .ok_or_else(|| Error::Config(format!("preset has no noise '{}'", spec.name)))?;
    if spec.operator.is_some() || spec.control_proportional {
        return Err(Error::Config(format!("noise '{}': preset operators cannot be replaced", spec.name)));
    }
    let strength = spec.strength.map_or(preset.noises[i].strength, |q| q.0);
    let mut ch = preset.noises[i].with_strength(strength);
    let psd = match (&spec.psd, &preset.psds[i]) {
        (Some(p), Some(_)) => Some(p.model(strength)),
        (Some(_), None) => return Err(Error::Config(format!("noise '{}' is static; psd not allowed", spec.name))),
        (None, Some(old)) => Some(PsdModel { rms: strength, ..old.clone() }),
        (None, None) => None,
    };
    if let Some(p) = &psd {
        let NoiseOperator::Fixed(op) = &ch.operator else { unreachable!("time-dependent noise has a fixed operator") };
        ch = NoiseChannel::time_dependent(ch.name.clone(), op.clone(), strength, autocorr_from_psd(p)?.terms)?;
    }
    preset.noises[i] = ch;
    preset.psds[i] = psd;
    Ok(())
}

fn inline_noise(spec: &NoiseSpec, dim: usize) -> Result<(NoiseChannel, Option<PsdModel>)> {
    let strength = spec.strength.map_or(0.0, |q| q.0);
    if spec.control_proportional {
        if spec.operator.is_some() || spec.psd.is_some() {
            return Err(Error::Config(format!("noise '{}': control-proportional noise is static", spec.name)));
        }
        return Ok((NoiseChannel::static_control(spec.name.clone(), strength)?, None));
    }
    let op = spec
        .operator
        .as_ref()
        .ok_or_else(|| Error::Config(format!("noise '{}' needs an operator", spec.name)))?
        .to_matrix(&spec.name)?;
    if op.dim() != dim {
        return Err(Error::DimensionMismatch(format!("noise '{}' operator is {}-dimensional", spec.name, op.dim())));
    }
    match &spec.psd {
        None => Ok((NoiseChannel::static_fixed(spec.name.clone(), op, strength)?, None)),
        Some(p) => {
            let psd = p.model(strength);
            let terms = autocorr_from_psd(&psd)?.terms;
            Ok((NoiseChannel::time_dependent(spec.name.clone(), op, strength, terms)?, Some(psd)))
        }
    }
}

pub fn resolve(cfg: &RunConfig) -> Result<Resolved> {
    let sys = &cfg.system;
    let durations = (cfg.pulse.duration.map(|q| q.0), cfg.pulse.segments);
    match (&sys.preset, &sys.inline) {
        (Some(_), Some(_)) | (None, None) => {
            Err(Error::Config("system needs exactly one of 'preset' and 'inline'".into()))
        }
        (Some(name), None) => {
            let (mut preset, duration, segments, ion, transmon) = match name.as_str() {
                "ion_ms" => {
                    let mut p = match sys.variant {
                        Variant::Original => IonMsParams::original(),
                        Variant::Robust => IonMsParams::robust(),
                    };
                    p.duration = durations.0.unwrap_or(p.duration);
                    p.segments = durations.1.unwrap_or(p.segments);
                    (build_ion_ms(&p)?, p.duration, p.segments, Some(p), None)
                }
                "transmon_cz" => {
                    let mut p = match sys.variant {
                        Variant::Original => TransmonCzParams::original(),
                        Variant::Robust => TransmonCzParams::robust(),
                    };
                    p.duration = durations.0.unwrap_or(p.duration);
                    p.segments = durations.1.unwrap_or(p.segments);
                    (build_transmon_cz(&p)?, p.duration, p.segments, None, Some(p))
                }
                other => return Err(Error::Config(format!("unknown preset '{other}'"))),
            };
            for spec in &cfg.noises {
                apply_noise_override(&mut preset, spec)?;
            }
            Ok(Resolved {
                system_name: name.clone(),
                model: preset.model,
                noises: preset.noises,
                psds: preset.psds,
                duration,
                segments,
                ion,
                transmon,
            })
        }
        (None, Some(inl)) => {
            let duration = durations.0.ok_or_else(|| Error::Config("pulse.duration is required for inline systems".into()))?;
            let segments = durations.1.ok_or_else(|| Error::Config("pulse.segments is required for inline systems".into()))?;
            let drift = inl.drift.to_matrix("drift")?.scale_real(inl.drift_unit.map_or(1.0, |q| q.0));
            let dim = drift.dim();
            let channels = inl
                .controls
                .iter()
                .map(|c| {
                    let ch = ControlChannel::new(c.name.clone(), c.generator.to_matrix(&c.name)?);
                    Ok(match c.carrier {
                        Some(w) => ch.with_carrier(w.0),
                        None => ch,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let isometry = match &inl.subspace {
                Some(idx) => Isometry::coordinate(dim, idx)?,
                None => Isometry::identity(dim),
            };
            let model = SystemModel::new("inline", drift, channels, isometry, inl.target.to_matrix("target")?)?
                .with_fidelity(inl.fidelity)
                .with_carrier_sample(inl.carrier_sample);
            let mut noises = Vec::new();
            let mut psds = Vec::new();
            for spec in &cfg.noises {
                if noises.iter().any(|n: &NoiseChannel| n.name == spec.name) {
                    return Err(Error::Config(format!("duplicate noise '{}'", spec.name)));
                }
                let (n, p) = inline_noise(spec, dim)?;
                noises.push(n);
                psds.push(p);
            }
            Ok(Resolved {
                system_name: "inline".into(),
                model,
                noises,
                psds,
                duration,
                segments,
                ion: None,
                transmon: None,
            })
        }
    }
}

pub fn fitness_config(cfg: &RunConfig, r: &Resolved) -> Result<FitnessConfig> {
    let mut terms = Vec::new();
    for t in &cfg.fitness.terms {
        let idx = t.noises.iter().map(|n| r.noise_index(n)).collect::<Result<Vec<_>>>()?;
        let term = match idx.as_slice() {
            [i] if !r.noises[*i].is_static() => RobustnessTerm::time_dependent(*i, t.weight),
            [i] => RobustnessTerm::first_order(*i, t.weight),
            [a, b] => RobustnessTerm::second_order(*a, *b, t.weight),
            _ => return Err(Error::Config("a penalty term names one or two noises".into())),
        };
        terms.push(term);
    }
    let fc = FitnessConfig {
        noises: r.noises.clone(),
        terms,
        phi0_threshold: cfg.fitness.phi0_threshold,
        gradient_mode: cfg.fitness.gradient_mode,
    };
    fc.validate()?;
    Ok(fc)
}

pub fn optimizer_config(cfg: &RunConfig, seed: u64) -> Result<OptimizerConfig> {
    let o = &cfg.optimizer;
    let omega_max = cfg
        .pulse
        .omega_max
        .ok_or_else(|| Error::Config("pulse.omega_max is required for optimization".into()))?
        .0;
    let oc = OptimizerConfig {
        max_inner_iters: o.max_inner_iters,
        lbfgs_memory: o.lbfgs_memory,
        armijo_c: o.armijo_c,
        backtrack_shrink: o.backtrack_shrink,
        max_backtracks: o.max_backtracks,
        grad_tolerance: o.grad_tolerance,
        phi_tolerance: o.phi_tolerance,
        omega_max,
        smoothing_sigma: cfg.pulse.smoothing_sigma,
        adjacency_bound: o.adjacency_bound.map(|q| q.0),
        lambda_decay: o.lambda_decay,
        lambda_reincrease: o.lambda_reincrease,
        max_outer_rounds: o.max_outer_rounds,
        rng_seed: seed,
        init_scale: cfg.pulse.init_scale.map(|q| q.0),
    };
    oc.validate()?;
    Ok(oc)
}

/// Raw parameters, smoothing width and optional clip bound of a pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseFile {
    pub metadata: Value,
    pub system: String,
    pub duration: f64,
    pub smoothing_sigma: f64,
    pub omega_max: Option<f64>,
    pub raw: Vec<Vec<f64>>,
    /// The smoothed, clipped pulse, for reference.
    pub amplitudes: Vec<Vec<f64>>,
}

impl PulseFile {
    /// Rebuilds the pulse the optimizer evaluated.
    pub fn pulse(&self) -> Result<PulseGrid> {
        let raw = PulseGrid::new(self.duration, self.raw.clone())?;
        let smoothed = smoothed_pulse(&raw, self.smoothing_sigma)?;
        Ok(match self.omega_max {
            Some(b) => enforce_constraints(&smoothed, &OptimizerConfig { omega_max: b, ..Default::default() }).0,
            None => smoothed,
        })
    }
}

pub fn read_pulse_file(path: &Path) -> Result<PulseFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Initial raw parameters per `pulse.initial`.
pub fn initial_pulse(loaded: &LoadedConfig, r: &Resolved, oc: Option<&OptimizerConfig>) -> Result<PulseGrid> {
    let cfg = &loaded.config;
    let spec = cfg.pulse.initial.clone().unwrap_or(InitialSpec::Random);
    let p = match spec {
        InitialSpec::Random => {
            let oc = match oc {
                Some(o) => o.clone(),
                None => OptimizerConfig {
                    omega_max: cfg.pulse.omega_max.map_or(1.0, |q| q.0),
                    init_scale: cfg.pulse.init_scale.map(|q| q.0),
                    rng_seed: cfg.pulse.seed,
                    ..Default::default()
                },
            };
            initial_raw(r.model.channels.len(), r.segments, r.duration, &oc)?
        }
        InitialSpec::Original => original_pulse(r)?,
        InitialSpec::File(path) => {
            let path = if path.is_relative() { loaded.dir.join(path) } else { path };
            let f = read_pulse_file(&path)?;
            PulseGrid::new(f.duration, f.raw)?
        }
        InitialSpec::Trapezoid { u_on, t_prime, sigma } => {
            let base = r.transmon.clone().unwrap_or_else(TransmonCzParams::original);
            let p = TransmonCzParams {
                duration: r.duration,
                segments: r.segments,
                trapezoid: Trapezoid { u_on: u_on.0, t_prime: t_prime.0, sigma: sigma.0 },
                ..base
            };
            let one = trapezoid_pulse(&p)?;
            PulseGrid::new(r.duration, vec![one.amplitudes[0].clone(); r.model.channels.len()])?
        }
    };
    check_pulse(r, &p)?;
    Ok(p)
}

/// The preset's reference pulse.
pub fn original_pulse(r: &Resolved) -> Result<PulseGrid> {
    if let Some(p) = &r.ion {
        original_ms_pulse(p)
    } else if let Some(p) = &r.transmon {
        trapezoid_pulse(p)
    } else {
        Err(Error::Config("inline systems have no original pulse".into()))
    }
}

fn check_pulse(r: &Resolved, p: &PulseGrid) -> Result<()> {
    p.validate()?;
    if p.channels() != r.model.channels.len() {
        return Err(Error::DimensionMismatch(format!(
            "pulse has {} channels, system has {} controls",
            p.channels(),
            r.model.channels.len()
        )));
    }
    Ok(())
}

pub fn metadata(loaded: &LoadedConfig, command: &str, seed: u64, extra: Value) -> Value {
    let mut m = json!({
        "tool": "vlgrape",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_sha256": loaded.hash,
        "seed": seed,
        "units": UNITS,
    });
    if let (Value::Object(map), Value::Object(more)) = (&mut m, extra) {
        map.extend(more);
    }
    m
}

/// Every resolved input converted to SI, echoed into outputs.
fn resolved_echo(r: &Resolved) -> Value {
    json!({
        "system": r.system_name,
        "duration_s": r.duration,
        "segments": r.segments,
        "noises": r.noises.iter().map(|n| json!({
            "name": n.name,
            "strength": n.strength,
            "static": n.is_static(),
        })).collect::<Vec<_>>(),
    })
}

/// `{:.16e}`: 17 significant digits, independent of locale.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_header(meta: &Value) -> String {
    let mut out = String::new();
    if let Value::Object(map) = meta {
        for (k, v) in map {
            let _ = writeln!(out, "# {k}: {}", v);
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn to_json(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// `pulse.json` → `pulse.trace.json`.
pub fn trace_path(pulse: &Path) -> PathBuf {
    let stem = pulse.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "pulse".into());
    pulse.with_file_name(format!("{stem}.trace.json"))
}

pub struct OptimizeArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

pub fn cmd_optimize(a: &OptimizeArgs) -> Result<i32> {
    let loaded = load_config(&a.config)?;
    let cfg = &loaded.config;
    let seed = a.seed.unwrap_or(cfg.pulse.seed);
    let r = resolve(cfg)?;
    let fc = fitness_config(cfg, &r)?;
    let oc = optimizer_config(cfg, seed)?;
    let raw = initial_pulse(&loaded, &r, Some(&oc))?;
    let res = run_grape_from(&r.model, &fc, &oc, raw)?;
    let meta = metadata(&loaded, "optimize", seed, json!({ "resolved": resolved_echo(&r) }));
    let file = PulseFile {
        metadata: meta.clone(),
        system: r.system_name.clone(),
        duration: res.pulse.duration,
        smoothing_sigma: oc.smoothing_sigma,
        omega_max: Some(oc.omega_max),
        raw: res.raw.amplitudes.clone(),
        amplitudes: res.pulse.amplitudes.clone(),
    };
    write_text(&a.out, &to_json(&file)?)?;
    let trace = json!({ "metadata": meta, "final": FitnessReport { gradient: None, ..res.report.clone() }, "trace": res.trace });
    write_text(&trace_path(&a.out), &to_json(&trace)?)?;
    eprintln!(
        "phi0 = {:.12}, phi = {:.12}, rounds = {}, status = {:?}",
        res.report.phi0,
        res.report.phi,
        res.trace.rounds.len(),
        res.trace.status
    );
    for v in &res.trace.adjacency_violations {
        eprintln!("warning: channel {} jump {:.3e} rad/s after segment {}", v.channel, v.jump, v.segment);
    }
    Ok(match res.trace.status {
        RunStatus::Converged => EXIT_OK,
        RunStatus::BelowThreshold => EXIT_BEST_EFFORT,
    })
}

/// Either a pulse file or the preset's original waveform.
pub enum PulseSource {
    File(PathBuf),
    Original,
}

fn load_pulse(src: &PulseSource, r: &Resolved) -> Result<PulseGrid> {
    let p = match src {
        PulseSource::File(path) => read_pulse_file(path)?.pulse()?,
        PulseSource::Original => original_pulse(r)?,
    };
    check_pulse(r, &p)?;
    Ok(p)
}

pub struct EvaluateArgs {
    pub config: PathBuf,
    pub pulse: PulseSource,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub realizations: Option<usize>,
    pub noiseless: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PenaltyRecord {
    pub label: String,
    pub weight: f64,
    pub derivative_norm: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityRecord {
    pub metadata: Value,
    pub phi0: f64,
    pub phi: f64,
    pub leakage: f64,
    pub penalties: Vec<PenaltyRecord>,
    pub monte_carlo: Option<McResult>,
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<i32> {
    let loaded = load_config(&a.config)?;
    let cfg = &loaded.config;
    if a.realizations == Some(0) {
        return Err(Error::InvalidArgument("--realizations must be at least 1".into()));
    }
    let mut r = resolve(cfg)?;
    if a.noiseless {
        r.noises.iter_mut().for_each(|n| n.strength = 0.0);
    }
    let fc = fitness_config(cfg, &r)?;
    let pulse = load_pulse(&a.pulse, &r)?;
    let rep = total_fitness(&r.model, &pulse, &fc)?;
    let seed = a.seed.or(cfg.analysis.mc_seed).unwrap_or(cfg.pulse.seed);
    let realizations = a.realizations.unwrap_or(cfg.analysis.mc_realizations);
    let noisy = r.noises.iter().any(|n| n.strength != 0.0);
    let monte_carlo = if noisy {
        if realizations == 0 {
            return Err(Error::InvalidArgument("analysis.mc_realizations must be at least 1".into()));
        }
        let s = McSettings { realizations, seed, static_mode: cfg.analysis.static_mode };
        Some(mc_noise_fidelity(&r.model, &pulse, &r.noises, &s)?)
    } else {
        None
    };
    let penalties = fc
        .terms
        .iter()
        .zip(rep.penalties.iter().zip(&rep.derivative_norms))
        .map(|(t, (&p, &d))| PenaltyRecord { label: t.label(&fc.noises), weight: t.weight, derivative_norm: d, penalty: p })
        .collect();
    let record = FidelityRecord {
        metadata: metadata(&loaded, "evaluate", seed, json!({ "resolved": resolved_echo(&r) })),
        phi0: rep.phi0,
        phi: rep.phi,
        leakage: rep.leakage,
        penalties,
        monte_carlo,
    };
    let text = to_json(&record)?;
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(EXIT_OK)
}

/// `name:low:high:steps`, bounds with optional unit suffix.
pub fn parse_axis(text: &str) -> Result<AxisSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    let [noise, low, high, steps] = parts.as_slice() else {
        return Err(Error::Config(format!("axis '{text}' is not name:low:high:steps")));
    };
    Ok(AxisSpec {
        noise: noise.to_string(),
        low: Quantity(parse_quantity(low)?),
        high: Quantity(parse_quantity(high)?),
        steps: steps.parse().map_err(|_| Error::Config(format!("axis '{text}': bad step count")))?,
    })
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub pulse: PulseSource,
    pub axes: Vec<AxisSpec>,
    pub out: PathBuf,
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let loaded = load_config(&a.config)?;
    let cfg = &loaded.config;
    let r = resolve(cfg)?;
    let pulse = load_pulse(&a.pulse, &r)?;
    let specs = if a.axes.is_empty() { &cfg.analysis.sweep } else { &a.axes };
    if specs.is_empty() || specs.len() > 2 {
        return Err(Error::Config("sweep needs one or two axes".into()));
    }
    let axes = specs
        .iter()
        .map(|s| Ok(SweepAxis::linspace(r.noise_index(&s.noise)?, s.low.0, s.high.0, s.steps)))
        .collect::<Result<Vec<_>>>()?;
    let grid = quasi_static_sweep(&r.model, &pulse, &r.noises, &axes)?;
    let names: Vec<&str> = specs.iter().map(|s| s.noise.as_str()).collect();
    let meta = metadata(&loaded, "sweep", cfg.pulse.seed, json!({ "axes": names, "resolved": resolved_echo(&r) }));
    let mut out = csv_header(&meta);
    if axes.len() == 1 {
        out.push_str("axis1,fidelity\n");
        for (v, f) in axes[0].values.iter().zip(&grid.fidelity) {
            let _ = writeln!(out, "{},{}", fmt17(*v), fmt17(*f));
        }
    } else {
        out.push_str("axis1,axis2,fidelity\n");
        let n2 = axes[1].values.len();
        for (i, v1) in axes[0].values.iter().enumerate() {
            for (j, v2) in axes[1].values.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", fmt17(*v1), fmt17(*v2), fmt17(grid.fidelity[i * n2 + j]));
            }
        }
    }
    write_text(&a.out, &out)?;
    eprintln!("min fidelity {:.12}", grid.fidelity.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(EXIT_OK)
}

pub struct FilterArgs {
    pub config: PathBuf,
    pub pulse: PulseSource,
    pub noise: Option<String>,
    pub omega_low: Option<f64>,
    pub omega_high: Option<f64>,
    pub points: Option<usize>,
    pub out: PathBuf,
}

pub fn cmd_filter_function(a: &FilterArgs) -> Result<i32> {
    let loaded = load_config(&a.config)?;
    let cfg = &loaded.config;
    let r = resolve(cfg)?;
    let pulse = load_pulse(&a.pulse, &r)?;
    let name = match a.noise.clone().or_else(|| cfg.analysis.filter_noise.clone()) {
        Some(n) => n,
        None => r
            .noises
            .iter()
            .find(|n| !n.is_static())
            .map(|n| n.name.clone())
            .ok_or_else(|| Error::Config("no time-dependent noise for the filter function".into()))?,
    };
    let idx = r.noise_index(&name)?;
    let NoiseOperator::Fixed(op) = &r.noises[idx].operator else {
        return Err(Error::Unsupported(format!("noise '{name}' has no fixed operator")));
    };
    let g = cfg.analysis.omega_grid.as_ref();
    let low = a.omega_low.or(g.map(|g| g.low.0)).unwrap_or(2.0 * PI * 1e2);
    let high = a.omega_high.or(g.map(|g| g.high.0)).unwrap_or(2.0 * PI * 1e8);
    let points = a.points.or(g.map(|g| g.points)).unwrap_or(400);
    if !(low > 0.0 && high > low) || points < 3 {
        return Err(Error::InvalidArgument("omega grid needs 0 < low < high and at least 3 points".into()));
    }
    let omega = log_grid(low, high, points);
    let table = filter_function(&r.model, &pulse, op, &omega)?;
    let psd = r.psds[idx].clone().unwrap_or(PsdModel { kind: PsdKind::ExpSum { terms: Vec::new() }, rms: 0.0 });
    let expansion = r.noises[idx].autocorrelation().to_vec();
    let meta = metadata(&loaded, "filter-function", cfg.pulse.seed, json!({ "noise": name, "resolved": resolved_echo(&r) }));
    let mut out = csv_header(&meta);
    out.push_str("omega_rad_s,F,S,S_F_over_w2\n");
    for (i, &w) in table.omega.iter().enumerate() {
        let s = if psd.rms > 0.0 { psd.spectrum(&expansion, w) } else { 0.0 };
        let _ = writeln!(out, "{},{},{},{}", fmt17(w), fmt17(table.values[i]), fmt17(s), fmt17(s * table.reduced[i]));
    }
    write_text(&a.out, &out)?;
    if psd.rms > 0.0 {
        let ov = overlap_infidelity(&psd, &expansion, &table)?;
        println!("overlap infidelity {} (quadrature error {:.2e})", fmt17(ov.infidelity), ov.quadrature_error);
        if let Some(w) = ov.warning {
            eprintln!("warning: {w}");
        }
    } else {
        println!("overlap infidelity {} (noise strength zero)", fmt17(0.0));
    }
    Ok(EXIT_OK)
}

pub struct GradCheckArgs {
    pub config: PathBuf,
    pub tol: f64,
    pub samples: usize,
    pub seed: Option<u64>,
    pub mode: Option<GradientMode>,
    /// Finite-difference step relative to `max(|u|, Ω_max)`.
    pub rel_step: f64,
}

pub fn cmd_grad_check(a: &GradCheckArgs) -> Result<i32> {
    use rand::{Rng, SeedableRng};
    let loaded = load_config(&a.config)?;
    let cfg = &loaded.config;
    let seed = a.seed.unwrap_or(cfg.pulse.seed);
    let r = resolve(cfg)?;
    let mut fc = fitness_config(cfg, &r)?;
    if let Some(m) = a.mode {
        fc.gradient_mode = m;
    }
    let raw = initial_pulse(&loaded, &r, None)?;
    let pulse = smoothed_pulse(&raw, cfg.pulse.smoothing_sigma)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    if a.samples == 0 {
        return Err(Error::InvalidArgument("--samples must be at least 1".into()));
    }
    let n = a.samples;
    let comps: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.random_range(0..pulse.channels()), rng.random_range(0..pulse.segments())))
        .collect();
    let scale = pulse.max_abs().max(cfg.pulse.omega_max.map_or(0.0, |q| q.0)).max(f64::MIN_POSITIVE);
    let check = gradient_check(&r.model, &pulse, &fc, &comps, a.rel_step * scale)?;
    println!(
        "max relative error {} over {} components (worst c={} m={}, step {:.3e})",
        fmt17(check.max_rel_error),
        check.components,
        check.worst.0,
        check.worst.1,
        check.step
    );
    Ok(if check.max_rel_error < a.tol { EXIT_OK } else { EXIT_ERROR })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantities_convert_to_si() {
        assert_eq!(parse_quantity("22 ns").unwrap(), 22e-9);
        assert_eq!(parse_quantity("1.5e-3").unwrap(), 1.5e-3);
        assert!((parse_quantity("-700 MHz").unwrap() + 2.0 * PI * 7e8).abs() < 1e-3);
        assert!((parse_quantity("30kHz").unwrap() - 2.0 * PI * 3e4).abs() < 1e-9);
        assert_eq!(parse_quantity("2 μs").unwrap(), 2e-6);
        assert_eq!(parse_quantity("1e6 rad/s").unwrap(), 1e6);
        assert!(parse_quantity("3 furlongs").is_err());
        assert!(parse_quantity("MHz").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"system": {"preset": "transmon_cz"}, "pulse": {}, "bogus": 1}"#;
        let err = serde_json::from_str::<RunConfig>(text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn preset_overrides_rebuild_time_dependent_noise() {
        let text = r#"{"system": {"preset": "transmon_cz"}, "pulse": {},
            "noises": [{"name": "flux", "strength": "2 MHz"}, {"name": "coupling", "strength": "0 Hz"}]}"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        let r = resolve(&cfg).unwrap();
        let flux = &r.noises[r.noise_index("flux").unwrap()];
        assert!((flux.strength - 2.0 * PI * 2e6).abs() < 1e-6);
        assert_eq!(r.psds[2].as_ref().unwrap().rms, flux.strength);
        assert_eq!(r.noises[0].strength, 0.0);
        assert_eq!(r.segments, 1581);
    }

    #[test]
    fn axis_flags_parse() {
        let a = parse_axis("coupling:-30kHz:30kHz:21").unwrap();
        assert_eq!(a.steps, 21);
        assert!((a.low.0 + 2.0 * PI * 3e4).abs() < 1e-9);
        assert!(parse_axis("coupling:1:2").is_err());
    }

    #[test]
    fn csv_numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.0 * PI * 7e8, 1e-300, 0.0] {
            assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
        }
    }
}
