//! Graded-index multimode fibre as a set of mode groups exchanging power.
//!
//! Power flow between neighbouring groups follows a symmetric tridiagonal
//! generator with zero row sums, exponentiated per spool. Higher-order groups
//! see extra attenuation, accumulate differential delay and random phase.
//! Connectors add per-trial excess loss and the launch connector sets how much
//! light starts outside the fundamental group.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::ProtocolParams;
use crate::error::{ensure, Error, Result};
use crate::rng::SeededRng;

pub const DEFAULT_MODE_GROUPS: usize = 8;
pub const SPOOL_LENGTHS_KM: [f64; 4] = [10.0, 5.0, 2.0, 1.0];

/// Interconnect draws made per trial regardless of how many a length needs,
/// so the i-th junction sees the same loss at every distance.
const INTERCONNECT_POOL: usize = 16;

/// Relative weights of the non-fundamental power over groups 2..4 for an
/// underfilled launch, before per-trial jitter.
const UNDERFILL_SPREAD: [f64; 3] = [0.6, 0.3, 0.1];

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

pub fn lin_to_db(t: f64) -> f64 {
    -10.0 * t.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaunchKind {
    /// SMF butt-coupled into the MMF: mostly low-order groups, varies per mating.
    Underfill,
    /// Tapered mode-matching adapter at both ends.
    Adapter,
}

impl LaunchKind {
    pub const ALL: [LaunchKind; 2] = [LaunchKind::Underfill, LaunchKind::Adapter];

    pub fn as_str(self) -> &'static str {
        match self {
            LaunchKind::Underfill => "underfill",
            LaunchKind::Adapter => "adapter",
        }
    }
}

impl fmt::Display for LaunchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LaunchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "underfill" | "none" | "no-adapter" => Ok(LaunchKind::Underfill),
            "adapter" | "adapters" | "lantern" => Ok(LaunchKind::Adapter),
            other => Err(Error::Config(format!("unknown launch kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePowerState {
    pub power: Vec<f64>,
    pub delay_s: Vec<f64>,
    pub phase_rms_rad: Vec<f64>,
}

impl ModePowerState {
    pub fn new(power: Vec<f64>) -> Result<Self> {
        ensure(!power.is_empty(), Error::Domain, || "need at least one mode group".into())?;
        ensure(power.iter().all(|p| p.is_finite() && *p >= 0.0), Error::Domain, || {
            format!("power fractions must be non-negative, got {power:?}")
        })?;
        let total: f64 = power.iter().sum();
        ensure(total <= 1.0 + 1e-12, Error::Domain, || format!("power fractions sum to {total} > 1"))?;
        let n = power.len();
        Ok(Self { power, delay_s: vec![0.0; n], phase_rms_rad: vec![0.0; n] })
    }

    /// All power in group 1 of `groups`.
    pub fn fundamental(groups: usize) -> Self {
        let mut power = vec![0.0; groups.max(1)];
        power[0] = 1.0;
        Self::new(power).expect("unit fundamental state is valid")
    }

    pub fn groups(&self) -> usize {
        self.power.len()
    }

    pub fn total_power(&self) -> f64 {
        self.power.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub mode_groups: usize,
    pub attenuation_db_per_km: f64,
    /// Extra attenuation of group m is (m-1) times this.
    pub hom_loss_db_per_km: f64,
    pub coupling_per_km: f64,
    pub dmd_s_per_km: f64,
    /// Phase-diffusion strength; group m accumulates variance ((m-1)·σ)²·L.
    pub phase_diffusion_rad_per_sqrt_km: f64,
    pub connector_loss_mean_db: f64,
    pub connector_loss_std_db: f64,
    pub interconnect_loss_mean_db: f64,
    pub interconnect_loss_std_db: f64,
    pub adapter_suppression: f64,
    pub adapter_leak: f64,
    pub adapter_insertion_loss_db: f64,
    pub underfill_min: f64,
    pub underfill_max: f64,
    /// Fraction of group-2 power the SMF pigtail still collects.
    pub recapture: f64,
    pub e_opt_x: f64,
    pub e_opt_z: f64,
    pub phase_error_coeff: f64,
    pub timing_error_coeff: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            mode_groups: DEFAULT_MODE_GROUPS,
            attenuation_db_per_km: 0.3,
            hom_loss_db_per_km: 0.02,
            coupling_per_km: 0.0057,
            dmd_s_per_km: 150e-12,
            phase_diffusion_rad_per_sqrt_km: 2.0,
            connector_loss_mean_db: 0.25,
            connector_loss_std_db: 0.1,
            interconnect_loss_mean_db: 0.1,
            interconnect_loss_std_db: 0.05,
            adapter_suppression: 0.9,
            adapter_leak: 0.1,
            adapter_insertion_loss_db: 0.5,
            underfill_min: 0.75,
            underfill_max: 0.95,
            recapture: 0.3,
            e_opt_x: 0.018,
            e_opt_z: 0.0005,
            phase_error_coeff: 0.598,
            timing_error_coeff: 0.109,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("attenuation_db_per_km", self.attenuation_db_per_km),
            ("hom_loss_db_per_km", self.hom_loss_db_per_km),
            ("coupling_per_km", self.coupling_per_km),
            ("dmd_s_per_km", self.dmd_s_per_km),
            ("phase_diffusion_rad_per_sqrt_km", self.phase_diffusion_rad_per_sqrt_km),
            ("connector_loss_mean_db", self.connector_loss_mean_db),
            ("connector_loss_std_db", self.connector_loss_std_db),
            ("interconnect_loss_mean_db", self.interconnect_loss_mean_db),
            ("interconnect_loss_std_db", self.interconnect_loss_std_db),
            ("adapter_insertion_loss_db", self.adapter_insertion_loss_db),
            ("phase_error_coeff", self.phase_error_coeff),
            ("timing_error_coeff", self.timing_error_coeff),
        ];
        for (name, v) in nonneg {
            ensure(v.is_finite() && v >= 0.0, Error::Config, || format!("{name} must be >= 0, got {v}"))?;
        }
        let unit = [
            ("adapter_suppression", self.adapter_suppression),
            ("adapter_leak", self.adapter_leak),
            ("underfill_min", self.underfill_min),
            ("underfill_max", self.underfill_max),
            ("recapture", self.recapture),
            ("e_opt_x", self.e_opt_x),
            ("e_opt_z", self.e_opt_z),
        ];
        for (name, v) in unit {
            ensure((0.0..=1.0).contains(&v), Error::Config, || format!("{name} must lie in [0,1], got {v}"))?;
        }
        ensure(self.mode_groups >= 1, Error::Config, || "mode_groups must be >= 1".into())?;
        ensure(self.underfill_min <= self.underfill_max, Error::Config, || {
            "underfill_min must not exceed underfill_max".into()
        })
    }

    /// Weight with which each group's power reaches the single-mode receiver.
    pub fn collection_weights(&self, launch: LaunchKind) -> Vec<f64> {
        let mut w = vec![0.0; self.mode_groups];
        w[0] = 1.0;
        if self.mode_groups > 1 {
            w[1] = match launch {
                LaunchKind::Underfill => self.recapture,
                LaunchKind::Adapter => self.recapture * (1.0 - self.adapter_suppression),
            };
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub length_km: f64,
    pub spools_km: Vec<f64>,
    pub launch: LaunchKind,
    pub params: ChannelParams,
}

impl ChannelConfig {
    /// Link of `length_km` built from the standard spool set.
    pub fn new(length_km: f64, launch: LaunchKind, params: ChannelParams) -> Result<Self> {
        ensure(length_km.is_finite() && length_km > 0.0, Error::Config, || {
            format!("link length must be positive, got {length_km}")
        })?;
        let cfg = Self { length_km, spools_km: spool_decomposition(length_km), launch, params };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_spools(spools_km: Vec<f64>, launch: LaunchKind, params: ChannelParams) -> Result<Self> {
        let cfg = Self { length_km: spools_km.iter().sum(), spools_km, launch, params };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        ensure(!self.spools_km.is_empty(), Error::Config, || "need at least one fibre segment".into())?;
        ensure(self.spools_km.iter().all(|l| l.is_finite() && *l >= 0.0), Error::Config, || {
            format!("segment lengths must be non-negative, got {:?}", self.spools_km)
        })
    }

    pub fn junctions(&self) -> usize {
        self.spools_km.len() - 1
    }
}

/// Greedy split into the available spool lengths; a fractional tail becomes
/// its own short segment.
pub fn spool_decomposition(length_km: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut rem = length_km;
    for s in SPOOL_LENGTHS_KM {
        while rem >= s - 1e-9 {
            out.push(s);
            rem -= s;
        }
    }
    if rem > 1e-9 {
        out.push(rem);
    }
    out
}

/// Excess losses of the mated connectors of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorLosses {
    /// Transmitter-side and receiver-side connectors (dB).
    pub ends_db: [f64; 2],
    /// Patch interconnects between spools (dB), in order.
    pub interconnects_db: Vec<f64>,
}

impl ConnectorLosses {
    pub fn none() -> Self {
        Self { ends_db: [0.0; 2], interconnects_db: Vec::new() }
    }

    pub fn draw(params: &ChannelParams, rng: &SeededRng) -> Self {
        let mut r = rng.rng();
        let mut normal = |mean: f64, std: f64| (mean + std * r.sample::<f64, _>(StandardNormal)).max(0.0);
        let ends_db = [
            normal(params.connector_loss_mean_db, params.connector_loss_std_db),
            normal(params.connector_loss_mean_db, params.connector_loss_std_db),
        ];
        let interconnects_db = (0..INTERCONNECT_POOL)
            .map(|_| normal(params.interconnect_loss_mean_db, params.interconnect_loss_std_db))
            .collect();
        Self { ends_db, interconnects_db }
    }

    pub fn interconnect_db(&self, i: usize) -> f64 {
        self.interconnects_db.get(i).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    #[serde(rename = "drift_period_s")]
    pub period_s: f64,
    #[serde(rename = "drift_amplitude")]
    pub amplitude: f64,
    /// Stationary std of an Ornstein-Uhlenbeck term with correlation time equal to the period.
    #[serde(rename = "drift_noise")]
    pub noise: f64,
}

impl Default for DriftParams {
    fn default() -> Self {
        Self { period_s: 600.0, amplitude: 0.373, noise: 0.05 }
    }
}

impl DriftParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.period_s.is_finite() && self.period_s > 0.0, Error::Config, || {
            format!("drift_period_s must be positive, got {}", self.period_s)
        })?;
        ensure(self.amplitude.is_finite() && self.amplitude >= 0.0, Error::Config, || {
            format!("drift_amplitude must be >= 0, got {}", self.amplitude)
        })?;
        ensure(self.noise.is_finite() && self.noise >= 0.0, Error::Config, || {
            format!("drift_noise must be >= 0, got {}", self.noise)
        })
    }
}

/// Slow environmental modulation of coupling, connector loss and launch mode content.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftState {
    pub time_s: f64,
    pub params: DriftParams,
    pub perturbation: f64,
}

impl DriftState {
    pub fn new(params: DriftParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { time_s: 0.0, params, perturbation: 0.0 })
    }

    /// No modulation at all.
    pub fn still() -> Self {
        Self { time_s: 0.0, params: DriftParams { period_s: 600.0, amplitude: 0.0, noise: 0.0 }, perturbation: 0.0 }
    }

    pub fn deterministic_part(&self) -> f64 {
        self.params.amplitude * (std::f64::consts::TAU * self.time_s / self.params.period_s).sin()
    }

    pub fn modulation(&self) -> f64 {
        self.deterministic_part() + self.perturbation
    }

    /// Multiplier applied to κ, connector losses and launch higher-order content; never negative.
    pub fn factor(&self) -> f64 {
        (1.0 + self.modulation()).max(0.0)
    }
}

pub fn advance_drift<R: Rng + ?Sized>(drift: &DriftState, dt_s: f64, rng: &mut R) -> Result<DriftState> {
    ensure(dt_s.is_finite() && dt_s > 0.0, Error::Domain, || format!("drift step must be positive, got {dt_s}"))?;
    let rho = (-dt_s / drift.params.period_s).exp();
    let kick = if drift.params.noise > 0.0 {
        let n: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
        drift.params.noise * (1.0 - rho * rho).sqrt() * n
    } else {
        0.0
    };
    Ok(DriftState { time_s: drift.time_s + dt_s, params: drift.params, perturbation: rho * drift.perturbation + kick })
}

pub fn launch(kind: LaunchKind, params: &ChannelParams, rng: &SeededRng) -> ModePowerState {
    let g = params.mode_groups;
    let mut power = vec![0.0; g];
    match kind {
        LaunchKind::Adapter => {
            let eps = (1.0 - params.adapter_suppression) * params.adapter_leak;
            power[0] = 1.0 - eps;
            match g {
                1 => power[0] = 1.0,
                2 => power[1] = eps,
                _ => {
                    power[1] = 2.0 * eps / 3.0;
                    power[2] = eps / 3.0;
                }
            }
        }
        LaunchKind::Underfill => {
            let mut r = rng.rng();
            let f1 = if params.underfill_max > params.underfill_min {
                r.random_range(params.underfill_min..params.underfill_max)
            } else {
                params.underfill_min
            };
            let jitter: Vec<f64> = UNDERFILL_SPREAD.iter().map(|w| w * r.random_range(0.5..1.5)).collect();
            let n = jitter.len().min(g - 1);
            if n == 0 {
                power[0] = 1.0;
            } else {
                let sum: f64 = jitter[..n].iter().sum();
                power[0] = f1;
                for m in 0..n {
                    power[m + 1] = (1.0 - f1) * jitter[m] / sum;
                }
            }
        }
    }
    ModePowerState::new(power).expect("launch distributions are normalised")
}

fn coupling_generator(groups: usize, kappa: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(groups, groups);
    for i in 0..groups.saturating_sub(1) {
        m[(i, i + 1)] += kappa;
        m[(i + 1, i)] += kappa;
        m[(i, i)] -= kappa;
        m[(i + 1, i + 1)] -= kappa;
    }
    m
}

pub fn propagate(
    state: &ModePowerState,
    config: &ChannelConfig,
    drift: &DriftState,
    connectors: &ConnectorLosses,
) -> Result<ModePowerState> {
    config.validate()?;
    let p = &config.params;
    let g = state.groups();
    ensure(g == p.mode_groups, Error::Config, || {
        format!("state has {g} mode groups, channel expects {}", p.mode_groups)
    })?;
    let fac = drift.factor();

    let mut power = DVector::from_column_slice(&state.power);
    let mut delay = state.delay_s.clone();
    let mut var: Vec<f64> = state.phase_rms_rad.iter().map(|s| s * s).collect();

    // the launch connector's mode excitation breathes with the drift
    if fac != 1.0 && g > 1 {
        let total = power.sum();
        let mut hom: f64 = power.iter().skip(1).sum::<f64>() * fac;
        let mut scale = fac;
        if hom > total {
            scale *= total / hom;
            hom = total;
        }
        for m in 1..g {
            power[m] *= scale;
        }
        power[0] = total - hom;
    }

    power *= db_to_lin(connectors.ends_db[0] * fac);
    let kappa = p.coupling_per_km * fac;
    let beta = std::f64::consts::LN_10 / 10.0 * p.hom_loss_db_per_km;
    let last = config.spools_km.len() - 1;
    for (i, &len) in config.spools_km.iter().enumerate() {
        if kappa * len == 0.0 {
            for m in 0..g {
                power[m] *= (-beta * m as f64 * len).exp();
            }
        } else {
            let mut gen = coupling_generator(g, kappa);
            for m in 0..g {
                gen[(m, m)] -= beta * m as f64;
            }
            power = (gen * len).exp() * power;
        }
        power *= db_to_lin(p.attenuation_db_per_km * len);
        for m in 0..g {
            delay[m] += m as f64 * p.dmd_s_per_km * len;
            let s = m as f64 * p.phase_diffusion_rad_per_sqrt_km;
            var[m] += s * s * len;
        }
        if i < last {
            power *= db_to_lin(connectors.interconnect_db(i) * fac);
        }
    }
    power *= db_to_lin(connectors.ends_db[1] * fac);
    if config.launch == LaunchKind::Adapter {
        power *= db_to_lin(2.0 * p.adapter_insertion_loss_db);
    }

    Ok(ModePowerState {
        power: power.iter().map(|x| x.max(0.0)).collect(),
        delay_s: delay,
        phase_rms_rad: var.into_iter().map(f64::sqrt).collect(),
    })
}

/// Power the single-mode receiver collects, before any receiver loss.
pub fn collected_power(state: &ModePowerState, weights: &[f64]) -> f64 {
    state.power.iter().zip(weights).map(|(p, w)| p * w).sum()
}

/// End-to-end photon survival probability including detection.
pub fn link_transmittance(
    state_out: &ModePowerState,
    weights: &[f64],
    receiver_attenuation_db: f64,
    detector_efficiency: f64,
    excess_loss_db: f64,
) -> f64 {
    collected_power(state_out, weights) * db_to_lin(receiver_attenuation_db) * detector_efficiency * db_to_lin(excess_loss_db)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorContributions {
    /// Wrong-port probability of the interfered X slot.
    pub phase: f64,
    /// Wrong-slot probability from differential delay.
    pub timing: f64,
}

impl ErrorContributions {
    /// Total Z-basis flip probability: intrinsic and timing errors combined.
    pub fn z_flip(&self, e_opt_z: f64) -> f64 {
        e_opt_z * (1.0 - self.timing) + self.timing * (1.0 - e_opt_z)
    }
}

pub fn error_contributions(state_out: &ModePowerState, config: &ChannelConfig, protocol: &ProtocolParams) -> ErrorContributions {
    let p = &config.params;
    let w = p.collection_weights(config.launch);
    let coll = collected_power(state_out, &w);
    if coll <= 0.0 {
        return ErrorContributions { phase: p.e_opt_x.min(0.5), timing: 0.0 };
    }
    let half_gate = protocol.gate_s / 2.0;
    let mut phase_term = 0.0;
    let mut timing_term = 0.0;
    for (m, &wm) in w.iter().enumerate().skip(1) {
        let f = wm * state_out.power[m] / coll;
        if f == 0.0 {
            continue;
        }
        let v = state_out.phase_rms_rad[m].powi(2);
        phase_term += f * (1.0 - (-v / 2.0).exp());
        if state_out.delay_s[m] - state_out.delay_s[0] > half_gate {
            timing_term += f;
        }
    }
    ErrorContributions {
        phase: (p.e_opt_x + p.phase_error_coeff * phase_term).clamp(0.0, 0.5),
        timing: (p.timing_error_coeff * timing_term).clamp(0.0, 0.5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lossless(kappa: f64) -> ChannelParams {
        ChannelParams { attenuation_db_per_km: 0.0, hom_loss_db_per_km: 0.0, coupling_per_km: kappa, ..Default::default() }
    }

    #[test]
    fn adapter_perfect_match() {
        let p = ChannelParams { adapter_suppression: 1.0, ..Default::default() };
        let s = launch(LaunchKind::Adapter, &p, &SeededRng::new(0));
        assert_eq!(s.power, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn adapter_leak_split() {
        let p = ChannelParams::default();
        let s = launch(LaunchKind::Adapter, &p, &SeededRng::new(0));
        let eps = 0.1 * 0.1;
        assert_abs_diff_eq!(s.power[0], 1.0 - eps, epsilon = 1e-15);
        assert_abs_diff_eq!(s.power[1], 2.0 * eps / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.power[2], eps / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn underfill_deterministic_and_in_band() {
        let p = ChannelParams::default();
        let rng = SeededRng::new(11);
        assert_eq!(launch(LaunchKind::Underfill, &p, &rng), launch(LaunchKind::Underfill, &p, &rng));
        let mean: f64 =
            (0..1000).map(|i| launch(LaunchKind::Underfill, &p, &rng.indexed("t", i)).power[0]).sum::<f64>() / 1000.0;
        // uniform on [0.75, 0.95]: mean 0.85, std of mean 0.0577/sqrt(1000)
        assert!((0.75..=0.95).contains(&mean));
        assert!((mean - 0.85).abs() < 5.0 * 0.0577 / 1000f64.sqrt(), "{mean}");
        for i in 0..200 {
            let s = launch(LaunchKind::Underfill, &p, &rng.indexed("t", i));
            assert_abs_diff_eq!(s.total_power(), 1.0, epsilon = 1e-12);
            assert!((0.75..0.95).contains(&s.power[0]));
            assert!(s.power[4..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn no_coupling_pure_attenuation() {
        for len in [1.0, 2.0, 5.0, 10.0, 17.0] {
            let cfg = ChannelConfig::new(len, LaunchKind::Underfill, ChannelParams { coupling_per_km: 0.0, ..Default::default() })
                .unwrap();
            let out = propagate(&ModePowerState::fundamental(8), &cfg, &DriftState::still(), &ConnectorLosses::none()).unwrap();
            let expected = 10f64.powf(-0.3 * len / 10.0);
            assert!((out.power[0] - expected).abs() <= 1e-15 * expected * 4.0, "{} vs {}", out.power[0], expected);
            assert!(out.power[1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_length_is_identity() {
        let cfg = ChannelConfig::with_spools(vec![0.0], LaunchKind::Underfill, ChannelParams::default()).unwrap();
        let s = launch(LaunchKind::Underfill, &cfg.params, &SeededRng::new(1));
        let out = propagate(&s, &cfg, &DriftState::still(), &ConnectorLosses::none()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn negative_length_rejected() {
        assert!(ChannelConfig::new(-1.0, LaunchKind::Underfill, ChannelParams::default()).is_err());
        assert!(ChannelConfig::with_spools(vec![1.0, -0.5], LaunchKind::Underfill, ChannelParams::default()).is_err());
        let mut cfg = ChannelConfig::new(1.0, LaunchKind::Underfill, ChannelParams::default()).unwrap();
        cfg.spools_km[0] = -1.0;
        let s = ModePowerState::fundamental(8);
        assert!(matches!(propagate(&s, &cfg, &DriftState::still(), &ConnectorLosses::none()), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_is_fixed_point_of_coupling() {
        let cfg = ChannelConfig::new(10.0, LaunchKind::Underfill, lossless(0.5)).unwrap();
        let s = ModePowerState::new(vec![0.125; 8]).unwrap();
        let out = propagate(&s, &cfg, &DriftState::still(), &ConnectorLosses::none()).unwrap();
        for p in out.power {
            assert_abs_diff_eq!(p, 0.125, epsilon = 1e-14);
        }
    }

    #[test]
    fn spools() {
        assert_eq!(spool_decomposition(17.0), vec![10.0, 5.0, 2.0]);
        assert_eq!(spool_decomposition(8.0), vec![5.0, 2.0, 1.0]);
        assert_eq!(spool_decomposition(3.0), vec![2.0, 1.0]);
        assert_eq!(spool_decomposition(12.0), vec![10.0, 2.0]);
        assert_eq!(spool_decomposition(1.5), vec![1.0, 0.5]);
    }

    #[test]
    fn transmittance_examples() {
        let w = ChannelParams::default().collection_weights(LaunchKind::Underfill);
        assert_eq!(link_transmittance(&ModePowerState::fundamental(8), &w, 0.0, 1.0, 0.0), 1.0);
        let mut s = ModePowerState::fundamental(8);
        s.power[0] = db_to_lin(3.0);
        let eta = link_transmittance(&s, &w, 3.0, 0.5, 0.0);
        let oracle = 0.501187 * 0.501187 * 0.5;
        assert!((eta - oracle).abs() < 1e-6, "{eta}");
        assert!((eta - 0.1255).abs() < 1e-3);
        let w0 = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let split = ModePowerState::new(vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let full = link_transmittance(&ModePowerState::fundamental(8), &w0, 3.0, 0.5, 1.0);
        assert_eq!(link_transmittance(&split, &w0, 3.0, 0.5, 1.0), full / 2.0);
    }

    #[test]
    fn fundamental_only_has_intrinsic_error() {
        let cfg = ChannelConfig::new(10.0, LaunchKind::Underfill, ChannelParams::default()).unwrap();
        let mut s = ModePowerState::fundamental(8);
        s.delay_s = vec![0.0, 1e-9, 2e-9, 3e-9, 4e-9, 5e-9, 6e-9, 7e-9];
        s.phase_rms_rad = vec![0.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0];
        let e = error_contributions(&s, &cfg, &ProtocolParams::default());
        assert_eq!(e, ErrorContributions { phase: cfg.params.e_opt_x, timing: 0.0 });
    }

    #[test]
    fn short_delays_have_no_timing_error() {
        let cfg = ChannelConfig::new(0.5, LaunchKind::Underfill, ChannelParams::default()).unwrap();
        let s = launch(LaunchKind::Underfill, &cfg.params, &SeededRng::new(2));
        let out = propagate(&s, &cfg, &DriftState::still(), &ConnectorLosses::none()).unwrap();
        // only groups 1-2 are collected; group 2 lags by 75 ps
        assert!(out.delay_s[1] < 125e-12);
        let e = error_contributions(&out, &cfg, &ProtocolParams::default());
        assert_eq!(e.timing, 0.0);
    }

    #[test]
    fn drift_amplitude_zero_is_time_invariant() {
        let cfg = ChannelConfig::new(10.0, LaunchKind::Underfill, ChannelParams::default()).unwrap();
        let s = launch(LaunchKind::Underfill, &cfg.params, &SeededRng::new(3));
        let c = ConnectorLosses::draw(&cfg.params, &SeededRng::new(4));
        let mut d = DriftState::new(DriftParams { period_s: 600.0, amplitude: 0.0, noise: 0.0 }).unwrap();
        let first = propagate(&s, &cfg, &d, &c).unwrap();
        let mut r = SeededRng::new(5).rng();
        for _ in 0..50 {
            d = advance_drift(&d, 10.0, &mut r).unwrap();
            assert_eq!(propagate(&s, &cfg, &d, &c).unwrap(), first);
        }
    }

    #[test]
    fn drift_period() {
        let d = DriftState::new(DriftParams { period_s: 600.0, amplitude: 0.3, noise: 0.0 }).unwrap();
        let mut r = SeededRng::new(0).rng();
        let mut e = d;
        for _ in 0..60 {
            e = advance_drift(&e, 10.0, &mut r).unwrap();
        }
        assert_abs_diff_eq!(e.deterministic_part(), d.deterministic_part(), epsilon = 1e-12);
        assert!(advance_drift(&d, 0.0, &mut r).is_err());
        let big = DriftState { time_s: 150.0, params: DriftParams { period_s: 600.0, amplitude: 3.0, noise: 0.0 }, perturbation: -5.0 };
        assert_eq!(big.factor(), 0.0);
    }

    #[test]
    fn ou_stationary_std() {
        let mut d = DriftState::new(DriftParams { period_s: 600.0, amplitude: 0.0, noise: 0.1 }).unwrap();
        let mut r = SeededRng::new(8).rng();
        let mut xs = Vec::new();
        for _ in 0..200_000 {
            d = advance_drift(&d, 60.0, &mut r).unwrap();
            xs.push(d.perturbation);
        }
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.005, "{sd}");
    }

    proptest! {
        #[test]
        fn lossless_coupling_conserves_power(kappa in 0.0f64..2.0, len in 0.0f64..30.0, seed in 0u64..1000) {
            let cfg = ChannelConfig::with_spools(spool_decomposition(len.max(1e-3)), LaunchKind::Underfill, lossless(kappa)).unwrap();
            let s = launch(LaunchKind::Underfill, &cfg.params, &SeededRng::new(seed));
            let out = propagate(&s, &cfg, &DriftState::still(), &ConnectorLosses::none()).unwrap();
            prop_assert!((out.total_power() - s.total_power()).abs() < 1e-12);
            prop_assert!(out.power.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn delays_ordered(len in 0.1f64..30.0) {
            let cfg = ChannelConfig::new(len, LaunchKind::Underfill, ChannelParams::default()).unwrap();
            let out = propagate(&ModePowerState::fundamental(8), &cfg, &DriftState::still(), &ConnectorLosses::none()).unwrap();
            prop_assert_eq!(out.delay_s[0], 0.0);
            prop_assert!(out.delay_s.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn collected_power_monotone_in_length(seed in 0u64..500, a in 0.1f64..20.0, b in 0.1f64..20.0) {
            let (short, long) = if a <= b { (a, b) } else { (b, a) };
            let p = ChannelParams::default();
            let s = launch(LaunchKind::Underfill, &p, &SeededRng::new(seed));
            let w = p.collection_weights(LaunchKind::Underfill);
            let run = |len: f64| {
                let cfg = ChannelConfig::with_spools(vec![len], LaunchKind::Underfill, p.clone()).unwrap();
                collected_power(&propagate(&s, &cfg, &DriftState::still(), &ConnectorLosses::none()).unwrap(), &w)
            };
            prop_assert!(run(long) <= run(short) * (1.0 + 1e-12));
        }

        #[test]
        fn adapter_phase_error_dominance(seed in 0u64..2000, len in 0.5f64..25.0) {
            let p = ChannelParams::default();
            let proto = ProtocolParams::default();
            let c = ConnectorLosses::draw(&p, &SeededRng::new(seed).substream("c"));
            let phase = |kind| {
                let cfg = ChannelConfig::new(len, kind, p.clone()).unwrap();
                let s = launch(kind, &p, &SeededRng::new(seed));
                error_contributions(&propagate(&s, &cfg, &DriftState::still(), &c).unwrap(), &cfg, &proto).phase
            };
            prop_assert!(phase(LaunchKind::Adapter) <= phase(LaunchKind::Underfill));
        }
    }
}
