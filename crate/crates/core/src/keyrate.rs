//! Asymptotic vacuum + weak-decoy key rate with biased basis choice.
//!
//! Key bits come from the Z basis; the single-photon phase error is bounded
//! from X-basis statistics.

use serde::{Deserialize, Serialize};

use crate::domain::{binary_entropy, IntensityProbs};
use crate::error::{ensure, Error, Result};

/// Fibre attenuation used to express distance as an ideal channel loss.
pub const IDEAL_DB_PER_KM: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateParams {
    pub f_ec: f64,
    /// Error rate of vacuum/dark events (e₀).
    pub vacuum_error: f64,
    pub pz_min: f64,
    pub pz_max: f64,
    pub pz_step: f64,
    /// Step and floor of the intensity-probability simplex grid.
    pub decoy_prob_step: f64,
    pub decoy_prob_min: f64,
}

impl Default for KeyRateParams {
    fn default() -> Self {
        Self { f_ec: 1.16, vacuum_error: 0.5, pz_min: 0.5, pz_max: 0.99, pz_step: 0.01, decoy_prob_step: 0.05, decoy_prob_min: 0.05 }
    }
}

impl KeyRateParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.f_ec >= 1.0 && self.f_ec.is_finite(), Error::Config, || format!("f_ec must be >= 1, got {}", self.f_ec))?;
        ensure((0.0..=1.0).contains(&self.vacuum_error), Error::Config, || "vacuum_error must lie in [0,1]".into())?;
        ensure(
            0.0 < self.pz_min && self.pz_min <= self.pz_max && self.pz_max < 1.0 && self.pz_step > 0.0,
            Error::Config,
            || "p_Z grid needs 0 < pz_min <= pz_max < 1 and pz_step > 0".into(),
        )?;
        ensure(
            self.decoy_prob_step > 0.0 && self.decoy_prob_min >= 0.0 && 3.0 * self.decoy_prob_min <= 1.0,
            Error::Config,
            || "decoy probability grid needs step > 0 and 0 <= min <= 1/3".into(),
        )
    }

    pub fn pz_grid(&self) -> Vec<f64> {
        let n = ((self.pz_max - self.pz_min) / self.pz_step + 1e-9).floor() as usize;
        (0..=n).map(|i| round9(self.pz_min + i as f64 * self.pz_step)).collect()
    }

    /// (p_signal, p_decoy, p_vacuum) on the simplex, each at least `decoy_prob_min`.
    pub fn decoy_grid(&self) -> Vec<IntensityProbs> {
        let n = (1.0 / self.decoy_prob_step + 1e-9).round() as i64;
        let min = (self.decoy_prob_min / self.decoy_prob_step - 1e-9).ceil() as i64;
        let mut out = Vec::new();
        for s in min..=n {
            for d in min..=(n - s) {
                let v = n - s - d;
                if v < min {
                    continue;
                }
                let f = |k: i64| round9(k as f64 / n as f64);
                out.push(IntensityProbs { signal: f(s), decoy: f(d), vacuum: f(v) });
            }
        }
        out
    }
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Gains (per pulse) and QBERs of one basis at the three intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisStats {
    pub q_mu: f64,
    pub e_mu: f64,
    pub q_nu: f64,
    pub e_nu: f64,
    pub y0: f64,
}

impl BasisStats {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("Q_mu", self.q_mu), ("E_mu", self.e_mu), ("Q_nu", self.q_nu), ("E_nu", self.e_nu), ("Y0", self.y0)] {
            ensure((0.0..=1.0).contains(&v), Error::Domain, || format!("{name} must lie in [0,1], got {v}"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateInputs {
    /// Z-basis statistics: sifted key and Y₁.
    pub key: BasisStats,
    /// X-basis statistics: phase-error estimate.
    pub test: BasisStats,
    pub mu: f64,
    pub nu: f64,
    pub e0: f64,
    pub f_ec: f64,
    pub p_z: f64,
    /// Fraction of pulses sent at the signal intensity.
    pub p_signal: f64,
    pub clock_hz: f64,
}

impl KeyRateInputs {
    /// Key and test statistics taken from the same data.
    pub fn symmetric(stats: BasisStats, mu: f64, nu: f64, p_z: f64, clock_hz: f64) -> Self {
        Self { key: stats, test: stats, mu, nu, e0: 0.5, f_ec: 1.16, p_z, p_signal: 1.0, clock_hz }
    }

    fn validate(&self) -> Result<()> {
        ensure(self.mu > self.nu && self.nu > 0.0, Error::Domain, || {
            format!("decoy bounds need mu > nu > 0, got mu={} nu={}", self.mu, self.nu)
        })?;
        self.key.validate()?;
        self.test.validate()?;
        for (name, v) in [("e0", self.e0), ("p_z", self.p_z), ("p_signal", self.p_signal)] {
            ensure((0.0..=1.0).contains(&v), Error::Domain, || format!("{name} must lie in [0,1], got {v}"))?;
        }
        ensure(self.clock_hz > 0.0 && self.f_ec > 0.0, Error::Domain, || "clock_hz and f_ec must be positive".into())
    }
}

pub fn y1_lower_bound(stats: &BasisStats, mu: f64, nu: f64) -> Result<f64> {
    ensure(mu > nu && nu > 0.0, Error::Domain, || format!("Y1 bound needs mu > nu > 0, got mu={mu} nu={nu}"))?;
    let bound = mu / (mu * nu - nu * nu)
        * (stats.q_nu * nu.exp() - stats.q_mu * mu.exp() * (nu * nu) / (mu * mu) - (mu * mu - nu * nu) / (mu * mu) * stats.y0);
    Ok(bound.max(0.0))
}

pub fn e1_upper_bound(stats: &BasisStats, nu: f64, e0: f64, y1: f64) -> Result<f64> {
    ensure(nu > 0.0, Error::Domain, || format!("e1 bound needs nu > 0, got {nu}"))?;
    if y1 <= 0.0 {
        return Err(Error::UndefinedBound("single-photon yield bound is zero".into()));
    }
    let bound = (stats.e_nu * stats.q_nu * nu.exp() - e0 * stats.y0) / (y1 * nu);
    Ok(bound.clamp(0.0, 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateBreakdown {
    pub y1: f64,
    pub e1: f64,
    pub q1: f64,
    /// Secure bits per second.
    pub rate: f64,
}

pub fn key_rate_breakdown(input: &KeyRateInputs) -> Result<KeyRateBreakdown> {
    input.validate()?;
    let y1 = y1_lower_bound(&input.key, input.mu, input.nu)?;
    let y1_test = y1_lower_bound(&input.test, input.mu, input.nu)?;
    let e1 = if y1_test > 0.0 { e1_upper_bound(&input.test, input.nu, input.e0, y1_test)? } else { 0.5 };
    let q1 = y1 * input.mu * (-input.mu).exp();
    let e_mu = input.key.e_mu.min(0.5);
    let per_pulse = q1 * (1.0 - binary_entropy(e1)?) - input.key.q_mu * input.f_ec * binary_entropy(e_mu)?;
    let rate = (input.p_z * input.p_z * input.p_signal * per_pulse * input.clock_hz).max(0.0);
    Ok(KeyRateBreakdown { y1, e1, q1, rate })
}

pub fn secure_key_rate(input: &KeyRateInputs) -> Result<f64> {
    Ok(key_rate_breakdown(input)?.rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptimum {
    pub p_z: f64,
    pub intensity_probs: IntensityProbs,
    pub breakdown: KeyRateBreakdown,
}

/// Grid search over p_Z and the intensity-probability simplex. Ties keep the
/// earliest grid point, i.e. the smallest p_Z.
pub fn optimize_protocol(key: BasisStats, test: BasisStats, mu: f64, nu: f64, clock_hz: f64, search: &KeyRateParams) -> Result<ProtocolOptimum> {
    search.validate()?;
    let mut best: Option<ProtocolOptimum> = None;
    let decoys = search.decoy_grid();
    ensure(!decoys.is_empty(), Error::Config, || "decoy probability grid is empty".into())?;
    for p_z in search.pz_grid() {
        for probs in &decoys {
            let input = KeyRateInputs { key, test, mu, nu, e0: search.vacuum_error, f_ec: search.f_ec, p_z, p_signal: probs.signal, clock_hz };
            let b = key_rate_breakdown(&input)?;
            if best.as_ref().is_none_or(|o| b.rate > o.breakdown.rate) {
                best = Some(ProtocolOptimum { p_z, intensity_probs: *probs, breakdown: b });
            }
        }
    }
    Ok(best.expect("grids are non-empty"))
}

pub fn equivalent_loss(distance_km: f64) -> Result<f64> {
    ensure(distance_km >= 0.0, Error::Domain, || format!("distance must be >= 0, got {distance_km}"))?;
    // rounded so that e.g. 3 km reads 0.9 dB rather than 0.8999999999999999
    Ok(((IDEAL_DB_PER_KM * distance_km) * 1e12).round() / 1e12)
}

/// Poissonian channel with known single-photon transmittance: an n-photon
/// pulse is detected with probability 1-(1-Y₀)(1-η)ⁿ, signal detections err
/// with probability `misalignment`, dark-only detections with `vacuum_error`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleChannel {
    pub transmittance: f64,
    pub dark_yield: f64,
    pub misalignment: f64,
    pub vacuum_error: f64,
}

impl OracleChannel {
    pub fn gain(&self, k: f64) -> f64 {
        1.0 - (1.0 - self.dark_yield) * (-self.transmittance * k).exp()
    }

    pub fn qber(&self, k: f64) -> f64 {
        let s = 1.0 - (-self.transmittance * k).exp();
        let eq = self.misalignment * s + self.vacuum_error * self.dark_yield * (1.0 - s);
        eq / self.gain(k)
    }

    pub fn single_photon_yield(&self) -> f64 {
        self.dark_yield + self.transmittance - self.dark_yield * self.transmittance
    }

    pub fn single_photon_error(&self) -> f64 {
        (self.misalignment * self.transmittance + self.vacuum_error * self.dark_yield * (1.0 - self.transmittance)) / self.single_photon_yield()
    }

    pub fn stats(&self, mu: f64, nu: f64) -> BasisStats {
        BasisStats { q_mu: self.gain(mu), e_mu: self.qber(mu), q_nu: self.gain(nu), e_nu: self.qber(nu), y0: self.dark_yield }
    }

    /// Channel reproducing a measured signal gain and QBER for a given dark yield.
    pub fn fit(q_mu: f64, e_mu: f64, mu: f64, dark_yield: f64, vacuum_error: f64) -> Result<Self> {
        ensure(mu > 0.0, Error::Domain, || "mu must be positive".into())?;
        ensure(q_mu > dark_yield && q_mu < 1.0 && dark_yield >= 0.0, Error::Domain, || {
            format!("need Y0 < Q_mu < 1 to fit a transmittance, got Q_mu={q_mu} Y0={dark_yield}")
        })?;
        ensure((0.0..=1.0).contains(&e_mu), Error::Domain, || format!("E_mu must lie in [0,1], got {e_mu}"))?;
        let transmittance = -((1.0 - q_mu) / (1.0 - dark_yield)).ln() / mu;
        let s = 1.0 - (-transmittance * mu).exp();
        let misalignment = ((e_mu * q_mu - vacuum_error * dark_yield * (1.0 - s)) / s).clamp(0.0, 1.0);
        Ok(Self { transmittance, dark_yield, misalignment, vacuum_error })
    }
}

/// Decoy statistics synthesised from signal-only data via the fitted oracle channel.
pub fn synthesize_decoy(q_mu: f64, e_mu: f64, y0: f64, mu: f64, nu: f64, vacuum_error: f64) -> Result<BasisStats> {
    let ch = OracleChannel::fit(q_mu, e_mu, mu, y0, vacuum_error)?;
    Ok(BasisStats { q_mu, e_mu, y0, q_nu: ch.gain(nu), e_nu: ch.qber(nu) })
}
