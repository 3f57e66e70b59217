//! Protocol-level vocabulary shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::SeededRng;

pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    /// Relative phase between the two sub-pulses of a pair.
    X,
    /// Early/late occupancy.
    Z,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::X, Basis::Z];

    pub fn as_str(self) -> &'static str {
        match self {
            Basis::X => "X",
            Basis::Z => "Z",
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "X" | "x" => Ok(Basis::X),
            "Z" | "z" => Ok(Basis::Z),
            other => Err(Error::Config(format!("unknown basis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityClass {
    Signal,
    Decoy,
    Vacuum,
}

impl IntensityClass {
    pub const ALL: [IntensityClass; 3] = [IntensityClass::Signal, IntensityClass::Decoy, IntensityClass::Vacuum];

    pub fn as_str(self) -> &'static str {
        match self {
            IntensityClass::Signal => "signal",
            IntensityClass::Decoy => "decoy",
            IntensityClass::Vacuum => "vacuum",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for IntensityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IntensityClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "signal" | "s" | "mu" => Ok(IntensityClass::Signal),
            "decoy" | "d" | "nu" => Ok(IntensityClass::Decoy),
            "vacuum" | "v" | "omega" => Ok(IntensityClass::Vacuum),
            other => Err(Error::Config(format!("unknown intensity class {other:?}"))),
        }
    }
}

/// Mean photon numbers per pulse pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    #[serde(rename = "mu_signal")]
    pub signal: f64,
    #[serde(rename = "mu_decoy")]
    pub decoy: f64,
    #[serde(rename = "mu_vacuum")]
    pub vacuum: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Self { signal: 0.4, decoy: 0.1, vacuum: 0.0 }
    }
}

impl Intensities {
    pub fn new(signal: f64, decoy: f64, vacuum: f64) -> Result<Self> {
        let v = Self { signal, decoy, vacuum };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.signal.is_finite() && self.signal > self.decoy && self.decoy > self.vacuum && self.vacuum >= 0.0,
            Error::Domain,
            || format!("intensities must satisfy signal > decoy > vacuum >= 0, got {self:?}"),
        )
    }

    pub fn mean(&self, class: IntensityClass) -> f64 {
        match class {
            IntensityClass::Signal => self.signal,
            IntensityClass::Decoy => self.decoy,
            IntensityClass::Vacuum => self.vacuum,
        }
    }
}

/// Sender's probabilities of choosing each intensity class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityProbs {
    #[serde(rename = "p_signal")]
    pub signal: f64,
    #[serde(rename = "p_decoy")]
    pub decoy: f64,
    #[serde(rename = "p_vacuum")]
    pub vacuum: f64,
}

impl Default for IntensityProbs {
    fn default() -> Self {
        Self { signal: 0.8, decoy: 0.15, vacuum: 0.05 }
    }
}

impl IntensityProbs {
    pub fn new(signal: f64, decoy: f64, vacuum: f64) -> Result<Self> {
        let v = Self { signal, decoy, vacuum };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.signal, self.decoy, self.vacuum];
        ensure(
            ps.iter().all(|p| (0.0..=1.0).contains(p)) && (ps.iter().sum::<f64>() - 1.0).abs() <= PROB_TOL,
            Error::Domain,
            || format!("intensity probabilities must lie in [0,1] and sum to 1, got {ps:?}"),
        )
    }

    pub fn get(&self, class: IntensityClass) -> f64 {
        match class {
            IntensityClass::Signal => self.signal,
            IntensityClass::Decoy => self.decoy,
            IntensityClass::Vacuum => self.vacuum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub clock_hz: f64,
    pub pattern_len: usize,
    pub acquisition_s: f64,
    /// p_Z of the sender's basis choice.
    pub basis_bias: f64,
    #[serde(flatten)]
    pub intensities: Intensities,
    #[serde(flatten)]
    pub intensity_probs: IntensityProbs,
    pub gate_s: f64,
    /// Separation of the two sub-pulses of a pair.
    pub slot_s: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            clock_hz: 1e9,
            pattern_len: 1000,
            acquisition_s: 10.0,
            basis_bias: 0.5,
            intensities: Intensities::default(),
            intensity_probs: IntensityProbs::default(),
            gate_s: 250e-12,
            slot_s: 500e-12,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.clock_hz.is_finite() && self.clock_hz > 0.0, Error::Config, || {
            format!("clock_hz must be positive, got {}", self.clock_hz)
        })?;
        ensure(self.pattern_len >= 1, Error::Config, || "pattern_len must be >= 1".into())?;
        ensure(self.acquisition_s.is_finite() && self.acquisition_s > 0.0, Error::Config, || {
            format!("acquisition_s must be positive, got {}", self.acquisition_s)
        })?;
        ensure((0.0..=1.0).contains(&self.basis_bias), Error::Domain, || {
            format!("basis_bias must lie in [0,1], got {}", self.basis_bias)
        })?;
        self.intensities.validate()?;
        self.intensity_probs.validate()?;
        ensure(self.gate_s > 0.0 && self.gate_s <= self.slot_s, Error::Config, || {
            format!("need 0 < gate_s <= slot_s, got gate {} slot {}", self.gate_s, self.slot_s)
        })?;
        ensure(2.0 * self.slot_s <= self.symbol_period_s() * (1.0 + 1e-12), Error::Config, || {
            "two sub-pulse slots must fit inside one symbol period".into()
        })
    }

    pub fn symbol_period_s(&self) -> f64 {
        1.0 / self.clock_hz
    }

    pub fn pattern_period_s(&self) -> f64 {
        self.pattern_len as f64 / self.clock_hz
    }

    pub fn pulses_per_acquisition(&self) -> f64 {
        self.clock_hz * self.acquisition_s
    }

    /// Number of times the pattern repeats during one acquisition.
    pub fn repetitions(&self) -> f64 {
        self.pulses_per_acquisition() / self.pattern_len as f64
    }
}

/// Shannon entropy of a Bernoulli(p) variable, in bits.
pub fn binary_entropy(p: f64) -> Result<f64> {
    ensure((0.0..=1.0).contains(&p), Error::Domain, || format!("binary_entropy needs p in [0,1], got {p}"))?;
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    Ok(-p * p.log2() - (1.0 - p) * (1.0 - p).log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Symbol {
    pub bit: bool,
    pub basis: Basis,
    pub class: IntensityClass,
}

/// A fixed random train, repeated every pattern period.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolPattern {
    symbols: Vec<Symbol>,
}

impl SymbolPattern {
    pub fn from_symbols(symbols: Vec<Symbol>) -> Result<Self> {
        ensure(!symbols.is_empty(), Error::Domain, || "pattern must hold at least one symbol".into())?;
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Symbol at position `i` modulo the pattern length.
    pub fn get(&self, i: usize) -> Symbol {
        self.symbols[i % self.symbols.len()]
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn count(&self, basis: Basis, class: IntensityClass) -> usize {
        self.symbols.iter().filter(|s| s.basis == basis && s.class == class).count()
    }
}

pub fn random_pattern(length: usize, basis_bias: f64, probs: &IntensityProbs, rng: &SeededRng) -> Result<SymbolPattern> {
    ensure(length >= 1, Error::Domain, || "pattern length must be >= 1".into())?;
    ensure((0.0..=1.0).contains(&basis_bias), Error::Domain, || {
        format!("basis_bias must lie in [0,1], got {basis_bias}")
    })?;
    probs.validate()?;
    let mut r = rng.rng();
    let symbols = (0..length)
        .map(|_| {
            let basis = if r.random::<f64>() < basis_bias { Basis::Z } else { Basis::X };
            let bit = r.random::<bool>();
            let u: f64 = r.random();
            let class = if u < probs.signal {
                IntensityClass::Signal
            } else if u < probs.signal + probs.decoy {
                IntensityClass::Decoy
            } else {
                IntensityClass::Vacuum
            };
            Symbol { bit, basis, class }
        })
        .collect();
    Ok(SymbolPattern { symbols })
}
