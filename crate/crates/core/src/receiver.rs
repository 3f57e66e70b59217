//! Receiver optics and the SNSPD.
//!
//! The Z receiver sees the two sub-slots directly. The X receiver is an AMZI
//! whose long arm delays by one sub-slot, so each pulse pair leaves in three
//! slots: an early side slot, the interfered centre slot and a late side slot.
//! Only one output port is monitored.

use std::io::{self, BufRead, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Basis, Symbol};
use crate::error::{ensure, Error, Result};
use crate::transmitter::{poisson, EmittedSymbol, TimeSlot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    #[serde(rename = "detector_efficiency")]
    pub efficiency: f64,
    pub dark_count_rate_hz: f64,
    pub receiver_attenuation_db: f64,
    pub timetag_resolution_s: f64,
    pub dead_time_s: f64,
    pub jitter_s: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            efficiency: 0.5,
            dark_count_rate_hz: 10.0,
            receiver_attenuation_db: 3.0,
            timetag_resolution_s: 16e-12,
            dead_time_s: 50e-9,
            jitter_s: 30e-12,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        ensure((0.0..=1.0).contains(&self.efficiency), Error::Config, || {
            format!("detector_efficiency must lie in [0,1], got {}", self.efficiency)
        })?;
        for (name, v) in [
            ("dark_count_rate_hz", self.dark_count_rate_hz),
            ("receiver_attenuation_db", self.receiver_attenuation_db),
            ("dead_time_s", self.dead_time_s),
            ("jitter_s", self.jitter_s),
        ] {
            ensure(v.is_finite() && v >= 0.0, Error::Config, || format!("{name} must be >= 0, got {v}"))?;
        }
        ensure(self.timetag_resolution_s > 0.0, Error::Config, || "timetag_resolution_s must be positive".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverParams {
    #[serde(flatten)]
    pub detector: DetectorParams,
    /// Lumped fixed loss of the link not described by the fibre model (dB).
    pub excess_loss_db: f64,
    /// Insertion loss of the AMZI beyond its ideal splitting (dB).
    pub amzi_excess_loss_db: f64,
}

impl Default for ReceiverParams {
    fn default() -> Self {
        Self { detector: DetectorParams::default(), excess_loss_db: 17.86, amzi_excess_loss_db: 1.5 }
    }
}

impl ReceiverParams {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        ensure(self.excess_loss_db.is_finite() && self.amzi_excess_loss_db.is_finite() && self.amzi_excess_loss_db >= 0.0, Error::Config, || {
            "excess_loss_db and amzi_excess_loss_db must be finite (AMZI loss >= 0)".into()
        })
    }
}

/// How a click in a given position would be scored against its own symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Correct,
    Incorrect,
    /// Basis mismatch or AMZI side slot.
    Unscored,
}

/// Expected detected-photon mean arriving at `offset_s` after the symbol start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub offset_s: f64,
    pub mean: f64,
    pub role: Role,
}

/// Optical response of the `receiver` basis arm to one symbol.
///
/// `detected` is the symbol's mean photon number already multiplied by every
/// loss up to and including detector efficiency. `flip` is the wrong-slot
/// probability for Z and the wrong-port probability for X.
pub fn arrivals(symbol: Symbol, receiver: Basis, detected: f64, flip: f64, slot_s: f64, out: &mut Vec<Arrival>) {
    let t = |k: f64| (k + 0.5) * slot_s;
    match (receiver, symbol.basis) {
        (Basis::Z, Basis::Z) => {
            let (right, wrong) = if symbol.bit { (1.0, 0.0) } else { (0.0, 1.0) };
            out.push(Arrival { offset_s: t(right), mean: detected * (1.0 - flip), role: Role::Correct });
            out.push(Arrival { offset_s: t(wrong), mean: detected * flip, role: Role::Incorrect });
        }
        (Basis::Z, Basis::X) => {
            out.push(Arrival { offset_s: t(0.0), mean: detected / 2.0, role: Role::Unscored });
            out.push(Arrival { offset_s: t(1.0), mean: detected / 2.0, role: Role::Unscored });
        }
        (Basis::X, Basis::X) => {
            out.push(Arrival { offset_s: t(0.0), mean: detected / 8.0, role: Role::Unscored });
            let (mean, role) = if symbol.bit { (detected / 2.0 * flip, Role::Incorrect) } else { (detected / 2.0 * (1.0 - flip), Role::Correct) };
            out.push(Arrival { offset_s: t(1.0), mean, role });
            out.push(Arrival { offset_s: t(2.0), mean: detected / 8.0, role: Role::Unscored });
        }
        (Basis::X, Basis::Z) => {
            let k = if symbol.bit { 1.0 } else { 0.0 };
            out.push(Arrival { offset_s: t(k), mean: detected / 4.0, role: Role::Unscored });
            out.push(Arrival { offset_s: t(k + 1.0), mean: detected / 4.0, role: Role::Unscored });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AmziSlot {
    SideEarly,
    Centre,
    SideLate,
}

impl AmziSlot {
    /// Sub-slot index of the output, counted from the symbol's early sub-slot.
    pub fn position(self) -> u32 {
        match self {
            AmziSlot::SideEarly => 0,
            AmziSlot::Centre => 1,
            AmziSlot::SideLate => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AmziOutcome {
    pub slot: AmziSlot,
    /// Output port 0 is constructive for Δφ = 0 and is the monitored one.
    pub port: u8,
}

impl AmziOutcome {
    pub fn is_error(&self, symbol: &EmittedSymbol) -> bool {
        self.slot == AmziSlot::Centre && self.port != symbol.bit as u8
    }
}

/// Route one photon of an X symbol through the AMZI.
pub fn amzi_outcome<R: Rng + ?Sized>(symbol: &EmittedSymbol, phase_error_prob: f64, rng: &mut R) -> Result<AmziOutcome> {
    ensure(symbol.basis == Basis::X, Error::Contract, || "amzi_outcome needs an X-basis symbol".into())?;
    let u: f64 = rng.random();
    let slot = if u < 0.25 {
        AmziSlot::SideEarly
    } else if u < 0.75 {
        AmziSlot::Centre
    } else {
        AmziSlot::SideLate
    };
    let port = match slot {
        AmziSlot::Centre => {
            let right = symbol.bit as u8;
            if rng.random::<f64>() < phase_error_prob { 1 - right } else { right }
        }
        _ => rng.random::<bool>() as u8,
    };
    Ok(AmziOutcome { slot, port })
}

/// Route one photon of a Z symbol through the AMZI: arm and port are both fair coins.
pub fn amzi_unbalanced<R: Rng + ?Sized>(symbol: &EmittedSymbol, rng: &mut R) -> Result<AmziOutcome> {
    let slot = symbol.slot.ok_or_else(|| Error::Contract("amzi_unbalanced needs a Z-basis symbol".into()))?;
    let long = rng.random::<bool>();
    let slot = match (slot, long) {
        (TimeSlot::Early, false) => AmziSlot::SideEarly,
        (TimeSlot::Early, true) | (TimeSlot::Late, false) => AmziSlot::Centre,
        (TimeSlot::Late, true) => AmziSlot::SideLate,
    };
    Ok(AmziOutcome { slot, port: rng.random::<bool>() as u8 })
}

pub fn timing_misplacement<R: Rng + ?Sized>(symbol: &EmittedSymbol, timing_error_prob: f64, rng: &mut R) -> Result<TimeSlot> {
    let slot = symbol.slot.ok_or_else(|| Error::Contract("timing_misplacement needs a Z-basis symbol".into()))?;
    Ok(if rng.random::<f64>() < timing_error_prob { slot.other() } else { slot })
}

/// Probability of at least one click in a gate of `gate_s` for `mean` photons at the detector.
pub fn click_probability(mean: f64, params: &DetectorParams, gate_s: f64) -> f64 {
    1.0 - (-(params.efficiency * mean) - params.dark_count_rate_hz * gate_s).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Click {
    /// Timing jitter to add to the slot centre (s).
    pub jitter_s: f64,
    pub dark: bool,
}

pub fn detect<R: Rng + ?Sized>(mean: f64, params: &DetectorParams, gate_s: f64, rng: &mut R) -> Option<Click> {
    let photon = 1.0 - (-(params.efficiency * mean)).exp();
    let dark = 1.0 - (-params.dark_count_rate_hz * gate_s).exp();
    let u: f64 = rng.random();
    let kind = if u < photon {
        false
    } else if u < photon + (1.0 - photon) * dark {
        true
    } else {
        return None;
    };
    let jitter_s = if kind {
        rng.random_range(-gate_s / 2.0..gate_s / 2.0)
    } else {
        jitter(params.jitter_s, rng)
    };
    Some(Click { jitter_s, dark: kind })
}

pub(crate) fn jitter<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Dark,
    Photon { symbol: u64, role: Role },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub timetag_ps: u64,
    pub origin: Origin,
}

/// Quantise a time in seconds to the timetagger grid, in picoseconds.
pub fn quantize_ps(t_s: f64, resolution_s: f64) -> u64 {
    let res_ps = resolution_s * 1e12;
    ((t_s * 1e12 / res_ps).round() * res_ps).round().max(0.0) as u64
}

/// Uniform dark clicks over `[start_s, start_s + span_s)`.
pub fn dark_counts<R: Rng + ?Sized>(params: &DetectorParams, start_s: f64, span_s: f64, rng: &mut R) -> Vec<DetectionRecord> {
    let n = poisson(params.dark_count_rate_hz * span_s, rng);
    (0..n)
        .map(|_| DetectionRecord {
            timetag_ps: quantize_ps(start_s + rng.random::<f64>() * span_s, params.timetag_resolution_s),
            origin: Origin::Dark,
        })
        .collect()
}

/// Sort by timetag and drop clicks inside the non-paralysable dead time of the last kept click.
pub fn apply_dead_time(mut records: Vec<DetectionRecord>, dead_time_s: f64) -> Vec<DetectionRecord> {
    records.sort_by_key(|r| r.timetag_ps);
    let dead = (dead_time_s * 1e12).round() as u64;
    let mut last: Option<u64> = None;
    records.retain(|r| match last {
        Some(t) if r.timetag_ps < t + dead => false,
        _ => {
            last = Some(r.timetag_ps);
            true
        }
    });
    records
}

pub fn write_timetags_binary<W: Write>(mut w: W, records: &[DetectionRecord]) -> io::Result<()> {
    for r in records {
        w.write_all(&r.timetag_ps.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_timetags_binary<R: Read>(mut r: R) -> io::Result<Vec<u64>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % 8 != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "timetag dump length is not a multiple of 8"));
    }
    Ok(buf.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

pub fn write_timetags_csv<W: Write>(mut w: W, records: &[DetectionRecord]) -> io::Result<()> {
    writeln!(w, "timetag_ps")?;
    for r in records {
        writeln!(w, "{}", r.timetag_ps)?;
    }
    w.flush()
}

pub fn read_timetags_csv<R: BufRead>(r: R) -> io::Result<Vec<u64>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if i == 0 && line == "timetag_ps" || line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
