//! Weak-coherent-pulse source.
//!
//! Each 1 ns symbol holds two 500 ps sub-slots seeded by one master pulse, so
//! the pair shares a global phase while successive pairs are independent.
//! X symbols light both sub-slots at half intensity with Δφ ∈ {0, π}; Z symbols
//! put the whole intensity in the early (bit 0) or late (bit 1) sub-slot.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{Basis, IntensityClass, Intensities, Symbol, SymbolPattern};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeSlot {
    Early,
    Late,
}

impl TimeSlot {
    pub fn other(self) -> Self {
        match self {
            TimeSlot::Early => TimeSlot::Late,
            TimeSlot::Late => TimeSlot::Early,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmittedSymbol {
    pub index: u64,
    pub basis: Basis,
    pub bit: bool,
    pub class: IntensityClass,
    pub mean_photons: f64,
    /// 0 or π for X, `None` for Z.
    pub phase_difference: Option<f64>,
    pub global_phase: f64,
    /// Occupied sub-slot for Z, `None` for X.
    pub slot: Option<TimeSlot>,
}

impl EmittedSymbol {
    pub fn from_symbol(index: u64, symbol: Symbol, intensities: &Intensities, global_phase: f64) -> Self {
        let (phase_difference, slot) = match symbol.basis {
            Basis::X => (Some(if symbol.bit { std::f64::consts::PI } else { 0.0 }), None),
            Basis::Z => (None, Some(if symbol.bit { TimeSlot::Late } else { TimeSlot::Early })),
        };
        Self {
            index,
            basis: symbol.basis,
            bit: symbol.bit,
            class: symbol.class,
            mean_photons: intensities.mean(symbol.class),
            phase_difference,
            global_phase,
            slot,
        }
    }

    /// Mean photon number in the (early, late) sub-slots.
    pub fn sub_pulse_means(&self) -> [f64; 2] {
        match self.slot {
            None => [self.mean_photons / 2.0; 2],
            Some(TimeSlot::Early) => [self.mean_photons, 0.0],
            Some(TimeSlot::Late) => [0.0, self.mean_photons],
        }
    }
}

/// Infinite-period symbol stream starting at `first_index`.
pub struct Encoder<'a, R> {
    pattern: &'a SymbolPattern,
    intensities: Intensities,
    next: u64,
    end: u64,
    rng: R,
}

impl<R: Rng> Iterator for Encoder<'_, R> {
    type Item = EmittedSymbol;

    fn next(&mut self) -> Option<EmittedSymbol> {
        if self.next >= self.end {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let phase = self.rng.random::<f64>() * std::f64::consts::TAU;
        Some(EmittedSymbol::from_symbol(i, self.pattern.get(i as usize), &self.intensities, phase))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.end - self.next) as usize;
        (n, Some(n))
    }
}

/// Symbols `range.start..range.end` of the periodic stream; global phases come
/// from `rng`, so disjoint ranges can be generated independently.
pub fn encode<'a>(
    pattern: &'a SymbolPattern,
    intensities: &Intensities,
    range: std::ops::Range<u64>,
    rng: &SeededRng,
) -> Encoder<'a, rand_chacha::ChaCha8Rng> {
    Encoder { pattern, intensities: *intensities, next: range.start, end: range.end, rng: rng.rng() }
}

pub fn photon_number<R: Rng + ?Sized>(symbol: &EmittedSymbol, rng: &mut R) -> u64 {
    poisson(symbol.mean_photons, rng)
}

pub(crate) fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{random_pattern, IntensityProbs};

    fn pattern() -> SymbolPattern {
        random_pattern(1000, 0.5, &IntensityProbs::default(), &SeededRng::new(1)).unwrap()
    }

    #[test]
    fn encoding_table() {
        let i = Intensities::default();
        let x0 = EmittedSymbol::from_symbol(0, Symbol { bit: false, basis: Basis::X, class: IntensityClass::Signal }, &i, 0.0);
        assert_eq!(x0.phase_difference, Some(0.0));
        assert_eq!(x0.sub_pulse_means(), [0.2, 0.2]);
        let x1 = EmittedSymbol::from_symbol(0, Symbol { bit: true, basis: Basis::X, class: IntensityClass::Signal }, &i, 0.0);
        assert_eq!(x1.phase_difference, Some(std::f64::consts::PI));
        let z1 = EmittedSymbol::from_symbol(0, Symbol { bit: true, basis: Basis::Z, class: IntensityClass::Decoy }, &i, 0.0);
        assert_eq!(z1.slot, Some(TimeSlot::Late));
        assert_eq!(z1.sub_pulse_means(), [0.0, 0.1]);
        let z0 = EmittedSymbol::from_symbol(0, Symbol { bit: false, basis: Basis::Z, class: IntensityClass::Signal }, &i, 0.0);
        assert_eq!(z0.sub_pulse_means(), [0.4, 0.0]);
    }

    #[test]
    fn stream_follows_pattern_and_is_deterministic() {
        let p = pattern();
        let rng = SeededRng::new(2);
        let a: Vec<_> = encode(&p, &Intensities::default(), 0..2500, &rng).collect();
        let b: Vec<_> = encode(&p, &Intensities::default(), 0..2500, &rng).collect();
        assert_eq!(a, b);
        for s in &a {
            let sym = p.get(s.index as usize);
            assert_eq!((s.basis, s.bit, s.class), (sym.basis, sym.bit, sym.class));
            assert!((0.0..std::f64::consts::TAU).contains(&s.global_phase));
        }
    }

    #[test]
    fn global_phases_uncorrelated() {
        let p = pattern();
        let xs: Vec<f64> = encode(&p, &Intensities::default(), 0..200_001, &SeededRng::new(3)).map(|s| s.global_phase.cos()).collect();
        let n = (xs.len() - 1) as f64;
        let corr: f64 = xs.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / n;
        // E[cos a cos b] = 0, std of the estimate 0.5/sqrt(n)
        assert!(corr.abs() < 5.0 * 0.5 / n.sqrt(), "{corr}");
    }

    #[test]
    fn mean_photons_over_stream() {
        let sym = Symbol { bit: false, basis: Basis::Z, class: IntensityClass::Signal };
        let p = SymbolPattern::from_symbols(vec![sym]).unwrap();
        let mut r = SeededRng::new(4).rng();
        let total: u64 = encode(&p, &Intensities::default(), 0..1_000_000, &SeededRng::new(5)).map(|s| photon_number(&s, &mut r)).sum();
        let mean = total as f64 / 1e6;
        assert!((mean - 0.4).abs() < 0.002, "{mean}");
    }

    #[test]
    fn poisson_moments() {
        let mut r = SeededRng::new(6).rng();
        assert!((0..1000).all(|_| poisson(0.0, &mut r) == 0));
        let n = 10_000_000u64;
        let mut sum = 0u64;
        let mut nonzero = 0u64;
        for _ in 0..n {
            let k = poisson(0.4, &mut r);
            sum += k;
            nonzero += (k > 0) as u64;
        }
        assert!((sum as f64 / n as f64 - 0.4).abs() < 0.001);
        let oracle = 1.0 - (-0.4f64).exp();
        assert!((nonzero as f64 / n as f64 - oracle).abs() < 0.001);
        assert!((oracle - 0.3297).abs() < 1e-4);
    }
}
