//! Data reduction: fold timetags into a pattern-periodic histogram, find the
//! pattern offset, gate every pulse to its central window and turn the gated
//! counts into QBER and gain.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::channel::LaunchKind;
use crate::domain::{Basis, IntensityClass, ProtocolParams, Symbol, SymbolPattern};
use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::receiver::{arrivals, DetectionRecord};

/// 64 bins per 1 ns symbol.
pub const DEFAULT_BIN_WIDTH_S: f64 = 15.625e-12;

const FOLD_CHUNK: usize = 1 << 16;

/// Bin content: integer counts or expected (mean) counts.
pub trait Count: Copy + Default + AddAssign + std::ops::Add<Output = Self> + PartialOrd + Send + Sync {
    fn to_f64(self) -> f64;
}

impl Count for u64 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Count for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramGrid<C = u64> {
    pub bin_width_s: f64,
    pub bins_per_symbol: usize,
    pub counts: Vec<C>,
    pub acquisition_s: f64,
}

/// Expected (mean) counts per bin.
pub type ExpectedHistogram = HistogramGrid<f64>;

impl<C: Copy + Default> HistogramGrid<C> {
    pub fn zeros(protocol: &ProtocolParams, bin_width_s: f64) -> Result<Self> {
        let bins_per_symbol = bins_per_symbol(protocol, bin_width_s)?;
        Ok(Self {
            bin_width_s,
            bins_per_symbol,
            counts: vec![C::default(); bins_per_symbol * protocol.pattern_len],
            acquisition_s: protocol.acquisition_s,
        })
    }

    pub fn pattern_len(&self) -> usize {
        self.counts.len() / self.bins_per_symbol
    }

    /// Rotate by whole symbols: bin `i` moves to `i + shift·bins_per_symbol`.
    pub fn rotated(&self, shift_symbols: usize) -> Self {
        let mut counts = self.counts.clone();
        let k = (shift_symbols % self.pattern_len()) * self.bins_per_symbol;
        counts.rotate_right(k);
        Self { counts, ..self.clone() }
    }
}

impl HistogramGrid<u64> {
    pub fn to_f64(&self) -> HistogramGrid<f64> {
        HistogramGrid { bin_width_s: self.bin_width_s, bins_per_symbol: self.bins_per_symbol, counts: self.counts.iter().map(|&c| c as f64).collect(), acquisition_s: self.acquisition_s }
    }
}

impl<C: Count> HistogramGrid<C> {
    pub fn total(&self) -> f64 {
        self.counts.iter().map(|c| c.to_f64()).sum()
    }
}

pub fn bins_per_symbol(protocol: &ProtocolParams, bin_width_s: f64) -> Result<usize> {
    ensure(bin_width_s > 0.0 && bin_width_s.is_finite(), Error::Config, || "bin width must be positive".into())?;
    let n = protocol.symbol_period_s() / bin_width_s;
    ensure((n - n.round()).abs() < 1e-6 && n.round() >= 1.0, Error::Config, || {
        format!("bin width {bin_width_s} s does not divide the symbol period {} s", protocol.symbol_period_s())
    })?;
    Ok(n.round() as usize)
}

pub fn build_histogram(records: &[DetectionRecord], protocol: &ProtocolParams, bin_width_s: f64, exec: Execution) -> Result<HistogramGrid> {
    let mut grid = HistogramGrid::<u64>::zeros(protocol, bin_width_s)?;
    let period_ps = protocol.pattern_period_s() * 1e12;
    let bin_ps = bin_width_s * 1e12;
    let nbins = grid.counts.len();
    let fold = |mut acc: Vec<u64>, chunk: &[DetectionRecord]| {
        for r in chunk {
            let t = (r.timetag_ps as f64).rem_euclid(period_ps);
            let b = ((t / bin_ps) as usize).min(nbins - 1);
            acc[b] += 1;
        }
        acc
    };
    let merge = |mut a: Vec<u64>, b: Vec<u64>| {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
        a
    };
    grid.counts = exec.fold_chunks(records, FOLD_CHUNK, || vec![0u64; nbins], fold, merge);
    Ok(grid)
}

/// Bin ranges `[start, end)` of the early and late gates within one symbol.
pub fn gate_bins(protocol: &ProtocolParams, bins_per_symbol: usize) -> [(usize, usize); 2] {
    let bin = protocol.symbol_period_s() / bins_per_symbol as f64;
    let edge = |t: f64| ((t / bin).round().max(0.0) as usize).min(bins_per_symbol);
    let gate = |k: f64| {
        let centre = (k + 0.5) * protocol.slot_s;
        (edge(centre - protocol.gate_s / 2.0), edge(centre + protocol.gate_s / 2.0))
    };
    [gate(0.0), gate(1.0)]
}

/// Gated (early, late) sums for every pattern position.
pub fn gate_sums<C: Count>(hist: &HistogramGrid<C>, protocol: &ProtocolParams) -> Vec<[C; 2]> {
    let bps = hist.bins_per_symbol;
    let gates = gate_bins(protocol, bps);
    hist.counts
        .chunks_exact(bps)
        .map(|sym| {
            let mut out = [C::default(); 2];
            for (o, &(a, b)) in out.iter_mut().zip(&gates) {
                for &c in &sym[a..b] {
                    *o += c;
                }
            }
            out
        })
        .collect()
}

/// Expected gated energy per pattern position for an ideal link.
pub fn alignment_template(pattern: &SymbolPattern, receiver: Basis, protocol: &ProtocolParams) -> Vec<[f64; 2]> {
    let l = pattern.len();
    let sym_s = protocol.symbol_period_s();
    let mut t = vec![[0.0; 2]; l];
    let mut buf = Vec::with_capacity(4);
    for (s, &symbol) in pattern.symbols().iter().enumerate() {
        buf.clear();
        arrivals(symbol, receiver, protocol.intensities.mean(symbol.class), 0.0, protocol.slot_s, &mut buf);
        for a in &buf {
            let carry = (a.offset_s / sym_s).floor();
            let within = a.offset_s - carry * sym_s;
            let g = if within < sym_s / 2.0 { 0 } else { 1 };
            t[(s + carry as usize) % l][g] += a.mean;
        }
    }
    t
}

/// Symbol offset that maximises the circular correlation of gated energy with
/// the pattern template; ties go to the smallest offset.
pub fn align_pattern<C: Count>(hist: &HistogramGrid<C>, pattern: &SymbolPattern, receiver: Basis, protocol: &ProtocolParams, exec: Execution) -> Result<usize> {
    let l = pattern.len();
    ensure(hist.pattern_len() == l, Error::Config, || {
        format!("histogram covers {} symbols, pattern has {l}", hist.pattern_len())
    })?;
    ensure(hist.total() > 0.0, Error::AlignmentImpossible, || "histogram is empty".into())?;
    let counts: Vec<[f64; 2]> = gate_sums(hist, protocol).iter().map(|s| [s[0].to_f64(), s[1].to_f64()]).collect();
    ensure(counts.iter().any(|s| s[0] + s[1] > 0.0), Error::AlignmentImpossible, || "no counts inside any gate".into())?;
    let template = alignment_template(pattern, receiver, protocol);
    let mean = [0, 1].map(|g| template.iter().map(|t| t[g]).sum::<f64>() / l as f64);
    let centred: Vec<[f64; 2]> = template.iter().map(|t| [t[0] - mean[0], t[1] - mean[1]]).collect();
    ensure(centred.iter().any(|c| c[0].abs() > 1e-12 || c[1].abs() > 1e-12), Error::AlignmentImpossible, || {
        "pattern template is flat".into()
    })?;
    let scores = exec.map_range(l, |o| {
        centred.iter().enumerate().map(|(s, t)| {
            let c = &counts[(s + o) % l];
            t[0] * c[0] + t[1] * c[1]
        }).sum::<f64>()
    });
    let mut best = 0;
    for (o, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = o;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tally<C = u64> {
    pub correct: C,
    pub incorrect: C,
}

impl<C: Copy + std::ops::Add<Output = C>> Tally<C> {
    pub fn total(&self) -> C {
        self.correct + self.incorrect
    }
}

/// Gated tallies split by intensity class (indexed by [`IntensityClass::index`]).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTally<C = u64> {
    pub by_class: [Tally<C>; 3],
}

impl<C: Copy + Default + AddAssign + std::ops::Add<Output = C>> ScoreTally<C> {
    pub fn class(&self, c: IntensityClass) -> Tally<C> {
        self.by_class[c.index()]
    }

    pub fn overall(&self) -> Tally<C> {
        let mut t = Tally::default();
        for c in &self.by_class {
            t.correct += c.correct;
            t.incorrect += c.incorrect;
        }
        t
    }
}

/// Where a matched-basis symbol's correct and incorrect clicks land: gate index (0 early, 1 late).
pub(crate) fn scoring_gates(symbol: Symbol, receiver: Basis) -> Option<(Option<usize>, Option<usize>)> {
    if symbol.basis != receiver {
        return None;
    }
    Some(match receiver {
        Basis::Z => {
            let right = symbol.bit as usize;
            (Some(right), Some(1 - right))
        }
        // the monitored port is constructive for bit 0
        Basis::X => {
            if symbol.bit {
                (None, Some(1))
            } else {
                (Some(1), None)
            }
        }
    })
}

pub fn gate_and_score<C: Count>(hist: &HistogramGrid<C>, pattern: &SymbolPattern, offset: usize, receiver: Basis, protocol: &ProtocolParams) -> Result<ScoreTally<C>> {
    let l = pattern.len();
    ensure(hist.pattern_len() == l, Error::Config, || {
        format!("histogram covers {} symbols, pattern has {l}", hist.pattern_len())
    })?;
    ensure(offset < l, Error::Domain, || format!("offset {offset} outside [0, {l})"))?;
    let sums = gate_sums(hist, protocol);
    let mut tally = ScoreTally::<C>::default();
    for (s, &symbol) in pattern.symbols().iter().enumerate() {
        let Some((right, wrong)) = scoring_gates(symbol, receiver) else { continue };
        let g = &sums[(s + offset) % l];
        let t = &mut tally.by_class[symbol.class.index()];
        if let Some(i) = right {
            t.correct += g[i];
        }
        if let Some(i) = wrong {
            t.incorrect += g[i];
        }
    }
    Ok(tally)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub qber: f64,
    /// Registered over sent photons; for a zero-intensity class, registered counts per sent pulse.
    pub gain: f64,
}

/// QBER and gain from gated counts of `sent_pulses` pulses at mean `mu`.
pub fn observables(correct: f64, incorrect: f64, sent_pulses: f64, mu: f64) -> Result<Observables> {
    ensure(correct >= 0.0 && incorrect >= 0.0, Error::Domain, || "counts must be non-negative".into())?;
    ensure(sent_pulses > 0.0 && mu >= 0.0, Error::Domain, || "need sent_pulses > 0 and mu >= 0".into())?;
    let total = correct + incorrect;
    if total <= 0.0 {
        return Err(Error::NoSignal);
    }
    let sent = if mu > 0.0 { mu * sent_pulses } else { sent_pulses };
    Ok(Observables { qber: incorrect / total, gain: total / sent })
}

/// QBER and gain over a whole acquisition (every pulse of the run counted as sent).
pub fn compute_observables(correct: u64, incorrect: u64, protocol: &ProtocolParams, mu: f64) -> Result<Observables> {
    observables(correct as f64, incorrect as f64, protocol.pulses_per_acquisition(), mu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkObservables {
    pub distance_km: f64,
    pub basis: Basis,
    pub launch: LaunchKind,
    pub intensity: IntensityClass,
    pub trial: usize,
    pub qber: f64,
    pub gain: f64,
    pub loss_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct CellKey(u64, Basis, LaunchKind, IntensityClass);

impl CellKey {
    fn of(o: &LinkObservables) -> Self {
        CellKey(o.distance_km.to_bits(), o.basis, o.launch, o.intensity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSdom {
    pub mean: f64,
    /// Sample standard deviation over sqrt(n).
    pub sdom: f64,
}

impl MeanSdom {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sdom = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Self { mean, sdom }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub distance_km: f64,
    pub basis: Basis,
    pub launch: LaunchKind,
    pub intensity: IntensityClass,
    pub trials: usize,
    pub qber: MeanSdom,
    pub gain: MeanSdom,
    pub loss_db: MeanSdom,
}

/// Per-cell statistics in first-appearance order, without a minimum trial count.
pub fn cell_stats(rows: &[LinkObservables]) -> Vec<CellStats> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut groups: BTreeMap<CellKey, Vec<&LinkObservables>> = BTreeMap::new();
    for r in rows {
        let k = CellKey::of(r);
        groups.entry(k).or_insert_with(|| {
            order.push(k);
            Vec::new()
        }).push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let col = |f: fn(&LinkObservables) -> f64| MeanSdom::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            CellStats {
                distance_km: g[0].distance_km,
                basis: k.1,
                launch: k.2,
                intensity: k.3,
                trials: g.len(),
                qber: col(|r| r.qber),
                gain: col(|r| r.gain),
                loss_db: col(|r| r.loss_db),
            }
        })
        .collect()
}

/// Mean and SDOM per (distance, basis, launch, intensity); every cell needs two or more trials.
pub fn aggregate_trials(rows: &[LinkObservables]) -> Result<Vec<CellStats>> {
    let stats = cell_stats(rows);
    if let Some(s) = stats.iter().find(|s| s.trials < 2) {
        return Err(Error::InsufficientData { needed: 2, got: s.trials });
    }
    Ok(stats)
}
