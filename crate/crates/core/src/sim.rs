//! Acquisition: turn a realised link into a timetag histogram.
//!
//! Analytic mode computes the expected counts in every histogram bin and
//! draws one Poisson variate per bin. Event mode follows every emitted photon
//! through loss, the receiver optics and the detector. A closed-form expected
//! tally bypasses the histogram for fast calibration.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::analysis::{bins_per_symbol, Count, gate_and_score, gate_bins, scoring_gates, ExpectedHistogram, HistogramGrid, Observables, ScoreTally, Tally, DEFAULT_BIN_WIDTH_S};
use crate::channel::{
    collected_power, db_to_lin, error_contributions, launch, lin_to_db, propagate, ChannelConfig, ChannelParams, ConnectorLosses,
    DriftParams, DriftState, ErrorContributions, LaunchKind, ModePowerState,
};
use crate::domain::{Basis, IntensityClass, ProtocolParams, Symbol, SymbolPattern};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::keyrate::KeyRateParams;
use crate::receiver::{
    amzi_outcome, amzi_unbalanced, apply_dead_time, arrivals, dark_counts, jitter, quantize_ps, timing_misplacement, AmziSlot,
    Arrival, DetectionRecord, Origin, ReceiverParams, Role,
};
use crate::rng::SeededRng;
use crate::transmitter::{encode, photon_number, TimeSlot};

/// Group delay of the fibre, used only to place the pattern offset.
pub const FIBRE_DELAY_S_PER_KM: f64 = 1.468 / 299_792.458;

/// Symbols per event-mode work unit.
pub const EVENT_CHUNK: u64 = 1 << 20;

/// Every tunable number of the model, with a flat serialised form.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(flatten)]
    pub protocol: ProtocolParams,
    #[serde(flatten)]
    pub channel: ChannelParams,
    #[serde(flatten)]
    pub receiver: ReceiverParams,
    #[serde(flatten)]
    pub drift: DriftParams,
    #[serde(flatten)]
    pub keyrate: KeyRateParams,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.channel.validate()?;
        self.receiver.validate()?;
        self.drift.validate()?;
        self.keyrate.validate()
    }
}

/// Per-trial random draws: launch mode content and connector losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDraws {
    pub launch_state: ModePowerState,
    pub connectors: ConnectorLosses,
}

impl TrialDraws {
    /// Draws depend on the launch kind and trial index only, never on distance.
    pub fn draw(params: &ChannelParams, kind: LaunchKind, trial: u64, root: &SeededRng) -> Self {
        let launch_rng = root.substream("mmf-channel/launch").indexed(kind.as_str(), trial);
        let conn_rng = root.substream("mmf-channel/connectors").indexed(kind.as_str(), trial);
        Self { launch_state: launch(kind, params, &launch_rng), connectors: ConnectorLosses::draw(params, &conn_rng) }
    }
}

/// A channel realisation frozen for one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub distance_km: f64,
    pub launch: LaunchKind,
    pub state_out: ModePowerState,
    pub errors: ErrorContributions,
    pub z_flip: f64,
    /// Power coupled into the receiver's single-mode input.
    pub collected: f64,
    /// Photon survival probability up to the detector, per receiver basis (X, Z).
    pub optical: [f64; 2],
    pub detector_efficiency: f64,
    /// Measured channel loss (dB).
    pub loss_db: f64,
    pub delay_symbols: usize,
}

fn basis_idx(b: Basis) -> usize {
    match b {
        Basis::X => 0,
        Basis::Z => 1,
    }
}

impl Link {
    pub fn optical(&self, receiver: Basis) -> f64 {
        self.optical[basis_idx(receiver)]
    }

    /// Detected-photon mean per emitted photon, before the receiver's port/arm splitting.
    pub fn detected(&self, receiver: Basis) -> f64 {
        self.optical(receiver) * self.detector_efficiency
    }

    pub fn flip(&self, receiver: Basis) -> f64 {
        match receiver {
            Basis::X => self.errors.phase,
            Basis::Z => self.z_flip,
        }
    }
}

pub fn realize_link(model: &ModelParams, distance_km: f64, kind: LaunchKind, draws: &TrialDraws, drift: &DriftState) -> Result<Link> {
    let cfg = ChannelConfig::new(distance_km, kind, model.channel.clone())?;
    let state_out = propagate(&draws.launch_state, &cfg, drift, &draws.connectors)?;
    let errors = error_contributions(&state_out, &cfg, &model.protocol);
    let collected = collected_power(&state_out, &model.channel.collection_weights(kind));
    let rx = &model.receiver;
    let common = collected * db_to_lin(rx.detector.receiver_attenuation_db) * db_to_lin(rx.excess_loss_db);
    let period = model.protocol.pattern_len as f64;
    let delay = (distance_km * FIBRE_DELAY_S_PER_KM * model.protocol.clock_hz).round().rem_euclid(period) as usize;
    Ok(Link {
        distance_km,
        launch: kind,
        z_flip: errors.z_flip(model.channel.e_opt_z),
        errors,
        state_out,
        collected,
        optical: [common * db_to_lin(rx.amzi_excess_loss_db), common],
        detector_efficiency: rx.detector.efficiency,
        loss_db: if collected > 0.0 { lin_to_db(collected) } else { f64::INFINITY },
        delay_symbols: delay,
    })
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Fraction of a Gaussian click-time distribution centred at `centre` falling in `[lo, hi)`.
fn capture(centre: f64, lo: f64, hi: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if (lo..hi).contains(&centre) { 1.0 } else { 0.0 };
    }
    std_normal_cdf((hi - centre) / sigma) - std_normal_cdf((lo - centre) / sigma)
}

fn live_fraction(click_rate_hz: f64, dead_time_s: f64) -> f64 {
    1.0 / (1.0 + click_rate_hz * dead_time_s)
}

/// Expected counts per bin over `acquisition_s`.
pub fn expected_histogram(model: &ModelParams, pattern: &SymbolPattern, receiver: Basis, link: &Link, acquisition_s: f64) -> Result<ExpectedHistogram> {
    let proto = ProtocolParams { acquisition_s, ..model.protocol.clone() };
    let mut h = HistogramGrid::<f64>::zeros(&proto, DEFAULT_BIN_WIDTH_S)?;
    let l = pattern.len();
    let nbins = h.counts.len();
    let bin_s = h.bin_width_s;
    let sym_s = proto.symbol_period_s();
    let reps = proto.repetitions();
    let sigma = model.receiver.detector.jitter_s;
    let detected = link.detected(receiver);
    let flip = link.flip(receiver);

    let mut kernels: Vec<(f64, Vec<(isize, f64)>)> = Vec::new();
    let mut kernel_for = |frac: f64| -> Vec<(isize, f64)> {
        if let Some((_, k)) = kernels.iter().find(|(f, _)| (*f - frac).abs() < 1e-9) {
            return k.clone();
        }
        // frac is the arrival position within its bin, in bins
        let k = if sigma > 0.0 {
            let reach = (6.0 * sigma / bin_s).ceil() as isize + 1;
            (-reach..=reach)
                .map(|j| {
                    let lo = (j as f64 - frac) * bin_s;
                    (j, std_normal_cdf((lo + bin_s) / sigma) - std_normal_cdf(lo / sigma))
                })
                .filter(|(_, w)| *w > 0.0)
                .collect()
        } else {
            vec![(0, 1.0)]
        };
        kernels.push((frac, k.clone()));
        k
    };

    let mut buf: Vec<Arrival> = Vec::with_capacity(4);
    for (s, &symbol) in pattern.symbols().iter().enumerate() {
        buf.clear();
        arrivals(symbol, receiver, model.protocol.intensities.mean(symbol.class) * detected, flip, proto.slot_s, &mut buf);
        let start = ((s + link.delay_symbols) % l) as f64 * sym_s;
        for a in &buf {
            if a.mean <= 0.0 {
                continue;
            }
            let clicks = reps * -(-a.mean).exp_m1();
            let pos = (start + a.offset_s) / bin_s;
            let base = pos.floor();
            for (j, w) in kernel_for(pos - base) {
                let b = (base as isize + j).rem_euclid(nbins as isize) as usize;
                h.counts[b] += clicks * w;
            }
        }
    }
    let dark_per_bin = model.receiver.detector.dark_count_rate_hz * acquisition_s / nbins as f64;
    let total: f64 = h.counts.iter().sum::<f64>() + dark_per_bin * nbins as f64;
    let live = live_fraction(total / acquisition_s, model.receiver.detector.dead_time_s);
    for c in h.counts.iter_mut() {
        *c = (*c + dark_per_bin) * live;
    }
    Ok(h)
}

/// Distinct matched/unmatched symbol kinds with their multiplicities.
fn symbol_census(pattern: &SymbolPattern) -> Vec<(Symbol, usize)> {
    let mut census: Vec<(Symbol, usize)> = Vec::with_capacity(12);
    for &s in pattern.symbols() {
        match census.iter_mut().find(|(k, _)| *k == s) {
            Some((_, n)) => *n += 1,
            None => census.push((s, 1)),
        }
    }
    census
}

/// Closed-form expected gated tally; agrees with gating [`expected_histogram`]
/// up to jitter tails reaching a neighbouring gate.
pub fn expected_tally(model: &ModelParams, pattern: &SymbolPattern, receiver: Basis, link: &Link, acquisition_s: f64) -> Result<ScoreTally<f64>> {
    let proto = ProtocolParams { acquisition_s, ..model.protocol.clone() };
    let det = &model.receiver.detector;
    let bps = bins_per_symbol(&proto, DEFAULT_BIN_WIDTH_S)?;
    let bin_s = proto.symbol_period_s() / bps as f64;
    let gates = gate_bins(&proto, bps).map(|(a, b)| (a as f64 * bin_s, b as f64 * bin_s));
    let gate_len = [gates[0].1 - gates[0].0, gates[1].1 - gates[1].0];
    let reps = proto.repetitions();
    let detected = link.detected(receiver);
    let flip = link.flip(receiver);

    let mut tally = ScoreTally::<f64>::default();
    let mut total_clicks = det.dark_count_rate_hz * acquisition_s;
    let mut buf = Vec::with_capacity(4);
    for (symbol, n) in symbol_census(pattern) {
        buf.clear();
        arrivals(symbol, receiver, model.protocol.intensities.mean(symbol.class) * detected, flip, proto.slot_s, &mut buf);
        let n = n as f64;
        let gates_of = scoring_gates(symbol, receiver);
        let t = &mut tally.by_class[symbol.class.index()];
        for a in &buf {
            let clicks = n * reps * -(-a.mean).exp_m1();
            total_clicks += clicks;
            let gate = match (a.role, gates_of) {
                (Role::Correct, Some((Some(g), _))) | (Role::Incorrect, Some((_, Some(g)))) => g,
                _ => continue,
            };
            let c = capture(a.offset_s, gates[gate].0, gates[gate].1, det.jitter_s);
            match a.role {
                Role::Correct => t.correct += clicks * c,
                _ => t.incorrect += clicks * c,
            }
        }
        if let Some((right, wrong)) = gates_of {
            let dark = |g: usize| n * reps * det.dark_count_rate_hz * gate_len[g];
            if let Some(g) = right {
                t.correct += dark(g);
            }
            if let Some(g) = wrong {
                t.incorrect += dark(g);
            }
        }
    }
    let live = live_fraction(total_clicks / acquisition_s, det.dead_time_s);
    for t in tally.by_class.iter_mut() {
        t.correct *= live;
        t.incorrect *= live;
    }
    Ok(tally)
}

/// One Poisson draw per bin.
pub fn sample_histogram(expected: &ExpectedHistogram, rng: &SeededRng) -> HistogramGrid {
    let mut r = rng.rng();
    let counts = expected
        .counts
        .iter()
        .map(|&m| if m > 0.0 { Poisson::new(m).expect("finite positive mean").sample(&mut r) as u64 } else { 0 })
        .collect();
    HistogramGrid { bin_width_s: expected.bin_width_s, bins_per_symbol: expected.bins_per_symbol, counts, acquisition_s: expected.acquisition_s }
}

/// Per-photon simulation of `n_symbols` symbols; records are time-ordered and dead-time filtered.
pub fn simulate_events(
    model: &ModelParams,
    pattern: &SymbolPattern,
    receiver: Basis,
    link: &Link,
    n_symbols: u64,
    rng: &SeededRng,
    exec: Execution,
) -> Result<Vec<DetectionRecord>> {
    let proto = &model.protocol;
    let det = &model.receiver.detector;
    let sym_s = proto.symbol_period_s();
    let optical = link.optical(receiver);
    let flip = link.flip(receiver);
    let chunks = n_symbols.div_ceil(EVENT_CHUNK) as usize;

    let run_chunk = |c: usize| -> Result<Vec<DetectionRecord>> {
        let start = c as u64 * EVENT_CHUNK;
        let end = (start + EVENT_CHUNK).min(n_symbols);
        let mut r = rng.indexed("receiver/events", c as u64).rng();
        let phases = rng.indexed("transmitter/global-phase", c as u64);
        let mut out = Vec::new();
        for sym in encode(pattern, &proto.intensities, start..end, &phases) {
            let n = photon_number(&sym, &mut r);
            for _ in 0..n {
                if r.random::<f64>() >= optical {
                    continue;
                }
                let (pos, role) = match (receiver, sym.basis) {
                    (Basis::Z, Basis::Z) => {
                        let slot = timing_misplacement(&sym, flip, &mut r)?;
                        let role = if Some(slot) == sym.slot { Role::Correct } else { Role::Incorrect };
                        (if slot == TimeSlot::Early { 0 } else { 1 }, role)
                    }
                    (Basis::Z, Basis::X) => (r.random::<bool>() as u32, Role::Unscored),
                    (Basis::X, Basis::X) => {
                        let o = amzi_outcome(&sym, flip, &mut r)?;
                        if o.port != 0 {
                            continue;
                        }
                        let role = match (o.slot, sym.bit) {
                            (AmziSlot::Centre, false) => Role::Correct,
                            (AmziSlot::Centre, true) => Role::Incorrect,
                            _ => Role::Unscored,
                        };
                        (o.slot.position(), role)
                    }
                    (Basis::X, Basis::Z) => {
                        let o = amzi_unbalanced(&sym, &mut r)?;
                        if o.port != 0 {
                            continue;
                        }
                        (o.slot.position(), Role::Unscored)
                    }
                };
                if r.random::<f64>() >= det.efficiency {
                    continue;
                }
                let t = (sym.index + link.delay_symbols as u64) as f64 * sym_s + (pos as f64 + 0.5) * proto.slot_s + jitter(det.jitter_s, &mut r);
                out.push(DetectionRecord {
                    timetag_ps: quantize_ps(t, det.timetag_resolution_s),
                    origin: Origin::Photon { symbol: sym.index, role },
                });
            }
        }
        let span_start = (start + link.delay_symbols as u64) as f64 * sym_s;
        out.extend(dark_counts(det, span_start, (end - start) as f64 * sym_s, &mut r));
        Ok(out)
    };

    let parts = exec.map_range(chunks, run_chunk);
    let mut all = Vec::new();
    for p in parts {
        all.extend(p?);
    }
    Ok(apply_dead_time(all, det.dead_time_s))
}

/// Per-class observables from a gated tally.
pub fn class_observables<C: Count>(model: &ModelParams, pattern: &SymbolPattern, receiver: Basis, tally: &ScoreTally<C>, acquisition_s: f64) -> [Result<Observables>; 3] {
    let reps = model.protocol.clock_hz * acquisition_s / pattern.len() as f64;
    IntensityClass::ALL.map(|class| {
        let t: Tally<C> = tally.by_class[class.index()];
        let sent = pattern.count(receiver, class) as f64 * reps;
        if sent <= 0.0 {
            return Err(Error::NoSignal);
        }
        crate::analysis::observables(t.correct.to_f64(), t.incorrect.to_f64(), sent, model.protocol.intensities.mean(class))
    })
}

/// Truth-label tally of event-mode records, bypassing timetags.
pub fn truth_tally(records: &[DetectionRecord], pattern: &SymbolPattern) -> ScoreTally<u64> {
    let mut t = ScoreTally::<u64>::default();
    for r in records {
        if let Origin::Photon { symbol, role } = r.origin {
            let class = pattern.get(symbol as usize).class;
            match role {
                Role::Correct => t.by_class[class.index()].correct += 1,
                Role::Incorrect => t.by_class[class.index()].incorrect += 1,
                Role::Unscored => {}
            }
        }
    }
    t
}

/// How an acquisition is simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Acquisition {
    /// Expected counts per bin, one Poisson draw per bin.
    Analytic,
    /// Expected counts per bin without sampling noise.
    Expected,
    /// Per-photon simulation of the given number of symbols.
    Event { symbols: u64 },
}

/// Histogram of one acquisition through a frozen link.
pub fn acquire(
    model: &ModelParams,
    pattern: &SymbolPattern,
    receiver: Basis,
    link: &Link,
    mode: Acquisition,
    rng: &SeededRng,
    exec: Execution,
) -> Result<(HistogramGrid<f64>, f64)> {
    match mode {
        Acquisition::Analytic => {
            let e = expected_histogram(model, pattern, receiver, link, model.protocol.acquisition_s)?;
            let s = sample_histogram(&e, rng);
            Ok((s.to_f64(), model.protocol.acquisition_s))
        }
        Acquisition::Expected => Ok((expected_histogram(model, pattern, receiver, link, model.protocol.acquisition_s)?, model.protocol.acquisition_s)),
        Acquisition::Event { symbols } => {
            let l = pattern.len() as u64;
            let symbols = symbols.div_ceil(l) * l;
            let acq = symbols as f64 / model.protocol.clock_hz;
            let recs = simulate_events(model, pattern, receiver, link, symbols, rng, exec)?;
            let proto = ProtocolParams { acquisition_s: acq, ..model.protocol.clone() };
            let h = crate::analysis::build_histogram(&recs, &proto, DEFAULT_BIN_WIDTH_S, exec)?;
            Ok((h.to_f64(), acq))
        }
    }
}

/// Gate a histogram at a known offset and reduce every class to observables.
pub fn score_histogram(model: &ModelParams, pattern: &SymbolPattern, receiver: Basis, hist: &HistogramGrid<f64>, offset: usize, acquisition_s: f64) -> Result<[Result<Observables>; 3]> {
    let tally = gate_and_score(hist, pattern, offset, receiver, &model.protocol)?;
    Ok(class_observables(model, pattern, receiver, &tally, acquisition_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{align_pattern, build_histogram};
    use crate::domain::random_pattern;

    fn setup(distance: f64, kind: LaunchKind) -> (ModelParams, SymbolPattern, Link) {
        let model = ModelParams::default();
        let root = SeededRng::new(5);
        let pattern = random_pattern(1000, 0.5, &model.protocol.intensity_probs, &root.substream("pattern")).unwrap();
        let draws = TrialDraws::draw(&model.channel, kind, 0, &root);
        let link = realize_link(&model, distance, kind, &draws, &DriftState::still()).unwrap();
        (model, pattern, link)
    }

    #[test]
    fn closed_form_matches_expected_histogram() {
        for (d, kind) in [(1.0, LaunchKind::Adapter), (10.0, LaunchKind::Underfill), (17.0, LaunchKind::Underfill)] {
            let (model, pattern, link) = setup(d, kind);
            for basis in Basis::ALL {
                let h = expected_histogram(&model, &pattern, basis, &link, 10.0).unwrap();
                let via_hist = gate_and_score(&h, &pattern, link.delay_symbols, basis, &model.protocol).unwrap();
                let closed = expected_tally(&model, &pattern, basis, &link, 10.0).unwrap();
                for c in IntensityClass::ALL {
                    let (a, b) = (via_hist.class(c), closed.class(c));
                    assert!((a.correct - b.correct).abs() <= 1e-9 * b.correct.max(1.0), "{d} {basis} {c} {a:?} {b:?}");
                    assert!((a.incorrect - b.incorrect).abs() <= 1e-9 * b.incorrect.max(1.0) + 1e-9, "{d} {basis} {c} {a:?} {b:?}");
                }
            }
        }
    }

    #[test]
    fn analytic_alignment_finds_fibre_delay() {
        let (model, pattern, link) = setup(7.0, LaunchKind::Underfill);
        assert_ne!(link.delay_symbols, 0);
        for basis in Basis::ALL {
            let e = expected_histogram(&model, &pattern, basis, &link, 10.0).unwrap();
            let h = sample_histogram(&e, &SeededRng::new(1));
            assert_eq!(align_pattern(&h, &pattern, basis, &model.protocol, Execution::Parallel).unwrap(), link.delay_symbols);
        }
    }

    #[test]
    fn lossless_link_is_intrinsic_error_limited() {
        let mut model = ModelParams::default();
        model.receiver.detector.dark_count_rate_hz = 0.0;
        model.receiver.detector.dead_time_s = 0.0;
        model.receiver.excess_loss_db = 0.0;
        model.channel.coupling_per_km = 0.0;
        let pattern = random_pattern(1000, 0.5, &model.protocol.intensity_probs, &SeededRng::new(1)).unwrap();
        let fundamental = TrialDraws { launch_state: ModePowerState::fundamental(8), connectors: ConnectorLosses::none() };
        let link = realize_link(&model, 1.0, LaunchKind::Underfill, &fundamental, &DriftState::still()).unwrap();
        assert_eq!(link.errors.timing, 0.0);
        let p = |m: f64| -(-m).exp_m1();
        let sig = |basis: Basis, bit: bool| {
            pattern.symbols().iter().filter(|s| s.basis == basis && s.bit == bit && s.class == IntensityClass::Signal).count() as f64
        };
        let m = 0.4 * link.detected(Basis::Z);
        let e = model.channel.e_opt_z;
        let z = expected_tally(&model, &pattern, Basis::Z, &link, 10.0).unwrap().class(IntensityClass::Signal);
        let oracle = p(m * e) / (p(m * e) + p(m * (1.0 - e)));
        assert!((z.incorrect / z.total() - oracle).abs() < 1e-12);
        let m = 0.4 * link.detected(Basis::X) / 2.0;
        let e = model.channel.e_opt_x;
        let x = expected_tally(&model, &pattern, Basis::X, &link, 10.0).unwrap().class(IntensityClass::Signal);
        let (n0, n1) = (sig(Basis::X, false), sig(Basis::X, true));
        let oracle = n1 * p(m * e) / (n1 * p(m * e) + n0 * p(m * (1.0 - e)));
        assert!((x.incorrect / x.total() - oracle).abs() < 1e-12);
    }

    #[test]
    fn event_mode_is_deterministic_across_execution() {
        let (model, pattern, link) = setup(2.0, LaunchKind::Underfill);
        let rng = SeededRng::new(77);
        let a = simulate_events(&model, &pattern, Basis::X, &link, 3 * EVENT_CHUNK / 2, &rng, Execution::Sequential).unwrap();
        let b = simulate_events(&model, &pattern, Basis::X, &link, 3 * EVENT_CHUNK / 2, &rng, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[1].timetag_ps >= w[0].timetag_ps + 50_000));
        let h = build_histogram(&a, &model.protocol, DEFAULT_BIN_WIDTH_S, Execution::Parallel).unwrap();
        assert_eq!(h.total() as usize, a.len());
    }

    #[test]
    fn draws_do_not_depend_on_distance() {
        let model = ModelParams::default();
        let root = SeededRng::new(3);
        let a = TrialDraws::draw(&model.channel, LaunchKind::Underfill, 2, &root);
        let b = TrialDraws::draw(&model.channel, LaunchKind::Underfill, 2, &root);
        assert_eq!(a, b);
        assert_ne!(a, TrialDraws::draw(&model.channel, LaunchKind::Underfill, 3, &root));
    }
}
