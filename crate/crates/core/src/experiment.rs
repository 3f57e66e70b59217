//! End-to-end experiments: distance sweeps with repeated trials, long
//! stability series under drift, and the key-rate table derived from
//! per-cell observables.

use serde::{Deserialize, Serialize};

use crate::analysis::{align_pattern, cell_stats, CellStats, LinkObservables, Observables};
use crate::channel::{advance_drift, DriftParams, DriftState, LaunchKind};
use crate::domain::{random_pattern, Basis, IntensityClass, SymbolPattern};
use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::keyrate::{equivalent_loss, optimize_protocol, synthesize_decoy, BasisStats};
use crate::rng::SeededRng;
use crate::sim::{acquire, class_observables, expected_tally, realize_link, score_histogram, Acquisition, Link, ModelParams, TrialDraws};

/// The fixed symbol train shared by every acquisition of a run.
pub fn run_pattern(model: &ModelParams, root: &SeededRng) -> Result<SymbolPattern> {
    let p = &model.protocol;
    random_pattern(p.pattern_len, p.basis_bias, &p.intensity_probs, &root.substream("qkd-domain/pattern"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub distances_km: Vec<f64>,
    pub launches: Vec<LaunchKind>,
    pub trials: usize,
    pub acquisition: Acquisition,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.distances_km.is_empty(), Error::Config, || "need at least one distance".into())?;
        ensure(self.distances_km.iter().all(|d| d.is_finite() && *d > 0.0), Error::Config, || {
            format!("distances must be positive, got {:?}", self.distances_km)
        })?;
        ensure(!self.launches.is_empty(), Error::Config, || "need at least one launch kind".into())?;
        ensure(self.trials >= 1, Error::Config, || "need at least one trial".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkrRow {
    pub distance_km: f64,
    pub launch: LaunchKind,
    pub equivalent_loss_db: f64,
    pub p_z: f64,
    pub p_signal: f64,
    pub p_decoy: f64,
    pub p_vacuum: f64,
    pub y1: f64,
    pub e1: f64,
    pub skr_bps: f64,
    /// Decoy statistics synthesised from signal data rather than measured.
    pub decoy_from_model: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub rows: Vec<LinkObservables>,
    pub skr: Vec<SkrRow>,
    /// Vacuum cells without a single gated count (reported with yield 0).
    pub empty_vacuum_cells: usize,
    /// Cells where the recovered pattern offset differs from the fibre delay.
    pub misaligned_cells: usize,
}

struct CellResult {
    rows: Vec<LinkObservables>,
    empty_vacuum: bool,
    misaligned: bool,
}

fn cell_rows(
    model: &ModelParams,
    distance_km: f64,
    launch: LaunchKind,
    basis: Basis,
    trial: usize,
    link: &Link,
    obs: [Result<Observables>; 3],
) -> Result<(Vec<LinkObservables>, bool)> {
    let mut empty_vacuum = false;
    let mut rows = Vec::with_capacity(3);
    for (class, o) in IntensityClass::ALL.into_iter().zip(obs) {
        let o = match (class, o) {
            (_, Ok(o)) => o,
            (IntensityClass::Vacuum, Err(Error::NoSignal)) => {
                empty_vacuum = true;
                Observables { qber: model.keyrate.vacuum_error, gain: 0.0 }
            }
            (_, Err(e)) => return Err(e),
        };
        rows.push(LinkObservables { distance_km, basis, launch, intensity: class, trial, qber: o.qber, gain: o.gain, loss_db: link.loss_db });
    }
    Ok((rows, empty_vacuum))
}

pub fn run_sweep(model: &ModelParams, spec: &SweepSpec, seed: u64, exec: Execution) -> Result<SweepOutput> {
    model.validate()?;
    spec.validate()?;
    let root = SeededRng::new(seed);
    let pattern = run_pattern(model, &root)?;
    let mut cells = Vec::new();
    for &d in &spec.distances_km {
        for &launch in &spec.launches {
            for basis in Basis::ALL {
                for trial in 0..spec.trials {
                    cells.push((d, launch, basis, trial));
                }
            }
        }
    }
    let results = exec.map(&cells, |&(d, launch, basis, trial)| -> Result<CellResult> {
        let draws = TrialDraws::draw(&model.channel, launch, trial as u64, &root);
        let link = realize_link(model, d, launch, &draws, &DriftState::still())?;
        let rng = root.substream("receiver/acquisition").substream(&format!("{d}/{launch}/{basis}")).indexed("trial", trial as u64);
        let (hist, acq) = acquire(model, &pattern, basis, &link, spec.acquisition, &rng, Execution::Sequential)?;
        let offset = align_pattern(&hist, &pattern, basis, &model.protocol, Execution::Sequential)?;
        let obs = score_histogram(model, &pattern, basis, &hist, offset, acq)?;
        let (rows, empty_vacuum) = cell_rows(model, d, launch, basis, trial, &link, obs)?;
        Ok(CellResult { rows, empty_vacuum, misaligned: offset != link.delay_symbols })
    });
    let mut out = SweepOutput { rows: Vec::new(), skr: Vec::new(), empty_vacuum_cells: 0, misaligned_cells: 0 };
    for r in results {
        let r = r?;
        out.rows.extend(r.rows);
        out.empty_vacuum_cells += r.empty_vacuum as usize;
        out.misaligned_cells += r.misaligned as usize;
    }
    out.skr = skr_table(&out.rows, model)?;
    Ok(out)
}

fn basis_stats(cells: &[&CellStats], basis: Basis, model: &ModelParams) -> Option<(BasisStats, bool)> {
    let find = |c: IntensityClass| cells.iter().find(|s| s.basis == basis && s.intensity == c);
    let mu = model.protocol.intensities.signal;
    let nu = model.protocol.intensities.decoy;
    let signal = find(IntensityClass::Signal)?;
    let y0 = find(IntensityClass::Vacuum).map_or(0.0, |v| v.gain.mean);
    let q_mu = mu * signal.gain.mean;
    let e_mu = signal.qber.mean;
    Some(match find(IntensityClass::Decoy) {
        Some(d) => (BasisStats { q_mu, e_mu, q_nu: nu * d.gain.mean, e_nu: d.qber.mean, y0 }, false),
        None => match synthesize_decoy(q_mu, e_mu, y0, mu, nu, model.keyrate.vacuum_error) {
            Ok(s) => (s, true),
            Err(_) => (BasisStats { q_mu, e_mu, q_nu: 0.0, e_nu: 0.5, y0 }, true),
        },
    })
}

/// Optimised secure key rate per (distance, launch), from trial-averaged observables.
/// Gains are photons registered per photon sent, so Q = µ·gain; vacuum rows carry Y₀ directly.
pub fn skr_table(rows: &[LinkObservables], model: &ModelParams) -> Result<Vec<SkrRow>> {
    let stats = cell_stats(rows);
    let mut keys: Vec<(u64, LaunchKind)> = Vec::new();
    for s in &stats {
        let k = (s.distance_km.to_bits(), s.launch);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mu = model.protocol.intensities.signal;
    let nu = model.protocol.intensities.decoy;
    keys.into_iter()
        .map(|(bits, launch)| {
            let distance_km = f64::from_bits(bits);
            let cells: Vec<&CellStats> = stats.iter().filter(|s| s.distance_km.to_bits() == bits && s.launch == launch).collect();
            let z = basis_stats(&cells, Basis::Z, model);
            let x = basis_stats(&cells, Basis::X, model);
            let ((key, kd), (test, td)) = match (z, x) {
                (Some(z), Some(x)) => (z, x),
                (Some(z), None) => (z, z),
                (None, Some(x)) => (x, x),
                (None, None) => {
                    return Err(Error::Config(format!("no signal-intensity rows at {distance_km} km, {launch}")));
                }
            };
            let opt = optimize_protocol(key, test, mu, nu, model.protocol.clock_hz, &model.keyrate)?;
            Ok(SkrRow {
                distance_km,
                launch,
                equivalent_loss_db: equivalent_loss(distance_km)?,
                p_z: opt.p_z,
                p_signal: opt.intensity_probs.signal,
                p_decoy: opt.intensity_probs.decoy,
                p_vacuum: opt.intensity_probs.vacuum,
                y1: opt.breakdown.y1,
                e1: opt.breakdown.e1,
                skr_bps: opt.breakdown.rate,
                decoy_from_model: kd || td,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySpec {
    pub distance_km: f64,
    pub launch: LaunchKind,
    pub duration_s: f64,
    pub step_s: f64,
    pub trial: u64,
    pub acquisition: Acquisition,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        Self { distance_km: 10.0, launch: LaunchKind::Underfill, duration_s: 6.0 * 3600.0, step_s: 10.0, trial: 0, acquisition: Acquisition::Analytic }
    }
}

impl StabilitySpec {
    pub fn steps(&self) -> usize {
        ((self.duration_s / self.step_s) + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.distance_km > 0.0, Error::Config, || "stability distance must be positive".into())?;
        ensure(self.step_s > 0.0 && self.duration_s >= self.step_s, Error::Config, || {
            format!("need step > 0 and duration >= step, got step {} duration {}", self.step_s, self.duration_s)
        })
    }
}

/// Drift state at every step start, `t = k·step`.
pub fn drift_trajectory(params: DriftParams, steps: usize, step_s: f64, root: &SeededRng) -> Result<Vec<DriftState>> {
    let mut r = root.substream("mmf-channel/drift").rng();
    let mut d = DriftState::new(params)?;
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        if k > 0 {
            d = advance_drift(&d, step_s, &mut r)?;
        }
        out.push(d);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    pub time_s: f64,
    pub basis: Basis,
    pub qber: f64,
    pub gain: f64,
    pub modulation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub basis: Basis,
    pub steps: usize,
    pub qber_mean: f64,
    pub qber_std: f64,
    pub qber_rel: f64,
    pub gain_mean: f64,
    pub gain_std: f64,
    pub gain_rel: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

pub fn series_stats(points: &[StabilityPoint], basis: Basis) -> SeriesStats {
    let sel: Vec<&StabilityPoint> = points.iter().filter(|p| p.basis == basis).collect();
    let (qm, qs) = mean_std(&sel.iter().map(|p| p.qber).collect::<Vec<_>>());
    let (gm, gs) = mean_std(&sel.iter().map(|p| p.gain).collect::<Vec<_>>());
    SeriesStats { basis, steps: sel.len(), qber_mean: qm, qber_std: qs, qber_rel: qs / qm, gain_mean: gm, gain_std: gs, gain_rel: gs / gm }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityOutput {
    pub points: Vec<StabilityPoint>,
    pub stats: Vec<SeriesStats>,
    /// Pattern offset found on the first acquisition of each basis (X, Z).
    pub offsets: [usize; 2],
}

/// QBER and gain of the signal class every step, aligned once on the first acquisition.
pub fn run_stability(model: &ModelParams, spec: &StabilitySpec, seed: u64, exec: Execution) -> Result<StabilityOutput> {
    model.validate()?;
    spec.validate()?;
    let root = SeededRng::new(seed);
    let pattern = run_pattern(model, &root)?;
    let draws = TrialDraws::draw(&model.channel, spec.launch, spec.trial, &root);
    let drifts = drift_trajectory(model.drift, spec.steps(), spec.step_s, &root)?;
    let acq_rng = |basis: Basis, k: usize| root.substream("receiver/stability").substream(basis.as_str()).indexed("step", k as u64);

    let mut offsets = [0usize; 2];
    for (i, basis) in Basis::ALL.into_iter().enumerate() {
        let link = realize_link(model, spec.distance_km, spec.launch, &draws, &drifts[0])?;
        let (hist, _) = acquire(model, &pattern, basis, &link, spec.acquisition, &acq_rng(basis, 0), exec)?;
        offsets[i] = align_pattern(&hist, &pattern, basis, &model.protocol, exec)?;
    }

    let jobs: Vec<(usize, Basis)> = (0..drifts.len()).flat_map(|k| Basis::ALL.map(|b| (k, b))).collect();
    let points = exec.map(&jobs, |&(k, basis)| -> Result<StabilityPoint> {
        let link = realize_link(model, spec.distance_km, spec.launch, &draws, &drifts[k])?;
        let (hist, acq) = acquire(model, &pattern, basis, &link, spec.acquisition, &acq_rng(basis, k), Execution::Sequential)?;
        let offset = offsets[if basis == Basis::X { 0 } else { 1 }];
        let [signal, _, _] = score_histogram(model, &pattern, basis, &hist, offset, acq)?;
        let o = signal?;
        Ok(StabilityPoint { time_s: k as f64 * spec.step_s, basis, qber: o.qber, gain: o.gain, modulation: drifts[k].modulation() })
    });
    let points = points.into_iter().collect::<Result<Vec<_>>>()?;
    let stats = Basis::ALL.map(|b| series_stats(&points, b)).to_vec();
    Ok(StabilityOutput { points, stats, offsets })
}

/// Noise-free signal-class observables of one link, via the closed-form tally.
pub fn expected_signal_observables(model: &ModelParams, pattern: &SymbolPattern, basis: Basis, link: &Link) -> Result<Observables> {
    let acq = model.protocol.acquisition_s;
    let t = expected_tally(model, pattern, basis, link, acq)?;
    let [signal, _, _] = class_observables(model, pattern, basis, &t, acq);
    signal
}
