//! Fits the free model knobs to a handful of measured anchor values by
//! coordinate descent, using noise-free expected observables.

use serde::{Deserialize, Serialize};

use crate::analysis::Observables;
use crate::channel::{DriftState, LaunchKind};
use crate::domain::{Basis, SymbolPattern};
use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::experiment::{drift_trajectory, expected_signal_observables, run_pattern, StabilitySpec};
use crate::rng::SeededRng;
use crate::sim::{realize_link, ModelParams, TrialDraws};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    /// Trial-mean signal gain of a static link.
    Gain { distance_km: f64, launch: LaunchKind, basis: Basis },
    /// Trial-mean signal QBER of a static link.
    Qber { distance_km: f64, launch: LaunchKind, basis: Basis },
    /// Sample std of QBER over the stability trajectory.
    QberStd { basis: Basis },
    /// Sample std of gain over the stability trajectory, relative to its mean.
    GainRelStd { basis: Basis },
}

impl Observable {
    fn needs_stability(&self) -> bool {
        matches!(self, Observable::QberStd { .. } | Observable::GainRelStd { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub observable: Observable,
    pub target: f64,
}

/// Measured reference values: gain at 5 km, mean QBERs at 10 km, and the 10 km stability statistics.
pub fn default_anchors() -> Vec<Anchor> {
    use Basis::{X, Z};
    use LaunchKind::Underfill;
    let a = |observable, target| Anchor { observable, target };
    vec![
        a(Observable::Gain { distance_km: 5.0, launch: Underfill, basis: X }, 4e-4),
        a(Observable::Qber { distance_km: 10.0, launch: Underfill, basis: X }, 0.038),
        a(Observable::Qber { distance_km: 10.0, launch: Underfill, basis: Z }, 0.005),
        a(Observable::QberStd { basis: X }, 0.0049),
        a(Observable::QberStd { basis: Z }, 0.0011),
        a(Observable::GainRelStd { basis: X }, 0.065),
        a(Observable::GainRelStd { basis: Z }, 0.065),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    ExcessLoss,
    PhaseCoeff,
    TimingCoeff,
    Coupling,
    DriftAmplitude,
}

impl Knob {
    pub const ALL: [Knob; 5] = [Knob::ExcessLoss, Knob::PhaseCoeff, Knob::TimingCoeff, Knob::Coupling, Knob::DriftAmplitude];

    pub fn get(self, m: &ModelParams) -> f64 {
        match self {
            Knob::ExcessLoss => m.receiver.excess_loss_db,
            Knob::PhaseCoeff => m.channel.phase_error_coeff,
            Knob::TimingCoeff => m.channel.timing_error_coeff,
            Knob::Coupling => m.channel.coupling_per_km,
            Knob::DriftAmplitude => m.drift.amplitude,
        }
    }

    pub fn set(self, m: &mut ModelParams, v: f64) {
        match self {
            Knob::ExcessLoss => m.receiver.excess_loss_db = v,
            Knob::PhaseCoeff => m.channel.phase_error_coeff = v,
            Knob::TimingCoeff => m.channel.timing_error_coeff = v,
            Knob::Coupling => m.channel.coupling_per_km = v,
            Knob::DriftAmplitude => m.drift.amplitude = v,
        }
    }

    /// Loss moves additively in dB, everything else multiplicatively.
    fn apply(self, base: f64, u: f64) -> f64 {
        match self {
            Knob::ExcessLoss => base + u,
            _ => base * u.exp(),
        }
    }

    fn half_width(self) -> f64 {
        match self {
            Knob::ExcessLoss => 3.0,
            _ => std::f64::consts::LN_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub anchors: Vec<Anchor>,
    pub knobs: Vec<Knob>,
    /// Trials averaged for the static anchors.
    pub trials: usize,
    pub stability: StabilitySpec,
    /// Use every n-th step of the stability trajectory.
    pub stability_stride: usize,
    pub max_sweeps: usize,
    /// Stop once a sweep improves the objective by less than this fraction.
    pub tolerance: f64,
    pub line_iterations: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            anchors: default_anchors(),
            knobs: Knob::ALL.to_vec(),
            trials: 5,
            stability: StabilitySpec::default(),
            stability_stride: 3,
            max_sweeps: 40,
            tolerance: 1e-3,
            line_iterations: 24,
        }
    }
}

impl CalibrationSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.anchors.is_empty(), Error::Config, || "no calibration anchors".into())?;
        ensure(self.anchors.iter().all(|a| a.target.is_finite() && a.target > 0.0), Error::Config, || {
            "anchor targets must be positive".into()
        })?;
        ensure(self.trials >= 1 && self.stability_stride >= 1 && self.max_sweeps >= 1, Error::Config, || {
            "trials, stability_stride and max_sweeps must be >= 1".into()
        })?;
        self.stability.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub anchor: Anchor,
    pub model: f64,
    /// (model - target) / target
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub params: ModelParams,
    pub residuals: Vec<Residual>,
    pub objective: f64,
    pub sweeps: usize,
    pub converged: bool,
}

struct Evaluator<'a> {
    spec: &'a CalibrationSpec,
    root: SeededRng,
    pattern: SymbolPattern,
    exec: Execution,
}

impl Evaluator<'_> {
    fn static_mean(&self, m: &ModelParams, d: f64, launch: LaunchKind, basis: Basis) -> Result<Observables> {
        let mut acc = Observables { qber: 0.0, gain: 0.0 };
        for t in 0..self.spec.trials {
            let draws = TrialDraws::draw(&m.channel, launch, t as u64, &self.root);
            let link = realize_link(m, d, launch, &draws, &DriftState::still())?;
            let o = expected_signal_observables(m, &self.pattern, basis, &link)?;
            acc.qber += o.qber;
            acc.gain += o.gain;
        }
        let n = self.spec.trials as f64;
        Ok(Observables { qber: acc.qber / n, gain: acc.gain / n })
    }

    /// (qber std, gain relative std) per basis, X then Z.
    fn stability(&self, m: &ModelParams) -> Result<[(f64, f64); 2]> {
        let s = &self.spec.stability;
        let draws = TrialDraws::draw(&m.channel, s.launch, s.trial, &self.root);
        let drifts = drift_trajectory(m.drift, s.steps(), s.step_s, &self.root)?;
        let picked: Vec<&DriftState> = drifts.iter().step_by(self.spec.stability_stride).collect();
        let obs = self.exec.map(&picked, |d| -> Result<[Observables; 2]> {
            let link = realize_link(m, s.distance_km, s.launch, &draws, d)?;
            Ok([
                expected_signal_observables(m, &self.pattern, Basis::X, &link)?,
                expected_signal_observables(m, &self.pattern, Basis::Z, &link)?,
            ])
        });
        let obs = obs.into_iter().collect::<Result<Vec<_>>>()?;
        let stats = |i: usize| {
            let q: Vec<f64> = obs.iter().map(|o| o[i].qber).collect();
            let g: Vec<f64> = obs.iter().map(|o| o[i].gain).collect();
            let (_, qs) = mean_std(&q);
            let (gm, gs) = mean_std(&g);
            (qs, gs / gm)
        };
        Ok([stats(0), stats(1)])
    }

    fn residuals(&self, m: &ModelParams) -> Result<Vec<Residual>> {
        let stab = if self.spec.anchors.iter().any(|a| a.observable.needs_stability()) { Some(self.stability(m)?) } else { None };
        let idx = |b: Basis| if b == Basis::X { 0 } else { 1 };
        self.spec
            .anchors
            .iter()
            .map(|&anchor| {
                let model = match anchor.observable {
                    Observable::Gain { distance_km, launch, basis } => self.static_mean(m, distance_km, launch, basis)?.gain,
                    Observable::Qber { distance_km, launch, basis } => self.static_mean(m, distance_km, launch, basis)?.qber,
                    Observable::QberStd { basis } => stab.expect("stability evaluated")[idx(basis)].0,
                    Observable::GainRelStd { basis } => stab.expect("stability evaluated")[idx(basis)].1,
                };
                Ok(Residual { anchor, model, relative: (model - anchor.target) / anchor.target })
            })
            .collect()
    }

    fn objective(&self, m: &ModelParams) -> Result<(f64, Vec<Residual>)> {
        let r = self.residuals(m)?;
        let j = r.iter().map(|r| r.relative * r.relative).sum::<f64>();
        Ok((if j.is_finite() { j } else { f64::INFINITY }, r))
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Golden-section minimum of `f` on `[lo, hi]`.
fn golden<F: FnMut(f64) -> Result<f64>>(mut f: F, mut lo: f64, mut hi: f64, iters: usize) -> Result<(f64, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a)?, f(b)?);
    for _ in 0..iters {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b)?;
        }
    }
    Ok(if fa <= fb { (a, fa) } else { (b, fb) })
}

/// Anchor residuals of a model without fitting anything.
pub fn anchor_residuals(model: &ModelParams, spec: &CalibrationSpec, seed: u64, exec: Execution) -> Result<Vec<Residual>> {
    let root = SeededRng::new(seed);
    let ev = Evaluator { spec, pattern: run_pattern(model, &root)?, root, exec };
    ev.residuals(model)
}

/// Coordinate descent over `spec.knobs`. Knobs sitting at zero are left alone, since they move multiplicatively.
/// A report with `converged == false` still carries the best parameters found.
pub fn calibrate(model: &ModelParams, spec: &CalibrationSpec, seed: u64, exec: Execution) -> Result<CalibrationReport> {
    model.validate()?;
    spec.validate()?;
    let root = SeededRng::new(seed);
    let ev = Evaluator { spec, pattern: run_pattern(model, &root)?, root, exec };
    let mut best = model.clone();
    let (mut j, residuals) = ev.objective(&best)?;
    if j < 1e-20 {
        return Ok(CalibrationReport { params: best, residuals, objective: j, sweeps: 0, converged: true });
    }
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < spec.max_sweeps {
        sweeps += 1;
        let start = j;
        for &knob in &spec.knobs {
            let base = knob.get(&best);
            if knob != Knob::ExcessLoss && base <= 0.0 {
                continue;
            }
            let w = knob.half_width();
            let mut trial = best.clone();
            let (u, ju) = golden(
                |u| {
                    knob.set(&mut trial, knob.apply(base, u));
                    if trial.validate().is_err() {
                        return Ok(f64::INFINITY);
                    }
                    Ok(ev.objective(&trial)?.0)
                },
                -w,
                w,
                spec.line_iterations,
            )?;
            if ju < j {
                knob.set(&mut best, knob.apply(base, u));
                j = ju;
            }
        }
        if start - j <= spec.tolerance * start {
            converged = true;
            break;
        }
    }
    let residuals = ev.residuals(&best)?;
    Ok(CalibrationReport { params: best, residuals, objective: j, sweeps, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(anchors: Vec<Anchor>) -> CalibrationSpec {
        CalibrationSpec { anchors, trials: 2, stability: StabilitySpec { duration_s: 1800.0, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn satisfied_anchors_leave_params_alone() {
        let m = ModelParams::default();
        let mut spec = quick(default_anchors());
        let r = anchor_residuals(&m, &spec, 3, Execution::Parallel).unwrap();
        for (a, r) in spec.anchors.iter_mut().zip(&r) {
            a.target = r.model;
        }
        let rep = calibrate(&m, &spec, 3, Execution::Parallel).unwrap();
        assert_eq!(rep.params, m);
        assert_eq!(rep.sweeps, 0);
        assert!(rep.objective < 1e-20 && rep.converged);
    }

    #[test]
    fn single_gain_anchor_is_matched() {
        let m = ModelParams::default();
        let gain = Observable::Gain { distance_km: 5.0, launch: LaunchKind::Underfill, basis: Basis::X };
        let now = anchor_residuals(&m, &quick(vec![Anchor { observable: gain, target: 1.0 }]), 5, Execution::Sequential).unwrap()[0].model;
        let spec = CalibrationSpec { knobs: vec![Knob::ExcessLoss], ..quick(vec![Anchor { observable: gain, target: now * 1.6 }]) };
        let rep = calibrate(&m, &spec, 5, Execution::Sequential).unwrap();
        assert!(rep.residuals[0].relative.abs() < 0.05, "{:?}", rep.residuals);
        assert!(rep.params.receiver.excess_loss_db < m.receiver.excess_loss_db);
        assert!(rep.converged);
    }

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, fx) = golden(|x| Ok((x - 0.3f64).powi(2)), -1.0, 1.0, 40).unwrap();
        assert!((x - 0.3).abs() < 1e-6 && fx < 1e-12);
    }

    #[test]
    fn rejects_empty_anchor_set() {
        let spec = quick(vec![]);
        assert!(matches!(calibrate(&ModelParams::default(), &spec, 1, Execution::Sequential), Err(Error::Config(_))));
    }

    #[test]
    fn shipped_defaults_fit_every_anchor_within_20_percent() {
        let spec = CalibrationSpec::default();
        for r in anchor_residuals(&ModelParams::default(), &spec, 42, Execution::Parallel).unwrap() {
            assert!(r.relative.abs() < 0.2, "{r:?}");
        }
    }
}
