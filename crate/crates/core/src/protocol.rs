//! Pulse sequences executed shot by shot, and parameter sweeps over them.
//!
//! A shot is a classical trajectory over definite internal states: optical
//! pumping yields a population vector that is immediately sampled, and each
//! coherent pulse uses the closed-form two-level result to decide whether the
//! addressed pair of states swaps. The 1.76 µm pulse only addresses
//! (F=2, m_F=0) and the microwave only the two m_F=0 clock states.
//!
//! Timing: pump steps before the first other step happen before the line
//! trigger. The AC-line clock starts at the first non-pump step, so a longer
//! microwave pulse delays the phase at which a following optical pulse sees
//! the mains-induced detuning.
//!
//! Randomness: shot `s` of sweep point `k` draws from
//! [`shot_rng`]`(master_seed, k, s)`; a lone [`run_shot`] uses point 0.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::{
    ensemble_optical_excitation, microwave_transfer, rabi_evolve_noisy_detuned, shelf_decay, shelf_decay_probability,
    IonState, PhysicsParams, Populations, PumpModel, PumpParams,
};
use crate::levels::{AtomicConstants, Sublevel, CLOCK_LOWER, CLOCK_UPPER, GROUND_SUBLEVELS};
use crate::readout::{
    bright_error_probability, classify, dark_error_probability, simulate_detection, Classification, DetectionParams,
    ReadoutState,
};
use crate::seeding::{shot_rng, ShotRng, MAX_SHOTS_PER_POINT};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PulseStep {
    Pump(PumpParams),
    IrPulse { duration: f64, detuning: f64 },
    MicrowavePulse { duration: f64, detuning: f64 },
    /// Fluorescence detection; counts `<= threshold` read as dark.
    Detect { params: DetectionParams, threshold: i64 },
    Wait { duration: f64 },
}

impl PulseStep {
    pub fn duration(&self) -> f64 {
        match *self {
            PulseStep::Pump(p) => p.duration,
            PulseStep::IrPulse { duration, .. } | PulseStep::MicrowavePulse { duration, .. } => duration,
            PulseStep::Detect { params, .. } => params.window,
            PulseStep::Wait { duration } => duration,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::domain(format!("step {index}: {msg}")));
        match self {
            PulseStep::Pump(p) => p.validate().or_else(|e| bad(e.to_string())),
            PulseStep::Detect { params, .. } => params.validate().or_else(|e| bad(e.to_string())),
            PulseStep::IrPulse { duration, detuning } | PulseStep::MicrowavePulse { duration, detuning } => {
                if !(*duration >= 0.0) || !duration.is_finite() {
                    return bad(format!("duration must be finite and >= 0, got {duration}"));
                }
                if !detuning.is_finite() {
                    return bad(format!("detuning must be finite, got {detuning}"));
                }
                Ok(())
            }
            PulseStep::Wait { duration } => {
                if !(*duration >= 0.0) || !duration.is_finite() {
                    return bad(format!("duration must be finite and >= 0, got {duration}"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    /// Free-running: the mains phase is uniformly random each shot.
    Immediate,
    /// Sequence starts at a fixed mains phase, rad.
    LineTrigger { phase: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    pub steps: Vec<PulseStep>,
    pub trigger: Trigger,
}

impl PulseSequence {
    pub fn new(steps: Vec<PulseStep>, trigger: Trigger) -> Self {
        PulseSequence { steps, trigger }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            s.validate(i)?;
        }
        let detects: Vec<usize> = self
            .steps
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, PulseStep::Detect { .. }))
            .map(|(i, _)| i)
            .collect();
        match detects.as_slice() {
            [] => {}
            [i] if *i == self.steps.len() - 1 => {}
            [_] => return Err(Error::domain("the Detect step must be last")),
            _ => return Err(Error::domain("a sequence may contain at most one Detect step")),
        }
        if let Trigger::LineTrigger { phase } = self.trigger {
            if !phase.is_finite() {
                return Err(Error::domain("trigger phase must be finite"));
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.steps.iter().map(PulseStep::duration).sum()
    }

    /// Wall-clock time at which the line trigger fires.
    pub fn trigger_epoch(&self) -> f64 {
        self.steps
            .iter()
            .take_while(|s| matches!(s, PulseStep::Pump(_)))
            .map(PulseStep::duration)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShotRecord {
    pub shot_index: u32,
    /// Internal state when detection began (or at the end, without detection).
    pub final_state: IonState,
    pub photon_count: Option<u64>,
    pub classified: Classification,
    /// Wall-clock time at the end of the sequence.
    pub elapsed: f64,
}

impl ShotRecord {
    pub fn is_dark(&self) -> bool {
        self.classified == Classification::Dark
    }
}

/// A validated sequence bound to physics parameters, with optical-pumping
/// propagators precomputed.
#[derive(Debug, Clone)]
pub struct Experiment {
    seq: PulseSequence,
    params: PhysicsParams,
    pumps: Vec<Option<[Populations; GROUND_SUBLEVELS]>>,
}

type PumpCache = Vec<(PumpParams, [Populations; GROUND_SUBLEVELS])>;

impl Experiment {
    pub fn new(seq: &PulseSequence, params: &PhysicsParams, levels: &[Sublevel]) -> Result<Self> {
        Self::with_cache(seq, params, levels, &mut Vec::new())
    }

    fn with_cache(seq: &PulseSequence, params: &PhysicsParams, levels: &[Sublevel], cache: &mut PumpCache) -> Result<Self> {
        seq.validate()?;
        params.validate()?;
        let mut model = None;
        let mut pumps = Vec::with_capacity(seq.steps.len());
        for step in &seq.steps {
            let PulseStep::Pump(pp) = step else {
                pumps.push(None);
                continue;
            };
            if let Some((_, prop)) = cache.iter().find(|(k, _)| k == pp) {
                pumps.push(Some(*prop));
                continue;
            }
            if model.is_none() {
                model = Some(PumpModel::new(levels, params.b_field_gauss, &AtomicConstants::BA137)?);
            }
            let prop = model.as_ref().unwrap().propagator(pp)?;
            cache.push((*pp, prop));
            pumps.push(Some(prop));
        }
        Ok(Experiment {
            seq: seq.clone(),
            params: *params,
            pumps,
        })
    }

    pub fn sequence(&self) -> &PulseSequence {
        &self.seq
    }

    pub fn run_shot(&self, master_seed: u64, point_index: u32, shot_index: u32) -> ShotRecord {
        let mut rng = shot_rng(master_seed, point_index, shot_index);
        self.run_with_rng(shot_index, &mut rng)
    }

    fn run_with_rng(&self, shot_index: u32, rng: &mut ShotRng) -> ShotRecord {
        let mut params = self.params;
        params.ac_line.trigger_phase = match self.seq.trigger {
            Trigger::LineTrigger { phase } => phase,
            Trigger::Immediate => rng.random::<f64>() * 2.0 * PI,
        };
        let trigger_epoch = self.seq.trigger_epoch();
        // None: thermal mixture left by Doppler cooling, not yet sampled
        let mut state: Option<IonState> = None;
        let mut t = 0.0;
        let mut photon_count = None;
        let mut detected = None;
        let mut detected_state = None;

        for (step, pump) in self.seq.steps.iter().zip(&self.pumps) {
            match *step {
                PulseStep::Pump(_) => {
                    let prop = pump.as_ref().expect("pump propagator compiled");
                    let dist = match state {
                        None => mix_uniform(prop),
                        Some(IonState::Ground(i)) => prop[i],
                        // pump light does not reach the shelf
                        Some(IonState::Shelved) => Populations {
                            ground: [0.0; GROUND_SUBLEVELS],
                            shelved: 1.0,
                        },
                    };
                    state = Some(match dist.sample(rng) {
                        Some(i) => IonState::Ground(i),
                        None => IonState::Shelved,
                    });
                }
                PulseStep::IrPulse { duration, detuning } => {
                    let s = collapse(&mut state, rng);
                    if matches!(s, IonState::Ground(CLOCK_UPPER) | IonState::Shelved) {
                        let p = rabi_evolve_noisy_detuned(
                            params.omega_optical,
                            duration,
                            detuning,
                            &params,
                            t - trigger_epoch,
                            rng,
                        );
                        if rng.random::<f64>() < p {
                            state = Some(if s == IonState::Shelved {
                                IonState::Ground(CLOCK_UPPER)
                            } else {
                                IonState::Shelved
                            });
                        }
                    }
                }
                PulseStep::MicrowavePulse { duration, detuning } => {
                    let s = collapse(&mut state, rng);
                    if let IonState::Ground(i @ (CLOCK_LOWER | CLOCK_UPPER)) = s {
                        let p = microwave_transfer(detuning, params.omega_microwave, duration, params.hyperfine_t2);
                        if rng.random::<f64>() < p {
                            let other = if i == CLOCK_LOWER { CLOCK_UPPER } else { CLOCK_LOWER };
                            state = Some(IonState::Ground(other));
                        }
                    }
                }
                PulseStep::Wait { duration } => {
                    if state == Some(IonState::Shelved) {
                        let d = shelf_decay(true, duration, params.shelf_lifetime, rng);
                        if !d.still_shelved {
                            state = Some(IonState::Ground(rng.random_range(0..GROUND_SUBLEVELS)));
                        }
                    }
                }
                PulseStep::Detect { params: det, threshold } => {
                    let s = collapse(&mut state, rng);
                    let readout = if s == IonState::Shelved {
                        ReadoutState::Shelved
                    } else {
                        ReadoutState::Bright
                    };
                    let outcome = simulate_detection(readout, &det, rng);
                    photon_count = Some(outcome.count);
                    detected = Some(classify(outcome.count, threshold));
                    detected_state = Some(s);
                }
            }
            t += step.duration();
        }

        let final_state = match detected_state {
            Some(s) => s,
            None => collapse(&mut state, rng),
        };
        let classified = detected.unwrap_or(if final_state == IonState::Shelved {
            Classification::Dark
        } else {
            Classification::Bright
        });
        ShotRecord {
            shot_index,
            final_state,
            photon_count,
            classified,
            elapsed: t,
        }
    }

    /// Exact probability of a dark classification, propagating populations
    /// instead of sampling. Quasi-static noise is averaged by quadrature per
    /// optical pulse, which is exact for sequences with one optical pulse.
    /// A free-running trigger is averaged over 64 mains phases.
    pub fn dark_probability(&self) -> f64 {
        match self.seq.trigger {
            Trigger::LineTrigger { phase } => self.ensemble_at_phase(phase),
            Trigger::Immediate => {
                let n = 64;
                (0..n).map(|k| self.ensemble_at_phase(2.0 * PI * k as f64 / n as f64)).sum::<f64>() / n as f64
            }
        }
    }

    fn ensemble_at_phase(&self, phase: f64) -> f64 {
        let mut params = self.params;
        params.ac_line.trigger_phase = phase;
        let trigger_epoch = self.seq.trigger_epoch();
        let mut pop = Populations::uniform_ground();
        let mut t = 0.0;
        for (step, pump) in self.seq.steps.iter().zip(&self.pumps) {
            match *step {
                PulseStep::Pump(_) => {
                    let prop = pump.as_ref().expect("pump propagator compiled");
                    let mut next = Populations {
                        ground: [0.0; GROUND_SUBLEVELS],
                        shelved: pop.shelved,
                    };
                    for (from, col) in prop.iter().enumerate() {
                        for to in 0..GROUND_SUBLEVELS {
                            next.ground[to] += col.ground[to] * pop.ground[from];
                        }
                    }
                    pop = next;
                }
                PulseStep::IrPulse { duration, detuning } => {
                    let p = ensemble_optical_excitation(&params, duration, detuning, t - trigger_epoch);
                    let up = pop.ground[CLOCK_UPPER];
                    let sh = pop.shelved;
                    pop.ground[CLOCK_UPPER] = up * (1.0 - p) + sh * p;
                    pop.shelved = sh * (1.0 - p) + up * p;
                }
                PulseStep::MicrowavePulse { duration, detuning } => {
                    let p = microwave_transfer(detuning, params.omega_microwave, duration, params.hyperfine_t2);
                    let lo = pop.ground[CLOCK_LOWER];
                    let up = pop.ground[CLOCK_UPPER];
                    pop.ground[CLOCK_LOWER] = lo * (1.0 - p) + up * p;
                    pop.ground[CLOCK_UPPER] = up * (1.0 - p) + lo * p;
                }
                PulseStep::Wait { duration } => {
                    let q = pop.shelved * shelf_decay_probability(duration, params.shelf_lifetime);
                    pop.shelved -= q;
                    for g in &mut pop.ground {
                        *g += q / GROUND_SUBLEVELS as f64;
                    }
                }
                PulseStep::Detect { params: det, threshold } => {
                    let bright: f64 = pop.ground.iter().sum();
                    return bright * bright_error_probability(&det, threshold)
                        + pop.shelved * (1.0 - dark_error_probability(&det, threshold));
                }
            }
            t += step.duration();
        }
        pop.shelved
    }
}

fn mix_uniform(prop: &[Populations; GROUND_SUBLEVELS]) -> Populations {
    let mut out = Populations {
        ground: [0.0; GROUND_SUBLEVELS],
        shelved: 0.0,
    };
    for col in prop {
        for (o, g) in out.ground.iter_mut().zip(&col.ground) {
            *o += g / GROUND_SUBLEVELS as f64;
        }
    }
    out
}

fn collapse(state: &mut Option<IonState>, rng: &mut ShotRng) -> IonState {
    *state.get_or_insert_with(|| IonState::Ground(rng.random_range(0..GROUND_SUBLEVELS)))
}

/// Runs one shot with the stream of sweep point 0.
pub fn run_shot(
    seq: &PulseSequence,
    params: &PhysicsParams,
    levels: &[Sublevel],
    shot_index: u32,
    master_seed: u64,
) -> Result<ShotRecord> {
    Ok(Experiment::new(seq, params, levels)?.run_shot(master_seed, 0, shot_index))
}

/// Numeric field of a sequence that a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepField {
    Duration,
    Detuning,
    PolImpurity,
    ScatterRate,
    DarkRate,
    BrightRate,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Step { index: usize, field: StepField },
    TriggerPhase,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    /// Parses `steps[<k>].<field>` or `trigger.phase`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "trigger.phase" {
            return Ok(SweepParameter::TriggerPhase);
        }
        let bad = || Error::Config(format!("cannot parse sweep parameter path `{s}`"));
        let rest = s.strip_prefix("steps[").ok_or_else(bad)?;
        let (idx, field) = rest.split_once("].").ok_or_else(bad)?;
        let index: usize = idx.parse().map_err(|_| bad())?;
        let field = match field {
            "duration" => StepField::Duration,
            "detuning" => StepField::Detuning,
            "pol_impurity" => StepField::PolImpurity,
            "scatter_rate" => StepField::ScatterRate,
            "dark_rate" => StepField::DarkRate,
            "bright_rate" => StepField::BrightRate,
            "threshold" => StepField::Threshold,
            _ => return Err(bad()),
        };
        Ok(SweepParameter::Step { index, field })
    }
}

impl std::fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParameter::TriggerPhase => write!(f, "trigger.phase"),
            SweepParameter::Step { index, field } => {
                let name = match field {
                    StepField::Duration => "duration",
                    StepField::Detuning => "detuning",
                    StepField::PolImpurity => "pol_impurity",
                    StepField::ScatterRate => "scatter_rate",
                    StepField::DarkRate => "dark_rate",
                    StepField::BrightRate => "bright_rate",
                    StepField::Threshold => "threshold",
                };
                write!(f, "steps[{index}].{name}")
            }
        }
    }
}

impl SweepParameter {
    /// Copy of `seq` with this parameter set to `value`.
    pub fn apply(&self, seq: &PulseSequence, value: f64) -> Result<PulseSequence> {
        let mut out = seq.clone();
        let (index, field) = match *self {
            SweepParameter::TriggerPhase => {
                out.trigger = Trigger::LineTrigger { phase: value };
                return Ok(out);
            }
            SweepParameter::Step { index, field } => (index, field),
        };
        let step = out
            .steps
            .get_mut(index)
            .ok_or_else(|| Error::domain(format!("sweep refers to step {index}, sequence has {}", seq.steps.len())))?;
        let kind = format!("{step:?}");
        let kind = kind.split([' ', '(', '{']).next().unwrap_or("").to_string();
        match (step, field) {
            (PulseStep::Pump(p), StepField::Duration) => p.duration = value,
            (PulseStep::Pump(p), StepField::PolImpurity) => p.pol_impurity = value,
            (PulseStep::Pump(p), StepField::ScatterRate) => p.scatter_rate = value,
            (
                PulseStep::IrPulse { duration, .. }
                | PulseStep::MicrowavePulse { duration, .. }
                | PulseStep::Wait { duration },
                StepField::Duration,
            ) => *duration = value,
            (PulseStep::IrPulse { detuning, .. } | PulseStep::MicrowavePulse { detuning, .. }, StepField::Detuning) => {
                *detuning = value
            }
            (PulseStep::Detect { params, .. }, StepField::Duration) => params.window = value,
            (PulseStep::Detect { params, .. }, StepField::DarkRate) => params.dark_rate = value,
            (PulseStep::Detect { params, .. }, StepField::BrightRate) => params.bright_rate = value,
            (PulseStep::Detect { threshold, .. }, StepField::Threshold) => {
                if value.fract() != 0.0 {
                    return Err(Error::domain(format!("threshold must be an integer, got {value}")));
                }
                *threshold = value as i64
            }
            _ => return Err(Error::domain(format!("step {index} ({kind}) has no field {field:?}"))),
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub template: PulseSequence,
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub shots_per_point: u32,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::domain("sweep has no values"));
        }
        if self.shots_per_point == 0 {
            return Err(Error::domain("shots_per_point must be >= 1"));
        }
        if self.values.len() as u64 > MAX_SHOTS_PER_POINT {
            return Err(Error::domain("too many sweep points"));
        }
        self.template.validate()?;
        for &v in &self.values {
            self.parameter.apply(&self.template, v)?.validate()?;
        }
        Ok(())
    }

    /// One compiled experiment per sweep value.
    pub fn experiments(&self, params: &PhysicsParams, levels: &[Sublevel]) -> Result<Vec<Experiment>> {
        self.validate()?;
        let mut cache = Vec::new();
        self.values
            .iter()
            .map(|&v| Experiment::with_cache(&self.parameter.apply(&self.template, v)?, params, levels, &mut cache))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub x: f64,
    pub p_dark: f64,
    pub dark: u64,
    pub shots: u64,
    /// Binomial standard error `sqrt(p(1-p)/n)`.
    pub stderr: f64,
}

impl SweepPoint {
    fn from_counts(x: f64, dark: u64, shots: u64) -> Self {
        let p = dark as f64 / shots as f64;
        SweepPoint {
            x,
            p_dark: p,
            dark,
            shots,
            stderr: (p * (1.0 - p) / shots as f64).sqrt(),
        }
    }
}

/// All shot records of a sweep, grouped by point. Results do not depend on
/// the rayon pool the call runs in.
pub fn run_sweep_records(
    spec: &SweepSpec,
    params: &PhysicsParams,
    levels: &[Sublevel],
    master_seed: u64,
) -> Result<Vec<Vec<ShotRecord>>> {
    let experiments = spec.experiments(params, levels)?;
    let shots = spec.shots_per_point;
    Ok(experiments
        .par_iter()
        .enumerate()
        .map(|(k, exp)| {
            (0..shots)
                .into_par_iter()
                .map(|s| exp.run_shot(master_seed, k as u32, s))
                .collect()
        })
        .collect())
}

pub fn run_sweep(spec: &SweepSpec, params: &PhysicsParams, levels: &[Sublevel], master_seed: u64) -> Result<Vec<SweepPoint>> {
    let records = run_sweep_records(spec, params, levels, master_seed)?;
    Ok(spec
        .values
        .iter()
        .zip(records)
        .map(|(&x, recs)| {
            let dark = recs.iter().filter(|r| r.is_dark()).count() as u64;
            SweepPoint::from_counts(x, dark, recs.len() as u64)
        })
        .collect())
}

/// Runs `f` on a dedicated pool of `workers` threads (the global pool if
/// `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::domain("worker count must be >= 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::domain(format!("cannot build worker pool: {e}")))
            .map(|pool| pool.install(f)),
    }
}

/// `x,p_dark,n_shots,stderr` rows (no header).
pub fn write_sweep_rows<W: std::io::Write>(points: &[SweepPoint], mut out: W) -> std::io::Result<()> {
    for p in points {
        writeln!(out, "{:e},{},{},{:e}", p.x, p.p_dark, p.shots, p.stderr)?;
    }
    Ok(())
}

pub const SWEEP_HEADER: &str = "x,p_dark,n_shots,stderr";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levels::build_ground_manifold;

    fn levels() -> Vec<Sublevel> {
        build_ground_manifold(8.9, &AtomicConstants::BA137).unwrap()
    }

    fn ideal_detect() -> PulseStep {
        PulseStep::Detect {
            params: DetectionParams::default(),
            threshold: 1,
        }
    }

    fn pi_time(omega: f64) -> f64 {
        1.0 / (2.0 * omega)
    }

    #[test]
    fn validation_rules() {
        let ok = PulseSequence::new(vec![PulseStep::Pump(PumpParams::default()), ideal_detect()], Trigger::Immediate);
        assert!(ok.validate().is_ok());
        let detect_not_last = PulseSequence::new(vec![ideal_detect(), PulseStep::Wait { duration: 1e-6 }], Trigger::Immediate);
        assert!(detect_not_last.validate().is_err());
        let two = PulseSequence::new(vec![ideal_detect(), ideal_detect()], Trigger::Immediate);
        assert!(two.validate().is_err());
        let neg = PulseSequence::new(
            vec![PulseStep::IrPulse {
                duration: -1.0,
                detuning: 0.0,
            }],
            Trigger::Immediate,
        );
        assert!(neg.validate().is_err());
        assert!(run_shot(&neg, &PhysicsParams::default(), &levels(), 0, 0).is_err());
    }

    #[test]
    fn pi_pulse_shelves_pumped_ion() {
        let params = PhysicsParams::default();
        let seq = PulseSequence::new(
            vec![
                PulseStep::Pump(PumpParams::default()),
                PulseStep::IrPulse {
                    duration: pi_time(params.omega_optical),
                    detuning: 0.0,
                },
                ideal_detect(),
            ],
            Trigger::LineTrigger { phase: 0.0 },
        );
        let exp = Experiment::new(&seq, &params, &levels()).unwrap();
        let n = 4000;
        let dark = (0..n).filter(|&s| exp.run_shot(1, 0, s).is_dark()).count();
        assert!(dark as f64 / n as f64 >= 0.995, "{dark}");
        assert!(exp.dark_probability() >= 0.999);
    }

    #[test]
    fn elapsed_time_is_sum_of_durations() {
        let params = PhysicsParams::default();
        let seq = PulseSequence::new(
            vec![
                PulseStep::Pump(PumpParams::default()),
                PulseStep::MicrowavePulse {
                    duration: 17e-6,
                    detuning: 0.0,
                },
                PulseStep::Wait { duration: 3e-6 },
                PulseStep::IrPulse {
                    duration: 10e-6,
                    detuning: 0.0,
                },
                ideal_detect(),
            ],
            Trigger::LineTrigger { phase: 0.0 },
        );
        let r = run_shot(&seq, &params, &levels(), 3, 9).unwrap();
        assert_eq!(r.elapsed, seq.total_duration());
        assert_eq!(seq.trigger_epoch(), 100e-6);
    }

    #[test]
    fn sweep_parameter_paths() {
        let p: SweepParameter = "steps[2].duration".parse().unwrap();
        assert_eq!(
            p,
            SweepParameter::Step {
                index: 2,
                field: StepField::Duration
            }
        );
        assert_eq!(p.to_string(), "steps[2].duration");
        assert_eq!("trigger.phase".parse::<SweepParameter>().unwrap(), SweepParameter::TriggerPhase);
        assert!("steps[x].duration".parse::<SweepParameter>().is_err());
        assert!("steps[1].colour".parse::<SweepParameter>().is_err());
        let seq = PulseSequence::new(vec![PulseStep::Wait { duration: 0.0 }], Trigger::Immediate);
        let bad = SweepParameter::Step {
            index: 0,
            field: StepField::Detuning,
        };
        assert!(bad.apply(&seq, 1.0).is_err());
        let out_of_range = SweepParameter::Step {
            index: 4,
            field: StepField::Duration,
        };
        assert!(out_of_range.apply(&seq, 1.0).is_err());
    }

    #[test]
    fn empty_sweep_rejected() {
        let spec = SweepSpec {
            template: PulseSequence::new(vec![PulseStep::Wait { duration: 0.0 }], Trigger::Immediate),
            parameter: "steps[0].duration".parse().unwrap(),
            values: vec![],
            shots_per_point: 10,
        };
        assert!(run_sweep(&spec, &PhysicsParams::default(), &levels(), 0).is_err());
        let spec = SweepSpec {
            values: vec![1.0],
            shots_per_point: 0,
            ..spec
        };
        assert!(run_sweep(&spec, &PhysicsParams::default(), &levels(), 0).is_err());
    }

    #[test]
    fn wait_while_shelved_can_decay() {
        let params = PhysicsParams {
            shelf_lifetime: 1e-3,
            ..PhysicsParams::default()
        };
        let seq = PulseSequence::new(
            vec![
                PulseStep::Pump(PumpParams::default()),
                PulseStep::IrPulse {
                    duration: pi_time(params.omega_optical),
                    detuning: 0.0,
                },
                PulseStep::Wait { duration: 1e-3 },
            ],
            Trigger::LineTrigger { phase: 0.0 },
        );
        let exp = Experiment::new(&seq, &params, &levels()).unwrap();
        let n = 20_000;
        let dark = (0..n).filter(|&s| exp.run_shot(2, 0, s).is_dark()).count() as f64 / n as f64;
        let exact = exp.dark_probability();
        assert!((exact - (-1.0f64).exp()).abs() < 2e-3);
        assert!((dark - exact).abs() < 4.0 * (exact * (1.0 - exact) / n as f64).sqrt());
    }

    fn mw_then_shelve(mw: f64, params: &PhysicsParams) -> PulseSequence {
        PulseSequence::new(
            vec![
                PulseStep::Pump(PumpParams::default()),
                PulseStep::MicrowavePulse {
                    duration: mw,
                    detuning: 0.0,
                },
                PulseStep::IrPulse {
                    duration: pi_time(params.omega_optical),
                    detuning: 0.0,
                },
                ideal_detect(),
            ],
            Trigger::LineTrigger { phase: 0.0 },
        )
    }

    #[test]
    fn zero_length_microwave_is_identity() {
        let params = PhysicsParams::default();
        let exp = Experiment::new(&mw_then_shelve(0.0, &params), &params, &levels()).unwrap();
        let n = 10_000;
        let dark = (0..n).filter(|&s| exp.run_shot(4, 0, s).is_dark()).count() as f64 / n as f64;
        assert!(dark >= 0.995, "{dark}");
    }

    #[test]
    fn microwave_pi_pulse_empties_shelvable_state() {
        let params = PhysicsParams::default();
        let exp = Experiment::new(&mw_then_shelve(pi_time(params.omega_microwave), &params), &params, &levels()).unwrap();
        let n = 10_000;
        let dark = (0..n).filter(|&s| exp.run_shot(5, 0, s).is_dark()).count() as f64 / n as f64;
        assert!(dark <= 0.003, "{dark}");
        assert!(exp.dark_probability() < 1e-3);
    }

    #[test]
    fn noiseless_optical_sweep_follows_closed_form() {
        let params = PhysicsParams::default();
        let template = PulseSequence::new(
            vec![
                PulseStep::Pump(PumpParams::default()),
                PulseStep::IrPulse {
                    duration: 0.0,
                    detuning: 0.0,
                },
            ],
            Trigger::LineTrigger { phase: 0.0 },
        );
        let values: Vec<f64> = (0..=20).map(|i| i as f64 * 5e-6).collect();
        let spec = SweepSpec {
            template,
            parameter: "steps[1].duration".parse().unwrap(),
            values,
            shots_per_point: 2000,
        };
        let points = run_sweep(&spec, &params, &levels(), 11).unwrap();
        for pt in &points {
            let expect = crate::dynamics::rabi_excite(0.0, params.omega_optical, pt.x);
            let se = (expect * (1.0 - expect) / pt.shots as f64).sqrt().max(1e-3);
            assert!((pt.p_dark - expect).abs() < 4.0 * se + 2e-3, "{pt:?} vs {expect}");
        }
    }

    #[test]
    fn sweep_csv_rows() {
        let pts = [SweepPoint::from_counts(1e-6, 3, 4)];
        let mut buf = Vec::new();
        write_sweep_rows(&pts, &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.starts_with("1e-6,0.75,4,"));
    }
}
