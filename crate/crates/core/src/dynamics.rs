//! Internal-state dynamics: optical pumping rate equations, closed-form Rabi
//! flopping with quasi-static noise, and shelf decay.
//!
//! All frequencies are in cycles per second. Rabi frequencies are the
//! oscillation frequency of the excitation probability, so a resonant π pulse
//! lasts `1 / (2 Ω)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::levels::{
    build_excited_manifold, ground_index, transition_allowed, AtomicConstants, Polarization, Sublevel, Term,
    GROUND_SUBLEVELS,
};
use crate::{Error, Result};

/// Gaussian FWHM to standard deviation.
pub const FWHM_TO_SIGMA: f64 = 1.0 / 2.355;

const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PumpParams {
    /// Effective photon scattering rate on each driven transition, 1/s.
    pub scatter_rate: f64,
    /// Fraction of pump power in σ± (split evenly) rather than π.
    pub pol_impurity: f64,
    /// Exposure time, s.
    pub duration: f64,
}

impl PumpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scatter_rate > 0.0) || !self.scatter_rate.is_finite() {
            return Err(Error::domain(format!("scatter_rate must be > 0, got {}", self.scatter_rate)));
        }
        if !(0.0..=1.0).contains(&self.pol_impurity) {
            return Err(Error::domain(format!("pol_impurity must lie in [0, 1], got {}", self.pol_impurity)));
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return Err(Error::domain(format!("pump duration must be >= 0, got {}", self.duration)));
        }
        Ok(())
    }
}

impl Default for PumpParams {
    fn default() -> Self {
        PumpParams {
            scatter_rate: 2.0e6,
            pol_impurity: 0.0,
            duration: 100e-6,
        }
    }
}

/// AC mains pickup on the shelving transition detuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcLine {
    pub frequency: f64,
    /// Peak detuning, Hz.
    pub detuning_amplitude: f64,
    /// Line phase at the trigger epoch, rad. Set per shot from the
    /// sequence trigger.
    #[serde(skip)]
    pub trigger_phase: f64,
}

impl AcLine {
    pub fn detuning_at(&self, t: f64) -> f64 {
        self.detuning_amplitude * (2.0 * PI * self.frequency * t + self.trigger_phase).sin()
    }
}

impl Default for AcLine {
    fn default() -> Self {
        AcLine {
            frequency: 60.0,
            detuning_amplitude: 0.0,
            trigger_phase: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsParams {
    pub b_field_gauss: f64,
    /// 1.76 µm Rabi frequency, Hz.
    pub omega_optical: f64,
    /// Hyperfine (8 GHz) Rabi frequency, Hz.
    pub omega_microwave: f64,
    /// Target 1/e time of the Gaussian envelope of optical Rabi flopping.
    /// Used as a calibration target, not directly by the dynamics.
    pub tau_gauss: f64,
    /// Shelving laser linewidth (Gaussian FWHM), Hz.
    pub laser_linewidth: f64,
    /// RMS of the quasi-static magnetic detuning, Hz.
    pub mag_detuning_rms: f64,
    /// RMS of the quasi-static relative Rabi-frequency fluctuation.
    pub rabi_rel_rms: f64,
    /// Phenomenological hyperfine coherence time, s.
    pub hyperfine_t2: f64,
    /// D5/2 lifetime used for shelf decay between pulses, s.
    pub shelf_lifetime: f64,
    pub ac_line: AcLine,
    pub pump: PumpParams,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        PhysicsParams {
            b_field_gauss: 8.9,
            omega_optical: 50e3,
            omega_microwave: 15e3,
            tau_gauss: 120e-6,
            laser_linewidth: 0.0,
            mag_detuning_rms: 0.0,
            rabi_rel_rms: 0.0,
            hyperfine_t2: f64::INFINITY,
            shelf_lifetime: AtomicConstants::BA137.d52_lifetime,
            ac_line: AcLine::default(),
            pump: PumpParams::default(),
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega_optical", self.omega_optical),
            ("omega_microwave", self.omega_microwave),
            ("tau_gauss", self.tau_gauss),
            ("hyperfine_t2", self.hyperfine_t2),
            ("shelf_lifetime", self.shelf_lifetime),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::domain(format!("{name} must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("b_field_gauss", self.b_field_gauss),
            ("laser_linewidth", self.laser_linewidth),
            ("mag_detuning_rms", self.mag_detuning_rms),
            ("rabi_rel_rms", self.rabi_rel_rms),
            ("ac_line.frequency", self.ac_line.frequency),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.ac_line.detuning_amplitude.is_finite() || !self.ac_line.trigger_phase.is_finite() {
            return Err(Error::domain("ac_line parameters must be finite"));
        }
        self.pump.validate()
    }

    /// Standard deviation of the zero-mean stochastic detuning, Hz.
    pub fn detuning_sigma(&self) -> f64 {
        let laser = self.laser_linewidth * FWHM_TO_SIGMA;
        (self.mag_detuning_rms.powi(2) + laser.powi(2)).sqrt()
    }
}

/// Probability distribution over the 8 ground sublevels (in
/// [`ground_index`] order) and the shelf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Populations {
    pub ground: [f64; GROUND_SUBLEVELS],
    pub shelved: f64,
}

impl Populations {
    pub fn uniform_ground() -> Self {
        Populations {
            ground: [1.0 / GROUND_SUBLEVELS as f64; GROUND_SUBLEVELS],
            shelved: 0.0,
        }
    }

    pub fn pure(index: usize) -> Self {
        let mut ground = [0.0; GROUND_SUBLEVELS];
        ground[index] = 1.0;
        Populations { ground, shelved: 0.0 }
    }

    pub fn total(&self) -> f64 {
        self.ground.iter().sum::<f64>() + self.shelved
    }

    pub fn validate(&self) -> Result<()> {
        if self.ground.iter().chain(std::iter::once(&self.shelved)).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("population entries must lie in [0, 1]"));
        }
        let total = self.total();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::domain(format!("populations sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Draw a definite state; `None` means shelved.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let u: f64 = rng.random::<f64>() * self.total();
        let mut acc = 0.0;
        for (i, p) in self.ground.iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(i);
            }
        }
        if self.shelved > 0.0 {
            return None;
        }
        // rounding: fall back to the last populated ground level
        self.ground.iter().rposition(|&p| p > 0.0)
    }
}

/// Definite internal state of a single ion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IonState {
    Ground(usize),
    Shelved,
}

/// Classical rate-equation model of optical pumping on S1/2 -> P1/2 (F'=2)
/// with instantaneous spontaneous decay.
///
/// Only F'=2 is driven: the carrier addresses F=1 -> F'=2 and the 8 GHz
/// sideband F=2 -> F'=2. All allowed lines have equal strength. A fraction
/// `p12_branch_to_d32` of decays passes through D3/2 and is repumped back
/// uniformly over the ground manifold; the rest returns to the ground
/// sublevels connected to the emitting P sublevel, uniformly.
#[derive(Debug, Clone)]
pub struct PumpModel {
    ground: Vec<Sublevel>,
    excited: Vec<Sublevel>,
    d32_branch: f64,
}

impl PumpModel {
    pub fn new(ground: &[Sublevel], b_gauss: f64, constants: &AtomicConstants) -> Result<Self> {
        if ground.len() != GROUND_SUBLEVELS || ground.iter().any(|s| s.term != Term::S12) {
            return Err(Error::domain("pump model needs the 8-sublevel S1/2 manifold"));
        }
        for (i, s) in ground.iter().enumerate() {
            if ground_index(s.f, s.m_f) != Some(i) {
                return Err(Error::domain("ground manifold is not in canonical order"));
            }
        }
        let excited = build_excited_manifold(b_gauss)?.into_iter().filter(|s| s.f == 2).collect();
        Ok(PumpModel {
            ground: ground.to_vec(),
            excited,
            d32_branch: constants.p12_branch_to_d32,
        })
    }

    /// Column-convention generator: `dp/dt = L p`, `L[to][from]`.
    pub fn rate_matrix(&self, params: &PumpParams) -> Result<[[f64; 8]; 8]> {
        params.validate()?;
        let weights = [
            (Polarization::Pi, 1.0 - params.pol_impurity),
            (Polarization::SigmaPlus, params.pol_impurity / 2.0),
            (Polarization::SigmaMinus, params.pol_impurity / 2.0),
        ];
        let mut l = [[0.0; 8]; 8];
        for (from, g) in self.ground.iter().enumerate() {
            for (pol, w) in weights {
                if w == 0.0 {
                    continue;
                }
                let Some(upper) = self.excited.iter().find(|e| e.m_f == g.m_f + pol.delta_m()) else {
                    continue;
                };
                if !transition_allowed(g, upper, pol)? {
                    continue;
                }
                let rate = params.scatter_rate * w;
                let branches = self.decay_channels(upper)?;
                let direct = (1.0 - self.d32_branch) / branches.len() as f64;
                let repumped = self.d32_branch / GROUND_SUBLEVELS as f64;
                for to in 0..GROUND_SUBLEVELS {
                    let mut b = repumped;
                    if branches.contains(&to) {
                        b += direct;
                    }
                    l[to][from] += rate * b;
                }
                l[from][from] -= rate;
            }
        }
        Ok(l)
    }

    fn decay_channels(&self, upper: &Sublevel) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (k, g) in self.ground.iter().enumerate() {
            let pol = match upper.m_f - g.m_f {
                0 => Polarization::Pi,
                1 => Polarization::SigmaPlus,
                -1 => Polarization::SigmaMinus,
                _ => continue,
            };
            if transition_allowed(g, upper, pol)? {
                out.push(k);
            }
        }
        Ok(out)
    }

    /// Fixed-step RK4 with step no larger than `1 / (20 scatter_rate)`.
    pub fn evolve(&self, initial: &Populations, params: &PumpParams) -> Result<Populations> {
        initial.validate()?;
        if initial.shelved != 0.0 {
            return Err(Error::domain("optical pumping requires an unshelved ion"));
        }
        let l = self.rate_matrix(params)?;
        if params.duration == 0.0 {
            return Ok(*initial);
        }
        let max_step = 1.0 / (20.0 * params.scatter_rate);
        let steps = (params.duration / max_step).ceil().max(1.0) as usize;
        let h = params.duration / steps as f64;
        let deriv = |p: &[f64; 8]| {
            let mut d = [0.0; 8];
            for (to, row) in l.iter().enumerate() {
                d[to] = row.iter().zip(p).map(|(a, b)| a * b).sum();
            }
            d
        };
        let mut p = initial.ground;
        for _ in 0..steps {
            let k1 = deriv(&p);
            let k2 = deriv(&axpy(&p, h / 2.0, &k1));
            let k3 = deriv(&axpy(&p, h / 2.0, &k2));
            let k4 = deriv(&axpy(&p, h, &k3));
            for i in 0..8 {
                p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        for v in &mut p {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Populations { ground: p, shelved: 0.0 })
    }

    /// Pumped distribution for each pure starting sublevel; column `i` is
    /// the result of pumping `Populations::pure(i)`.
    pub fn propagator(&self, params: &PumpParams) -> Result<[Populations; 8]> {
        let mut out = [Populations::uniform_ground(); 8];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = self.evolve(&Populations::pure(i), params)?;
        }
        Ok(out)
    }
}

fn axpy(p: &[f64; 8], a: f64, k: &[f64; 8]) -> [f64; 8] {
    let mut out = *p;
    for i in 0..8 {
        out[i] += a * k[i];
    }
    out
}

/// Pump an ion with the Ba-137 branching ratio at the field implied by the
/// supplied ground manifold's Zeeman structure (P-state energies do not enter
/// the rate model).
pub fn optical_pump(initial: &Populations, params: &PumpParams, levels: &[Sublevel]) -> Result<Populations> {
    PumpModel::new(levels, 0.0, &AtomicConstants::BA137)?.evolve(initial, params)
}

/// Two-level excitation probability from the ground state after a square
/// pulse of length `t`, detuning `delta` and Rabi frequency `omega`.
pub fn rabi_excite(delta: f64, omega: f64, t: f64) -> f64 {
    let gen2 = omega * omega + delta * delta;
    if gen2 == 0.0 {
        return 0.0;
    }
    let s = (PI * gen2.sqrt() * t).sin();
    (omega * omega / gen2 * s * s).clamp(0.0, 1.0)
}

/// One shot's quasi-static noise draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSample {
    pub mag_detuning: f64,
    pub laser_detuning: f64,
    pub ac_detuning: f64,
    /// Multiplier on the nominal Rabi frequency.
    pub omega_factor: f64,
}

impl NoiseSample {
    pub fn detuning(&self) -> f64 {
        self.mag_detuning + self.laser_detuning + self.ac_detuning
    }

    /// Same draw with the sign of the stochastic detunings flipped.
    pub fn mirrored(&self) -> Self {
        NoiseSample {
            mag_detuning: -self.mag_detuning,
            laser_detuning: -self.laser_detuning,
            ..*self
        }
    }
}

/// Draws the per-shot noise. Always consumes exactly three standard normals
/// so stream positions do not depend on which noise terms are enabled.
pub fn sample_noise<R: Rng + ?Sized>(params: &PhysicsParams, pulse_start: f64, rng: &mut R) -> NoiseSample {
    let z_mag: f64 = StandardNormal.sample(rng);
    let z_laser: f64 = StandardNormal.sample(rng);
    let z_omega: f64 = StandardNormal.sample(rng);
    NoiseSample {
        mag_detuning: params.mag_detuning_rms * z_mag,
        laser_detuning: params.laser_linewidth * FWHM_TO_SIGMA * z_laser,
        ac_detuning: params.ac_line.detuning_at(pulse_start),
        omega_factor: 1.0 + params.rabi_rel_rms * z_omega,
    }
}

pub fn excite_with_noise(noise: &NoiseSample, detuning: f64, omega: f64, t: f64) -> f64 {
    rabi_excite(detuning + noise.detuning(), omega * noise.omega_factor, t)
}

/// Single-shot shelving probability for an optical pulse of length `t`
/// starting `pulse_start` after the line trigger, with a fresh quasi-static
/// noise draw.
pub fn rabi_evolve_noisy<R: Rng + ?Sized>(
    omega: f64,
    t: f64,
    params: &PhysicsParams,
    pulse_start: f64,
    rng: &mut R,
) -> f64 {
    rabi_evolve_noisy_detuned(omega, t, 0.0, params, pulse_start, rng)
}

pub fn rabi_evolve_noisy_detuned<R: Rng + ?Sized>(
    omega: f64,
    t: f64,
    detuning: f64,
    params: &PhysicsParams,
    pulse_start: f64,
    rng: &mut R,
) -> f64 {
    let noise = sample_noise(params, pulse_start, rng);
    excite_with_noise(&noise, detuning, omega, t)
}

const QUAD_NODES: usize = 81;
const QUAD_HALF_WIDTH: f64 = 6.0;

fn gauss_nodes(sigma: f64) -> Vec<(f64, f64)> {
    if sigma == 0.0 {
        return vec![(0.0, 1.0)];
    }
    let h = 2.0 * QUAD_HALF_WIDTH / (QUAD_NODES - 1) as f64;
    let raw: Vec<(f64, f64)> = (0..QUAD_NODES)
        .map(|i| {
            let x = -QUAD_HALF_WIDTH + i as f64 * h;
            (x, (-0.5 * x * x).exp())
        })
        .collect();
    let norm: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(x, w)| (x, w / norm)).collect()
}

/// Noise-averaged excitation probability: the mean of [`rabi_excite`] over
/// Gaussian detuning (mean `mean_detuning`, std `sigma_detuning`) and a
/// Gaussian relative Rabi-frequency spread. Deterministic quadrature.
pub fn ensemble_excitation(omega: f64, t: f64, mean_detuning: f64, sigma_detuning: f64, omega_rel_rms: f64) -> f64 {
    let d_nodes = gauss_nodes(sigma_detuning);
    let o_nodes = gauss_nodes(omega_rel_rms);
    let mut acc = 0.0;
    for &(x, wx) in &d_nodes {
        let delta = mean_detuning + sigma_detuning * x;
        for &(y, wy) in &o_nodes {
            acc += wx * wy * rabi_excite(delta, omega * (1.0 + omega_rel_rms * y), t);
        }
    }
    acc
}

/// Noise-averaged optical excitation for a pulse starting at `pulse_start`.
pub fn ensemble_optical_excitation(params: &PhysicsParams, t: f64, detuning: f64, pulse_start: f64) -> f64 {
    ensemble_excitation(
        params.omega_optical,
        t,
        detuning + params.ac_line.detuning_at(pulse_start),
        params.detuning_sigma(),
        params.rabi_rel_rms,
    )
}

/// Transfer probability between the two clock states under a microwave pulse,
/// with contrast decaying as `exp(-t / T2)` towards 1/2.
pub fn microwave_transfer(detuning: f64, omega: f64, t: f64, t2: f64) -> f64 {
    let coherent = rabi_excite(detuning, omega, t);
    if t2.is_infinite() {
        return coherent;
    }
    (0.5 + (coherent - 0.5) * (-t / t2).exp()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShelfDecay {
    pub still_shelved: bool,
    /// Time within the interval at which the shelf decayed.
    pub decay_time: Option<f64>,
}

/// Probability that a shelved ion decays within `dt`.
pub fn shelf_decay_probability(dt: f64, lifetime: f64) -> f64 {
    if lifetime.is_infinite() {
        return 0.0;
    }
    -(-dt / lifetime).exp_m1()
}

/// Samples spontaneous decay of the D5/2 shelf over an interval `dt`.
pub fn shelf_decay<R: Rng + ?Sized>(is_shelved: bool, dt: f64, lifetime: f64, rng: &mut R) -> ShelfDecay {
    if !is_shelved {
        return ShelfDecay {
            still_shelved: false,
            decay_time: None,
        };
    }
    if lifetime.is_infinite() || dt <= 0.0 {
        return ShelfDecay {
            still_shelved: true,
            decay_time: None,
        };
    }
    let t: f64 = Exp::new(1.0 / lifetime).expect("positive rate").sample(rng);
    if t < dt {
        ShelfDecay {
            still_shelved: false,
            decay_time: Some(t),
        }
    } else {
        ShelfDecay {
            still_shelved: true,
            decay_time: None,
        }
    }
}
