//! Fluorescence readout: photon-count generation for bright and shelved ions,
//! count histograms, and threshold discrimination.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use statrs::distribution::{DiscreteCDF, Poisson as PoissonDist};

use crate::dynamics::{shelf_decay, shelf_decay_probability};
use crate::seeding::shot_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionParams {
    /// Detected photon rate from a fluorescing ion, counts/s.
    pub bright_rate: f64,
    /// Background rate (scatter, detector dark counts), counts/s.
    pub dark_rate: f64,
    /// Detection window, s.
    pub window: f64,
    /// D5/2 lifetime, s. May be infinite.
    pub shelf_lifetime: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            bright_rate: 2100.0,
            dark_rate: 0.0,
            window: 10e-3,
            shelf_lifetime: 35.0,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dark_rate >= 0.0) || !self.dark_rate.is_finite() {
            return Err(Error::domain(format!("dark_rate must be >= 0, got {}", self.dark_rate)));
        }
        if !(self.bright_rate > self.dark_rate) || !self.bright_rate.is_finite() {
            return Err(Error::domain(format!(
                "bright_rate ({}) must exceed dark_rate ({})",
                self.bright_rate, self.dark_rate
            )));
        }
        if !(self.window > 0.0) || !self.window.is_finite() {
            return Err(Error::domain(format!("window must be > 0, got {}", self.window)));
        }
        if !(self.shelf_lifetime > 0.0) {
            return Err(Error::domain(format!("shelf_lifetime must be > 0, got {}", self.shelf_lifetime)));
        }
        Ok(())
    }
}

/// State of the ion when the cooling lasers turn on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutState {
    Bright,
    Shelved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Bright,
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionOutcome {
    pub count: u64,
    /// Time into the window at which a shelved ion decayed, if it did.
    pub decay_time: Option<f64>,
}

fn poisson_sample<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

/// One detection window. A shelved ion that decays at `t_d` fluoresces for
/// the remaining `window - t_d`.
pub fn simulate_detection<R: Rng + ?Sized>(state: ReadoutState, params: &DetectionParams, rng: &mut R) -> DetectionOutcome {
    let background = params.dark_rate * params.window;
    match state {
        ReadoutState::Bright => DetectionOutcome {
            count: poisson_sample(params.bright_rate * params.window + background, rng),
            decay_time: None,
        },
        ReadoutState::Shelved => {
            let decay = shelf_decay(true, params.window, params.shelf_lifetime, rng);
            let mean = match decay.decay_time {
                Some(t_d) => background + params.bright_rate * (params.window - t_d),
                None => background,
            };
            DetectionOutcome {
                count: poisson_sample(mean, rng),
                decay_time: decay.decay_time,
            }
        }
    }
}

pub fn simulate_counts<R: Rng + ?Sized>(state: ReadoutState, params: &DetectionParams, rng: &mut R) -> u64 {
    simulate_detection(state, params, rng).count
}

/// Dark iff `count <= threshold`.
pub fn classify(count: u64, threshold: i64) -> Classification {
    if (count as i128) <= threshold as i128 {
        Classification::Dark
    } else {
        Classification::Bright
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Histogram {
    pub bins: BTreeMap<u64, u64>,
    pub total_shots: u64,
}

pub fn build_histogram(counts: &[u64]) -> Histogram {
    let mut bins = BTreeMap::new();
    for &c in counts {
        *bins.entry(c).or_insert(0) += 1;
    }
    Histogram {
        bins,
        total_shots: counts.len() as u64,
    }
}

impl Histogram {
    pub fn is_empty(&self) -> bool {
        self.total_shots == 0
    }

    pub fn max_count(&self) -> Option<u64> {
        self.bins.keys().next_back().copied()
    }

    /// Occurrences with count `<= threshold`.
    pub fn count_at_or_below(&self, threshold: i64) -> u64 {
        if threshold < 0 {
            return 0;
        }
        self.bins.range(..=threshold as u64).map(|(_, n)| n).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.total_shots == 0 {
            return f64::NAN;
        }
        self.bins.iter().map(|(&c, &n)| c as f64 * n as f64).sum::<f64>() / self.total_shots as f64
    }

    /// Bin with the most occurrences (smallest count on ties).
    pub fn mode(&self) -> Option<u64> {
        let mut best: Option<(u64, u64)> = None;
        for (&c, &n) in &self.bins {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((c, n));
            }
        }
        best.map(|(c, _)| c)
    }

    /// `count,occurrences` rows in ascending count order.
    pub fn write_rows<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (c, n) in &self.bins {
            writeln!(out, "{c},{n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdResult {
    /// Counts at or below are classified dark.
    pub threshold: i64,
    pub fidelity: f64,
    pub errors_bright: u64,
    pub errors_dark: u64,
    pub total_shots: u64,
}

impl ThresholdResult {
    pub fn total_errors(&self) -> u64 {
        self.errors_bright + self.errors_dark
    }
}

pub fn evaluate_threshold(bright: &Histogram, dark: &Histogram, threshold: i64) -> ThresholdResult {
    let errors_bright = bright.count_at_or_below(threshold);
    let errors_dark = dark.total_shots - dark.count_at_or_below(threshold);
    let total = bright.total_shots + dark.total_shots;
    ThresholdResult {
        threshold,
        fidelity: 1.0 - (errors_bright + errors_dark) as f64 / total as f64,
        errors_bright,
        errors_dark,
        total_shots: total,
    }
}

/// Threshold minimizing total misclassifications, scanning -1 through the
/// largest observed count; ties go to the smaller threshold.
pub fn optimal_threshold(bright: &Histogram, dark: &Histogram) -> Result<ThresholdResult> {
    if bright.is_empty() || dark.is_empty() {
        return Err(Error::domain("optimal_threshold needs two non-empty histograms"));
    }
    let max = bright.max_count().max(dark.max_count()).unwrap_or(0) as i64;
    let mut best = evaluate_threshold(bright, dark, -1);
    // running sums over the ascending bins keep the scan linear
    let mut bright_le = 0u64;
    let mut dark_le = 0u64;
    let mut b_iter = bright.bins.iter().peekable();
    let mut d_iter = dark.bins.iter().peekable();
    for th in 0..=max {
        while let Some((_, n)) = b_iter.next_if(|(c, _)| **c as i64 <= th) {
            bright_le += n;
        }
        while let Some((_, n)) = d_iter.next_if(|(c, _)| **c as i64 <= th) {
            dark_le += n;
        }
        let errors = bright_le + (dark.total_shots - dark_le);
        if errors < best.total_errors() {
            best = ThresholdResult {
                threshold: th,
                fidelity: 1.0 - errors as f64 / best.total_shots as f64,
                errors_bright: bright_le,
                errors_dark: dark.total_shots - dark_le,
                total_shots: best.total_shots,
            };
        }
    }
    Ok(best)
}

/// Simulates `shots` bright and `shots` shelved detections. Bright shots use
/// random stream point 0, shelved shots point 1.
pub fn simulate_histograms(params: &DetectionParams, shots: u32, seed: u64) -> Result<(Histogram, Histogram)> {
    params.validate()?;
    let run = |state: ReadoutState, point: u32| -> Vec<u64> {
        (0..shots)
            .into_par_iter()
            .map(|i| simulate_counts(state, params, &mut shot_rng(seed, point, i)))
            .collect()
    };
    let bright = run(ReadoutState::Bright, 0);
    let dark = run(ReadoutState::Shelved, 1);
    Ok((build_histogram(&bright), build_histogram(&dark)))
}

pub fn poisson_cdf(k: i64, mean: f64) -> f64 {
    if k < 0 {
        return 0.0;
    }
    if mean <= 0.0 {
        return 1.0;
    }
    PoissonDist::new(mean).expect("positive mean").cdf(k as u64)
}

/// Probability that a bright ion is classified dark.
pub fn bright_error_probability(params: &DetectionParams, threshold: i64) -> f64 {
    poisson_cdf(threshold, (params.bright_rate + params.dark_rate) * params.window)
}

const DECAY_QUADRATURE_INTERVALS: usize = 2000;

/// Probability that a shelved ion is classified bright, including decay of
/// the shelf during the window.
pub fn dark_error_probability(params: &DetectionParams, threshold: i64) -> f64 {
    let w = params.window;
    let background = params.dark_rate * w;
    let survive = 1.0 - shelf_decay_probability(w, params.shelf_lifetime);
    let mut p = survive * (1.0 - poisson_cdf(threshold, background));
    if params.shelf_lifetime.is_finite() {
        // Simpson over the decay time
        let n = DECAY_QUADRATURE_INTERVALS;
        let h = w / n as f64;
        let tau = params.shelf_lifetime;
        let f = |t: f64| (-t / tau).exp() / tau * (1.0 - poisson_cdf(threshold, background + params.bright_rate * (w - t)));
        let mut s = f(0.0) + f(w);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        p += s * h / 3.0;
    }
    p
}

/// Threshold minimizing the expected error with equal bright/dark priors.
pub fn analytic_optimal_threshold(params: &DetectionParams) -> i64 {
    let bright_mean = (params.bright_rate + params.dark_rate) * params.window;
    let upper = (bright_mean + 10.0 * bright_mean.sqrt() + 10.0).ceil() as i64;
    let mut best = (-1, f64::INFINITY);
    for th in -1..=upper {
        let e = bright_error_probability(params, th) + dark_error_probability(params, th);
        if e < best.1 {
            best = (th, e);
        }
    }
    best.0
}

/// Misclassification probability of a bright ion for the background-free,
/// decay-free model at a fixed threshold, as a function of window length.
pub fn ideal_bright_error(bright_rate: f64, window: f64, threshold: i64) -> f64 {
    poisson_cdf(threshold, bright_rate * window)
}
