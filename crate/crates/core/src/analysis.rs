//! Parameter extraction from Rabi scans, binomial intervals, and scalar
//! calibration by bisection.
//!
//! Rabi curves are fit to
//!
//! ```text
//! p(t) = offset - amplitude * cos(2π f t + phase) * exp(-(t/τ)²)
//! ```
//!
//! so `τ` is the 1/e time of the Gaussian envelope. Internally the fit runs on
//! `γ = 1/τ²` with time scaled by the data span, which lets undamped data
//! settle at `γ = 0` (reported as `τ = ∞`).

use std::f64::consts::PI;

use nalgebra::{SMatrix, SVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{Error, Result};

const N_PARAMS: usize = 5;
const MAX_ITERATIONS: usize = 200;
const REL_PARAM_TOL: f64 = 1e-8;

type Vec5 = SVector<f64, N_PARAMS>;
type Mat5 = SMatrix<f64, N_PARAMS, N_PARAMS>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RabiPoint {
    pub t: f64,
    pub p: f64,
    pub stderr: Option<f64>,
}

impl RabiPoint {
    pub fn new(t: f64, p: f64, stderr: Option<f64>) -> Self {
        RabiPoint { t, p, stderr }
    }
}

/// Gaussian-damped cosine in physical units. `decay_rate_sq` is `1/τ²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampedCosine {
    pub offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub decay_rate_sq: f64,
    pub phase: f64,
}

impl DampedCosine {
    pub fn from_decay_time(offset: f64, amplitude: f64, frequency: f64, decay_time: f64, phase: f64) -> Self {
        DampedCosine {
            offset,
            amplitude,
            frequency,
            decay_rate_sq: if decay_time.is_infinite() { 0.0 } else { decay_time.powi(-2) },
            phase,
        }
    }

    pub fn params(&self) -> [f64; N_PARAMS] {
        [self.offset, self.amplitude, self.frequency, self.decay_rate_sq, self.phase]
    }

    pub fn from_params(p: [f64; N_PARAMS]) -> Self {
        DampedCosine {
            offset: p[0],
            amplitude: p[1],
            frequency: p[2],
            decay_rate_sq: p[3],
            phase: p[4],
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let psi = 2.0 * PI * self.frequency * t + self.phase;
        self.offset - self.amplitude * psi.cos() * (-self.decay_rate_sq * t * t).exp()
    }

    /// Partial derivatives in [`DampedCosine::params`] order.
    pub fn gradient(&self, t: f64) -> [f64; N_PARAMS] {
        let psi = 2.0 * PI * self.frequency * t + self.phase;
        let env = (-self.decay_rate_sq * t * t).exp();
        let (s, c) = psi.sin_cos();
        let a = self.amplitude;
        [1.0, -c * env, a * s * env * 2.0 * PI * t, a * c * env * t * t, a * s * env]
    }

    pub fn decay_time(&self) -> f64 {
        if self.decay_rate_sq <= 0.0 {
            f64::INFINITY
        } else {
            self.decay_rate_sq.sqrt().recip()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub frequency: f64,
    pub decay_time: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub phase: f64,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
    /// One-sigma estimates from the Gauss-Newton covariance diagonal, in the
    /// order frequency, decay_time, amplitude, offset, phase.
    pub uncertainties: [f64; N_PARAMS],
    pub chi_squared: f64,
    pub model: DampedCosine,
}

impl FitResult {
    /// `parameter value uncertainty` lines.
    pub fn report(&self) -> String {
        let rows = [
            ("frequency_hz", self.frequency, self.uncertainties[0]),
            ("decay_time_s", self.decay_time, self.uncertainties[1]),
            ("amplitude", self.amplitude, self.uncertainties[2]),
            ("offset", self.offset, self.uncertainties[3]),
            ("phase_rad", self.phase, self.uncertainties[4]),
        ];
        let mut out = String::new();
        for (k, v, u) in rows {
            out.push_str(&format!("{k} = {v:.9e} +/- {u:.3e}\n"));
        }
        out.push_str(&format!("residual_rms = {:.6e}\n", self.residual_rms));
        out.push_str(&format!("chi_squared = {:.6e}\n", self.chi_squared));
        out.push_str(&format!("iterations = {}\n", self.iterations));
        out.push_str(&format!("converged = {}\n", self.converged));
        out
    }
}

/// Scaled problem: time in units of the data span, frequency in cycles per
/// span, decay rate in 1/span².
struct Problem {
    s: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    span: f64,
}

impl Problem {
    fn model(&self, th: &Vec5) -> DampedCosine {
        DampedCosine::from_params([th[0], th[1], th[2], th[3], th[4]])
    }

    fn chi2(&self, th: &Vec5) -> f64 {
        let m = self.model(th);
        self.s.iter().zip(&self.y).zip(&self.w).map(|((&s, &y), &w)| w * (y - m.value(s)).powi(2)).sum()
    }

    fn normal_equations(&self, th: &Vec5) -> (Mat5, Vec5) {
        let m = self.model(th);
        let mut a = Mat5::zeros();
        let mut g = Vec5::zeros();
        for ((&s, &y), &w) in self.s.iter().zip(&self.y).zip(&self.w) {
            let j = Vec5::from(m.gradient(s));
            let r = y - m.value(s);
            a += w * j * j.transpose();
            g += w * r * j;
        }
        (a, g)
    }
}

/// Weighted least-squares fit of a Gaussian-damped sinusoid.
///
/// Points with a non-positive or non-finite stderr take the smallest positive
/// stderr in the set; if none has one the fit is unweighted.
pub fn fit_rabi(points: &[RabiPoint]) -> Result<FitResult> {
    if points.len() < N_PARAMS {
        return Err(Error::domain(format!(
            "fit_rabi needs at least {N_PARAMS} points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.t.is_finite() || !p.p.is_finite()) {
        return Err(Error::domain("fit_rabi points must be finite"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.t.total_cmp(&b.t));
    let t0 = pts[0].t;
    let span = pts[pts.len() - 1].t - t0;
    if !(span > 0.0) {
        return Err(Error::domain("fit_rabi points must span a positive time interval"));
    }
    if t0 < 0.0 {
        return Err(Error::domain("fit_rabi times must be >= 0"));
    }

    let floor = pts
        .iter()
        .filter_map(|p| p.stderr)
        .filter(|s| *s > 0.0 && s.is_finite())
        .fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = pts
        .iter()
        .map(|p| match p.stderr {
            _ if floor.is_infinite() => 1.0,
            Some(s) if s > 0.0 && s.is_finite() => s.powi(-2),
            _ => floor.powi(-2),
        })
        .collect();
    let weighted = floor.is_finite();

    let problem = Problem {
        s: pts.iter().map(|p| p.t / span).collect(),
        y: pts.iter().map(|p| p.p).collect(),
        w: weights,
        span,
    };

    let ys = &problem.y;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let amplitude0 = (hi - lo) / 2.0;
    if amplitude0 <= 1e-12 {
        let residual_rms = rms(ys.iter().map(|y| y - mean));
        let model = DampedCosine::from_params([mean, 0.0, 0.0, 0.0, 0.0]);
        return Ok(FitResult {
            frequency: 0.0,
            decay_time: f64::INFINITY,
            amplitude: 0.0,
            offset: mean,
            phase: 0.0,
            residual_rms,
            converged: false,
            iterations: 0,
            uncertainties: [f64::NAN; N_PARAMS],
            chi_squared: problem.chi2(&Vec5::from([mean, 0.0, 0.0, 0.0, 0.0])),
            model,
        });
    }

    let f0 = spectral_peak(&problem.s, ys, mean);
    let gamma0 = envelope_decay(&problem.s, ys, mean);
    let start = Vec5::from([mean, amplitude0, f0, gamma0, 0.0]);
    let (theta, iterations, converged) = levenberg_marquardt(&problem, start);
    Ok(finish(&problem, theta, iterations, converged, weighted))
}

fn rms(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), r| (s + r * r, n + 1));
    (s / n as f64).sqrt()
}

/// Frequency (cycles per unit scaled time) of the largest peak of the
/// discrete spectrum, 8x oversampled, ignoring frequencies under one cycle.
fn spectral_peak(s: &[f64], y: &[f64], mean: f64) -> f64 {
    let n = s.len();
    let oversample = 8;
    let k_max = oversample * n / 2;
    let mut best = (1.0, f64::NEG_INFINITY);
    for k in oversample..=k_max {
        let f = k as f64 / oversample as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (&si, &yi) in s.iter().zip(y) {
            let (sn, cs) = (2.0 * PI * f * si).sin_cos();
            re += (yi - mean) * cs;
            im -= (yi - mean) * sn;
        }
        let power = re * re + im * im;
        if power > best.1 {
            best = (f, power);
        }
    }
    best.0
}

/// Initial `γ` from the analytic-signal envelope, regressing `ln|z|` on `s²`
/// over the central 80% of the record. Assumes near-uniform sampling.
fn envelope_decay(s: &[f64], y: &[f64], mean: f64) -> f64 {
    let n = y.len();
    let mut buf: Vec<Complex<f64>> = y.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == n / 2) {
            continue;
        }
        if k < n.div_ceil(2) {
            *c *= 2.0;
        } else {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let env: Vec<f64> = buf.iter().map(|c| c.norm() / n as f64).collect();
    let lo = n / 10;
    let hi = n - n / 10;
    let (mut sx, mut sy, mut sxx, mut sxy, mut m) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in lo..hi {
        if env[i] <= 1e-9 {
            continue;
        }
        let x = s[i] * s[i];
        let v = env[i].ln();
        sx += x;
        sy += v;
        sxx += x * x;
        sxy += x * v;
        m += 1.0;
    }
    let denom = m * sxx - sx * sx;
    if m < 3.0 || denom.abs() < 1e-300 {
        return 0.0;
    }
    let slope = (m * sxy - sx * sy) / denom;
    (-slope).max(0.0)
}

fn levenberg_marquardt(problem: &Problem, start: Vec5) -> (Vec5, usize, bool) {
    let mut theta = start;
    let mut chi2 = problem.chi2(&theta);
    let mut lambda = 1e-3;
    for iter in 1..=MAX_ITERATIONS {
        let (a, g) = problem.normal_equations(&theta);
        let diag_floor = a.diagonal().max() * 1e-12 + 1e-300;
        loop {
            let mut damped = a;
            for i in 0..N_PARAMS {
                damped[(i, i)] += lambda * a[(i, i)].max(diag_floor);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                if lambda > 1e20 {
                    return (theta, iter, false);
                }
                continue;
            };
            let small = step.norm() <= REL_PARAM_TOL * (theta.norm() + REL_PARAM_TOL);
            let trial = theta + step;
            let trial_chi2 = problem.chi2(&trial);
            if trial_chi2 <= chi2 {
                theta = trial;
                chi2 = trial_chi2;
                lambda = (lambda / 10.0).max(1e-12);
                if small {
                    return (theta, iter, true);
                }
                break;
            }
            if small {
                return (theta, iter, true);
            }
            lambda *= 10.0;
            if lambda > 1e20 {
                return (theta, iter, false);
            }
        }
    }
    (theta, MAX_ITERATIONS, false)
}

fn finish(problem: &Problem, mut theta: Vec5, iterations: usize, converged: bool, weighted: bool) -> FitResult {
    // canonical form: positive frequency, positive amplitude, phase in (-π, π]
    if theta[2] < 0.0 {
        theta[2] = -theta[2];
        theta[4] = -theta[4];
    }
    if theta[1] < 0.0 {
        theta[1] = -theta[1];
        theta[4] += PI;
    }
    theta[4] = wrap_phase(theta[4]);

    let span = problem.span;
    let (a, _) = problem.normal_equations(&theta);
    let chi2 = problem.chi2(&theta);
    let dof = (problem.s.len() as f64 - N_PARAMS as f64).max(1.0);
    let scale = if weighted { 1.0 } else { chi2 / dof };
    let var = a.try_inverse().map(|inv| inv.diagonal() * scale);
    let sd = |i: usize| var.as_ref().map_or(f64::NAN, |v| v[i].max(0.0).sqrt());

    let gamma_scaled = theta[3];
    let decay_time = if gamma_scaled <= 0.0 {
        f64::INFINITY
    } else {
        span / gamma_scaled.sqrt()
    };
    let decay_sd = if gamma_scaled <= 0.0 {
        f64::NAN
    } else {
        0.5 * span * gamma_scaled.powf(-1.5) * sd(3)
    };
    let scaled = problem.model(&theta);
    let residual_rms = rms(problem.s.iter().zip(&problem.y).map(|(&s, &y)| y - scaled.value(s)));
    let model = DampedCosine {
        offset: theta[0],
        amplitude: theta[1],
        frequency: theta[2] / span,
        decay_rate_sq: gamma_scaled / (span * span),
        phase: theta[4],
    };
    FitResult {
        frequency: model.frequency,
        decay_time,
        amplitude: model.amplitude,
        offset: model.offset,
        phase: model.phase,
        residual_rms,
        converged: converged && model.frequency > 0.0 && decay_time > 0.0,
        iterations,
        uncertainties: [sd(2) / span, decay_sd, sd(1), sd(0), sd(4)],
        chi_squared: chi2,
        model,
    }
}

fn wrap_phase(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    p
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::domain("wilson_interval needs at least one trial"));
    }
    if successes > trials {
        return Err(Error::domain(format!("successes ({successes}) exceed trials ({trials})")));
    }
    if !(z >= 0.0) || !z.is_finite() {
        return Err(Error::domain(format!("z must be finite and >= 0, got {z}")));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let low = if successes == 0 { 0.0 } else { (centre - half).clamp(0.0, p) };
    let high = if successes == trials { 1.0 } else { (centre + half).clamp(p, 1.0) };
    Ok((low, high))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub value: f64,
    pub achieved: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const MAX_BISECTIONS: usize = 60;

/// Bisection on a monotone statistic until it lies within `tolerance` of
/// `target`, or [`MAX_BISECTIONS`] halvings.
pub fn calibrate_scalar<F>(mut statistic: F, target: f64, bounds: (f64, f64), tolerance: f64) -> Result<Calibration>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut lo, mut hi) = bounds;
    if !(lo < hi) {
        return Err(Error::domain(format!("calibration bounds must satisfy low < high, got {bounds:?}")));
    }
    let mut f_lo = statistic(lo)?;
    let f_hi = statistic(hi)?;
    let done = |v: f64| (v - target).abs() < tolerance;
    if done(f_lo) {
        return Ok(Calibration {
            value: lo,
            achieved: f_lo,
            iterations: 0,
            converged: true,
        });
    }
    if done(f_hi) {
        return Ok(Calibration {
            value: hi,
            achieved: f_hi,
            iterations: 0,
            converged: true,
        });
    }
    if (f_lo - target).signum() == (f_hi - target).signum() {
        return Err(Error::Bracketing {
            target,
            low: bounds.0,
            high: bounds.1,
            at_low: f_lo,
            at_high: f_hi,
        });
    }
    let mut last = (lo, f_lo);
    for iter in 1..=MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let f_mid = statistic(mid)?;
        last = (mid, f_mid);
        if done(f_mid) {
            return Ok(Calibration {
                value: mid,
                achieved: f_mid,
                iterations: iter,
                converged: true,
            });
        }
        if (f_mid - target).signum() == (f_lo - target).signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        value: last.0,
        achieved: last.1,
        iterations: MAX_BISECTIONS,
        converged: false,
    })
}
