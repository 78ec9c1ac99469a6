//! Batch front end: `histogram`, `rabi-scan`, `calibrate`, `validate-config`.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{calibrate_scalar, fit_rabi, wilson_interval, Calibration, RabiPoint};
use crate::config::ExperimentConfig;
use crate::dynamics::{ensemble_optical_excitation, Populations, PumpModel};
use crate::levels::{build_ground_manifold, AtomicConstants, CLOCK_UPPER};
use crate::protocol::{run_sweep, with_workers, Experiment, PulseStep, SweepPoint, Trigger, SWEEP_HEADER};
use crate::readout::{
    analytic_optimal_threshold, bright_error_probability, dark_error_probability, optimal_threshold, simulate_histograms,
};
use crate::{Error, Result};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_BRACKETING: i32 = 4;

/// z for the two-sided 95% Wilson interval in the histogram summary.
const WILSON_Z: f64 = 1.959_963_984_540_054;

#[derive(Debug, Parser)]
#[command(name = "baqsim", version, about = "Shot-by-shot 137Ba+ qubit experiment simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bright and dark photon-count histograms with the optimal threshold.
    Histogram(Common),
    /// Run the configured sweep, write the curve and a damped-cosine fit.
    RabiScan(Common),
    /// Tune one physics knob to a target statistic and write the new config.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// One of: dark_rate, pol_impurity, ac_detuning_amplitude,
        /// mag_detuning_rms, rabi_rel_rms.
        #[arg(long)]
        knob: String,
        /// Target statistic (knob-specific default if omitted).
        #[arg(long)]
        target: Option<f64>,
    },
    /// Parse and validate a config, print its hash.
    ValidateConfig(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, required_unless_present = "recipe", conflicts_with = "recipe")]
    pub config: Option<PathBuf>,
    /// Bundled recipe: fig2, fig4 or fig5.
    #[arg(long)]
    pub recipe: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `shots` and `sweep.shots_per_point`.
    #[arg(long)]
    pub shots: Option<u32>,
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Common {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.recipe) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::recipe(name)?,
            (None, None) => return Err(Error::Config("one of --config or --recipe is required".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(n) = self.shots {
            cfg.shots = n;
            if let Some(sweep) = &mut cfg.sweep {
                sweep.shots_per_point = n;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Bracketing { .. } => EXIT_BRACKETING,
        Error::Domain(_) | Error::Io(_) => EXIT_RUNTIME,
    }
}

/// Runs a command and returns the files it wrote (or, for
/// `validate-config`, nothing).
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::Histogram(c) => {
            let cfg = c.load()?;
            with_workers(c.workers, || cmd_histogram(&cfg))?
        }
        Command::RabiScan(c) => {
            let cfg = c.load()?;
            with_workers(c.workers, || cmd_rabi_scan(&cfg))?
        }
        Command::Calibrate { common, knob, target } => {
            let cfg = common.load()?;
            let knob: Knob = knob.parse()?;
            with_workers(common.workers, || cmd_calibrate(&cfg, knob, *target))?
        }
        Command::ValidateConfig(c) => {
            let cfg = c.load()?;
            println!("ok config_hash={}", cfg.hash());
            Ok(Vec::new())
        }
    }
}

fn create_output(cfg: &ExperimentConfig, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(name);
    let mut f = fs::File::create(&path)?;
    writeln!(f, "{}", cfg.header_comment())?;
    f.write_all(body.as_bytes())?;
    Ok(path)
}

pub fn cmd_histogram(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let det = cfg.detection.params();
    let (bright, dark) = simulate_histograms(&det, cfg.shots, cfg.seed)?;
    let best = optimal_threshold(&bright, &dark)?;
    let correct = best.total_shots - best.total_errors();
    let (lo, hi) = wilson_interval(correct, best.total_shots, WILSON_Z)?;
    let analytic_th = analytic_optimal_threshold(&det);
    let analytic_fid =
        1.0 - 0.5 * (bright_error_probability(&det, analytic_th) + dark_error_probability(&det, analytic_th));

    let mut files = Vec::new();
    for (name, hist) in [("hist_bright.csv", &bright), ("hist_dark.csv", &dark)] {
        let mut body = b"count,shots\n".to_vec();
        hist.write_rows(&mut body)?;
        files.push(create_output(cfg, name, &String::from_utf8_lossy(&body))?);
    }
    let summary = format!(
        "shots_per_state = {}\n\
         bright_rate_cps = {}\n\
         dark_rate_cps = {}\n\
         window_s = {}\n\
         shelf_lifetime_s = {}\n\
         bright_mean_count = {:.4}\n\
         dark_mean_count = {:.4}\n\
         threshold = {}\n\
         errors_bright = {}\n\
         errors_dark = {}\n\
         errors_total = {}\n\
         fidelity = {:.6}\n\
         fidelity_wilson95_low = {:.6}\n\
         fidelity_wilson95_high = {:.6}\n\
         analytic_threshold = {}\n\
         analytic_fidelity = {:.6}\n",
        cfg.shots,
        det.bright_rate,
        det.dark_rate,
        det.window,
        det.shelf_lifetime,
        bright.mean(),
        dark.mean(),
        best.threshold,
        best.errors_bright,
        best.errors_dark,
        best.total_errors(),
        best.fidelity,
        lo,
        hi,
        analytic_th,
        analytic_fid,
    );
    files.push(create_output(cfg, "summary.txt", &summary)?);
    Ok(files)
}

pub fn cmd_rabi_scan(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let spec = cfg
        .sweep_spec()?
        .ok_or_else(|| Error::Config("rabi-scan needs a [sweep] section".into()))?;
    let levels = build_ground_manifold(cfg.physics.b_field_gauss, &AtomicConstants::BA137)?;
    let points = run_sweep(&spec, &cfg.physics, &levels, cfg.seed)?;

    let mut curve = format!("{SWEEP_HEADER}\n").into_bytes();
    crate::protocol::write_sweep_rows(&points, &mut curve)?;
    let mut files = vec![create_output(cfg, "curve.csv", &String::from_utf8_lossy(&curve))?];

    let fit = match fit_rabi(&rabi_points(&points)) {
        Ok(fit) => format!("parameter = {}\n{}", spec.parameter, fit.report()),
        Err(e) => format!("parameter = {}\nconverged = false\nerror = {e}\n", spec.parameter),
    };
    files.push(create_output(cfg, "fit.txt", &fit)?);
    Ok(files)
}

pub fn rabi_points(points: &[SweepPoint]) -> Vec<RabiPoint> {
    points
        .iter()
        .map(|p| RabiPoint {
            t: p.x,
            p: p.p_dark,
            stderr: Some(p.stderr),
        })
        .collect()
}

pub fn cmd_calibrate(cfg: &ExperimentConfig, knob: Knob, target: Option<f64>) -> Result<Vec<PathBuf>> {
    let (tuned, cal, target) = calibrate(cfg, knob, target)?;
    let body = format!(
        "# calibrated knob={} target={} achieved={} value={} iterations={} converged={}\n{}",
        knob.name(),
        target,
        cal.achieved,
        cal.value,
        cal.iterations,
        cal.converged,
        tuned.to_toml()
    );
    Ok(vec![create_output(&tuned, "calibrated.toml", &body)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knob {
    DarkRate,
    PolImpurity,
    AcDetuningAmplitude,
    MagDetuningRms,
    RabiRelRms,
}

impl Knob {
    pub const ALL: [Knob; 5] = [
        Knob::DarkRate,
        Knob::PolImpurity,
        Knob::AcDetuningAmplitude,
        Knob::MagDetuningRms,
        Knob::RabiRelRms,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Knob::DarkRate => "dark_rate",
            Knob::PolImpurity => "pol_impurity",
            Knob::AcDetuningAmplitude => "ac_detuning_amplitude",
            Knob::MagDetuningRms => "mag_detuning_rms",
            Knob::RabiRelRms => "rabi_rel_rms",
        }
    }

    /// Statistic the knob is tuned against, and its default target.
    pub fn describe(self) -> (&'static str, f64) {
        match self {
            Knob::DarkRate => ("expected misclassifications per 10000 shots at the optimal threshold", 13.0),
            Knob::PolImpurity => ("pumped population of (F=2, mF=0)", 0.93),
            Knob::AcDetuningAmplitude => (
                "shelving probability with the optical pulse at the end of the sweep over that at the trigger",
                0.75,
            ),
            Knob::MagDetuningRms | Knob::RabiRelRms => {
                ("fitted envelope 1/e time of the noise-averaged sweep curve, s (default: physics.tau_gauss)", f64::NAN)
            }
        }
    }

    fn bounds(self) -> (f64, f64) {
        match self {
            Knob::DarkRate => (0.0, 1500.0),
            Knob::PolImpurity => (0.0, 1.0),
            // first zero of the π-pulse response sits near 290 kHz at 800 µs
            Knob::AcDetuningAmplitude => (0.0, 250e3),
            Knob::MagDetuningRms => (0.0, 100e3),
            Knob::RabiRelRms => (0.0, 0.3),
        }
    }

    fn tolerance(self) -> f64 {
        match self {
            Knob::DarkRate => 1e-3,
            Knob::PolImpurity | Knob::AcDetuningAmplitude => 1e-6,
            Knob::MagDetuningRms | Knob::RabiRelRms => 1e-9,
        }
    }

    pub fn get(self, cfg: &ExperimentConfig) -> f64 {
        match self {
            Knob::DarkRate => cfg.detection.dark_rate,
            Knob::PolImpurity => cfg.physics.pump.pol_impurity,
            Knob::AcDetuningAmplitude => cfg.physics.ac_line.detuning_amplitude,
            Knob::MagDetuningRms => cfg.physics.mag_detuning_rms,
            Knob::RabiRelRms => cfg.physics.rabi_rel_rms,
        }
    }

    pub fn set(self, cfg: &mut ExperimentConfig, value: f64) {
        match self {
            Knob::DarkRate => cfg.detection.dark_rate = value,
            Knob::PolImpurity => cfg.physics.pump.pol_impurity = value,
            Knob::AcDetuningAmplitude => cfg.physics.ac_line.detuning_amplitude = value,
            Knob::MagDetuningRms => cfg.physics.mag_detuning_rms = value,
            Knob::RabiRelRms => cfg.physics.rabi_rel_rms = value,
        }
    }

    /// Deterministic statistic of `cfg`.
    pub fn statistic(self, cfg: &ExperimentConfig) -> Result<f64> {
        match self {
            Knob::DarkRate => {
                let det = cfg.detection.params();
                let th = analytic_optimal_threshold(&det);
                Ok(5000.0 * (bright_error_probability(&det, th) + dark_error_probability(&det, th)))
            }
            Knob::PolImpurity => {
                let levels = build_ground_manifold(cfg.physics.b_field_gauss, &AtomicConstants::BA137)?;
                let model = PumpModel::new(&levels, cfg.physics.b_field_gauss, &AtomicConstants::BA137)?;
                Ok(model.evolve(&Populations::uniform_ground(), &cfg.physics.pump)?.ground[CLOCK_UPPER])
            }
            Knob::AcDetuningAmplitude => ac_shelving_ratio(cfg),
            Knob::MagDetuningRms | Knob::RabiRelRms => ensemble_decay_time(cfg),
        }
    }
}

impl FromStr for Knob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Knob::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Knob::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown knob `{s}`; valid knobs: {}", names.join(", ")))
        })
    }
}

/// Bisects `knob` until its statistic hits `target` (or the knob default).
/// Returns the updated config, the bisection record and the target used.
pub fn calibrate(cfg: &ExperimentConfig, knob: Knob, target: Option<f64>) -> Result<(ExperimentConfig, Calibration, f64)> {
    let target = target.unwrap_or(match knob {
        Knob::MagDetuningRms | Knob::RabiRelRms => cfg.physics.tau_gauss,
        _ => knob.describe().1,
    });
    if !target.is_finite() {
        return Err(Error::Config(format!("calibration target must be finite, got {target}")));
    }
    let mut trial = cfg.clone();
    let cal = calibrate_scalar(
        |v| {
            knob.set(&mut trial, v);
            knob.statistic(&trial)
        },
        target,
        knob.bounds(),
        knob.tolerance(),
    )?;
    let mut tuned = cfg.clone();
    knob.set(&mut tuned, cal.value);
    tuned.validate()?;
    Ok((tuned, cal, target))
}

fn sweep_experiments(cfg: &ExperimentConfig) -> Result<(Vec<f64>, Vec<Experiment>)> {
    let spec = cfg
        .sweep_spec()?
        .ok_or_else(|| Error::Config("this knob needs a [sweep] section".into()))?;
    let levels = build_ground_manifold(cfg.physics.b_field_gauss, &AtomicConstants::BA137)?;
    let exps = spec.experiments(&cfg.physics, &levels)?;
    Ok((spec.values, exps))
}

fn ensemble_decay_time(cfg: &ExperimentConfig) -> Result<f64> {
    let (xs, exps) = sweep_experiments(cfg)?;
    let points: Vec<RabiPoint> = xs
        .iter()
        .zip(&exps)
        .map(|(&t, e)| RabiPoint {
            t,
            p: e.dark_probability(),
            stderr: None,
        })
        .collect();
    Ok(fit_rabi(&points)?.decay_time)
}

fn ac_shelving_ratio(cfg: &ExperimentConfig) -> Result<f64> {
    let spec = cfg
        .sweep_spec()?
        .ok_or_else(|| Error::Config("ac_detuning_amplitude needs a [sweep] section".into()))?;
    let last = *spec.values.last().expect("validated sweep has values");
    let seq = spec.parameter.apply(&spec.template, last)?;
    let mut params = cfg.physics;
    if let Trigger::LineTrigger { phase } = seq.trigger {
        params.ac_line.trigger_phase = phase;
    }
    let epoch = seq.trigger_epoch();
    let mut t = 0.0;
    for step in &seq.steps {
        if let PulseStep::IrPulse { duration, detuning } = *step {
            let at_end = ensemble_optical_excitation(&params, duration, detuning, t - epoch);
            let at_start = ensemble_optical_excitation(&params, duration, detuning, 0.0);
            return Ok(at_end / at_start);
        }
        t += step.duration();
    }
    Err(Error::Config("ac_detuning_amplitude needs an ir_pulse step in the sequence".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knob_names_round_trip() {
        for k in Knob::ALL {
            assert_eq!(k.name().parse::<Knob>().unwrap(), k);
        }
        let err = "nonexistent".parse::<Knob>().unwrap_err();
        let msg = err.to_string();
        for k in Knob::ALL {
            assert!(msg.contains(k.name()), "{msg}");
        }
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Domain("x".into())), EXIT_RUNTIME);
        let b = Error::Bracketing {
            target: 1.0,
            low: 0.0,
            high: 1.0,
            at_low: 2.0,
            at_high: 3.0,
        };
        assert_eq!(exit_code(&b), EXIT_BRACKETING);
    }

    #[test]
    fn pol_impurity_calibrates_to_target() {
        let cfg = ExperimentConfig::recipe("fig4").unwrap();
        let (tuned, cal, _) = calibrate(&cfg, Knob::PolImpurity, None).unwrap();
        assert!(cal.converged);
        assert!((Knob::PolImpurity.statistic(&tuned).unwrap() - 0.93).abs() < 1e-5);
    }

    #[test]
    fn dark_rate_calibrates_to_target() {
        let cfg = ExperimentConfig::recipe("fig2").unwrap();
        let (tuned, cal, target) = calibrate(&cfg, Knob::DarkRate, None).unwrap();
        assert_eq!(target, 13.0);
        assert!((cal.achieved - 13.0).abs() < 0.05, "{cal:?}");
        assert!(tuned.detection.dark_rate > 0.0);
    }
}
