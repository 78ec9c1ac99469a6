use baqsim::config::ExperimentConfig;
use baqsim::dynamics::{AcLine, PhysicsParams, PumpParams};
use baqsim::levels::{build_ground_manifold, AtomicConstants, Sublevel};
use baqsim::protocol::{
    run_shot, run_sweep, run_sweep_records, with_workers, Experiment, PulseSequence, PulseStep, SweepSpec, Trigger,
};
use baqsim::readout::DetectionParams;
use proptest::prelude::*;

fn levels() -> Vec<Sublevel> {
    build_ground_manifold(8.9, &AtomicConstants::BA137).unwrap()
}

fn noisy_params() -> PhysicsParams {
    PhysicsParams {
        laser_linewidth: 10e3,
        rabi_rel_rms: 0.04,
        ac_line: AcLine {
            detuning_amplitude: 80e3,
            ..AcLine::default()
        },
        pump: PumpParams {
            pol_impurity: 0.01,
            ..PumpParams::default()
        },
        ..PhysicsParams::default()
    }
}

fn microwave_sweep(ir_duration: f64, shots: u32) -> SweepSpec {
    SweepSpec {
        template: PulseSequence::new(
            vec![
                PulseStep::Pump(PumpParams::default()),
                PulseStep::MicrowavePulse {
                    duration: 0.0,
                    detuning: 0.0,
                },
                PulseStep::IrPulse {
                    duration: ir_duration,
                    detuning: 0.0,
                },
            ],
            Trigger::LineTrigger { phase: 0.0 },
        ),
        parameter: "steps[1].duration".parse().unwrap(),
        values: (0..=40).map(|i| i as f64 * 2.5e-6).collect(),
        shots_per_point: shots,
    }
}

#[test]
fn sweeps_are_bit_identical_across_worker_counts() {
    let cfg = ExperimentConfig::recipe("fig5").unwrap();
    let spec = cfg.sweep_spec().unwrap().unwrap();
    let lv = levels();
    let one = with_workers(Some(1), || run_sweep_records(&spec, &cfg.physics, &lv, 99)).unwrap().unwrap();
    let many = with_workers(Some(7), || run_sweep_records(&spec, &cfg.physics, &lv, 99)).unwrap().unwrap();
    assert_eq!(one, many);
    let other_seed = run_sweep_records(&spec, &cfg.physics, &lv, 100).unwrap();
    assert_ne!(one, other_seed);
}

#[test]
fn sweep_output_order_follows_values() {
    let mut spec = microwave_sweep(10e-6, 20);
    spec.values.reverse();
    let points = run_sweep(&spec, &PhysicsParams::default(), &levels(), 1).unwrap();
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    assert_eq!(xs, spec.values);
}

#[test]
fn dark_fraction_has_binomial_variance() {
    // 400 sub-batches of 50 shots at one sweep point
    let params = noisy_params();
    let spec = SweepSpec {
        values: vec![20e-6],
        ..microwave_sweep(10e-6, 20_000)
    };
    let recs = run_sweep_records(&spec, &params, &levels(), 8).unwrap().remove(0);
    let batch = 50;
    let fractions: Vec<f64> = recs
        .chunks(batch)
        .map(|c| c.iter().filter(|r| r.is_dark()).count() as f64 / batch as f64)
        .collect();
    let k = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / k;
    let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let expected = mean * (1.0 - mean) / batch as f64;
    // sample variance of k draws has relative sd about sqrt(2/(k-1))
    let band = 3.0 * expected * (2.0 / (k - 1.0)).sqrt();
    assert!((var - expected).abs() < band, "var {var} expected {expected} band {band}");
}

#[test]
fn microwave_curve_factorizes_with_shelving_efficiency() {
    // no noise, ideal pump: p_dark(t) = cos²(π f t)·S with S set by the IR pulse
    let params = PhysicsParams::default();
    let lv = levels();
    let full = run_sweep(&microwave_sweep(10e-6, 4000), &params, &lv, 3).unwrap();
    let partial = run_sweep(&microwave_sweep(5e-6, 4000), &params, &lv, 4).unwrap();
    let s_full = 1.0;
    let s_partial = 0.5;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in full.iter().zip(&partial) {
        let shape = (std::f64::consts::PI * params.omega_microwave * a.x).cos().powi(2);
        let se = |p: f64| (p * (1.0 - p) / 4000.0).sqrt().max(1.0 / 4000.0);
        assert!((a.p_dark - s_full * shape).abs() < 4.0 * se(s_full * shape), "{a:?}");
        assert!((b.p_dark - s_partial * shape).abs() < 4.0 * se(s_partial * shape), "{b:?}");
        num += a.p_dark * b.p_dark;
        den += a.p_dark * a.p_dark;
    }
    let ratio = num / den;
    assert!((ratio - s_partial / s_full).abs() < 0.02, "pointwise ratio {ratio}");
}

#[test]
fn monte_carlo_agrees_with_ensemble_propagation() {
    let cfg = ExperimentConfig::recipe("fig5").unwrap();
    let lv = levels();
    let spec = SweepSpec {
        values: vec![0.0, 20e-6, 500e-6, 800e-6],
        shots_per_point: 20_000,
        ..cfg.sweep_spec().unwrap().unwrap()
    };
    let exps = spec.experiments(&cfg.physics, &lv).unwrap();
    let points = run_sweep(&spec, &cfg.physics, &lv, 12).unwrap();
    for (pt, exp) in points.iter().zip(&exps) {
        let p = exp.dark_probability();
        let se = (p * (1.0 - p) / pt.shots as f64).sqrt();
        assert!((pt.p_dark - p).abs() < 4.0 * se + 1e-4, "{pt:?} exact {p}");
    }
}

#[test]
fn free_running_trigger_averages_the_line_phase() {
    let params = noisy_params();
    let seq = |trigger| {
        PulseSequence::new(
            vec![
                PulseStep::Pump(PumpParams::default()),
                PulseStep::IrPulse {
                    duration: 10e-6,
                    detuning: 0.0,
                },
            ],
            trigger,
        )
    };
    let lv = levels();
    let locked = Experiment::new(&seq(Trigger::LineTrigger { phase: 0.0 }), &params, &lv).unwrap();
    let free = Experiment::new(&seq(Trigger::Immediate), &params, &lv).unwrap();
    assert!(free.dark_probability() < locked.dark_probability() - 0.1);
    let n = 20_000;
    let dark = (0..n).filter(|&s| free.run_shot(6, 0, s).is_dark()).count() as f64 / n as f64;
    let p = free.dark_probability();
    assert!((dark - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
}

fn step_strategy() -> impl Strategy<Value = PulseStep> {
    prop_oneof![
        (0.0f64..1e-4).prop_map(|d| PulseStep::Pump(PumpParams {
            duration: d,
            ..PumpParams::default()
        })),
        (0.0f64..1e-4, -1e4f64..1e4).prop_map(|(d, x)| PulseStep::IrPulse { duration: d, detuning: x }),
        (0.0f64..1e-3, -1e3f64..1e3).prop_map(|(d, x)| PulseStep::MicrowavePulse { duration: d, detuning: x }),
        (0.0f64..1e-2).prop_map(|d| PulseStep::Wait { duration: d }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elapsed_equals_sum_of_step_durations(
        steps in prop::collection::vec(step_strategy(), 0..6),
        detect in any::<bool>(),
        shot in any::<u32>(),
        seed in any::<u64>(),
    ) {
        let mut steps = steps;
        if detect {
            steps.push(PulseStep::Detect { params: DetectionParams::default(), threshold: 1 });
        }
        let seq = PulseSequence::new(steps, Trigger::LineTrigger { phase: 0.3 });
        let expected: f64 = seq.steps.iter().map(PulseStep::duration).sum();
        let rec = run_shot(&seq, &noisy_params(), &levels(), shot, seed).unwrap();
        prop_assert_eq!(rec.elapsed, expected);
        prop_assert_eq!(rec.photon_count.is_some(), detect);
        prop_assert_eq!(rec.shot_index, shot);
        prop_assert_eq!(rec, run_shot(&seq, &noisy_params(), &levels(), shot, seed).unwrap());
    }

    #[test]
    fn classification_is_consistent_with_count(threshold in -1i64..40, shot in 0u32..1000) {
        let det = DetectionParams { dark_rate: 400.0, ..DetectionParams::default() };
        let seq = PulseSequence::new(
            vec![
                PulseStep::Pump(PumpParams::default()),
                PulseStep::IrPulse { duration: 5e-6, detuning: 0.0 },
                PulseStep::Detect { params: det, threshold },
            ],
            Trigger::Immediate,
        );
        let rec = run_shot(&seq, &noisy_params(), &levels(), shot, 17).unwrap();
        let count = rec.photon_count.unwrap() as i64;
        prop_assert_eq!(rec.is_dark(), count <= threshold);
    }
}
