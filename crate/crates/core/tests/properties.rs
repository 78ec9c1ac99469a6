use baqsim::analysis::{fit_rabi, DampedCosine, RabiPoint};
use baqsim::dynamics::{rabi_excite, Populations, PumpModel, PumpParams};
use baqsim::levels::{build_ground_manifold, AtomicConstants};
use baqsim::readout::{build_histogram, evaluate_threshold, optimal_threshold, Histogram};
use proptest::prelude::*;

fn pump_model(b: f64) -> PumpModel {
    let levels = build_ground_manifold(b, &AtomicConstants::BA137).unwrap();
    PumpModel::new(&levels, b, &AtomicConstants::BA137).unwrap()
}

fn population_strategy() -> impl Strategy<Value = Populations> {
    prop::array::uniform8(0.0f64..1.0).prop_filter_map("non-zero", |raw| {
        let s: f64 = raw.iter().sum();
        (s > 1e-3).then(|| {
            let mut ground = raw;
            for g in &mut ground {
                *g /= s;
            }
            Populations { ground, shelved: 0.0 }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pumping_conserves_population(
        initial in population_strategy(),
        eps in 0.0f64..0.5,
        rate in 1e5f64..5e6,
        duration in 0.0f64..2e-4,
        b in 0.5f64..20.0,
    ) {
        let params = PumpParams { scatter_rate: rate, pol_impurity: eps, duration };
        let out = pump_model(b).evolve(&initial, &params).unwrap();
        prop_assert!((out.total() - 1.0).abs() <= 1e-9);
        prop_assert!(out.ground.iter().all(|&g| g >= -1e-12));
    }

    #[test]
    fn pi_and_two_pi_pulses_are_exact(omega in 1e2f64..1e7) {
        let t_pi = 1.0 / (2.0 * omega);
        prop_assert!((rabi_excite(0.0, omega, t_pi) - 1.0).abs() <= 1e-12);
        prop_assert!(rabi_excite(0.0, omega, 2.0 * t_pi).abs() <= 1e-12);
        prop_assert!((rabi_excite(0.0, omega, 0.5 * t_pi) - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn excitation_is_a_probability_and_even_in_detuning(
        omega in 1e2f64..1e6, delta in -1e6f64..1e6, t in 0.0f64..1e-3,
    ) {
        let p = rabi_excite(delta, omega, t);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p - rabi_excite(-delta, omega, t)).abs() <= 1e-12);
        prop_assert!(p <= omega * omega / (omega * omega + delta * delta) + 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences(
        offset in 0.0f64..1.0, amplitude in 0.05f64..1.0, frequency in 1e3f64..1e5,
        tau in 2e-5f64..1e-3, phase in -3.0f64..3.0, t in 0.0f64..2e-4,
    ) {
        let m = DampedCosine::from_decay_time(offset, amplitude, frequency, tau, phase);
        let g = m.gradient(t);
        let p = m.params();
        for j in 0..5 {
            let h = 1e-6 * p[j].abs().max(1e-3);
            let mut up = p;
            let mut dn = p;
            up[j] += h;
            dn[j] -= h;
            let fd = (DampedCosine::from_params(up).value(t) - DampedCosine::from_params(dn).value(t)) / (2.0 * h);
            let scale = g[j].abs().max(fd.abs());
            // entries that vanish analytically are compared on an absolute scale
            let floor = 1e-6 * [1.0, 1.0, amplitude * 2.0 * std::f64::consts::PI * t, amplitude * t * t, amplitude][j];
            prop_assert!((g[j] - fd).abs() <= 1e-4 * scale + floor, "param {} analytic {} fd {}", j, g[j], fd);
        }
    }

    #[test]
    fn fit_recovers_clean_damped_cosines(
        frequency in 20e3f64..80e3, cycles in 2.0f64..12.0,
        amplitude in 0.2f64..0.5, offset in 0.45f64..0.55, phase in -0.5f64..0.5,
    ) {
        let tau = cycles / frequency;
        let truth = DampedCosine::from_decay_time(offset, amplitude, frequency, tau, phase);
        let span = 2.0 * tau;
        let n = 201;
        let points: Vec<RabiPoint> = (0..n)
            .map(|i| {
                let t = span * i as f64 / (n - 1) as f64;
                RabiPoint::new(t, truth.value(t), None)
            })
            .collect();
        let fit = fit_rabi(&points).unwrap();
        prop_assert!(fit.converged);
        prop_assert!((fit.frequency / frequency - 1.0).abs() < 5e-3, "f {} vs {}", fit.frequency, frequency);
        prop_assert!((fit.decay_time / tau - 1.0).abs() < 5e-3, "tau {} vs {}", fit.decay_time, tau);
    }

    #[test]
    fn fit_residuals_are_orthogonal_to_the_jacobian(
        frequency in 30e3f64..70e3, tau in 60e-6f64..300e-6, seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let truth = DampedCosine::from_decay_time(0.5, 0.45, frequency, tau, 0.0);
        let points: Vec<RabiPoint> = (0..101)
            .map(|i| {
                let t = 2e-6 * i as f64;
                RabiPoint::new(t, truth.value(t) + 0.03 * (rng.random::<f64>() - 0.5), None)
            })
            .collect();
        let fit = fit_rabi(&points).unwrap();
        prop_assert!(fit.converged);
        let r: Vec<f64> = points.iter().map(|p| p.p - fit.model.value(p.t)).collect();
        let r_norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..5 {
            let g: Vec<f64> = points.iter().map(|p| fit.model.gradient(p.t)[j]).collect();
            let g_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if g_norm == 0.0 {
                continue;
            }
            let dot: f64 = r.iter().zip(&g).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() <= 1e-5 * r_norm * g_norm, "param {} cosine {}", j, dot / (r_norm * g_norm));
        }
    }
}

fn brute_force(bright: &Histogram, dark: &Histogram) -> (i64, u64) {
    let top = bright.max_count().into_iter().chain(dark.max_count()).max().unwrap() as i64;
    let mut best = (i64::MIN, u64::MAX);
    for th in -1..=top {
        let errors = bright.bins.iter().filter(|(&c, _)| c as i64 <= th).map(|(_, &n)| n).sum::<u64>()
            + dark.bins.iter().filter(|(&c, _)| c as i64 > th).map(|(_, &n)| n).sum::<u64>();
        if errors < best.1 {
            best = (th, errors);
        }
    }
    best
}

#[test]
fn optimal_threshold_matches_brute_force_on_random_pairs() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
    for case in 0..100 {
        let nb = rng.random_range(1..400);
        let nd = rng.random_range(1..400);
        let hi = rng.random_range(1..60u64);
        let bright: Vec<u64> = (0..nb).map(|_| rng.random_range(0..=hi)).collect();
        let dark: Vec<u64> = (0..nd).map(|_| rng.random_range(0..=hi / 2)).collect();
        let (b, d) = (build_histogram(&bright), build_histogram(&dark));
        let got = optimal_threshold(&b, &d).unwrap();
        let (th, errors) = brute_force(&b, &d);
        assert_eq!((got.threshold, got.total_errors()), (th, errors), "case {case}");
        assert_eq!(evaluate_threshold(&b, &d, th).total_errors(), errors);
    }
}
