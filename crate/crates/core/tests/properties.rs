use heatflux::generator::{generator_for, spectral_report};
use heatflux::heat::{first_law, forward_distribution, fr_check, heat_support, reverse_distribution, tail_bound_check};
use heatflux::model::{gibbs_populations, random_model, ModelSpec, RandomModelOptions};
use heatflux::propagator::{taylor_propagator, Propagation};
use proptest::prelude::*;

fn model() -> impl Strategy<Value = ModelSpec> {
    (2usize..=7, any::<u64>()).prop_map(|(d, seed)| random_model(d, seed, &RandomModelOptions::default()))
}

/// Times expressed in units of the inverse generator norm.
fn scaled_tau() -> impl Strategy<Value = f64> {
    0.01f64..6.0
}

fn tau_for(spec: &ModelSpec, scale: f64) -> f64 {
    scale / generator_for(spec).norm_inf()
}

fn shifted(spec: &ModelSpec, c: f64) -> ModelSpec {
    let bare: Vec<f64> = spec.bare_energies().iter().map(|e| e + c).collect();
    let eff: Vec<f64> = spec.effective_energies().iter().map(|e| e + c).collect();
    ModelSpec::new(bare, Some(eff), spec.beta_s(), spec.beta_b(), spec.coupling().clone()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn propagator_is_column_stochastic(spec in model(), s in scaled_tau()) {
        let gen = generator_for(&spec);
        let p = Propagation::new(&gen, &spec).unwrap().at(tau_for(&spec, s)).unwrap();
        prop_assert!(p.column_sum_residual() < 1e-10);
        prop_assert!(p.min_entry() >= 0.0);
    }

    #[test]
    fn semigroup_law(spec in model(), s in scaled_tau(), t in scaled_tau()) {
        let gen = generator_for(&spec);
        let prop = Propagation::new(&gen, &spec).unwrap();
        let (a, b) = (tau_for(&spec, s), tau_for(&spec, t));
        let joint = prop.at(a + b).unwrap();
        let product = prop.at(a).unwrap().entries() * prop.at(b).unwrap().entries();
        prop_assert!((joint.entries() - product).abs().max() < 1e-9);
    }

    #[test]
    fn eigen_and_taylor_paths_agree(spec in model(), s in scaled_tau()) {
        let gen = generator_for(&spec);
        let tau = tau_for(&spec, s);
        let eig = Propagation::new(&gen, &spec).unwrap().at(tau).unwrap();
        let taylor = taylor_propagator(&gen, tau);
        prop_assert!((eig.entries() - taylor.entries()).abs().max() < 1e-11);
    }

    #[test]
    fn gibbs_state_is_stationary(spec in model(), s in scaled_tau()) {
        let gen = generator_for(&spec);
        let p = Propagation::new(&gen, &spec).unwrap().at(tau_for(&spec, s)).unwrap();
        let g = nalgebra::DVector::from_column_slice(gibbs_populations(spec.bare_energies(), spec.beta_b()).probs());
        prop_assert!((p.entries() * &g - &g).abs().max() < 1e-10);
    }

    #[test]
    fn gibbs_populations_strictly_decrease(spec in model(), beta in 0.05f64..5.0) {
        let g = gibbs_populations(spec.bare_energies(), beta);
        prop_assert!((g.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(g.probs().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn spectrum_is_healthy(spec in model()) {
        let report = spectral_report(&generator_for(&spec), &spec).unwrap();
        prop_assert!(report.pass, "{:?}", report.checks);
        prop_assert!(report.spectral_gap() > 0.0);
    }

    #[test]
    fn heat_distributions_are_normalized(spec in model(), s in scaled_tau()) {
        let gen = generator_for(&spec);
        let p = Propagation::new(&gen, &spec).unwrap().at(tau_for(&spec, s)).unwrap();
        let support = heat_support(&spec, None).unwrap();
        let f = forward_distribution(&spec, &p, &support).unwrap();
        let r = reverse_distribution(&spec, &p, &support).unwrap();
        prop_assert!((f.total() - 1.0).abs() < 1e-12);
        prop_assert!((r.total() - 1.0).abs() < 1e-12);
        prop_assert!(f.mass.iter().chain(&r.mass).all(|&m| m >= 0.0));
    }

    #[test]
    fn reverse_is_mirrored_forward(spec in model(), s in scaled_tau()) {
        let gen = generator_for(&spec);
        let p = Propagation::new(&gen, &spec).unwrap().at(tau_for(&spec, s)).unwrap();
        let support = heat_support(&spec, None).unwrap();
        let f = forward_distribution(&spec, &p, &support).unwrap();
        let r = reverse_distribution(&spec, &p, &support).unwrap();
        for i in 0..support.len() {
            prop_assert_eq!(r.mass[i], f.mass[support.mirror(i)]);
            prop_assert_eq!(support.values()[i], -support.values()[support.mirror(i)]);
        }
    }

    #[test]
    fn fluctuation_relation_holds(spec in model(), s in scaled_tau()) {
        let gen = generator_for(&spec);
        let p = Propagation::new(&gen, &spec).unwrap().at(tau_for(&spec, s)).unwrap();
        let support = heat_support(&spec, None).unwrap();
        let report = fr_check(&spec, &p, &support, 1e-9).unwrap();
        prop_assert!(report.pass, "worst {:?}", report.worst());
    }

    #[test]
    fn first_law_and_tail_bound(spec in model(), s in scaled_tau()) {
        let spec = if spec.delta_beta() >= 0.0 { spec } else { spec.with_temperatures(spec.beta_b(), spec.beta_s()) };
        let gen = generator_for(&spec);
        let p = Propagation::new(&gen, &spec).unwrap().at(tau_for(&spec, s)).unwrap();
        let support = heat_support(&spec, None).unwrap();
        let f = forward_distribution(&spec, &p, &support).unwrap();
        let fl = first_law(&f, &spec, &p).unwrap();
        prop_assert!(fl.residual.abs() < 1e-12);
        prop_assert!(fl.mean_heat >= -1e-12);
        prop_assert!(tail_bound_check(&f, &spec, None).unwrap().pass);
    }

    #[test]
    fn energy_shift_leaves_dynamics_unchanged(spec in model(), s in scaled_tau(), c in -50.0f64..50.0) {
        let moved = shifted(&spec, c);
        let tau = tau_for(&spec, s);
        let gen = generator_for(&spec);
        let gen_moved = generator_for(&moved);
        prop_assert!((gen.a_matrix() - gen_moved.a_matrix()).abs().max() < 1e-12);
        let p = Propagation::new(&gen, &spec).unwrap().at(tau).unwrap();
        let q = Propagation::new(&gen_moved, &moved).unwrap().at(tau).unwrap();
        prop_assert!((p.entries() - q.entries()).abs().max() < 1e-12);
        let support = heat_support(&spec, None).unwrap();
        let support_moved = heat_support(&moved, None).unwrap();
        prop_assert_eq!(support.len(), support_moved.len());
        let f = forward_distribution(&spec, &p, &support).unwrap();
        let g = forward_distribution(&moved, &q, &support_moved).unwrap();
        for (a, b) in f.mass.iter().zip(&g.mass) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
