//! Property tests of the structural invariants on random inputs.

use corrector_core::config::RunConfig;
use corrector_core::corrector::{solve_nonlinear, HeterogeneousLaw, SolverOptions};
use corrector_core::field::{sample_parameter_field, FieldSpec, ParameterField};
use corrector_core::hierarchy::{CorrectorFamily, DirectionSet};
use corrector_core::homogenize::Ensemble;
use corrector_core::sensitivity::{solve_sensitivity, Perturbation};
use corrector_core::{GridField, Mass, OperatorModel, Rank, Spectral, TorusGrid};
use proptest::prelude::*;

fn spec() -> FieldSpec {
    FieldSpec { n_components: 2, alpha: 1.0, amplitude: 40.0, corr_length: 1.0, offset: None }
}

fn grid2(n: usize, side: f64) -> TorusGrid {
    TorusGrid::new(2, n, side).unwrap()
}

fn sine(d: usize) -> OperatorModel<f64> {
    OperatorModel::sine_perturbed(d, 2, 1.0, 2.0).unwrap()
}

fn ball_point(raw: &[f64]) -> Vec<f64> {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| 0.99 * v / (1.0 + n)).collect()
}

fn eval(model: &OperatorModel<f64>, omega: &[f64], xi: &[f64], dirs: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; model.d];
    if dirs.is_empty() {
        model.apply(omega, xi, &mut out);
    } else {
        model.d_xi(omega, xi, dirs, &mut out).unwrap();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_divergence_adjointness(
        d in 1usize..4,
        side in 1.0f64..50.0,
        raw in proptest::collection::vec(-1.0f64..1.0, 4 * 512),
    ) {
        let grid = TorusGrid::new(d, 8, side).unwrap();
        let nodes = grid.nodes();
        let f = GridField::from_values(grid, Rank::Scalar, raw[..nodes].to_vec()).unwrap();
        let v = GridField::from_values(grid, Rank::Vector, raw[nodes..nodes * (d + 1)].to_vec()).unwrap();
        let sp = Spectral::<f64>::new(grid);
        let lhs: f64 = sp.gradient(&f).unwrap().values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
        let rhs: f64 = -f.values().iter().zip(sp.divergence(&v).unwrap().values()).map(|(a, b)| a * b).sum::<f64>();
        let scale = sp.gradient(&f).unwrap().l2_norm() * v.l2_norm() + 1e-300;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * scale, "{lhs} vs {rhs}");
    }

    #[test]
    fn derivative_operators_commute(
        side in 1.0f64..50.0,
        t in 0.1f64..100.0,
        axis in 0usize..2,
        raw in proptest::collection::vec(-1.0f64..1.0, 256),
    ) {
        let grid = grid2(16, side);
        let sp = Spectral::<f64>::new(grid);
        let mut f = GridField::from_values(grid, Rank::Scalar, raw).unwrap();
        f.remove_mean();
        let lap = sp.laplacian(&f).unwrap();
        let div_grad = sp.divergence(&sp.gradient(&f).unwrap()).unwrap();
        prop_assert!(lap.sub(&div_grad).unwrap().max_abs() <= 1e-12 * lap.max_abs().max(1.0));
        let mass = Mass::finite(t);
        let a = sp.derivative(&sp.helmholtz_solve(mass, &f).unwrap(), axis).unwrap();
        let b = sp.helmholtz_solve(mass, &sp.derivative(&f, axis).unwrap()).unwrap();
        prop_assert!(a.sub(&b).unwrap().max_abs() <= 1e-12 * a.max_abs().max(1e-300) + 1e-15);
    }

    #[test]
    fn operator_derivatives_are_symmetric_and_normalized(
        d in 1usize..4,
        om in proptest::collection::vec(-3.0f64..3.0, 2),
        xi in proptest::collection::vec(-4.0f64..4.0, 3),
        w in proptest::collection::vec(-2.0f64..2.0, 9),
    ) {
        let model = sine(d);
        let omega = ball_point(&om);
        let xi = &xi[..d];
        let (w1, w2, w3) = (&w[0..d], &w[3..3 + d], &w[6..6 + d]);
        prop_assert!(eval(&model, &omega, &vec![0.0; d], &[]).iter().all(|v| *v == 0.0));
        let base = eval(&model, &omega, xi, &[w1, w2, w3]);
        for perm in [[w2, w1, w3], [w3, w2, w1], [w1, w3, w2], [w2, w3, w1]] {
            let other = eval(&model, &omega, xi, &perm);
            for (a, b) in base.iter().zip(&other) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn operator_derivative_consistency(
        k in 1usize..5,
        om in proptest::collection::vec(-3.0f64..3.0, 2),
        xi in proptest::collection::vec(-4.0f64..4.0, 2),
        w in proptest::collection::vec(-1.0f64..1.0, 10),
    ) {
        let model = sine(2);
        let omega = ball_point(&om);
        let dirs: Vec<&[f64]> = w.chunks(2).take(k).collect();
        let h = 1e-4;
        let shifted = |s: f64| -> Vec<f64> {
            let x: Vec<f64> = xi.iter().zip(dirs[k - 1]).map(|(a, b)| a + s * b).collect();
            eval(&model, &omega, &x, &dirs[..k - 1])
        };
        let (p, m) = (shifted(h), shifted(-h));
        let exact = eval(&model, &omega, &xi, &dirs);
        for i in 0..2 {
            let fd = (p[i] - m[i]) / (2.0 * h);
            prop_assert!((fd - exact[i]).abs() <= 1e-6, "order {k}: {fd} vs {}", exact[i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn linear_corrector_is_linear_in_xi(
        seed in any::<u64>(),
        c in -3.0f64..3.0,
        xi in proptest::collection::vec(-2.0f64..2.0, 2),
        t in prop_oneof![Just(f64::INFINITY), 1.0f64..50.0],
    ) {
        let grid = grid2(16, 8.0);
        let sp = Spectral::new(grid);
        let model = OperatorModel::linear(2, 2, 1.0, 3.0).unwrap();
        let omega = sample_parameter_field(&spec(), &grid, seed).unwrap();
        let mass = Mass::new(t).unwrap();
        let opts = SolverOptions::default().with_tol(1e-12);
        let base = solve_nonlinear(&sp, &omega, &model, &xi, mass, &opts).unwrap();
        let cxi: Vec<f64> = xi.iter().map(|v| c * v).collect();
        let scaled = solve_nonlinear(&sp, &omega, &model, &cxi, mass, &opts).unwrap();
        let err = scaled.phi.sub(&base.phi.scaled(c)).unwrap().max_abs();
        prop_assert!(err <= 1e-8 * (1.0 + base.phi.max_abs() * c.abs()), "{err}");
    }

    #[test]
    fn second_order_correctors_are_symmetric(
        seed in any::<u64>(),
        a in 0.0f64..std::f64::consts::TAU,
        b in 0.0f64..std::f64::consts::TAU,
        t in 1.0f64..50.0,
    ) {
        let grid = grid2(16, 8.0);
        let sp = Spectral::new(grid);
        let model = sine(2);
        let omega = sample_parameter_field(&spec(), &grid, seed).unwrap();
        let law = HeterogeneousLaw::new(&model, &omega).unwrap();
        let opts = SolverOptions::default().with_tol(1e-12);
        let (v1, v2) = (vec![a.cos(), a.sin()], vec![b.cos(), b.sin()]);
        let family = |dirs: Vec<Vec<f64>>| {
            let base = solve_nonlinear(&sp, &omega, &model, &[0.7, -0.3], Mass::finite(t), &opts).unwrap();
            let mut fam = CorrectorFamily::new(base, DirectionSet::new(dirs).unwrap()).unwrap();
            fam.solve_all(&sp, &law, &opts).unwrap();
            fam
        };
        let f12 = family(vec![v1.clone(), v2.clone()]);
        let f21 = family(vec![v2, v1]);
        let (p, q) = (f12.phi(3).unwrap(), f21.phi(3).unwrap());
        prop_assert!(p.sub(q).unwrap().max_abs() <= 1e-10 * p.max_abs().max(1.0));
    }

    #[test]
    fn decomposition_identity_holds_on_random_families(
        seed in any::<u64>(),
        t in 1.0f64..100.0,
        xi in proptest::collection::vec(-2.0f64..2.0, 2),
    ) {
        let grid = grid2(32, 16.0);
        let sp = Spectral::new(grid);
        let model = sine(2);
        let omega = sample_parameter_field(&spec(), &grid, seed).unwrap();
        let law = HeterogeneousLaw::new(&model, &omega).unwrap();
        let opts = SolverOptions::default();
        let base = solve_nonlinear(&sp, &omega, &model, &xi, Mass::finite(t), &opts).unwrap();
        let mut fam = CorrectorFamily::new(base, DirectionSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        fam.solve_all(&sp, &law, &opts).unwrap();
        fam.attach_all_flux_correctors(&sp).unwrap();
        prop_assert!(fam.is_downward_closed());
        for s in std::iter::once(0).chain(fam.subsets()) {
            let r = fam.decomposition_residual(s).unwrap();
            prop_assert!(r <= 100.0 * opts.tol, "subset {s}: {r}");
        }
    }

    #[test]
    fn sensitivity_is_linear_in_the_perturbation(
        seed in any::<u64>(),
        c in -1.0f64..1.0,
        center in proptest::collection::vec(0.0f64..8.0, 2),
    ) {
        let grid = grid2(16, 8.0);
        let sp = Spectral::new(grid);
        let model = sine(2);
        let omega: ParameterField<f64> = sample_parameter_field(&spec(), &grid, seed).unwrap();
        let law = HeterogeneousLaw::new(&model, &omega).unwrap();
        let opts = SolverOptions::default().with_tol(1e-12);
        let base = solve_nonlinear(&sp, &omega, &model, &[1.0, 0.5], Mass::finite(4.0), &opts).unwrap();
        let mut fam = CorrectorFamily::new(base, DirectionSet::new(vec![vec![1.0, 0.0]]).unwrap()).unwrap();
        fam.solve_all(&sp, &law, &opts).unwrap();
        let pert = Perturbation::bump(&grid, &center, 2.0, &[0.6, 0.8]).unwrap();
        for s in [0, 1] {
            let unit = solve_sensitivity(&sp, &fam, &model, &omega, &pert, s, &opts).unwrap();
            let scaled = solve_sensitivity(&sp, &fam, &model, &omega, &pert.scaled(c), s, &opts).unwrap();
            let err = scaled.sub(&unit.scaled(c)).unwrap().max_abs();
            prop_assert!(err <= 1e-9 * unit.max_abs().max(1e-12), "subset {s}: {err}");
        }
    }

    #[test]
    fn linear_homogenized_operator_is_additive(
        master in any::<u64>(),
        x1 in proptest::collection::vec(-2.0f64..2.0, 2),
        x2 in proptest::collection::vec(-2.0f64..2.0, 2),
    ) {
        let grid = grid2(16, 8.0);
        let ens = Ensemble {
            model: OperatorModel::linear(2, 2, 1.0, 3.0).unwrap(),
            spec: spec(),
            grid,
            mass: Mass::finite(10.0),
            opts: SolverOptions::default().with_tol(1e-12),
        };
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let a1 = ens.estimate_a_hom(&x1, 3, master).unwrap().0.value;
        let a2 = ens.estimate_a_hom(&x2, 3, master).unwrap().0.value;
        let a12 = ens.estimate_a_hom(&sum, 3, master).unwrap().0.value;
        for i in 0..2 {
            prop_assert!((a12[i] - a1[i] - a2[i]).abs() <= 1e-9 * (1.0 + a12[i].abs()));
        }
    }
}

proptest! {
    #[test]
    fn config_roundtrip(
        seed in any::<u64>(),
        samples in 1usize..1000,
        t in prop_oneof![Just(f64::INFINITY), 1e-3f64..1e6],
        log_n in 2u32..8,
    ) {
        let v = serde_json::json!({
            "model": {"name": "sine_perturbed", "lambda": 1.0, "Lambda": 2.0},
            "field": {"n_components": 2, "alpha": 1.0, "amplitude": 1.0, "corr_length": 1.0},
            "grid": {"d": 2, "n_points": 1usize << log_n, "box_side": 8.0},
            "T": if t.is_infinite() { serde_json::json!("inf") } else { serde_json::json!(t) },
            "samples": samples,
            "master_seed": seed,
        });
        let cfg = RunConfig::from_value(v).unwrap();
        let back = RunConfig::from_value(cfg.to_value()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(cfg.mass.value(), t);
    }

    #[test]
    fn mass_rejects_nonpositive(t in -1e6f64..=0.0) {
        prop_assert!(Mass::new(t).is_err());
    }
}
