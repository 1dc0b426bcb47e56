//! Property tests for the structural invariants of each module.

use proptest::prelude::*;

use homogenize::corrector::{
    solve_deterministic_cell, solve_monotone_cell, CellGrid, MonotoneOptions,
};
use homogenize::dynsys::{reference_systems, DynamicalSystem, StationaryField};
use homogenize::harness::suite::builtin;
use homogenize::harness::ScenarioConfig;
use homogenize::meanval::{besicovitch_seminorm, mean_value, AveragingPlan};
use homogenize::model::{CoefficientModel, NonlinearFlux, ScalarCoef, TensorCoef};
use homogenize::profile::{Profile, Wave};
use homogenize::sigma::{sigma_pairing, Along, Separable, SigmaSettings, Term, TestFunction};
use homogenize::solvers::{solve_fine_elliptic, MacroGrid, ScalePair, Source};
use homogenize::stokes::rotation;

/// A trig polynomial in `dim` variables with integer wavevectors.
fn trig_poly(dim: usize, max_terms: usize) -> impl Strategy<Value = Profile> {
    let term = (
        -1.0f64..1.0,
        prop::collection::vec(-3i32..=3, dim),
        0.0f64..1.0,
        any::<bool>(),
    );
    (-1.0f64..1.0, prop::collection::vec(term, 1..=max_terms)).prop_map(|(c, terms)| {
        terms
            .into_iter()
            .fold(Profile::constant(c), |p, (a, k, ph, s)| {
                let k: Vec<f64> = k.iter().map(|v| *v as f64).collect();
                p.with_term(a, &k, if s { Wave::Sin } else { Wave::Cos }, ph)
            })
    })
}

/// A positive trig polynomial: constant offset above the sum of amplitudes.
fn positive_coefficient(dim: usize) -> impl Strategy<Value = Profile> {
    trig_poly(dim, 3).prop_map(|mut p| {
        let amp: f64 = p.terms.iter().map(|t| t.amplitude.abs()).sum();
        p.constant = amp + 0.5;
        p
    })
}

fn one_d_plan() -> AveragingPlan {
    AveragingPlan::for_dim(1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn group_law_for_every_reference_system(
        seed in any::<u64>(),
        x in prop::collection::vec(-50.0f64..50.0, 2),
        y in prop::collection::vec(-50.0f64..50.0, 2),
    ) {
        for (sys, field) in reference_systems(2) {
            let w = sys.sample_omega(seed).unwrap();
            let xy = [x[0] + y[0], x[1] + y[1]];
            let direct = sys.evaluate(&field, &sys.shift(&w, &xy).unwrap()).unwrap();
            let composed = sys.evaluate(&field, &sys.shift(&sys.shift(&w, &y).unwrap(), &x).unwrap()).unwrap();
            prop_assert!((direct - composed).abs() <= 1e-12, "{:?}: {direct} vs {composed}", sys.kind);
            prop_assert_eq!(sys.sample_omega(seed).unwrap(), w);
        }
    }

    #[test]
    fn mean_value_is_translation_invariant(f in trig_poly(1, 4), a in -10.0f64..10.0) {
        let plan = one_d_plan();
        let m = mean_value(|y| f.eval(y), 1, &plan).unwrap();
        let ma = mean_value(|y| f.eval(&[y[0] + a]), 1, &plan).unwrap();
        let tol = 2.0 * m.error_indicator.max(ma.error_indicator) + 1e-12;
        prop_assert!((m.value - ma.value).abs() <= tol, "{} vs {} (tol {tol})", m.value, ma.value);
    }

    #[test]
    fn holder_product_bound(
        f in trig_poly(1, 3),
        g in trig_poly(1, 3),
        p in 2.0f64..6.0,
        q in 2.0f64..6.0,
    ) {
        let r = 1.0 / (1.0 / p + 1.0 / q);
        let plan = one_d_plan();
        let fg = besicovitch_seminorm(|y| f.eval(y) * g.eval(y), 1, r, &plan).unwrap().value;
        let nf = besicovitch_seminorm(|y| f.eval(y), 1, p, &plan).unwrap().value;
        let ng = besicovitch_seminorm(|y| g.eval(y), 1, q, &plan).unwrap().value;
        prop_assert!(fg <= nf * ng + 1e-6, "{fg} > {nf} * {ng}");
    }

    #[test]
    fn seminorm_triangle_inequality(f in trig_poly(1, 3), g in trig_poly(1, 3)) {
        let plan = one_d_plan();
        let n = |h: &(dyn Fn(&[f64]) -> f64 + Sync)| besicovitch_seminorm(h, 1, 2.0, &plan).unwrap().value;
        let sum = n(&|y| f.eval(y) + g.eval(y));
        prop_assert!(sum <= n(&|y| f.eval(y)) + n(&|y| g.eval(y)) + 1e-9);
    }

    #[test]
    fn scale_pairs_require_separation(e1 in 0.0f64..1.2, e2 in 0.0f64..1.2) {
        let ok = e2 > 0.0 && e2 < e1 && e1 < 1.0 && e2 / e1 <= 0.5;
        prop_assert_eq!(ScalePair::new(e1, e2).is_ok(), ok);
    }

    #[test]
    fn rotation_is_orthogonal_to_velocity(
        h in prop::array::uniform3(-10.0f64..10.0),
        u in prop::array::uniform3(-10.0f64..10.0),
    ) {
        for dim in [2, 3] {
            let mut u = u;
            if dim == 2 {
                u[2] = 0.0;
            }
            let r = rotation(dim, &h, &u);
            let dot: f64 = (0..3).map(|i| r[i] * u[i]).sum();
            prop_assert!(dot.abs() <= 1e-12 * (1.0 + h.iter().map(|v| v * v).sum::<f64>() * u.iter().map(|v| v * v).sum::<f64>()));
        }
    }

    #[test]
    fn config_hash_survives_toml_round_trip(seed in any::<u64>(), samples in 2usize..500, k in 0usize..3) {
        let name = ["elliptic-1d", "stokes-2d", "sigma-lab"][k];
        let mut c = builtin(name, seed).unwrap();
        c.samples = samples;
        let back = ScenarioConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn effective_tensor_bounds_and_symmetry(a in positive_coefficient(2)) {
        let model = CoefficientModel::linear(DynamicalSystem::periodic(2), TensorCoef::isotropic(ScalarCoef::of_y(a.clone())));
        let w = model.system.sample_omega(0).unwrap();
        let sol = solve_deterministic_cell(&model, &[0.5, 0.5], &w, &CellGrid::unit(2, 16)).unwrap();
        let e = &sol.effective;
        prop_assert!((e.get(0, 1) - e.get(1, 0)).abs() <= 1e-10);
        for chi in &sol.correctors {
            let mean = chi.iter().sum::<f64>() / chi.len() as f64;
            prop_assert!(mean.abs() <= 1e-12);
        }
        // Eigenvalues of the 2x2 tensor.
        let (p, q, r) = (e.get(0, 0), e.get(1, 1), e.get(0, 1));
        let disc = (((p - q) / 2.0).powi(2) + r * r).sqrt();
        let (lo, hi) = ((p + q) / 2.0 - disc, (p + q) / 2.0 + disc);
        prop_assert!(lo >= sol.min_eig - 1e-8 && hi <= sol.max_eig + 1e-8);
        // Voigt-Reuss against converged means of the continuous coefficient.
        let n = 256;
        let (mut arith, mut harm) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let v = a.eval(&[(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]);
                arith += v;
                harm += 1.0 / v;
            }
        }
        let (arith, harm) = (arith / (n * n) as f64, (n * n) as f64 / harm);
        for d in [p, q] {
            prop_assert!(d >= harm - 1e-6 && d <= arith + 1e-6, "{harm} <= {d} <= {arith}");
        }
    }

    #[test]
    fn discrete_maximum_principle(a in positive_coefficient(1), f in 0.0f64..5.0) {
        let model = CoefficientModel::linear(DynamicalSystem::periodic(1), TensorCoef::isotropic(ScalarCoef::of_y(a)));
        let w = model.system.sample_omega(1).unwrap();
        let sc = ScalePair::from_eps2(1.0 / 16.0).unwrap();
        let u = solve_fine_elliptic(&model, &sc, &w, &Source::constant(f), &MacroGrid::resolving(1, sc.eps2)).unwrap();
        prop_assert!(u.min_value >= -1e-10);
    }

    #[test]
    fn monotone_cell_is_unique(
        init in prop::collection::vec(-1.0f64..1.0, 32),
        xi in 0.2f64..2.0,
    ) {
        let c = ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0]));
        let model = CoefficientModel::linear(DynamicalSystem::periodic(1), TensorCoef::isotropic(c.clone()))
            .with_flux(NonlinearFlux { coefficient: c, exponent: 3.0, regularization: 0.0 })
            .with_rhs_b(vec![ScalarCoef::of_y(Profile::sine(0.0, 0.5, &[1.0]))]);
        let w = model.system.sample_omega(0).unwrap();
        let cell = CellGrid::unit(1, 32);
        let opts = MonotoneOptions::default();
        let a = solve_monotone_cell(&model, &[0.5], &w, &[xi], &cell, None, &opts).unwrap();
        let b = solve_monotone_cell(&model, &[0.5], &w, &[xi], &cell, Some(&init), &opts).unwrap();
        // Discrete p-seminorm of the gradient difference on the uniform cell.
        let n = a.corrector.len();
        let d: f64 = (0..n)
            .map(|i| {
                let da = a.corrector[(i + 1) % n] - a.corrector[i];
                let db = b.corrector[(i + 1) % n] - b.corrector[i];
                ((da - db) * n as f64).abs().powi(3) / n as f64
            })
            .sum::<f64>()
            .cbrt();
        prop_assert!(d <= 1e-6, "gradient difference {d}");
    }

    #[test]
    fn pairing_is_bilinear(
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
        u in trig_poly(1, 2),
        v in trig_poly(1, 2),
        g in trig_poly(1, 2),
        h in trig_poly(1, 2),
    ) {
        let sys = DynamicalSystem::quasi_periodic(1, None).unwrap();
        let s = SigmaSettings::unit(1).with_samples(3);
        let sc = ScalePair::from_eps2(1.0 / 32.0).unwrap();
        let su = Separable::term(Term::one().of_y(u));
        let sv = Separable::term(
            Term::one().of_omega(StationaryField::torus(Profile::cosine(0.0, 1.0, &[1.0, 1.0]))).of_y(v),
        );
        let combo = su.clone().scaled(alpha).plus(sv.clone().scaled(beta));
        let tg = Separable::term(Term::one().bump(homogenize::sigma::Bump::centered(1, 0.4)).of_y(g));
        let th = Separable::term(Term::one().bump(homogenize::sigma::Bump::new(&[0.4], &[0.3])).of_y(h));
        let pair = |f: &Separable, t: &Separable| {
            sigma_pairing(&Along { f, system: &sys }, &TestFunction::new(t.clone()), &sc, &sys, &s).unwrap().mean
        };
        let lhs = pair(&combo, &tg);
        let rhs = alpha * pair(&su, &tg) + beta * pair(&sv, &tg);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        let lhs = pair(&su, &tg.clone().scaled(alpha).plus(th.clone().scaled(beta)));
        let rhs = alpha * pair(&su, &tg) + beta * pair(&su, &th);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn stationarity_of_reference_fields() {
    // The law of f(T(x)w) does not depend on x: compare two shifts by a two-sample test.
    for (sys, field) in reference_systems(1) {
        let ws = sys.sample_many(11, 2000).unwrap();
        let at = |x: f64| -> Vec<f64> {
            ws.iter()
                .map(|w| sys.realize(&field, w, &[x]).unwrap())
                .collect()
        };
        let (a, b) = (at(0.0), at(17.3));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let tol = 4.0 * (sd(&a).powi(2) + sd(&b).powi(2)).sqrt() / (a.len() as f64).sqrt();
        assert!((mean(&a) - mean(&b)).abs() <= tol + 1e-12, "{:?}", sys.kind);
    }
}
