//! Worked examples with closed-form or law-of-large-numbers oracles.

use homogenize::corrector::{effective_coriolis, solve_stokes_cell, CellGrid};
use homogenize::dynsys::{DynamicalSystem, StationaryField, ValueDistribution};
use homogenize::meanval::{
    ball_average, birkhoff_average, ergodicity_defect, mean_value, AveragingPlan, Extrapolation,
};
use homogenize::model::{CoefficientModel, ScalarCoef, TensorCoef};
use homogenize::profile::{Profile, Wave};
use homogenize::stokes::UzawaOptions;

#[test]
fn ball_average_of_cos_squared() {
    let plan = AveragingPlan::for_dim(1);
    let v = ball_average(
        |y| (2.0 * std::f64::consts::PI * y[0]).cos().powi(2),
        1,
        50.0,
        &plan,
    )
    .unwrap();
    assert!((v - 0.5).abs() <= 0.01, "{v}");
}

#[test]
fn quasi_periodic_mean_vanishes() {
    let f = Profile::cosine(0.0, 1.0, &[1.0]).with_term(1.0, &[2f64.sqrt()], Wave::Cos, 0.0);
    let m = mean_value(|y| f.eval(y), 1, &AveragingPlan::for_dim(1)).unwrap();
    assert!(m.value.abs() <= 5e-3, "{}", m.value);
}

#[test]
fn periodic_sine_field_averages_to_zero() {
    let sys = DynamicalSystem::periodic(1);
    let field = StationaryField::torus(Profile::sine(0.0, 1.0, &[1.0]));
    for seed in [0, 7, 99] {
        let w = sys.sample_omega(seed).unwrap();
        let m = birkhoff_average(&sys, &field, &w, &AveragingPlan::for_dim(1)).unwrap();
        assert!(m.value.abs() <= 1e-3, "seed {seed}: {}", m.value);
    }
}

#[test]
fn checkerboard_birkhoff_average() {
    let sys =
        DynamicalSystem::checkerboard(2, 1.0, ValueDistribution::two_valued(1.0, 3.0)).unwrap();
    let plan = AveragingPlan::for_dim(2)
        .with_radii(&[20.0, 40.0])
        .with_resolution(4.0)
        .with_extrapolation(Extrapolation::LastValue);
    // One ball of radius 40 holds about 5000 cells, so a single realization
    // deviates by 1/sqrt(5000) ~ 0.014 rms: bound each by 4 sigma and the
    // average over realizations by 0.02.
    let sigma = 1.0 / (std::f64::consts::PI * 1600.0).sqrt();
    let mut total = 0.0;
    for seed in 0..16 {
        let w = sys.sample_omega(seed).unwrap();
        let m = birkhoff_average(&sys, &StationaryField::lattice(), &w, &plan).unwrap();
        assert!(
            (m.value - 2.0).abs() <= 4.0 * sigma,
            "seed {seed}: {}",
            m.value
        );
        total += m.value;
    }
    assert!((total / 16.0 - 2.0).abs() <= 0.02);
}

#[test]
fn quasi_periodic_defect_decreases() {
    let f = Profile::sine(0.0, 1.0, &[1.0]).with_term(0.5, &[2f64.sqrt()], Wave::Cos, 0.3);
    let plan = AveragingPlan::for_dim(1).with_radii(&[5.0, 10.0, 20.0, 40.0]);
    let d = ergodicity_defect(|y| f.eval(y), 1, 2.0, &plan, 5).unwrap();
    assert!(d.windows(2).all(|p| p[1].defect < p[0].defect), "{d:?}");
}

#[test]
fn stokes_cell_correctors_have_zero_mean() {
    let a = Profile::constant(2.0)
        .with_term(0.5, &[1.0, 1.0], Wave::Sin, 0.0)
        .with_term(0.3, &[0.0, 1.0], Wave::Cos, 0.0);
    let m = CoefficientModel::linear(
        DynamicalSystem::periodic(2),
        TensorCoef::isotropic(ScalarCoef::of_y(a)),
    );
    let w = m.system.sample_omega(0).unwrap();
    let r = solve_stokes_cell(
        &m,
        &[0.0, 0.0],
        &w,
        &CellGrid::unit(2, 16),
        &UzawaOptions::default(),
    )
    .unwrap();
    assert!(r.max_divergence <= 1e-8);
    for u in &r.correctors {
        let n = u.len() / 2;
        for k in 0..2 {
            let mean = u[k * n..(k + 1) * n].iter().sum::<f64>() / n as f64;
            assert!(mean.abs() <= 1e-12, "{mean}");
        }
    }
}

#[test]
fn coriolis_of_mean_free_profile_vanishes() {
    let sys = DynamicalSystem::quasi_periodic(2, None).unwrap();
    let m = CoefficientModel::linear(sys, TensorCoef::isotropic(ScalarCoef::constant(1.0)))
        .with_fields(vec![StationaryField::torus(Profile::cosine(
            1.0,
            0.5,
            &[1.0, 0.0, 0.0],
        ))])
        .with_coriolis(vec![
            ScalarCoef::constant(0.0),
            ScalarCoef::constant(0.0),
            ScalarCoef::field_times(0, Some(Profile::sine(0.0, 1.0, &[1.0, 0.0]))),
        ]);
    let e = effective_coriolis(&m, &[0.0, 0.0], &AveragingPlan::for_dim(2), 4, 11).unwrap();
    for k in 0..3 {
        assert!(e.mean[k].abs() <= 1e-3, "{:?}", e.mean);
    }
}
