//! Mean values, Besicovitch seminorms, Birkhoff averages and ergodicity defects.
//!
//! A ball average is computed on the cube `[−r, r]^N` with a tensor rule and a
//! mask `|y| < r`. The sum is divided by the total masked weight rather than by
//! `|B_r|`, so constants are reproduced to rounding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{DynamicalSystem, OmegaSample, StationaryField};
use crate::error::{Error, Result};
use crate::grid::gauss_legendre_unit;
use crate::rng;
use crate::stats::{pairwise_sum, McEstimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Quadrature {
    Midpoint,
    Gauss { order: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Extrapolation {
    LastValue,
    /// Least-squares fit of `A(r) = M + c/r` over the whole schedule.
    #[default]
    Richardson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragingPlan {
    pub radii: Vec<f64>,
    pub quadrature: Quadrature,
    pub points_per_unit: f64,
    #[serde(default)]
    pub extrapolation: Extrapolation,
}

impl Default for AveragingPlan {
    fn default() -> Self {
        Self {
            radii: vec![5.0, 10.0, 20.0, 40.0],
            quadrature: Quadrature::Midpoint,
            points_per_unit: 16.0,
            extrapolation: Extrapolation::Richardson,
        }
    }
}

impl AveragingPlan {
    /// Defaults scaled down so the largest ball stays near a few million points.
    pub fn for_dim(dim: usize) -> Self {
        let mut p = Self::default();
        match dim {
            1 => {}
            2 => p.points_per_unit = 8.0,
            _ => {
                p.radii = vec![2.5, 5.0, 10.0, 20.0];
                p.points_per_unit = 4.0;
            }
        }
        p
    }

    pub fn with_radii(mut self, radii: &[f64]) -> Self {
        self.radii = radii.to_vec();
        self
    }

    fn coarsened(&self) -> Self {
        self.clone().with_resolution(self.points_per_unit / 2.0)
    }

    pub fn with_resolution(mut self, points_per_unit: f64) -> Self {
        self.points_per_unit = points_per_unit;
        self
    }

    pub fn with_extrapolation(mut self, e: Extrapolation) -> Self {
        self.extrapolation = e;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.radii.len() < 2 {
            return Err(Error::Parameter(
                "averaging plan needs at least two radii".into(),
            ));
        }
        if self.radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Parameter("averaging radii must be positive".into()));
        }
        if self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter(
                "averaging radii must be strictly increasing".into(),
            ));
        }
        if !(self.points_per_unit > 0.0) {
            return Err(Error::Parameter(
                "points per unit length must be positive".into(),
            ));
        }
        if let Quadrature::Gauss { order } = self.quadrature {
            gauss_legendre_unit(order)?;
        }
        Ok(())
    }

    /// Checks the resolution against the shortest wavelength declared by a field.
    pub fn check_resolution(&self, min_wavelength: f64) -> Result<()> {
        if min_wavelength.is_finite() && self.points_per_unit * min_wavelength < 2.0 {
            return Err(Error::Parameter(format!(
                "{} points per unit under-resolve wavelength {min_wavelength}",
                self.points_per_unit
            )));
        }
        Ok(())
    }

    fn rule(&self) -> (Vec<f64>, Vec<f64>) {
        match self.quadrature {
            Quadrature::Midpoint => (vec![0.5], vec![1.0]),
            Quadrature::Gauss { order } => gauss_legendre_unit(order).expect("validated order"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanValueEstimate {
    pub value: f64,
    pub error_indicator: f64,
    pub radius_used: f64,
    pub converged: bool,
    /// Ball averages A(r_k) along the schedule.
    pub averages: Vec<f64>,
}

/// Entry-wise ball averages of an `m`-component field.
pub fn ball_average_vec<F>(
    f: F,
    dim: usize,
    m: usize,
    r: f64,
    plan: &AveragingPlan,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Parameter(format!(
            "ball radius {r} must be positive"
        )));
    }
    if !(1..=3).contains(&dim) {
        return Err(Error::Parameter(format!("dimension {dim} not in 1..=3")));
    }
    plan.validate()?;
    let (pts, wts) = plan.rule();
    let n = ((2.0 * r * plan.points_per_unit).ceil() as usize).max(1);
    let h = 2.0 * r / n as f64;
    // 1D node/weight list along one axis.
    let mut axis = Vec::with_capacity(n * pts.len());
    for c in 0..n {
        for (p, w) in pts.iter().zip(&wts) {
            axis.push((-r + (c as f64 + p) * h, *w));
        }
    }
    let r2 = r * r;
    // One slab per value of the slowest coordinate; slabs are reduced pairwise.
    let slabs: Vec<(Vec<f64>, f64)> = axis
        .par_iter()
        .map(|&(y0, w0)| {
            let mut acc = vec![Vec::new(); m];
            let mut wsum = Vec::new();
            let mut y = [y0, 0.0, 0.0];
            let mut out = vec![0.0; m];
            let mut visit = |y: &[f64], w: f64, acc: &mut Vec<Vec<f64>>, wsum: &mut Vec<f64>| {
                f(y, &mut out);
                for k in 0..m {
                    acc[k].push(w * out[k]);
                }
                wsum.push(w);
            };
            match dim {
                1 => visit(&y[..1], w0, &mut acc, &mut wsum),
                2 => {
                    for &(y1, w1) in &axis {
                        if y0 * y0 + y1 * y1 < r2 {
                            y[1] = y1;
                            visit(&y[..2], w0 * w1, &mut acc, &mut wsum);
                        }
                    }
                }
                _ => {
                    for &(y1, w1) in &axis {
                        if y0 * y0 + y1 * y1 >= r2 {
                            continue;
                        }
                        for &(y2, w2) in &axis {
                            if y0 * y0 + y1 * y1 + y2 * y2 < r2 {
                                y[1] = y1;
                                y[2] = y2;
                                visit(&y[..3], w0 * w1 * w2, &mut acc, &mut wsum);
                            }
                        }
                    }
                }
            }
            let sums: Vec<f64> = acc.iter().map(|v| pairwise_sum(v)).collect();
            (sums, pairwise_sum(&wsum))
        })
        .collect();
    let wtot = pairwise_sum(&slabs.iter().map(|s| s.1).collect::<Vec<_>>());
    if !(wtot > 0.0) {
        return Err(Error::Parameter(format!(
            "ball of radius {r} contains no quadrature points"
        )));
    }
    let mut res = Vec::with_capacity(m);
    for k in 0..m {
        let s = pairwise_sum(&slabs.iter().map(|s| s.0[k]).collect::<Vec<_>>()) / wtot;
        if !s.is_finite() {
            return Err(Error::Overflow(format!("ball average of radius {r}")));
        }
        res.push(s);
    }
    Ok(res)
}

/// (1/|B_r|) ∫_{B_r} f.
pub fn ball_average<F>(f: F, dim: usize, r: f64, plan: &AveragingPlan) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    Ok(ball_average_vec(|y, out| out[0] = f(y), dim, 1, r, plan)?[0])
}

fn extrapolate(radii: &[f64], a: &[f64], mode: Extrapolation) -> f64 {
    match mode {
        Extrapolation::LastValue => *a.last().unwrap(),
        Extrapolation::Richardson => {
            // Least squares for A = M + c·t with t = 1/r.
            let k = radii.len() as f64;
            let t: Vec<f64> = radii.iter().map(|r| 1.0 / r).collect();
            let tm = t.iter().sum::<f64>() / k;
            let am = a.iter().sum::<f64>() / k;
            let stt: f64 = t.iter().map(|v| (v - tm) * (v - tm)).sum();
            let sta: f64 = t.iter().zip(a).map(|(v, w)| (v - tm) * (w - am)).sum();
            let c = if stt > 0.0 { sta / stt } else { 0.0 };
            am - c * tm
        }
    }
}

impl MeanValueEstimate {
    /// Folds |A_h − A_2h|/3 at the largest radius into the indicator. Uniform
    /// midpoint nodes alias exactly onto unit periods, so the radius schedule
    /// alone misses quadrature error from kinks.
    fn widen_for_resolution(&mut self, coarse: f64) {
        let fine = *self.averages.last().unwrap();
        self.error_indicator = self.error_indicator.max((fine - coarse).abs() / 3.0);
    }
}

fn summarize(radii: &[f64], a: Vec<f64>, mode: Extrapolation) -> MeanValueEstimate {
    let k = a.len();
    let err = (a[k - 1] - a[k - 2]).abs();
    let converged = if k >= 3 {
        let prev = (a[k - 2] - a[k - 3]).abs();
        err <= prev + 1e-12 * (1.0 + a[k - 1].abs())
    } else {
        true
    };
    MeanValueEstimate {
        value: extrapolate(radii, &a, mode),
        error_indicator: err,
        radius_used: radii[k - 1],
        converged,
        averages: a,
    }
}

/// Mean value M(f) from the plan's radius schedule.
pub fn mean_value<F>(f: F, dim: usize, plan: &AveragingPlan) -> Result<MeanValueEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    plan.validate()?;
    let a = plan
        .radii
        .iter()
        .map(|&r| ball_average(&f, dim, r, plan))
        .collect::<Result<Vec<_>>>()?;
    let coarse = ball_average(&f, dim, *plan.radii.last().unwrap(), &plan.coarsened())?;
    let mut e = summarize(&plan.radii, a, plan.extrapolation);
    e.widen_for_resolution(coarse);
    Ok(e)
}

/// Entry-wise mean values of an `m`-component field.
pub fn mean_value_vec<F>(
    f: F,
    dim: usize,
    m: usize,
    plan: &AveragingPlan,
) -> Result<Vec<MeanValueEstimate>>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    plan.validate()?;
    let per_r = plan
        .radii
        .iter()
        .map(|&r| ball_average_vec(&f, dim, m, r, plan))
        .collect::<Result<Vec<_>>>()?;
    let coarse = ball_average_vec(&f, dim, m, *plan.radii.last().unwrap(), &plan.coarsened())?;
    Ok((0..m)
        .map(|k| {
            let mut e = summarize(
                &plan.radii,
                per_r.iter().map(|v| v[k]).collect(),
                plan.extrapolation,
            );
            e.widen_for_resolution(coarse[k]);
            e
        })
        .collect())
}

/// (M(|f|^p))^{1/p}.
pub fn besicovitch_seminorm<F>(
    f: F,
    dim: usize,
    p: f64,
    plan: &AveragingPlan,
) -> Result<MeanValueEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::Parameter(format!(
            "seminorm exponent {p} must be ≥ 1"
        )));
    }
    let mut e = mean_value(|y| f(y).abs().powf(p), dim, plan)?;
    let m = e.value.max(0.0);
    let v = m.powf(1.0 / p);
    // Propagate the indicator through t ↦ t^{1/p}.
    let last = e.averages[e.averages.len() - 1].max(0.0).powf(1.0 / p);
    let prev = e.averages[e.averages.len() - 2].max(0.0).powf(1.0 / p);
    e.error_indicator = (last - prev).abs();
    e.value = v;
    Ok(e)
}

/// Spatial mean of the realization x ↦ f(T(x)ω).
pub fn birkhoff_average(
    system: &DynamicalSystem,
    field: &StationaryField,
    omega: &OmegaSample,
    plan: &AveragingPlan,
) -> Result<MeanValueEstimate> {
    // Surface compatibility and overflow errors before the hot loop.
    system.realize(field, omega, &vec![0.0; system.dim])?;
    if system.field_bound(field).is_none() {
        return Err(Error::Parameter(
            "Birkhoff averaging needs a bounded field".into(),
        ));
    }
    mean_value(
        |x| system.realize_unchecked(field, omega, x),
        system.dim,
        plan,
    )
}

/// Monte-Carlo ensemble mean E[f] over `samples` draws derived from `seed`.
pub fn ensemble_mean(
    system: &DynamicalSystem,
    field: &StationaryField,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples < 2 {
        return Err(Error::Statistics(samples));
    }
    let omegas = system.sample_many(seed, samples)?;
    let vals = omegas
        .par_iter()
        .map(|w| system.evaluate(field, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(McEstimate::from_samples(&vals))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectPoint {
    pub radius: f64,
    pub defect: f64,
}

/// Outer probe count used for the defect when N ≥ 2.
const DEFECT_PROBES: usize = 256;

/// ‖ y ↦ A_r f(y) − M(f) ‖_p for each radius r of the plan, where A_r is the
/// moving ball average. The outer seminorm uses the largest radius of the plan;
/// in N ≥ 2 it is estimated from seeded random probes in that ball.
pub fn ergodicity_defect<F>(
    f: F,
    dim: usize,
    p: f64,
    plan: &AveragingPlan,
    seed: u64,
) -> Result<Vec<DefectPoint>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::Parameter(format!("defect exponent {p} must be ≥ 1")));
    }
    let m = mean_value(&f, dim, plan)?.value;
    let outer = *plan.radii.last().unwrap();
    let mut out = Vec::with_capacity(plan.radii.len());
    for &r in &plan.radii {
        let moving = |y: &[f64]| -> f64 {
            ball_average(
                |d: &[f64]| {
                    let mut z = [0.0; 3];
                    for a in 0..dim {
                        z[a] = y[a] + d[a];
                    }
                    f(&z[..dim])
                },
                dim,
                r,
                plan,
            )
            .unwrap_or(f64::NAN)
                - m
        };
        let val = if dim == 1 {
            // Exact outer mean over [−R, R] on the plan's own grid.
            let n = ((2.0 * outer * plan.points_per_unit).ceil() as usize).max(1);
            let h = 2.0 * outer / n as f64;
            let terms: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|c| moving(&[-outer + (c as f64 + 0.5) * h]).abs().powf(p))
                .collect();
            pairwise_sum(&terms) / n as f64
        } else {
            use rand::Rng;
            let mut g = rng::rng(rng::derive_seed(seed, rng::Stream::Probe, r.to_bits()));
            let mut probes = Vec::with_capacity(DEFECT_PROBES);
            while probes.len() < DEFECT_PROBES {
                let y: Vec<f64> = (0..dim).map(|_| g.random_range(-outer..outer)).collect();
                if y.iter().map(|v| v * v).sum::<f64>() < outer * outer {
                    probes.push(y);
                }
            }
            let terms: Vec<f64> = probes.par_iter().map(|y| moving(y).abs().powf(p)).collect();
            pairwise_sum(&terms) / DEFECT_PROBES as f64
        };
        if !val.is_finite() {
            return Err(Error::Overflow(format!("ergodicity defect at radius {r}")));
        }
        out.push(DefectPoint {
            radius: r,
            defect: val.powf(1.0 / p),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn constants_are_exact() {
        for dim in 1..=3 {
            let plan = AveragingPlan::for_dim(dim);
            for r in [0.7, 3.0, 5.5] {
                let a = ball_average(|_| 2.5, dim, r, &plan).unwrap();
                assert!((a - 2.5).abs() <= 1e-10, "dim {dim} r {r}: {a}");
            }
        }
        assert!(ball_average(|_| 1.0, 1, 0.0, &AveragingPlan::default()).is_err());
    }

    #[test]
    fn interval_average_of_sine() {
        let plan = AveragingPlan::default();
        let a = ball_average(|y| (2.0 * PI * y[0]).sin(), 1, 10.0, &plan).unwrap();
        assert!(a.abs() <= 1e-3);
        let c = ball_average(|y| (2.0 * PI * y[0]).cos().powi(2), 1, 50.0, &plan).unwrap();
        assert!((c - 0.5).abs() <= 0.01);
    }

    #[test]
    fn mean_values_of_standard_fields() {
        let plan = AveragingPlan::default();
        let s = mean_value(|y| (2.0 * PI * y[0]).sin(), 1, &plan).unwrap();
        assert!(s.value.abs() <= 1e-3);
        let q = mean_value(
            |y| (2.0 * PI * y[0]).cos() + (2.0 * PI * 2f64.sqrt() * y[0]).cos(),
            1,
            &plan,
        )
        .unwrap();
        assert!(q.value.abs() <= 5e-3, "{}", q.value);
        let inv = mean_value(|y| 1.0 / (2.0 + (2.0 * PI * y[0]).sin()), 1, &plan).unwrap();
        assert!((inv.value - 1.0 / 3f64.sqrt()).abs() <= 1e-3);
        assert!(inv.error_indicator >= 0.0);
    }

    #[test]
    fn seminorms() {
        let plan = AveragingPlan::default();
        assert_eq!(
            besicovitch_seminorm(|_| 0.0, 1, 2.0, &plan).unwrap().value,
            0.0
        );
        let s = besicovitch_seminorm(|y| (2.0 * PI * y[0]).sin(), 1, 2.0, &plan).unwrap();
        assert!((s.value - 0.5f64.sqrt()).abs() <= 1e-3);
        assert!(besicovitch_seminorm(|_| 1.0, 1, 0.5, &plan).is_err());
    }

    #[test]
    fn defect_of_sine_matches_sinc_attenuation() {
        let plan = AveragingPlan::default().with_radii(&[4.0, 10.25, 20.0]);
        let d = ergodicity_defect(|y| (2.0 * PI * y[0]).sin(), 1, 2.0, &plan, 0).unwrap();
        assert!(d[0].defect <= 1e-3);
        assert!(d[2].defect <= 1e-3);
        let r = 10.25;
        let amp = ((2.0 * PI * r).sin() / (2.0 * PI * r)).abs() / 2f64.sqrt();
        assert!(
            (d[1].defect - amp).abs() <= 1e-3,
            "{} vs {amp}",
            d[1].defect
        );
        let c = ergodicity_defect(|_| 3.0, 1, 2.0, &plan, 0).unwrap();
        assert!(c.iter().all(|p| p.defect <= 1e-10));
    }

    #[test]
    fn schedule_must_increase() {
        let plan = AveragingPlan::default().with_radii(&[10.0, 5.0]);
        assert!(mean_value(|_| 1.0, 1, &plan).is_err());
    }
}
