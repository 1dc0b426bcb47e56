//! Elliptic, monotone and Stokes pipelines: cell stage, homogenized solve, fine ε-sweep.

use rayon::prelude::*;

use super::{
    isolated, ScenarioConfig, ScenarioKind, ScenarioResult, StudyRow, TaskState, TaskStatus,
};
use crate::corrector::{
    effective_coriolis, effective_tensor, solve_deterministic_cell, solve_monotone_cell,
    solve_stokes_cell, CellSettings, Regime,
};
use crate::dynsys::OmegaSample;
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::meanval::AveragingPlan;
use crate::model::{CoefficientModel, Structure};
use crate::profile::Profile;
use crate::solvers::{
    solve_fine_elliptic, solve_fine_monotone, solve_fine_stokes, solve_homogenized_elliptic,
    solve_homogenized_monotone, solve_homogenized_stokes, DiscreteField, MacroGrid, MacroViscosity,
    ScalePair, Source,
};
use crate::stats::McEstimate;

/// Per-task output of a fine solve.
struct Fine {
    gap: f64,
    divergence: Option<f64>,
    rotation: Option<f64>,
    field: Option<DiscreteField>,
}

fn model(c: &ScenarioConfig) -> &CoefficientModel {
    c.model.as_ref().expect("validated config has a model")
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.dim())
        .map(|i| (0..t.dim()).map(|j| t.get(i, j)).collect())
        .collect()
}

fn omegas(c: &ScenarioConfig, m: &CoefficientModel) -> Result<Vec<OmegaSample>> {
    if m.structure().omega == Structure::Constant {
        Ok(vec![m.system.sample_omega(c.seed)?])
    } else {
        m.system.sample_many(c.seed, c.samples)
    }
}

/// Runs `solve(i, j)` for every (ε_i, ω_j) in parallel, isolating failures, and
/// reduces to study rows in schedule order.
fn sweep<F>(
    res: &mut ScenarioResult,
    c: &ScenarioConfig,
    schedule: &[ScalePair],
    n_omega: usize,
    solve: F,
) -> Vec<StudyRow>
where
    F: Fn(&ScalePair, usize) -> Result<Fine> + Sync,
{
    let tasks: Vec<(usize, usize)> = (0..schedule.len())
        .flat_map(|i| (0..n_omega).map(move |j| (i, j)))
        .collect();
    let out: Vec<Result<Fine>> = tasks
        .par_iter()
        .map(|&(i, j)| isolated(|| solve(&schedule[i], j)))
        .collect();
    let mut per_eps: Vec<Vec<Fine>> = (0..schedule.len()).map(|_| Vec::new()).collect();
    for (&(i, j), r) in tasks.iter().zip(out) {
        let id = format!("fine eps2={} omega={j}", schedule[i].eps2);
        match r {
            Ok(f) => {
                res.tasks.push(TaskStatus {
                    id,
                    state: TaskState::Ok,
                    error: None,
                });
                per_eps[i].push(f);
                if c.save_fields {
                    if let Some(field) = per_eps[i].last_mut().unwrap().field.take() {
                        res.fields.push((format!("fine_e{i}_w{j}"), field));
                    }
                }
            }
            Err(e) => res.tasks.push(TaskStatus {
                id,
                state: TaskState::Failed,
                error: Some(e.to_string()),
            }),
        }
    }
    schedule
        .iter()
        .zip(&per_eps)
        .map(|(sc, fs)| {
            let gaps: Vec<f64> = fs.iter().map(|f| f.gap).collect();
            let est = match gaps.len() {
                0 => McEstimate {
                    mean: f64::NAN,
                    std: 0.0,
                    half_width: 0.0,
                    samples: 0,
                },
                1 => McEstimate::exact(gaps[0]),
                _ => McEstimate::from_samples(&gaps),
            };
            let fold = |g: fn(&Fine) -> Option<f64>| fs.iter().filter_map(g).reduce(f64::max);
            StudyRow {
                eps1: sc.eps1,
                eps2: sc.eps2,
                tasks: fs.len(),
                gap: est.mean,
                half_width: est.half_width,
                max_divergence: fold(|f| f.divergence),
                max_rotation_energy: fold(|f| f.rotation.map(f64::abs)),
                verdict: true,
            }
        })
        .collect()
}

/// Gap column must decrease (within slack and half-widths) and end below the tolerance.
fn judge_study(res: &mut ScenarioResult, c: &ScenarioConfig, mut rows: Vec<StudyRow>) {
    let tol = c.tolerances.gap;
    let slack = c.tolerances.slack;
    let mut decreasing = true;
    for k in 1..rows.len() {
        let (a, b) = (&rows[k - 1], &rows[k]);
        let ok = b.gap < a.gap * (1.0 + slack) + a.half_width + b.half_width;
        rows[k].verdict = ok;
        decreasing &= ok;
    }
    if let Some(last) = rows.last_mut() {
        let ok = last.gap <= tol + last.half_width;
        last.verdict &= ok;
        res.verdict(
            "relative L2 gap at smallest eps",
            ok,
            last.gap,
            tol + last.half_width,
        );
        let worst = rows
            .windows(2)
            .map(|w| w[1].gap - w[0].gap)
            .fold(f64::NEG_INFINITY, f64::max);
        res.verdict("gap decreasing in eps", decreasing, worst, slack);
    }
    res.study = rows;
}

/// Entry-wise check against an expected matrix: relative for non-zero entries,
/// absolute (scaled by the largest entry) for zeros.
pub(super) fn matrix_error(got: &[Vec<f64>], want: &[Vec<f64>]) -> Result<f64> {
    if got.len() != want.len() || got.iter().zip(want).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Config("expected tensor has the wrong shape".into()));
    }
    let scale = want
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    Ok(got
        .iter()
        .flatten()
        .zip(want.iter().flatten())
        .map(|(a, b)| (a - b).abs() / if *b != 0.0 { b.abs() } else { scale })
        .fold(0.0, f64::max))
}

fn check_effective(res: &mut ScenarioResult, c: &ScenarioConfig) -> Result<()> {
    if let (Some(want), Some(got)) = (&c.expect.effective, &res.summary.effective) {
        let err = matrix_error(got, want)?;
        let tol = c.tolerances.expect;
        res.verdict("effective tensor matches expectation", err <= tol, err, tol);
    }
    Ok(())
}

fn infer_regime(m: &CoefficientModel) -> Regime {
    let t = m.structure();
    match (t.omega, t.y) {
        (Structure::Constant, _) => Regime::Deterministic,
        (_, Structure::Constant) => Regime::Stochastic,
        _ => Regime::Reiterated,
    }
}

pub(super) fn elliptic(c: &ScenarioConfig, schedule: &[ScalePair]) -> Result<ScenarioResult> {
    let m = model(c);
    let dim = m.dim;
    m.validate(c.seed, None)?;
    let regime = c.regime.unwrap_or_else(|| infer_regime(m));
    if c.kind == ScenarioKind::ReiteratedElliptic && regime != Regime::Reiterated {
        return Err(Error::Config(format!(
            "reiterated-elliptic scenario needs both ω- and y-dependence, model gives {regime:?}"
        )));
    }
    let mut res = ScenarioResult::default();
    let mg = MacroGrid::unit(dim, c.macro_cells());
    let settings = CellSettings {
        y_cell: c.y_cell(),
        omega_cell: c.omega_cell(),
        samples: c.samples,
        seed: c.seed,
    };
    let a = effective_tensor(m, &mg.grid()?, regime, &settings, None)?;
    res.tasks.push(TaskStatus {
        id: "cell".into(),
        state: TaskState::Ok,
        error: None,
    });
    res.summary.regime = Some(regime);
    res.summary.effective = Some(tensor_rows(&a.values[0]));
    res.summary.effective_half_width = Some(tensor_rows(&a.half_widths[0]));
    check_effective(&mut res, c)?;
    if schedule.is_empty() {
        return Ok(res);
    }
    let source = c.source.clone().unwrap_or_else(|| Source::constant(1.0));
    let u0 = solve_homogenized_elliptic(&a, &source, &mg)?;
    let norm0 = u0.field.l2_norm()?;
    if norm0 == 0.0 {
        return Err(Error::Parameter(
            "homogenized solution vanishes; relative gaps undefined".into(),
        ));
    }
    res.summary
        .values
        .insert("homogenized_l2_norm".into(), norm0);
    let ws = omegas(c, m)?;
    let rows = sweep(&mut res, c, schedule, ws.len(), |sc, j| {
        let u = solve_fine_elliptic(
            m,
            sc,
            &ws[j],
            &source,
            &MacroGrid::resolving_with(dim, sc.eps2, c.grids.fine_per_period),
        )?;
        Ok(Fine {
            gap: u.field.l2_distance(&u0.field)? / norm0,
            divergence: None,
            rotation: None,
            field: Some(u.field),
        })
    });
    if c.save_fields {
        res.fields.insert(0, ("homogenized".into(), u0.field));
    }
    judge_study(&mut res, c, rows);
    Ok(res)
}

pub(super) fn monotone(c: &ScenarioConfig, schedule: &[ScalePair]) -> Result<ScenarioResult> {
    let m = model(c);
    let dim = m.dim;
    m.validate(c.seed, None)?;
    let flux = m
        .flux
        .as_ref()
        .ok_or_else(|| Error::Config("monotone-reynolds scenario needs model.flux".into()))?;
    let mut res = ScenarioResult::default();
    let w0 = m.system.sample_omega(c.seed)?;
    let x0 = vec![0.5; dim];
    if flux.exponent == 2.0 && m.tensor.is_some() {
        // p = 2 must reproduce the linear pipeline.
        let mut e1 = vec![0.0; dim];
        e1[0] = 1.0;
        // b shifts the flux by a constant, so compare increments.
        let mono = solve_monotone_cell(m, &x0, &w0, &e1, &c.y_cell(), None, &c.monotone)?;
        let zero =
            solve_monotone_cell(m, &x0, &w0, &vec![0.0; dim], &c.y_cell(), None, &c.monotone)?;
        let lin = solve_deterministic_cell(m, &x0, &w0, &c.y_cell())?;
        let d = (0..dim)
            .map(|i| (mono.flux[i] - zero.flux[i] - lin.effective.get(i, 0)).abs())
            .fold(0.0, f64::max);
        res.summary.values.insert("p2_flux_difference".into(), d);
        res.verdict(
            "p=2 flux equals linear effective tensor",
            d <= 1e-6,
            d,
            1e-6,
        );
    }
    let mg = MacroGrid::unit(dim, c.macro_cells());
    let u0 = solve_homogenized_monotone(m, &mg, &c.y_cell(), &c.monotone)?;
    res.tasks.push(TaskStatus {
        id: "homogenized".into(),
        state: TaskState::Ok,
        error: None,
    });
    let norm0 = u0.field.l2_norm()?;
    res.summary
        .values
        .insert("homogenized_l2_norm".into(), norm0);
    res.summary
        .values
        .insert("homogenized_iterations".into(), u0.iterations as f64);
    if schedule.is_empty() {
        return Ok(res);
    }
    if norm0 == 0.0 {
        return Err(Error::Parameter(
            "homogenized solution vanishes; relative gaps undefined".into(),
        ));
    }
    let rows = sweep(&mut res, c, schedule, 1, |sc, _| {
        let u = solve_fine_monotone(
            m,
            sc,
            &w0,
            &MacroGrid::resolving_with(dim, sc.eps2, c.grids.fine_per_period),
            &c.monotone,
        )?;
        Ok(Fine {
            gap: u.field.l2_distance(&u0.field)? / norm0,
            divergence: None,
            rotation: None,
            field: Some(u.field),
        })
    });
    if c.save_fields {
        res.fields.insert(0, ("homogenized".into(), u0.field));
    }
    judge_study(&mut res, c, rows);
    Ok(res)
}

/// Default body force: component k is sin(2π x_{k+1}).
fn default_force(dim: usize) -> Vec<Profile> {
    (0..dim)
        .map(|k| {
            let mut kv = vec![0.0; dim];
            kv[(k + 1) % dim] = 1.0;
            Profile::sine(0.0, 1.0, &kv)
        })
        .collect()
}

const ROTATION_TOL: f64 = 1e-12;
const DIVERGENCE_TOL: f64 = 1e-8;

pub(super) fn stokes(c: &ScenarioConfig, schedule: &[ScalePair]) -> Result<ScenarioResult> {
    let m = model(c);
    let dim = m.dim;
    m.validate(c.seed, None)?;
    let tags = m.structure();
    if tags.omega != Structure::Constant || tags.x != Structure::Constant {
        return Err(Error::Unsupported(
            "Stokes scenarios support ω- and x-independent viscosity only".into(),
        ));
    }
    if m.coriolis.is_none() {
        return Err(Error::Config("stokes scenario needs model.coriolis".into()));
    }
    let force = c.force.clone().unwrap_or_else(|| default_force(dim));
    let mut res = ScenarioResult::default();
    let w0 = m.system.sample_omega(c.seed)?;
    let x0 = vec![0.5; dim];
    let cell = solve_stokes_cell(m, &x0, &w0, &c.y_cell(), &c.uzawa)?;
    res.summary
        .values
        .insert("cell_max_divergence".into(), cell.max_divergence);
    let h = effective_coriolis(
        m,
        &x0,
        &AveragingPlan::for_dim(dim),
        c.samples.max(2),
        c.seed,
    )?;
    res.summary.coriolis = Some(h.mean);
    res.summary.effective = Some(tensor_rows(&cell.scalar_effective));
    if let Some(want) = c.expect.coriolis {
        let err = (0..3)
            .map(|k| (h.mean[k] - want[k]).abs())
            .fold(0.0, f64::max);
        let tol = c.tolerances.expect;
        res.verdict("coriolis mean matches expectation", err <= tol, err, tol);
    }
    check_effective(&mut res, c)?;
    let visc = MacroViscosity::Full {
        tensor: cell.viscosity.clone(),
    };
    let mg = MacroGrid::unit(dim, c.macro_cells());
    let u0 = solve_homogenized_stokes(&visc, &[h.mean], &force, &mg, &c.uzawa)?.remove(0);
    res.tasks.push(TaskStatus {
        id: "homogenized".into(),
        state: TaskState::Ok,
        error: None,
    });
    let norm0 = u0.velocity.l2_norm()?;
    res.summary
        .values
        .insert("homogenized_l2_norm".into(), norm0);
    res.summary
        .values
        .insert("homogenized_rotation_energy".into(), u0.rotation_energy);
    res.summary
        .values
        .insert("homogenized_max_divergence".into(), u0.max_divergence);
    if schedule.is_empty() {
        return Ok(res);
    }
    if norm0 == 0.0 {
        return Err(Error::Parameter(
            "homogenized velocity vanishes; relative gaps undefined".into(),
        ));
    }
    let rows = sweep(&mut res, c, schedule, 1, |sc, _| {
        let u = solve_fine_stokes(
            m,
            sc,
            &w0,
            &force,
            &MacroGrid::resolving_with(dim, sc.eps2, c.grids.fine_per_period),
            &c.uzawa,
        )?;
        Ok(Fine {
            gap: u.velocity.l2_distance(&u0.velocity)? / norm0,
            divergence: Some(u.max_divergence),
            rotation: Some(u.rotation_energy),
            field: Some(u.velocity),
        })
    });
    let rot = rows
        .iter()
        .filter_map(|r| r.max_rotation_energy)
        .fold(u0.rotation_energy.abs(), f64::max);
    let div = rows
        .iter()
        .filter_map(|r| r.max_divergence)
        .fold(u0.max_divergence, f64::max);
    res.verdict(
        "rotation energy vanishes on every solve",
        rot <= ROTATION_TOL,
        rot,
        ROTATION_TOL,
    );
    res.verdict(
        "divergence on every solve",
        div <= DIVERGENCE_TOL,
        div,
        DIVERGENCE_TOL,
    );
    if c.save_fields {
        res.fields.insert(0, ("homogenized".into(), u0.velocity));
    }
    judge_study(&mut res, c, rows);
    Ok(res)
}
