//! Built-in scenarios and the ten acceptance criteria behind `verify`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{execute, Grids, ScenarioConfig, ScenarioKind, ScenarioResult, Tolerances};
use super::{Expectations, MeanLabConfig, SigmaLabConfig};
use crate::corrector::{solve_deterministic_cell, solve_monotone_cell, CellGrid, MonotoneOptions};
use crate::dynsys::{DynamicalSystem, StationaryField, ValueDistribution};
use crate::error::{Error, Result};
use crate::model::{CoefficientModel, NonlinearFlux, ScalarCoef, TensorCoef};
use crate::profile::{Profile, Wave};
use crate::solvers::Source;
use crate::stokes::UzawaOptions;

fn sqrt3() -> f64 {
    3f64.sqrt()
}

fn base(name: &str, kind: ScenarioKind, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        kind,
        seed,
        samples: 16,
        eps2: Vec::new(),
        eps1: None,
        model: None,
        regime: None,
        grids: Grids::default(),
        source: None,
        force: None,
        monotone: MonotoneOptions::default(),
        uzawa: UzawaOptions::default(),
        tolerances: Tolerances::default(),
        expect: Expectations::default(),
        sigma: None,
        meanvalue: None,
        save_fields: false,
        output: None,
    }
}

/// 2 + sin(2π y₁) in `dim` dimensions.
fn two_plus_sine(dim: usize) -> Profile {
    let mut k = vec![0.0; dim];
    k[0] = 1.0;
    Profile::sine(2.0, 1.0, &k)
}

fn laminate(dim: usize) -> CoefficientModel {
    CoefficientModel::linear(
        DynamicalSystem::periodic(dim),
        TensorCoef::isotropic(ScalarCoef::of_y(two_plus_sine(dim))),
    )
}

fn checkerboard_model(dim: usize, lo: f64, hi: f64) -> Result<CoefficientModel> {
    let sys = DynamicalSystem::checkerboard(dim, 1.0, ValueDistribution::two_valued(lo, hi))?;
    Ok(
        CoefficientModel::linear(sys, TensorCoef::isotropic(ScalarCoef::field_times(0, None)))
            .with_fields(vec![StationaryField::lattice()]),
    )
}

/// c = 2 + sin 2πy, b = sin 2πy − x, growth exponent p.
fn monotone_model(p: f64) -> CoefficientModel {
    let c = ScalarCoef::of_y(two_plus_sine(1));
    let b = ScalarCoef::of_y(Profile::sine(0.0, 1.0, &[1.0])).plus(ScalarCoef::of_x(
        Profile::constant(0.0).with_monomial(-1.0, &[1]),
    ));
    CoefficientModel::linear(
        DynamicalSystem::periodic(1),
        TensorCoef::isotropic(c.clone()),
    )
    .with_flux(NonlinearFlux {
        coefficient: c,
        exponent: p,
        regularization: 0.0,
    })
    .with_rhs_b(vec![b])
}

pub const BUILTIN_NAMES: [&str; 9] = [
    "elliptic-1d",
    "reiterated-1d",
    "laminate-2d",
    "checkerboard-2d",
    "monotone-1d",
    "stokes-2d",
    "sigma-lab",
    "meanvalue-lab",
    "checkerboard-2d-dual",
];

/// The scenario library shipped with the toolkit.
pub fn builtin(name: &str, seed: u64) -> Result<ScenarioConfig> {
    let c = match name {
        "elliptic-1d" => {
            let mut c = base(name, ScenarioKind::Elliptic, seed);
            c.model = Some(laminate(1));
            c.eps2 = vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
            c.grids.cell = 256;
            c.source = Some(Source::constant(1.0));
            c.expect.effective = Some(vec![vec![sqrt3()]]);
            c.tolerances.expect = 2e-3 / sqrt3();
            c
        }
        "reiterated-1d" => {
            let sys =
                DynamicalSystem::checkerboard(1, 1.0, ValueDistribution::two_valued(1.0, 2.0))?;
            let mut c = base(name, ScenarioKind::ReiteratedElliptic, seed);
            c.model = Some(
                CoefficientModel::linear(
                    sys,
                    TensorCoef::isotropic(ScalarCoef::field_times(0, Some(two_plus_sine(1)))),
                )
                .with_fields(vec![StationaryField::lattice()]),
            );
            c.samples = 64;
            c.grids = Grids {
                macro_cells: None,
                cell: 256,
                omega_cells: 256,
                truncation: 256.0,
                ..Grids::default()
            };
            c.expect.effective = Some(vec![vec![4.0 / 3.0 * sqrt3()]]);
            c.tolerances.expect = 0.02;
            c
        }
        "laminate-2d" => {
            let mut c = base(name, ScenarioKind::Elliptic, seed);
            c.model = Some(laminate(2));
            c.grids.cell = 128;
            c.expect.effective = Some(vec![vec![sqrt3(), 0.0], vec![0.0, 2.0]]);
            c.tolerances.expect = 0.01;
            c
        }
        "checkerboard-2d" | "checkerboard-2d-dual" => {
            let dual = name.ends_with("dual");
            let (lo, hi, a) = if dual {
                (0.25, 1.0, 0.5)
            } else {
                (1.0, 4.0, 2.0)
            };
            let mut c = base(name, ScenarioKind::Elliptic, seed);
            c.model = Some(checkerboard_model(2, lo, hi)?);
            c.samples = 64;
            c.grids = Grids {
                macro_cells: None,
                cell: 128,
                omega_cells: 128,
                truncation: 32.0,
                ..Grids::default()
            };
            c.expect.effective = Some(vec![vec![a, 0.0], vec![0.0, a]]);
            c.tolerances.expect = 0.05;
            c
        }
        "monotone-1d" => {
            let mut c = base(name, ScenarioKind::MonotoneReynolds, seed);
            c.model = Some(monotone_model(3.0));
            c.eps2 = vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
            c.grids.macro_cells = Some(64);
            c.grids.cell = 128;
            // The p = 3 flux degenerates where Du vanishes; 8 cells per period bias u.
            c.grids.fine_per_period = 32;
            c
        }
        "stokes-2d" => {
            let h3 = Profile::constant(0.0).with_power_term(2.0, &[1.0, 0.0], Wave::Sin, 2);
            let mut c = base(name, ScenarioKind::Stokes, seed);
            c.model = Some(laminate(2).with_coriolis(vec![
                ScalarCoef::constant(0.0),
                ScalarCoef::constant(0.0),
                ScalarCoef::of_y(h3),
            ]));
            c.eps2 = vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];
            c.samples = 2;
            c.grids.cell = 32;
            c.grids.macro_cells = Some(128);
            c.force = Some(vec![
                Profile::sine(0.0, 1.0, &[0.0, 1.0]),
                Profile::cosine(0.0, 1.0, &[1.0, 0.0]),
            ]);
            c.expect.coriolis = Some([0.0, 0.0, 1.0]);
            c.tolerances.expect = 1e-3;
            c.tolerances.gap = 0.10;
            c
        }
        "sigma-lab" => {
            let mut c = base(name, ScenarioKind::SigmaLab, seed);
            c.eps2 = vec![1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
            c.sigma = Some(SigmaLabConfig::default());
            c
        }
        "meanvalue-lab" => {
            let mut c = base(name, ScenarioKind::MeanvalueLab, seed);
            c.meanvalue = Some(MeanLabConfig::default());
            c
        }
        other => {
            return Err(Error::Config(format!(
                "unknown built-in scenario {other:?}; known: {}",
                BUILTIN_NAMES.join(", ")
            )))
        }
    };
    c.validate()?;
    Ok(c)
}

/// Outcome of one acceptance criterion; contains no timing so it is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub title: String,
    pub pass: bool,
    pub measured: BTreeMap<String, f64>,
    pub failures: Vec<String>,
    /// SHA-256 of every record the criterion produced.
    pub digest: String,
}

pub const CRITERIA: [(u8, &str, u64); 10] = [
    (1, "1D deterministic effective coefficient", 1),
    (2, "reiterated 1D composition", 10),
    (3, "2D laminate effective tensor", 30),
    (4, "2D random checkerboard", 300),
    (5, "1D epsilon-convergence", 60),
    (6, "monotone pipeline", 120),
    (7, "Stokes with rotation", 300),
    (8, "Sigma-convergence suite", 120),
    (9, "ergodic averages", 60),
    (10, "reproducibility", 900),
];

/// Time budget of criterion `id`, on a 4-core desktop.
pub fn budget(id: u8) -> Duration {
    Duration::from_secs(CRITERIA.iter().find(|c| c.0 == id).map_or(0, |c| c.2))
}

struct Collector {
    measured: BTreeMap<String, f64>,
    failures: Vec<String>,
    hasher: Sha256,
}

impl Collector {
    fn new() -> Self {
        Self {
            measured: BTreeMap::new(),
            failures: Vec::new(),
            hasher: Sha256::new(),
        }
    }

    fn record<T: Serialize>(&mut self, v: &T) {
        self.hasher
            .update(serde_json::to_vec(v).expect("records serialize"));
    }

    fn value(&mut self, key: &str, v: f64) {
        self.measured.insert(key.into(), v);
    }

    fn require(&mut self, what: &str, ok: bool) {
        if !ok {
            self.failures.push(what.to_string());
        }
    }

    /// Runs a built-in scenario and folds every one of its verdicts into the criterion.
    fn scenario(&mut self, name: &str, seed: u64) -> Result<ScenarioResult> {
        let c = builtin(name, seed)?;
        let res = execute(&c, &c.schedule()?)?;
        self.record(&(
            &res.summary,
            &res.study,
            &res.reports,
            &res.verdicts,
            &res.tasks,
        ));
        for v in &res.verdicts {
            self.require(
                &format!(
                    "{name}: {} ({:.3e} vs {:.3e})",
                    v.name, v.value, v.tolerance
                ),
                v.pass,
            );
        }
        for t in res.tasks.iter().filter(|t| t.error.is_some()) {
            self.failures.push(format!(
                "{name}: task {} failed: {}",
                t.id,
                t.error.as_deref().unwrap_or("")
            ));
        }
        Ok(res)
    }

    fn finish(self, id: u8) -> CriterionOutcome {
        CriterionOutcome {
            id,
            title: CRITERIA[id as usize - 1].1.to_string(),
            pass: self.failures.is_empty(),
            measured: self.measured,
            failures: self.failures,
            digest: hex::encode(self.hasher.finalize()),
        }
    }
}

fn effective_00(res: &ScenarioResult) -> f64 {
    res.summary.effective.as_ref().map_or(f64::NAN, |e| e[0][0])
}

fn criterion_body(id: u8, seed: u64, col: &mut Collector) -> Result<()> {
    match id {
        1 => {
            let r = col.scenario_effective_only("elliptic-1d", seed)?;
            let a = effective_00(&r);
            col.value("a_eff", a);
            col.require("a_eff within 2e-3 of sqrt(3)", (a - sqrt3()).abs() <= 2e-3);
        }
        2 => {
            let r = col.scenario("reiterated-1d", seed)?;
            let a = effective_00(&r);
            col.value("a_eff", a);
            col.require(
                "composed effective within 2% of 4/3 sqrt(3)",
                (a / (4.0 / 3.0 * sqrt3()) - 1.0).abs() <= 0.02,
            );
        }
        3 => {
            let r = col.scenario("laminate-2d", seed)?;
            let e = r.summary.effective.clone().unwrap_or_default();
            col.value("a11", e[0][0]);
            col.value("a22", e[1][1]);
            col.value("a12", e[0][1]);
        }
        4 => {
            let r = col.scenario("checkerboard-2d", seed)?;
            let d = col.scenario("checkerboard-2d-dual", seed)?;
            let (a, b) = (effective_00(&r), effective_00(&d));
            col.value("a_eff", a);
            col.value("a_eff_dual", b);
            col.value("duality_product", a * b);
            col.require(
                "effective scalar within 5% of 2",
                (a / 2.0 - 1.0).abs() <= 0.05,
            );
            col.require(
                "Dykhne product a(1,4)·a(1/4,1)/... within 5% of 1",
                (a * b - 1.0).abs() <= 0.05,
            );
        }
        5 => {
            let r = col.scenario("elliptic-1d", seed)?;
            for row in &r.study {
                col.value(&format!("gap_eps2_{}", row.eps2), row.gap);
            }
            let strict = r.study.windows(2).all(|w| w[1].gap < w[0].gap);
            col.require("relative gap strictly decreasing", strict);
            let last = r.study.last().map_or(f64::NAN, |r| r.gap);
            col.require("relative gap <= 5% at eps2 = 1/64", last <= 0.05);
        }
        6 => {
            let m2 = monotone_model(2.0);
            let w = m2.system.sample_omega(seed)?;
            let cell = CellGrid::unit(1, 256);
            let opts = MonotoneOptions::default();
            let mono = solve_monotone_cell(&m2, &[0.5], &w, &[1.0], &cell, None, &opts)?;
            let zero = solve_monotone_cell(&m2, &[0.5], &w, &[0.0], &cell, None, &opts)?;
            let lin = solve_deterministic_cell(&m2, &[0.5], &w, &cell)?;
            let d = (mono.flux[0] - zero.flux[0] - lin.effective.get(0, 0)).abs();
            col.value("p2_flux_difference", d);
            col.require("p=2 flux matches linear effective within 1e-6", d <= 1e-6);

            let m3 = CoefficientModel::linear(
                DynamicalSystem::periodic(2),
                TensorCoef::isotropic(ScalarCoef::constant(1.0)),
            )
            .with_flux(NonlinearFlux {
                coefficient: ScalarCoef::constant(1.0),
                exponent: 3.0,
                regularization: 0.0,
            });
            let w = m3.system.sample_omega(seed)?;
            let s = solve_monotone_cell(
                &m3,
                &[0.5, 0.5],
                &w,
                &[1.0, -0.5],
                &CellGrid::unit(2, 16),
                None,
                &opts,
            )?;
            let z = s.corrector.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            col.record(&(d, z));
            col.value("p3_constant_corrector_max", z);
            col.require(
                "p=3 constant-coefficient corrector vanishes to 1e-10",
                z <= 1e-10,
            );

            let r = col.scenario("monotone-1d", seed)?;
            let last = r.study.last().map_or(f64::NAN, |r| r.gap);
            col.value("gap_eps2_1/64", last);
            col.require("monotone gap <= 5% at eps2 = 1/64", last <= 0.05);
        }
        7 => {
            let r = col.scenario("stokes-2d", seed)?;
            let h = r.summary.coriolis.unwrap_or([f64::NAN; 3]);
            col.value("coriolis_3", h[2]);
            col.require(
                "coriolis mean within 1e-3 of c/2",
                (h[2] - 1.0).abs() <= 1e-3,
            );
            for row in &r.study {
                col.value(&format!("gap_eps2_{}", row.eps2), row.gap);
                col.value(
                    &format!("div_eps2_{}", row.eps2),
                    row.max_divergence.unwrap_or(f64::NAN),
                );
            }
            let last = r.study.last().map_or(f64::NAN, |r| r.gap);
            col.require("velocity gap <= 10% at eps2 = 1/32", last <= 0.10);
        }
        8 => {
            let r = col.scenario("sigma-lab", seed)?;
            col.value("reports", r.reports.len() as f64);
            col.require(
                "control rejected",
                r.reports
                    .iter()
                    .any(|x| x.scenario.ends_with("/control") && !x.pass),
            );
        }
        9 => {
            let r = col.scenario("meanvalue-lab", seed)?;
            for (k, v) in &r.summary.values {
                col.value(k, *v);
            }
        }
        _ => return Err(Error::Parameter(format!("no acceptance criterion {id}"))),
    }
    Ok(())
}

impl Collector {
    /// The scenario's cell stage only (no ε-sweep).
    fn scenario_effective_only(&mut self, name: &str, seed: u64) -> Result<ScenarioResult> {
        let mut c = builtin(name, seed)?;
        c.eps2.clear();
        let res = execute(&c, &[])?;
        self.record(&(&res.summary, &res.verdicts));
        for v in &res.verdicts {
            self.require(&format!("{name}: {}", v.name), v.pass);
        }
        Ok(res)
    }
}

/// Runs criterion `id` (1 to 9); module errors become failures, not panics.
pub fn run_criterion(id: u8, seed: u64) -> CriterionOutcome {
    let mut col = Collector::new();
    let r = super::isolated(|| criterion_body(id, seed, &mut col));
    if let Err(e) = r {
        col.failures.push(format!("error: {e}"));
    }
    col.finish(id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub seed: u64,
    pub criteria: Vec<CriterionOutcome>,
    pub pass: bool,
}

/// Criterion line printed by `verify` and the acceptance test.
pub fn format_line(o: &CriterionOutcome, elapsed: Duration) -> String {
    let within = elapsed <= budget(o.id);
    let status = if o.pass && within { "PASS" } else { "FAIL" };
    let mut s = format!(
        "[{status}] criterion {:>2}: {} ({:.1} s, budget {} s)",
        o.id,
        o.title,
        elapsed.as_secs_f64(),
        budget(o.id).as_secs()
    );
    let shown: Vec<String> = o
        .measured
        .iter()
        .take(6)
        .map(|(k, v)| format!("{k}={v:.6}"))
        .collect();
    if !shown.is_empty() {
        s.push_str(&format!(" [{}]", shown.join(", ")));
    }
    for f in &o.failures {
        s.push_str(&format!("\n         - {f}"));
    }
    s
}

/// Runs all ten criteria; `on_line` receives each formatted line as soon as it is known.
/// Criterion 10 reruns 1 to 9 and compares every record bit for bit.
pub fn run_acceptance(
    seed: u64,
    mut on_line: impl FnMut(&CriterionOutcome, Duration),
) -> (AcceptanceReport, Vec<Duration>) {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let mut times = Vec::new();
    for id in 1..=9u8 {
        let t = Instant::now();
        let o = run_criterion(id, seed);
        let dt = t.elapsed();
        on_line(&o, dt);
        outcomes.push(o);
        times.push(dt);
    }
    let t = Instant::now();
    let mut col = Collector::new();
    let mut differing = Vec::new();
    for first in &outcomes {
        let again = run_criterion(first.id, seed);
        if serde_json::to_vec(&again).ok() != serde_json::to_vec(first).ok() {
            differing.push(first.id);
        }
    }
    col.value("criteria_compared", outcomes.len() as f64);
    col.value("criteria_differing", differing.len() as f64);
    col.require(
        &format!("records differ between runs for criteria {differing:?}"),
        differing.is_empty(),
    );
    col.record(
        &outcomes
            .iter()
            .map(|o| o.digest.clone())
            .collect::<Vec<_>>(),
    );
    let mut ten = col.finish(10);
    let total = start.elapsed();
    if total > budget(10) {
        ten.failures
            .push(format!("whole suite took {:.0} s", total.as_secs_f64()));
        ten.pass = false;
    }
    on_line(&ten, total);
    let _ = t;
    outcomes.push(ten);
    times.push(total);
    let pass = outcomes
        .iter()
        .zip(&times)
        .all(|(o, dt)| o.pass && *dt <= budget(o.id));
    (
        AcceptanceReport {
            seed,
            criteria: outcomes,
            pass,
        },
        times,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_round_trip() {
        for name in BUILTIN_NAMES {
            let c = builtin(name, 42).unwrap();
            let back = ScenarioConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back.hash(), c.hash(), "{name}");
        }
        assert!(builtin("nope", 0).is_err());
    }

    #[test]
    fn criterion_one_passes() {
        let o = run_criterion(1, 42);
        assert!(o.pass, "{:?}", o.failures);
        assert_eq!(o, run_criterion(1, 42));
    }
}
