//! Built-in batteries for Σ-convergence checks and ergodic averaging.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ScenarioConfig, ScenarioResult, TaskState, TaskStatus};
use crate::corrector::{effective_tensor, CellGrid, CellSettings, Regime};
use crate::dynsys::{
    reference_systems, DynamicalSystem, OmegaSample, StationaryField, SystemKind, ValueDistribution,
};
use crate::error::{Error, Result};
use crate::meanval::{birkhoff_average, ensemble_mean, ergodicity_defect, AveragingPlan};
use crate::model::{CoefficientModel, ScalarCoef, TensorCoef};
use crate::profile::{Profile, Wave};
use crate::rng::{self, Stream};
use crate::sigma::{
    check_admissible, check_lower_semicontinuity, check_product, check_strong_sigma,
    check_weak_sigma, Along, Bump, ConvergenceReport, Exponents, FnSequence, Limit, Realization,
    Separable, Sequence, SigmaSettings, Term, TestFunction,
};
use crate::solvers::{
    solve_fine_elliptic, solve_homogenized_elliptic, MacroGrid, ScalePair, Source,
};
use crate::stats::McEstimate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaCheck {
    /// u ≡ 1, weak and strong, at 1e-10.
    Constant,
    /// Admissible trig-polynomial u(x, ω, y) along the scales, weak.
    AdmissibleTrig,
    /// u = ψ(T(x/ε₁)ω) for a checkerboard field, weak.
    StochasticField,
    /// u = g(x/ε₂) for a trig polynomial g, strong.
    StrongTrig,
    /// sin(2πx/ε₂) against the limit 0 in the strong check; must be rejected.
    Control,
    LowerSemicontinuity,
    Product,
    AdmissibleAbs,
    /// Fine elliptic solutions against the homogenized one (1D).
    FineElliptic,
}

impl SigmaCheck {
    pub const ALL: [SigmaCheck; 9] = [
        SigmaCheck::Constant,
        SigmaCheck::AdmissibleTrig,
        SigmaCheck::StochasticField,
        SigmaCheck::StrongTrig,
        SigmaCheck::Control,
        SigmaCheck::LowerSemicontinuity,
        SigmaCheck::Product,
        SigmaCheck::AdmissibleAbs,
        SigmaCheck::FineElliptic,
    ];

    fn label(self) -> &'static str {
        match self {
            SigmaCheck::Constant => "constant",
            SigmaCheck::AdmissibleTrig => "admissible-trig",
            SigmaCheck::StochasticField => "stochastic-field",
            SigmaCheck::StrongTrig => "strong-trig",
            SigmaCheck::Control => "control",
            SigmaCheck::LowerSemicontinuity => "lower-semicontinuity",
            SigmaCheck::Product => "product",
            SigmaCheck::AdmissibleAbs => "admissible-abs",
            SigmaCheck::FineElliptic => "fine-elliptic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaLabConfig {
    #[serde(default = "one_dim")]
    pub dim: usize,
    #[serde(default = "all_checks")]
    pub checks: Vec<SigmaCheck>,
    /// Overrides the system-dependent default tolerance.
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// Tolerance of the fine-elliptic check.
    #[serde(default = "fine_tol")]
    pub fine_tolerance: f64,
}

fn one_dim() -> usize {
    1
}

fn all_checks() -> Vec<SigmaCheck> {
    SigmaCheck::ALL.to_vec()
}

fn fine_tol() -> f64 {
    0.05
}

impl Default for SigmaLabConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            checks: all_checks(),
            tolerance: None,
            fine_tolerance: fine_tol(),
        }
    }
}

/// Fine elliptic solutions `u_ε(·, ω)` as a sequence; each realization is one solve.
pub struct FineElliptic<'a> {
    pub model: &'a CoefficientModel,
    pub source: &'a Source,
}

impl Sequence for FineElliptic<'_> {
    fn realize<'a>(&'a self, scales: &ScalePair, omega: &OmegaSample) -> Result<Realization<'a>> {
        let grid = MacroGrid::resolving(self.model.dim, scales.eps2);
        let u = solve_fine_elliptic(self.model, scales, omega, self.source, &grid)?;
        let field = u.field;
        Ok(Box::new(move |x| field.eval(0, x)))
    }
}

fn axis(dim: usize, k: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = k;
    v
}

fn sin_y(dim: usize) -> Profile {
    Profile::sine(0.0, 1.0, &axis(dim, 1.0))
}

fn phi(dim: usize) -> Bump {
    Bump::centered(dim, 0.4)
}

/// φ, φ·sin(2πy₁), and an off-centre bump times cos(2πx₁).
fn battery(dim: usize) -> Vec<TestFunction> {
    let mut c = vec![0.5; dim];
    c[0] = 0.3;
    vec![
        TestFunction::bump(phi(dim)),
        TestFunction::new(Separable::term(Term::one().bump(phi(dim)).of_y(sin_y(dim)))),
        TestFunction::new(Separable::term(
            Term::one()
                .bump(Bump::new(&c, &vec![0.2; dim]))
                .of_x(Profile::cosine(0.0, 1.0, &axis(dim, 1.0))),
        )),
    ]
}

/// 1 + sin(2πy₁) + ½cos(4πy₁).
fn trig_g(dim: usize) -> Profile {
    Profile::sine(1.0, 1.0, &axis(dim, 1.0)).with_term(0.5, &axis(dim, 2.0), Wave::Cos, 0.0)
}

fn settings(c: &ScenarioConfig, lab: &SigmaLabConfig, dim: usize) -> SigmaSettings {
    let mut s = SigmaSettings::unit(dim)
        .with_samples(c.samples.max(2))
        .with_seed(c.seed);
    s.tolerance = lab.tolerance;
    s
}

fn wave(eps_scale: bool, cosine: bool) -> impl Fn(&ScalePair, &OmegaSample, &[f64]) -> f64 + Sync {
    move |sc: &ScalePair, _: &OmegaSample, x: &[f64]| {
        let eps = if eps_scale { sc.eps2 } else { 1.0 };
        let t = 2.0 * std::f64::consts::PI * x[0] / eps;
        if cosine {
            t.cos()
        } else {
            t.sin()
        }
    }
}

fn run_check(
    check: SigmaCheck,
    c: &ScenarioConfig,
    lab: &SigmaLabConfig,
    schedule: &[ScalePair],
) -> Result<Vec<ConvergenceReport>> {
    let dim = lab.dim;
    let name = |s: &str| format!("{}/{}{s}", c.name, check.label());
    let periodic = DynamicalSystem::periodic(dim);
    let s = settings(c, lab, dim);
    let tests = battery(dim);
    Ok(match check {
        SigmaCheck::Constant => {
            let one = Separable::one();
            let u = Along {
                f: &one,
                system: &periodic,
            };
            let exact = s.clone().with_tolerance(1e-10);
            let lim = Limit::separable(one.clone());
            vec![
                check_weak_sigma(
                    &name("/weak"),
                    &u,
                    &lim,
                    &tests,
                    schedule,
                    &periodic,
                    &exact,
                )?,
                check_strong_sigma(
                    &name("/strong"),
                    &u,
                    &lim,
                    &tests,
                    schedule,
                    &periodic,
                    &exact,
                )?,
            ]
        }
        SigmaCheck::AdmissibleTrig => {
            let sys = DynamicalSystem::quasi_periodic(dim, None)?;
            let psi = StationaryField::torus(Profile::cosine(0.0, 1.0, &[1.0]));
            let x = Separable::new(vec![
                Term::one(),
                Term::one().of_x(Profile::cosine(0.0, 0.5, &axis(dim, 0.5))),
            ]);
            let w = Separable::new(vec![
                Term::one(),
                Term::one().scaled(0.5).of_omega(psi.clone()),
            ]);
            let y = Separable::term(Term::one().of_y(trig_g(dim)));
            let u = x.times(&w).times(&y);
            let mut t = tests.clone();
            t.push(TestFunction::new(Separable::term(
                Term::one()
                    .bump(phi(dim))
                    .of_omega(psi)
                    .of_y(Profile::cosine(0.0, 1.0, &axis(dim, 1.0))),
            )));
            let seq = Along {
                f: &u,
                system: &sys,
            };
            vec![check_weak_sigma(
                &name(""),
                &seq,
                &Limit::separable(u.clone()),
                &t,
                schedule,
                &sys,
                &s,
            )?]
        }
        SigmaCheck::StochasticField => {
            let sys =
                DynamicalSystem::checkerboard(dim, 1.0, ValueDistribution::two_valued(1.0, 3.0))?;
            let psi = Separable::term(Term::one().of_omega(StationaryField::lattice()));
            let mut t = tests.clone();
            t.push(TestFunction::new(Separable::term(
                Term::one()
                    .bump(phi(dim))
                    .of_omega(StationaryField::lattice()),
            )));
            let seq = Along {
                f: &psi,
                system: &sys,
            };
            vec![check_weak_sigma(
                &name(""),
                &seq,
                &Limit::separable(psi.clone()),
                &t,
                schedule,
                &sys,
                &s,
            )?]
        }
        SigmaCheck::StrongTrig => {
            let g = Separable::term(Term::one().of_y(trig_g(dim)));
            let seq = Along {
                f: &g,
                system: &periodic,
            };
            let s = s.clone().with_tolerance(lab.tolerance.unwrap_or(1e-2));
            vec![check_strong_sigma(
                &name(""),
                &seq,
                &Limit::separable(g.clone()),
                &tests,
                schedule,
                &periodic,
                &s,
            )?]
        }
        SigmaCheck::Control => {
            let seq = FnSequence(wave(true, false));
            vec![check_strong_sigma(
                &name(""),
                &seq,
                &Limit::separable(Separable::zero()),
                &tests,
                schedule,
                &periodic,
                &s,
            )?]
        }
        SigmaCheck::LowerSemicontinuity => {
            let u0 = Profile::sine(0.0, 1.0, &axis(dim, 0.5));
            let u0c = u0.clone();
            let osc = wave(true, false);
            let seq = FnSequence(move |sc: &ScalePair, w: &OmegaSample, x: &[f64]| {
                u0c.eval(x) + osc(sc, w, x)
            });
            let lim = Limit::separable(Separable::term(Term::one().of_x(u0)));
            let zero = FnSequence(|_: &ScalePair, _: &OmegaSample, _: &[f64]| 0.0);
            vec![
                check_lower_semicontinuity(&name(""), &seq, &lim, schedule, &periodic, &s)?,
                check_lower_semicontinuity(
                    &name("/zero"),
                    &zero,
                    &Limit::separable(Separable::zero()),
                    schedule,
                    &periodic,
                    &s,
                )?,
            ]
        }
        SigmaCheck::Product => {
            let u = FnSequence(wave(true, false));
            let v = FnSequence(wave(true, true));
            let e = Exponents { p: 2.0, q: 2.0 };
            let zero = Limit::separable(Separable::zero());
            let half = Limit::separable(Separable::one().scaled(0.5));
            vec![
                check_product(
                    &name("/sin-cos"),
                    &u,
                    &v,
                    &zero,
                    e,
                    &tests[..1],
                    schedule,
                    &periodic,
                    &s,
                )?,
                check_product(
                    &name("/sin-sin"),
                    &u,
                    &u,
                    &half,
                    e,
                    &tests[..1],
                    schedule,
                    &periodic,
                    &s,
                )?,
            ]
        }
        SigmaCheck::AdmissibleAbs => {
            let u = Separable::term(Term::one().bump(phi(dim)).of_y(sin_y(dim).absolute()));
            vec![check_admissible(&name(""), &u, schedule, &periodic, &s)?]
        }
        SigmaCheck::FineElliptic => {
            if dim != 1 {
                return Err(Error::Unsupported(
                    "the fine-elliptic Σ-check runs in 1D".into(),
                ));
            }
            let model = CoefficientModel::linear(
                periodic.clone(),
                TensorCoef::isotropic(ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0]))),
            );
            let mg = MacroGrid::unit(1, 512);
            let cell = CellSettings {
                y_cell: CellGrid::unit(1, 256),
                omega_cell: CellGrid::unit(1, 4),
                samples: 2,
                seed: c.seed,
            };
            let a = effective_tensor(&model, &mg.grid()?, Regime::Deterministic, &cell, None)?;
            let source = Source::constant(1.0);
            let u0 = solve_homogenized_elliptic(&a, &source, &mg)?;
            let seq = FineElliptic {
                model: &model,
                source: &source,
            };
            // Deterministic fine solves: two identical ω-samples suffice.
            let s = s.clone().with_samples(2).with_tolerance(lab.fine_tolerance);
            vec![check_weak_sigma(
                &name(""),
                &seq,
                &Limit::field(u0.field),
                &tests,
                schedule,
                &periodic,
                &s,
            )?]
        }
    })
}

pub(super) fn sigma_lab(c: &ScenarioConfig, schedule: &[ScalePair]) -> Result<ScenarioResult> {
    let lab = c.sigma.clone().unwrap_or_default();
    let mut res = ScenarioResult::default();
    for &check in &lab.checks {
        let id = format!("sigma {}", check.label());
        match super::isolated(|| run_check(check, c, &lab, schedule)) {
            Ok(reports) => {
                res.tasks.push(TaskStatus {
                    id,
                    state: TaskState::Ok,
                    error: None,
                });
                for r in reports {
                    let (ok, what) = if check == SigmaCheck::Control {
                        (!r.pass, "rejected")
                    } else {
                        (r.pass, "passes")
                    };
                    let worst = r
                        .verdicts
                        .iter()
                        .filter(|v| v.name.ends_with("final gap"))
                        .map(|v| v.value)
                        .fold(0.0, f64::max);
                    res.verdict(format!("{} {what}", r.scenario), ok, worst, r.tolerance);
                    if check == SigmaCheck::LowerSemicontinuity && !r.scenario.ends_with("/zero") {
                        let tail = &r.norms[r.norms.len() / 2..];
                        let liminf = tail.iter().map(|n| n.norm).fold(f64::INFINITY, f64::min);
                        let strict = liminf - r.norms[0].limit;
                        res.verdict(
                            format!("{} strict inequality", r.scenario),
                            strict >= 0.1,
                            strict,
                            0.1,
                        );
                    }
                    res.reports.push(r);
                }
            }
            Err(e) => res.tasks.push(TaskStatus {
                id,
                state: TaskState::Failed,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(res)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanLabConfig {
    /// Dimension of the Birkhoff and invariant checks.
    #[serde(default = "two")]
    pub dim: usize,
    /// Fixed ω per system for the Birkhoff comparison.
    #[serde(default = "five")]
    pub omegas: usize,
    /// Ensemble size of the Monte-Carlo mean.
    #[serde(default = "ensemble")]
    pub ensemble: usize,
    /// Random (ω, x, y) probes of the group law.
    #[serde(default = "probes")]
    pub probes: usize,
    /// Samples of the measure-preservation test.
    #[serde(default = "preservation")]
    pub preservation_samples: usize,
    /// Radii of the ergodicity-defect schedule (quasi-periodic field, 1D).
    #[serde(default = "defect_radii")]
    pub defect_radii: Vec<f64>,
}

fn two() -> usize {
    2
}
fn five() -> usize {
    5
}
fn ensemble() -> usize {
    200
}
fn probes() -> usize {
    100
}
fn preservation() -> usize {
    4000
}
fn defect_radii() -> Vec<f64> {
    vec![5.0, 10.0, 20.0, 40.0]
}

impl Default for MeanLabConfig {
    fn default() -> Self {
        Self {
            dim: two(),
            omegas: five(),
            ensemble: ensemble(),
            probes: probes(),
            preservation_samples: preservation(),
            defect_radii: defect_radii(),
        }
    }
}

fn kind_label(s: &DynamicalSystem) -> &'static str {
    match s.kind {
        SystemKind::PeriodicShift => "periodic",
        SystemKind::QuasiPeriodicShift { .. } => "quasi-periodic",
        SystemKind::Checkerboard { .. } => "checkerboard",
        SystemKind::RandomPhaseTrig { .. } => "random-phase",
    }
}

pub(super) fn meanvalue_lab(c: &ScenarioConfig) -> Result<ScenarioResult> {
    let lab = c.meanvalue.clone().unwrap_or_default();
    let dim = lab.dim;
    let mut res = ScenarioResult::default();
    let plan = AveragingPlan::for_dim(dim);
    for (k, (sys, f)) in reference_systems(dim).into_iter().enumerate() {
        let label = kind_label(&sys);
        let ens = ensemble_mean(
            &sys,
            &f,
            lab.ensemble,
            rng::derive_seed(c.seed, Stream::Ensemble, k as u64),
        )?;
        let ws = sys.sample_many(
            rng::derive_seed(c.seed, Stream::Probe, k as u64),
            lab.omegas,
        )?;
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for w in &ws {
            let b = birkhoff_average(&sys, &f, w, &plan)?;
            let d = (b.value - ens.mean).abs();
            let allowed = b.error_indicator + ens.half_width;
            ok &= d <= allowed;
            worst = worst.max(d - allowed);
        }
        res.verdict(
            format!("{label}: Birkhoff agrees with ensemble mean"),
            ok,
            worst,
            0.0,
        );

        let mut g = rng::rng(rng::derive_seed(c.seed, Stream::Task, k as u64));
        let mut law: f64 = 0.0;
        for p in 0..lab.probes as u64 {
            let w = sys.sample_omega(rng::derive_seed(c.seed, Stream::Omega, p))?;
            let x: Vec<f64> = (0..dim).map(|_| g.random_range(-20.0..20.0)).collect();
            let y: Vec<f64> = (0..dim).map(|_| g.random_range(-20.0..20.0)).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let lhs = sys.evaluate(&f, &sys.shift(&w, &xy)?)?;
            let rhs = sys.evaluate(&f, &sys.shift(&sys.shift(&w, &y)?, &x)?)?;
            law = law.max((lhs - rhs).abs());
        }
        res.verdict(format!("{label}: group law"), law <= 1e-12, law, 1e-12);

        let m = lab.preservation_samples;
        let samples = sys.sample_many(rng::derive_seed(c.seed, Stream::Omega, k as u64), m)?;
        let shift: Vec<f64> = [3.7, -1.2, 0.45][..dim].to_vec();
        let base = samples
            .iter()
            .map(|w| sys.evaluate(&f, w))
            .collect::<Result<Vec<_>>>()?;
        let moved = samples
            .iter()
            .map(|w| sys.realize(&f, w, &shift))
            .collect::<Result<Vec<_>>>()?;
        let (e0, e1) = (
            McEstimate::from_samples(&base),
            McEstimate::from_samples(&moved),
        );
        let tol = 4.0 * e0.std.max(e1.std) / (m as f64).sqrt();
        let d = (e0.mean - e1.mean).abs();
        res.verdict(format!("{label}: measure preservation"), d <= tol, d, tol);
        res.tasks.push(TaskStatus {
            id: format!("system {label}"),
            state: TaskState::Ok,
            error: None,
        });
    }

    // Ergodicity defect of a two-frequency quasi-periodic realization in 1D.
    let sys = DynamicalSystem::quasi_periodic(1, None)?;
    let f = StationaryField::torus(Profile::cosine(0.0, 1.0, &[1.0]).with_term(
        1.0,
        &[0.0, 1.0],
        Wave::Cos,
        0.0,
    ));
    let w = sys.sample_omega(c.seed)?;
    let dplan = AveragingPlan::for_dim(1).with_radii(&lab.defect_radii);
    let defect = ergodicity_defect(|x| sys.realize_unchecked(&f, &w, x), 1, 2.0, &dplan, c.seed)?;
    let decreasing = defect.windows(2).all(|p| p[1].defect < p[0].defect);
    let worst = defect
        .windows(2)
        .map(|p| p[1].defect - p[0].defect)
        .fold(f64::NEG_INFINITY, f64::max);
    for p in &defect {
        res.summary
            .values
            .insert(format!("defect_r{}", p.radius), p.defect);
    }
    res.verdict(
        "quasi-periodic ergodicity defect strictly decreasing",
        decreasing,
        worst,
        0.0,
    );
    Ok(res)
}
