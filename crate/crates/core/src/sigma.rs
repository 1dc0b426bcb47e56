//! Numerical checks of stochastic Σ-convergence.
//!
//! A sequence `u_ε(x, ω)` is paired with separable test functions
//! `f(x, ω, y) = Σ φ(x)·ψ(ω)·g(y)` evaluated along the scales,
//! `∫_Q E[u_ε(x, ω) f(x, T(x/ε₁)ω, x/ε₂)] dx`, and compared with the limit pairing
//! `∫_Q E M_y[û₀(x, ω, ·) f(x, ω, ·)] dx`. Ensemble means use seeded Monte-Carlo
//! samples shared across ε; mean values in y use [`mean_value`].
//!
//! A finite battery of tests is a necessary, not a sufficient, check of
//! convergence; reports carry that caveat.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{DynamicalSystem, OmegaSample, StationaryField, SystemKind};
use crate::error::{Error, Result};
use crate::fem;
use crate::grid::{ElementQuadrature, Grid};
use crate::meanval::{mean_value, AveragingPlan};
use crate::profile::Profile;
use crate::solvers::{DiscreteField, MacroGrid, ScalePair};
use crate::stats::{pairwise_sum, McEstimate};

/// Product bump `amplitude · Π_a β((x_a − c_a)/r_a)` with `β(t) = exp(1 − 1/(1 − t²))` on |t| < 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

impl Bump {
    pub fn new(center: &[f64], radius: &[f64]) -> Self {
        Self {
            center: center.to_vec(),
            radius: radius.to_vec(),
            amplitude: 1.0,
        }
    }

    /// Bump centred in the unit box with radius `r` on every axis.
    pub fn centered(dim: usize, r: f64) -> Self {
        Self::new(&vec![0.5; dim], &vec![r; dim])
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = self.amplitude;
        for a in 0..self.center.len() {
            let t = (x[a] - self.center[a]) / self.radius[a];
            let s = 1.0 - t * t;
            if s <= 0.0 {
                return 0.0;
            }
            v *= (1.0 - 1.0 / s).exp();
        }
        v
    }

    fn validate(&self, domain: &MacroGrid) -> Result<()> {
        let dim = domain.dim();
        if self.center.len() != dim || self.radius.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: self.center.len().min(self.radius.len()),
            });
        }
        for a in 0..dim {
            let (c, r) = (self.center[a], self.radius[a]);
            let (lo, hi) = (domain.origin[a], domain.origin[a] + domain.lengths[a]);
            if !(r > 0.0) || c - r < lo || c + r > hi {
                return Err(Error::Parameter(format!(
                    "bump support [{}, {}] on axis {a} leaves the domain [{lo}, {hi}]",
                    c - r,
                    c + r
                )));
            }
        }
        Ok(())
    }
}

/// One separable term `coef · Π bump(x) · Π X(x) · Π ψ(ω) · Π Y(y)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Term {
    #[serde(default = "one")]
    pub coef: f64,
    #[serde(default)]
    pub bumps: Vec<Bump>,
    #[serde(default)]
    pub x: Vec<Profile>,
    #[serde(default)]
    pub psi: Vec<StationaryField>,
    #[serde(default)]
    pub y: Vec<Profile>,
}

impl Term {
    pub fn one() -> Self {
        Self {
            coef: 1.0,
            ..Default::default()
        }
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.coef *= c;
        self
    }

    pub fn bump(mut self, b: Bump) -> Self {
        self.bumps.push(b);
        self
    }

    pub fn of_x(mut self, p: Profile) -> Self {
        self.x.push(p);
        self
    }

    pub fn of_omega(mut self, f: StationaryField) -> Self {
        self.psi.push(f);
        self
    }

    pub fn of_y(mut self, p: Profile) -> Self {
        self.y.push(p);
        self
    }

    fn times(&self, other: &Term) -> Term {
        let cat = |a: &[Profile], b: &[Profile]| a.iter().chain(b).cloned().collect::<Vec<_>>();
        Term {
            coef: self.coef * other.coef,
            bumps: self.bumps.iter().chain(&other.bumps).cloned().collect(),
            x: cat(&self.x, &other.x),
            psi: self.psi.iter().chain(&other.psi).cloned().collect(),
            y: cat(&self.y, &other.y),
        }
    }

    #[inline]
    fn x_part(&self, x: &[f64]) -> f64 {
        let mut v = self.coef;
        for b in &self.bumps {
            v *= b.eval(x);
        }
        for p in &self.x {
            v *= p.eval(x);
        }
        v
    }

    #[inline]
    fn y_part(&self, y: &[f64]) -> f64 {
        self.y.iter().map(|p| p.eval(y)).product()
    }

    fn psi_at(&self, system: &DynamicalSystem, omega: &OmegaSample, z: &[f64]) -> f64 {
        self.psi
            .iter()
            .map(|f| system.realize_unchecked(f, omega, z))
            .product()
    }
}

/// Finite sum of separable terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Separable {
    pub terms: Vec<Term>,
}

impl Separable {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    pub fn term(t: Term) -> Self {
        Self { terms: vec![t] }
    }

    pub fn one() -> Self {
        Self::term(Term::one())
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn plus(mut self, other: Separable) -> Self {
        self.terms.extend(other.terms);
        self
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.terms.iter_mut().for_each(|t| t.coef *= c);
        self
    }

    pub fn times(&self, other: &Separable) -> Separable {
        Separable {
            terms: self
                .terms
                .iter()
                .flat_map(|a| other.terms.iter().map(move |b| a.times(b)))
                .collect(),
        }
    }

    fn has_psi(&self) -> bool {
        self.terms.iter().any(|t| !t.psi.is_empty())
    }

    fn check_fields(&self, system: &DynamicalSystem) -> Result<()> {
        let origin = vec![0.0; system.dim];
        let w = system.sample_omega(0)?;
        for t in &self.terms {
            for f in &t.psi {
                system.realize(f, &w, &origin)?;
                if system.field_bound(f).is_none() {
                    return Err(Error::Parameter("ω-factors must be bounded fields".into()));
                }
            }
        }
        Ok(())
    }

    /// f(x, T(x/ε₁)ω, x/ε₂).
    #[inline]
    pub fn along(
        &self,
        system: &DynamicalSystem,
        scales: &ScalePair,
        omega: &OmegaSample,
        x: &[f64],
    ) -> f64 {
        let dim = system.dim;
        let mut z = [0.0; 3];
        let mut y = [0.0; 3];
        for a in 0..dim {
            z[a] = x[a] / scales.eps1;
            y[a] = x[a] / scales.eps2;
        }
        self.terms
            .iter()
            .map(|t| {
                let xv = t.x_part(x);
                if xv == 0.0 {
                    return 0.0;
                }
                xv * t.psi_at(system, omega, &z[..dim]) * t.y_part(&y[..dim])
            })
            .sum()
    }

    /// f(x, ω, y) without scales.
    pub fn eval(&self, system: &DynamicalSystem, omega: &OmegaSample, x: &[f64], y: &[f64]) -> f64 {
        let origin = [0.0; 3];
        self.terms
            .iter()
            .map(|t| t.x_part(x) * t.psi_at(system, omega, &origin[..system.dim]) * t.y_part(y))
            .sum()
    }
}

/// Separable test function; every term must carry a bump supported inside Q.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub f: Separable,
}

impl TestFunction {
    pub fn new(f: Separable) -> Self {
        Self { f }
    }

    /// φ(x) = bump, no ω or y dependence.
    pub fn bump(b: Bump) -> Self {
        Self::new(Separable::term(Term::one().bump(b)))
    }

    pub fn validate(&self, domain: &MacroGrid, system: &DynamicalSystem) -> Result<()> {
        for t in &self.f.terms {
            if t.bumps.is_empty() {
                return Err(Error::Parameter(
                    "test term without compactly supported factor".into(),
                ));
            }
            for b in &t.bumps {
                b.validate(domain)?;
            }
            for p in t.x.iter().chain(&t.y) {
                if p.sup_bound().is_none() && !t.y.is_empty() && t.y.iter().any(|q| q == p) {
                    return Err(Error::Parameter(
                        "y-factors of tests must be bounded".into(),
                    ));
                }
            }
        }
        self.f.check_fields(system)
    }
}

/// Realization `x ↦ u_ε(x, ω)` at fixed scales and ω.
pub type Realization<'a> = Box<dyn Fn(&[f64]) -> f64 + Send + Sync + 'a>;

/// A family `u_ε(·, ω)` indexed by scales and samples.
pub trait Sequence: Sync {
    fn realize<'a>(&'a self, scales: &ScalePair, omega: &OmegaSample) -> Result<Realization<'a>>;
}

/// A separable function evaluated along the scales.
pub struct Along<'a> {
    pub f: &'a Separable,
    pub system: &'a DynamicalSystem,
}

impl Sequence for Along<'_> {
    fn realize<'a>(&'a self, scales: &ScalePair, omega: &OmegaSample) -> Result<Realization<'a>> {
        let (s, w) = (*scales, omega.clone());
        Ok(Box::new(move |x| self.f.along(self.system, &s, &w, x)))
    }
}

/// Closure-defined sequence `(scales, ω, x) ↦ u`.
pub struct FnSequence<F>(pub F);

impl<F> Sequence for FnSequence<F>
where
    F: Fn(&ScalePair, &OmegaSample, &[f64]) -> f64 + Sync,
{
    fn realize<'a>(&'a self, scales: &ScalePair, omega: &OmegaSample) -> Result<Realization<'a>> {
        let (s, w) = (*scales, omega.clone());
        Ok(Box::new(move |x| (self.0)(&s, &w, x)))
    }
}

/// Pointwise product of two sequences.
pub struct Product<'a>(pub &'a dyn Sequence, pub &'a dyn Sequence);

impl Sequence for Product<'_> {
    fn realize<'a>(&'a self, scales: &ScalePair, omega: &OmegaSample) -> Result<Realization<'a>> {
        let u = self.0.realize(scales, omega)?;
        let v = self.1.realize(scales, omega)?;
        Ok(Box::new(move |x| u(x) * v(x)))
    }
}

struct Abs<'a>(&'a dyn Sequence);

impl Sequence for Abs<'_> {
    fn realize<'a>(&'a self, scales: &ScalePair, omega: &OmegaSample) -> Result<Realization<'a>> {
        let u = self.0.realize(scales, omega)?;
        Ok(Box::new(move |x| u(x).abs()))
    }
}

/// Claimed limit `û₀(x, ω, y) = field(x) · separable(x, ω, y)`; a missing field is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limit {
    pub separable: Separable,
    #[serde(default)]
    pub field: Option<DiscreteField>,
}

impl Limit {
    pub fn separable(s: Separable) -> Self {
        Self {
            separable: s,
            field: None,
        }
    }

    /// ω- and y-independent limit given on a grid.
    pub fn field(f: DiscreteField) -> Self {
        Self {
            separable: Separable::one(),
            field: Some(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSettings {
    /// Q and the minimal pairing resolution; refined to h ≤ ε₂/8 per ε.
    pub domain: MacroGrid,
    pub samples: usize,
    pub seed: u64,
    /// Absolute gap tolerance; defaults to 2e-2 (deterministic systems) or 5e-2.
    pub tolerance: Option<f64>,
    /// Relative slack when checking that gaps do not increase.
    pub slack: f64,
    pub plan: AveragingPlan,
    /// Cells per axis for the ε-independent x-integrals of limits.
    pub limit_cells: usize,
    /// Gauss order of the pairing quadrature.
    pub order: usize,
}

impl SigmaSettings {
    pub fn unit(dim: usize) -> Self {
        Self {
            domain: MacroGrid::unit(dim, 8),
            samples: 8,
            seed: 0,
            tolerance: None,
            slack: 0.05,
            plan: AveragingPlan::for_dim(dim),
            limit_cells: if dim == 1 { 512 } else { 128 },
            order: 3,
        }
    }

    pub fn with_samples(mut self, s: usize) -> Self {
        self.samples = s;
        self
    }

    pub fn with_seed(mut self, s: u64) -> Self {
        self.seed = s;
        self
    }

    pub fn with_tolerance(mut self, t: f64) -> Self {
        self.tolerance = Some(t);
        self
    }

    pub fn tolerance_for(&self, system: &DynamicalSystem) -> f64 {
        self.tolerance.unwrap_or(match system.kind {
            SystemKind::PeriodicShift | SystemKind::QuasiPeriodicShift { .. } => 2e-2,
            _ => 5e-2,
        })
    }

    fn pairing_grid(&self, eps2: f64) -> Result<Grid> {
        let mut g = self.domain.clone();
        for a in 0..g.dim() {
            let need = (8.0 * g.lengths[a] / eps2 - 1e-9).ceil() as usize;
            g.cells[a] = g.cells[a].max(need).max(self.limit_cells);
        }
        let grid = g.grid()?;
        crate::solvers::check_resolution(&grid, eps2)?;
        Ok(grid)
    }

    fn limit_grid(&self) -> Result<Grid> {
        let mut g = self.domain.clone();
        for c in g.cells.iter_mut() {
            *c = (*c).max(self.limit_cells);
        }
        g.grid()
    }
}

/// Per ε and per test: Monte-Carlo pairing estimates, plus E∫u² per ε.
struct Sweep {
    pairings: Vec<Vec<McEstimate>>,
    norms_sq: Vec<McEstimate>,
}

fn sweep(
    u: &dyn Sequence,
    tests: &[&Separable],
    schedule: &[ScalePair],
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<Sweep> {
    if s.samples < 2 {
        return Err(Error::Statistics(s.samples));
    }
    let omegas = system.sample_many(s.seed, s.samples)?;
    let dim = system.dim;
    let quad = ElementQuadrature::gauss(dim, s.order)?;
    let nq = quad.len();
    let nt = tests.len();
    let tasks: Vec<(usize, usize)> = (0..schedule.len())
        .flat_map(|i| (0..omegas.len()).map(move |j| (i, j)))
        .collect();
    // Each task returns [∫u f_0, ..., ∫u f_{T−1}, ∫u²].
    let results = tasks
        .par_iter()
        .map(|&(i, j)| {
            let sc = &schedule[i];
            sc.validate()?;
            let grid = s.pairing_grid(sc.eps2)?;
            let w = &omegas[j];
            let real = u.realize(sc, w)?;
            let vol = grid.element_volume();
            let per_elem: Vec<Vec<f64>> = (0..grid.num_elements())
                .into_par_iter()
                .map(|e| {
                    let mut acc = vec![0.0; nt + 1];
                    for q in 0..nq {
                        let x = fem::qp_point(&grid, &quad, e, q);
                        let uv = real(&x[..dim]);
                        let wq = quad.weights[q] * vol;
                        for (k, t) in tests.iter().enumerate() {
                            acc[k] += wq * uv * t.along(system, sc, w, &x[..dim]);
                        }
                        acc[nt] += wq * uv * uv;
                    }
                    acc
                })
                .collect();
            let mut out = vec![0.0; nt + 1];
            let mut col = vec![0.0; per_elem.len()];
            for (k, o) in out.iter_mut().enumerate() {
                for (c, v) in col.iter_mut().zip(&per_elem) {
                    *c = v[k];
                }
                *o = pairwise_sum(&col);
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow(format!("pairing at eps2 = {}", sc.eps2)));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let ns = omegas.len();
    let mut pairings = Vec::with_capacity(schedule.len());
    let mut norms_sq = Vec::with_capacity(schedule.len());
    for i in 0..schedule.len() {
        let block = &results[i * ns..(i + 1) * ns];
        pairings.push(
            (0..nt)
                .map(|k| McEstimate::from_samples(&block.iter().map(|r| r[k]).collect::<Vec<_>>()))
                .collect(),
        );
        norms_sq.push(McEstimate::from_samples(
            &block.iter().map(|r| r[nt]).collect::<Vec<_>>(),
        ));
    }
    Ok(Sweep { pairings, norms_sq })
}

/// `∫_Q E[u_ε f(x, T(x/ε₁)ω, x/ε₂)] dx` with a two-standard-error half-width.
pub fn sigma_pairing(
    u: &dyn Sequence,
    test: &TestFunction,
    scales: &ScalePair,
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<McEstimate> {
    test.validate(&s.domain, system)?;
    Ok(sweep(u, &[&test.f], std::slice::from_ref(scales), system, s)?.pairings[0][0])
}

/// `∫_Q E M_y[field^power · f]` for a separable `f` (ω-expectation by Monte Carlo).
fn limit_integral(
    f: &Separable,
    field: Option<&DiscreteField>,
    power: i32,
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<McEstimate> {
    let dim = system.dim;
    let (grid, quad) = match field {
        Some(fl) if power > 0 => (fl.grid.clone(), ElementQuadrature::gauss(dim, 4)?),
        _ => (s.limit_grid()?, ElementQuadrature::gauss(dim, 4)?),
    };
    let nq = quad.len();
    let vol = grid.element_volume();
    // x-integrals per term.
    let xi: Vec<f64> = f
        .terms
        .par_iter()
        .map(|t| {
            let per: Vec<f64> = (0..grid.num_elements())
                .map(|e| {
                    let mut a = 0.0;
                    for q in 0..nq {
                        let x = fem::qp_point(&grid, &quad, e, q);
                        let mut v = t.x_part(&x[..dim]);
                        if let (Some(fl), true) = (field, power > 0) {
                            v *= fl.eval(0, &x[..dim]).powi(power);
                        }
                        a += quad.weights[q] * v;
                    }
                    a * vol
                })
                .collect();
            pairwise_sum(&per)
        })
        .collect();
    // Mean values in y per term.
    let my = f
        .terms
        .iter()
        .map(|t| {
            if t.y.is_empty() {
                Ok(1.0)
            } else {
                Ok(mean_value(|y| t.y_part(y), dim, &s.plan)?.value)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if !f.has_psi() {
        let v: f64 = xi.iter().zip(&my).map(|(a, b)| a * b).sum();
        return Ok(McEstimate::exact(v));
    }
    if s.samples < 2 {
        return Err(Error::Statistics(s.samples));
    }
    let origin = vec![0.0; dim];
    let omegas = system.sample_many(s.seed, s.samples)?;
    let vals: Vec<f64> = omegas
        .iter()
        .map(|w| {
            f.terms
                .iter()
                .zip(xi.iter().zip(&my))
                .map(|(t, (a, b))| a * b * t.psi_at(system, w, &origin))
                .sum()
        })
        .collect();
    Ok(McEstimate::from_samples(&vals))
}

/// `∫_Q E M_y[û₀ f] dx` with mean values from `s.plan`.
pub fn sigma_limit_pairing(
    limit: &Limit,
    test: &TestFunction,
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<McEstimate> {
    test.validate(&s.domain, system)?;
    limit.separable.check_fields(system)?;
    limit_integral(
        &limit.separable.times(&test.f),
        limit.field.as_ref(),
        1,
        system,
        s,
    )
}

/// ‖û₀‖_{L²(Q×Ω; B²)}.
pub fn limit_norm(
    limit: &Limit,
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<McEstimate> {
    let sq = limit_integral(
        &limit.separable.times(&limit.separable),
        limit.field.as_ref(),
        2,
        system,
        s,
    )?;
    Ok(sqrt_estimate(sq))
}

fn sqrt_estimate(e: McEstimate) -> McEstimate {
    let m = e.mean.max(0.0).sqrt();
    let hw = if m > 0.0 {
        e.half_width / (2.0 * m)
    } else {
        e.half_width.sqrt()
    };
    McEstimate {
        mean: m,
        std: if m > 0.0 {
            e.std / (2.0 * m)
        } else {
            e.std.sqrt()
        },
        half_width: hw,
        samples: e.samples,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Weak,
    Strong,
    LowerSemicontinuity,
    Product,
    Admissible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingRow {
    pub test: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub pairing: f64,
    pub limit: f64,
    pub gap: f64,
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub eps1: f64,
    pub eps2: f64,
    pub norm: f64,
    pub limit: f64,
    pub gap: f64,
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub scenario: String,
    pub check: CheckKind,
    pub eps2: Vec<f64>,
    pub tolerance: f64,
    pub slack: f64,
    pub pairings: Vec<PairingRow>,
    pub norms: Vec<NormRow>,
    pub verdicts: Vec<Verdict>,
    pub pass: bool,
    pub note: String,
}

const NOTE: &str = "finite test battery: passing is necessary, not sufficient, for convergence";

impl ConvergenceReport {
    fn new(
        scenario: &str,
        check: CheckKind,
        schedule: &[ScalePair],
        tolerance: f64,
        slack: f64,
    ) -> Self {
        Self {
            scenario: scenario.to_string(),
            check,
            eps2: schedule.iter().map(|s| s.eps2).collect(),
            tolerance,
            slack,
            pairings: Vec::new(),
            norms: Vec::new(),
            verdicts: Vec::new(),
            pass: true,
            note: NOTE.to_string(),
        }
    }

    fn verdict(&mut self, name: String, pass: bool, value: f64, tolerance: f64) {
        self.pass &= pass;
        self.verdicts.push(Verdict {
            name,
            pass,
            value,
            tolerance,
        });
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub const CSV_HEADER: &'static str = "scenario,test,eps,pairing,limit,gap,half_width,verdict";

    /// Rows of the convergence table; norm rows use the test label `norm`.
    pub fn csv_rows(&self) -> Vec<String> {
        let pass_of = |label: &str| {
            let mut it = self
                .verdicts
                .iter()
                .filter(|v| v.name.starts_with(label))
                .peekable();
            if it.peek().is_none() {
                self.pass
            } else {
                it.all(|v| v.pass)
            }
        };
        let word = |p: bool| if p { "pass" } else { "fail" };
        let mut rows: Vec<String> = self
            .pairings
            .iter()
            .map(|r| {
                format!(
                    "{},{},{:e},{:e},{:e},{:e},{:e},{}",
                    self.scenario,
                    r.test,
                    r.eps2,
                    r.pairing,
                    r.limit,
                    r.gap,
                    r.half_width,
                    word(pass_of(&format!("test {}:", r.test)))
                )
            })
            .collect();
        rows.extend(self.norms.iter().map(|r| {
            format!(
                "{},norm,{:e},{:e},{:e},{:e},{:e},{}",
                self.scenario,
                r.eps2,
                r.norm,
                r.limit,
                r.gap,
                r.half_width,
                word(pass_of("norm"))
            )
        }));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in self.csv_rows() {
            s.push_str(&r);
            s.push('\n');
        }
        s
    }
}

/// Gaps may not grow beyond the slack, unless already below a tenth of the tolerance.
fn non_increasing(gaps: &[f64], hws: &[f64], slack: f64, tol: f64) -> (bool, f64) {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for k in 0..gaps.len().saturating_sub(1) {
        let allowed = (gaps[k] * (1.0 + slack)).max(0.1 * tol) + hws[k] + hws[k + 1];
        worst = worst.max(gaps[k + 1] - gaps[k]);
        ok &= gaps[k + 1] <= allowed;
    }
    (ok, worst)
}

fn require_schedule(schedule: &[ScalePair], tests: usize, min_tests: usize) -> Result<()> {
    if schedule.len() < 3 {
        return Err(Error::Parameter(format!(
            "need at least 3 scales, got {}",
            schedule.len()
        )));
    }
    if tests < min_tests {
        return Err(Error::Parameter(format!(
            "need at least {min_tests} tests, got {tests}"
        )));
    }
    for s in schedule {
        s.validate()?;
    }
    if schedule.windows(2).any(|w| w[1].eps2 >= w[0].eps2) {
        return Err(Error::Parameter("scale schedule must decrease".into()));
    }
    Ok(())
}

fn weak_rows(
    report: &mut ConvergenceReport,
    u: &dyn Sequence,
    limit: &Limit,
    tests: &[TestFunction],
    schedule: &[ScalePair],
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<Sweep> {
    let tol = report.tolerance;
    let limits = tests
        .iter()
        .map(|t| sigma_limit_pairing(limit, t, system, s))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Separable> = tests.iter().map(|t| &t.f).collect();
    let sw = sweep(u, &refs, schedule, system, s)?;
    for (k, lim) in limits.iter().enumerate() {
        let mut gaps = Vec::new();
        let mut hws = Vec::new();
        for (i, sc) in schedule.iter().enumerate() {
            let p = sw.pairings[i][k];
            let gap = (p.mean - lim.mean).abs();
            let hw = p.half_width + lim.half_width;
            gaps.push(gap);
            hws.push(hw);
            report.pairings.push(PairingRow {
                test: k,
                eps1: sc.eps1,
                eps2: sc.eps2,
                pairing: p.mean,
                limit: lim.mean,
                gap,
                half_width: hw,
            });
        }
        let last = gaps.len() - 1;
        report.verdict(
            format!("test {k}: final gap"),
            gaps[last] <= tol + hws[last],
            gaps[last],
            tol + hws[last],
        );
        let (mono, worst) = non_increasing(&gaps, &hws, report.slack, tol);
        report.verdict(
            format!("test {k}: gaps non-increasing"),
            mono,
            worst,
            report.slack,
        );
    }
    Ok(sw)
}

/// Weak Σ-convergence of `u` towards `limit` on a battery of tests.
pub fn check_weak_sigma(
    scenario: &str,
    u: &dyn Sequence,
    limit: &Limit,
    tests: &[TestFunction],
    schedule: &[ScalePair],
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<ConvergenceReport> {
    require_schedule(schedule, tests.len(), 3)?;
    let mut r = ConvergenceReport::new(
        scenario,
        CheckKind::Weak,
        schedule,
        s.tolerance_for(system),
        s.slack,
    );
    weak_rows(&mut r, u, limit, tests, schedule, system, s)?;
    Ok(r)
}

fn norm_rows(
    report: &mut ConvergenceReport,
    schedule: &[ScalePair],
    sw: &Sweep,
    lim: &McEstimate,
) -> Vec<McEstimate> {
    let norms: Vec<McEstimate> = sw.norms_sq.iter().map(|e| sqrt_estimate(*e)).collect();
    for (sc, n) in schedule.iter().zip(&norms) {
        report.norms.push(NormRow {
            eps1: sc.eps1,
            eps2: sc.eps2,
            norm: n.mean,
            limit: lim.mean,
            gap: (n.mean - lim.mean).abs(),
            half_width: n.half_width + lim.half_width,
        });
    }
    norms
}

/// Weak convergence plus convergence of ‖u_ε‖_{L²(Q×Ω)} to ‖û₀‖.
pub fn check_strong_sigma(
    scenario: &str,
    u: &dyn Sequence,
    limit: &Limit,
    tests: &[TestFunction],
    schedule: &[ScalePair],
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<ConvergenceReport> {
    require_schedule(schedule, tests.len(), 1)?;
    let mut r = ConvergenceReport::new(
        scenario,
        CheckKind::Strong,
        schedule,
        s.tolerance_for(system),
        s.slack,
    );
    let sw = weak_rows(&mut r, u, limit, tests, schedule, system, s)?;
    let lim = limit_norm(limit, system, s)?;
    norm_rows(&mut r, schedule, &sw, &lim);
    let last = r.norms.last().unwrap().clone();
    let tol = r.tolerance;
    r.verdict(
        "norm: final gap".into(),
        last.gap <= tol + last.half_width,
        last.gap,
        tol + last.half_width,
    );
    Ok(r)
}

/// ‖û₀‖ ≤ min over the tail half of the schedule of ‖u_ε‖, within tolerance.
pub fn check_lower_semicontinuity(
    scenario: &str,
    u: &dyn Sequence,
    limit: &Limit,
    schedule: &[ScalePair],
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<ConvergenceReport> {
    require_schedule(schedule, 0, 0)?;
    let mut r = ConvergenceReport::new(
        scenario,
        CheckKind::LowerSemicontinuity,
        schedule,
        s.tolerance_for(system),
        s.slack,
    );
    let sw = sweep(u, &[], schedule, system, s)?;
    let lim = limit_norm(limit, system, s)?;
    let norms = norm_rows(&mut r, schedule, &sw, &lim);
    let tail = &norms[schedule.len() / 2..];
    let (liminf, hw) = tail
        .iter()
        .map(|n| (n.mean, n.half_width))
        .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
    let tol = r.tolerance;
    r.verdict(
        "norm: limit below liminf".into(),
        lim.mean <= liminf + tol + hw + lim.half_width,
        lim.mean - liminf,
        tol + hw + lim.half_width,
    );
    Ok(r)
}

/// Exponents p (weak factor) and q (strong factor) with 1/p + 1/q ≤ 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub p: f64,
    pub q: f64,
}

/// Weak limit of the product of a weakly and a strongly convergent sequence.
#[allow(clippy::too_many_arguments)]
pub fn check_product(
    scenario: &str,
    u: &dyn Sequence,
    v: &dyn Sequence,
    uv_limit: &Limit,
    exponents: Exponents,
    tests: &[TestFunction],
    schedule: &[ScalePair],
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<ConvergenceReport> {
    let Exponents { p, q } = exponents;
    if !(p >= 1.0 && q >= 1.0) || 1.0 / p + 1.0 / q > 1.0 + 1e-15 {
        return Err(Error::Parameter(format!(
            "exponents p = {p}, q = {q} violate 1/p + 1/q ≤ 1"
        )));
    }
    require_schedule(schedule, tests.len(), 1)?;
    let mut r = ConvergenceReport::new(
        scenario,
        CheckKind::Product,
        schedule,
        s.tolerance_for(system),
        s.slack,
    );
    let uv = Product(u, v);
    weak_rows(&mut r, &uv, uv_limit, tests, schedule, system, s)?;
    Ok(r)
}

/// ∫∫|u^ε| dx dμ → ∫∫ M_y(|û|) dx dμ for `u` evaluated along the scales.
pub fn check_admissible(
    scenario: &str,
    u: &Separable,
    schedule: &[ScalePair],
    system: &DynamicalSystem,
    s: &SigmaSettings,
) -> Result<ConvergenceReport> {
    require_schedule(schedule, 0, 0)?;
    u.check_fields(system)?;
    for t in &u.terms {
        if t.y.iter().chain(&t.x).any(|p| p.sup_bound().is_none()) && t.bumps.is_empty() {
            return Err(Error::Parameter(
                "admissibility check needs a bounded function".into(),
            ));
        }
    }
    let mut r = ConvergenceReport::new(
        scenario,
        CheckKind::Admissible,
        schedule,
        s.tolerance_for(system),
        s.slack,
    );
    let lim = abs_limit(u, system, s)?;
    let along = Along { f: u, system };
    let abs = Abs(&along);
    let one = Separable::one();
    let sw = sweep(&abs, &[&one], schedule, system, s)?;
    let mut gaps = Vec::new();
    let mut hws = Vec::new();
    for (i, sc) in schedule.iter().enumerate() {
        let e = sw.pairings[i][0];
        let gap = (e.mean - lim.mean).abs();
        let hw = e.half_width + lim.half_width;
        gaps.push(gap);
        hws.push(hw);
        r.pairings.push(PairingRow {
            test: 0,
            eps1: sc.eps1,
            eps2: sc.eps2,
            pairing: e.mean,
            limit: lim.mean,
            gap,
            half_width: hw,
        });
    }
    let tol = r.tolerance;
    let last = gaps.len() - 1;
    r.verdict(
        "test 0: final gap".into(),
        gaps[last] <= tol + hws[last],
        gaps[last],
        tol + hws[last],
    );
    let (mono, worst) = non_increasing(&gaps, &hws, r.slack, tol);
    r.verdict("test 0: gaps non-increasing".into(), mono, worst, r.slack);
    Ok(r)
}

/// ∫ E M_y|û(x, ω, ·)| dx.
fn abs_limit(u: &Separable, system: &DynamicalSystem, s: &SigmaSettings) -> Result<McEstimate> {
    let dim = system.dim;
    if let [t] = u.terms.as_slice() {
        // |c X ψ Y| factorizes.
        let mut xt = t.clone();
        xt.psi.clear();
        xt.y.clear();
        let grid = s.limit_grid()?;
        let quad = ElementQuadrature::gauss(dim, 4)?;
        let vals = fem::sample_scalar(&grid, &quad, |x| xt.x_part(&x[..dim]).abs())?;
        let ix = fem::integrate(&grid, &quad, &vals);
        let my = if t.y.is_empty() {
            1.0
        } else {
            mean_value(|y| t.y_part(y).abs(), dim, &s.plan)?.value
        };
        if t.psi.is_empty() {
            return Ok(McEstimate::exact(ix * my));
        }
        if s.samples < 2 {
            return Err(Error::Statistics(s.samples));
        }
        let origin = vec![0.0; dim];
        let omegas = system.sample_many(s.seed, s.samples)?;
        let v: Vec<f64> = omegas
            .iter()
            .map(|w| ix * my * t.psi_at(system, w, &origin).abs())
            .collect();
        return Ok(McEstimate::from_samples(&v));
    }
    if s.samples < 2 && u.has_psi() {
        return Err(Error::Statistics(s.samples));
    }
    let omegas = if u.has_psi() {
        system.sample_many(s.seed, s.samples)?
    } else {
        vec![system.sample_omega(s.seed)?]
    };
    let grid = s.domain.grid()?;
    let quad = ElementQuadrature::gauss(dim, 3)?;
    let nq = quad.len();
    let vals = omegas
        .iter()
        .map(|w| {
            let per = (0..grid.num_elements() * nq)
                .into_par_iter()
                .map(|p| {
                    let x = fem::qp_point(&grid, &quad, p / nq, p % nq);
                    Ok(mean_value(|y| u.eval(system, w, &x[..dim], y).abs(), dim, &s.plan)?.value)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(fem::integrate(&grid, &quad, &per))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(if vals.len() == 1 {
        McEstimate::exact(vals[0])
    } else {
        McEstimate::from_samples(&vals)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::ValueDistribution;

    fn sched() -> Vec<ScalePair> {
        [16.0, 32.0, 64.0]
            .iter()
            .map(|n| ScalePair::from_eps2(1.0 / n).unwrap())
            .collect()
    }

    fn phi() -> Bump {
        Bump::centered(1, 0.4)
    }

    fn int_phi() -> f64 {
        let g = MacroGrid::unit(1, 4096).grid().unwrap();
        let q = ElementQuadrature::gauss(1, 5).unwrap();
        let v = fem::sample_scalar(&g, &q, |x| phi().eval(&x[..1])).unwrap();
        fem::integrate(&g, &q, &v)
    }

    fn sin_y() -> Profile {
        Profile::sine(0.0, 1.0, &[1.0])
    }

    fn tests3() -> Vec<TestFunction> {
        vec![
            TestFunction::bump(phi()),
            TestFunction::new(Separable::term(Term::one().bump(phi()).of_y(sin_y()))),
            TestFunction::new(Separable::term(
                Term::one()
                    .bump(Bump::new(&[0.3], &[0.2]))
                    .of_x(Profile::cosine(0.0, 1.0, &[1.0])),
            )),
        ]
    }

    #[test]
    fn constant_sequence_pairs_exactly() {
        let sys = DynamicalSystem::periodic(1);
        let s = SigmaSettings::unit(1).with_samples(2);
        let one = Separable::one();
        let u = Along {
            f: &one,
            system: &sys,
        };
        let p = sigma_pairing(&u, &TestFunction::bump(phi()), &sched()[0], &sys, &s).unwrap();
        assert!((p.mean - int_phi()).abs() <= 1e-10);
        let r = check_weak_sigma(
            "const",
            &u,
            &Limit::separable(one.clone()),
            &tests3(),
            &sched(),
            &sys,
            &s,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(
            r.pairings.iter().all(|row| row.gap <= 1e-10),
            "{:?}",
            r.pairings
        );
    }

    #[test]
    fn oscillating_sine_pairs_with_half() {
        let sys = DynamicalSystem::periodic(1);
        let s = SigmaSettings::unit(1).with_samples(2);
        let seq = FnSequence(|sc: &ScalePair, _: &OmegaSample, x: &[f64]| {
            (2.0 * std::f64::consts::PI * x[0] / sc.eps2).sin()
        });
        let t = TestFunction::new(Separable::term(Term::one().bump(phi()).of_y(sin_y())));
        let p = sigma_pairing(
            &seq,
            &t,
            &ScalePair::from_eps2(1.0 / 64.0).unwrap(),
            &sys,
            &s,
        )
        .unwrap();
        assert!((p.mean - 0.5 * int_phi()).abs() <= 1e-2);
        let lim = sigma_limit_pairing(
            &Limit::separable(Separable::term(Term::one().of_y(sin_y()))),
            &t,
            &sys,
            &s,
        )
        .unwrap();
        assert!((lim.mean - 0.5 * int_phi()).abs() <= 1e-2);
    }

    #[test]
    fn strong_check_rejects_weak_only_sequence() {
        let sys = DynamicalSystem::periodic(1);
        let s = SigmaSettings::unit(1).with_samples(2);
        let seq = FnSequence(|sc: &ScalePair, _: &OmegaSample, x: &[f64]| {
            (2.0 * std::f64::consts::PI * x[0] / sc.eps2).sin()
        });
        let tests = vec![TestFunction::bump(phi())];
        let r = check_strong_sigma(
            "control",
            &seq,
            &Limit::separable(Separable::zero()),
            &tests,
            &sched(),
            &sys,
            &s,
        )
        .unwrap();
        assert!(!r.pass);
        let norm = r.norms.last().unwrap().norm;
        assert!((norm - 0.5f64.sqrt()).abs() <= 1e-2);
        // the genuine limit sin(2πy) passes
        let lim = Limit::separable(Separable::term(Term::one().of_y(sin_y())));
        let r = check_strong_sigma("sine", &seq, &lim, &tests, &sched(), &sys, &s).unwrap();
        assert!(r.pass, "{:?}", r.verdicts);
    }

    #[test]
    fn stochastic_field_pairing_gives_second_moment() {
        let sys =
            DynamicalSystem::checkerboard(1, 1.0, ValueDistribution::two_valued(1.0, 3.0)).unwrap();
        let s = SigmaSettings::unit(1).with_samples(32).with_seed(3);
        let psi = Separable::term(Term::one().of_omega(StationaryField::lattice()));
        let u = Along {
            f: &psi,
            system: &sys,
        };
        let t = TestFunction::new(Separable::term(
            Term::one().bump(phi()).of_omega(StationaryField::lattice()),
        ));
        let sc = ScalePair::new(1.0 / 64.0, 1.0 / 256.0).unwrap();
        let p = sigma_pairing(&u, &t, &sc, &sys, &s).unwrap();
        let target = int_phi() * 5.0;
        assert!(
            (p.mean - target).abs() <= 2.0 * p.half_width + 0.05,
            "{p:?} vs {target}"
        );
        let lim = sigma_limit_pairing(&Limit::separable(psi.clone()), &t, &sys, &s).unwrap();
        assert!((lim.mean - target).abs() <= lim.half_width + 1e-9);
    }

    #[test]
    fn zero_mean_factor_gives_zero_limit() {
        let sys = DynamicalSystem::checkerboard(1, 1.0, ValueDistribution::two_valued(-1.0, 1.0))
            .unwrap();
        let s = SigmaSettings::unit(1).with_samples(64);
        let t = TestFunction::new(Separable::term(
            Term::one().bump(phi()).of_omega(StationaryField::lattice()),
        ));
        let lim = sigma_limit_pairing(&Limit::separable(Separable::one()), &t, &sys, &s).unwrap();
        assert!(lim.mean.abs() <= lim.half_width + 1e-12);
    }

    #[test]
    fn product_of_sine_and_cosine() {
        let sys = DynamicalSystem::periodic(1);
        let s = SigmaSettings::unit(1).with_samples(2);
        let pi2 = 2.0 * std::f64::consts::PI;
        let u = FnSequence(move |sc: &ScalePair, _: &OmegaSample, x: &[f64]| {
            (pi2 * x[0] / sc.eps2).sin()
        });
        let v = FnSequence(move |sc: &ScalePair, _: &OmegaSample, x: &[f64]| {
            (pi2 * x[0] / sc.eps2).cos()
        });
        let tests = vec![TestFunction::bump(phi())];
        let e = Exponents { p: 2.0, q: 2.0 };
        let r = check_product(
            "sc",
            &u,
            &v,
            &Limit::separable(Separable::zero()),
            e,
            &tests,
            &sched(),
            &sys,
            &s,
        )
        .unwrap();
        assert!(r.pass);
        assert!(r.pairings.last().unwrap().gap <= 1e-2);
        let half = Limit::separable(Separable::one().scaled(0.5));
        let r = check_product("ss", &u, &u, &half, e, &tests, &sched(), &sys, &s).unwrap();
        assert!(r.pass, "{:?}", r.verdicts);
        let bad = Exponents { p: 1.5, q: 1.5 };
        assert!(check_product("x", &u, &v, &half, bad, &tests, &sched(), &sys, &s).is_err());
    }

    #[test]
    fn lower_semicontinuity_strict_for_oscillating_perturbation() {
        let sys = DynamicalSystem::periodic(1);
        let s = SigmaSettings::unit(1).with_samples(2);
        let u0 = Profile::sine(0.0, 1.0, &[0.5]);
        let u0c = u0.clone();
        let pi2 = 2.0 * std::f64::consts::PI;
        let seq = FnSequence(move |sc: &ScalePair, _: &OmegaSample, x: &[f64]| {
            u0c.eval(x) + (pi2 * x[0] / sc.eps2).sin()
        });
        let lim = Limit::separable(Separable::term(Term::one().of_x(u0)));
        let r = check_lower_semicontinuity("lsc", &seq, &lim, &sched(), &sys, &s).unwrap();
        assert!(r.pass);
        let n = r.norms.last().unwrap();
        // ‖u₀‖² = ½, oscillation adds ½|Q|
        assert!((n.limit - 0.5f64.sqrt()).abs() <= 1e-6);
        assert!((n.norm - 1.0).abs() <= 1e-2);
    }

    #[test]
    fn admissible_abs_sine() {
        let sys = DynamicalSystem::periodic(1);
        let s = SigmaSettings::unit(1).with_samples(2);
        let u = Separable::term(Term::one().bump(phi()).of_y(sin_y().absolute()));
        let r = check_admissible("abs", &u, &sched(), &sys, &s).unwrap();
        assert!(r.pass, "{:?}", r.verdicts);
        let lim = r.pairings[0].limit;
        assert!((lim - 2.0 / std::f64::consts::PI * int_phi()).abs() <= 1e-2);
    }

    #[test]
    fn pairing_is_bilinear() {
        let sys = DynamicalSystem::quasi_periodic(1, None).unwrap();
        let s = SigmaSettings::unit(1).with_samples(3);
        let a = Separable::term(Term::one().of_y(sin_y()));
        let b = Separable::term(
            Term::one()
                .of_x(Profile::cosine(1.0, 0.5, &[1.0]))
                .of_omega(StationaryField::torus(Profile::cosine(
                    0.0,
                    1.0,
                    &[1.0, 1.0],
                ))),
        );
        let ab = a.clone().scaled(0.3).plus(b.clone().scaled(-1.7));
        let t = TestFunction::new(Separable::term(
            Term::one()
                .bump(phi())
                .of_y(Profile::cosine(0.0, 1.0, &[2.0])),
        ));
        let sc = sched()[1];
        let pa = sigma_pairing(
            &Along {
                f: &a,
                system: &sys,
            },
            &t,
            &sc,
            &sys,
            &s,
        )
        .unwrap()
        .mean;
        let pb = sigma_pairing(
            &Along {
                f: &b,
                system: &sys,
            },
            &t,
            &sc,
            &sys,
            &s,
        )
        .unwrap()
        .mean;
        let pab = sigma_pairing(
            &Along {
                f: &ab,
                system: &sys,
            },
            &t,
            &sc,
            &sys,
            &s,
        )
        .unwrap()
        .mean;
        assert!((pab - (0.3 * pa - 1.7 * pb)).abs() <= 1e-12);
    }

    #[test]
    fn report_serializes() {
        let sys = DynamicalSystem::periodic(1);
        let s = SigmaSettings::unit(1).with_samples(2);
        let one = Separable::one();
        let u = Along {
            f: &one,
            system: &sys,
        };
        let r = check_weak_sigma(
            "c",
            &u,
            &Limit::separable(one.clone()),
            &tests3(),
            &sched(),
            &sys,
            &s,
        )
        .unwrap();
        let back: ConvergenceReport = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 9);
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",pass")));
        assert!(check_weak_sigma(
            "c",
            &u,
            &Limit::separable(one.clone()),
            &tests3()[..2],
            &sched(),
            &sys,
            &s
        )
        .is_err());
    }
}
