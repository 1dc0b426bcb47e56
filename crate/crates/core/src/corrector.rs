//! Cell problems and effective coefficients.
//!
//! For a tensor field a on a periodic cell Y the corrector χ_j solves
//! `∫_Y a(e_j + Dχ_j)·Dw = 0` for all periodic w, with zero mean, and the
//! effective tensor is `A e_j = M_Y[a(e_j + Dχ_j)]`. For symmetric data the
//! equivalent energy form `A_ij = M_Y[(e_i + Dχ_i)·a(e_j + Dχ_j)]` is used, which
//! is symmetric by construction.
//!
//! The ω-layer is approximated on a periodized box `[0, L]^N` (a representative
//! volume) and averaged over seeded samples. The reiterated composition first
//! homogenizes the y-layer for every distinct tuple of ω-field values met on the
//! box, then runs the ω-layer on the resulting intermediate tensor.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{DynamicalSystem, OmegaSample, OmegaState};
use crate::error::{Error, Result};
use crate::fem;
use crate::grid::{ElementQuadrature, Grid};
use crate::linalg::{pcg, CgOptions, CgOutcome, Tensor};
use crate::meanval::{mean_value_vec, AveragingPlan};
use crate::model::{CoefficientModel, NonlinearFlux, Structure};
use crate::rng;
use crate::stats::McEstimate;
use crate::stokes::{StokesSystem, UzawaOptions, Viscosity, Viscosity4};

/// Periodic cell `[0, length)^dim` with `n` elements per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    pub dim: usize,
    pub n: usize,
    #[serde(default = "unit")]
    pub length: f64,
    #[serde(default = "two")]
    pub order: usize,
}

fn unit() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

impl CellGrid {
    pub fn unit(dim: usize, n: usize) -> Self {
        Self {
            dim,
            n,
            length: 1.0,
            order: 2,
        }
    }

    /// Truncation box `[0, length)^dim` for the ω-layer.
    pub fn rve(dim: usize, n: usize, length: f64) -> Self {
        Self {
            dim,
            n,
            length,
            order: 2,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        if self.n < 4 {
            return Err(Error::Parameter(format!(
                "cell resolution {} below 4",
                self.n
            )));
        }
        Grid::periodic_cube(self.dim, self.n, self.length)
    }

    pub fn quadrature(&self) -> Result<ElementQuadrature> {
        ElementQuadrature::gauss(self.dim, self.order)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSolution {
    pub grid: Grid,
    /// Nodal corrector χ_j per direction, zero mean.
    pub correctors: Vec<Vec<f64>>,
    pub effective: Tensor,
    /// Sampled eigenvalue range of the coefficient.
    pub min_eig: f64,
    pub max_eig: f64,
    pub cg: Vec<CgOutcome>,
}

impl CellSolution {
    pub fn corrector(&self, j: usize) -> &[f64] {
        &self.correctors[j]
    }
}

fn cell_cg() -> CgOptions {
    CgOptions {
        tol: 1e-11,
        max_iter: 50_000,
        zero_mean: true,
    }
}

fn remove_mean(v: &mut [f64]) {
    let m = crate::stats::mean(v);
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves the periodic cell problem for a sampled coefficient.
pub fn solve_cell_sampled(
    grid: &Grid,
    quad: &ElementQuadrature,
    a: &[Tensor],
    lo: f64,
    hi: f64,
) -> Result<CellSolution> {
    let dim = grid.dim;
    let nq = quad.len();
    let n = grid.num_nodes();
    let constant = a.iter().all(|t| t == &a[0]);
    let symmetric = a
        .iter()
        .all(|t| t.asymmetry() <= 1e-14 * (1.0 + t.max_abs()));
    if constant {
        return Ok(CellSolution {
            grid: grid.clone(),
            correctors: vec![vec![0.0; n]; dim],
            effective: a[0],
            min_eig: lo,
            max_eig: hi,
            cg: vec![CgOutcome::default(); dim],
        });
    }
    let k = fem::assemble_stiffness(grid, quad, a);
    let mut correctors = Vec::with_capacity(dim);
    let mut cg = Vec::with_capacity(dim);
    for j in 0..dim {
        let g: Vec<[f64; 3]> = a
            .iter()
            .map(|t| {
                let mut e = [0.0; 3];
                e[j] = 1.0;
                let v = t.apply(&e);
                [-v[0], -v[1], -v[2]]
            })
            .collect();
        let rhs = fem::load_flux(grid, quad, &g);
        let mut x = vec![0.0; n];
        cg.push(pcg(&k, &rhs, &mut x, cell_cg())?);
        remove_mean(&mut x);
        correctors.push(x);
    }
    let grads: Vec<Vec<[f64; 3]>> = correctors
        .iter()
        .map(|c| fem::gradients(grid, quad, c))
        .collect();
    let mut eff = Tensor::zeros(dim);
    for i in 0..dim {
        for j in 0..dim {
            if symmetric && j < i {
                continue;
            }
            let vals: Vec<f64> = (0..a.len())
                .map(|p| {
                    let mut gj = grads[j][p];
                    gj[j] += 1.0;
                    let flux = a[p].apply(&gj);
                    if symmetric {
                        let mut gi = grads[i][p];
                        gi[i] += 1.0;
                        (0..dim).map(|d| gi[d] * flux[d]).sum()
                    } else {
                        flux[i]
                    }
                })
                .collect();
            let v = fem::average(grid, quad, &vals);
            eff.set(i, j, v);
            if symmetric {
                eff.set(j, i, v);
            }
        }
    }
    let _ = nq;
    Ok(CellSolution {
        grid: grid.clone(),
        correctors,
        effective: eff,
        min_eig: lo,
        max_eig: hi,
        cg,
    })
}

/// Cell problem for the coefficient `f` on `cell`.
pub fn solve_cell_with<F>(cell: &CellGrid, f: F) -> Result<CellSolution>
where
    F: Fn(&[f64; 3]) -> Tensor,
{
    let grid = cell.grid()?;
    let quad = cell.quadrature()?;
    let (a, lo, hi) = fem::sample_tensor(&grid, &quad, f)?;
    solve_cell_sampled(&grid, &quad, &a, lo, hi)
}

fn need_tensor(model: &CoefficientModel) -> Result<()> {
    if model.tensor.is_none() {
        return Err(Error::Parameter("model has no linear tensor".into()));
    }
    model.check_shapes()
}

/// Deterministic-layer correctors χ_j^y for every direction at frozen (x, ω).
pub fn solve_deterministic_cell(
    model: &CoefficientModel,
    x: &[f64],
    omega: &OmegaSample,
    cell: &CellGrid,
) -> Result<CellSolution> {
    need_tensor(model)?;
    if cell.length != 1.0 {
        return Err(Error::Parameter("the y-cell is the unit torus".into()));
    }
    let w = model.omega_values(omega, &vec![0.0; model.dim]);
    solve_cell_with(cell, |y| model.tensor_at(x, &w, &y[..model.dim]))
}

/// Sample seeds for the ω-layer.
pub fn omega_seeds(seed: u64, samples: usize) -> Vec<u64> {
    (0..samples as u64)
        .map(|i| rng::derive_seed(seed, rng::Stream::Omega, i))
        .collect()
}

/// ω sample whose lattice (if any) is aligned with the box origin.
fn rve_sample(system: &DynamicalSystem, seed: u64) -> Result<OmegaSample> {
    let mut w = system.sample_omega(seed)?;
    if let OmegaState::Lattice { offset, .. } = &mut w.state {
        offset.iter_mut().for_each(|o| *o = 0.0);
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticCellResult {
    /// Monte-Carlo mean of the per-sample effective tensors.
    pub effective: Tensor,
    /// 2σ/√S per entry.
    pub half_width: Tensor,
    pub per_sample: Vec<Tensor>,
    pub seeds: Vec<u64>,
    pub min_eig: f64,
    pub max_eig: f64,
    #[serde(skip)]
    pub correctors: Option<Vec<CellSolution>>,
}

fn check_box(system: &DynamicalSystem, cell: &CellGrid) -> Result<()> {
    let ell = system.correlation_length();
    let ratio = cell.length / ell;
    if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 * ratio {
        return Err(Error::Parameter(format!(
            "truncation size {} is not a positive multiple of the correlation length {ell}",
            cell.length
        )));
    }
    Ok(())
}

fn summarize_samples(
    dim: usize,
    seeds: Vec<u64>,
    sols: Vec<CellSolution>,
    keep: bool,
) -> StochasticCellResult {
    let per_sample: Vec<Tensor> = sols.iter().map(|s| s.effective).collect();
    let mut effective = Tensor::zeros(dim);
    let mut half = Tensor::zeros(dim);
    for i in 0..dim {
        for j in 0..dim {
            let v: Vec<f64> = per_sample.iter().map(|t| t.get(i, j)).collect();
            let e = McEstimate::from_samples(&v);
            effective.set(i, j, e.mean);
            half.set(i, j, e.half_width);
        }
    }
    let min_eig = sols.iter().map(|s| s.min_eig).fold(f64::INFINITY, f64::min);
    let max_eig = sols.iter().map(|s| s.max_eig).fold(0.0, f64::max);
    StochasticCellResult {
        effective,
        half_width: half,
        per_sample,
        seeds,
        min_eig,
        max_eig,
        correctors: if keep { Some(sols) } else { None },
    }
}

/// Representative-volume homogenization of the realizations y ↦ f(ω, y).
pub fn stochastic_effective_with<F>(
    system: &DynamicalSystem,
    cell: &CellGrid,
    samples: usize,
    seed: u64,
    keep_correctors: bool,
    f: F,
) -> Result<StochasticCellResult>
where
    F: Fn(&OmegaSample, &[f64; 3]) -> Tensor + Sync,
{
    if samples < 2 {
        return Err(Error::Statistics(samples));
    }
    check_box(system, cell)?;
    let seeds = omega_seeds(seed, samples);
    let sols = seeds
        .par_iter()
        .map(|&s| {
            let w = rve_sample(system, s)?;
            solve_cell_with(cell, |y| f(&w, y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_samples(system.dim, seeds, sols, keep_correctors))
}

/// ω-layer correctors χ_j^ω on the periodized box for a y-independent model.
pub fn solve_stochastic_cell(
    model: &CoefficientModel,
    x: &[f64],
    cell: &CellGrid,
    samples: usize,
    seed: u64,
    keep_correctors: bool,
) -> Result<StochasticCellResult> {
    need_tensor(model)?;
    if model.structure().y != Structure::Constant {
        return Err(Error::Parameter(
            "stochastic cell needs a y-independent tensor; use the reiterated composition".into(),
        ));
    }
    let zero = vec![0.0; model.dim];
    stochastic_effective_with(
        &model.system,
        cell,
        samples,
        seed,
        keep_correctors,
        |w, y| {
            let vals = model.omega_values(w, &y[..model.dim]);
            model.tensor_at(x, &vals, &zero)
        },
    )
}

/// Limit on distinct ω-value tuples homogenized in the first reiterated stage.
pub const MAX_STAGE_ONE_CELLS: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReiteratedResult {
    pub effective: Tensor,
    pub half_width: Tensor,
    /// Number of y-cell problems solved in the first stage.
    pub stage_one_cells: usize,
    /// Which stage was skipped because its layer is degenerate.
    pub skipped: Option<String>,
    pub min_eig: f64,
    pub max_eig: f64,
}

fn key(w: &[f64]) -> Vec<u64> {
    w.iter().map(|v| v.to_bits()).collect()
}

/// Two-stage homogenization: y-layer per frozen (x, ω), then the ω-layer.
pub fn compose_reiterated(
    model: &CoefficientModel,
    x: &[f64],
    y_cell: &CellGrid,
    omega_cell: &CellGrid,
    samples: usize,
    seed: u64,
) -> Result<ReiteratedResult> {
    need_tensor(model)?;
    let tags = model.structure();
    let dim = model.dim;
    if tags.y == Structure::Constant {
        let r = solve_stochastic_cell(model, x, omega_cell, samples, seed, false)?;
        return Ok(ReiteratedResult {
            effective: r.effective,
            half_width: r.half_width,
            stage_one_cells: 0,
            skipped: Some("y".into()),
            min_eig: r.min_eig,
            max_eig: r.max_eig,
        });
    }
    if tags.omega == Structure::Constant {
        let w = model.system.sample_omega(seed)?;
        let r = solve_deterministic_cell(model, x, &w, y_cell)?;
        return Ok(ReiteratedResult {
            effective: r.effective,
            half_width: Tensor::zeros(dim),
            stage_one_cells: 1,
            skipped: Some("omega".into()),
            min_eig: r.min_eig,
            max_eig: r.max_eig,
        });
    }
    if samples < 2 {
        return Err(Error::Statistics(samples));
    }
    check_box(&model.system, omega_cell)?;
    // Collect the ω-value tuples met at the box quadrature points.
    let grid = omega_cell.grid()?;
    let quad = omega_cell.quadrature()?;
    let seeds = omega_seeds(seed, samples);
    let omegas = seeds
        .iter()
        .map(|&s| rve_sample(&model.system, s))
        .collect::<Result<Vec<_>>>()?;
    let mut table: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
    for w in &omegas {
        for e in 0..grid.num_elements() {
            for q in 0..quad.len() {
                let p = fem::qp_point(&grid, &quad, e, q);
                let vals = model.omega_values(w, &p[..dim]);
                table.entry(key(&vals)).or_insert(vals);
                if table.len() > MAX_STAGE_ONE_CELLS {
                    return Err(Error::Unsupported(format!(
                        "reiterated composition meets more than {MAX_STAGE_ONE_CELLS} distinct ω-values; \
                         use a piecewise-constant ω-field"
                    )));
                }
            }
        }
    }
    let entries: Vec<(Vec<u64>, Vec<f64>)> = table.into_iter().collect();
    let stage1 = entries
        .par_iter()
        .map(|(k, vals)| {
            let s = solve_cell_with(y_cell, |y| model.tensor_at(x, vals, &y[..dim]))?;
            Ok((k.clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    let lo = stage1
        .iter()
        .map(|s| s.1.min_eig)
        .fold(f64::INFINITY, f64::min);
    let hi = stage1.iter().map(|s| s.1.max_eig).fold(0.0, f64::max);
    let lookup: BTreeMap<Vec<u64>, Tensor> =
        stage1.into_iter().map(|(k, s)| (k, s.effective)).collect();
    let sols = omegas
        .par_iter()
        .map(|w| {
            solve_cell_with(omega_cell, |y| {
                let vals = model.omega_values(w, &y[..dim]);
                lookup[&key(&vals)]
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let r = summarize_samples(dim, seeds, sols, false);
    Ok(ReiteratedResult {
        effective: r.effective,
        half_width: r.half_width,
        stage_one_cells: lookup.len(),
        skipped: None,
        min_eig: lo,
        max_eig: hi,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// y-layer only, at a fixed ω.
    Deterministic,
    /// ω-layer only.
    Stochastic,
    /// Both layers.
    Reiterated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSettings {
    pub y_cell: CellGrid,
    pub omega_cell: CellGrid,
    pub samples: usize,
    pub seed: u64,
}

/// Effective tensor, piecewise constant over the elements of a macro grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTensor {
    pub dim: usize,
    /// `None` for an x-independent tensor (single entry).
    pub grid: Option<Grid>,
    pub values: Vec<Tensor>,
    pub half_widths: Vec<Tensor>,
}

impl EffectiveTensor {
    pub fn uniform(value: Tensor, half_width: Tensor) -> Self {
        Self {
            dim: value.dim(),
            grid: None,
            values: vec![value],
            half_widths: vec![half_width],
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.grid.is_none()
    }

    pub fn element(&self, e: usize) -> &Tensor {
        if self.grid.is_none() {
            &self.values[0]
        } else {
            &self.values[e]
        }
    }

    /// Value at a macroscopic point (piecewise-constant lookup).
    pub fn at(&self, x: &[f64]) -> &Tensor {
        match &self.grid {
            None => &self.values[0],
            Some(g) => {
                let h = g.spacing();
                let mut m = [0usize; 3];
                for a in 0..g.dim {
                    let t = ((x[a] - g.origin[a]) / h[a]).floor() as i64;
                    m[a] = t.clamp(0, g.cells[a] as i64 - 1) as usize;
                }
                let mut e = 0;
                for a in 0..g.dim {
                    e = e * g.cells[a] + m[a];
                }
                &self.values[e]
            }
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.values
            .iter()
            .map(|t| t.asymmetry())
            .fold(0.0, f64::max)
    }

    /// Checks symmetry and that eigenvalues lie in [lo − tol, hi + tol].
    pub fn check_bounds(&self, lo: f64, hi: f64, symmetric: bool) -> Result<()> {
        for t in &self.values {
            if symmetric && t.asymmetry() > 1e-10 {
                return Err(Error::Invariant(format!(
                    "effective tensor asymmetry {:.3e}",
                    t.asymmetry()
                )));
            }
            let (mn, mx) = (t.min_sym_eig(), t.max_sym_eig());
            if mn < lo - 1e-8 || mx > hi + 1e-8 {
                return Err(Error::Invariant(format!(
                    "effective eigenvalues [{mn}, {mx}] outside sampled range [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

fn effective_at(
    model: &CoefficientModel,
    x: &[f64],
    regime: Regime,
    settings: &CellSettings,
    omega: Option<&OmegaSample>,
) -> Result<(Tensor, Tensor, f64, f64)> {
    match regime {
        Regime::Deterministic => {
            let w = match omega {
                Some(w) => w.clone(),
                None => model.system.sample_omega(settings.seed)?,
            };
            let s = solve_deterministic_cell(model, x, &w, &settings.y_cell)?;
            Ok((s.effective, Tensor::zeros(model.dim), s.min_eig, s.max_eig))
        }
        Regime::Stochastic => {
            let s = solve_stochastic_cell(
                model,
                x,
                &settings.omega_cell,
                settings.samples,
                settings.seed,
                false,
            )?;
            Ok((s.effective, s.half_width, s.min_eig, s.max_eig))
        }
        Regime::Reiterated => {
            let s = compose_reiterated(
                model,
                x,
                &settings.y_cell,
                &settings.omega_cell,
                settings.samples,
                settings.seed,
            )?;
            Ok((s.effective, s.half_width, s.min_eig, s.max_eig))
        }
    }
}

/// Effective tensor over a macro grid: one cell computation per element center,
/// or a single one when the model does not depend on x. Symmetry and spectral
/// bounds are checked before returning.
pub fn effective_tensor(
    model: &CoefficientModel,
    macro_grid: &Grid,
    regime: Regime,
    settings: &CellSettings,
    omega: Option<&OmegaSample>,
) -> Result<EffectiveTensor> {
    let dim = model.dim;
    let (et, lo, hi) = if model.structure().x == Structure::Constant {
        let x = macro_grid.element_center(0);
        let (t, hw, lo, hi) = effective_at(model, &x[..dim], regime, settings, omega)?;
        (EffectiveTensor::uniform(t, hw), lo, hi)
    } else {
        let res = (0..macro_grid.num_elements())
            .into_par_iter()
            .map(|e| {
                let x = macro_grid.element_center(e);
                effective_at(model, &x[..dim], regime, settings, omega)
            })
            .collect::<Result<Vec<_>>>()?;
        let lo = res.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
        let hi = res.iter().map(|r| r.3).fold(0.0, f64::max);
        (
            EffectiveTensor {
                dim,
                grid: Some(macro_grid.clone()),
                values: res.iter().map(|r| r.0).collect(),
                half_widths: res.iter().map(|r| r.1).collect(),
            },
            lo,
            hi,
        )
    };
    // Sampling bounds are only guaranteed for the deterministic layer; the
    // Monte-Carlo mean of bounded tensors stays in the same range.
    et.check_bounds(lo, hi, model.symmetric)?;
    Ok(et)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonotoneOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for MonotoneOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            damping: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCellSolution {
    pub corrector: Vec<f64>,
    /// M_Y[a(ξ + Dζ)].
    pub flux: [f64; 3],
    /// M_Y[b].
    pub mean_b: [f64; 3],
    pub iterations: usize,
    pub residual: f64,
    pub trace: Vec<f64>,
}

struct MonotoneCell<'a> {
    grid: &'a Grid,
    quad: &'a ElementQuadrature,
    flux: &'a NonlinearFlux,
    c: &'a [f64],
    b: &'a [[f64; 3]],
    xi: [f64; 3],
}

impl MonotoneCell<'_> {
    fn lambdas(&self, zeta: &[f64]) -> Vec<[f64; 3]> {
        let mut g = fem::gradients(self.grid, self.quad, zeta);
        for v in g.iter_mut() {
            for a in 0..self.grid.dim {
                v[a] += self.xi[a];
            }
        }
        g
    }

    fn residual(&self, zeta: &[f64]) -> Vec<f64> {
        let lam = self.lambdas(zeta);
        let g: Vec<[f64; 3]> = lam
            .iter()
            .zip(self.c)
            .zip(self.b)
            .map(|((l, c), b)| {
                let a = self.flux.eval(*c, l);
                [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
            })
            .collect();
        fem::load_flux(self.grid, self.quad, &g)
    }

    /// Σ_q w |g_q| Σ_d |∂_d φ_i|, a scale for nodal residuals.
    fn scale(&self) -> f64 {
        let grid = self.grid;
        let nq = self.quad.len();
        let vol = grid.element_volume();
        let grads: Vec<[[f64; 3]; 8]> = (0..nq)
            .map(|q| fem::basis_gradients(grid, self.quad, q))
            .collect();
        let mut s = vec![0.0; grid.num_nodes()];
        let mut lam = [0.0; 3];
        lam[..grid.dim].copy_from_slice(&self.xi[..grid.dim]);
        for e in 0..grid.num_elements() {
            let nodes = grid.element_nodes(e);
            for q in 0..nq {
                let p = e * nq + q;
                let a = self.flux.eval(self.c[p], &lam);
                let mag = a.iter().map(|v| v * v).sum::<f64>().sqrt()
                    + self.b[p].iter().map(|v| v * v).sum::<f64>().sqrt();
                for i in 0..grid.corners() {
                    let gs: f64 = (0..grid.dim).map(|d| grads[q][i][d].abs()).sum();
                    s[nodes[i]] += self.quad.weights[q] * vol * mag * gs;
                }
            }
        }
        let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            n
        } else {
            1.0
        }
    }

    /// Kačanov step: solve with frozen weights μ(ξ + Dζ).
    fn frozen_solve(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        let lam = self.lambdas(zeta);
        // Degenerate weights where ξ + Dζ = 0 when p ≠ 2: linear step if that holds
        // everywhere, otherwise a small floor.
        let top = lam.iter().fold(0.0f64, |m, l| m.max(norm(l)));
        let floor = [1e-8 * top, 0.0, 0.0];
        let mu: Vec<f64> = lam
            .iter()
            .zip(self.c)
            .map(|(l, c)| {
                let w = self.flux.weight(*c, l);
                if top == 0.0 {
                    *c
                } else if w.is_finite() && w > 0.0 {
                    w
                } else {
                    self.flux.weight(*c, &floor)
                }
            })
            .collect();
        let dim = self.grid.dim;
        let tens: Vec<Tensor> = mu.iter().map(|m| Tensor::scalar(dim, *m)).collect();
        let k = fem::assemble_stiffness(self.grid, self.quad, &tens);
        let g: Vec<[f64; 3]> = mu
            .iter()
            .zip(self.b)
            .map(|(m, b)| {
                [
                    b[0] - m * self.xi[0],
                    b[1] - m * self.xi[1],
                    b[2] - m * self.xi[2],
                ]
            })
            .collect();
        let rhs = fem::load_flux(self.grid, self.quad, &g);
        let mut x = zeta.to_vec();
        pcg(
            &k,
            &rhs,
            &mut x,
            CgOptions {
                tol: 1e-12,
                max_iter: 50_000,
                zero_mean: true,
            },
        )?;
        remove_mean(&mut x);
        Ok(x)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped fixed-point (Kačanov) solve of the monotone cell problem for sampled data.
/// For p = 2 a single linear solve is exact.
pub fn solve_monotone_cell_sampled(
    grid: &Grid,
    quad: &ElementQuadrature,
    flux: &NonlinearFlux,
    c: &[f64],
    b: &[[f64; 3]],
    xi: &[f64],
    init: Option<&[f64]>,
    opts: &MonotoneOptions,
) -> Result<MonotoneCellSolution> {
    let dim = grid.dim;
    let mut xi3 = [0.0; 3];
    xi3[..dim].copy_from_slice(&xi[..dim]);
    let cell = MonotoneCell {
        grid,
        quad,
        flux,
        c,
        b,
        xi: xi3,
    };
    let scale = cell.scale();
    let mut zeta = match init {
        Some(z) => {
            if z.len() != grid.num_nodes() {
                return Err(Error::Shape {
                    expected: grid.num_nodes(),
                    got: z.len(),
                });
            }
            let mut z = z.to_vec();
            remove_mean(&mut z);
            z
        }
        None => vec![0.0; grid.num_nodes()],
    };
    let mut res = norm(&cell.residual(&zeta)) / scale;
    let mut trace = vec![res];
    let mut it = 0;
    let linear = flux.exponent == 2.0;
    while res > opts.tol {
        if it >= opts.max_iter {
            return Err(Error::Solver {
                solver: "monotone cell fixed point",
                iterations: it,
                residual: res,
                trace,
            });
        }
        it += 1;
        let target = cell.frozen_solve(&zeta)?;
        if linear {
            zeta = target;
            res = norm(&cell.residual(&zeta)) / scale;
            trace.push(res);
            if res > opts.tol {
                return Err(Error::Solver {
                    solver: "monotone cell linear step",
                    iterations: it,
                    residual: res,
                    trace,
                });
            }
            break;
        }
        let mut theta = opts.damping;
        loop {
            let cand: Vec<f64> = zeta
                .iter()
                .zip(&target)
                .map(|(z, t)| z + theta * (t - z))
                .collect();
            let r = norm(&cell.residual(&cand)) / scale;
            if r < res || theta < 1e-6 {
                zeta = cand;
                res = r;
                break;
            }
            theta *= 0.5;
        }
        trace.push(res);
        if trace.len() > 20 {
            let old = trace[trace.len() - 21];
            if res > 0.99 * old {
                return Err(Error::Solver {
                    solver: "monotone cell fixed point (stagnation)",
                    iterations: it,
                    residual: res,
                    trace,
                });
            }
        }
    }
    let lam = cell.lambdas(&zeta);
    let mut flux_mean = [0.0; 3];
    let mut b_mean = [0.0; 3];
    for a in 0..dim {
        let fv: Vec<f64> = lam
            .iter()
            .zip(c)
            .map(|(l, cv)| flux.eval(*cv, l)[a])
            .collect();
        flux_mean[a] = fem::average(grid, quad, &fv);
        let bv: Vec<f64> = b.iter().map(|v| v[a]).collect();
        b_mean[a] = fem::average(grid, quad, &bv);
    }
    Ok(MonotoneCellSolution {
        corrector: zeta,
        flux: flux_mean,
        mean_b: b_mean,
        iterations: it,
        residual: res,
        trace,
    })
}

/// Sampled flux coefficient and right-hand side of the monotone cell at frozen (x, ω).
pub fn monotone_cell_data(
    model: &CoefficientModel,
    x: &[f64],
    omega: &OmegaSample,
    grid: &Grid,
    quad: &ElementQuadrature,
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let dim = model.dim;
    let w = model.omega_values(omega, &vec![0.0; dim]);
    let c = fem::sample_scalar(grid, quad, |y| model.flux_coefficient(x, &w, &y[..dim]))?;
    if let Some((i, v)) = c.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::Monotonicity(format!(
            "flux coefficient {v} at quadrature point {i}"
        )));
    }
    let nq = quad.len();
    let mut b = Vec::with_capacity(grid.num_elements() * nq);
    for e in 0..grid.num_elements() {
        for q in 0..nq {
            let y = fem::qp_point(grid, quad, e, q);
            let v = model.rhs_b_at(x, &w, &y[..dim]);
            if v.iter().any(|t| !t.is_finite()) {
                return Err(Error::Overflow(format!("b at {:?}", &y[..dim])));
            }
            b.push(v);
        }
    }
    Ok((c, b))
}

/// Corrector ζ(x, ω, ξ) of the monotone cell equation.
pub fn solve_monotone_cell(
    model: &CoefficientModel,
    x: &[f64],
    omega: &OmegaSample,
    xi: &[f64],
    cell: &CellGrid,
    init: Option<&[f64]>,
    opts: &MonotoneOptions,
) -> Result<MonotoneCellSolution> {
    model.check_shapes()?;
    let flux = model
        .flux
        .as_ref()
        .ok_or_else(|| Error::Parameter("model has no nonlinear flux".into()))?;
    if xi.len() != model.dim {
        return Err(Error::Shape {
            expected: model.dim,
            got: xi.len(),
        });
    }
    let grid = cell.grid()?;
    let quad = cell.quadrature()?;
    let (c, b) = monotone_cell_data(model, x, omega, &grid, &quad)?;
    solve_monotone_cell_sampled(&grid, &quad, flux, &c, &b, xi, init, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StokesCellResult {
    pub viscosity: Viscosity4,
    /// Scalar-cell effective tensor on the same grid.
    pub scalar_effective: Tensor,
    /// Velocity correctors per pair (k, j), index `k * N + j`, component-major.
    pub correctors: Vec<Vec<f64>>,
    /// Element pressures per pair.
    pub pressures: Vec<Vec<f64>>,
    pub max_divergence: f64,
    pub uzawa_iterations: Vec<usize>,
    /// Largest |C_{kj,ml} − δ_km A_jl|.
    pub projection_defect: f64,
    /// Per pair: element-mean divergence of the unconstrained scalar corrector
    /// placed in component k. Zero means the constraint is inactive.
    pub unconstrained_divergence: Vec<f64>,
}

/// Divergence-free cell correctors for the Stokes viscosity at frozen (x, ω).
pub fn solve_stokes_cell(
    model: &CoefficientModel,
    x: &[f64],
    omega: &OmegaSample,
    cell: &CellGrid,
    opts: &UzawaOptions,
) -> Result<StokesCellResult> {
    need_tensor(model)?;
    let dim = model.dim;
    if dim < 2 {
        return Err(Error::Parameter("Stokes cell needs N = 2 or 3".into()));
    }
    let grid = cell.grid()?;
    let quad = cell.quadrature()?;
    let w = model.omega_values(omega, &vec![0.0; dim]);
    let (a, lo, hi) = fem::sample_tensor(&grid, &quad, |y| model.tensor_at(x, &w, &y[..dim]))?;
    let scalar = solve_cell_sampled(&grid, &quad, &a, lo, hi)?;
    let n = grid.num_nodes();
    let nq = quad.len();
    let sys = StokesSystem::assemble(&grid, &quad, Viscosity::Componentwise(&a), None, opts)?;
    let mut correctors = Vec::with_capacity(dim * dim);
    let mut pressures = Vec::with_capacity(dim * dim);
    let mut iters = Vec::with_capacity(dim * dim);
    let mut free = Vec::with_capacity(dim * dim);
    let mut dmax: f64 = 0.0;
    for k in 0..dim {
        for j in 0..dim {
            // Load −∫ a e_j · Dv_k on component k.
            let g: Vec<[f64; 3]> = a
                .iter()
                .map(|t| {
                    let mut e = [0.0; 3];
                    e[j] = 1.0;
                    let v = t.apply(&e);
                    [-v[0], -v[1], -v[2]]
                })
                .collect();
            let lk = fem::load_flux(&grid, &quad, &g);
            let mut f = vec![0.0; dim * n];
            f[k * n..(k + 1) * n].copy_from_slice(&lk);
            let sol = sys.solve(&f, opts)?;
            dmax = dmax.max(sol.max_divergence);
            iters.push(sol.iterations);
            let mut unc = vec![0.0; dim * n];
            unc[k * n..(k + 1) * n].copy_from_slice(&scalar.correctors[j]);
            free.push(
                sys.divergence(&unc)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs())),
            );
            correctors.push(sol.velocity);
            pressures.push(sol.pressure);
        }
    }
    // Energy form C_{kj,ml} = M[Σ_i (δ_ik e_j + Dχ^{kj}_i)·a(δ_im e_l + Dχ^{ml}_i)].
    let grads: Vec<Vec<Vec<[f64; 3]>>> = correctors
        .iter()
        .map(|u| {
            (0..dim)
                .map(|i| fem::gradients(&grid, &quad, &u[i * n..(i + 1) * n]))
                .collect()
        })
        .collect();
    let mut visc = Viscosity4::zeros(dim);
    for k in 0..dim {
        for j in 0..dim {
            for m in 0..dim {
                for l in 0..dim {
                    let p1 = k * dim + j;
                    let p2 = m * dim + l;
                    if p2 < p1 {
                        continue;
                    }
                    let vals: Vec<f64> = (0..grid.num_elements() * nq)
                        .map(|p| {
                            let mut s = 0.0;
                            for i in 0..dim {
                                let mut g1 = grads[p1][i][p];
                                if i == k {
                                    g1[j] += 1.0;
                                }
                                let mut g2 = grads[p2][i][p];
                                if i == m {
                                    g2[l] += 1.0;
                                }
                                let ag = a[p].apply(&g2);
                                s += (0..dim).map(|d| g1[d] * ag[d]).sum::<f64>();
                            }
                            s
                        })
                        .collect();
                    let v = fem::average(&grid, &quad, &vals);
                    visc.c[k][j][m][l] = v;
                    visc.c[m][l][k][j] = v;
                }
            }
        }
    }
    let defect = visc.distance_to_componentwise(&scalar.effective);
    Ok(StokesCellResult {
        viscosity: visc,
        scalar_effective: scalar.effective,
        correctors,
        pressures,
        max_divergence: dmax,
        uzawa_iterations: iters,
        projection_defect: defect,
        unconstrained_divergence: free,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoriolisEstimate {
    /// h̃(ω) per sample.
    pub per_sample: Vec<[f64; 3]>,
    pub mean: [f64; 3],
    pub half_width: [f64; 3],
    /// Largest mean-value error indicator met.
    pub error_indicator: f64,
}

/// h̃(ω) = M_y[h(x, ω, ·)] for each sampled ω, with ensemble statistics.
pub fn effective_coriolis(
    model: &CoefficientModel,
    x: &[f64],
    plan: &AveragingPlan,
    samples: usize,
    seed: u64,
) -> Result<CoriolisEstimate> {
    model.check_shapes()?;
    if model.coriolis.is_none() {
        return Err(Error::Parameter("model has no Coriolis field".into()));
    }
    if samples < 1 {
        return Err(Error::Statistics(samples));
    }
    let dim = model.dim;
    let omegas = model.system.sample_many(seed, samples)?;
    let mut per = Vec::with_capacity(samples);
    let mut ind: f64 = 0.0;
    for w in &omegas {
        let vals = model.omega_values(w, &vec![0.0; dim]);
        let est = mean_value_vec(
            |y, out| {
                let h = model.coriolis_at(x, &vals, y);
                out.copy_from_slice(&h);
            },
            dim,
            3,
            plan,
        )?;
        let mut h = [0.0; 3];
        for k in 0..3 {
            h[k] = est[k].value;
            ind = ind.max(est[k].error_indicator);
        }
        per.push(h);
    }
    let mut mean = [0.0; 3];
    let mut half = [0.0; 3];
    for k in 0..3 {
        let v: Vec<f64> = per.iter().map(|h| h[k]).collect();
        if v.len() >= 2 {
            let e = McEstimate::from_samples(&v);
            mean[k] = e.mean;
            half[k] = e.half_width;
        } else {
            mean[k] = v[0];
        }
    }
    Ok(CoriolisEstimate {
        per_sample: per,
        mean,
        half_width: half,
        error_indicator: ind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{StationaryField, ValueDistribution};
    use crate::model::{ScalarCoef, TensorCoef};
    use crate::profile::Profile;

    fn osc1() -> CoefficientModel {
        CoefficientModel::linear(
            DynamicalSystem::periodic(1),
            TensorCoef::isotropic(ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0]))),
        )
    }

    #[test]
    fn constant_tensor_has_zero_corrector() {
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(2),
            TensorCoef::isotropic(ScalarCoef::constant(3.0)),
        );
        let w = m.system.sample_omega(0).unwrap();
        let s = solve_deterministic_cell(&m, &[0.0, 0.0], &w, &CellGrid::unit(2, 8)).unwrap();
        assert!(s.correctors.iter().flatten().all(|v| v.abs() <= 1e-12));
        assert!((s.effective.get(0, 0) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn harmonic_mean_in_one_dimension() {
        let m = osc1();
        let w = m.system.sample_omega(0).unwrap();
        let s = solve_deterministic_cell(&m, &[0.0], &w, &CellGrid::unit(1, 256)).unwrap();
        assert!((s.effective.get(0, 0) - 3f64.sqrt()).abs() <= 2e-3);
        assert!(crate::stats::mean(&s.correctors[0]).abs() <= 1e-12);
    }

    #[test]
    fn one_dimensional_cell_converges_at_second_order() {
        let m = osc1();
        let w = m.system.sample_omega(0).unwrap();
        let err = |n| {
            let s = solve_deterministic_cell(&m, &[0.0], &w, &CellGrid::unit(1, n)).unwrap();
            (s.effective.get(0, 0) - 3f64.sqrt()).abs()
        };
        let (e1, e2) = (err(16), err(32));
        let ratio = e1 / e2;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn laminate_effective_tensor() {
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(2),
            TensorCoef::isotropic(ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0, 0.0]))),
        );
        let w = m.system.sample_omega(0).unwrap();
        let s = solve_deterministic_cell(&m, &[0.0, 0.0], &w, &CellGrid::unit(2, 64)).unwrap();
        let e = s.effective;
        assert!((e.get(0, 0) / 3f64.sqrt() - 1.0).abs() <= 0.01);
        assert!((e.get(1, 1) / 2.0 - 1.0).abs() <= 0.01);
        assert!(e.get(0, 1).abs() <= 1e-10);
        assert!(e.asymmetry() <= 1e-10);
    }

    #[test]
    fn one_dimensional_random_field_gives_harmonic_mean() {
        let sys =
            DynamicalSystem::checkerboard(1, 1.0, ValueDistribution::two_valued(1.0, 3.0)).unwrap();
        let m =
            CoefficientModel::linear(sys, TensorCoef::isotropic(ScalarCoef::field_times(0, None)))
                .with_fields(vec![StationaryField::lattice()]);
        let r =
            solve_stochastic_cell(&m, &[0.0], &CellGrid::rve(1, 512, 256.0), 32, 9, false).unwrap();
        assert!(
            (r.effective.get(0, 0) / 1.5 - 1.0).abs() <= 0.02,
            "{:?}",
            r.effective
        );
    }

    #[test]
    fn deterministic_tensor_has_zero_half_width() {
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(1),
            TensorCoef::isotropic(ScalarCoef::constant(2.0)),
        );
        let r = solve_stochastic_cell(&m, &[0.0], &CellGrid::rve(1, 8, 1.0), 4, 1, false).unwrap();
        assert!(r.per_sample.iter().all(|t| t == &r.per_sample[0]));
        assert_eq!(r.half_width.get(0, 0), 0.0);
    }

    #[test]
    fn reiterated_nested_harmonic_means() {
        let sys =
            DynamicalSystem::checkerboard(1, 1.0, ValueDistribution::two_valued(1.0, 2.0)).unwrap();
        let m = CoefficientModel::linear(
            sys,
            TensorCoef::isotropic(ScalarCoef::field_times(
                0,
                Some(Profile::sine(2.0, 1.0, &[1.0])),
            )),
        )
        .with_fields(vec![StationaryField::lattice()]);
        let r = compose_reiterated(
            &m,
            &[0.0],
            &CellGrid::unit(1, 256),
            &CellGrid::rve(1, 256, 256.0),
            64,
            42,
        )
        .unwrap();
        let target = 4.0 / 3.0 * 3f64.sqrt();
        assert!((r.effective.get(0, 0) / target - 1.0).abs() <= 0.02);
        assert_eq!(r.stage_one_cells, 2);
    }

    #[test]
    fn monotone_linear_matches_elliptic() {
        let m = osc1().with_flux(NonlinearFlux {
            coefficient: ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0])),
            exponent: 2.0,
            regularization: 0.0,
        });
        let w = m.system.sample_omega(0).unwrap();
        let cell = CellGrid::unit(1, 256);
        let s = solve_monotone_cell(
            &m,
            &[0.0],
            &w,
            &[1.0],
            &cell,
            None,
            &MonotoneOptions::default(),
        )
        .unwrap();
        let lin = solve_deterministic_cell(&m, &[0.0], &w, &cell).unwrap();
        assert!((s.flux[0] - lin.effective.get(0, 0)).abs() <= 1e-6);
        assert!((s.flux[0] - 3f64.sqrt()).abs() <= 2e-3);
    }

    #[test]
    fn monotone_p3_constant_and_uniqueness() {
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(2),
            TensorCoef::isotropic(ScalarCoef::constant(1.0)),
        )
        .with_flux(NonlinearFlux {
            coefficient: ScalarCoef::constant(1.0),
            exponent: 3.0,
            regularization: 0.0,
        });
        let w = m.system.sample_omega(0).unwrap();
        let cell = CellGrid::unit(2, 8);
        let s = solve_monotone_cell(
            &m,
            &[0.0, 0.0],
            &w,
            &[1.0, 0.0],
            &cell,
            None,
            &MonotoneOptions::default(),
        )
        .unwrap();
        assert!(s.corrector.iter().all(|v| v.abs() <= 1e-10));
        assert!((s.flux[0] - 1.0).abs() <= 1e-12 && s.flux[1].abs() <= 1e-12);

        let v = CoefficientModel::linear(
            DynamicalSystem::periodic(1),
            TensorCoef::isotropic(ScalarCoef::constant(1.0)),
        )
        .with_flux(NonlinearFlux {
            coefficient: ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0])),
            exponent: 3.0,
            regularization: 0.0,
        });
        let cell = CellGrid::unit(1, 64);
        let w = v.system.sample_omega(0).unwrap();
        let opts = MonotoneOptions::default();
        let a = solve_monotone_cell(&v, &[0.0], &w, &[1.0], &cell, None, &opts).unwrap();
        let init: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = solve_monotone_cell(&v, &[0.0], &w, &[1.0], &cell, Some(&init), &opts).unwrap();
        let grid = cell.grid().unwrap();
        let quad = cell.quadrature().unwrap();
        let diff: Vec<f64> = a
            .corrector
            .iter()
            .zip(&b.corrector)
            .map(|(x, y)| x - y)
            .collect();
        let gd = fem::gradients(&grid, &quad, &diff);
        let pn: Vec<f64> = gd.iter().map(|g| g[0].abs().powi(3)).collect();
        assert!(fem::integrate(&grid, &quad, &pn).cbrt() <= 1e-6);
    }

    #[test]
    fn stokes_cell_for_laminate() {
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(2),
            TensorCoef::isotropic(ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0, 0.0]))),
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
        assert!(r.max_divergence <= 1e-10);
        let a = &r.scalar_effective;
        // pair (k=1, j=0): the scalar corrector in component 1 is already div-free
        assert!(r.unconstrained_divergence[2] <= 1e-10);
        assert!((r.viscosity.get(1, 0, 1, 0) - a.get(0, 0)).abs() <= 1e-6);
        // pair (0, 0) is constrained: arithmetic mean instead of harmonic
        assert!((r.viscosity.get(0, 0, 0, 0) - 2.0).abs() <= 1e-6);
        for u in &r.correctors {
            for k in 0..2 {
                let n = r.correctors[0].len() / 2;
                assert!(crate::stats::mean(&u[k * n..(k + 1) * n]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn coriolis_mean_of_sine_squared() {
        let c = 2.0;
        let h3 =
            Profile::constant(0.0).with_power_term(c, &[1.0, 0.0], crate::profile::Wave::Sin, 2);
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(2),
            TensorCoef::isotropic(ScalarCoef::constant(1.0)),
        )
        .with_coriolis(vec![
            ScalarCoef::constant(0.0),
            ScalarCoef::constant(0.0),
            ScalarCoef::of_y(h3),
        ]);
        let e = effective_coriolis(&m, &[0.0, 0.0], &AveragingPlan::for_dim(2), 2, 0).unwrap();
        assert!((e.mean[2] - c / 2.0).abs() <= 1e-3);
        assert!(e.mean[0].abs() <= 1e-12);
    }
}
