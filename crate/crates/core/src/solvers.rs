//! Fine-scale oscillatory boundary-value problems and their homogenized limits.
//!
//! Every problem lives on a box Q with homogeneous Dirichlet conditions. The
//! fine coefficients are evaluated at `a(x, T(x/ε₁)ω, x/ε₂)`; fine solves refuse
//! grids coarser than ε₂/8.
//!
//! Sources follow the convention `−div(a Du) = f − div g`, whose weak form is
//! `∫ a Du·Dv = ∫ f v + ∫ g·Dv`.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{
    monotone_cell_data, solve_monotone_cell_sampled, CellGrid, EffectiveTensor, MonotoneOptions,
};
use crate::dynsys::OmegaSample;
use crate::error::{Error, Result};
use crate::fem;
use crate::grid::{Boundary, ElementQuadrature, Grid};
use crate::linalg::{pcg, CgOptions, CgOutcome, CsrMatrix, SparseLu, Tensor};
use crate::model::{CoefficientModel, NonlinearFlux, Structure};
use crate::profile::Profile;
use crate::stokes::{rotation_energy, StokesSystem, UzawaOptions, Viscosity, Viscosity4};

/// Box `origin + [0, lengths]` with `cells` elements per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroGrid {
    pub origin: Vec<f64>,
    pub lengths: Vec<f64>,
    pub cells: Vec<usize>,
}

impl MacroGrid {
    pub fn unit(dim: usize, n: usize) -> Self {
        Self {
            origin: vec![0.0; dim],
            lengths: vec![1.0; dim],
            cells: vec![n; dim],
        }
    }

    /// Unit box with the coarsest resolution satisfying h ≤ ε₂/8.
    pub fn resolving(dim: usize, eps2: f64) -> Self {
        Self::resolving_with(dim, eps2, 8)
    }

    /// Unit box with at least `per_period` cells per ε₂ (clamped to 8 or more).
    pub fn resolving_with(dim: usize, eps2: f64, per_period: usize) -> Self {
        let n = (per_period.max(8) as f64 / eps2 - 1e-9).ceil() as usize;
        Self::unit(dim, n)
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(
            self.dim(),
            &self.cells,
            &self.origin,
            &self.lengths,
            Boundary::Dirichlet,
        )
    }
}

/// Microscopic scales ε₁ (ω-layer) and ε₂ (y-layer).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalePair {
    pub eps1: f64,
    pub eps2: f64,
}

impl ScalePair {
    pub fn new(eps1: f64, eps2: f64) -> Result<Self> {
        let s = Self { eps1, eps2 };
        s.validate()?;
        Ok(s)
    }

    /// ε₁ = √ε₂.
    pub fn from_eps2(eps2: f64) -> Result<Self> {
        Self::new(eps2.sqrt(), eps2)
    }

    pub fn validate(&self) -> Result<()> {
        let (e1, e2) = (self.eps1, self.eps2);
        if !(e2 > 0.0 && e2 < e1 && e1 < 1.0) {
            return Err(Error::Parameter(format!(
                "scales (eps1 = {e1}, eps2 = {e2}) must satisfy 0 < eps2 < eps1 < 1"
            )));
        }
        if e2 / e1 > 0.5 {
            return Err(Error::Parameter(format!(
                "scales (eps1 = {e1}, eps2 = {e2}) are not separated: eps2/eps1 = {} > 1/2",
                e2 / e1
            )));
        }
        Ok(())
    }
}

/// Refuses grids whose spacing exceeds ε₂/8.
pub fn check_resolution(grid: &Grid, eps2: f64) -> Result<()> {
    let h = grid.max_spacing();
    if h > eps2 / 8.0 * (1.0 + 1e-9) {
        return Err(Error::Resolution { spacing: h, eps2 });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Location {
    Node,
    Element,
}

/// Nodal or element field with one or more components, stored component-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteField {
    pub grid: Grid,
    pub location: Location,
    pub components: usize,
    pub values: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"HOMF";
const VERSION: u32 = 1;

impl DiscreteField {
    pub fn nodal(grid: Grid, components: usize, values: Vec<f64>) -> Result<Self> {
        Self::checked(grid, Location::Node, components, values)
    }

    pub fn element(grid: Grid, components: usize, values: Vec<f64>) -> Result<Self> {
        Self::checked(grid, Location::Element, components, values)
    }

    fn checked(
        grid: Grid,
        location: Location,
        components: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let per = match location {
            Location::Node => grid.num_nodes(),
            Location::Element => grid.num_elements(),
        };
        if components == 0 || values.len() != per * components {
            return Err(Error::Shape {
                expected: per * components.max(1),
                got: values.len(),
            });
        }
        Ok(Self {
            grid,
            location,
            components,
            values,
        })
    }

    pub fn points(&self) -> usize {
        self.values.len() / self.components
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let n = self.points();
        &self.values[k * n..(k + 1) * n]
    }

    /// Largest |value| on the Dirichlet boundary.
    pub fn boundary_max(&self) -> f64 {
        if self.location != Location::Node || self.grid.boundary != Boundary::Dirichlet {
            return 0.0;
        }
        let b = self.grid.boundary_nodes();
        (0..self.components)
            .flat_map(|k| b.iter().map(move |&i| (k, i)))
            .fold(0.0f64, |m, (k, i)| m.max(self.component(k)[i].abs()))
    }

    /// Value of component `k` at `x` (multilinear for nodal, piecewise constant for element fields).
    pub fn eval(&self, k: usize, x: &[f64]) -> f64 {
        match self.location {
            Location::Node => self.grid.interpolate(self.component(k), x),
            Location::Element => {
                let g = &self.grid;
                let h = g.spacing();
                let mut e = 0;
                for a in 0..g.dim {
                    let t = ((x[a] - g.origin[a]) / h[a]).floor() as i64;
                    e = e * g.cells[a] + t.clamp(0, g.cells[a] as i64 - 1) as usize;
                }
                self.component(k)[e]
            }
        }
    }

    /// L² norm over the grid (all components).
    pub fn l2_norm(&self) -> Result<f64> {
        let quad = ElementQuadrature::gauss(self.grid.dim, 2)?;
        Ok(self.sq_norm(&quad).sqrt())
    }

    fn sq_norm(&self, quad: &ElementQuadrature) -> f64 {
        (0..self.components)
            .map(|k| match self.location {
                Location::Node => fem::l2_norm(&self.grid, quad, self.component(k)).powi(2),
                Location::Element => {
                    self.component(k).iter().map(|v| v * v).sum::<f64>()
                        * self.grid.element_volume()
                }
            })
            .sum()
    }

    /// ‖self − other‖_{L²}, evaluating `other` at the quadrature points of `self`.
    pub fn l2_distance(&self, other: &DiscreteField) -> Result<f64> {
        if self.components != other.components {
            return Err(Error::Shape {
                expected: self.components,
                got: other.components,
            });
        }
        if self.location != Location::Node {
            return Err(Error::Unsupported(
                "L² distance from an element field".into(),
            ));
        }
        let quad = ElementQuadrature::gauss(self.grid.dim, 2)?;
        let same = self.grid == other.grid && other.location == Location::Node;
        let mut s = 0.0;
        for k in 0..self.components {
            let diff: Vec<f64> = if same {
                self.component(k)
                    .iter()
                    .zip(other.component(k))
                    .map(|(a, b)| a - b)
                    .collect()
            } else {
                Vec::new()
            };
            let vals = if same {
                fem::values(&self.grid, &quad, &diff)
            } else {
                let mine = fem::values(&self.grid, &quad, self.component(k));
                let nq = quad.len();
                mine.iter()
                    .enumerate()
                    .map(|(p, v)| {
                        let x = fem::qp_point(&self.grid, &quad, p / nq, p % nq);
                        v - other.eval(k, &x[..self.grid.dim])
                    })
                    .collect()
            };
            let sq: Vec<f64> = vals.iter().map(|v| v * v).collect();
            s += fem::integrate(&self.grid, &quad, &sq);
        }
        Ok(s.sqrt())
    }

    /// ‖self − u‖_{L²} against a closed-form function of x (one value per component).
    pub fn l2_error<F>(&self, u: F) -> Result<f64>
    where
        F: Fn(&[f64], usize) -> f64,
    {
        let quad = ElementQuadrature::gauss(self.grid.dim, 3)?;
        let nq = quad.len();
        let mut s = 0.0;
        for k in 0..self.components {
            let vals = fem::values(&self.grid, &quad, self.component(k));
            let sq: Vec<f64> = vals
                .iter()
                .enumerate()
                .map(|(p, v)| {
                    let x = fem::qp_point(&self.grid, &quad, p / nq, p % nq);
                    (v - u(&x[..self.grid.dim], k)).powi(2)
                })
                .collect();
            s += fem::integrate(&self.grid, &quad, &sq);
        }
        Ok(s.sqrt())
    }

    /// Flat binary layout, little endian:
    /// `"HOMF"`, u32 version, u32 dim, u32 location (0 node, 1 element),
    /// u32 components, u32 boundary (0 periodic, 1 Dirichlet), 3×u64 cells,
    /// 3×f64 origin, 3×f64 lengths, u64 value count, then the f64 values
    /// component-major, each component row-major with axis 0 slowest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(96 + 8 * self.values.len());
        b.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.grid.dim as u32,
            match self.location {
                Location::Node => 0,
                Location::Element => 1,
            },
            self.components as u32,
            match self.grid.boundary {
                Boundary::Periodic => 0,
                Boundary::Dirichlet => 1,
            },
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for c in self.grid.cells {
            b.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for v in self.grid.origin.iter().chain(&self.grid.lengths) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Format("truncated field file".into()));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut u32s = [0u32; 5];
        for v in u32s.iter_mut() {
            *v = u32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let [version, dim, loc, components, boundary] = u32s;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut cells = [0usize; 3];
        for c in cells.iter_mut() {
            *c = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        }
        let mut geo = [0.0f64; 6];
        for g in geo.iter_mut() {
            *g = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let payload = take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Format("value count overflow".into()))?,
        )?;
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        let dim = dim as usize;
        if !(1..=3).contains(&dim) {
            return Err(Error::Format(format!("dimension {dim}")));
        }
        let boundary = match boundary {
            0 => Boundary::Periodic,
            1 => Boundary::Dirichlet,
            b => return Err(Error::Format(format!("boundary tag {b}"))),
        };
        let location = match loc {
            0 => Location::Node,
            1 => Location::Element,
            l => return Err(Error::Format(format!("location tag {l}"))),
        };
        let grid = Grid::new(dim, &cells[..dim], &geo[..dim], &geo[3..3 + dim], boundary)
            .map_err(|e| Error::Format(e.to_string()))?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::checked(grid, location, components as usize, values)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// CSV table of coordinates and values, one row per node or element center.
    /// Only 1D and 2D fields.
    pub fn to_csv(&self) -> Result<String> {
        let dim = self.grid.dim;
        if dim > 2 {
            return Err(Error::Unsupported(
                "CSV export is limited to 1D and 2D fields".into(),
            ));
        }
        let mut s = String::new();
        let axes = ["x", "y"];
        let mut head: Vec<String> = axes[..dim].iter().map(|a| a.to_string()).collect();
        head.extend((0..self.components).map(|k| format!("v{k}")));
        s.push_str(&head.join(","));
        s.push('\n');
        for i in 0..self.points() {
            let x = match self.location {
                Location::Node => self.grid.node_coords(i),
                Location::Element => self.grid.element_center(i),
            };
            let mut row: Vec<String> = x[..dim].iter().map(|v| format!("{v:e}")).collect();
            row.extend((0..self.components).map(|k| format!("{:e}", self.component(k)[i])));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Right-hand side `f − div g` with x-profiles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Source {
    #[serde(default)]
    pub density: Option<Profile>,
    #[serde(default)]
    pub flux: Option<Vec<Profile>>,
}

impl Source {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::density(Profile::constant(c))
    }

    pub fn density(p: Profile) -> Self {
        Self {
            density: Some(p),
            flux: None,
        }
    }

    pub fn with_flux(mut self, g: Vec<Profile>) -> Self {
        self.flux = Some(g);
        self
    }

    fn check(&self, dim: usize) -> Result<()> {
        if let Some(g) = &self.flux {
            if g.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: g.len(),
                });
            }
        }
        Ok(())
    }

    /// Load vector, ‖f‖_{L²}, ‖g‖_{L²}, and whether f ≥ 0 with no flux part.
    fn load(&self, grid: &Grid, quad: &ElementQuadrature) -> Result<(Vec<f64>, f64, f64, bool)> {
        self.check(grid.dim)?;
        let mut rhs = vec![0.0; grid.num_nodes()];
        let (mut fn2, mut gn2, mut nonneg) = (0.0, 0.0, self.flux.is_none());
        if let Some(p) = &self.density {
            let f = fem::sample_scalar(grid, quad, |x| p.eval(&x[..grid.dim]))?;
            nonneg &= f.iter().all(|v| *v >= 0.0);
            rhs = fem::load_source(grid, quad, &f);
            let sq: Vec<f64> = f.iter().map(|v| v * v).collect();
            fn2 = fem::integrate(grid, quad, &sq);
        }
        if let Some(g) = &self.flux {
            let nq = quad.len();
            let mut gv = Vec::with_capacity(grid.num_elements() * nq);
            for e in 0..grid.num_elements() {
                for q in 0..nq {
                    let x = fem::qp_point(grid, quad, e, q);
                    let mut v = [0.0; 3];
                    for (a, p) in g.iter().enumerate() {
                        v[a] = p.eval(&x[..grid.dim]);
                    }
                    if v.iter().any(|t| !t.is_finite()) {
                        return Err(Error::Overflow(format!(
                            "source flux at {:?}",
                            &x[..grid.dim]
                        )));
                    }
                    gv.push(v);
                }
            }
            let lg = fem::load_flux(grid, quad, &gv);
            rhs.iter_mut().zip(&lg).for_each(|(r, l)| *r += l);
            let sq: Vec<f64> = gv.iter().map(|v| v.iter().map(|t| t * t).sum()).collect();
            gn2 = fem::integrate(grid, quad, &sq);
        }
        Ok((rhs, fn2.sqrt(), gn2.sqrt(), nonneg))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticSolution {
    pub field: DiscreteField,
    pub cg: CgOutcome,
    /// ‖Du‖_{L²}.
    pub energy: f64,
    /// (C_P‖f‖ + ‖g‖)/α.
    pub energy_bound: f64,
    pub min_value: f64,
    /// Whether f ≥ 0 (so that min_value ≥ 0 is expected).
    pub nonnegative_source: bool,
}

fn dirichlet_cg() -> CgOptions {
    CgOptions {
        tol: 1e-10,
        max_iter: 100_000,
        zero_mean: false,
    }
}

/// Solves `K u = rhs` with Dirichlet rows pinned. CG for symmetric samples, LU otherwise.
fn solve_dirichlet(
    grid: &Grid,
    mut k: CsrMatrix,
    mut rhs: Vec<f64>,
    symmetric: bool,
) -> Result<(Vec<f64>, CgOutcome)> {
    fem::apply_dirichlet(grid, &mut k, &mut rhs);
    let n = grid.num_nodes();
    // 1D systems are tridiagonal: a direct solve is cheap and exact.
    if symmetric && grid.dim > 1 {
        let mut x = vec![0.0; n];
        let out = pcg(&k, &rhs, &mut x, dirichlet_cg())?;
        Ok((x, out))
    } else {
        let trip: Vec<(usize, usize, f64)> = k.triplets().collect();
        let x = SparseLu::factor(n, &trip)?.solve(&rhs);
        let mut r = vec![0.0; n];
        k.matvec(&x, &mut r);
        let num: f64 = r
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok((
            x,
            CgOutcome {
                iterations: 0,
                relative_residual: if den > 0.0 { num / den } else { num },
            },
        ))
    }
}

fn elliptic_from_samples(
    grid: &Grid,
    quad: &ElementQuadrature,
    a: &[Tensor],
    alpha: f64,
    source: &Source,
    direct: bool,
) -> Result<EllipticSolution> {
    let (rhs, fnorm, gnorm, nonneg) = source.load(grid, quad)?;
    let symmetric = a
        .iter()
        .all(|t| t.asymmetry() <= 1e-14 * (1.0 + t.max_abs()));
    let k = fem::assemble_stiffness(grid, quad, a);
    let (u, cg) = solve_dirichlet(grid, k, rhs, symmetric && !direct)?;
    if cg.relative_residual > 1e-10 {
        return Err(Error::Solver {
            solver: "Dirichlet elliptic solve",
            iterations: cg.iterations,
            residual: cg.relative_residual,
            trace: vec![cg.relative_residual],
        });
    }
    let energy = fem::h1_seminorm(grid, quad, &u);
    let bound = (fem::poincare_constant(grid) * fnorm + gnorm) / alpha;
    if energy > bound * (1.0 + 1e-6) + 1e-12 {
        return Err(Error::Invariant(format!(
            "energy {energy:.6e} exceeds a-priori bound {bound:.6e}"
        )));
    }
    let min_value = u.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(EllipticSolution {
        field: DiscreteField::nodal(grid.clone(), 1, u)?,
        cg,
        energy,
        energy_bound: bound,
        min_value,
        nonnegative_source: nonneg,
    })
}

/// Values of the ω-fields at x/ε₁ and the fast variable x/ε₂.
fn fast_args(
    model: &CoefficientModel,
    scales: &ScalePair,
    omega: &OmegaSample,
    x: &[f64; 3],
) -> (Vec<f64>, [f64; 3]) {
    let dim = model.dim;
    let mut z = [0.0; 3];
    let mut y = [0.0; 3];
    for a in 0..dim {
        z[a] = x[a] / scales.eps1;
        y[a] = x[a] / scales.eps2;
    }
    (model.omega_values(omega, &z[..dim]), y)
}

fn check_model_grid(model: &CoefficientModel, grid: &Grid) -> Result<()> {
    model.check_shapes()?;
    if grid.dim != model.dim {
        return Err(Error::Shape {
            expected: model.dim,
            got: grid.dim,
        });
    }
    Ok(())
}

/// Q1 solution of `−div(a(x, T(x/ε₁)ω, x/ε₂) Du) = f − div g`, u = 0 on ∂Q.
pub fn solve_fine_elliptic(
    model: &CoefficientModel,
    scales: &ScalePair,
    omega: &OmegaSample,
    source: &Source,
    grid: &MacroGrid,
) -> Result<EllipticSolution> {
    scales.validate()?;
    if model.tensor.is_none() {
        return Err(Error::Parameter("model has no linear tensor".into()));
    }
    let grid = grid.grid()?;
    check_model_grid(model, &grid)?;
    check_resolution(&grid, scales.eps2)?;
    let quad = ElementQuadrature::gauss(grid.dim, 2)?;
    let dim = model.dim;
    let (a, lo, _) = fem::sample_tensor(&grid, &quad, |x| {
        let (w, y) = fast_args(model, scales, omega, x);
        model.tensor_at(&x[..dim], &w, &y[..dim])
    })?;
    elliptic_from_samples(&grid, &quad, &a, lo, source, false)
}

/// Q1 solution of `−div(A_eff Du₀) = f − div g`, u₀ = 0 on ∂Q.
pub fn solve_homogenized_elliptic(
    a_eff: &EffectiveTensor,
    source: &Source,
    grid: &MacroGrid,
) -> Result<EllipticSolution> {
    let grid = grid.grid()?;
    if grid.dim != a_eff.dim {
        return Err(Error::Shape {
            expected: a_eff.dim,
            got: grid.dim,
        });
    }
    let quad = ElementQuadrature::gauss(grid.dim, 2)?;
    let (a, lo, _) = fem::sample_tensor(&grid, &quad, |x| *a_eff.at(&x[..grid.dim]))?;
    elliptic_from_samples(&grid, &quad, &a, lo, source, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneSolution {
    pub field: DiscreteField,
    pub iterations: usize,
    pub residual: f64,
    pub trace: Vec<f64>,
    /// ‖Du‖_{L^p}.
    pub gradient_norm: f64,
    /// (‖b‖_{L^{p'}}/c₀)^{1/(p−1)}; `None` when p < 2.
    pub bound: Option<f64>,
}

/// ‖Σ_q w·mag_q·Σ_d|∂_d φ_i|‖₂: a scale for nodal residuals.
fn abs_scale(grid: &Grid, quad: &ElementQuadrature, mag: &[f64]) -> f64 {
    let nq = quad.len();
    let vol = grid.element_volume();
    let grads: Vec<[[f64; 3]; 8]> = (0..nq)
        .map(|q| fem::basis_gradients(grid, quad, q))
        .collect();
    let mut s = vec![0.0; grid.num_nodes()];
    for e in 0..grid.num_elements() {
        let nodes = grid.element_nodes(e);
        for q in 0..nq {
            let m = mag[e * nq + q] * quad.weights[q] * vol;
            for i in 0..grid.corners() {
                let gs: f64 = (0..grid.dim).map(|d| grads[q][i][d].abs()).sum();
                s[nodes[i]] += m * gs;
            }
        }
    }
    s.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn vnorm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn zero_boundary(grid: &Grid, r: &mut [f64]) {
    for i in grid.boundary_nodes() {
        r[i] = 0.0;
    }
}

/// Damped Kačanov iteration for `∫ a(c, Du)·Dv = ∫ b·Dv` on a Dirichlet grid.
fn kacanov_dirichlet(
    grid: &Grid,
    quad: &ElementQuadrature,
    flux: &NonlinearFlux,
    c: &[f64],
    b: &[[f64; 3]],
    opts: &MonotoneOptions,
) -> Result<(Vec<f64>, usize, f64, Vec<f64>)> {
    let dim = grid.dim;
    let residual = |u: &[f64]| -> f64 {
        let g = fem::gradients(grid, quad, u);
        let mut mag = Vec::with_capacity(g.len());
        let fl: Vec<[f64; 3]> = g
            .iter()
            .zip(c)
            .zip(b)
            .map(|((l, cv), bv)| {
                let a = flux.eval(*cv, l);
                mag.push(vnorm(&a) + vnorm(bv));
                [a[0] - bv[0], a[1] - bv[1], a[2] - bv[2]]
            })
            .collect();
        let mut r = fem::load_flux(grid, quad, &fl);
        zero_boundary(grid, &mut r);
        let s = abs_scale(grid, quad, &mag);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if s > 0.0 {
            n / s
        } else {
            n
        }
    };
    let weighted = |mu: Vec<f64>| -> Result<Vec<f64>> {
        let tens: Vec<Tensor> = mu.into_iter().map(|m| Tensor::scalar(dim, m)).collect();
        let k = fem::assemble_stiffness(grid, quad, &tens);
        let rhs = fem::load_flux(grid, quad, b);
        Ok(solve_dirichlet(grid, k, rhs, true)?.0)
    };
    let frozen = |u: &[f64]| -> Result<Vec<f64>> {
        let g = fem::gradients(grid, quad, u);
        let top = g.iter().fold(0.0f64, |m, l| m.max(vnorm(l)));
        let floor = [1e-8 * top.max(1e-300), 0.0, 0.0];
        let mu = g
            .iter()
            .zip(c)
            .map(|(l, cv)| {
                let w = flux.weight(*cv, l);
                if w.is_finite() && w > 0.0 {
                    w
                } else {
                    flux.weight(*cv, &floor)
                }
            })
            .collect();
        weighted(mu)
    };
    // Degenerate weights at Du = 0 for p ≠ 2: start from the linear problem.
    let mut u = if b.iter().all(|v| vnorm(v) == 0.0) {
        vec![0.0; grid.num_nodes()]
    } else {
        weighted(c.to_vec())?
    };
    let mut res = residual(&u);
    let mut trace = vec![res];
    let mut it = 0;
    let linear = flux.exponent == 2.0;
    while res > opts.tol {
        if it >= opts.max_iter {
            return Err(Error::Solver {
                solver: "monotone Kačanov iteration",
                iterations: it,
                residual: res,
                trace,
            });
        }
        it += 1;
        let target = frozen(&u)?;
        if linear {
            u = target;
            res = residual(&u);
            trace.push(res);
            break;
        }
        let mut theta = opts.damping;
        loop {
            let cand: Vec<f64> = u
                .iter()
                .zip(&target)
                .map(|(a, t)| a + theta * (t - a))
                .collect();
            let r = residual(&cand);
            if r < res || theta < 1e-6 {
                u = cand;
                res = r;
                break;
            }
            theta *= 0.5;
        }
        trace.push(res);
        if trace.len() > 20 && res > 0.99 * trace[trace.len() - 21] {
            return Err(Error::Solver {
                solver: "monotone Kačanov iteration (stagnation)",
                iterations: it,
                residual: res,
                trace,
            });
        }
    }
    if res > opts.tol {
        return Err(Error::Solver {
            solver: "monotone linear step",
            iterations: it,
            residual: res,
            trace,
        });
    }
    Ok((u, it, res, trace))
}

fn lp_norm(grid: &Grid, quad: &ElementQuadrature, v: &[[f64; 3]], p: f64) -> f64 {
    let s: Vec<f64> = v.iter().map(|g| vnorm(g).powf(p)).collect();
    fem::integrate(grid, quad, &s).powf(1.0 / p)
}

/// Discrete solution of `div a(x, T(x/ε₁)ω, x/ε₂, Du) = div b(x, T(x/ε₁)ω, x/ε₂)`, u = 0 on ∂Q.
pub fn solve_fine_monotone(
    model: &CoefficientModel,
    scales: &ScalePair,
    omega: &OmegaSample,
    grid: &MacroGrid,
    opts: &MonotoneOptions,
) -> Result<MonotoneSolution> {
    scales.validate()?;
    let flux = model
        .flux
        .as_ref()
        .ok_or_else(|| Error::Parameter("model has no nonlinear flux".into()))?;
    if model.rhs_b.is_none() {
        return Err(Error::Parameter(
            "monotone problem needs a right-hand side b".into(),
        ));
    }
    let grid = grid.grid()?;
    check_model_grid(model, &grid)?;
    check_resolution(&grid, scales.eps2)?;
    let quad = ElementQuadrature::gauss(grid.dim, 2)?;
    let dim = model.dim;
    let nq = quad.len();
    let mut c = Vec::with_capacity(grid.num_elements() * nq);
    let mut b = Vec::with_capacity(grid.num_elements() * nq);
    for e in 0..grid.num_elements() {
        for q in 0..nq {
            let x = fem::qp_point(&grid, &quad, e, q);
            let (w, y) = fast_args(model, scales, omega, &x);
            let cv = model.flux_coefficient(&x[..dim], &w, &y[..dim]);
            if !(cv > 0.0) {
                return Err(Error::Monotonicity(format!(
                    "flux coefficient {cv} at {:?}",
                    &x[..dim]
                )));
            }
            let bv = model.rhs_b_at(&x[..dim], &w, &y[..dim]);
            if bv.iter().any(|t| !t.is_finite()) {
                return Err(Error::Overflow(format!("b at {:?}", &x[..dim])));
            }
            c.push(cv);
            b.push(bv);
        }
    }
    let (u, iterations, residual, trace) = kacanov_dirichlet(&grid, &quad, flux, &c, &b, opts)?;
    let p = flux.exponent;
    let g = fem::gradients(&grid, &quad, &u);
    let gradient_norm = lp_norm(&grid, &quad, &g, p);
    let bound = if p >= 2.0 {
        let c0 = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let bn = lp_norm(&grid, &quad, &b, p / (p - 1.0));
        let bound = (bn / c0).powf(1.0 / (p - 1.0));
        if gradient_norm > bound * (1.0 + 1e-6) + 1e-12 {
            return Err(Error::Invariant(format!(
                "‖Du‖ = {gradient_norm:.6e} exceeds a-priori bound {bound:.6e}"
            )));
        }
        Some(bound)
    } else {
        None
    };
    Ok(MonotoneSolution {
        field: DiscreteField::nodal(grid, 1, u)?,
        iterations,
        residual,
        trace,
        gradient_norm,
        bound,
    })
}

/// Homogenized monotone problem `∫ q(x, Du₀)·Dv = ∫ M_y[b](x)·Dv` where
/// `q(x, ξ) = M_y[a(x, y, ξ + Dζ)]` comes from a cell solve at every macro
/// quadrature point. Newton iteration with a finite-difference Jacobian of q.
/// Only ω-independent models are supported.
pub fn solve_homogenized_monotone(
    model: &CoefficientModel,
    grid: &MacroGrid,
    cell: &CellGrid,
    opts: &MonotoneOptions,
) -> Result<MonotoneSolution> {
    let flux = model
        .flux
        .as_ref()
        .ok_or_else(|| Error::Parameter("model has no nonlinear flux".into()))?;
    if model.structure().omega != Structure::Constant {
        return Err(Error::Unsupported(
            "homogenized monotone solve needs an ω-independent model".into(),
        ));
    }
    let grid = grid.grid()?;
    check_model_grid(model, &grid)?;
    let omega = model.system.sample_omega(0)?;
    let quad = ElementQuadrature::gauss(grid.dim, 2)?;
    let cgrid = cell.grid()?;
    let cquad = cell.quadrature()?;
    let dim = model.dim;
    let nq = quad.len();
    let npts = grid.num_elements() * nq;
    let data = (0..npts)
        .into_par_iter()
        .map(|p| {
            let x = fem::qp_point(&grid, &quad, p / nq, p % nq);
            monotone_cell_data(model, &x[..dim], &omega, &cgrid, &cquad)
        })
        .collect::<Result<Vec<_>>>()?;
    let cell_opts = MonotoneOptions {
        tol: opts.tol.min(1e-10),
        ..*opts
    };
    let q_at = |p: usize, xi: &[f64], init: Option<&[f64]>| {
        solve_monotone_cell_sampled(
            &cgrid, &cquad, flux, &data[p].0, &data[p].1, xi, init, &cell_opts,
        )
    };

    let mut u = vec![0.0; grid.num_nodes()];
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; npts];
    let mut trace = Vec::new();
    let mut it = 0;
    // Evaluate q, M[b] and the Jacobian at every quadrature point.
    let eval = |u: &[f64],
                warm: &[Option<Vec<f64>>],
                jac: bool|
     -> Result<Vec<([f64; 3], [f64; 3], Tensor, Vec<f64>)>> {
        let g = fem::gradients(&grid, &quad, u);
        (0..npts)
            .into_par_iter()
            .map(|p| {
                let xi = &g[p][..dim];
                let base = q_at(p, xi, warm[p].as_deref())?;
                let mut jt = Tensor::zeros(dim);
                if jac {
                    let scale = xi.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                    let h = 1e-6 * scale;
                    for k in 0..dim {
                        let mut xk = xi.to_vec();
                        xk[k] += h;
                        let s = q_at(p, &xk, Some(&base.corrector))?;
                        for i in 0..dim {
                            jt.set(i, k, (s.flux[i] - base.flux[i]) / h);
                        }
                    }
                }
                Ok((base.flux, base.mean_b, jt, base.corrector))
            })
            .collect()
    };
    let residual_of = |vals: &[([f64; 3], [f64; 3], Tensor, Vec<f64>)]| -> (Vec<f64>, f64) {
        let mut mag = Vec::with_capacity(npts);
        let g: Vec<[f64; 3]> = vals
            .iter()
            .map(|(q, b, _, _)| {
                mag.push(vnorm(q) + vnorm(b));
                [q[0] - b[0], q[1] - b[1], q[2] - b[2]]
            })
            .collect();
        let mut r = fem::load_flux(&grid, &quad, &g);
        zero_boundary(&grid, &mut r);
        let s = abs_scale(&grid, &quad, &mag);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        (r, if s > 0.0 { n / s } else { n })
    };
    let mut vals = eval(&u, &warm, true)?;
    let (mut r, mut res) = residual_of(&vals);
    trace.push(res);
    while res > opts.tol {
        if it >= opts.max_iter {
            return Err(Error::Solver {
                solver: "homogenized monotone Newton",
                iterations: it,
                residual: res,
                trace,
            });
        }
        it += 1;
        // The Jacobian vanishes at Du = 0 when p > 2; take a linear first step.
        let jac: Vec<Tensor> = if it == 1 && flux.exponent != 2.0 {
            data.iter()
                .map(|(c, _)| Tensor::scalar(dim, c.iter().sum::<f64>() / c.len() as f64))
                .collect()
        } else {
            vals.iter().map(|v| v.2).collect()
        };
        let k = fem::assemble_stiffness(&grid, &quad, &jac);
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let (du, _) = solve_dirichlet(&grid, k, rhs, false)?;
        for (w, v) in warm.iter_mut().zip(&vals) {
            *w = Some(v.3.clone());
        }
        let mut theta = 1.0;
        loop {
            let cand: Vec<f64> = u.iter().zip(&du).map(|(a, d)| a + theta * d).collect();
            let cv = eval(&cand, &warm, true)?;
            let (cr, cres) = residual_of(&cv);
            if cres < res || theta < 1e-4 {
                u = cand;
                vals = cv;
                r = cr;
                res = cres;
                break;
            }
            theta *= 0.5;
        }
        trace.push(res);
        if trace.len() > 20 && res > 0.99 * trace[trace.len() - 21] {
            return Err(Error::Solver {
                solver: "homogenized monotone Newton (stagnation)",
                iterations: it,
                residual: res,
                trace,
            });
        }
    }
    let g = fem::gradients(&grid, &quad, &u);
    let gradient_norm = lp_norm(&grid, &quad, &g, flux.exponent);
    Ok(MonotoneSolution {
        field: DiscreteField::nodal(grid, 1, u)?,
        iterations: it,
        residual: res,
        trace,
        gradient_norm,
        bound: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StokesFieldSolution {
    pub velocity: DiscreteField,
    /// Element pressures, zero mean.
    pub pressure: DiscreteField,
    pub uzawa_iterations: usize,
    pub max_divergence: f64,
    /// ∫ (h × u)·u.
    pub rotation_energy: f64,
    /// ‖Du‖_{L²}.
    pub energy: f64,
    /// C_P‖f‖/α, when a coercivity constant is known.
    pub energy_bound: Option<f64>,
    /// |a(u,u) − ∫ f·u| / |∫ f·u|.
    pub energy_defect: f64,
}

fn force_samples(
    force: &[Profile],
    grid: &Grid,
    quad: &ElementQuadrature,
) -> Result<(Vec<f64>, f64)> {
    let dim = grid.dim;
    if force.len() != dim {
        return Err(Error::Shape {
            expected: dim,
            got: force.len(),
        });
    }
    let n = grid.num_nodes();
    let mut load = vec![0.0; dim * n];
    let mut norm2 = 0.0;
    for (k, p) in force.iter().enumerate() {
        let f = fem::sample_scalar(grid, quad, |x| p.eval(&x[..dim]))?;
        load[k * n..(k + 1) * n].copy_from_slice(&fem::load_source(grid, quad, &f));
        let sq: Vec<f64> = f.iter().map(|v| v * v).collect();
        norm2 += fem::integrate(grid, quad, &sq);
    }
    Ok((load, norm2.sqrt()))
}

fn viscous_energy(
    grid: &Grid,
    quad: &ElementQuadrature,
    visc: &Viscosity<'_>,
    u: &[f64],
) -> (f64, f64) {
    let dim = grid.dim;
    let n = grid.num_nodes();
    let nq = quad.len();
    let g: Vec<Vec<[f64; 3]>> = (0..dim)
        .map(|k| fem::gradients(grid, quad, &u[k * n..(k + 1) * n]))
        .collect();
    let mut e = Vec::with_capacity(g[0].len());
    let mut d2 = Vec::with_capacity(g[0].len());
    for p in 0..g[0].len() {
        let mut s = 0.0;
        let mut dd = 0.0;
        for k in 0..dim {
            dd += g[k][p][..dim].iter().map(|v| v * v).sum::<f64>();
        }
        match visc {
            Viscosity::Componentwise(a) => {
                for k in 0..dim {
                    let ag = a[p].apply(&g[k][p]);
                    s += (0..dim).map(|d| g[k][p][d] * ag[d]).sum::<f64>();
                }
            }
            Viscosity::Full(c) => {
                let c = &c[p / nq];
                for k in 0..dim {
                    for j in 0..dim {
                        for m in 0..dim {
                            for l in 0..dim {
                                s += c.c[k][j][m][l] * g[k][p][j] * g[m][p][l];
                            }
                        }
                    }
                }
            }
        }
        e.push(s);
        d2.push(dd);
    }
    (
        fem::integrate(grid, quad, &e),
        fem::integrate(grid, quad, &d2).sqrt(),
    )
}

fn stokes_core(
    grid: &Grid,
    quad: &ElementQuadrature,
    visc: Viscosity<'_>,
    h: Option<&[[f64; 3]]>,
    force: &[Profile],
    alpha: Option<f64>,
    opts: &UzawaOptions,
) -> Result<StokesFieldSolution> {
    let (load, fnorm) = force_samples(force, grid, quad)?;
    let sys = StokesSystem::assemble(
        grid,
        quad,
        match &visc {
            Viscosity::Componentwise(a) => Viscosity::Componentwise(a),
            Viscosity::Full(c) => Viscosity::Full(c),
        },
        h,
        opts,
    )?;
    let sol = sys.solve(&load, opts)?;
    if sol.max_divergence > 1e-8 {
        return Err(Error::Solver {
            solver: "augmented-Lagrangian Uzawa",
            iterations: sol.iterations,
            residual: sol.max_divergence,
            trace: sol.trace,
        });
    }
    let u = sol.velocity;
    let rot = match h {
        Some(h) => rotation_energy(grid, quad, h, &u),
        None => 0.0,
    };
    let hmax = h.map_or(0.0, |h| h.iter().fold(0.0f64, |m, v| m.max(vnorm(v))));
    let u2: f64 = (0..grid.dim)
        .map(|k| {
            fem::l2_norm(
                grid,
                quad,
                &u[k * sys.num_nodes()..(k + 1) * sys.num_nodes()],
            )
            .powi(2)
        })
        .sum();
    if rot.abs() > 1e-12 * (1.0f64).max(hmax * u2) {
        return Err(Error::Invariant(format!(
            "rotation energy {rot:.3e} is not zero"
        )));
    }
    let (a_uu, energy) = viscous_energy(grid, quad, &visc, &u);
    let fu: f64 = load.iter().zip(&u).map(|(f, v)| f * v).sum();
    let energy_defect = if fu.abs() > 0.0 {
        (a_uu - fu).abs() / fu.abs()
    } else {
        a_uu.abs()
    };
    let energy_bound = alpha.map(|a| fem::poincare_constant(grid) * fnorm / a);
    if let Some(b) = energy_bound {
        if energy > b * (1.0 + 1e-6) + 1e-12 {
            return Err(Error::Invariant(format!(
                "Stokes energy {energy:.6e} exceeds bound {b:.6e}"
            )));
        }
    }
    Ok(StokesFieldSolution {
        velocity: DiscreteField::nodal(grid.clone(), grid.dim, u)?,
        pressure: DiscreteField::element(grid.clone(), 1, sol.pressure)?,
        uzawa_iterations: sol.iterations,
        max_divergence: sol.max_divergence,
        rotation_energy: rot,
        energy,
        energy_bound,
        energy_defect,
    })
}

/// `−div(a^ε Du) + h^ε × u + ∇p = f`, `div u = 0`, u = 0 on ∂Q (N = 2 uses h = (0, 0, h₃)).
pub fn solve_fine_stokes(
    model: &CoefficientModel,
    scales: &ScalePair,
    omega: &OmegaSample,
    force: &[Profile],
    grid: &MacroGrid,
    opts: &UzawaOptions,
) -> Result<StokesFieldSolution> {
    scales.validate()?;
    if model.tensor.is_none() {
        return Err(Error::Parameter("model has no viscosity tensor".into()));
    }
    let grid = grid.grid()?;
    check_model_grid(model, &grid)?;
    check_resolution(&grid, scales.eps2)?;
    let quad = ElementQuadrature::gauss(grid.dim, 2)?;
    let dim = model.dim;
    let (a, lo, _) = fem::sample_tensor(&grid, &quad, |x| {
        let (w, y) = fast_args(model, scales, omega, x);
        model.tensor_at(&x[..dim], &w, &y[..dim])
    })?;
    let h = match &model.coriolis {
        Some(_) => {
            let nq = quad.len();
            let mut h = Vec::with_capacity(grid.num_elements() * nq);
            for e in 0..grid.num_elements() {
                for q in 0..nq {
                    let x = fem::qp_point(&grid, &quad, e, q);
                    let (w, y) = fast_args(model, scales, omega, &x);
                    let v = model.coriolis_at(&x[..dim], &w, &y[..dim]);
                    if v.iter().any(|t| !t.is_finite()) {
                        return Err(Error::Overflow(format!(
                            "Coriolis field at {:?}",
                            &x[..dim]
                        )));
                    }
                    h.push(v);
                }
            }
            Some(h)
        }
        None => None,
    };
    stokes_core(
        &grid,
        &quad,
        Viscosity::Componentwise(&a),
        h.as_deref(),
        force,
        Some(lo),
        opts,
    )
}

/// Macroscopic viscosity for the homogenized Stokes problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum MacroViscosity {
    /// A_eff acting on each velocity component.
    Componentwise { tensor: EffectiveTensor },
    /// Full 4-tensor, uniform over Q.
    Full { tensor: Viscosity4 },
}

/// Homogenized Stokes problem for each h̃(ω); identical h̃ values share one solve.
pub fn solve_homogenized_stokes(
    viscosity: &MacroViscosity,
    h_tilde: &[[f64; 3]],
    force: &[Profile],
    grid: &MacroGrid,
    opts: &UzawaOptions,
) -> Result<Vec<StokesFieldSolution>> {
    let grid = grid.grid()?;
    let quad = ElementQuadrature::gauss(grid.dim, 2)?;
    let dim = grid.dim;
    let npts = grid.num_elements() * quad.len();
    let hs: Vec<[f64; 3]> = if h_tilde.is_empty() {
        vec![[0.0; 3]]
    } else {
        h_tilde.to_vec()
    };
    let solve_one = |hv: &[f64; 3]| -> Result<StokesFieldSolution> {
        let h = vec![*hv; npts];
        let hopt = if vnorm(hv) > 0.0 {
            Some(h.as_slice())
        } else {
            None
        };
        match viscosity {
            MacroViscosity::Componentwise { tensor } => {
                if tensor.dim != dim {
                    return Err(Error::Shape {
                        expected: dim,
                        got: tensor.dim,
                    });
                }
                let (a, lo, _) = fem::sample_tensor(&grid, &quad, |x| *tensor.at(&x[..dim]))?;
                stokes_core(
                    &grid,
                    &quad,
                    Viscosity::Componentwise(&a),
                    hopt,
                    force,
                    Some(lo),
                    opts,
                )
            }
            MacroViscosity::Full { tensor } => {
                if tensor.dim != dim {
                    return Err(Error::Shape {
                        expected: dim,
                        got: tensor.dim,
                    });
                }
                if tensor.asymmetry() > 1e-8 * (1.0 + tensor.max_abs()) {
                    return Err(Error::Ellipticity {
                        min_eig: f64::NAN,
                        location: "viscosity tensor lacks major symmetry".into(),
                    });
                }
                let c = vec![tensor.clone(); grid.num_elements()];
                stokes_core(&grid, &quad, Viscosity::Full(&c), hopt, force, None, opts)
            }
        }
    };
    let mut out: Vec<StokesFieldSolution> = Vec::with_capacity(hs.len());
    for (i, hv) in hs.iter().enumerate() {
        if let Some(j) = hs[..i].iter().position(|o| o == hv) {
            let s = out[j].clone();
            out.push(s);
        } else {
            out.push(solve_one(hv)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::DynamicalSystem;
    use crate::model::{ScalarCoef, TensorCoef};
    use crate::profile::Wave;
    use std::f64::consts::PI;

    fn laplace(dim: usize) -> CoefficientModel {
        CoefficientModel::linear(
            DynamicalSystem::periodic(dim),
            TensorCoef::isotropic(ScalarCoef::constant(1.0)),
        )
    }

    fn osc1() -> CoefficientModel {
        CoefficientModel::linear(
            DynamicalSystem::periodic(1),
            TensorCoef::isotropic(ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0]))),
        )
    }

    /// sin(πx)sin(πy) = ½cos(π(x−y)) − ½cos(π(x+y)).
    fn sin_product_2d(scale: f64) -> Profile {
        Profile::constant(0.0)
            .with_term(0.5 * scale, &[0.5, -0.5], Wave::Cos, 0.0)
            .with_term(-0.5 * scale, &[0.5, 0.5], Wave::Cos, 0.0)
    }

    fn omega(m: &CoefficientModel) -> OmegaSample {
        m.system.sample_omega(0).unwrap()
    }

    #[test]
    fn scale_pair_rules() {
        assert!(ScalePair::new(0.1, 0.2).is_err());
        assert!(ScalePair::new(0.1, 0.06).is_err());
        assert!(ScalePair::new(0.1, 0.05).is_ok());
        let s = ScalePair::from_eps2(1.0 / 64.0).unwrap();
        assert!((s.eps1 - 0.125).abs() < 1e-15);
    }

    #[test]
    fn refuses_under_resolved_grid() {
        let m = osc1();
        let s = ScalePair::from_eps2(1.0 / 16.0).unwrap();
        let r = solve_fine_elliptic(
            &m,
            &s,
            &omega(&m),
            &Source::constant(1.0),
            &MacroGrid::unit(1, 64),
        );
        assert!(matches!(r, Err(Error::Resolution { .. })));
    }

    #[test]
    fn poisson_manufactured_second_order() {
        let m = laplace(2);
        let s = ScalePair::from_eps2(1.0 / 8.0).unwrap();
        let src = Source::density(sin_product_2d(2.0 * PI * PI));
        let exact = |x: &[f64], _: usize| (PI * x[0]).sin() * (PI * x[1]).sin();
        let err = |n| {
            let u = solve_fine_elliptic(&m, &s, &omega(&m), &src, &MacroGrid::unit(2, n)).unwrap();
            assert!(u.field.boundary_max() == 0.0);
            assert!(u.min_value >= -1e-10);
            u.field.l2_error(exact).unwrap()
        };
        let (e1, e2) = (err(64), err(128));
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_source_gives_zero() {
        let m = osc1();
        let s = ScalePair::from_eps2(1.0 / 8.0).unwrap();
        let u = solve_fine_elliptic(&m, &s, &omega(&m), &Source::zero(), &MacroGrid::unit(1, 64))
            .unwrap();
        assert!(u.field.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_dimensional_fine_close_to_homogenized() {
        let m = osc1();
        let s = ScalePair::from_eps2(1.0 / 64.0).unwrap();
        let g = MacroGrid::resolving(1, s.eps2);
        let fine = solve_fine_elliptic(&m, &s, &omega(&m), &Source::constant(1.0), &g).unwrap();
        let r3 = 3f64.sqrt();
        let exact = |x: &[f64], _: usize| x[0] * (1.0 - x[0]) / (2.0 * r3);
        let gap = fine.field.l2_error(exact).unwrap();
        let norm = 1.0 / (2.0 * r3) / 30f64.sqrt();
        assert!(gap <= 0.05 * norm, "gap {gap}");
        assert!(fine.energy <= fine.energy_bound);
    }

    #[test]
    fn homogenized_quadratic_exact() {
        let r3 = 3f64.sqrt();
        let a = EffectiveTensor::uniform(Tensor::scalar(1, r3), Tensor::zeros(1));
        let u = solve_homogenized_elliptic(&a, &Source::constant(1.0), &MacroGrid::unit(1, 512))
            .unwrap();
        let err = (0..u.field.grid.num_nodes())
            .map(|i| {
                let x = u.field.grid.node_coords(i)[0];
                (u.field.values[i] - x * (1.0 - x) / (2.0 * r3)).abs()
            })
            .fold(0.0, f64::max);
        assert!(err <= 1e-6);
    }

    #[test]
    fn homogenized_solve_is_linear() {
        let a = EffectiveTensor::uniform(Tensor::diag(&[1.5, 0.7]), Tensor::zeros(2));
        let g = MacroGrid::unit(2, 16);
        let f1 = Source::density(Profile::sine(0.0, 1.0, &[1.0, 0.0]));
        let f2 = Source::constant(2.0).with_flux(vec![
            Profile::constant(0.0),
            Profile::cosine(0.0, 1.0, &[0.0, 1.0]),
        ]);
        let both = Source {
            density: Some(Profile::sine(2.0, 1.0, &[1.0, 0.0])),
            flux: f2.flux.clone(),
        };
        let u1 = solve_homogenized_elliptic(&a, &f1, &g).unwrap();
        let u2 = solve_homogenized_elliptic(&a, &f2, &g).unwrap();
        let u = solve_homogenized_elliptic(&a, &both, &g).unwrap();
        let d = u
            .field
            .values
            .iter()
            .zip(u1.field.values.iter().zip(&u2.field.values))
            .fold(0.0f64, |m, (a, (b, c))| m.max((a - b - c).abs()));
        assert!(d <= 1e-12);
    }

    #[test]
    fn non_elliptic_effective_tensor_rejected() {
        let a = EffectiveTensor::uniform(Tensor::diag(&[1.0, -1.0]), Tensor::zeros(2));
        let r = solve_homogenized_elliptic(&a, &Source::constant(1.0), &MacroGrid::unit(2, 4));
        assert!(matches!(r, Err(Error::Ellipticity { .. })));
    }

    #[test]
    fn field_binary_round_trip() {
        let g = MacroGrid::unit(2, 3).grid().unwrap();
        let vals: Vec<f64> = (0..2 * g.num_nodes())
            .map(|i| i as f64 * 0.1 - 1.0)
            .collect();
        let f = DiscreteField::nodal(g, 2, vals).unwrap();
        let back = DiscreteField::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(f, back);
        let mut bad = f.to_bytes();
        bad.pop();
        assert!(matches!(
            DiscreteField::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.bin");
        f.write_binary(&p).unwrap();
        assert_eq!(DiscreteField::read_binary(&p).unwrap(), f);
        let csv = f.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + f.points());
        assert!(csv.starts_with("x,y,v0,v1"));
    }

    fn monotone_1d(p: f64, b: ScalarCoef) -> CoefficientModel {
        osc1()
            .with_flux(NonlinearFlux {
                coefficient: ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0])),
                exponent: p,
                regularization: 0.0,
            })
            .with_rhs_b(vec![b])
    }

    #[test]
    fn monotone_zero_b_gives_zero() {
        let m = monotone_1d(3.0, ScalarCoef::constant(0.0));
        let s = ScalePair::from_eps2(1.0 / 8.0).unwrap();
        let u = solve_fine_monotone(
            &m,
            &s,
            &omega(&m),
            &MacroGrid::unit(1, 64),
            &MonotoneOptions::default(),
        )
        .unwrap();
        assert!(u.field.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn monotone_p2_matches_elliptic() {
        let m = monotone_1d(2.0, ScalarCoef::of_y(Profile::sine(0.0, 1.0, &[1.0])));
        let s = ScalePair::from_eps2(1.0 / 16.0).unwrap();
        let g = MacroGrid::resolving(1, s.eps2);
        let u = solve_fine_monotone(&m, &s, &omega(&m), &g, &MonotoneOptions::default()).unwrap();
        let src = Source::zero().with_flux(vec![Profile::sine(0.0, 1.0, &[1.0 / s.eps2])]);
        let v = solve_fine_elliptic(&m, &s, &omega(&m), &src, &g).unwrap();
        let d = u
            .field
            .values
            .iter()
            .zip(&v.field.values)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(d <= 1e-8, "{d}");
        assert!(u.gradient_norm <= u.bound.unwrap());
    }

    #[test]
    fn monotone_p3_converges_and_respects_bound() {
        let b = ScalarCoef::of_y(Profile::sine(0.0, 1.0, &[1.0])).plus(ScalarCoef::of_x(
            Profile::constant(0.0).with_monomial(-1.0, &[1]),
        ));
        let m = monotone_1d(3.0, b);
        let s = ScalePair::from_eps2(1.0 / 8.0).unwrap();
        let u = solve_fine_monotone(
            &m,
            &s,
            &omega(&m),
            &MacroGrid::unit(1, 64),
            &MonotoneOptions::default(),
        )
        .unwrap();
        assert!(u.residual <= 1e-8);
        assert!(u.gradient_norm <= u.bound.unwrap());
        assert!(u.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn homogenized_monotone_closed_form() {
        // b = sin 2πy − x, a = (2 + sin 2πy)λ gives u₀ = x(1−x)/(2√3).
        let b = ScalarCoef::of_y(Profile::sine(0.0, 1.0, &[1.0])).plus(ScalarCoef::of_x(
            Profile::constant(0.0).with_monomial(-1.0, &[1]),
        ));
        let m = monotone_1d(2.0, b);
        let u = solve_homogenized_monotone(
            &m,
            &MacroGrid::unit(1, 32),
            &CellGrid::unit(1, 128),
            &MonotoneOptions::default(),
        )
        .unwrap();
        let r3 = 3f64.sqrt();
        let err = u
            .field
            .l2_error(|x, _| x[0] * (1.0 - x[0]) / (2.0 * r3))
            .unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn stokes_zero_force_and_orthogonality() {
        let h3 = Profile::constant(0.0).with_power_term(3.0, &[1.0, 0.0], Wave::Sin, 2);
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(2),
            TensorCoef::isotropic(ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0, 0.0]))),
        )
        .with_coriolis(vec![
            ScalarCoef::constant(0.0),
            ScalarCoef::constant(0.0),
            ScalarCoef::of_y(h3),
        ]);
        let s = ScalePair::from_eps2(1.0 / 4.0).unwrap();
        let g = MacroGrid::unit(2, 32);
        let zero = vec![Profile::constant(0.0); 2];
        let u = solve_fine_stokes(&m, &s, &omega(&m), &zero, &g, &UzawaOptions::default()).unwrap();
        assert!(u.velocity.values.iter().all(|v| v.abs() <= 1e-14));
        assert!(u.pressure.values.iter().all(|v| v.abs() <= 1e-12));
        let f = vec![
            Profile::sine(0.0, 1.0, &[0.0, 1.0]),
            Profile::cosine(0.5, 1.0, &[1.0, 0.0]),
        ];
        let u = solve_fine_stokes(&m, &s, &omega(&m), &f, &g, &UzawaOptions::default()).unwrap();
        assert!(u.rotation_energy.abs() <= 1e-12);
        assert!(u.max_divergence <= 1e-8);
        assert!(u.energy <= u.energy_bound.unwrap());
        assert!(u.energy_defect <= 1e-8, "{}", u.energy_defect);
    }

    #[test]
    fn homogenized_stokes_rotation_keeps_energy_identity() {
        let a = EffectiveTensor::uniform(Tensor::identity(2), Tensor::zeros(2));
        let visc = MacroViscosity::Componentwise { tensor: a };
        let f = vec![Profile::sine(0.0, 1.0, &[0.0, 1.0]), Profile::constant(1.0)];
        let g = MacroGrid::unit(2, 24);
        let out = solve_homogenized_stokes(
            &visc,
            &[[0.0; 3], [0.0, 0.0, 5.0], [0.0, 0.0, 5.0]],
            &f,
            &g,
            &UzawaOptions::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[1], out[2]);
        for s in &out {
            assert!(s.energy_defect <= 1e-10, "{}", s.energy_defect);
            assert!(s.rotation_energy.abs() <= 1e-12);
        }
        // a constant planar rotation of a solenoidal field is a gradient
        assert!(out[0].velocity.l2_distance(&out[1].velocity).unwrap() <= 1e-8);
        let dp = out[0]
            .pressure
            .values
            .iter()
            .zip(&out[1].pressure.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dp > 1e-3);
    }
}
