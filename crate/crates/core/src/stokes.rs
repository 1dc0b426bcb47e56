//! Q1–P0 Stokes discretization with a rotation term, solved by augmented-Lagrangian Uzawa.
//!
//! Velocity unknowns are numbered component-major (`k * num_nodes + node`);
//! pressure is one value per element. The velocity operator
//! `A + H + r Bᵀ M_p⁻¹ B` is factored once and reused for every Uzawa step
//! and every right-hand side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::basis_gradients;
use crate::grid::{Boundary, ElementQuadrature, Grid};
use crate::linalg::{SparseLu, Tensor};

/// Fourth-order viscosity C_{kj,ml}: the form is Σ ∫ C_{kj,ml} ∂_l u_m ∂_j v_k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct Viscosity4 {
    pub dim: usize,
    pub c: [[[[f64; 3]; 3]; 3]; 3],
}

impl Viscosity4 {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            c: [[[[0.0; 3]; 3]; 3]; 3],
        }
    }

    /// C_{kj,ml} = δ_km a_jl.
    pub fn componentwise(a: &Tensor) -> Self {
        let n = a.dim();
        let mut v = Self::zeros(n);
        for k in 0..n {
            for j in 0..n {
                for l in 0..n {
                    v.c[k][j][k][l] = a.get(j, l);
                }
            }
        }
        v
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize, m: usize, l: usize) -> f64 {
        self.c[k][j][m][l]
    }

    pub fn max_abs(&self) -> f64 {
        self.c
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest |C_{kj,ml} − C_{ml,kj}|.
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim;
        let mut w: f64 = 0.0;
        for k in 0..n {
            for j in 0..n {
                for m in 0..n {
                    for l in 0..n {
                        w = w.max((self.c[k][j][m][l] - self.c[m][l][k][j]).abs());
                    }
                }
            }
        }
        w
    }

    /// Largest |C_{kj,ml} − δ_km a_jl|.
    pub fn distance_to_componentwise(&self, a: &Tensor) -> f64 {
        let other = Self::componentwise(a);
        let mut w: f64 = 0.0;
        for (x, y) in self
            .c
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .zip(other.c.iter().flatten().flatten().flatten())
        {
            w = w.max((x - y).abs());
        }
        w
    }
}

impl From<Viscosity4> for Vec<f64> {
    fn from(v: Viscosity4) -> Self {
        let n = v.dim;
        let mut out = Vec::with_capacity(n.pow(4));
        for k in 0..n {
            for j in 0..n {
                for m in 0..n {
                    for l in 0..n {
                        out.push(v.c[k][j][m][l]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<Vec<f64>> for Viscosity4 {
    type Error = String;
    fn try_from(v: Vec<f64>) -> std::result::Result<Self, String> {
        let dim = match v.len() {
            1 => 1,
            16 => 2,
            81 => 3,
            n => return Err(format!("viscosity needs 1, 16 or 81 entries, got {n}")),
        };
        let mut out = Self::zeros(dim);
        let mut it = v.into_iter();
        for k in 0..dim {
            for j in 0..dim {
                for m in 0..dim {
                    for l in 0..dim {
                        out.c[k][j][m][l] = it.next().unwrap();
                    }
                }
            }
        }
        Ok(out)
    }
}

pub enum Viscosity<'a> {
    /// Tensor a_jl sampled per quadrature point, acting on each component.
    Componentwise(&'a [Tensor]),
    /// Full viscosity, one per element.
    Full(&'a [Viscosity4]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UzawaOptions {
    /// Stop when the largest element-mean divergence is below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Augmentation r as a multiple of the largest viscosity.
    pub penalty: f64,
}

impl Default for UzawaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 400,
            penalty: 1e4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StokesSolution {
    /// Component-major nodal velocity.
    pub velocity: Vec<f64>,
    /// Element pressures, zero mean.
    pub pressure: Vec<f64>,
    pub iterations: usize,
    pub max_divergence: f64,
    pub trace: Vec<f64>,
}

pub struct StokesSystem {
    pub grid: Grid,
    pub quad: ElementQuadrature,
    n_nodes: usize,
    fixed: Vec<bool>,
    /// Per element: (dof, ∫_e ∂φ) pairs of the discrete divergence.
    b_rows: Vec<Vec<(usize, f64)>>,
    elem_vol: f64,
    r: f64,
    lu: SparseLu,
}

/// ε_ijk for indices in 0..3.
#[inline]
pub fn levi_civita(i: usize, j: usize, k: usize) -> f64 {
    match (i, j, k) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

/// (h × u) in the planar reduction (h = (0,0,h₃)) or exactly in 3D.
#[inline]
pub fn rotation(dim: usize, h: &[f64; 3], u: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    if dim == 2 {
        out[0] = -h[2] * u[1];
        out[1] = h[2] * u[0];
    } else if dim == 3 {
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i] += levi_civita(i, j, k) * h[j] * u[k];
                }
            }
        }
    }
    out
}

impl StokesSystem {
    /// Assembles and factors the augmented velocity operator. `coriolis` holds h
    /// per quadrature point (`e * nq + q`).
    pub fn assemble(
        grid: &Grid,
        quad: &ElementQuadrature,
        viscosity: Viscosity<'_>,
        coriolis: Option<&[[f64; 3]]>,
        opts: &UzawaOptions,
    ) -> Result<Self> {
        let dim = grid.dim;
        if dim < 2 {
            return Err(Error::Parameter(
                "Stokes problems need dimension 2 or 3".into(),
            ));
        }
        let n = grid.num_nodes();
        let ndof = dim * n;
        let nq = quad.len();
        let nc = grid.corners();
        let vol = grid.element_volume();
        let grads: Vec<[[f64; 3]; 8]> = (0..nq).map(|q| basis_gradients(grid, quad, q)).collect();

        let mut fixed = vec![false; ndof];
        match grid.boundary {
            Boundary::Dirichlet => {
                for i in grid.boundary_nodes() {
                    for k in 0..dim {
                        fixed[k * n + i] = true;
                    }
                }
            }
            Boundary::Periodic => {
                // Constants are in the kernel; pin one node per component.
                for k in 0..dim {
                    fixed[k * n] = true;
                }
            }
        }

        let vmax = match &viscosity {
            Viscosity::Componentwise(a) => a.iter().fold(0.0f64, |m, t| m.max(t.max_abs())),
            Viscosity::Full(c) => c.iter().fold(0.0f64, |m, t| m.max(t.max_abs())),
        };
        if !(vmax > 0.0) || !vmax.is_finite() {
            return Err(Error::Parameter(
                "Stokes viscosity must be positive and finite".into(),
            ));
        }
        let r = opts.penalty * vmax;

        let mut trip: Vec<(usize, usize, f64)> =
            Vec::with_capacity(grid.num_elements() * (dim * nc).pow(2) * 2);
        let mut b_rows = Vec::with_capacity(grid.num_elements());
        let dsize = dim * nc;
        let mut local = vec![0.0; dsize * dsize];
        for e in 0..grid.num_elements() {
            let nodes = grid.element_nodes(e);
            local.iter_mut().for_each(|v| *v = 0.0);
            let mut brow = vec![0.0; dsize];
            for q in 0..nq {
                let w = quad.weights[q] * vol;
                let g = &grads[q];
                match &viscosity {
                    Viscosity::Componentwise(a) => {
                        let t = &a[e * nq + q];
                        for jn in 0..nc {
                            let ag = t.apply(&g[jn]);
                            for i in 0..nc {
                                let s: f64 = (0..dim).map(|d| g[i][d] * ag[d]).sum();
                                for k in 0..dim {
                                    local[(k * nc + i) * dsize + k * nc + jn] += w * s;
                                }
                            }
                        }
                    }
                    Viscosity::Full(c) => {
                        let c = &c[e];
                        for k in 0..dim {
                            for i in 0..nc {
                                for m in 0..dim {
                                    for jn in 0..nc {
                                        let mut s = 0.0;
                                        for j in 0..dim {
                                            for l in 0..dim {
                                                s += c.c[k][j][m][l] * g[jn][l] * g[i][j];
                                            }
                                        }
                                        local[(k * nc + i) * dsize + m * nc + jn] += w * s;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(h) = coriolis {
                    let hv = &h[e * nq + q];
                    let s = &quad.shape[q];
                    for i in 0..nc {
                        for jn in 0..nc {
                            let mm = w * s[i] * s[jn];
                            for ki in 0..dim {
                                for ku in 0..dim {
                                    // coefficient of u_ku in (h × u)_ki
                                    let mut e_u = [0.0; 3];
                                    e_u[ku] = 1.0;
                                    let coef = rotation(dim, hv, &e_u)[ki];
                                    if coef != 0.0 {
                                        local[(ki * nc + i) * dsize + ku * nc + jn] += mm * coef;
                                    }
                                }
                            }
                        }
                    }
                }
                for k in 0..dim {
                    for i in 0..nc {
                        brow[k * nc + i] += w * g[i][k];
                    }
                }
            }
            // r Bᵀ M_p⁻¹ B, with M_p = |e|
            for a in 0..dsize {
                for b in 0..dsize {
                    local[a * dsize + b] += r * brow[a] * brow[b] / vol;
                }
            }
            let dof = |a: usize| (a / nc) * n + nodes[a % nc];
            for a in 0..dsize {
                let ra = dof(a);
                if fixed[ra] {
                    continue;
                }
                for b in 0..dsize {
                    let cb = dof(b);
                    if fixed[cb] {
                        continue;
                    }
                    let v = local[a * dsize + b];
                    if v != 0.0 {
                        trip.push((ra, cb, v));
                    }
                }
            }
            b_rows.push((0..dsize).map(|a| (dof(a), brow[a])).collect());
        }
        for (d, f) in fixed.iter().enumerate() {
            if *f {
                trip.push((d, d, 1.0));
            }
        }
        let lu = SparseLu::factor(ndof, &trip)?;
        Ok(Self {
            grid: grid.clone(),
            quad: quad.clone(),
            n_nodes: n,
            fixed,
            b_rows,
            elem_vol: vol,
            r,
            lu,
        })
    }

    pub fn num_dofs(&self) -> usize {
        self.fixed.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Element-mean divergence (∫_e div u)/|e|.
    pub fn divergence(&self, u: &[f64]) -> Vec<f64> {
        self.b_rows
            .iter()
            .map(|row| row.iter().map(|(d, v)| v * u[*d]).sum::<f64>() / self.elem_vol)
            .collect()
    }

    /// Uzawa iteration for the load `f` (one entry per velocity dof).
    pub fn solve(&self, f: &[f64], opts: &UzawaOptions) -> Result<StokesSolution> {
        let ndof = self.num_dofs();
        if f.len() != ndof {
            return Err(Error::Shape {
                expected: ndof,
                got: f.len(),
            });
        }
        let ne = self.b_rows.len();
        let mut p = vec![0.0; ne];
        let mut trace = Vec::new();
        let mut rhs = vec![0.0; ndof];
        for it in 1..=opts.max_iter {
            rhs.copy_from_slice(f);
            for (row, pe) in self.b_rows.iter().zip(&p) {
                for (d, v) in row {
                    rhs[*d] += v * pe;
                }
            }
            for (d, fx) in self.fixed.iter().enumerate() {
                if *fx {
                    rhs[d] = 0.0;
                }
            }
            let mut u = self.lu.solve(&rhs);
            let div = self.divergence(&u);
            let dmax = div.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !dmax.is_finite() {
                return Err(Error::Overflow("Stokes velocity".into()));
            }
            trace.push(dmax);
            if dmax <= opts.tol {
                if self.grid.boundary == Boundary::Periodic {
                    let dim = self.grid.dim;
                    let n = self.n_nodes;
                    for k in 0..dim {
                        let m = crate::stats::mean(&u[k * n..(k + 1) * n]);
                        u[k * n..(k + 1) * n].iter_mut().for_each(|v| *v -= m);
                    }
                }
                let pm = crate::stats::mean(&p);
                p.iter_mut().for_each(|v| *v -= pm);
                return Ok(StokesSolution {
                    velocity: u,
                    pressure: p,
                    iterations: it,
                    max_divergence: dmax,
                    trace,
                });
            }
            for (pe, d) in p.iter_mut().zip(&div) {
                *pe -= self.r * d;
            }
        }
        Err(Error::Solver {
            solver: "augmented-Lagrangian Uzawa",
            iterations: opts.max_iter,
            residual: *trace.last().unwrap_or(&f64::NAN),
            trace,
        })
    }

    /// Velocity of component `k` as a nodal slice.
    pub fn component<'a>(&self, u: &'a [f64], k: usize) -> &'a [f64] {
        &u[k * self.n_nodes..(k + 1) * self.n_nodes]
    }
}

/// ∫ (h × u)·u over the grid, evaluated at the quadrature points.
pub fn rotation_energy(
    grid: &Grid,
    quad: &ElementQuadrature,
    h: &[[f64; 3]],
    velocity: &[f64],
) -> f64 {
    let n = grid.num_nodes();
    let dim = grid.dim;
    let comps: Vec<Vec<f64>> = (0..dim)
        .map(|k| crate::fem::values(grid, quad, &velocity[k * n..(k + 1) * n]))
        .collect();
    let vals: Vec<f64> = (0..comps[0].len())
        .map(|i| {
            let mut u = [0.0; 3];
            for k in 0..dim {
                u[k] = comps[k][i];
            }
            let hu = rotation(dim, &h[i], &u);
            (0..dim).map(|k| hu[k] * u[k]).sum()
        })
        .collect();
    crate::fem::integrate(grid, quad, &vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthogonal() {
        let h = [0.3, -1.2, 2.5];
        let u = [1.5, 0.25, -0.75];
        for dim in [2, 3] {
            let hu = rotation(dim, &h, &u);
            let d: f64 = (0..dim).map(|k| hu[k] * u[k]).sum();
            assert!(d.abs() < 1e-15);
        }
        assert_eq!(levi_civita(0, 1, 2), 1.0);
        assert_eq!(levi_civita(1, 0, 2), -1.0);
    }

    #[test]
    fn componentwise_viscosity_round_trip() {
        let a = Tensor::diag(&[1.0, 2.0]);
        let c = Viscosity4::componentwise(&a);
        assert_eq!(c.get(0, 1, 0, 1), 2.0);
        assert_eq!(c.get(0, 1, 1, 1), 0.0);
        let v: Vec<f64> = c.clone().into();
        assert_eq!(Viscosity4::try_from(v).unwrap(), c);
        assert!(c.distance_to_componentwise(&a) == 0.0);
    }

    #[test]
    fn zero_load_gives_zero_flow() {
        let g = Grid::dirichlet_box(2, 8, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let q = ElementQuadrature::gauss(2, 2).unwrap();
        let a = vec![Tensor::identity(2); g.num_elements() * q.len()];
        let opts = UzawaOptions::default();
        let s = StokesSystem::assemble(&g, &q, Viscosity::Componentwise(&a), None, &opts).unwrap();
        let sol = s.solve(&vec![0.0; s.num_dofs()], &opts).unwrap();
        assert!(sol.velocity.iter().all(|v| *v == 0.0));
        assert!(sol.pressure.iter().all(|v| *v == 0.0));
    }
}
