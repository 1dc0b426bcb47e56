//! Q1 finite-element assembly on [`Grid`]s.
//!
//! Coefficients are sampled once per quadrature point into flat arrays indexed
//! by `e * nq + q`; assembly, fluxes and energies all read from those arrays so
//! that every derived quantity uses the same quadrature.

use crate::error::{Error, Result};
use crate::grid::{ElementQuadrature, Grid};
use crate::linalg::{CsrMatrix, Tensor};

/// Physical coordinates of quadrature point `q` of element `e`.
#[inline]
pub fn qp_point(grid: &Grid, quad: &ElementQuadrature, e: usize, q: usize) -> [f64; 3] {
    let o = grid.element_origin(e);
    let h = grid.spacing();
    let mut x = [0.0; 3];
    for a in 0..grid.dim {
        x[a] = o[a] + quad.points[q][a] * h[a];
    }
    x
}

/// Evaluates a tensor coefficient at every quadrature point and checks that it is
/// finite and uniformly elliptic. Returns the samples and the observed eigenvalue range.
pub fn sample_tensor<F>(
    grid: &Grid,
    quad: &ElementQuadrature,
    f: F,
) -> Result<(Vec<Tensor>, f64, f64)>
where
    F: Fn(&[f64; 3]) -> Tensor,
{
    let nq = quad.len();
    let mut out = Vec::with_capacity(grid.num_elements() * nq);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for e in 0..grid.num_elements() {
        for q in 0..nq {
            let x = qp_point(grid, quad, e, q);
            let t = f(&x);
            if !t.is_finite() {
                return Err(Error::Overflow(format!(
                    "coefficient at {:?}",
                    &x[..grid.dim]
                )));
            }
            let eig = t.sym_eigenvalues();
            let (mn, mx) = (eig[0], eig[grid.dim - 1]);
            if !(mn > 0.0) {
                return Err(Error::Ellipticity {
                    min_eig: mn,
                    location: format!("{:?}", &x[..grid.dim]),
                });
            }
            lo = lo.min(mn);
            hi = hi.max(mx);
            out.push(t);
        }
    }
    Ok((out, lo, hi))
}

/// Scalar samples at every quadrature point.
pub fn sample_scalar<F>(grid: &Grid, quad: &ElementQuadrature, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64; 3]) -> f64,
{
    let nq = quad.len();
    let mut out = Vec::with_capacity(grid.num_elements() * nq);
    for e in 0..grid.num_elements() {
        for q in 0..nq {
            let x = qp_point(grid, quad, e, q);
            let v = f(&x);
            if !v.is_finite() {
                return Err(Error::Overflow(format!(
                    "scalar field at {:?}",
                    &x[..grid.dim]
                )));
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Physical gradients of the element basis at quadrature point `q`.
#[inline]
pub fn basis_gradients(grid: &Grid, quad: &ElementQuadrature, q: usize) -> [[f64; 3]; 8] {
    let h = grid.spacing();
    let mut g = quad.grad_ref[q];
    for c in 0..grid.corners() {
        for a in 0..grid.dim {
            g[c][a] /= h[a];
        }
    }
    g
}

pub fn empty_matrix(grid: &Grid) -> CsrMatrix {
    CsrMatrix::from_pattern(grid.stencil())
}

/// K_ij = ∫ Dφ_i · A Dφ_j  (A sampled per quadrature point).
pub fn assemble_stiffness(grid: &Grid, quad: &ElementQuadrature, coef: &[Tensor]) -> CsrMatrix {
    let mut k = empty_matrix(grid);
    let nq = quad.len();
    let nc = grid.corners();
    let vol = grid.element_volume();
    let grads: Vec<[[f64; 3]; 8]> = (0..nq).map(|q| basis_gradients(grid, quad, q)).collect();
    let mut local = [[0.0f64; 8]; 8];
    for e in 0..grid.num_elements() {
        for row in local.iter_mut() {
            row.fill(0.0);
        }
        for q in 0..nq {
            let a = &coef[e * nq + q];
            let w = quad.weights[q] * vol;
            let g = &grads[q];
            for j in 0..nc {
                let ag = a.apply(&g[j]);
                for i in 0..nc {
                    let mut s = 0.0;
                    for d in 0..grid.dim {
                        s += g[i][d] * ag[d];
                    }
                    local[i][j] += w * s;
                }
            }
        }
        let nodes = grid.element_nodes(e);
        for i in 0..nc {
            for j in 0..nc {
                k.add(nodes[i], nodes[j], local[i][j]);
            }
        }
    }
    k
}

/// M_ij = ∫ ρ φ_i φ_j  (ρ sampled per quadrature point).
pub fn assemble_mass(grid: &Grid, quad: &ElementQuadrature, rho: &[f64]) -> CsrMatrix {
    let mut m = empty_matrix(grid);
    let nq = quad.len();
    let nc = grid.corners();
    let vol = grid.element_volume();
    for e in 0..grid.num_elements() {
        let nodes = grid.element_nodes(e);
        for q in 0..nq {
            let w = quad.weights[q] * vol * rho[e * nq + q];
            let s = &quad.shape[q];
            for i in 0..nc {
                for j in 0..nc {
                    m.add(nodes[i], nodes[j], w * s[i] * s[j]);
                }
            }
        }
    }
    m
}

/// b_i = ∫ g · Dφ_i  for a vector field sampled per quadrature point.
pub fn load_flux(grid: &Grid, quad: &ElementQuadrature, g: &[[f64; 3]]) -> Vec<f64> {
    let mut b = vec![0.0; grid.num_nodes()];
    let nq = quad.len();
    let nc = grid.corners();
    let vol = grid.element_volume();
    let grads: Vec<[[f64; 3]; 8]> = (0..nq).map(|q| basis_gradients(grid, quad, q)).collect();
    for e in 0..grid.num_elements() {
        let nodes = grid.element_nodes(e);
        for q in 0..nq {
            let w = quad.weights[q] * vol;
            let gv = &g[e * nq + q];
            for i in 0..nc {
                let mut s = 0.0;
                for d in 0..grid.dim {
                    s += gv[d] * grads[q][i][d];
                }
                b[nodes[i]] += w * s;
            }
        }
    }
    b
}

/// b_i = ∫ f φ_i  for a scalar sampled per quadrature point.
pub fn load_source(grid: &Grid, quad: &ElementQuadrature, f: &[f64]) -> Vec<f64> {
    let mut b = vec![0.0; grid.num_nodes()];
    let nq = quad.len();
    let nc = grid.corners();
    let vol = grid.element_volume();
    for e in 0..grid.num_elements() {
        let nodes = grid.element_nodes(e);
        for q in 0..nq {
            let w = quad.weights[q] * vol * f[e * nq + q];
            for i in 0..nc {
                b[nodes[i]] += w * quad.shape[q][i];
            }
        }
    }
    b
}

/// Gradient of a nodal field at every quadrature point.
pub fn gradients(grid: &Grid, quad: &ElementQuadrature, u: &[f64]) -> Vec<[f64; 3]> {
    let nq = quad.len();
    let nc = grid.corners();
    let grads: Vec<[[f64; 3]; 8]> = (0..nq).map(|q| basis_gradients(grid, quad, q)).collect();
    let mut out = Vec::with_capacity(grid.num_elements() * nq);
    for e in 0..grid.num_elements() {
        let nodes = grid.element_nodes(e);
        for g in grads.iter() {
            let mut v = [0.0; 3];
            for c in 0..nc {
                let uc = u[nodes[c]];
                for d in 0..grid.dim {
                    v[d] += uc * g[c][d];
                }
            }
            out.push(v);
        }
    }
    out
}

/// Nodal field values at every quadrature point.
pub fn values(grid: &Grid, quad: &ElementQuadrature, u: &[f64]) -> Vec<f64> {
    let nq = quad.len();
    let nc = grid.corners();
    let mut out = Vec::with_capacity(grid.num_elements() * nq);
    for e in 0..grid.num_elements() {
        let nodes = grid.element_nodes(e);
        for q in 0..nq {
            let mut v = 0.0;
            for c in 0..nc {
                v += u[nodes[c]] * quad.shape[q][c];
            }
            out.push(v);
        }
    }
    out
}

/// ∫ v over the grid for a quantity sampled per quadrature point.
pub fn integrate(grid: &Grid, quad: &ElementQuadrature, v: &[f64]) -> f64 {
    let nq = quad.len();
    let vol = grid.element_volume();
    let per_elem: Vec<f64> = v
        .chunks(nq)
        .map(|c| c.iter().zip(&quad.weights).map(|(v, w)| v * w).sum::<f64>() * vol)
        .collect();
    crate::stats::pairwise_sum(&per_elem)
}

/// Average over the grid volume.
pub fn average(grid: &Grid, quad: &ElementQuadrature, v: &[f64]) -> f64 {
    integrate(grid, quad, v) / grid.volume()
}

/// Homogeneous Dirichlet conditions: identity rows/columns on boundary nodes.
pub fn apply_dirichlet(grid: &Grid, k: &mut CsrMatrix, rhs: &mut [f64]) {
    for i in grid.boundary_nodes() {
        k.pin(i);
        rhs[i] = 0.0;
    }
}

pub fn l2_norm(grid: &Grid, quad: &ElementQuadrature, u: &[f64]) -> f64 {
    let v: Vec<f64> = values(grid, quad, u).iter().map(|x| x * x).collect();
    integrate(grid, quad, &v).sqrt()
}

pub fn h1_seminorm(grid: &Grid, quad: &ElementQuadrature, u: &[f64]) -> f64 {
    let v: Vec<f64> = gradients(grid, quad, u)
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum())
        .collect();
    integrate(grid, quad, &v).sqrt()
}

/// Smallest Poincaré constant bound for a box: ‖u‖ ≤ C_P ‖Du‖ on H¹₀.
pub fn poincare_constant(grid: &Grid) -> f64 {
    let s: f64 = grid.lengths[..grid.dim].iter().map(|l| 1.0 / (l * l)).sum();
    1.0 / (std::f64::consts::PI * s.sqrt())
}
