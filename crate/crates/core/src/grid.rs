//! Uniform tensor-product grids and the Q1 reference element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

/// Axis-aligned box split into `cells[a]` equal elements per axis.
///
/// Periodic grids have `cells[a]` nodes per axis (the last node wraps onto the
/// first); Dirichlet grids have `cells[a] + 1`. Nodes are numbered row-major with
/// axis 0 slowest. Axes beyond `dim` are padded with a single cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub cells: [usize; 3],
    pub origin: [f64; 3],
    pub lengths: [f64; 3],
    pub boundary: Boundary,
}

impl Grid {
    pub fn new(
        dim: usize,
        cells: &[usize],
        origin: &[f64],
        lengths: &[f64],
        boundary: Boundary,
    ) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Parameter(format!(
                "grid dimension {dim} not in 1..=3"
            )));
        }
        for (name, len) in [
            ("cells", cells.len()),
            ("origin", origin.len()),
            ("lengths", lengths.len()),
        ] {
            if len != dim {
                return Err(Error::Parameter(format!(
                    "grid {name} has {len} entries, expected {dim}"
                )));
            }
        }
        let min_cells = if boundary == Boundary::Periodic { 4 } else { 1 };
        let mut g = Grid {
            dim,
            cells: [1; 3],
            origin: [0.0; 3],
            lengths: [1.0; 3],
            boundary,
        };
        for a in 0..dim {
            if cells[a] < min_cells {
                return Err(Error::Parameter(format!(
                    "grid needs at least {min_cells} cells per axis, got {}",
                    cells[a]
                )));
            }
            if !(lengths[a] > 0.0) || !lengths[a].is_finite() {
                return Err(Error::Parameter(format!(
                    "grid length {} must be positive",
                    lengths[a]
                )));
            }
            g.cells[a] = cells[a];
            g.origin[a] = origin[a];
            g.lengths[a] = lengths[a];
        }
        Ok(g)
    }

    /// Periodic cube [0, length)^dim with `n` cells per axis.
    pub fn periodic_cube(dim: usize, n: usize, length: f64) -> Result<Self> {
        Self::new(
            dim,
            &vec![n; dim],
            &vec![0.0; dim],
            &vec![length; dim],
            Boundary::Periodic,
        )
    }

    /// Dirichlet unit-aligned box.
    pub fn dirichlet_box(dim: usize, n: usize, origin: &[f64], lengths: &[f64]) -> Result<Self> {
        Self::new(dim, &vec![n; dim], origin, lengths, Boundary::Dirichlet)
    }

    #[inline]
    pub fn nodes_per_axis(&self, a: usize) -> usize {
        if a >= self.dim {
            1
        } else if self.boundary == Boundary::Periodic {
            self.cells[a]
        } else {
            self.cells[a] + 1
        }
    }

    pub fn num_nodes(&self) -> usize {
        (0..3).map(|a| self.nodes_per_axis(a)).product()
    }

    pub fn num_elements(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn corners(&self) -> usize {
        1 << self.dim
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        let mut h = [1.0; 3];
        for a in 0..self.dim {
            h[a] = self.lengths[a] / self.cells[a] as f64;
        }
        h
    }

    pub fn max_spacing(&self) -> f64 {
        let h = self.spacing();
        h[..self.dim].iter().fold(0.0, |m, v| m.max(*v))
    }

    pub fn element_volume(&self) -> f64 {
        self.spacing()[..self.dim].iter().product()
    }

    pub fn volume(&self) -> f64 {
        self.lengths[..self.dim].iter().product()
    }

    #[inline]
    pub fn node_index(&self, m: [usize; 3]) -> usize {
        (m[0] * self.nodes_per_axis(1) + m[1]) * self.nodes_per_axis(2) + m[2]
    }

    #[inline]
    pub fn node_multi(&self, idx: usize) -> [usize; 3] {
        let n1 = self.nodes_per_axis(1);
        let n2 = self.nodes_per_axis(2);
        [idx / (n1 * n2), (idx / n2) % n1, idx % n2]
    }

    pub fn node_coords(&self, idx: usize) -> [f64; 3] {
        let m = self.node_multi(idx);
        let h = self.spacing();
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.origin[a] + m[a] as f64 * h[a];
        }
        x
    }

    #[inline]
    pub fn element_multi(&self, e: usize) -> [usize; 3] {
        let c1 = self.cells[1];
        let c2 = self.cells[2];
        [e / (c1 * c2), (e / c2) % c1, e % c2]
    }

    pub fn element_origin(&self, e: usize) -> [f64; 3] {
        let m = self.element_multi(e);
        let h = self.spacing();
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.origin[a] + m[a] as f64 * h[a];
        }
        x
    }

    pub fn element_center(&self, e: usize) -> [f64; 3] {
        let mut x = self.element_origin(e);
        let h = self.spacing();
        for a in 0..self.dim {
            x[a] += 0.5 * h[a];
        }
        x
    }

    /// Global node numbers of the element corners; corner `c` has bit `a` set when
    /// it sits on the upper face along axis `a`.
    #[inline]
    pub fn element_nodes(&self, e: usize) -> [usize; 8] {
        let m = self.element_multi(e);
        let mut out = [0usize; 8];
        for (c, slot) in out.iter_mut().enumerate().take(self.corners()) {
            let mut nm = [0usize; 3];
            for a in 0..self.dim {
                let bit = (c >> a) & 1;
                let k = m[a] + bit;
                nm[a] = if self.boundary == Boundary::Periodic {
                    k % self.cells[a]
                } else {
                    k
                };
            }
            *slot = self.node_index(nm);
        }
        out
    }

    pub fn is_boundary_node(&self, idx: usize) -> bool {
        if self.boundary == Boundary::Periodic {
            return false;
        }
        let m = self.node_multi(idx);
        (0..self.dim).any(|a| m[a] == 0 || m[a] == self.cells[a])
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| self.is_boundary_node(i))
            .collect()
    }

    /// Node neighbourhoods (the 3^dim stencil), used as the sparsity pattern.
    pub fn stencil(&self) -> Vec<Vec<usize>> {
        let n = self.num_nodes();
        let mut rows = Vec::with_capacity(n);
        let offsets: Vec<[i64; 3]> = (0..3usize.pow(self.dim as u32))
            .map(|k| {
                let mut o = [0i64; 3];
                let mut r = k;
                for slot in o.iter_mut().take(self.dim) {
                    *slot = (r % 3) as i64 - 1;
                    r /= 3;
                }
                o
            })
            .collect();
        for idx in 0..n {
            let m = self.node_multi(idx);
            let mut row = Vec::with_capacity(offsets.len());
            'off: for o in &offsets {
                let mut nm = [0usize; 3];
                for a in 0..self.dim {
                    let na = self.nodes_per_axis(a) as i64;
                    let mut k = m[a] as i64 + o[a];
                    if self.boundary == Boundary::Periodic {
                        k = k.rem_euclid(na);
                    } else if k < 0 || k >= na {
                        continue 'off;
                    }
                    nm[a] = k as usize;
                }
                row.push(self.node_index(nm));
            }
            rows.push(row);
        }
        rows
    }

    /// Multilinear interpolation of a nodal scalar field.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let h = self.spacing();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..self.dim {
            let mut t = (x[a] - self.origin[a]) / h[a];
            if self.boundary == Boundary::Periodic {
                t = t.rem_euclid(self.cells[a] as f64);
                let k = (t.floor() as usize).min(self.cells[a] - 1);
                base[a] = k;
                frac[a] = t - k as f64;
            } else {
                t = t.clamp(0.0, self.cells[a] as f64);
                let k = (t.floor() as usize).min(self.cells[a] - 1);
                base[a] = k;
                frac[a] = t - k as f64;
            }
        }
        let mut v = 0.0;
        for c in 0..self.corners() {
            let mut w = 1.0;
            let mut nm = [0usize; 3];
            for a in 0..self.dim {
                let bit = (c >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                let k = base[a] + bit;
                nm[a] = if self.boundary == Boundary::Periodic {
                    k % self.cells[a]
                } else {
                    k
                };
            }
            v += w * values[self.node_index(nm)];
        }
        v
    }

    /// Same geometry with `factor`-times more cells per axis.
    pub fn refined(&self, factor: usize) -> Self {
        let mut g = self.clone();
        for a in 0..self.dim {
            g.cells[a] *= factor;
        }
        g
    }
}

/// Gauss–Legendre nodes and weights on [0, 1].
pub fn gauss_legendre_unit(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (x, w): (Vec<f64>, Vec<f64>) = match order {
        1 => (vec![0.0], vec![2.0]),
        2 => {
            let a = 1.0 / 3f64.sqrt();
            (vec![-a, a], vec![1.0, 1.0])
        }
        3 => {
            let a = (3.0f64 / 5.0).sqrt();
            (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
        }
        4 => {
            let a = (3.0 / 7.0 - 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
            let b = (3.0 / 7.0 + 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
            let wa = (18.0 + 30f64.sqrt()) / 36.0;
            let wb = (18.0 - 30f64.sqrt()) / 36.0;
            (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
        }
        5 => {
            let a = (5.0 - 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0;
            let b = (5.0 + 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0;
            let w0 = 128.0 / 225.0;
            let wa = (322.0 + 13.0 * 70f64.sqrt()) / 900.0;
            let wb = (322.0 - 13.0 * 70f64.sqrt()) / 900.0;
            (vec![-b, -a, 0.0, a, b], vec![wb, wa, w0, wa, wb])
        }
        _ => {
            return Err(Error::Parameter(format!(
                "Gauss order {order} not supported (1..=5)"
            )))
        }
    };
    Ok((
        x.iter().map(|t| 0.5 * (t + 1.0)).collect(),
        w.iter().map(|w| 0.5 * w).collect(),
    ))
}

/// Tensor Gauss rule on the reference Q1 element with tabulated basis data.
#[derive(Clone, Debug)]
pub struct ElementQuadrature {
    pub dim: usize,
    pub order: usize,
    /// Reference coordinates in [0,1]^dim.
    pub points: Vec<[f64; 3]>,
    /// Weights summing to one.
    pub weights: Vec<f64>,
    /// Shape function values φ_c(ξ_q).
    pub shape: Vec<[f64; 8]>,
    /// Reference gradients ∂φ_c/∂ξ_a at ξ_q.
    pub grad_ref: Vec<[[f64; 3]; 8]>,
}

impl ElementQuadrature {
    pub fn gauss(dim: usize, order: usize) -> Result<Self> {
        let (x1, w1) = gauss_legendre_unit(order)?;
        let nq = order.pow(dim as u32);
        let corners = 1usize << dim;
        let mut points = Vec::with_capacity(nq);
        let mut weights = Vec::with_capacity(nq);
        let mut shape = Vec::with_capacity(nq);
        let mut grad_ref = Vec::with_capacity(nq);
        for k in 0..nq {
            let mut p = [0.0; 3];
            let mut w = 1.0;
            let mut r = k;
            for slot in p.iter_mut().take(dim) {
                let i = r % order;
                r /= order;
                *slot = x1[i];
                w *= w1[i];
            }
            let mut phi = [0.0; 8];
            let mut grad = [[0.0; 3]; 8];
            for c in 0..corners {
                let mut v = 1.0;
                for (a, pa) in p.iter().enumerate().take(dim) {
                    v *= if (c >> a) & 1 == 1 { *pa } else { 1.0 - pa };
                }
                phi[c] = v;
                for a in 0..dim {
                    let mut g = if (c >> a) & 1 == 1 { 1.0 } else { -1.0 };
                    for (b, pb) in p.iter().enumerate().take(dim) {
                        if b != a {
                            g *= if (c >> b) & 1 == 1 { *pb } else { 1.0 - pb };
                        }
                    }
                    grad[c][a] = g;
                }
            }
            points.push(p);
            weights.push(w);
            shape.push(phi);
            grad_ref.push(grad);
        }
        Ok(Self {
            dim,
            order,
            points,
            weights,
            shape,
            grad_ref,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_polynomials_exactly() {
        for order in 1..=5 {
            let (x, w) = gauss_legendre_unit(order).unwrap();
            for deg in 0..(2 * order) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                assert!(
                    (q - 1.0 / (deg as f64 + 1.0)).abs() < 1e-14,
                    "order {order} deg {deg}"
                );
            }
        }
    }

    #[test]
    fn shape_functions_partition_unity() {
        let q = ElementQuadrature::gauss(3, 2).unwrap();
        for k in 0..q.len() {
            let s: f64 = q.shape[k].iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            for a in 0..3 {
                let g: f64 = q.grad_ref[k].iter().map(|g| g[a]).sum();
                assert!(g.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn periodic_element_nodes_wrap() {
        let g = Grid::periodic_cube(2, 4, 1.0).unwrap();
        assert_eq!(g.num_nodes(), 16);
        let last = g.num_elements() - 1;
        let nodes = g.element_nodes(last);
        assert_eq!(nodes[0], g.node_index([3, 3, 0]));
        assert_eq!(nodes[3], g.node_index([0, 0, 0]));
    }

    #[test]
    fn stencil_sizes() {
        let g = Grid::periodic_cube(2, 5, 1.0).unwrap();
        assert!(g.stencil().iter().all(|r| r.len() == 9));
        let d = Grid::dirichlet_box(2, 4, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(d.stencil()[0].len(), 4);
        assert_eq!(d.boundary_nodes().len(), 16);
    }

    #[test]
    fn interpolation_reproduces_linear_functions() {
        let g = Grid::dirichlet_box(2, 8, &[0.0, 0.0], &[2.0, 1.0]).unwrap();
        let vals: Vec<f64> = (0..g.num_nodes())
            .map(|i| {
                let x = g.node_coords(i);
                1.0 + 2.0 * x[0] - x[1]
            })
            .collect();
        let v = g.interpolate(&vals, &[0.37, 0.81]);
        assert!((v - (1.0 + 0.74 - 0.81)).abs() < 1e-13);
    }
}
