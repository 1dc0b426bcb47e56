//! Coefficient data a(x, ω, y), nonlinear fluxes, Coriolis and right-hand-side fields.
//!
//! Every scalar coefficient is a finite sum of products
//! `scale · X(x) · f_k(ω) · Y(y)` where `X`, `Y` are [`Profile`]s and `f_k` is
//! one of the model's stationary fields. The ω-factor is always evaluated along
//! a realization, so callers pass the vector of field values at the current
//! point of the orbit (see [`CoefficientModel::omega_values`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynsys::{DynamicalSystem, FieldRule, OmegaSample, StationaryField, SystemKind};
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::profile::Profile;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarTerm {
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Profile>,
    /// Index into [`CoefficientModel::fields`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Profile>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ScalarCoef {
    pub terms: Vec<ScalarTerm>,
}

impl ScalarCoef {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: vec![ScalarTerm {
                scale: c,
                x: None,
                field: None,
                y: None,
            }],
        }
    }

    pub fn of_y(p: Profile) -> Self {
        Self {
            terms: vec![ScalarTerm {
                scale: 1.0,
                x: None,
                field: None,
                y: Some(p),
            }],
        }
    }

    pub fn of_x(p: Profile) -> Self {
        Self {
            terms: vec![ScalarTerm {
                scale: 1.0,
                x: Some(p),
                field: None,
                y: None,
            }],
        }
    }

    /// `f_k(ω) · Y(y)`.
    pub fn field_times(field: usize, y: Option<Profile>) -> Self {
        Self {
            terms: vec![ScalarTerm {
                scale: 1.0,
                x: None,
                field: Some(field),
                y,
            }],
        }
    }

    pub fn plus(mut self, other: ScalarCoef) -> Self {
        self.terms.extend(other.terms);
        self
    }

    #[inline]
    pub fn eval(&self, x: &[f64], w: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for t in &self.terms {
            let mut v = t.scale;
            if let Some(p) = &t.x {
                v *= p.eval(x);
            }
            if let Some(k) = t.field {
                v *= w[k];
            }
            if let Some(p) = &t.y {
                v *= p.eval(y);
            }
            s += v;
        }
        s
    }

    fn fields(&self) -> impl Iterator<Item = usize> + '_ {
        self.terms.iter().filter_map(|t| t.field)
    }

    fn x_profiles(&self) -> impl Iterator<Item = &Profile> {
        self.terms.iter().filter_map(|t| t.x.as_ref())
    }

    fn y_profiles(&self) -> impl Iterator<Item = &Profile> {
        self.terms.iter().filter_map(|t| t.y.as_ref())
    }

    pub fn depends_on_y(&self) -> bool {
        self.y_profiles().any(|p| !p.is_constant())
    }
}

/// Linear diffusion tensor a_ij(x, ω, y).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TensorCoef {
    Isotropic { value: ScalarCoef },
    Diagonal { entries: Vec<ScalarCoef> },
    Full { entries: Vec<Vec<ScalarCoef>> },
}

impl TensorCoef {
    pub fn isotropic(value: ScalarCoef) -> Self {
        TensorCoef::Isotropic { value }
    }

    fn scalars(&self) -> Vec<&ScalarCoef> {
        match self {
            TensorCoef::Isotropic { value } => vec![value],
            TensorCoef::Diagonal { entries } => entries.iter().collect(),
            TensorCoef::Full { entries } => entries.iter().flatten().collect(),
        }
    }

    #[inline]
    pub fn eval(&self, dim: usize, x: &[f64], w: &[f64], y: &[f64]) -> Tensor {
        match self {
            TensorCoef::Isotropic { value } => Tensor::scalar(dim, value.eval(x, w, y)),
            TensorCoef::Diagonal { entries } => {
                let mut t = Tensor::zeros(dim);
                for (i, e) in entries.iter().enumerate() {
                    t.set(i, i, e.eval(x, w, y));
                }
                t
            }
            TensorCoef::Full { entries } => {
                let mut t = Tensor::zeros(dim);
                for (i, row) in entries.iter().enumerate() {
                    for (j, e) in row.iter().enumerate() {
                        t.set(i, j, e.eval(x, w, y));
                    }
                }
                t
            }
        }
    }

    /// The isotropic scalar when the tensor is scalar-valued.
    pub fn as_scalar(&self) -> Option<&ScalarCoef> {
        match self {
            TensorCoef::Isotropic { value } => Some(value),
            _ => None,
        }
    }
}

/// Power-law flux `a(x, ω, y, λ) = c(x, ω, y) (δ² + |λ|²)^{(p−2)/2} λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearFlux {
    pub coefficient: ScalarCoef,
    pub exponent: f64,
    #[serde(default)]
    pub regularization: f64,
}

impl NonlinearFlux {
    /// Scalar weight multiplying λ for a coefficient value `c`.
    #[inline]
    pub fn weight(&self, c: f64, lambda: &[f64; 3]) -> f64 {
        if self.exponent == 2.0 {
            return c;
        }
        let n2 =
            lambda.iter().map(|v| v * v).sum::<f64>() + self.regularization * self.regularization;
        if n2 == 0.0 {
            return if self.exponent > 2.0 { 0.0 } else { c * 1e150 };
        }
        c * n2.powf(0.5 * (self.exponent - 2.0))
    }

    #[inline]
    pub fn eval(&self, c: f64, lambda: &[f64; 3]) -> [f64; 3] {
        let w = self.weight(c, lambda);
        [w * lambda[0], w * lambda[1], w * lambda[2]]
    }
}

/// Constants of the monotone problem estimated on probes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneConstants {
    pub p: f64,
    /// Coercivity: a(λ)·λ ≥ c0 |λ|^p.
    pub c0: f64,
    /// Growth: |a(λ)| ≤ c1 (1 + |λ|^{p−1}).
    pub c1: f64,
    /// Smallest observed (a(λ)−a(λ'))·(λ−λ') / |λ−λ'|^max(p,2).
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    Constant,
    Periodic,
    QuasiPeriodic,
    Random,
    /// Non-oscillatory macroscopic variation (x only).
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureTags {
    pub x: Structure,
    pub omega: Structure,
    pub y: Structure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    pub alpha: f64,
    pub beta: f64,
    pub monotone: Option<MonotoneConstants>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientModel {
    pub dim: usize,
    pub system: DynamicalSystem,
    #[serde(default)]
    pub fields: Vec<StationaryField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<TensorCoef>,
    #[serde(default = "yes")]
    pub symmetric: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flux: Option<NonlinearFlux>,
    /// h(ω, y), always three components; the planar reduction uses the third.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coriolis: Option<Vec<ScalarCoef>>,
    /// b(x, ω, y), one component per axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhs_b: Option<Vec<ScalarCoef>>,
}

fn yes() -> bool {
    true
}

const PROBES: usize = 1000;

impl CoefficientModel {
    /// Linear model with the given tensor and no ω-fields.
    pub fn linear(system: DynamicalSystem, tensor: TensorCoef) -> Self {
        Self {
            dim: system.dim,
            system: system.normalized(),
            fields: Vec::new(),
            tensor: Some(tensor),
            symmetric: true,
            flux: None,
            coriolis: None,
            rhs_b: None,
        }
    }

    pub fn with_fields(mut self, fields: Vec<StationaryField>) -> Self {
        self.fields = fields;
        self
    }

    pub fn with_flux(mut self, flux: NonlinearFlux) -> Self {
        self.flux = Some(flux);
        self
    }

    pub fn with_coriolis(mut self, h: Vec<ScalarCoef>) -> Self {
        self.coriolis = Some(h);
        self
    }

    pub fn with_rhs_b(mut self, b: Vec<ScalarCoef>) -> Self {
        self.rhs_b = Some(b);
        self
    }

    fn all_scalars(&self) -> Vec<&ScalarCoef> {
        let mut v: Vec<&ScalarCoef> = Vec::new();
        if let Some(t) = &self.tensor {
            v.extend(t.scalars());
        }
        if let Some(f) = &self.flux {
            v.push(&f.coefficient);
        }
        if let Some(h) = &self.coriolis {
            v.extend(h.iter());
        }
        if let Some(b) = &self.rhs_b {
            v.extend(b.iter());
        }
        v
    }

    /// Field values f_k(T(z)ω) for every model field.
    #[inline]
    pub fn omega_values(&self, omega: &OmegaSample, z: &[f64]) -> Vec<f64> {
        self.fields
            .iter()
            .map(|f| self.system.realize_unchecked(f, omega, &z[..self.dim]))
            .collect()
    }

    #[inline]
    pub fn tensor_at(&self, x: &[f64], w: &[f64], y: &[f64]) -> Tensor {
        match &self.tensor {
            Some(t) => t.eval(self.dim, x, w, y),
            None => Tensor::identity(self.dim),
        }
    }

    #[inline]
    pub fn flux_coefficient(&self, x: &[f64], w: &[f64], y: &[f64]) -> f64 {
        self.flux
            .as_ref()
            .map_or(1.0, |f| f.coefficient.eval(x, w, y))
    }

    #[inline]
    pub fn rhs_b_at(&self, x: &[f64], w: &[f64], y: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        if let Some(b) = &self.rhs_b {
            for (a, c) in b.iter().enumerate().take(3) {
                out[a] = c.eval(x, w, y);
            }
        }
        out
    }

    #[inline]
    pub fn coriolis_at(&self, x: &[f64], w: &[f64], y: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        if let Some(h) = &self.coriolis {
            for (a, c) in h.iter().enumerate().take(3) {
                out[a] = c.eval(x, w, y);
            }
        }
        out
    }

    /// Checks shapes and field references; does not probe values.
    pub fn check_shapes(&self) -> Result<()> {
        if self.system.dim != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: self.system.dim,
            });
        }
        self.system.validate()?;
        for f in &self.fields {
            let ok = matches!(
                (&f.rule, &self.system.kind),
                (FieldRule::Constant { .. }, _)
                    | (FieldRule::Lattice { .. }, SystemKind::Checkerboard { .. })
                    | (FieldRule::PhaseSum, SystemKind::RandomPhaseTrig { .. })
                    | (FieldRule::Torus { .. }, SystemKind::PeriodicShift)
                    | (
                        FieldRule::Torus { .. },
                        SystemKind::QuasiPeriodicShift { .. }
                    )
                    | (FieldRule::Torus { .. }, SystemKind::RandomPhaseTrig { .. })
            );
            if !ok {
                return Err(Error::Parameter(format!(
                    "field rule {:?} does not apply to the model's system",
                    f.rule
                )));
            }
        }
        for s in self.all_scalars() {
            for k in s.fields() {
                if k >= self.fields.len() {
                    return Err(Error::Parameter(format!(
                        "coefficient refers to field {k}, model has {}",
                        self.fields.len()
                    )));
                }
            }
        }
        match &self.tensor {
            Some(TensorCoef::Diagonal { entries }) if entries.len() != self.dim => {
                return Err(Error::Shape {
                    expected: self.dim,
                    got: entries.len(),
                })
            }
            Some(TensorCoef::Full { entries }) => {
                if entries.len() != self.dim || entries.iter().any(|r| r.len() != self.dim) {
                    return Err(Error::Shape {
                        expected: self.dim,
                        got: entries.len(),
                    });
                }
            }
            _ => {}
        }
        if let Some(f) = &self.flux {
            if !(f.exponent > 1.0) || !f.exponent.is_finite() {
                return Err(Error::Parameter(format!(
                    "flux exponent {} not in (1, ∞)",
                    f.exponent
                )));
            }
            if f.exponent < 2.0 && !(f.regularization > 0.0) {
                return Err(Error::Parameter(
                    "flux exponent below 2 needs a positive regularization".into(),
                ));
            }
        }
        if let Some(h) = &self.coriolis {
            if h.len() != 3 {
                return Err(Error::Shape {
                    expected: 3,
                    got: h.len(),
                });
            }
        }
        if let Some(b) = &self.rhs_b {
            if b.len() != self.dim {
                return Err(Error::Shape {
                    expected: self.dim,
                    got: b.len(),
                });
            }
        }
        Ok(())
    }

    /// Probes ellipticity, symmetry, monotonicity and growth at random points of
    /// `domain × Ω × [0,1)^N`.
    pub fn validate(&self, seed: u64, domain: Option<(&[f64], &[f64])>) -> Result<ModelBounds> {
        self.check_shapes()?;
        let mut r = rng::rng(rng::derive_seed(seed, rng::Stream::Probe, 0));
        let n = self.dim;
        let omegas = self
            .system
            .sample_many(rng::derive_seed(seed, rng::Stream::Probe, 1), 16)?;
        let point = |r: &mut rand_chacha::ChaCha8Rng,
                     lo: Option<&[f64]>,
                     len: Option<&[f64]>|
         -> Vec<f64> {
            (0..n)
                .map(|a| {
                    let (o, l) = (lo.map_or(0.0, |v| v[a]), len.map_or(1.0, |v| v[a]));
                    o + l * r.random::<f64>()
                })
                .collect()
        };
        let (lo, len) = match domain {
            Some((o, l)) => (Some(o), Some(l)),
            None => (None, None),
        };
        let mut alpha = f64::INFINITY;
        let mut beta: f64 = 0.0;
        let mut mono: Option<MonotoneConstants> = None;
        for i in 0..PROBES {
            let x = point(&mut r, lo, len);
            let z = point(&mut r, None, Some(&vec![50.0; n]));
            let y = point(&mut r, None, None);
            let w = self.omega_values(&omegas[i % omegas.len()], &z);
            let loc = || format!("x={x:?} y={y:?}");
            if let Some(tc) = &self.tensor {
                let t = tc.eval(n, &x, &w, &y);
                if !t.is_finite() {
                    return Err(Error::Overflow(format!("tensor at {}", loc())));
                }
                if self.symmetric && t.asymmetry() > 1e-12 * (1.0 + t.max_abs()) {
                    return Err(Error::Parameter(format!(
                        "tensor flagged symmetric is not at {}",
                        loc()
                    )));
                }
                // Rayleigh quotient of the symmetric part.
                let sym = t.add(&t.transpose()).scale(0.5);
                let eig = sym.sym_eigenvalues();
                if !(eig[0] > 0.0) {
                    return Err(Error::Ellipticity {
                        min_eig: eig[0],
                        location: loc(),
                    });
                }
                alpha = alpha.min(eig[0]);
                beta = beta.max(eig[n - 1]).max(t.max_abs());
            }
            if let Some(f) = &self.flux {
                let c = f.coefficient.eval(&x, &w, &y);
                if !c.is_finite() {
                    return Err(Error::Overflow(format!("flux coefficient at {}", loc())));
                }
                if !(c > 0.0) {
                    return Err(Error::Monotonicity(format!(
                        "flux coefficient {c} is not positive at {}",
                        loc()
                    )));
                }
                let mut l1 = [0.0; 3];
                let mut l2 = [0.0; 3];
                for a in 0..n {
                    l1[a] = r.random_range(-3.0..3.0);
                    l2[a] = r.random_range(-3.0..3.0);
                }
                let a1 = f.eval(c, &l1);
                let a2 = f.eval(c, &l2);
                let dot: f64 = (0..n).map(|a| (a1[a] - a2[a]) * (l1[a] - l2[a])).sum();
                let dist: f64 = (0..n).map(|a| (l1[a] - l2[a]).powi(2)).sum::<f64>().sqrt();
                if dot < -1e-12 * (1.0 + dist) {
                    return Err(Error::Monotonicity(format!(
                        "(a(λ)−a(λ'))·(λ−λ') = {dot:.3e} < 0 at {}",
                        loc()
                    )));
                }
                let n1: f64 = (0..n).map(|a| l1[a] * l1[a]).sum::<f64>().sqrt();
                let an: f64 = (0..n).map(|a| a1[a] * a1[a]).sum::<f64>().sqrt();
                let coerc: f64 = (0..n).map(|a| a1[a] * l1[a]).sum::<f64>();
                let p = f.exponent;
                let m = mono.get_or_insert(MonotoneConstants {
                    p,
                    c0: f64::INFINITY,
                    c1: 0.0,
                    alpha: f64::INFINITY,
                });
                if n1 > 1e-3 {
                    m.c0 = m.c0.min(coerc / n1.powf(p));
                }
                m.c1 = m.c1.max(an / (1.0 + n1.powf(p - 1.0)));
                if dist > 1e-3 {
                    m.alpha = m.alpha.min(dot / dist.powf(p.max(2.0)));
                }
            }
        }
        if self.tensor.is_none() {
            alpha = 1.0;
            beta = 1.0;
        }
        Ok(ModelBounds {
            alpha,
            beta,
            monotone: mono,
        })
    }

    fn classify_profiles<'a>(profiles: impl Iterator<Item = &'a Profile>) -> Structure {
        let mut s = Structure::Constant;
        for p in profiles {
            if p.is_constant() {
                continue;
            }
            let t = if !p.monomials.iter().all(|m| m.powers.iter().all(|e| *e == 0)) {
                Structure::General
            } else if p.is_periodic() {
                Structure::Periodic
            } else {
                Structure::QuasiPeriodic
            };
            s = match (s, t) {
                (Structure::General, _) | (_, Structure::General) => Structure::General,
                (Structure::QuasiPeriodic, _) | (_, Structure::QuasiPeriodic) => {
                    Structure::QuasiPeriodic
                }
                _ => Structure::Periodic,
            };
        }
        s
    }

    /// Kind of dependence of the model data on each variable.
    pub fn structure(&self) -> StructureTags {
        let scalars = self.all_scalars();
        let x = Self::classify_profiles(scalars.iter().flat_map(|s| s.x_profiles()));
        let y = Self::classify_profiles(scalars.iter().flat_map(|s| s.y_profiles()));
        let uses_random = scalars.iter().flat_map(|s| s.fields()).any(|k| {
            !matches!(self.fields[k].rule, FieldRule::Constant { .. })
                && !matches!(&self.fields[k].rule, FieldRule::Torus { profile } if profile.is_constant())
        });
        let omega = if !uses_random {
            Structure::Constant
        } else {
            match self.system.kind {
                SystemKind::PeriodicShift => Structure::Periodic,
                SystemKind::QuasiPeriodicShift { .. } => Structure::QuasiPeriodic,
                _ => Structure::Random,
            }
        };
        StructureTags { x, omega, y }
    }

    /// Shortest oscillation wavelength of the y-profiles.
    pub fn min_y_wavelength(&self) -> f64 {
        self.all_scalars()
            .iter()
            .flat_map(|s| s.y_profiles())
            .map(|p| p.min_wavelength())
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::ValueDistribution;

    fn osc() -> Profile {
        Profile::sine(2.0, 1.0, &[1.0])
    }

    #[test]
    fn evaluates_sum_of_products() {
        let sys =
            DynamicalSystem::checkerboard(1, 1.0, ValueDistribution::two_valued(1.0, 2.0)).unwrap();
        let m = CoefficientModel::linear(
            sys,
            TensorCoef::isotropic(ScalarCoef::field_times(0, Some(osc()))),
        )
        .with_fields(vec![StationaryField::lattice()]);
        let t = m.tensor_at(&[0.3], &[2.0], &[0.25]);
        assert!((t.get(0, 0) - 6.0).abs() < 1e-14);
        let tags = m.structure();
        assert_eq!(tags.omega, Structure::Random);
        assert_eq!(tags.y, Structure::Periodic);
        assert_eq!(tags.x, Structure::Constant);
    }

    #[test]
    fn validation_reports_bounds() {
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(1),
            TensorCoef::isotropic(ScalarCoef::of_y(osc())),
        );
        let b = m.validate(1, None).unwrap();
        assert!(b.alpha >= 1.0 && b.alpha < 1.1);
        assert!(b.beta <= 3.0 && b.beta > 2.9);
    }

    #[test]
    fn non_elliptic_tensor_is_rejected() {
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(1),
            TensorCoef::isotropic(ScalarCoef::of_y(Profile::sine(0.5, 1.0, &[1.0]))),
        );
        assert!(matches!(
            m.validate(1, None),
            Err(Error::Ellipticity { .. })
        ));
    }

    #[test]
    fn bad_field_reference_is_rejected() {
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(1),
            TensorCoef::isotropic(ScalarCoef::field_times(3, None)),
        );
        assert!(m.check_shapes().is_err());
    }

    #[test]
    fn power_flux_is_monotone() {
        let m = CoefficientModel::linear(
            DynamicalSystem::periodic(2),
            TensorCoef::isotropic(ScalarCoef::constant(1.0)),
        )
        .with_flux(NonlinearFlux {
            coefficient: ScalarCoef::of_y(Profile::sine(2.0, 1.0, &[1.0, 0.0])),
            exponent: 3.0,
            regularization: 0.0,
        });
        let b = m.validate(3, None).unwrap();
        let mc = b.monotone.unwrap();
        assert!(mc.c0 >= 1.0 - 1e-12 && mc.alpha > 0.0 && mc.c1 <= 3.0 + 1e-12);
    }

    #[test]
    fn toml_model() {
        let m: CoefficientModel = toml::from_str(
            r#"
            dim = 1
            system = { dim = 1, kind = "periodic-shift" }
            [tensor]
            type = "isotropic"
            [[tensor.value.terms]]
            y = { constant = 2.0, terms = [{ amplitude = 1.0, k = [1.0] }] }
            "#,
        )
        .unwrap();
        assert_eq!(
            m,
            CoefficientModel::linear(
                DynamicalSystem::periodic(1),
                TensorCoef::isotropic(ScalarCoef::of_y(osc()))
            )
        );
    }
}
