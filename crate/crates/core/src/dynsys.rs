//! Samplable N-dimensional dynamical systems and their stationary fields.
//!
//! The probability space Ω is never stored. Each built-in system is described by
//! its parameters, and a point ω ∈ Ω is an [`OmegaSample`] that can be rebuilt
//! from `(system, seed)`. The shift `T(x)` acts additively on the sample state:
//!
//! | kind                  | ω state                         | T(x)ω                                  |
//! |-----------------------|---------------------------------|----------------------------------------|
//! | periodic shift        | θ ∈ [0,1)^N                     | θ + x mod 1                            |
//! | quasi-periodic shift  | θ ∈ [0,1)^M                     | θ_m + ν_m x_{m mod N} mod 1            |
//! | checkerboard          | lattice cell k ∈ Z^N, offset u  | carry of u + x/cell into k             |
//! | random-phase trig     | phases φ ∈ [0,1)^K              | φ_j + k_j·x mod 1                      |
//!
//! All four are measure preserving for the uniform/product measures drawn by
//! [`DynamicalSystem::sample_omega`], and ergodic under the parameter checks done
//! in [`DynamicalSystem::validate`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::Profile;
use crate::rng;

/// Marginal law of a checkerboard cell value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ValueDistribution {
    Discrete { values: Vec<f64>, probs: Vec<f64> },
    Uniform { low: f64, high: f64 },
}

impl ValueDistribution {
    pub fn two_valued(a: f64, b: f64) -> Self {
        ValueDistribution::Discrete {
            values: vec![a, b],
            probs: vec![0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ValueDistribution::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::Parameter(
                        "discrete distribution needs matching non-empty values/probs".into(),
                    ));
                }
                if probs.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::Parameter("negative probability".into()));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Parameter(format!("probabilities sum to {s}, not 1")));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parameter("non-finite distribution value".into()));
                }
            }
            ValueDistribution::Uniform { low, high } => {
                if !(low.is_finite() && high.is_finite() && low <= high) {
                    return Err(Error::Parameter(format!(
                        "bad uniform range [{low}, {high}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Inverse-CDF transform of a uniform variate.
    #[inline]
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            ValueDistribution::Discrete { values, probs } => {
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().unwrap()
            }
            ValueDistribution::Uniform { low, high } => low + (high - low) * u,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ValueDistribution::Discrete { values, probs } => {
                values.iter().zip(probs).map(|(v, p)| v * p).sum()
            }
            ValueDistribution::Uniform { low, high } => 0.5 * (low + high),
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match self {
            ValueDistribution::Discrete { values, .. } => {
                values.iter().fold(0.0, |m, v| m.max(v.abs()))
            }
            ValueDistribution::Uniform { low, high } => low.abs().max(high.abs()),
        }
    }
}

/// One Fourier mode of a random-phase field: `amplitude · cos(2π(k·x + φ))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMode {
    pub amplitude: f64,
    #[serde(rename = "k")]
    pub wavevector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemKind {
    PeriodicShift,
    QuasiPeriodicShift {
        /// Winding frequencies; torus coordinate `m` moves along axis `m mod N`.
        #[serde(default)]
        frequencies: Option<Vec<f64>>,
    },
    Checkerboard {
        #[serde(default = "unit_cell")]
        cell_size: f64,
        distribution: ValueDistribution,
    },
    RandomPhaseTrig {
        #[serde(default)]
        mean: f64,
        modes: Vec<PhaseMode>,
    },
}

fn unit_cell() -> f64 {
    1.0
}

/// Square roots of the square-free integers: 1, √2, √3, √5, √6, ...
pub fn default_frequencies(count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    let mut k = 1u64;
    while out.len() < count {
        let square_free = (2..k).take_while(|d| d * d <= k).all(|d| k % (d * d) != 0);
        if square_free {
            out.push((k as f64).sqrt());
        }
        k += 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicalSystem {
    pub dim: usize,
    #[serde(flatten)]
    pub kind: SystemKind,
}

/// Kind-specific state of a point ω ∈ Ω.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaState {
    /// Torus coordinates in [0,1).
    Torus(Vec<f64>),
    /// Checkerboard: integer cell plus fractional offset in cell units.
    Lattice { cell: Vec<i64>, offset: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaSample {
    pub seed: u64,
    pub state: OmegaState,
}

/// Evaluation rule of a stationary field f: Ω → R.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum FieldRule {
    Constant {
        value: f64,
    },
    /// A profile of the torus coordinates (shift-type systems).
    Torus {
        profile: Profile,
    },
    /// `scale · value + shift` of the checkerboard cell containing ω.
    Lattice {
        #[serde(default = "unit_cell")]
        scale: f64,
        #[serde(default)]
        shift: f64,
    },
    /// The random-phase sum `mean + Σ a_j cos(2π φ_j)`.
    PhaseSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothness {
    Continuous,
    BoundedMeasurable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryField {
    #[serde(flatten)]
    pub rule: FieldRule,
}

impl StationaryField {
    pub fn constant(value: f64) -> Self {
        Self {
            rule: FieldRule::Constant { value },
        }
    }

    pub fn torus(profile: Profile) -> Self {
        Self {
            rule: FieldRule::Torus { profile },
        }
    }

    pub fn lattice() -> Self {
        Self {
            rule: FieldRule::Lattice {
                scale: 1.0,
                shift: 0.0,
            },
        }
    }

    pub fn phase_sum() -> Self {
        Self {
            rule: FieldRule::PhaseSum,
        }
    }

    pub fn smoothness(&self) -> Smoothness {
        match self.rule {
            FieldRule::Lattice { .. } => Smoothness::BoundedMeasurable,
            _ => Smoothness::Continuous,
        }
    }
}

const STACK_TORUS: usize = 16;

#[inline]
fn wrap(v: f64) -> f64 {
    let w = v - v.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

impl DynamicalSystem {
    pub fn new(dim: usize, kind: SystemKind) -> Result<Self> {
        let s = Self { dim, kind }.normalized();
        s.validate()?;
        Ok(s)
    }

    /// Fill in default parameters so hot paths never recompute them.
    pub fn normalized(mut self) -> Self {
        if let SystemKind::QuasiPeriodicShift {
            frequencies: f @ None,
        } = &mut self.kind
        {
            *f = Some(default_frequencies(self.dim + 1));
        }
        self
    }

    pub fn periodic(dim: usize) -> Self {
        Self {
            dim,
            kind: SystemKind::PeriodicShift,
        }
    }

    pub fn quasi_periodic(dim: usize, frequencies: Option<Vec<f64>>) -> Result<Self> {
        Self::new(dim, SystemKind::QuasiPeriodicShift { frequencies })
    }

    pub fn checkerboard(
        dim: usize,
        cell_size: f64,
        distribution: ValueDistribution,
    ) -> Result<Self> {
        Self::new(
            dim,
            SystemKind::Checkerboard {
                cell_size,
                distribution,
            },
        )
    }

    pub fn random_phase(dim: usize, mean: f64, modes: Vec<PhaseMode>) -> Result<Self> {
        Self::new(dim, SystemKind::RandomPhaseTrig { mean, modes })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::Parameter(format!(
                "system dimension {} not in 1..=3",
                self.dim
            )));
        }
        match &self.kind {
            SystemKind::PeriodicShift => {}
            SystemKind::QuasiPeriodicShift { .. } => {
                let nu = self.frequencies();
                if nu.is_empty() {
                    return Err(Error::Parameter(
                        "quasi-periodic system needs frequencies".into(),
                    ));
                }
                for (m, f) in nu.iter().enumerate() {
                    if !f.is_finite() || *f == 0.0 {
                        return Err(Error::Parameter(format!("winding frequency {m} is {f}")));
                    }
                }
                // Rational dependence is only rejected when exactly detectable.
                for i in 0..nu.len() {
                    for j in (i + 1)..nu.len() {
                        if i % self.dim != j % self.dim {
                            continue;
                        }
                        let r = (nu[i] / nu[j]).abs();
                        let r = if r < 1.0 { 1.0 / r } else { r };
                        if (r - r.round()).abs() <= 1e-12 * r {
                            return Err(Error::Parameter(format!(
                                "frequencies {} and {} on axis {} have an integer ratio",
                                nu[i],
                                nu[j],
                                i % self.dim
                            )));
                        }
                    }
                }
            }
            SystemKind::Checkerboard {
                cell_size,
                distribution,
            } => {
                if !(*cell_size > 0.0) || !cell_size.is_finite() {
                    return Err(Error::Parameter(format!(
                        "checkerboard cell size {cell_size}"
                    )));
                }
                distribution.validate()?;
            }
            SystemKind::RandomPhaseTrig { mean, modes } => {
                if !mean.is_finite() {
                    return Err(Error::Parameter("random-phase mean is not finite".into()));
                }
                if modes.is_empty() {
                    return Err(Error::Parameter("random-phase system needs modes".into()));
                }
                for m in modes {
                    if m.wavevector.len() != self.dim {
                        return Err(Error::Shape {
                            expected: self.dim,
                            got: m.wavevector.len(),
                        });
                    }
                    if m.wavevector.iter().all(|k| *k == 0.0) {
                        return Err(Error::Parameter(
                            "random-phase mode with zero wave vector".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Winding frequencies of a quasi-periodic system (default: N+1 square roots).
    pub fn frequencies(&self) -> Vec<f64> {
        match &self.kind {
            SystemKind::QuasiPeriodicShift { frequencies } => frequencies
                .clone()
                .unwrap_or_else(|| default_frequencies(self.dim + 1)),
            _ => Vec::new(),
        }
    }

    pub fn torus_dim(&self) -> usize {
        match &self.kind {
            SystemKind::PeriodicShift => self.dim,
            SystemKind::QuasiPeriodicShift { .. } => self.frequencies().len(),
            SystemKind::RandomPhaseTrig { modes, .. } => modes.len(),
            SystemKind::Checkerboard { .. } => 0,
        }
    }

    /// Every built-in kind is ergodic under the validated parameters.
    pub fn is_ergodic(&self) -> bool {
        true
    }

    /// Length over which realizations decorrelate or repeat.
    pub fn correlation_length(&self) -> f64 {
        match &self.kind {
            SystemKind::Checkerboard { cell_size, .. } => *cell_size,
            _ => 1.0,
        }
    }

    pub fn sample_omega(&self, seed: u64) -> Result<OmegaSample> {
        self.validate()?;
        let mut r = rng::rng(seed);
        let state = match &self.kind {
            SystemKind::Checkerboard { .. } => OmegaState::Lattice {
                cell: vec![0; self.dim],
                offset: (0..self.dim).map(|_| r.random::<f64>()).collect(),
            },
            _ => OmegaState::Torus((0..self.torus_dim()).map(|_| r.random::<f64>()).collect()),
        };
        Ok(OmegaSample { seed, state })
    }

    /// ω samples for seeds derived from `root` (see [`crate::rng`]).
    pub fn sample_many(&self, root: u64, count: usize) -> Result<Vec<OmegaSample>> {
        (0..count)
            .map(|i| self.sample_omega(rng::derive_seed(root, rng::Stream::Omega, i as u64)))
            .collect()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_sample(&self, omega: &OmegaSample) -> Result<()> {
        let ok = match (&self.kind, &omega.state) {
            (SystemKind::Checkerboard { .. }, OmegaState::Lattice { cell, offset }) => {
                cell.len() == self.dim && offset.len() == self.dim
            }
            (SystemKind::Checkerboard { .. }, _) | (_, OmegaState::Lattice { .. }) => false,
            (_, OmegaState::Torus(t)) => t.len() == self.torus_dim(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(
                "ω sample was not produced by this system".into(),
            ))
        }
    }

    /// Displacement of torus coordinate `m` under T(x).
    #[inline]
    fn torus_step(&self, m: usize, x: &[f64]) -> f64 {
        match &self.kind {
            SystemKind::PeriodicShift => x[m],
            SystemKind::QuasiPeriodicShift { frequencies } => {
                let nu = match frequencies {
                    Some(f) => f[m],
                    None => default_frequencies(m + 1)[m],
                };
                nu * x[m % self.dim]
            }
            SystemKind::RandomPhaseTrig { modes, .. } => modes[m]
                .wavevector
                .iter()
                .zip(x)
                .map(|(k, xi)| k * xi)
                .sum(),
            SystemKind::Checkerboard { .. } => 0.0,
        }
    }

    /// T(x)ω.
    pub fn shift(&self, omega: &OmegaSample, x: &[f64]) -> Result<OmegaSample> {
        self.check_point(x)?;
        self.check_sample(omega)?;
        let state = match (&self.kind, &omega.state) {
            (SystemKind::Checkerboard { cell_size, .. }, OmegaState::Lattice { cell, offset }) => {
                let mut c = cell.clone();
                let mut o = offset.clone();
                for a in 0..self.dim {
                    let t = o[a] + x[a] / cell_size;
                    let fl = t.floor();
                    c[a] += fl as i64;
                    o[a] = t - fl;
                    if o[a] >= 1.0 {
                        o[a] = 0.0;
                        c[a] += 1;
                    }
                }
                OmegaState::Lattice { cell: c, offset: o }
            }
            (_, OmegaState::Torus(theta)) => OmegaState::Torus(
                theta
                    .iter()
                    .enumerate()
                    .map(|(m, t)| wrap(t + self.torus_step(m, x)))
                    .collect(),
            ),
            _ => unreachable!("checked above"),
        };
        Ok(OmegaSample {
            seed: omega.seed,
            state,
        })
    }

    fn check_rule(&self, field: &StationaryField) -> Result<()> {
        let ok = matches!(
            (&self.kind, &field.rule),
            (_, FieldRule::Constant { .. })
                | (SystemKind::Checkerboard { .. }, FieldRule::Lattice { .. })
                | (SystemKind::RandomPhaseTrig { .. }, FieldRule::PhaseSum)
                | (SystemKind::PeriodicShift, FieldRule::Torus { .. })
                | (
                    SystemKind::QuasiPeriodicShift { .. },
                    FieldRule::Torus { .. }
                )
                | (SystemKind::RandomPhaseTrig { .. }, FieldRule::Torus { .. })
        );
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "field rule {:?} does not apply to this system",
                field.rule
            )))
        }
    }

    /// f(ω).
    pub fn evaluate(&self, field: &StationaryField, omega: &OmegaSample) -> Result<f64> {
        self.realize(field, omega, &vec![0.0; self.dim])
    }

    #[inline]
    fn lattice_value(&self, seed: u64, cell: &[i64]) -> f64 {
        match &self.kind {
            SystemKind::Checkerboard { distribution, .. } => {
                distribution.quantile(rng::unit_f64(rng::hash_coords(seed, cell)))
            }
            _ => f64::NAN,
        }
    }

    /// f(T(x)ω), evaluated without materializing the shifted sample.
    pub fn realize(&self, field: &StationaryField, omega: &OmegaSample, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_sample(omega)?;
        self.check_rule(field)?;
        let v = self.realize_unchecked(field, omega, x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Overflow(format!("field realization at {x:?}")))
        }
    }

    /// As [`realize`](Self::realize) but without compatibility checks; used in hot loops
    /// after the model has been validated.
    #[inline]
    pub fn realize_unchecked(
        &self,
        field: &StationaryField,
        omega: &OmegaSample,
        x: &[f64],
    ) -> f64 {
        match (&field.rule, &omega.state) {
            (FieldRule::Constant { value }, _) => *value,
            (FieldRule::Lattice { scale, shift }, OmegaState::Lattice { cell, offset }) => {
                let cs = match &self.kind {
                    SystemKind::Checkerboard { cell_size, .. } => *cell_size,
                    _ => 1.0,
                };
                let mut k = [0i64; 3];
                for a in 0..self.dim {
                    let t = offset[a] + x[a] / cs;
                    k[a] = cell[a] + t.floor() as i64;
                }
                scale * self.lattice_value(omega.seed, &k[..self.dim]) + shift
            }
            (FieldRule::PhaseSum, OmegaState::Torus(phi)) => match &self.kind {
                SystemKind::RandomPhaseTrig { mean, modes } => {
                    let mut v = *mean;
                    for (j, m) in modes.iter().enumerate() {
                        let arg = phi[j] + self.torus_step(j, x);
                        v += m.amplitude * (2.0 * std::f64::consts::PI * arg).cos();
                    }
                    v
                }
                _ => f64::NAN,
            },
            (FieldRule::Torus { profile }, OmegaState::Torus(theta)) => {
                let step = |m: usize| self.torus_step(m, x);
                if theta.len() <= STACK_TORUS {
                    let mut buf = [0.0; STACK_TORUS];
                    for (m, t) in theta.iter().enumerate() {
                        buf[m] = wrap(t + step(m));
                    }
                    profile.eval(&buf[..theta.len()])
                } else {
                    let buf: Vec<f64> = theta
                        .iter()
                        .enumerate()
                        .map(|(m, t)| wrap(t + step(m)))
                        .collect();
                    profile.eval(&buf)
                }
            }
            _ => f64::NAN,
        }
    }

    /// Uniform bound on |f| when one is known.
    pub fn field_bound(&self, field: &StationaryField) -> Option<f64> {
        match (&field.rule, &self.kind) {
            (FieldRule::Constant { value }, _) => Some(value.abs()),
            (FieldRule::Torus { profile }, _) => profile.sup_bound(),
            (
                FieldRule::Lattice { scale, shift },
                SystemKind::Checkerboard { distribution, .. },
            ) => Some(scale.abs() * distribution.sup_abs() + shift.abs()),
            (FieldRule::PhaseSum, SystemKind::RandomPhaseTrig { mean, modes }) => {
                Some(mean.abs() + modes.iter().map(|m| m.amplitude.abs()).sum::<f64>())
            }
            _ => None,
        }
    }

    /// Exact ensemble mean E[f] when available in closed form.
    pub fn field_mean(&self, field: &StationaryField) -> Option<f64> {
        match (&field.rule, &self.kind) {
            (FieldRule::Constant { value }, _) => Some(*value),
            (
                FieldRule::Lattice { scale, shift },
                SystemKind::Checkerboard { distribution, .. },
            ) => Some(scale * distribution.mean() + shift),
            (FieldRule::PhaseSum, SystemKind::RandomPhaseTrig { mean, .. }) => Some(*mean),
            _ => None,
        }
    }
}

/// One bounded observable for each built-in system kind, in a fixed order:
/// periodic, quasi-periodic, checkerboard {1, 3}, random phase.
pub fn reference_systems(dim: usize) -> Vec<(DynamicalSystem, StationaryField)> {
    let k1: Vec<f64> = (0..dim).map(|a| if a == 0 { 1.0 } else { 0.0 }).collect();
    vec![
        (
            DynamicalSystem::periodic(dim),
            StationaryField::torus(Profile::sine(0.0, 1.0, &k1)),
        ),
        (
            DynamicalSystem::quasi_periodic(dim, None).expect("built-in parameters are valid"),
            StationaryField::torus(Profile::cosine(0.0, 1.0, &[1.0]).with_term(
                1.0,
                &[0.0, 1.0],
                crate::profile::Wave::Cos,
                0.0,
            )),
        ),
        (
            DynamicalSystem::checkerboard(dim, 1.0, ValueDistribution::two_valued(1.0, 3.0))
                .expect("built-in parameters are valid"),
            StationaryField::lattice(),
        ),
        (
            DynamicalSystem::random_phase(
                dim,
                1.0,
                vec![
                    PhaseMode {
                        amplitude: 0.5,
                        wavevector: k1.clone(),
                    },
                    PhaseMode {
                        amplitude: 0.25,
                        wavevector: (0..dim).map(|a| 2f64.sqrt() * (a + 1) as f64).collect(),
                    },
                ],
            )
            .expect("built-in parameters are valid"),
            StationaryField::phase_sum(),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn builtins(dim: usize) -> Vec<(DynamicalSystem, StationaryField)> {
        reference_systems(dim)
    }

    #[test]
    fn periodic_shift_is_mod_one_addition() {
        let sys = DynamicalSystem::periodic(2);
        let w = OmegaSample {
            seed: 0,
            state: OmegaState::Torus(vec![0.25, 0.5]),
        };
        let s = sys.shift(&w, &[0.5, 0.75]).unwrap();
        assert_eq!(s.state, OmegaState::Torus(vec![0.75, 0.25]));
        assert_eq!(sys.shift(&w, &[0.0, 0.0]).unwrap(), w);
    }

    #[test]
    fn zero_shift_is_identity_for_all_kinds() {
        for (sys, _) in builtins(2) {
            let w = sys.sample_omega(7).unwrap();
            assert_eq!(sys.shift(&w, &[0.0, 0.0]).unwrap(), w);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        let sys = DynamicalSystem::periodic(2);
        let a = sys.sample_omega(7).unwrap();
        assert_eq!(a, sys.sample_omega(7).unwrap());
        if let OmegaState::Torus(t) = &a.state {
            assert!(t.iter().all(|v| (0.0..1.0).contains(v)));
        }
        let q = DynamicalSystem::quasi_periodic(1, Some(vec![1.0, 2f64.sqrt()])).unwrap();
        assert_ne!(q.sample_omega(0).unwrap(), q.sample_omega(1).unwrap());
    }

    #[test]
    fn group_law_holds_field_wise() {
        for dim in 1..=3 {
            for (sys, f) in builtins(dim) {
                let mut worst: f64 = 0.0;
                let mut r = rng::rng(99);
                for p in 0..100u64 {
                    let w = sys.sample_omega(p).unwrap();
                    let x: Vec<f64> = (0..dim).map(|_| r.random_range(-20.0..20.0)).collect();
                    let y: Vec<f64> = (0..dim).map(|_| r.random_range(-20.0..20.0)).collect();
                    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
                    let lhs = sys.evaluate(&f, &sys.shift(&w, &xy).unwrap()).unwrap();
                    let rhs = sys
                        .evaluate(&f, &sys.shift(&sys.shift(&w, &y).unwrap(), &x).unwrap())
                        .unwrap();
                    worst = worst.max((lhs - rhs).abs());
                    // realize agrees with evaluate∘shift
                    let direct = sys.realize(&f, &w, &xy).unwrap();
                    worst = worst.max((direct - lhs).abs());
                }
                assert!(worst <= 1e-12, "{:?} dim {dim}: {worst}", sys.kind);
            }
        }
    }

    #[test]
    fn checkerboard_empirical_mean_within_binomial_bound() {
        let sys =
            DynamicalSystem::checkerboard(2, 1.0, ValueDistribution::two_valued(1.0, 3.0)).unwrap();
        let w = sys.sample_omega(11).unwrap();
        let f = StationaryField::lattice();
        let mut s = 0.0;
        let n = 100;
        for i in 0..n {
            for j in 0..n {
                s += sys
                    .realize(&f, &w, &[i as f64 + 0.5, j as f64 + 0.5])
                    .unwrap();
            }
        }
        let m = s / (n * n) as f64;
        // Values 1/3 with prob ½: std 1, so 3σ over 10⁴ cells is 0.03.
        assert!((m - 2.0).abs() <= 0.03, "mean {m}");
    }

    #[test]
    fn neighbouring_checker_cells_are_uncorrelated() {
        let sys =
            DynamicalSystem::checkerboard(1, 1.0, ValueDistribution::two_valued(1.0, 3.0)).unwrap();
        let f = StationaryField::lattice();
        let m = 10_000;
        let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in sys.sample_many(5, m).unwrap() {
            let a = sys.realize(&f, &s, &[0.3]).unwrap();
            let b = sys.realize(&f, &s, &[1.3]).unwrap();
            sa += a;
            sb += b;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
        let mf = m as f64;
        let cov = sab / mf - sa * sb / (mf * mf);
        let corr = cov / ((saa / mf - (sa / mf).powi(2)) * (sbb / mf - (sb / mf).powi(2))).sqrt();
        assert!(corr.abs() <= 3.0 / mf.sqrt(), "corr {corr}");
    }

    #[test]
    fn periodic_realization_has_unit_period() {
        let sys = DynamicalSystem::periodic(1);
        let f = StationaryField::torus(Profile::sine(0.0, 1.0, &[1.0]));
        let w = sys.sample_omega(3).unwrap();
        let a = sys.realize(&f, &w, &[0.0]).unwrap();
        let b = sys.realize(&f, &w, &[1.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
        let c = StationaryField::constant(4.5);
        assert_eq!(sys.realize(&c, &w, &[0.123]).unwrap(), 4.5);
    }

    #[test]
    fn measure_preservation_statistical() {
        for (sys, f) in builtins(2) {
            let m = 4000;
            let samples = sys.sample_many(17, m).unwrap();
            let base: Vec<f64> = samples
                .iter()
                .map(|w| sys.evaluate(&f, w).unwrap())
                .collect();
            let moved: Vec<f64> = samples
                .iter()
                .map(|w| sys.realize(&f, w, &[3.7, -1.2]).unwrap())
                .collect();
            let e0 = crate::stats::McEstimate::from_samples(&base);
            let e1 = crate::stats::McEstimate::from_samples(&moved);
            let tol = 4.0 * e0.std.max(e1.std) / (m as f64).sqrt();
            assert!((e0.mean - e1.mean).abs() <= tol, "{:?}", sys.kind);
        }
    }

    #[test]
    fn parameter_errors() {
        assert!(
            DynamicalSystem::checkerboard(2, 0.0, ValueDistribution::two_valued(1.0, 2.0)).is_err()
        );
        assert!(DynamicalSystem::quasi_periodic(1, Some(vec![1.0, 2.0])).is_err());
        assert!(DynamicalSystem::quasi_periodic(1, Some(vec![1.0, 0.0])).is_err());
        let sys = DynamicalSystem::periodic(2);
        let w = sys.sample_omega(1).unwrap();
        assert!(matches!(sys.shift(&w, &[1.0]), Err(Error::Shape { .. })));
        assert!(sys
            .realize(&StationaryField::lattice(), &w, &[0.0, 0.0])
            .is_err());
    }

    #[test]
    fn default_frequencies_skip_squares() {
        let f = default_frequencies(5);
        let expect = [1.0, 2f64.sqrt(), 3f64.sqrt(), 5f64.sqrt(), 6f64.sqrt()];
        for (a, b) in f.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn config_round_trip() {
        let sys: DynamicalSystem = toml::from_str(
            r#"
            dim = 2
            kind = "checkerboard"
            cell_size = 1.0
            distribution = { type = "discrete", values = [1.0, 4.0], probs = [0.5, 0.5] }
            "#,
        )
        .unwrap();
        assert_eq!(
            sys.normalized(),
            DynamicalSystem::checkerboard(2, 1.0, ValueDistribution::two_valued(1.0, 4.0)).unwrap()
        );
    }
}
