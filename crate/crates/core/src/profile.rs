//! Closed-form scalar profiles: constants plus trigonometric and polynomial terms.
//!
//! A profile is evaluated on a point of any dimension; wave vectors and monomial
//! powers shorter than the point are zero-padded. Trig terms with integer wave
//! vectors are 1-periodic, irrational ones give quasi-periodic profiles.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Wave {
    #[default]
    Sin,
    Cos,
}

/// `amplitude · sin|cos(2π k·y + phase)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    #[serde(rename = "k")]
    pub wavevector: Vec<f64>,
    #[serde(default)]
    pub phase: f64,
    #[serde(default, rename = "fn")]
    pub wave: Wave,
    /// Raise the wave to this integer power before scaling (1 by default).
    #[serde(default = "one_u32")]
    pub power: u32,
}

fn one_u32() -> u32 {
    1
}

/// `coef · Π y_a^{powers[a]}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Profile {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
    #[serde(default)]
    pub monomials: Vec<Monomial>,
    /// Take the absolute value of the sum.
    #[serde(default)]
    pub abs: bool,
}

impl Profile {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            ..Default::default()
        }
    }

    /// `c + amp · sin(2π k·y)`
    pub fn sine(c: f64, amp: f64, k: &[f64]) -> Self {
        Self::constant(c).with_term(amp, k, Wave::Sin, 0.0)
    }

    pub fn cosine(c: f64, amp: f64, k: &[f64]) -> Self {
        Self::constant(c).with_term(amp, k, Wave::Cos, 0.0)
    }

    pub fn with_term(mut self, amp: f64, k: &[f64], wave: Wave, phase: f64) -> Self {
        self.terms.push(TrigTerm {
            amplitude: amp,
            wavevector: k.to_vec(),
            phase,
            wave,
            power: 1,
        });
        self
    }

    pub fn with_power_term(mut self, amp: f64, k: &[f64], wave: Wave, power: u32) -> Self {
        self.terms.push(TrigTerm {
            amplitude: amp,
            wavevector: k.to_vec(),
            phase: 0.0,
            wave,
            power,
        });
        self
    }

    pub fn with_monomial(mut self, coef: f64, powers: &[u32]) -> Self {
        self.monomials.push(Monomial {
            coef,
            powers: powers.to_vec(),
        });
        self
    }

    pub fn absolute(mut self) -> Self {
        self.abs = true;
        self
    }

    #[inline]
    pub fn eval(&self, y: &[f64]) -> f64 {
        let mut v = self.constant;
        for t in &self.terms {
            let mut arg = t.phase;
            for (k, yi) in t.wavevector.iter().zip(y) {
                arg += 2.0 * PI * k * yi;
            }
            let w = match t.wave {
                Wave::Sin => arg.sin(),
                Wave::Cos => arg.cos(),
            };
            v += t.amplitude
                * if t.power == 1 {
                    w
                } else {
                    w.powi(t.power as i32)
                };
        }
        for m in &self.monomials {
            let mut p = m.coef;
            for (e, yi) in m.powers.iter().zip(y) {
                p *= yi.powi(*e as i32);
            }
            v += p;
        }
        if self.abs {
            v.abs()
        } else {
            v
        }
    }

    pub fn is_constant(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.amplitude == 0.0 || t.wavevector.iter().all(|k| *k == 0.0))
            && self
                .monomials
                .iter()
                .all(|m| m.coef == 0.0 || m.powers.iter().all(|p| *p == 0))
    }

    /// True when every wave vector is integral (1-periodic in each coordinate).
    pub fn is_periodic(&self) -> bool {
        self.monomials
            .iter()
            .all(|m| m.powers.iter().all(|p| *p == 0))
            && self
                .terms
                .iter()
                .all(|t| t.wavevector.iter().all(|k| (k - k.round()).abs() < 1e-12))
    }

    /// Uniform bound on |profile| when it is bounded (no monomials).
    pub fn sup_bound(&self) -> Option<f64> {
        if self
            .monomials
            .iter()
            .any(|m| m.coef != 0.0 && m.powers.iter().any(|p| *p > 0))
        {
            return None;
        }
        let mono: f64 = self.monomials.iter().map(|m| m.coef.abs()).sum();
        Some(self.constant.abs() + mono + self.terms.iter().map(|t| t.amplitude.abs()).sum::<f64>())
    }

    /// Shortest wavelength among the trig terms (∞ for none).
    pub fn min_wavelength(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let n = t.wavevector.iter().map(|k| k * k).sum::<f64>().sqrt() * t.power as f64;
                if n > 0.0 {
                    1.0 / n
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluates_trig_and_polynomial_parts() {
        let p = Profile::sine(2.0, 1.0, &[1.0]).with_monomial(-1.0, &[1]);
        let y = 0.25;
        assert!((p.eval(&[y]) - (2.0 + 1.0 - 0.25)).abs() < 1e-15);
        assert!(!p.is_periodic());
        assert!(Profile::sine(2.0, 1.0, &[1.0, 0.0]).is_periodic());
        assert!(!Profile::cosine(0.0, 1.0, &[2f64.sqrt()]).is_periodic());
    }

    #[test]
    fn squared_term_and_abs() {
        let p = Profile::constant(0.0).with_power_term(1.0, &[1.0], Wave::Sin, 2);
        assert!((p.eval(&[0.125]) - 0.5).abs() < 1e-15);
        let a = Profile::sine(0.0, 1.0, &[1.0]).absolute();
        assert!((a.eval(&[0.75]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn toml_shape() {
        let p: Profile = toml::from_str(
            r#"
            constant = 2.0
            terms = [{ amplitude = 1.0, k = [1.0, 0.0], fn = "sin" }]
            "#,
        )
        .unwrap();
        assert_eq!(p, Profile::sine(2.0, 1.0, &[1.0, 0.0]));
    }
}
