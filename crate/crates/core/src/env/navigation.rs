//! A two-dimensional nonlinear navigation task.
//!
//! The control passes through a logistic squashing before it moves the
//! first coordinate, and the second coordinate integrates the first. The aim
//! is to bring the state to the origin.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{DifferentiablePolicy, PolicyTraits};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub s1: f64,
    pub s2: f64,
}

impl NavState {
    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.s1, self.s2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Navigation {
    /// Standard deviation of the transition noise, drawn separately per coordinate.
    pub transition_noise: f64,
    /// Standard deviation of the start-state jitter around `(0, 1)`.
    pub start_noise: f64,
    /// Length scale of the reward bump around the origin.
    pub reward_width: f64,
    pub horizon: usize,
}

impl Default for Navigation {
    fn default() -> Self {
        Self {
            transition_noise: 0.02,
            start_noise: 0.001,
            reward_width: 0.25,
            horizon: 80,
        }
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

impl Navigation {
    pub fn noiseless() -> Self {
        Self {
            transition_noise: 0.0,
            start_noise: 0.0,
            ..Self::default()
        }
    }

    fn gaussian<R: Rng + ?Sized>(sd: f64, rng: &mut R) -> f64 {
        if sd > 0.0 {
            Normal::new(0.0, sd).expect("sd is positive").sample(rng)
        } else {
            0.0
        }
    }

    pub fn start<R: Rng + ?Sized>(&self, rng: &mut R) -> NavState {
        NavState {
            s1: Self::gaussian(self.start_noise, rng),
            s2: 1.0 + Self::gaussian(self.start_noise, rng),
        }
    }

    /// `exp(−‖s‖² / (2 width²))`, maximal at the origin.
    pub fn reward(&self, s: &NavState) -> f64 {
        let r2 = s.s1 * s.s1 + s.s2 * s.s2;
        (-0.5 * r2 / (self.reward_width * self.reward_width)).exp()
    }

    /// One transition: returns the next state and the reward of the current one.
    pub fn step<R: Rng + ?Sized>(&self, s: &NavState, u: f64, rng: &mut R) -> (NavState, f64) {
        let s1 = s.s1 + logistic(u) - 0.5 + Self::gaussian(self.transition_noise, rng);
        let s2 = s.s2 - 0.1 * s1 + Self::gaussian(self.transition_noise, rng);
        (NavState { s1, s2 }, self.reward(s))
    }
}

/// `a = (w + ε)ᵀ s` with `ε ~ N(0, σ² I)`, i.e. `a ~ N(wᵀs, σ² ‖s‖²)`.
///
/// The log-Hessian `−s sᵀ / (σ² ‖s‖²)` does not depend on the action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterNoisePolicy {
    pub sigma: f64,
}

impl ParameterNoisePolicy {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidModel(format!("parameter noise needs σ > 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    /// Action variance at `s`, floored so the origin stays well defined.
    fn variance(&self, s: &NavState) -> f64 {
        (self.sigma * self.sigma * (s.s1 * s.s1 + s.s2 * s.s2)).max(1e-12)
    }
}

impl DifferentiablePolicy<NavState> for ParameterNoisePolicy {
    type Action = f64;

    fn dim(&self) -> usize {
        2
    }

    fn log_prob(&self, w: &DVector<f64>, s: &NavState, a: &f64) -> f64 {
        let var = self.variance(s);
        let z = a - w.dot(&s.as_vector());
        -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * z * z / var
    }

    fn grad_log_prob(&self, w: &DVector<f64>, s: &NavState, a: &f64) -> DVector<f64> {
        let x = s.as_vector();
        let z = a - w.dot(&x);
        x * (z / self.variance(s))
    }

    fn hess_log_prob(&self, _w: &DVector<f64>, s: &NavState, _a: &f64) -> DMatrix<f64> {
        let x = s.as_vector();
        -(&x * x.transpose()) / self.variance(s)
    }

    fn sample<R: Rng + ?Sized>(&self, w: &DVector<f64>, s: &NavState, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        w.dot(&s.as_vector()) + self.variance(s).sqrt() * z
    }

    fn traits(&self) -> PolicyTraits {
        PolicyTraits {
            log_concave: true,
            constant_curvature: true,
        }
    }
}
