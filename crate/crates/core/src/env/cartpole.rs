//! Cart-pole swing-up with a continuous horizontal force.
//!
//! Only the pole is modelled: the state is `(θ, θ̇)` with `θ = 0` upright.
//! The force is perturbed by uniform noise, then clipped, then integrated
//! with one explicit Euler step.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::StateFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    /// Hanging straight down, at rest.
    pub const DOWN: CartPoleState = CartPoleState { theta: PI, theta_dot: 0.0 };
}

/// Maps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPole {
    pub gravity: f64,
    pub pole_mass: f64,
    pub cart_mass: f64,
    pub pole_length: f64,
    pub dt: f64,
    /// Half-width of the uniform force noise; 0 disables it.
    pub force_noise: f64,
    pub force_limit: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            pole_mass: 2.0,
            cart_mass: 8.0,
            pole_length: 0.5,
            dt: 0.1,
            force_noise: 10.0,
            force_limit: 50.0,
        }
    }
}

impl CartPole {
    pub fn noiseless() -> Self {
        Self {
            force_noise: 0.0,
            ..Self::default()
        }
    }

    /// `(1 + cos θ) / 2`: 1 upright, 0 hanging down.
    pub fn reward(state: &CartPoleState) -> f64 {
        0.5 * (1.0 + state.theta.cos())
    }

    /// `θ̈` for an already clipped force `u`.
    pub fn angular_acceleration(&self, state: &CartPoleState, u: f64) -> f64 {
        let alpha = 1.0 / (self.pole_mass + self.cart_mass);
        let (m, l) = (self.pole_mass, self.pole_length);
        let (sin, cos) = state.theta.sin_cos();
        let num = self.gravity * sin
            - alpha * m * l * state.theta_dot * state.theta_dot * (2.0 * state.theta).sin() / 2.0
            - alpha * cos * u;
        let den = 4.0 * l / 3.0 - alpha * m * l * cos * cos;
        num / den
    }

    /// The force actually applied for a commanded action.
    pub fn applied_force<R: Rng + ?Sized>(&self, u: f64, rng: &mut R) -> f64 {
        let noisy = if self.force_noise > 0.0 {
            u + rng.gen_range(-self.force_noise..=self.force_noise)
        } else {
            u
        };
        noisy.clamp(-self.force_limit, self.force_limit)
    }

    /// One transition: returns the next state and the reward of the current one.
    pub fn step<R: Rng + ?Sized>(&self, state: &CartPoleState, u: f64, rng: &mut R) -> (CartPoleState, f64) {
        let force = self.applied_force(u, rng);
        let acc = self.angular_acceleration(state, force);
        let next = CartPoleState {
            theta: wrap_angle(state.theta + self.dt * state.theta_dot),
            theta_dot: state.theta_dot + self.dt * acc,
        };
        (next, Self::reward(state))
    }
}

/// Gaussian radial basis features `exp(−½ (s − c)ᵀ Λ (s − c))` with diagonal `Λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfFeatures {
    pub centers: Vec<[f64; 2]>,
    pub precision: [f64; 2],
}

impl RbfFeatures {
    /// `count` centres uniform on `[−π, π] × [−4π, 4π]`, `Λ = diag(1, 1/4)`.
    pub fn random<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidModel("RBF feature map needs at least one centre".into()));
        }
        let centers = (0..count)
            .map(|_| [rng.gen_range(-PI..=PI), rng.gen_range(-4.0 * PI..=4.0 * PI)])
            .collect();
        Ok(Self {
            centers,
            precision: [1.0, 0.25],
        })
    }
}

impl StateFeatures<CartPoleState> for RbfFeatures {
    fn dim(&self) -> usize {
        self.centers.len()
    }

    fn features(&self, s: &CartPoleState) -> DVector<f64> {
        DVector::from_iterator(
            self.centers.len(),
            self.centers.iter().map(|c| {
                let d0 = s.theta - c[0];
                let d1 = s.theta_dot - c[1];
                (-0.5 * (self.precision[0] * d0 * d0 + self.precision[1] * d1 * d1)).exp()
            }),
        )
    }
}
