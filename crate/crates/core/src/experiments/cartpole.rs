//! Actor-critic training on the cart-pole swing-up.
//!
//! Each iteration samples a batch of episodes at the current parameters. Half
//! of them fit the compatible critic `Q̂ = ψᵀθ` by ridge regression on
//! Monte-Carlo returns; the other half estimate the gradient (weighted by
//! `Q̂`) and the preconditioner. Episodes run for twice the horizon so every
//! step within the horizon has a full-length return target.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::cartpole::{CartPole, CartPoleState, RbfFeatures};
use crate::error::{Error, Result};
use crate::estimators::{compatible_critic_fit, CriticSample};
use crate::linalg::steepest_descent_solve;
use crate::optimizers::{IterationRecord, RuleKind, RunTrace, StepSchedule};
use crate::policy::{DifferentiablePolicy, GaussianLinearPolicy, GaussianNoise, StateFeatures};
use crate::rng::{derive_seed, stream};

pub type CartPolePolicy = GaussianLinearPolicy<RbfFeatures>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPoleProtocol {
    pub dynamics: CartPole,
    pub horizon: usize,
    pub discount: f64,
    pub num_features: usize,
    pub policy_sigma: f64,
    /// Split evenly between the critic and the gradient estimate.
    pub episodes_per_iteration: usize,
    /// Iterations of steepest descent used to apply the inverse preconditioner.
    pub solver_iterations: usize,
    /// Candidate critic ridges, chosen by error on a held-out episode.
    pub critic_ridges: Vec<f64>,
    /// Standard deviation of the random initial weights.
    pub init_scale: f64,
}

impl Default for CartPoleProtocol {
    fn default() -> Self {
        Self {
            dynamics: CartPole::default(),
            horizon: 100,
            discount: 0.99,
            num_features: 100,
            policy_sigma: 2.0,
            episodes_per_iteration: 10,
            solver_iterations: 250,
            critic_ridges: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            init_scale: 1.0,
        }
    }
}

/// One simulated step; the score and log-Hessian follow from `φ` and the residual.
#[derive(Debug, Clone)]
struct CpStep {
    state: CartPoleState,
    action: f64,
    phi: DVector<f64>,
    resid: f64,
    reward: f64,
}

#[derive(Debug, Clone)]
struct Episode {
    steps: Vec<CpStep>,
}

impl Episode {
    /// `Σ_{τ<H} γ^τ r_{t+τ}` for every `t < H`.
    fn targets(&self, horizon: usize, gamma: f64) -> Vec<f64> {
        let n = self.steps.len();
        let mut disc = vec![0.0; n + 1];
        for t in (0..n).rev() {
            disc[t] = self.steps[t].reward + gamma * disc[t + 1];
        }
        let tail = gamma.powi(horizon as i32);
        (0..horizon.min(n))
            .map(|t| {
                let end = (t + horizon).min(n);
                disc[t] - tail * disc[end]
            })
            .collect()
    }

    fn discounted_return(&self, horizon: usize, gamma: f64) -> f64 {
        let mut g = 1.0;
        let mut total = 0.0;
        for s in self.steps.iter().take(horizon) {
            total += g * s.reward;
            g *= gamma;
        }
        total
    }
}

/// Final parameters and the per-iteration trace of one training run.
#[derive(Debug, Clone)]
pub struct CartPoleRun {
    pub w: DVector<f64>,
    pub trace: RunTrace,
    pub features: RbfFeatures,
}

impl CartPoleProtocol {
    fn check(&self, schedule: &StepSchedule) -> Result<()> {
        schedule.validate()?;
        if self.episodes_per_iteration < 4 || self.episodes_per_iteration % 2 != 0 {
            return Err(Error::InvalidModel("episodes_per_iteration must be even and at least 4".into()));
        }
        if self.horizon == 0 || self.critic_ridges.is_empty() {
            return Err(Error::InvalidModel("horizon and critic_ridges must be non-empty".into()));
        }
        if matches!(schedule, StepSchedule::Grid { .. }) {
            return Err(Error::InvalidModel("cart-pole uses constant, decaying or two-point steps".into()));
        }
        Ok(())
    }

    pub fn policy<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<CartPolePolicy> {
        GaussianLinearPolicy::new(RbfFeatures::random(self.num_features, rng)?, GaussianNoise::Fixed(self.policy_sigma))
    }

    fn episode<R: Rng + ?Sized>(&self, policy: &CartPolePolicy, w: &DVector<f64>, rng: &mut R) -> Episode {
        let var = self.policy_sigma * self.policy_sigma;
        let mut s = CartPoleState::DOWN;
        let mut steps = Vec::with_capacity(2 * self.horizon);
        for _ in 0..2 * self.horizon {
            let phi = policy.features.features(&s);
            let mean = w.dot(&phi);
            let z: f64 = StandardNormal.sample(rng);
            let action = mean + self.policy_sigma * z;
            let (next, reward) = self.dynamics.step(&s, action, rng);
            steps.push(CpStep {
                state: s,
                action,
                phi,
                resid: (action - mean) / var,
                reward,
            });
            s = next;
        }
        Episode { steps }
    }

    fn critic_samples(&self, episodes: &[Episode]) -> Vec<CriticSample<CartPoleState, f64>> {
        let mut out = Vec::new();
        for ep in episodes {
            for (step, target) in ep.steps.iter().zip(ep.targets(self.horizon, self.discount)) {
                out.push(CriticSample {
                    state: step.state,
                    action: step.action,
                    target,
                });
            }
        }
        // Centring the targets removes the state-independent part the
        // zero-mean compatible features cannot represent.
        let mean = out.iter().map(|x| x.target).sum::<f64>() / out.len() as f64;
        for x in &mut out {
            x.target -= mean;
        }
        out
    }

    /// Critic weights, with the ridge picked on the last critic episode.
    fn fit_critic(&self, policy: &CartPolePolicy, w: &DVector<f64>, episodes: &[Episode]) -> Result<DVector<f64>> {
        let (train, held) = episodes.split_at(episodes.len() - 1);
        let train_samples = self.critic_samples(train);
        let held_samples = self.critic_samples(held);
        let mut best = (f64::INFINITY, self.critic_ridges[0]);
        for &ridge in &self.critic_ridges {
            let fit = compatible_critic_fit(&train_samples, policy, w, ridge)?;
            let err: f64 = held_samples
                .iter()
                .map(|x| (policy.grad_log_prob(w, &x.state, &x.action).dot(&fit.theta) - x.target).powi(2))
                .sum();
            if err < best.0 {
                best = (err, ridge);
            }
        }
        Ok(compatible_critic_fit(&self.critic_samples(episodes), policy, w, best.1)?.theta)
    }

    fn direction(&self, kind: RuleKind, theta: &DVector<f64>, episodes: &[Episode], n: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let var = self.policy_sigma * self.policy_sigma;
        let mut grad = DVector::zeros(n);
        let mut curv = DMatrix::zeros(n, n);
        for ep in episodes {
            let targets = ep.targets(self.horizon, self.discount);
            let mut g = 1.0;
            for (step, q_mc) in ep.steps.iter().zip(targets) {
                let psi = &step.phi * step.resid;
                let q_hat = psi.dot(theta);
                grad.axpy(g * q_hat, &psi, 1.0);
                match kind {
                    RuleKind::Natural => curv.ger(g / var, &step.phi, &step.phi, 1.0),
                    RuleKind::GaussNewton2 | RuleKind::DiagGn2 | RuleKind::CgGn2 => {
                        curv.ger(g * q_mc / var, &step.phi, &step.phi, 1.0)
                    }
                    RuleKind::GaussNewton1 | RuleKind::DiagGn1 => curv.ger(-g * q_hat, &psi, &psi, 1.0),
                    RuleKind::Steepest => {}
                    RuleKind::Em => return Err(Error::MissingInput("EM has no sampled cart-pole update")),
                }
                g *= self.discount;
            }
        }
        let scale = 1.0 / episodes.len() as f64;
        grad *= scale;
        curv *= scale;
        let d = match kind {
            RuleKind::Steepest => grad.clone(),
            RuleKind::DiagGn1 | RuleKind::DiagGn2 => {
                let diag = curv.diagonal();
                let floor = (1e-8 * diag.amax()).max(f64::MIN_POSITIVE);
                grad.zip_map(&diag, |gi, c| gi / c.max(floor))
            }
            _ => steepest_descent_solve(&curv, &grad, &grad, self.solver_iterations, 1e-10)?,
        };
        Ok((grad, d))
    }

    /// Trains from random initial weights; every random draw descends from `seed`.
    pub fn run(&self, kind: RuleKind, schedule: &StepSchedule, iterations: usize, seed: u64) -> Result<CartPoleRun> {
        self.check(schedule)?;
        let mut setup = stream(derive_seed(seed, 0), 0);
        let policy = self.policy(&mut setup)?;
        let n = self.num_features;
        let mut w = DVector::from_fn(n, |_, _| {
            let z: f64 = StandardNormal.sample(&mut setup);
            self.init_scale * z
        });

        let revert = matches!(schedule, StepSchedule::TwoPoint { .. });
        let half = self.episodes_per_iteration / 2;
        let mut accepted = (w.clone(), f64::NEG_INFINITY);
        let mut trace = RunTrace::default();
        for t in 0..=iterations {
            let mut rng = stream(derive_seed(seed, 1), t as u64);
            let episodes: Vec<Episode> = (0..self.episodes_per_iteration).map(|_| self.episode(&policy, &w, &mut rng)).collect();
            let ret = episodes.iter().map(|e| e.discounted_return(self.horizon, self.discount)).sum::<f64>()
                / episodes.len() as f64;
            if revert && ret < accepted.1 {
                // The last step lowered the return: go back and re-estimate there.
                w = accepted.0.clone();
                accepted.1 = f64::NEG_INFINITY;
                trace.records.push(IterationRecord {
                    iteration: t,
                    ret,
                    grad_norm: 0.0,
                    step_size: 0.0,
                    direction_norm: 0.0,
                    h12_norm: None,
                    a1_norm: None,
                    wall_ms: 0.0,
                });
                continue;
            }
            accepted = (w.clone(), ret);
            let (critic_eps, grad_eps) = episodes.split_at(half);
            let theta = self.fit_critic(&policy, &w, critic_eps)?;
            let (grad, d) = self.direction(kind, &theta, grad_eps, n)?;
            let alpha = if t < iterations { schedule.nominal(t) } else { 0.0 };
            trace.records.push(IterationRecord {
                iteration: t,
                ret,
                grad_norm: grad.norm(),
                step_size: alpha,
                direction_norm: d.norm(),
                h12_norm: None,
                a1_norm: None,
                wall_ms: 0.0,
            });
            w.axpy(alpha, &d, 1.0);
        }
        Ok(CartPoleRun {
            w: accepted.0,
            trace,
            features: policy.features,
        })
    }
}
