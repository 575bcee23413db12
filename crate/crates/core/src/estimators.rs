//! Sampling-based estimates of the gradient, `H2` and the Fisher matrix.
//!
//! Three estimators live here: the likelihood-ratio estimator over a batch of
//! finite trajectories, the recurrent-state estimator for the average-reward
//! setting, and the least-squares critic on compatible features.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{solve_symmetric, symmetrize};
use crate::mdp::{TabularMdp, Trajectory};
use crate::policy::{sample_index, DifferentiablePolicy, LogPolicyTerms};

/// Sampled gradient and curvature terms.
#[derive(Debug, Clone)]
pub struct EstimateBundle {
    pub grad_hat: DVector<f64>,
    /// Symmetrized estimate of `H2`.
    pub h2_hat: DMatrix<f64>,
    /// Diagonal of `h2_hat`.
    pub h2_diag_hat: DVector<f64>,
    /// Outer-product Fisher estimate.
    pub fisher_hat: DMatrix<f64>,
    /// Number of trajectories averaged.
    pub sample_count: usize,
}

impl EstimateBundle {
    fn zeros(n: usize) -> Self {
        Self {
            grad_hat: DVector::zeros(n),
            h2_hat: DMatrix::zeros(n, n),
            h2_diag_hat: DVector::zeros(n),
            fisher_hat: DMatrix::zeros(n, n),
            sample_count: 0,
        }
    }
}

/// Likelihood-ratio estimates with no baseline.
///
/// For each trajectory, `Σ_t γ^t R_t Σ_{τ≤t} ∇log π_τ` estimates the gradient
/// and the same sum with `∇∇ᵀ log π_τ` estimates `H2`; the Fisher estimate is
/// `Σ_t γ^t ∇log π_t ∇log π_tᵀ`. Results are averaged over trajectories.
pub fn likelihood_ratio_estimates<S, P>(
    trajectories: &[Trajectory<S, P::Action>],
    policy: &P,
    w: &DVector<f64>,
    gamma: f64,
) -> Result<EstimateBundle>
where
    P: DifferentiablePolicy<S>,
{
    likelihood_ratio_estimates_with_baseline(trajectories, policy, w, gamma, 0.0)
}

/// As [`likelihood_ratio_estimates`] with `R_t − baseline` in place of `R_t`.
pub fn likelihood_ratio_estimates_with_baseline<S, P>(
    trajectories: &[Trajectory<S, P::Action>],
    policy: &P,
    w: &DVector<f64>,
    gamma: f64,
    baseline: f64,
) -> Result<EstimateBundle>
where
    P: DifferentiablePolicy<S>,
{
    if trajectories.is_empty() {
        return Err(Error::MissingInput("likelihood-ratio estimates need at least one trajectory"));
    }
    let n = policy.dim();
    let mut out = EstimateBundle::zeros(n);
    let mut trace_score = DVector::zeros(n);
    let mut trace_hess = DMatrix::zeros(n, n);
    for traj in trajectories {
        trace_score.fill(0.0);
        trace_hess.fill(0.0);
        let mut discount = 1.0;
        for step in &traj.steps {
            let terms = policy.log_terms(w, &step.state, &step.action);
            trace_score += &terms.score;
            trace_hess += &terms.hess;
            let r = discount * (step.reward - baseline);
            out.grad_hat.axpy(r, &trace_score, 1.0);
            out.h2_hat += &trace_hess * r;
            out.fisher_hat.ger(discount, &terms.score, &terms.score, 1.0);
            discount *= gamma;
        }
    }
    let scale = 1.0 / trajectories.len() as f64;
    out.grad_hat *= scale;
    out.h2_hat = symmetrize(&out.h2_hat) * scale;
    out.fisher_hat = symmetrize(&out.fisher_hat) * scale;
    out.h2_diag_hat = out.h2_hat.diagonal();
    out.sample_count = trajectories.len();
    Ok(out)
}

/// Raw accumulators of the recurrent-state estimator.
#[derive(Debug, Clone)]
pub struct RecurrentEstimates {
    pub delta1: DVector<f64>,
    pub delta2: DMatrix<f64>,
    /// Number of steps spent in the recurrent state.
    pub visits: usize,
    pub steps: usize,
    /// Set when the recurrent state was never visited.
    pub never_visited: bool,
}

/// Step-by-step state of the recurrent-state estimator, usable with any
/// simulator.
///
/// Each step, after the action is sampled, call [`observe`](Self::observe)
/// with whether the current state is the recurrent one, the log-policy terms
/// of the chosen action and the reward. The traces are reset in the recurrent
/// state and extended otherwise; then `R·trace` is added to the accumulators.
#[derive(Debug, Clone)]
pub struct RecurrentAccumulator {
    trace1: DVector<f64>,
    trace2: DMatrix<f64>,
    delta1: DVector<f64>,
    delta2: DMatrix<f64>,
    visits: usize,
    steps: usize,
}

impl RecurrentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            trace1: DVector::zeros(dim),
            trace2: DMatrix::zeros(dim, dim),
            delta1: DVector::zeros(dim),
            delta2: DMatrix::zeros(dim, dim),
            visits: 0,
            steps: 0,
        }
    }

    pub fn observe(&mut self, at_recurrent_state: bool, terms: &LogPolicyTerms, reward: f64) {
        if at_recurrent_state {
            self.trace1.fill(0.0);
            self.trace2.fill(0.0);
            self.visits += 1;
        } else {
            self.trace1 += &terms.score;
            self.trace2 += &terms.hess;
        }
        self.delta1.axpy(reward, &self.trace1, 1.0);
        self.delta2 += &self.trace2 * reward;
        self.steps += 1;
    }

    pub fn finish(self) -> RecurrentEstimates {
        RecurrentEstimates {
            delta1: self.delta1,
            delta2: symmetrize(&self.delta2),
            visits: self.visits,
            steps: self.steps,
            never_visited: self.visits == 0,
        }
    }
}

/// Runs the recurrent-state estimator for `num_steps` steps on a finite MDP,
/// starting from a draw of the start distribution.
///
/// The returned sums are unnormalized.
pub fn recurrent_state_estimates<P, R>(
    mdp: &TabularMdp,
    policy: &P,
    w: &DVector<f64>,
    num_steps: usize,
    recurrent_state: usize,
    rng: &mut R,
) -> Result<RecurrentEstimates>
where
    P: DifferentiablePolicy<usize, Action = usize>,
    R: Rng + ?Sized,
{
    if recurrent_state >= mdp.num_states() {
        return Err(Error::InvalidModel(format!(
            "recurrent state {recurrent_state} outside 0..{}",
            mdp.num_states()
        )));
    }
    let mut acc = RecurrentAccumulator::new(policy.dim());
    let mut s = sample_index(&DVector::from_column_slice(mdp.start()), rng);
    for _ in 0..num_steps {
        let a = policy.sample(w, &s, rng);
        let terms = if s == recurrent_state {
            // Terms are unused on a reset step; skip the evaluation.
            LogPolicyTerms {
                log_prob: 0.0,
                score: DVector::zeros(0),
                hess: DMatrix::zeros(0, 0),
            }
        } else {
            policy.log_terms(w, &s, &a)
        };
        acc.observe(s == recurrent_state, &terms, mdp.reward(s, a));
        s = sample_index(&DVector::from_column_slice(mdp.transition_row(s, a)), rng);
    }
    Ok(acc.finish())
}

/// Least-squares weights of the compatible critic `Q̂ = ψᵀθ`, `ψ = ∇log π`.
#[derive(Debug, Clone)]
pub struct CriticFit {
    pub theta: DVector<f64>,
    /// Ridge actually used, after any escalation.
    pub ridge: f64,
    pub escalations: usize,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
}

/// One regression sample: a state-action pair and its Monte-Carlo return.
#[derive(Debug, Clone)]
pub struct CriticSample<S, A> {
    pub state: S,
    pub action: A,
    pub target: f64,
}

/// Fits `θ = argmin Σ (ψᵀθ − target)² + ridge‖θ‖²` via the normal equations.
pub fn compatible_critic_fit<S, P>(
    samples: &[CriticSample<S, P::Action>],
    policy: &P,
    w: &DVector<f64>,
    ridge: f64,
) -> Result<CriticFit>
where
    P: DifferentiablePolicy<S>,
{
    if samples.is_empty() {
        return Err(Error::MissingInput("critic fit needs at least one sample"));
    }
    let n = policy.dim();
    let psi: Vec<DVector<f64>> = samples
        .iter()
        .map(|x| policy.grad_log_prob(w, &x.state, &x.action))
        .collect();
    let mut gram = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for (p, x) in psi.iter().zip(samples) {
        gram.ger(1.0, p, p, 1.0);
        rhs.axpy(x.target, p, 1.0);
    }
    let solve = solve_symmetric(&gram, &rhs, ridge)?;
    let sse: f64 = psi
        .iter()
        .zip(samples)
        .map(|(p, x)| (p.dot(&solve.x) - x.target).powi(2))
        .sum();
    Ok(CriticFit {
        theta: solve.x,
        ridge: solve.ridge,
        escalations: solve.escalations,
        residual: (sse / samples.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{hessian_decomposition, random_gibbs_model};
    use crate::mdp::{sample_trajectory, stationary_distribution, Step};
    use crate::policy::{
        DiscretePolicy, GaussianLinearPolicy, GaussianNoise, GibbsPolicy, StateTable, TableFeatures,
        TabularSoftmaxPolicy,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A 3-state ergodic chain whose state 0 has no features and no reward.
    fn ergodic_three_state() -> (TabularMdp, GibbsPolicy<TableFeatures>) {
        let transition = vec![
            vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.2, 0.3]],
            vec![vec![0.3, 0.3, 0.4], vec![0.7, 0.1, 0.2]],
            vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.3, 0.1]],
        ];
        let reward = vec![vec![0.0, 0.0], vec![1.0, 0.2], vec![0.3, 0.9]];
        let mdp = TabularMdp::new(transition, reward, vec![1.0, 0.0, 0.0], 0.9).unwrap();
        let zero = DMatrix::zeros(2, 2);
        let f1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, -0.5]);
        let f2 = DMatrix::from_row_slice(2, 2, &[-0.4, 0.8, 0.0, 1.0]);
        let policy = GibbsPolicy::new(TableFeatures::new(vec![zero, f1, f2]).unwrap());
        (mdp, policy)
    }

    /// Expected reward per visit to `s*` and its gradient, from the stationary
    /// distribution and the `Q` of the chain absorbed on return to `s*`.
    fn cycle_gradient_oracle(mdp: &TabularMdp, policy: &GibbsPolicy<TableFeatures>, w: &DVector<f64>) -> DVector<f64> {
        let pi = mdp.policy_matrix(policy, w).unwrap();
        let p = mdp.policy_transition(&pi).unwrap();
        let mu = stationary_distribution(&p).unwrap();
        let r = mdp.policy_reward(&pi).unwrap();
        let ns = mdp.num_states();
        // V_c(s) = r(s) + Σ_{s'≠0} P(s, s') V_c(s'), cycle value with s* = 0 absorbing.
        let mut m = DMatrix::identity(ns, ns);
        for s in 0..ns {
            for s2 in 1..ns {
                m[(s, s2)] -= p[(s, s2)];
            }
        }
        let vc = m.lu().solve(&r).unwrap();
        let mut g = DVector::zeros(policy.dim());
        for s in 1..ns {
            let e = policy.evaluate(w, &s);
            for a in 0..mdp.num_actions() {
                let row = mdp.transition_row(s, a);
                let qc = mdp.reward(s, a) + (1..ns).map(|s2| row[s2] * vc[s2]).sum::<f64>();
                g.axpy(mu[s] / mu[0] * e.probs[a] * qc, &e.scores.column(a).into_owned(), 1.0);
            }
        }
        g
    }

    #[test]
    fn zero_rewards_give_zero_bundle() {
        let policy = TabularSoftmaxPolicy::uniform(2, 2).unwrap();
        let traj = Trajectory {
            steps: vec![
                Step { state: 0, action: 1, reward: 0.0 },
                Step { state: 1, action: 0, reward: 0.0 },
            ],
            terminal: false,
        };
        let w = DVector::from_vec(vec![0.1, -0.3, 0.2, 0.5]);
        let b = likelihood_ratio_estimates(&[traj], &policy, &w, 0.9).unwrap();
        assert_eq!(b.grad_hat.amax(), 0.0);
        assert_eq!(b.h2_hat.amax(), 0.0);
        assert!(b.fisher_hat.amax() > 0.0);
        assert_eq!(b.sample_count, 1);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let policy = TabularSoftmaxPolicy::uniform(2, 2).unwrap();
        let batch: Vec<Trajectory<usize, usize>> = Vec::new();
        assert!(likelihood_ratio_estimates(&batch, &policy, &DVector::zeros(4), 0.9).is_err());
    }

    #[test]
    fn deterministic_policy_with_zero_score_gives_zero_gradient() {
        // A Gaussian with zero features has zero mean score for any action at the mean.
        let policy = GaussianLinearPolicy::new(StateTable::new(vec![DVector::zeros(1)]).unwrap(), GaussianNoise::Fixed(1.0)).unwrap();
        let traj = Trajectory {
            steps: vec![Step { state: 0usize, action: 0.0, reward: 1.0 }; 3],
            terminal: false,
        };
        let b = likelihood_ratio_estimates(&[traj], &policy, &DVector::zeros(1), 0.9).unwrap();
        assert_eq!(b.grad_hat.amax(), 0.0);
    }

    #[test]
    fn estimates_agree_with_exact_calculus_within_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = random_gibbs_model(3, 2, 2, 0.8, &mut rng);
        let w = DVector::from_vec(vec![0.4, -0.6]);
        let exact = hessian_decomposition(&model, &w).unwrap();
        let n_traj = 10_000;
        let horizon = 50;
        let trajs: Vec<_> = (0..n_traj)
            .map(|_| sample_trajectory(&model.mdp, &model.policy, &w, horizon, &mut rng))
            .collect();
        // Per-trajectory estimates give the standard error.
        let singles: Vec<EstimateBundle> = trajs
            .iter()
            .map(|t| likelihood_ratio_estimates(std::slice::from_ref(t), &model.policy, &w, 0.8).unwrap())
            .collect();
        let mean = likelihood_ratio_estimates(&trajs, &model.policy, &w, 0.8).unwrap();
        let nf = n_traj as f64;
        for i in 0..2 {
            let var = singles.iter().map(|b| (b.grad_hat[i] - mean.grad_hat[i]).powi(2)).sum::<f64>() / (nf - 1.0);
            assert!((mean.grad_hat[i] - exact.grad[i]).abs() <= 3.0 * (var / nf).sqrt(), "grad {i}");
            for j in 0..2 {
                let var = singles.iter().map(|b| (b.h2_hat[(i, j)] - mean.h2_hat[(i, j)]).powi(2)).sum::<f64>() / (nf - 1.0);
                assert!((mean.h2_hat[(i, j)] - exact.h2[(i, j)]).abs() <= 3.0 * (var / nf).sqrt(), "h2 {i},{j}");
            }
        }
        assert_eq!(mean.h2_diag_hat, mean.h2_hat.diagonal());
        assert!(crate::linalg::min_eigenvalue(&mean.fisher_hat).unwrap() >= -1e-9);
        assert!((&mean.fisher_hat - &exact.fisher).amax() < 0.05 * exact.fisher.amax());
    }

    #[test]
    fn recurrent_estimator_with_zero_reward_is_zero() {
        let (mdp, policy) = ergodic_three_state();
        let doc: crate::mdp::MdpDocument = mdp.into();
        let mdp = TabularMdp::new(doc.transition, vec![vec![0.0; 2]; 3], doc.start, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = recurrent_state_estimates(&mdp, &policy, &DVector::from_vec(vec![0.2, 0.1]), 1000, 0, &mut rng).unwrap();
        assert_eq!(est.delta1.amax(), 0.0);
        assert_eq!(est.delta2.amax(), 0.0);
        assert!(!est.never_visited);
    }

    #[test]
    fn recurrent_state_every_step_keeps_traces_empty() {
        let mdp = TabularMdp::new(vec![vec![vec![1.0]; 2]], vec![vec![1.0, 0.5]], vec![1.0], 0.9).unwrap();
        let policy = TabularSoftmaxPolicy::uniform(1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = recurrent_state_estimates(&mdp, &policy, &DVector::zeros(2), 100, 0, &mut rng).unwrap();
        assert_eq!(est.delta1.amax(), 0.0);
        assert_eq!(est.visits, 100);
    }

    #[test]
    fn unvisited_recurrent_state_is_flagged() {
        let transition = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]];
        let mdp = TabularMdp::new(transition, vec![vec![1.0], vec![1.0]], vec![1.0, 0.0], 0.9).unwrap();
        let policy = TabularSoftmaxPolicy::uniform(2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = recurrent_state_estimates(&mdp, &policy, &DVector::zeros(2), 10, 1, &mut rng).unwrap();
        assert!(est.never_visited);
    }

    #[test]
    fn recurrent_estimator_points_along_cycle_gradient() {
        let (mdp, policy) = ergodic_three_state();
        let w = DVector::from_vec(vec![0.3, -0.2]);
        let oracle = cycle_gradient_oracle(&mdp, &policy, &w);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let est = recurrent_state_estimates(&mdp, &policy, &w, 200_000, 0, &mut rng).unwrap();
        let cos = est.delta1.dot(&oracle) / (est.delta1.norm() * oracle.norm());
        assert!(cos > 0.98, "cosine {cos}");
    }

    #[test]
    fn critic_recovers_exact_linear_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_gibbs_model(4, 3, 3, 0.9, &mut rng);
        let w = DVector::from_vec(vec![0.1, 0.5, -0.2]);
        let theta_star = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let samples: Vec<_> = (0..40)
            .map(|k| {
                let (s, a) = (k % 4, (k / 4) % 3);
                let target = model.policy.grad_log_prob(&w, &s, &a).dot(&theta_star);
                CriticSample { state: s, action: a, target }
            })
            .collect();
        let fit = compatible_critic_fit(&samples, &model.policy, &w, 0.0).unwrap();
        assert!((&fit.theta - &theta_star).amax() < 1e-8);
        assert!(fit.residual < 1e-8);

        let zeros: Vec<_> = samples.iter().map(|x| CriticSample { target: 0.0, ..x.clone() }).collect();
        assert_eq!(compatible_critic_fit(&zeros, &model.policy, &w, 0.0).unwrap().theta.amax(), 0.0);
    }

    #[test]
    fn critic_matches_pseudo_inverse_on_noisy_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_gibbs_model(5, 3, 4, 0.9, &mut rng);
        let w = DVector::from_vec(vec![0.3, -0.1, 0.7, 0.2]);
        let samples: Vec<_> = (0..60)
            .map(|k| CriticSample {
                state: k % 5,
                action: (k * 7) % 3,
                target: rng.gen_range(-1.0..2.0),
            })
            .collect();
        let fit = compatible_critic_fit(&samples, &model.policy, &w, 0.0).unwrap();
        let design = DMatrix::from_fn(samples.len(), 4, |r, c| model.policy.grad_log_prob(&w, &samples[r].state, &samples[r].action)[c]);
        let y = DVector::from_iterator(samples.len(), samples.iter().map(|x| x.target));
        let oracle = design.pseudo_inverse(1e-12).unwrap() * y;
        assert!((&fit.theta - &oracle).amax() < 1e-8);
    }
}
