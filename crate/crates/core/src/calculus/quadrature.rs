use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{Branch, ExactModel};
use crate::error::{check_dim, Error, Result};
use crate::policy::{
    softmax, BlockMap, DifferentiablePolicy, GaussianLinearPolicy, LogPolicyTerms, PolicyTraits, StateFeatures,
};

/// Nodes and weights of the `k`-point Gauss-Hermite rule for the standard
/// normal density (Golub-Welsch). Weights sum to one.
pub fn gauss_hermite(k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(k, k);
    for i in 0..k.saturating_sub(1) {
        let off = ((i + 1) as f64).sqrt();
        jacobi[(i, i + 1)] = off;
        jacobi[(i + 1, i)] = off;
    }
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

/// Reward `height · exp(−(a − center)² / (2·width²))` of one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBump {
    pub height: f64,
    pub center: f64,
    pub width: f64,
}

impl RewardBump {
    pub fn eval(&self, a: f64) -> f64 {
        let z = (a - self.center) / self.width;
        self.height * (-0.5 * z * z).exp()
    }
}

/// Finite-state chain with a real-valued action.
///
/// Rewards are Gaussian bumps in the action and the successor distribution is
/// `softmax(base[s,·] + a·slope[s,·])`, so both are smooth in `a`.
#[derive(Debug, Clone)]
pub struct ContinuousActionChain {
    pub start: Vec<f64>,
    pub discount: f64,
    pub rewards: Vec<RewardBump>,
    pub base_logits: DMatrix<f64>,
    pub slope_logits: DMatrix<f64>,
}

impl ContinuousActionChain {
    pub fn new(
        start: Vec<f64>,
        discount: f64,
        rewards: Vec<RewardBump>,
        base_logits: DMatrix<f64>,
        slope_logits: DMatrix<f64>,
    ) -> Result<Self> {
        let n = start.len();
        check_dim(n, rewards.len(), "reward bumps")?;
        check_dim(n, base_logits.nrows(), "base logits")?;
        check_dim(n, base_logits.ncols(), "base logits")?;
        check_dim(n, slope_logits.nrows(), "slope logits")?;
        check_dim(n, slope_logits.ncols(), "slope logits")?;
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidModel(format!("discount {discount} outside [0, 1)")));
        }
        if (start.iter().sum::<f64>() - 1.0).abs() > 1e-12 || start.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidModel("start distribution is not a distribution".into()));
        }
        if rewards.iter().any(|r| !(r.height >= 0.0 && r.width > 0.0)) {
            return Err(Error::InvalidModel("reward bumps need height >= 0 and width > 0".into()));
        }
        Ok(Self {
            start,
            discount,
            rewards,
            base_logits,
            slope_logits,
        })
    }

    /// A random chain with `n` states.
    pub fn random<R: Rng + ?Sized>(n: usize, discount: f64, rng: &mut R) -> Self {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let start = raw.iter().map(|x| x / total).collect();
        let rewards = (0..n)
            .map(|_| RewardBump {
                height: rng.gen_range(0.2..1.0),
                center: rng.gen_range(-1.0..1.0),
                width: rng.gen_range(0.8..1.5),
            })
            .collect();
        let base = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let slope = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5));
        Self::new(start, discount, rewards, base, slope).expect("random chain is valid")
    }

    pub fn num_states(&self) -> usize {
        self.start.len()
    }

    pub fn reward(&self, s: usize, a: f64) -> f64 {
        self.rewards[s].eval(a)
    }

    pub fn next_distribution(&self, s: usize, a: f64) -> DVector<f64> {
        let logits = self.base_logits.row(s).transpose() + self.slope_logits.row(s).transpose() * a;
        softmax(&logits).0
    }
}

/// A Gaussian-linear policy on a [`ContinuousActionChain`], with the action
/// integrals done by Gauss-Hermite quadrature around the policy mean.
#[derive(Debug, Clone)]
pub struct QuadratureModel<F> {
    pub chain: ContinuousActionChain,
    pub policy: GaussianLinearPolicy<F>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl<F: StateFeatures<usize>> QuadratureModel<F> {
    /// Default rule size; integrands are smooth, so this is accurate to round-off.
    pub const DEFAULT_NODES: usize = 40;

    pub fn new(chain: ContinuousActionChain, policy: GaussianLinearPolicy<F>, nodes: usize) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidModel("quadrature needs at least one node".into()));
        }
        let (nodes, weights) = gauss_hermite(nodes);
        Ok(Self {
            chain,
            policy,
            nodes,
            weights,
        })
    }

    fn actions(&self, w: &DVector<f64>, s: usize) -> Vec<f64> {
        let (mean, sigma, _) = self.policy.mean_and_sigma(w, &s);
        self.nodes.iter().map(|x| mean + sigma * x).collect()
    }

    /// `(action, weight)` pairs of the quadrature branches of state `s` at `w`.
    pub fn action_nodes(&self, w: &DVector<f64>, s: usize) -> Vec<(f64, f64)> {
        self.actions(w, s).into_iter().zip(self.weights.iter().copied()).collect()
    }
}

impl<F: StateFeatures<usize>> ExactModel for QuadratureModel<F> {
    fn num_states(&self) -> usize {
        self.chain.num_states()
    }

    fn dim(&self) -> usize {
        self.policy.dim()
    }

    fn discount(&self) -> f64 {
        self.chain.discount
    }

    fn start(&self) -> &[f64] {
        &self.chain.start
    }

    fn traits(&self) -> PolicyTraits {
        self.policy.traits()
    }

    fn block_map(&self) -> BlockMap {
        self.policy.block_map()
    }

    fn branches(&self, w: &DVector<f64>, s: usize) -> Vec<Branch> {
        self.actions(w, s)
            .into_iter()
            .zip(self.weights.iter())
            .map(|(a, &prob)| Branch {
                prob,
                reward: self.chain.reward(s, a),
                next: self.chain.next_distribution(s, a),
                terms: self.policy.log_terms(w, &s, &a),
            })
            .collect()
    }

    /// Closed-form weighted least squares rather than Newton iterations.
    fn m_step(&self, anchor: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(crate::optimizers::em_step_quadrature(self, anchor)?.w)
    }

    fn anchored_terms(&self, anchor: &DVector<f64>, eval: &DVector<f64>, s: usize) -> Vec<LogPolicyTerms> {
        self.actions(anchor, s)
            .into_iter()
            .map(|a| self.policy.log_terms(eval, &s, &a))
            .collect()
    }
}
