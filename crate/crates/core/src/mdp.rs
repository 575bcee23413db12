//! Finite MDPs and their exact dynamic-programming quantities.
//!
//! Policies enter the solvers as an `|S| × |A|` matrix of action
//! probabilities. The exact calculus in [`crate::calculus`] builds these
//! quantities itself from per-state branch lists, so the functions here double
//! as an independent cross-check.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::policy::{sample_index, DifferentiablePolicy};

const PROB_TOL: f64 = 1e-12;

/// A finite MDP with discounted objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// Flattened `[s][a][s']`.
    transition: Vec<f64>,
    /// Flattened `[s][a]`.
    reward: Vec<f64>,
    start: Vec<f64>,
    discount: f64,
    reward_bound: f64,
    terminal: Vec<bool>,
}

/// Serialized form. Field names are part of the config schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub start: Vec<f64>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terminal: Vec<usize>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        check_dim(doc.states, doc.transition.len(), "transition: states")?;
        check_dim(doc.states, doc.reward.len(), "reward: states")?;
        let mdp = TabularMdp::new(doc.transition, doc.reward, doc.start, doc.gamma)?;
        if doc.actions != mdp.num_actions {
            return Err(Error::DimensionMismatch {
                expected: doc.actions,
                got: mdp.num_actions,
                context: "actions",
            });
        }
        mdp.with_terminal_states(&doc.terminal)
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(m: TabularMdp) -> Self {
        let (s_n, a_n) = (m.num_states, m.num_actions);
        MdpDocument {
            states: s_n,
            actions: a_n,
            gamma: m.discount,
            start: m.start.clone(),
            transition: (0..s_n)
                .map(|s| (0..a_n).map(|a| m.transition_row(s, a).to_vec()).collect())
                .collect(),
            reward: (0..s_n).map(|s| (0..a_n).map(|a| m.reward(s, a)).collect()).collect(),
            terminal: (0..s_n).filter(|&s| m.terminal[s]).collect(),
        }
    }
}

fn normalize_distribution(row: &mut [f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidModel(format!("{what}: negative or non-finite probability")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidModel(format!("{what}: sums to {total}, not 1")));
    }
    // Exact-enough rows are left untouched so that serialization round-trips bit for bit.
    if (total - 1.0).abs() > 4.0 * f64::EPSILON {
        row.iter_mut().for_each(|p| *p /= total);
    }
    Ok(())
}

impl TabularMdp {
    /// Builds and validates an MDP from `transition[s][a][s']`, `reward[s][a]`,
    /// a start distribution and a discount in `[0, 1)`.
    pub fn new(transition: Vec<Vec<Vec<f64>>>, reward: Vec<Vec<f64>>, start: Vec<f64>, discount: f64) -> Result<Self> {
        let num_states = transition.len();
        if num_states == 0 {
            return Err(Error::InvalidModel("MDP needs at least one state".into()));
        }
        let num_actions = transition[0].len();
        if num_actions == 0 {
            return Err(Error::InvalidModel("MDP needs at least one action".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidModel(format!("discount {discount} outside [0, 1)")));
        }
        check_dim(num_states, reward.len(), "reward rows")?;
        check_dim(num_states, start.len(), "start distribution")?;

        let mut flat_t = Vec::with_capacity(num_states * num_actions * num_states);
        let mut flat_r = Vec::with_capacity(num_states * num_actions);
        for (s, (rows, rewards)) in transition.into_iter().zip(reward).enumerate() {
            check_dim(num_actions, rows.len(), "transition actions")?;
            check_dim(num_actions, rewards.len(), "reward actions")?;
            for (a, mut row) in rows.into_iter().enumerate() {
                check_dim(num_states, row.len(), "transition successors")?;
                normalize_distribution(&mut row, &format!("P(.|{s},{a})"))?;
                flat_t.extend(row);
            }
            for r in rewards {
                if !(r.is_finite() && r >= 0.0) {
                    return Err(Error::InvalidModel(format!("reward at state {s} must be finite and >= 0")));
                }
                flat_r.push(r);
            }
        }
        let mut start = start;
        normalize_distribution(&mut start, "start distribution")?;
        let reward_bound = flat_r.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            num_states,
            num_actions,
            transition: flat_t,
            reward: flat_r,
            start,
            discount,
            reward_bound,
            terminal: vec![false; num_states],
        })
    }

    /// Flags absorbing states. Each must self-loop with zero reward under every action.
    pub fn with_terminal_states(mut self, states: &[usize]) -> Result<Self> {
        for &s in states {
            if s >= self.num_states {
                return Err(Error::InvalidModel(format!("terminal state {s} out of range")));
            }
            for a in 0..self.num_actions {
                if self.transition_row(s, a)[s] != 1.0 || self.reward(s, a) != 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "terminal state {s} must self-loop with zero reward"
                    )));
                }
            }
            self.terminal[s] = true;
        }
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    /// `P(·|s,a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    /// Same MDP with a different discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidModel(format!("discount {discount} outside [0, 1)")));
        }
        Ok(Self {
            discount,
            ..self.clone()
        })
    }

    /// Same MDP with every reward shifted by `c` (must stay non-negative).
    pub fn with_reward_shift(&self, c: f64) -> Result<Self> {
        let reward: Vec<f64> = self.reward.iter().map(|r| r + c).collect();
        if reward.iter().any(|r| *r < 0.0) {
            return Err(Error::InvalidModel("shifted reward is negative".into()));
        }
        let reward_bound = reward.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            reward,
            reward_bound,
            ..self.clone()
        })
    }

    fn check_policy(&self, policy: &DMatrix<f64>) -> Result<()> {
        check_dim(self.num_states, policy.nrows(), "policy matrix rows")?;
        check_dim(self.num_actions, policy.ncols(), "policy matrix columns")?;
        for s in 0..self.num_states {
            let row = policy.row(s);
            if row.iter().any(|p| *p < 0.0 || !p.is_finite()) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(())
    }

    /// `Pπ(s, s') = Σ_a π(a|s) P(s'|s,a)`.
    pub fn policy_transition(&self, policy: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_policy(policy)?;
        let n = self.num_states;
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.num_actions {
                let pa = policy[(s, a)];
                if pa == 0.0 {
                    continue;
                }
                for (s2, prob) in self.transition_row(s, a).iter().enumerate() {
                    p[(s, s2)] += pa * prob;
                }
            }
        }
        Ok(p)
    }

    /// `Rπ(s) = Σ_a π(a|s) R(s,a)`.
    pub fn policy_reward(&self, policy: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_policy(policy)?;
        Ok(DVector::from_fn(self.num_states, |s, _| {
            (0..self.num_actions).map(|a| policy[(s, a)] * self.reward(s, a)).sum()
        }))
    }

    /// Action probabilities of a discrete policy over this MDP's states.
    pub fn policy_matrix<P>(&self, policy: &P, w: &DVector<f64>) -> Result<DMatrix<f64>>
    where
        P: crate::policy::DiscretePolicy<usize>,
    {
        let mut m = DMatrix::zeros(self.num_states, self.num_actions);
        for s in 0..self.num_states {
            let probs = policy.probabilities(w, &s);
            check_dim(self.num_actions, probs.len(), "policy actions")?;
            m.set_row(s, &probs.transpose());
        }
        Ok(m)
    }
}

fn lu_solve(m: DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let lu = m.lu();
    let x = lu
        .solve(b)
        .ok_or_else(|| Error::Numerical(format!("{what}: singular linear system")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite solution")));
    }
    Ok(x)
}

/// Solves the Bellman equation `V = Rπ + γ Pπ V`.
pub fn solve_state_values(mdp: &TabularMdp, policy: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = mdp.policy_transition(policy)?;
    let r = mdp.policy_reward(policy)?;
    let n = mdp.num_states();
    let a = DMatrix::identity(n, n) - p * mdp.discount();
    let v = lu_solve(a, &DMatrix::from_column_slice(n, 1, r.as_slice()), "solve_state_values")?;
    Ok(v.column(0).into_owned())
}

/// `Q(s,a) = R(s,a) + γ Σ_s' P(s'|s,a) V(s')`.
pub fn state_action_values(mdp: &TabularMdp, policy: &DMatrix<f64>, v: &DVector<f64>) -> Result<DMatrix<f64>> {
    mdp.check_policy(policy)?;
    check_dim(mdp.num_states(), v.len(), "value vector")?;
    let gamma = mdp.discount();
    Ok(DMatrix::from_fn(mdp.num_states(), mdp.num_actions(), |s, a| {
        let next: f64 = mdp.transition_row(s, a).iter().zip(v.iter()).map(|(p, v)| p * v).sum();
        mdp.reward(s, a) + gamma * next
    }))
}

/// `A(s,a) = Q(s,a) − V(s)`.
pub fn advantages(q: &DMatrix<f64>, v: &DVector<f64>, policy: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(q.nrows(), v.len(), "advantages: values")?;
    check_dim(q.nrows(), policy.nrows(), "advantages: policy rows")?;
    check_dim(q.ncols(), policy.ncols(), "advantages: policy columns")?;
    Ok(DMatrix::from_fn(q.nrows(), q.ncols(), |s, a| q[(s, a)] - v[s]))
}

/// Discounted state-action occupancy `p_γ(s,a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    pub values: DMatrix<f64>,
}

impl OccupancyTable {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// State marginal `d(s) = Σ_a p_γ(s,a)`.
    pub fn state_marginal(&self) -> DVector<f64> {
        DVector::from_fn(self.values.nrows(), |s, _| self.values.row(s).sum())
    }
}

/// Solves `d = D + γ Pπᵀ d` and spreads `d` over actions.
pub fn discounted_occupancy(mdp: &TabularMdp, policy: &DMatrix<f64>) -> Result<OccupancyTable> {
    let p = mdp.policy_transition(policy)?;
    let n = mdp.num_states();
    let a = DMatrix::identity(n, n) - p.transpose() * mdp.discount();
    let d = lu_solve(a, &DMatrix::from_column_slice(n, 1, mdp.start()), "discounted_occupancy")?;
    let values = DMatrix::from_fn(n, mdp.num_actions(), |s, act| d[(s, 0)] * policy[(s, act)]);
    Ok(OccupancyTable { values })
}

/// `U = Σ p_γ(s,a) R(s,a)`.
pub fn expected_return(mdp: &TabularMdp, policy: &DMatrix<f64>) -> Result<f64> {
    let occ = discounted_occupancy(mdp, policy)?;
    let mut u = 0.0;
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            u += occ.values[(s, a)] * mdp.reward(s, a);
        }
    }
    Ok(u)
}

/// Stationary distribution `μ = μ Pπ` of an ergodic chain (left Perron vector).
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    check_dim(n, p.ncols(), "stationary_distribution: square matrix")?;
    // Replace one balance equation by the normalization Σμ = 1.
    let mut a = DMatrix::identity(n, n) - p.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DMatrix::zeros(n, 1);
    b[(n - 1, 0)] = 1.0;
    let mu = lu_solve(a, &b, "stationary_distribution")?;
    Ok(mu.column(0).into_owned())
}

/// One step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<S, A> {
    pub state: S,
    pub action: A,
    pub reward: f64,
}

/// A sampled state-action-reward sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S, A> {
    pub steps: Vec<Step<S, A>>,
    /// The episode ended in an absorbing state before the horizon.
    pub terminal: bool,
}

impl<S, A> Default for Trajectory<S, A> {
    fn default() -> Self {
        Self {
            steps: Vec::new(),
            terminal: false,
        }
    }
}

impl<S, A> Trajectory<S, A> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `Σ_t γ^{t-1} R_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut g = 1.0;
        let mut total = 0.0;
        for step in &self.steps {
            total += g * step.reward;
            g *= gamma;
        }
        total
    }

    /// Discounted returns-to-go `Σ_{τ≥t} γ^{τ-t} R_τ` for every step.
    pub fn returns_to_go(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.steps.len()];
        let mut acc = 0.0;
        for (t, step) in self.steps.iter().enumerate().rev() {
            acc = step.reward + gamma * acc;
            out[t] = acc;
        }
        out
    }
}

/// Samples `s_1 ~ D`, then `a_t ~ π(·|s_t)`, `s_{t+1} ~ P(·|s_t,a_t)`, stopping
/// after `horizon` steps or on entering an absorbing state.
pub fn sample_trajectory<P, R>(
    mdp: &TabularMdp,
    policy: &P,
    w: &DVector<f64>,
    horizon: usize,
    rng: &mut R,
) -> Trajectory<usize, usize>
where
    P: DifferentiablePolicy<usize, Action = usize>,
    R: Rng + ?Sized,
{
    let start = DVector::from_column_slice(mdp.start());
    let mut s = sample_index(&start, rng);
    let mut traj = Trajectory::default();
    for _ in 0..horizon {
        if mdp.is_terminal(s) {
            traj.terminal = true;
            break;
        }
        let a = policy.sample(w, &s, rng);
        traj.steps.push(Step {
            state: s,
            action: a,
            reward: mdp.reward(s, a),
        });
        let row = DVector::from_column_slice(mdp.transition_row(s, a));
        s = sample_index(&row, rng);
    }
    traj
}

/// Random MDP generators used by tests, benches and the validation suites.
pub mod random {
    use super::*;

    fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut v: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // Push the rounding residue into the largest entry so the sum is exact enough.
        let err = 1.0 - v.iter().sum::<f64>();
        let imax = (0..n).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        v[imax] += err;
        v
    }

    /// Dense random MDP with rewards uniform on `[r_lo, r_hi]`.
    pub fn random_mdp<R: Rng + ?Sized>(
        states: usize,
        actions: usize,
        discount: f64,
        r_lo: f64,
        r_hi: f64,
        rng: &mut R,
    ) -> TabularMdp {
        let transition = (0..states)
            .map(|_| (0..actions).map(|_| random_distribution(states, rng)).collect())
            .collect();
        let reward = (0..states)
            .map(|_| (0..actions).map(|_| rng.gen_range(r_lo..=r_hi)).collect())
            .collect();
        let start = random_distribution(states, rng);
        TabularMdp::new(transition, reward, start, discount).expect("generated MDP is valid")
    }

    /// Random stochastic policy matrix.
    pub fn random_policy_matrix<R: Rng + ?Sized>(states: usize, actions: usize, rng: &mut R) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(states, actions);
        for s in 0..states {
            let row = random_distribution(actions, rng);
            for a in 0..actions {
                m[(s, a)] = row[a];
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::random::*;
    use super::*;
    use crate::policy::TabularSoftmaxPolicy;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_reward_mdp(c: f64, gamma: f64) -> TabularMdp {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = random_mdp(3, 2, gamma, 0.0, 1.0, &mut rng);
        let doc: MdpDocument = base.into();
        let reward = vec![vec![c; 2]; 3];
        TabularMdp::new(doc.transition, reward, doc.start, gamma).unwrap()
    }

    /// `Σ_{t<T} γ^t (D Pπ^t) ⊙ π` by repeated matrix application.
    fn truncated_occupancy(mdp: &TabularMdp, pi: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
        let p = mdp.policy_transition(pi).unwrap();
        let mut marginal = DVector::from_column_slice(mdp.start());
        let mut d = DVector::zeros(mdp.num_states());
        let mut g = 1.0;
        for _ in 0..horizon {
            d += &marginal * g;
            marginal = p.tr_mul(&marginal);
            g *= mdp.discount();
        }
        DMatrix::from_fn(mdp.num_states(), mdp.num_actions(), |s, a| d[s] * pi[(s, a)])
    }

    #[test]
    fn rejects_malformed_models() {
        let ok_t = vec![vec![vec![1.0]]];
        assert!(TabularMdp::new(ok_t.clone(), vec![vec![1.0]], vec![1.0], 1.0).is_err());
        assert!(TabularMdp::new(ok_t.clone(), vec![vec![-1.0]], vec![1.0], 0.5).is_err());
        assert!(TabularMdp::new(vec![vec![vec![0.9]]], vec![vec![1.0]], vec![1.0], 0.5).is_err());
        assert!(TabularMdp::new(ok_t, vec![vec![1.0]], vec![0.5], 0.5).is_err());
    }

    #[test]
    fn renormalizes_within_tolerance() {
        let t = vec![vec![vec![0.5 + 1e-13, 0.5]], vec![vec![0.0, 1.0]]];
        let m = TabularMdp::new(t, vec![vec![1.0], vec![0.0]], vec![1.0, 0.0], 0.5).unwrap();
        assert!((m.transition_row(0, 0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_reward_values() {
        let mdp = constant_reward_mdp(2.0, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pi = random_policy_matrix(3, 2, &mut rng);
        let v = solve_state_values(&mdp, &pi).unwrap();
        assert!(v.iter().all(|x| (x - 20.0).abs() < 1e-10));
        let q = state_action_values(&mdp, &pi, &v).unwrap();
        assert!(q.iter().all(|x| (x - 20.0).abs() < 1e-10));
        let a = advantages(&q, &v, &pi).unwrap();
        assert!(a.amax() < 1e-10);
        assert!((expected_return(&mdp, &pi).unwrap() - 20.0).abs() < 1e-10);
    }

    #[test]
    fn myopic_discount() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(4, 3, 0.0, 0.0, 1.0, &mut rng);
        let pi = random_policy_matrix(4, 3, &mut rng);
        let v = solve_state_values(&mdp, &pi).unwrap();
        let r = mdp.policy_reward(&pi).unwrap();
        assert!((v - r).amax() < 1e-15);
        let q = state_action_values(&mdp, &pi, &solve_state_values(&mdp, &pi).unwrap()).unwrap();
        assert!(q.iter().enumerate().all(|(i, x)| (x - mdp.reward(i % 4, i / 4)).abs() < 1e-15));
        let occ = discounted_occupancy(&mdp, &pi).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                assert!((occ.values[(s, a)] - mdp.start()[s] * pi[(s, a)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bandit_advantages() {
        let mdp = TabularMdp::new(vec![vec![vec![1.0], vec![1.0]]], vec![vec![1.0, 0.0]], vec![1.0], 0.0).unwrap();
        let pi = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let v = solve_state_values(&mdp, &pi).unwrap();
        let q = state_action_values(&mdp, &pi, &v).unwrap();
        let a = advantages(&q, &v, &pi).unwrap();
        assert_eq!(a.as_slice(), &[0.5, -0.5]);
    }

    #[test]
    fn single_state_occupancy() {
        let mdp = TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], vec![1.0], 0.75).unwrap();
        let occ = discounted_occupancy(&mdp, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((occ.values[(0, 0)] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn values_match_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(4, 2, 0.9, 0.0, 1.0, &mut rng);
        let pi = random_policy_matrix(4, 2, &mut rng);
        let v = solve_state_values(&mdp, &pi).unwrap();
        let p = mdp.policy_transition(&pi).unwrap();
        let r = mdp.policy_reward(&pi).unwrap();
        let mut oracle = DVector::zeros(4);
        let mut term = r.clone();
        let mut g = 1.0;
        for _ in 0..500 {
            oracle += &term * g;
            term = &p * term;
            g *= 0.9;
        }
        assert!((v - oracle).amax() < 1e-6);
    }

    #[test]
    fn occupancy_matches_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = random_mdp(5, 3, 0.8, 0.0, 1.0, &mut rng);
        let pi = random_policy_matrix(5, 3, &mut rng);
        let occ = discounted_occupancy(&mdp, &pi).unwrap();
        let oracle = truncated_occupancy(&mdp, &pi, 300);
        assert!((occ.values - oracle).amax() < 1e-8);
    }

    #[test]
    fn serde_round_trip_uses_fixed_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_mdp(2, 2, 0.5, 0.0, 1.0, &mut rng);
        let text = serde_json::to_string(&mdp).unwrap();
        for key in ["\"states\"", "\"actions\"", "\"gamma\"", "\"start\"", "\"transition\"", "\"reward\""] {
            assert!(text.contains(key));
        }
        let back: TabularMdp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mdp);
        let bad = text.replacen("\"gamma\"", "\"discount\"", 1);
        assert!(serde_json::from_str::<TabularMdp>(&bad).is_err());
    }

    #[test]
    fn terminal_states_stop_sampling() {
        let t = vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]];
        let mdp = TabularMdp::new(t, vec![vec![1.0], vec![0.0]], vec![1.0, 0.0], 0.9)
            .unwrap()
            .with_terminal_states(&[1])
            .unwrap();
        let pol = TabularSoftmaxPolicy::uniform(2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = sample_trajectory(&mdp, &pol, &DVector::zeros(2), 10, &mut rng);
        assert_eq!(traj.len(), 1);
        assert!(traj.terminal);
    }

    #[test]
    fn deterministic_chain_sampling() {
        // 0 -> 1 -> 2 -> 0 with one action.
        let t = vec![vec![vec![0.0, 1.0, 0.0]], vec![vec![0.0, 0.0, 1.0]], vec![vec![1.0, 0.0, 0.0]]];
        let mdp = TabularMdp::new(t, vec![vec![0.0], vec![1.0], vec![2.0]], vec![1.0, 0.0, 0.0], 0.9).unwrap();
        let pol = TabularSoftmaxPolicy::uniform(3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = sample_trajectory(&mdp, &pol, &DVector::zeros(3), 5, &mut rng);
        let states: Vec<usize> = traj.steps.iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 1, 2, 0, 1]);
        assert!(traj.steps.iter().all(|s| s.reward == s.state as f64));
        let one = sample_trajectory(&mdp, &pol, &DVector::zeros(3), 1, &mut rng);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn visit_frequencies_match_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mdp = random_mdp(3, 2, 0.9, 0.0, 1.0, &mut rng);
        let pol = TabularSoftmaxPolicy::uniform(3, 2).unwrap();
        let w = DVector::from_vec(vec![0.3, -0.3, 1.0, 0.0, -0.5, 0.2]);
        let pi = mdp.policy_matrix(&pol, &w).unwrap();
        let p = mdp.policy_transition(&pi).unwrap();
        let horizon = 4;
        let n = 100_000;
        let mut counts = vec![vec![0usize; 3]; horizon];
        for _ in 0..n {
            let traj = sample_trajectory(&mdp, &pol, &w, horizon, &mut rng);
            for (t, step) in traj.steps.iter().enumerate() {
                counts[t][step.state] += 1;
            }
        }
        let mut marginal = DVector::from_column_slice(mdp.start());
        for row in counts.iter() {
            for s in 0..3 {
                let q = marginal[s];
                let se = (q * (1.0 - q) / n as f64).sqrt();
                assert!((row[s] as f64 / n as f64 - q).abs() <= 3.0 * se + 1e-12);
            }
            marginal = p.tr_mul(&marginal);
        }
    }

    #[test]
    fn stationary_distribution_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = random_mdp(4, 2, 0.9, 0.0, 1.0, &mut rng);
        let pi = random_policy_matrix(4, 2, &mut rng);
        let p = mdp.policy_transition(&pi).unwrap();
        let mu = stationary_distribution(&p).unwrap();
        assert!((p.tr_mul(&mu) - &mu).amax() < 1e-12);
        assert!((mu.sum() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn occupancy_mass_and_objective_paths(seed in any::<u64>(), states in 1usize..6, actions in 1usize..4, gamma in 0.0f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = random_mdp(states, actions, gamma, 0.0, 1.0, &mut rng);
            let pi = random_policy_matrix(states, actions, &mut rng);
            let occ = discounted_occupancy(&mdp, &pi).unwrap();
            let scale = 1.0 / (1.0 - gamma);
            prop_assert!((occ.total() - scale).abs() <= 1e-9 * scale.max(1.0));
            let v = solve_state_values(&mdp, &pi).unwrap();
            let u_start: f64 = mdp.start().iter().zip(v.iter()).map(|(d, v)| d * v).sum();
            let u = expected_return(&mdp, &pi).unwrap();
            prop_assert!((u - u_start).abs() <= 1e-9 * scale);
            // Bellman residual.
            let p = mdp.policy_transition(&pi).unwrap();
            let r = mdp.policy_reward(&pi).unwrap();
            prop_assert!((&r + &p * &v * gamma - &v).amax() <= 1e-10 * scale);
            // Advantage centering and Q/V consistency.
            let q = state_action_values(&mdp, &pi, &v).unwrap();
            let a = advantages(&q, &v, &pi).unwrap();
            for s in 0..states {
                let centered: f64 = (0..actions).map(|k| pi[(s, k)] * a[(s, k)]).sum();
                prop_assert!(centered.abs() <= 1e-10 * scale);
                let qv: f64 = (0..actions).map(|k| pi[(s, k)] * q[(s, k)]).sum();
                prop_assert!((qv - v[s]).abs() <= 1e-9 * scale);
            }
            // Shifting every reward by c raises U by c/(1-γ).
            let c = 0.7;
            let shifted = expected_return(&mdp.with_reward_shift(c).unwrap(), &pi).unwrap();
            prop_assert!((shifted - u - c * scale).abs() <= 1e-9 * scale);
        }
    }
}
