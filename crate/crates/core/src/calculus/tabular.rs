use nalgebra::{DMatrix, DVector};

use super::{Branch, ExactModel};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::policy::{BlockMap, DiscretePolicy, GibbsPolicy, LogPolicyTerms, PolicyTraits, TableFeatures};

/// A finite MDP paired with a discrete policy over its actions.
#[derive(Debug, Clone)]
pub struct TabularModel<P> {
    pub mdp: TabularMdp,
    pub policy: P,
}

impl<P: DiscretePolicy<usize>> TabularModel<P> {
    pub fn new(mdp: TabularMdp, policy: P) -> Result<Self> {
        for s in 0..mdp.num_states() {
            let k = policy.num_actions(&s);
            if k != mdp.num_actions() {
                return Err(Error::InvalidModel(format!(
                    "policy offers {k} actions in state {s}, MDP has {}",
                    mdp.num_actions()
                )));
            }
        }
        Ok(Self { mdp, policy })
    }
}

impl<P: DiscretePolicy<usize>> ExactModel for TabularModel<P> {
    fn num_states(&self) -> usize {
        self.mdp.num_states()
    }

    fn dim(&self) -> usize {
        self.policy.dim()
    }

    fn discount(&self) -> f64 {
        self.mdp.discount()
    }

    fn start(&self) -> &[f64] {
        self.mdp.start()
    }

    fn traits(&self) -> PolicyTraits {
        self.policy.traits()
    }

    fn block_map(&self) -> BlockMap {
        self.policy.block_map()
    }

    fn branches(&self, w: &DVector<f64>, s: usize) -> Vec<Branch> {
        let e = self.policy.evaluate(w, &s);
        (0..self.mdp.num_actions())
            .map(|a| Branch {
                prob: e.probs[a],
                reward: self.mdp.reward(s, a),
                next: DVector::from_column_slice(self.mdp.transition_row(s, a)),
                terms: LogPolicyTerms {
                    log_prob: e.log_probs[a],
                    score: e.scores.column(a).into_owned(),
                    hess: e.hessians.get(a).clone(),
                },
            })
            .collect()
    }

    fn anchored_terms(&self, _anchor: &DVector<f64>, eval: &DVector<f64>, s: usize) -> Vec<LogPolicyTerms> {
        let e = self.policy.evaluate(eval, &s);
        (0..self.mdp.num_actions())
            .map(|a| LogPolicyTerms {
                log_prob: e.log_probs[a],
                score: e.scores.column(a).into_owned(),
                hess: e.hessians.get(a).clone(),
            })
            .collect()
    }
}

/// A random dense MDP with a Gibbs policy on random `n`-dimensional features.
pub fn random_gibbs_model<R: rand::Rng + ?Sized>(
    states: usize,
    actions: usize,
    n: usize,
    discount: f64,
    rng: &mut R,
) -> TabularModel<GibbsPolicy<TableFeatures>> {
    let mdp = crate::mdp::random::random_mdp(states, actions, discount, 0.0, 1.0, rng);
    let tables = (0..states)
        .map(|_| DMatrix::from_fn(n, actions, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let features = TableFeatures::new(tables).expect("random features are valid");
    TabularModel::new(mdp, GibbsPolicy::new(features)).expect("action counts agree")
}
