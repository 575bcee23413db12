use nalgebra::DVector;

use super::{ExactEvaluation, ExactModel};
use crate::error::Result;

/// Why a coordinate breaks value consistency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WitnessKind {
    /// `∂V(state)/∂w_i` and `∂V(other)/∂w_i` are non-zero with opposite signs.
    SignConflict,
    /// `∂V(state)/∂w_i` is zero while `∂V(other)/∂w_i` is not, yet the policy
    /// in `state` still moves with `w_i`.
    ZeroValueMovingPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsistencyWitness {
    pub coordinate: usize,
    pub state: usize,
    pub other: usize,
    pub kind: WitnessKind,
}

/// Pointwise value-consistency verdict at one parameter vector.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub consistent_at_w: bool,
    pub witnesses: Vec<ConsistencyWitness>,
    /// Magnitude below which a value-gradient entry counts as zero.
    pub value_threshold: f64,
    /// Magnitude below which `∂π/∂w_i` counts as zero.
    pub policy_threshold: f64,
}

impl ConsistencyReport {
    /// True if some witness mentions any of `states`.
    pub fn involves_any(&self, states: &[usize]) -> bool {
        self.witnesses
            .iter()
            .any(|w| states.contains(&w.state) || states.contains(&w.other))
    }
}

/// Checks the sign conditions on `∇V` coordinate by coordinate at `w`.
///
/// `tol` is relative: gradient entries below `tol · max|∇V|` are zero, and
/// likewise for `∂π(a|s)/∂w_i` against its largest entry.
pub fn check_value_consistency<M: ExactModel + ?Sized>(model: &M, w: &DVector<f64>, tol: f64) -> Result<ConsistencyReport> {
    let eval = ExactEvaluation::new(model, w)?;
    let grads = eval.value_gradients()?.rows;
    let n_states = grads.nrows();
    let value_threshold = tol * grads.amax();

    // ∂π(b|s)/∂w = π_b ∇log π_b.
    let policy_grads: Vec<Vec<DVector<f64>>> = eval
        .branches
        .iter()
        .map(|list| list.iter().map(|b| &b.terms.score * b.prob).collect())
        .collect();
    let policy_scale = policy_grads
        .iter()
        .flatten()
        .fold(0.0_f64, |acc, g| acc.max(g.amax()));
    let policy_threshold = tol * policy_scale;

    let mut witnesses = Vec::new();
    for i in 0..grads.ncols() {
        let nonzero: Vec<usize> = (0..n_states).filter(|&s| grads[(s, i)].abs() > value_threshold).collect();
        let Some(&reference) = nonzero
            .iter()
            .max_by(|&&a, &&b| grads[(a, i)].abs().total_cmp(&grads[(b, i)].abs()))
        else {
            continue;
        };
        for (k, &s) in nonzero.iter().enumerate() {
            for &t in &nonzero[k + 1..] {
                if grads[(s, i)].signum() != grads[(t, i)].signum() {
                    witnesses.push(ConsistencyWitness {
                        coordinate: i,
                        state: s,
                        other: t,
                        kind: WitnessKind::SignConflict,
                    });
                }
            }
        }
        for s in (0..n_states).filter(|s| !nonzero.contains(s)) {
            if policy_grads[s].iter().any(|g| g[i].abs() > policy_threshold) {
                witnesses.push(ConsistencyWitness {
                    coordinate: i,
                    state: s,
                    other: reference,
                    kind: WitnessKind::ZeroValueMovingPolicy,
                });
            }
        }
    }

    Ok(ConsistencyReport {
        consistent_at_w: witnesses.is_empty(),
        witnesses,
        value_threshold,
        policy_threshold,
    })
}
