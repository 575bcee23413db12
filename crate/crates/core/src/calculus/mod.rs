//! Exact policy-gradient calculus on finite-state models.
//!
//! A model is described state by state as a list of [`Branch`]es: the
//! outcomes of choosing an action, each with its probability under the
//! current policy, its reward, its successor distribution and the
//! log-policy derivatives. Discrete MDPs have one branch per action
//! ([`TabularModel`]); the Gaussian policy on a finite-state chain uses one
//! branch per quadrature node ([`QuadratureModel`]).
//!
//! [`ExactEvaluation`] solves for the values and occupancies once and then
//! assembles the gradient, every Hessian term, both Fisher forms, the value
//! gradients and the EM surrogate.

mod consistency;
pub mod fd;
mod quadrature;
mod tabular;

pub use consistency::{check_value_consistency, ConsistencyReport, ConsistencyWitness, WitnessKind};
pub use quadrature::{gauss_hermite, ContinuousActionChain, QuadratureModel, RewardBump};
pub use tabular::{random_gibbs_model, TabularModel};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::policy::{BlockMap, LogPolicyTerms, PolicyTraits};

/// One action outcome of a state.
#[derive(Debug, Clone)]
pub struct Branch {
    /// Probability (or quadrature weight) of this branch under the policy.
    pub prob: f64,
    pub reward: f64,
    /// Successor distribution over states.
    pub next: DVector<f64>,
    pub terms: LogPolicyTerms,
}

/// A finite-state model whose policy-dependent quantities can be enumerated.
pub trait ExactModel {
    fn num_states(&self) -> usize;
    fn dim(&self) -> usize;
    fn discount(&self) -> f64;
    fn start(&self) -> &[f64];
    fn traits(&self) -> PolicyTraits;
    fn block_map(&self) -> BlockMap {
        BlockMap::single(self.dim())
    }

    /// The branches of state `s` under parameters `w`.
    fn branches(&self, w: &DVector<f64>, s: usize) -> Vec<Branch>;

    /// Log-policy terms evaluated at `eval` for the actions that
    /// `branches(anchor, s)` enumerates, in the same order.
    fn anchored_terms(&self, anchor: &DVector<f64>, eval: &DVector<f64>, s: usize) -> Vec<LogPolicyTerms>;

    /// Objective `U(w)`; solves only what is needed for the value.
    fn objective(&self, w: &DVector<f64>) -> Result<f64> {
        Ok(ExactEvaluation::new(self, w)?.expected_return())
    }

    /// The exact EM update from `anchor`: the maximizer of the anchored surrogate.
    fn m_step(&self, anchor: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(crate::optimizers::em_step_newton(self, anchor)?.w)
    }
}

/// Every term of the Hessian decomposition at one parameter vector.
#[derive(Debug, Clone)]
pub struct HessianDecomposition {
    pub grad: DVector<f64>,
    pub h1: DMatrix<f64>,
    pub h2: DMatrix<f64>,
    pub h12: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub v1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    /// Curvature form `−Σ p_γ ∇∇ log π`.
    pub fisher: DMatrix<f64>,
    /// `H1 + H2 + H12 + H12ᵀ`.
    pub hessian: DMatrix<f64>,
}

impl HessianDecomposition {
    /// `H12 + H12ᵀ`.
    pub fn cross_term(&self) -> DMatrix<f64> {
        &self.h12 + self.h12.transpose()
    }
}

/// Fisher information in its two forms.
#[derive(Debug, Clone)]
pub struct FisherForms {
    /// `Σ p_γ ∇log π ∇log πᵀ`.
    pub outer: DMatrix<f64>,
    /// `−Σ p_γ ∇∇ log π`.
    pub curvature: DMatrix<f64>,
}

/// `∇_w V(s)` for every state, as rows of an `|S| × n` matrix.
#[derive(Debug, Clone)]
pub struct ValueGradientField {
    pub rows: DMatrix<f64>,
}

impl ValueGradientField {
    pub fn state(&self, s: usize) -> DVector<f64> {
        self.rows.row(s).transpose()
    }

    /// `E_{s~D}[∇V(s)]`.
    pub fn start_average(&self, start: &[f64]) -> DVector<f64> {
        self.rows.tr_mul(&DVector::from_column_slice(start))
    }
}

/// Values, occupancies and branch data of a model at one parameter vector.
#[derive(Debug, Clone)]
pub struct ExactEvaluation {
    pub w: DVector<f64>,
    pub discount: f64,
    pub start: Vec<f64>,
    pub branches: Vec<Vec<Branch>>,
    /// `V(s)`.
    pub values: DVector<f64>,
    /// Discounted state occupancy `d(s)`.
    pub occupancy: DVector<f64>,
    /// `Q` per branch.
    pub q: Vec<Vec<f64>>,
    /// `Pπ`.
    pub policy_transition: DMatrix<f64>,
    dim: usize,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ExactEvaluation {
    pub fn new<M: ExactModel + ?Sized>(model: &M, w: &DVector<f64>) -> Result<Self> {
        let n_states = model.num_states();
        let dim = model.dim();
        check_dim(dim, w.len(), "parameter vector")?;
        let gamma = model.discount();
        let branches: Vec<Vec<Branch>> = (0..n_states).map(|s| model.branches(w, s)).collect();

        let mut p = DMatrix::zeros(n_states, n_states);
        let mut r = DVector::zeros(n_states);
        for (s, list) in branches.iter().enumerate() {
            for b in list {
                r[s] += b.prob * b.reward;
                for (s2, pn) in b.next.iter().enumerate() {
                    p[(s, s2)] += b.prob * pn;
                }
            }
        }
        let system = DMatrix::identity(n_states, n_states) - &p * gamma;
        let lu = system.clone().lu();
        let values = lu
            .solve(&r)
            .ok_or_else(|| Error::Numerical("Bellman system is singular".into()))?;
        let occupancy = system
            .transpose()
            .lu()
            .solve(&DVector::from_column_slice(model.start()))
            .ok_or_else(|| Error::Numerical("occupancy system is singular".into()))?;
        if values.iter().chain(occupancy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite values or occupancy".into()));
        }
        let q = branches
            .iter()
            .map(|list| list.iter().map(|b| b.reward + gamma * b.next.dot(&values)).collect())
            .collect();
        Ok(Self {
            w: w.clone(),
            discount: gamma,
            start: model.start().to_vec(),
            branches,
            values,
            occupancy,
            q,
            policy_transition: p,
            dim,
            lu,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `U = Σ_s d(s) Σ_b π_b R_b` (occupancy form).
    pub fn expected_return(&self) -> f64 {
        self.branches
            .iter()
            .enumerate()
            .map(|(s, list)| self.occupancy[s] * list.iter().map(|b| b.prob * b.reward).sum::<f64>())
            .sum()
    }

    /// `U = Σ_s D(s) V(s)` (start-distribution form).
    pub fn expected_return_from_values(&self) -> f64 {
        self.start.iter().zip(self.values.iter()).map(|(d, v)| d * v).sum()
    }

    /// Occupancy `p_γ(s, b) = d(s) π_b`.
    pub fn occupancy_of(&self, s: usize, b: usize) -> f64 {
        self.occupancy[s] * self.branches[s][b].prob
    }

    /// Advantage of branch `b` in state `s`.
    pub fn advantage(&self, s: usize, b: usize) -> f64 {
        self.q[s][b] - self.values[s]
    }

    /// Policy gradient `Σ p_γ Q ∇log π`.
    pub fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim);
        for (s, list) in self.branches.iter().enumerate() {
            for (b, br) in list.iter().enumerate() {
                g.axpy(self.occupancy_of(s, b) * self.q[s][b], &br.terms.score, 1.0);
            }
        }
        g
    }

    /// Solves `(I − γPπ) ∇V = B` with `B(s) = Σ_b π_b Q_b ∇log π_b`.
    pub fn value_gradients(&self) -> Result<ValueGradientField> {
        let n_states = self.branches.len();
        let mut rhs = DMatrix::zeros(n_states, self.dim);
        for (s, list) in self.branches.iter().enumerate() {
            for (b, br) in list.iter().enumerate() {
                let c = br.prob * self.q[s][b];
                for i in 0..self.dim {
                    rhs[(s, i)] += c * br.terms.score[i];
                }
            }
        }
        let rows = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("value-gradient system is singular".into()))?;
        Ok(ValueGradientField { rows })
    }

    /// Both Fisher forms.
    pub fn fisher(&self) -> FisherForms {
        let n = self.dim;
        let mut outer = DMatrix::zeros(n, n);
        let mut curvature = DMatrix::zeros(n, n);
        for (s, list) in self.branches.iter().enumerate() {
            for (b, br) in list.iter().enumerate() {
                let p = self.occupancy_of(s, b);
                outer.ger(p, &br.terms.score, &br.terms.score, 1.0);
                curvature -= &br.terms.hess * p;
            }
        }
        FisherForms { outer, curvature }
    }

    /// The full Hessian decomposition.
    pub fn decomposition(&self) -> Result<HessianDecomposition> {
        let n = self.dim;
        let grad_v = self.value_gradients()?;
        let zero = || DMatrix::<f64>::zeros(n, n);
        let (mut h1, mut h2, mut a1, mut a2, mut v1, mut v2, mut h12, mut fisher) =
            (zero(), zero(), zero(), zero(), zero(), zero(), zero(), zero());
        for (s, list) in self.branches.iter().enumerate() {
            for (b, br) in list.iter().enumerate() {
                let p = self.occupancy_of(s, b);
                if p == 0.0 {
                    continue;
                }
                let q = self.q[s][b];
                let v = self.values[s];
                let a = q - v;
                let score = &br.terms.score;
                let hess = &br.terms.hess;
                h1.ger(p * q, score, score, 1.0);
                a1.ger(p * a, score, score, 1.0);
                v1.ger(p * v, score, score, 1.0);
                h2 += hess * (p * q);
                a2 += hess * (p * a);
                v2 += hess * (p * v);
                fisher -= hess * p;
                // Expected successor value gradient Σ_s' P(s'|s,a) ∇V(s').
                let next_grad = grad_v.rows.tr_mul(&br.next);
                h12.ger(self.discount * p, score, &next_grad, 1.0);
            }
        }
        let hessian = &h1 + &h2 + &h12 + h12.transpose();
        Ok(HessianDecomposition {
            grad: self.gradient(),
            h1,
            h2,
            h12,
            a1,
            a2,
            v1,
            v2,
            fisher,
            hessian,
        })
    }

    /// The EM surrogate weights `p_γ Q` of this evaluation.
    pub fn surrogate(&self) -> AnchoredSurrogate {
        AnchoredSurrogate {
            anchor: self.w.clone(),
            weights: self
                .branches
                .iter()
                .enumerate()
                .map(|(s, list)| (0..list.len()).map(|b| self.occupancy_of(s, b) * self.q[s][b]).collect())
                .collect(),
        }
    }
}

/// The EM surrogate `Q(w, w') = Σ p_γ(w') Q(w') log π(a|s; w)` with the
/// weights frozen at the anchor `w'`.
#[derive(Debug, Clone)]
pub struct AnchoredSurrogate {
    pub anchor: DVector<f64>,
    /// `p_γ Q` per state and branch at the anchor.
    pub weights: Vec<Vec<f64>>,
}

/// Value, gradient and Hessian of the surrogate in its first argument.
#[derive(Debug, Clone)]
pub struct SurrogateTerms {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl AnchoredSurrogate {
    pub fn evaluate<M: ExactModel + ?Sized>(&self, model: &M, w: &DVector<f64>) -> SurrogateTerms {
        let n = model.dim();
        let mut out = SurrogateTerms {
            value: 0.0,
            grad: DVector::zeros(n),
            hess: DMatrix::zeros(n, n),
        };
        for (s, weights) in self.weights.iter().enumerate() {
            let terms = model.anchored_terms(&self.anchor, w, s);
            for (c, t) in weights.iter().zip(terms.iter()) {
                if *c == 0.0 {
                    continue;
                }
                out.value += c * t.log_prob;
                out.grad.axpy(*c, &t.score, 1.0);
                out.hess += &t.hess * *c;
            }
        }
        out
    }

    /// `Σ p_γ Q ∇log π(a|s; w)` only; the finite-difference Gauss-Newton product needs just this.
    pub fn weighted_score<M: ExactModel + ?Sized>(&self, model: &M, w: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(model.dim());
        for (s, weights) in self.weights.iter().enumerate() {
            let terms = model.anchored_terms(&self.anchor, w, s);
            for (c, t) in weights.iter().zip(terms.iter()) {
                g.axpy(*c, &t.score, 1.0);
            }
        }
        g
    }
}

/// `∇U` at `w`.
pub fn policy_gradient_exact<M: ExactModel + ?Sized>(model: &M, w: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(ExactEvaluation::new(model, w)?.gradient())
}

/// `∇V(s)` for every state at `w`.
pub fn value_gradients<M: ExactModel + ?Sized>(model: &M, w: &DVector<f64>) -> Result<ValueGradientField> {
    ExactEvaluation::new(model, w)?.value_gradients()
}

/// Hessian decomposition at `w`.
pub fn hessian_decomposition<M: ExactModel + ?Sized>(model: &M, w: &DVector<f64>) -> Result<HessianDecomposition> {
    ExactEvaluation::new(model, w)?.decomposition()
}

/// Both Fisher forms at `w`.
pub fn fisher_information<M: ExactModel + ?Sized>(model: &M, w: &DVector<f64>) -> Result<FisherForms> {
    Ok(ExactEvaluation::new(model, w)?.fisher())
}

/// EM surrogate `Q(w_eval, w_anchor)`.
pub fn em_surrogate_value<M: ExactModel + ?Sized>(
    model: &M,
    w_eval: &DVector<f64>,
    w_anchor: &DVector<f64>,
) -> Result<f64> {
    check_dim(model.dim(), w_eval.len(), "surrogate evaluation point")?;
    let surrogate = ExactEvaluation::new(model, w_anchor)?.surrogate();
    Ok(surrogate.evaluate(model, w_eval).value)
}
