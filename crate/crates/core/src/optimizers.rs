//! Search directions, step-size rules and the ascent loop.
//!
//! [`compute_direction`] turns a gradient plus whatever curvature is at hand
//! into a search direction. [`run_policy_search`] drives the loop
//! `w ← w + α d` on an [`ExactModel`]; the sampled experiments in
//! [`crate::experiments`] run their own loops on top of the same pieces.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calculus::{AnchoredSurrogate, ExactEvaluation, ExactModel, HessianDecomposition};
use crate::error::{Error, Result};
use crate::estimators::EstimateBundle;
use crate::linalg::{conjugate_gradient, min_eigenvalue, solve_symmetric, spectral_norm, CgOptions, FnOperator};
use crate::policy::{BlockMap, GaussianLinearPolicy, GaussianNoise, StateFeatures};

/// Which preconditioner the update uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Steepest,
    Natural,
    #[serde(rename = "gauss_newton_1")]
    GaussNewton1,
    #[serde(rename = "gauss_newton_2")]
    GaussNewton2,
    #[serde(rename = "diag_gn_1")]
    DiagGn1,
    #[serde(rename = "diag_gn_2")]
    DiagGn2,
    #[serde(rename = "cg_gn_2")]
    CgGn2,
    Em,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Steepest => "steepest",
            RuleKind::Natural => "natural",
            RuleKind::GaussNewton1 => "gauss_newton_1",
            RuleKind::GaussNewton2 => "gauss_newton_2",
            RuleKind::DiagGn1 => "diag_gn_1",
            RuleKind::DiagGn2 => "diag_gn_2",
            RuleKind::CgGn2 => "cg_gn_2",
            RuleKind::Em => "em",
        }
    }
}

/// How the CG Gauss-Newton method multiplies by `−H2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MvpMode {
    /// Multiply by the assembled matrix.
    Exact,
    /// `(S(w) − S(w + εp)) / ε` with `S` the surrogate's weighted score.
    FiniteDifference { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateRule {
    pub kind: RuleKind,
    /// Added to the preconditioner diagonal (natural, GN1, GN2).
    #[serde(default)]
    pub ridge: f64,
    /// Zero the off-block entries of the preconditioner.
    #[serde(default)]
    pub blockwise: bool,
    /// CG iteration cap; the dimension if absent.
    #[serde(default)]
    pub cg_iterations: Option<usize>,
    #[serde(default = "default_mvp")]
    pub mvp: MvpMode,
}

fn default_mvp() -> MvpMode {
    MvpMode::Exact
}

impl UpdateRule {
    pub fn new(kind: RuleKind) -> Self {
        Self {
            kind,
            ridge: 0.0,
            blockwise: false,
            cg_iterations: None,
            mvp: MvpMode::Exact,
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }
}

/// Step-size rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `α_t = a / (1 + t/100)`.
    Decaying { a: f64 },
    /// Constant or decaying step, reverted when the return estimate drops.
    TwoPoint {
        a: f64,
        #[serde(default)]
        decaying: bool,
    },
    /// Best of a fixed step set along the normalized direction.
    Grid { steps: Vec<f64> },
}

impl StepSchedule {
    /// The step set used by the Tetris protocol.
    pub fn default_grid() -> Self {
        StepSchedule::Grid {
            steps: vec![0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            StepSchedule::Constant { alpha } => *alpha > 0.0,
            StepSchedule::Decaying { a } | StepSchedule::TwoPoint { a, .. } => *a > 0.0,
            StepSchedule::Grid { steps } => !steps.is_empty() && steps.iter().all(|s| *s > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidModel("step sizes must be positive".into()))
        }
    }

    /// Nominal step at iteration `t` (0-based); the grid returns its first entry.
    pub fn nominal(&self, t: usize) -> f64 {
        let decay = |a: f64| a / (1.0 + t as f64 / 100.0);
        match self {
            StepSchedule::Constant { alpha } => *alpha,
            StepSchedule::Decaying { a } => decay(*a),
            StepSchedule::TwoPoint { a, decaying } => {
                if *decaying {
                    decay(*a)
                } else {
                    *a
                }
            }
            StepSchedule::Grid { steps } => steps[0],
        }
    }
}

/// Gradient and the curvature pieces available for building a direction.
#[derive(Debug, Clone, Default)]
pub struct CurvatureInputs {
    pub grad: DVector<f64>,
    pub h2: Option<DMatrix<f64>>,
    pub h2_diag: Option<DVector<f64>>,
    pub a1: Option<DMatrix<f64>>,
    pub a2: Option<DMatrix<f64>>,
    pub fisher: Option<DMatrix<f64>>,
    /// Used when the rule is blockwise.
    pub blocks: Option<BlockMap>,
}

impl CurvatureInputs {
    pub fn from_decomposition(d: &HessianDecomposition) -> Self {
        Self {
            grad: d.grad.clone(),
            h2: Some(d.h2.clone()),
            h2_diag: Some(d.h2.diagonal()),
            a1: Some(d.a1.clone()),
            a2: Some(d.a2.clone()),
            fisher: Some(d.fisher.clone()),
            blocks: None,
        }
    }

    pub fn from_estimates(b: &EstimateBundle) -> Self {
        Self {
            grad: b.grad_hat.clone(),
            h2: Some(b.h2_hat.clone()),
            h2_diag: Some(b.h2_diag_hat.clone()),
            a1: None,
            a2: None,
            fisher: Some(b.fisher_hat.clone()),
            blocks: None,
        }
    }
}

/// A search direction and what it took to compute it.
#[derive(Debug, Clone)]
pub struct Direction {
    pub d: DVector<f64>,
    /// Ridge used by the solve, after any escalation.
    pub ridge: f64,
    /// Diagonal entries raised to the floor (diagonal rules only).
    pub floored: usize,
}

fn need<'a, T>(x: &'a Option<T>, what: &'static str) -> Result<&'a T> {
    x.as_ref().ok_or(Error::MissingInput(what))
}

fn block_mask(m: &DMatrix<f64>, blocks: &BlockMap) -> DMatrix<f64> {
    let block_of = |i: usize| blocks.blocks.iter().position(|(_, r)| r.contains(&i));
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if block_of(i) == block_of(j) {
            m[(i, j)]
        } else {
            0.0
        }
    })
}

fn preconditioned(m: DMatrix<f64>, g: &DVector<f64>, rule: &UpdateRule, inputs: &CurvatureInputs) -> Result<Direction> {
    let m = match (&inputs.blocks, rule.blockwise) {
        (Some(blocks), true) => block_mask(&m, blocks),
        _ => m,
    };
    let solve = solve_symmetric(&m, g, rule.ridge)?;
    Ok(Direction {
        d: solve.x,
        ridge: solve.ridge,
        floored: 0,
    })
}

/// Elementwise `g_i / max(c_i, 1e-8·max|c|)`.
fn diagonal_direction(curv: &DVector<f64>, g: &DVector<f64>) -> Result<Direction> {
    let floor = 1e-8 * curv.amax();
    if floor == 0.0 {
        if g.amax() == 0.0 {
            return Ok(Direction {
                d: g.clone(),
                ridge: 0.0,
                floored: 0,
            });
        }
        return Err(Error::Numerical("diagonal preconditioner is identically zero".into()));
    }
    let mut floored = 0;
    let d = DVector::from_fn(g.len(), |i, _| {
        let c = if curv[i] < floor {
            floored += 1;
            floor
        } else {
            curv[i]
        };
        g[i] / c
    });
    Ok(Direction { d, ridge: 0.0, floored })
}

/// Direction for every rule except EM.
///
/// Steepest returns `g`; natural solves `(G + ridge)d = g`; GN1 solves
/// `(−(A1+A2) + ridge)d = g` and fails with the minimum eigenvalue if that
/// matrix is not positive definite; GN2 solves `(−H2 + ridge)d = g`. The
/// diagonal rules divide by the negated diagonal, floored at `1e-8` of its
/// largest entry. CG-GN2 runs conjugate gradients on `−H2` warm-started at `g`.
pub fn compute_direction(rule: &UpdateRule, inputs: &CurvatureInputs) -> Result<Direction> {
    let g = &inputs.grad;
    match rule.kind {
        RuleKind::Steepest => Ok(Direction {
            d: g.clone(),
            ridge: 0.0,
            floored: 0,
        }),
        RuleKind::Natural => preconditioned(need(&inputs.fisher, "Fisher matrix")?.clone(), g, rule, inputs),
        RuleKind::GaussNewton1 => {
            let m = -(need(&inputs.a1, "A1 matrix")? + need(&inputs.a2, "A2 matrix")?);
            let shifted = &m + DMatrix::identity(m.nrows(), m.ncols()) * rule.ridge;
            let min_eig = min_eigenvalue(&shifted)?;
            if min_eig <= 1e-12 * shifted.amax() {
                return Err(Error::IndefinitePreconditioner { min_eigenvalue: min_eig });
            }
            preconditioned(m, g, rule, inputs)
        }
        RuleKind::GaussNewton2 => preconditioned(-need(&inputs.h2, "H2 matrix")?.clone(), g, rule, inputs),
        RuleKind::DiagGn1 => {
            let a1 = need(&inputs.a1, "A1 matrix")?;
            let a2 = need(&inputs.a2, "A2 matrix")?;
            diagonal_direction(&-(a1.diagonal() + a2.diagonal()), g)
        }
        RuleKind::DiagGn2 => {
            let diag = match (&inputs.h2_diag, &inputs.h2) {
                (Some(d), _) => d.clone(),
                (None, Some(h)) => h.diagonal(),
                (None, None) => return Err(Error::MissingInput("H2 diagonal")),
            };
            diagonal_direction(&-diag, g)
        }
        RuleKind::CgGn2 => {
            let neg_h2 = -need(&inputs.h2, "H2 matrix")?;
            let cg = cg_direction(&FnOperator { dim: g.len(), f: |p: &DVector<f64>| &neg_h2 * p }, g, rule.cg_iterations)?;
            Ok(Direction {
                d: cg.x,
                ridge: 0.0,
                floored: 0,
            })
        }
        RuleKind::Em => Err(Error::MissingInput("the EM update needs a model, not a direction")),
    }
}

/// Result of the CG Gauss-Newton solve.
#[derive(Debug, Clone)]
pub struct CgDirection {
    pub x: DVector<f64>,
    /// `x_0 = g, x_1, …`.
    pub iterates: Vec<DVector<f64>>,
    pub iterations: usize,
    pub breakdown: bool,
}

fn cg_direction<F: Fn(&DVector<f64>) -> DVector<f64>>(
    op: &FnOperator<F>,
    g: &DVector<f64>,
    k_max: Option<usize>,
) -> Result<CgDirection> {
    let options = CgOptions {
        max_iter: k_max,
        tol: 1e-12,
        record_iterates: true,
    };
    let out = conjugate_gradient(op, g, g, options)?;
    Ok(CgDirection {
        x: out.x,
        iterates: out.iterates,
        iterations: out.iterations,
        breakdown: out.breakdown,
    })
}

/// Conjugate gradients on `−H2 x = g`, warm-started at `x_0 = g`.
///
/// The surrogate weights `p_γ Q` are frozen at the anchor and reused for every
/// product. In the finite-difference mode the product is
/// `(S(w) − S(w + εp)) / ε` with `S` the weighted score, so `H2` is never formed.
pub fn cg_gauss_newton_direction<M: ExactModel + ?Sized>(
    model: &M,
    surrogate: &AnchoredSurrogate,
    g: &DVector<f64>,
    k_max: Option<usize>,
    mode: MvpMode,
) -> Result<CgDirection> {
    let n = model.dim();
    let w = surrogate.anchor.clone();
    match mode {
        MvpMode::Exact => {
            let neg_h2 = -surrogate.evaluate(model, &w).hess;
            cg_direction(&FnOperator { dim: n, f: |p: &DVector<f64>| &neg_h2 * p }, g, k_max)
        }
        MvpMode::FiniteDifference { step } => {
            if !(step > 0.0) {
                return Err(Error::Numerical(format!("finite-difference step must be positive, got {step}")));
            }
            let base = surrogate.weighted_score(model, &w);
            let product = |p: &DVector<f64>| (&base - surrogate.weighted_score(model, &(&w + p * step))) / step;
            cg_direction(&FnOperator { dim: n, f: product }, g, k_max)
        }
    }
}

/// `−H2·p` by the finite-difference rule, exposed for probing its accuracy.
pub fn fd_curvature_product<M: ExactModel + ?Sized>(
    model: &M,
    surrogate: &AnchoredSurrogate,
    p: &DVector<f64>,
    step: f64,
) -> DVector<f64> {
    let w = &surrogate.anchor;
    (surrogate.weighted_score(model, w) - surrogate.weighted_score(model, &(w + p * step))) / step
}

/// Outcome of an exact EM step.
#[derive(Debug, Clone)]
pub struct EmStep {
    pub w: DVector<f64>,
    /// Inner Newton iterations (0 for closed-form steps).
    pub inner_iterations: usize,
}

/// EM step by maximizing the anchored surrogate with damped Newton.
///
/// The surrogate is concave for log-concave policies and non-negative
/// weights; the inner loop stops once its gradient is at round-off level.
pub fn em_step_newton<M: ExactModel + ?Sized>(model: &M, anchor: &DVector<f64>) -> Result<EmStep> {
    let surrogate = ExactEvaluation::new(model, anchor)?.surrogate();
    let mut w = anchor.clone();
    let mut terms = surrogate.evaluate(model, &w);
    let scale = terms.hess.amax().max(1e-300);
    for it in 0..200 {
        if terms.grad.amax() <= 1e-14 * scale * (1.0 + w.amax()) {
            return Ok(EmStep { w, inner_iterations: it });
        }
        let d = solve_symmetric(&-&terms.hess, &terms.grad, 0.0)?.x;
        let slope = terms.grad.dot(&d);
        let mut step = 1.0;
        loop {
            let trial = &w + &d * step;
            let next = surrogate.evaluate(model, &trial);
            if next.value >= terms.value + 1e-4 * step * slope || step < 1e-12 {
                let done = next.value <= terms.value;
                w = trial;
                terms = next;
                if done {
                    return Ok(EmStep { w, inner_iterations: it + 1 });
                }
                break;
            }
            step *= 0.5;
        }
    }
    Ok(EmStep { w, inner_iterations: 200 })
}

/// One weighted action observation for the Gaussian M-step.
#[derive(Debug, Clone)]
pub struct WeightedAction {
    pub features: DVector<f64>,
    pub action: f64,
    /// `p_γ Q` or its sampled counterpart.
    pub weight: f64,
}

/// Closed-form Gaussian M-step.
///
/// The mean weights solve `(Σ c φφᵀ) w = Σ c φ a`. With a learned σ the new
/// variance is the weighted mean squared residual around the new mean.
pub fn em_step_gaussian<F>(
    samples: &[WeightedAction],
    policy: &GaussianLinearPolicy<F>,
    w_anchor: &DVector<f64>,
) -> Result<EmStep>
where
    F: StateFeatures<usize>,
{
    let m = policy.mean_dim::<usize>();
    let mut gram = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    let mut mass = 0.0;
    for x in samples {
        gram.ger(x.weight, &x.features, &x.features, 1.0);
        rhs.axpy(x.weight * x.action, &x.features, 1.0);
        mass += x.weight;
    }
    if !(mass > 0.0) {
        return Err(Error::Numerical("EM weights have no positive mass".into()));
    }
    let mean = solve_symmetric(&gram, &rhs, 0.0)?.x;
    let mut w = w_anchor.clone();
    w.rows_mut(0, m).copy_from(&mean);
    if policy.noise() == GaussianNoise::LearnedLog {
        let sse: f64 = samples.iter().map(|x| x.weight * (x.action - mean.dot(&x.features)).powi(2)).sum();
        w[m] = 0.5 * (sse / mass).ln();
    }
    Ok(EmStep { w, inner_iterations: 0 })
}

/// Closed-form EM step on a quadrature model, from its exact weights.
pub fn em_step_quadrature<F: StateFeatures<usize>>(
    model: &crate::calculus::QuadratureModel<F>,
    w_anchor: &DVector<f64>,
) -> Result<EmStep> {
    let surrogate = ExactEvaluation::new(model, w_anchor)?.surrogate();
    let mut samples = Vec::new();
    for (s, weights) in surrogate.weights.iter().enumerate() {
        let phi = model.policy.features.features(&s);
        for ((a, _), c) in model.action_nodes(w_anchor, s).into_iter().zip(weights) {
            samples.push(WeightedAction {
                features: phi.clone(),
                action: a,
                weight: *c,
            });
        }
    }
    em_step_gaussian(&samples, &model.policy, w_anchor)
}

/// Outcome of the revert-on-decrease step rule.
#[derive(Debug, Clone)]
pub struct TwoPointOutcome {
    pub w: DVector<f64>,
    pub accepted: bool,
    pub before: f64,
    pub after: f64,
}

/// Takes `w + αd` if the estimated return does not decrease, else stays at `w`.
pub fn two_point_line_search<E: FnMut(&DVector<f64>) -> f64>(
    mut evaluate: E,
    w: &DVector<f64>,
    d: &DVector<f64>,
    alpha: f64,
) -> TwoPointOutcome {
    let before = evaluate(w);
    let candidate = w + d * alpha;
    let after = evaluate(&candidate);
    let accepted = after >= before;
    TwoPointOutcome {
        w: if accepted { candidate } else { w.clone() },
        accepted,
        before,
        after,
    }
}

/// Outcome of the grid search.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub step: f64,
    pub value: f64,
    /// Value of every candidate, in step-set order.
    pub values: Vec<f64>,
}

/// Evaluates `w + α·d/‖d‖` for every `α` in `steps` with the same `seed` and
/// returns the best. Ties go to the smallest step.
pub fn grid_line_search<E: Fn(&DVector<f64>, u64) -> f64>(
    evaluate: E,
    w: &DVector<f64>,
    d: &DVector<f64>,
    steps: &[f64],
    seed: u64,
) -> GridOutcome {
    let norm = d.norm();
    let unit = if norm > 0.0 { d / norm } else { d.clone() };
    let values: Vec<f64> = steps.iter().map(|&a| evaluate(&(w + &unit * a), seed)).collect();
    let mut best = 0;
    for i in 1..steps.len() {
        let better = values[i] > values[best];
        let tie_smaller = values[i] == values[best] && steps[i] < steps[best];
        if better || tie_smaller {
            best = i;
        }
    }
    GridOutcome {
        step: steps[best],
        value: values[best],
        values,
    }
}

/// One row of a run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Return at the iterate (exact or estimated).
    pub ret: f64,
    pub grad_norm: f64,
    /// Step that produced this iterate (0 on the initial row).
    pub step_size: f64,
    pub direction_norm: f64,
    pub h12_norm: Option<f64>,
    pub a1_norm: Option<f64>,
    pub wall_ms: f64,
}

/// Per-iteration records; row 0 is the initial point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<IterationRecord>,
}

impl RunTrace {
    /// Iterations completed after the initial evaluation.
    pub fn completed(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub iterations: usize,
    /// Stop once `‖∇U‖ ≤ grad_tol`.
    pub grad_tol: f64,
    /// Record the spectral norms of `H12 + H12ᵀ` and `A1`.
    pub diagnostics: bool,
    /// Record wall-clock time; off keeps traces reproducible.
    pub timing: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            iterations: 100,
            grad_tol: 1e-8,
            diagnostics: false,
            timing: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub w: DVector<f64>,
    pub trace: RunTrace,
    /// `w_0, w_1, …` in order.
    pub iterates: Vec<DVector<f64>>,
}

/// Exact-evaluation ascent `w_{k+1} = w_k + α_k d_k` on a finite model.
///
/// The EM rule uses the model's own M-step ([`ExactModel::m_step`]) and takes
/// `d = w_em − w`. Line-search schedules use the exact objective.
pub fn run_policy_search<M: ExactModel + ?Sized>(
    model: &M,
    w0: &DVector<f64>,
    rule: &UpdateRule,
    schedule: &StepSchedule,
    options: &SearchOptions,
) -> Result<SearchResult> {
    schedule.validate()?;
    crate::error::check_dim(model.dim(), w0.len(), "initial parameters")?;
    let clock = Instant::now();
    let elapsed = || if options.timing { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };

    let mut w = w0.clone();
    let mut eval = ExactEvaluation::new(model, &w)?;
    let mut dec = eval.decomposition()?;
    let mut trace = RunTrace::default();
    let mut iterates = vec![w.clone()];
    let record = |k: usize, eval: &ExactEvaluation, dec: &HessianDecomposition, step: f64, dnorm: f64, ms: f64| {
        IterationRecord {
            iteration: k,
            ret: eval.expected_return(),
            grad_norm: dec.grad.norm(),
            step_size: step,
            direction_norm: dnorm,
            h12_norm: options.diagnostics.then(|| spectral_norm(&dec.cross_term())),
            a1_norm: options.diagnostics.then(|| spectral_norm(&dec.a1)),
            wall_ms: ms,
        }
    };
    trace.records.push(record(0, &eval, &dec, 0.0, 0.0, elapsed()));

    for k in 1..=options.iterations {
        if dec.grad.norm() <= options.grad_tol {
            break;
        }
        let at = |e: Error| Error::AtIteration {
            iteration: k,
            source: Box::new(e),
        };
        let d = match rule.kind {
            RuleKind::Em => model.m_step(&w).map_err(at)? - &w,
            RuleKind::CgGn2 => cg_gauss_newton_direction(model, &eval.surrogate(), &dec.grad, rule.cg_iterations, rule.mvp)
                .map_err(at)?
                .x,
            _ => {
                let mut inputs = CurvatureInputs::from_decomposition(&dec);
                if rule.blockwise {
                    inputs.blocks = Some(model.block_map());
                }
                compute_direction(rule, &inputs).map_err(at)?.d
            }
        };
        let objective = |x: &DVector<f64>| model.objective(x).unwrap_or(f64::NEG_INFINITY);
        let (next, step) = match schedule {
            StepSchedule::Constant { .. } | StepSchedule::Decaying { .. } => {
                let a = schedule.nominal(k - 1);
                (&w + &d * a, a)
            }
            StepSchedule::TwoPoint { .. } => {
                let a = schedule.nominal(k - 1);
                let out = two_point_line_search(objective, &w, &d, a);
                let taken = if out.accepted { a } else { 0.0 };
                (out.w, taken)
            }
            StepSchedule::Grid { steps } => {
                let out = grid_line_search(|x, _| objective(x), &w, &d, steps, 0);
                let norm = d.norm();
                let unit = if norm > 0.0 { &d / norm } else { d.clone() };
                (&w + unit * out.step, out.step)
            }
        };
        w = next;
        eval = ExactEvaluation::new(model, &w).map_err(at)?;
        dec = eval.decomposition().map_err(at)?;
        iterates.push(w.clone());
        trace.records.push(record(k, &eval, &dec, step, d.norm(), elapsed()));
    }
    Ok(SearchResult { w, trace, iterates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{hessian_decomposition, random_gibbs_model, ExactModel};
    use crate::fixtures;
    use crate::linalg::max_eigenvalue;
    use crate::policy::{AffineReparametrized, StateTable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_direction_rules() -> Vec<UpdateRule> {
        [
            RuleKind::Steepest,
            RuleKind::Natural,
            RuleKind::GaussNewton2,
            RuleKind::DiagGn1,
            RuleKind::DiagGn2,
            RuleKind::CgGn2,
        ]
        .into_iter()
        .map(UpdateRule::new)
        .collect()
    }

    #[test]
    fn zero_gradient_gives_zero_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_gibbs_model(3, 2, 2, 0.9, &mut rng);
        let mut inputs = CurvatureInputs::from_decomposition(&hessian_decomposition(&model, &DVector::zeros(2)).unwrap());
        inputs.grad = DVector::zeros(2);
        for rule in all_direction_rules() {
            let d = compute_direction(&rule, &inputs).unwrap();
            assert_eq!(d.d.amax(), 0.0, "{:?}", rule.kind);
        }
    }

    #[test]
    fn unit_curvature_gn2_returns_gradient() {
        let g = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let inputs = CurvatureInputs {
            grad: g.clone(),
            h2: Some(-DMatrix::identity(3, 3)),
            ..Default::default()
        };
        let d = compute_direction(&UpdateRule::new(RuleKind::GaussNewton2), &inputs).unwrap();
        assert!((d.d - g).amax() < 1e-15);
    }

    #[test]
    fn gn2_matches_explicit_inverse_and_ascends() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_gibbs_model(4, 3, 3, 0.9, &mut rng);
            let w = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let dec = hessian_decomposition(&model, &w).unwrap();
            let d = compute_direction(&UpdateRule::new(RuleKind::GaussNewton2), &CurvatureInputs::from_decomposition(&dec)).unwrap();
            let oracle = (-&dec.h2).try_inverse().unwrap() * &dec.grad;
            assert!((&d.d - &oracle).amax() < 1e-8 * oracle.amax().max(1.0));
            assert!(dec.grad.dot(&d.d) > 0.0);
        }
    }

    #[test]
    fn gn1_reports_indefinite_preconditioner() {
        let inputs = CurvatureInputs {
            grad: DVector::from_vec(vec![1.0, 1.0]),
            a1: Some(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.5])),
            a2: Some(DMatrix::zeros(2, 2)),
            ..Default::default()
        };
        match compute_direction(&UpdateRule::new(RuleKind::GaussNewton1), &inputs) {
            Err(Error::IndefinitePreconditioner { min_eigenvalue }) => assert!((min_eigenvalue + 0.5).abs() < 1e-12),
            other => panic!("expected an indefinite-preconditioner error, got {other:?}"),
        }
        let fixed = compute_direction(&UpdateRule::new(RuleKind::GaussNewton1).with_ridge(1.0), &inputs).unwrap();
        assert!((fixed.d - DVector::from_vec(vec![0.5, 1.0 / 0.5])).amax() < 1e-12);
    }

    #[test]
    fn diagonal_rules_floor_small_curvature() {
        let inputs = CurvatureInputs {
            grad: DVector::from_vec(vec![1.0, 1.0, 2.0]),
            h2_diag: Some(DVector::from_vec(vec![-4.0, 0.0, -1.0])),
            ..Default::default()
        };
        let d = compute_direction(&UpdateRule::new(RuleKind::DiagGn2), &inputs).unwrap();
        assert_eq!(d.floored, 1);
        assert_eq!(d.d[0], 0.25);
        assert_eq!(d.d[1], 1.0 / 4e-8);
        assert_eq!(d.d[2], 2.0);
    }

    #[test]
    fn cg_matches_direct_gn2_and_keeps_ascending() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_gibbs_model(5, 3, 4, 0.9, &mut rng);
        let w = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let eval = ExactEvaluation::new(&model, &w).unwrap();
        let dec = eval.decomposition().unwrap();
        let direct = compute_direction(&UpdateRule::new(RuleKind::GaussNewton2), &CurvatureInputs::from_decomposition(&dec)).unwrap();
        let cg = cg_gauss_newton_direction(&model, &eval.surrogate(), &dec.grad, Some(4), MvpMode::Exact).unwrap();
        assert!((&cg.x - &direct.d).amax() < 1e-6 * direct.d.amax());
        for x in &cg.iterates {
            assert!(dec.grad.dot(x) > 0.0);
        }
        let fd = cg_gauss_newton_direction(&model, &eval.surrogate(), &dec.grad, Some(4), MvpMode::FiniteDifference { step: 1e-6 }).unwrap();
        assert!((&fd.x - &direct.d).amax() < 1e-3 * direct.d.amax());
    }

    #[test]
    fn fd_product_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_gibbs_model(4, 3, 3, 0.9, &mut rng);
        let w = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let eval = ExactEvaluation::new(&model, &w).unwrap();
        let surrogate = eval.surrogate();
        let neg_h2 = -eval.decomposition().unwrap().h2;
        for _ in 0..5 {
            let p = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let exact = &neg_h2 * &p;
            let approx = fd_curvature_product(&model, &surrogate, &p, 1e-6);
            assert!((&approx - &exact).norm() <= 1e-3 * exact.norm());
        }

        // The Gaussian mean score is linear in w, so the product is exact for any step.
        let gauss = fixtures::gaussian_chain(3);
        let w = DVector::from_vec(vec![0.2, -0.4]);
        let eval = ExactEvaluation::new(&gauss, &w).unwrap();
        let neg_h2 = -eval.decomposition().unwrap().h2;
        let p = DVector::from_vec(vec![0.7, 1.3]);
        for step in [1e-6, 1e-2, 1.0] {
            let approx = fd_curvature_product(&gauss, &eval.surrogate(), &p, step);
            assert!((&approx - &neg_h2 * &p).amax() < 1e-8, "step {step}");
        }
    }

    #[test]
    fn em_step_single_state_closed_form() {
        let policy = GaussianLinearPolicy::new(StateTable::new(vec![DVector::from_element(1, 1.0)]).unwrap(), GaussianNoise::Fixed(1.0)).unwrap();
        let samples = vec![
            WeightedAction { features: DVector::from_element(1, 2.0), action: 1.0, weight: 0.5 },
            WeightedAction { features: DVector::from_element(1, -1.0), action: 3.0, weight: 2.0 },
        ];
        let out = em_step_gaussian(&samples, &policy, &DVector::zeros(1)).unwrap();
        let expected = (0.5 * 2.0 * 1.0 + 2.0 * -1.0 * 3.0) / (0.5 * 4.0 + 2.0 * 1.0);
        assert!((out.w[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn em_step_equals_unit_gn2_step_on_gaussian_mean() {
        for seed in 0..5 {
            let model = fixtures::gaussian_chain(seed);
            let w = DVector::from_vec(vec![0.1 * seed as f64, -0.3]);
            let em = em_step_quadrature(&model, &w).unwrap().w;
            let dec = hessian_decomposition(&model, &w).unwrap();
            let gn2 = compute_direction(&UpdateRule::new(RuleKind::GaussNewton2), &CurvatureInputs::from_decomposition(&dec)).unwrap();
            assert!((&em - &w - &gn2.d).amax() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn em_step_is_stationary_at_surrogate_optimum() {
        let model = fixtures::gaussian_chain(2);
        let mut w = DVector::from_vec(vec![0.0, 0.0]);
        // EM contracts slowly on this chain, so iterate well past the tolerance.
        for _ in 0..5000 {
            w = model.m_step(&w).unwrap();
        }
        let next = model.m_step(&w).unwrap();
        let g = crate::calculus::policy_gradient_exact(&model, &w).unwrap();
        assert!((next - &w).amax() < 1e-9, "{w} {g}");
    }

    #[test]
    fn two_point_rule() {
        let f = |x: &DVector<f64>| -(x[0] - 1.0).powi(2);
        let w = DVector::from_element(1, 0.0);
        let stay = two_point_line_search(f, &w, &DVector::zeros(1), 1.0);
        assert_eq!(stay.w, w);
        let up = two_point_line_search(f, &w, &DVector::from_element(1, 1.0), 1e-3);
        assert!(up.accepted && up.w[0] == 1e-3);
        // Overshooting to x = 3 is worse than x = 0.
        let back = two_point_line_search(f, &w, &DVector::from_element(1, 1.0), 3.0);
        assert!(!back.accepted && back.w == w);
    }

    #[test]
    fn grid_search_ties_and_nearest_point() {
        let steps = [0.1, 0.5, 1.0, 2.0, 4.0];
        let flat = grid_line_search(|_, _| 1.0, &DVector::zeros(1), &DVector::from_element(1, 1.0), &steps, 7);
        assert_eq!(flat.step, 0.1);
        let concave = |x: &DVector<f64>, _| -(x[0] - 1.7).powi(2);
        let out = grid_line_search(concave, &DVector::zeros(1), &DVector::from_element(1, 3.0), &steps, 0);
        let nearest = steps.iter().copied().min_by(|a, b| (a - 1.7).abs().total_cmp(&(b - 1.7).abs())).unwrap();
        assert_eq!(out.step, nearest);
    }

    #[test]
    fn zero_reward_never_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_gibbs_model(3, 2, 2, 0.9, &mut rng);
        let doc: crate::mdp::MdpDocument = base.mdp.clone().into();
        let mdp = crate::mdp::TabularMdp::new(doc.transition, vec![vec![0.0; 2]; 3], doc.start, 0.9).unwrap();
        let model = crate::calculus::TabularModel::new(mdp, base.policy).unwrap();
        let w0 = DVector::from_vec(vec![0.3, -0.2]);
        for kind in [RuleKind::Steepest, RuleKind::Natural] {
            let out = run_policy_search(&model, &w0, &UpdateRule::new(kind), &StepSchedule::Constant { alpha: 1.0 }, &SearchOptions { iterations: 5, ..Default::default() }).unwrap();
            assert_eq!(out.w, w0);
        }
    }

    #[test]
    fn gn2_and_em_iterates_coincide() {
        let model = fixtures::gaussian_chain(9);
        let w0 = DVector::from_vec(vec![0.5, 0.5]);
        let options = SearchOptions { iterations: 20, grad_tol: 0.0, ..Default::default() };
        let step = StepSchedule::Constant { alpha: 1.0 };
        let gn2 = run_policy_search(&model, &w0, &UpdateRule::new(RuleKind::GaussNewton2), &step, &options).unwrap();
        let em = run_policy_search(&model, &w0, &UpdateRule::new(RuleKind::Em), &step, &options).unwrap();
        assert_eq!(gn2.iterates.len(), 21);
        for (a, b) in gn2.iterates.iter().zip(&em.iterates) {
            assert!((a - b).amax() < 1e-8);
        }
    }

    #[test]
    fn interior_fixture_has_a_strict_maximum() {
        let model = fixtures::interior_gibbs();
        let w = fixtures::interior_gibbs_optimum(&model).unwrap();
        let dec = hessian_decomposition(&model, &w).unwrap();
        assert!(dec.grad.norm() < 1e-12);
        assert!(max_eigenvalue(&dec.hessian).unwrap() < 0.0);
        let m = dec.h2.clone().lu().solve(&dec.hessian).unwrap();
        for z in m.complex_eigenvalues().iter() {
            assert!(z.im.abs() < 1e-12 && z.re > 1e-8 && z.re < 1.0 - 1e-8);
        }
    }

    #[test]
    fn gn2_is_affine_invariant_and_steepest_is_not() {
        let model = fixtures::interior_gibbs();
        let t = fixtures::anisotropic_map();
        let b = DVector::from_vec(vec![0.2, -0.1]);
        let policy = AffineReparametrized::new(model.policy.clone(), t.clone(), b.clone()).unwrap();
        let mapped = crate::calculus::TabularModel::new(model.mdp.clone(), policy.clone()).unwrap();
        let w0 = DVector::from_vec(vec![1.0, 0.5]);
        let v0 = policy.unmap(&w0).unwrap();
        let options = SearchOptions { iterations: 20, grad_tol: 0.0, ..Default::default() };
        let step = StepSchedule::Constant { alpha: 0.5 };
        let deviation = |kind| {
            let rule = UpdateRule::new(kind);
            let a = run_policy_search(&model, &w0, &rule, &step, &options).unwrap();
            let b = run_policy_search(&mapped, &v0, &rule, &step, &options).unwrap();
            a.iterates
                .iter()
                .zip(&b.iterates)
                .map(|(w, v)| (policy.map(v) - w).amax() / w.amax())
                .fold(0.0_f64, f64::max)
        };
        assert!(deviation(RuleKind::GaussNewton2) < 1e-8);
        assert!(deviation(RuleKind::Natural) < 1e-8);
        assert!(deviation(RuleKind::Steepest) > 1e-3);
    }

    #[test]
    fn constant_q_makes_gn2_parallel_to_natural() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_gibbs_model(3, 3, 2, 0.9, &mut rng);
        let doc: crate::mdp::MdpDocument = base.mdp.clone().into();
        let mdp = crate::mdp::TabularMdp::new(doc.transition, vec![vec![1.0; 3]; 3], doc.start, 0.9).unwrap();
        let model = crate::calculus::TabularModel::new(mdp, base.policy).unwrap();
        let mut inputs = CurvatureInputs::from_decomposition(&hessian_decomposition(&model, &DVector::from_vec(vec![0.4, 0.1])).unwrap());
        // Any gradient will do; the claim is about the preconditioners.
        inputs.grad = DVector::from_vec(vec![0.3, -0.8]);
        let gn2 = compute_direction(&UpdateRule::new(RuleKind::GaussNewton2), &inputs).unwrap().d;
        let nat = compute_direction(&UpdateRule::new(RuleKind::Natural), &inputs).unwrap().d;
        let scale = gn2.dot(&nat) / nat.dot(&nat);
        assert!(scale > 0.0);
        assert!((&gn2 - &nat * scale).amax() < 1e-9 * gn2.amax());
    }
}
