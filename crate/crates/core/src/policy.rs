//! Differentiable policy classes.
//!
//! Every policy works on a flat parameter vector `w`. Multi-block policies
//! describe how that vector splits into blocks through a [`BlockMap`].

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Structural properties the calculus and the optimizers rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PolicyTraits {
    /// `log π(a|s;w)` is concave in `w` for every `(s, a)`.
    pub log_concave: bool,
    /// `∇∇ log π(a|s;w)` does not depend on `a`.
    pub constant_curvature: bool,
}

/// Named contiguous blocks of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMap {
    pub blocks: Vec<(String, Range<usize>)>,
}

impl BlockMap {
    pub fn single(dim: usize) -> Self {
        Self {
            blocks: vec![("all".to_string(), 0..dim)],
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|(_, r)| r.end).max().unwrap_or(0)
    }

    pub fn block(&self, name: &str) -> Option<Range<usize>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }
}

/// Log-probability of one action together with its first and second derivatives.
#[derive(Debug, Clone)]
pub struct LogPolicyTerms {
    pub log_prob: f64,
    pub score: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// A parametrized conditional distribution over actions.
pub trait DifferentiablePolicy<S: ?Sized> {
    type Action: Clone;

    fn dim(&self) -> usize;

    fn log_prob(&self, w: &DVector<f64>, s: &S, a: &Self::Action) -> f64;

    /// `∇_w log π(a|s;w)`.
    fn grad_log_prob(&self, w: &DVector<f64>, s: &S, a: &Self::Action) -> DVector<f64>;

    /// `∇_w ∇_wᵀ log π(a|s;w)`.
    fn hess_log_prob(&self, w: &DVector<f64>, s: &S, a: &Self::Action) -> DMatrix<f64>;

    fn log_terms(&self, w: &DVector<f64>, s: &S, a: &Self::Action) -> LogPolicyTerms {
        LogPolicyTerms {
            log_prob: self.log_prob(w, s, a),
            score: self.grad_log_prob(w, s, a),
            hess: self.hess_log_prob(w, s, a),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, w: &DVector<f64>, s: &S, rng: &mut R) -> Self::Action;

    fn traits(&self) -> PolicyTraits;

    fn block_map(&self) -> BlockMap {
        BlockMap::single(self.dim())
    }
}

/// Log-Hessians of all actions of one state.
#[derive(Debug, Clone)]
pub enum ActionHessians {
    /// One matrix shared by every action (constant curvature).
    Shared(DMatrix<f64>),
    PerAction(Vec<DMatrix<f64>>),
}

impl ActionHessians {
    pub fn get(&self, a: usize) -> &DMatrix<f64> {
        match self {
            ActionHessians::Shared(h) => h,
            ActionHessians::PerAction(hs) => &hs[a],
        }
    }
}

/// Everything about `π(·|s;w)` for a finite action set, computed in one pass.
#[derive(Debug, Clone)]
pub struct DiscreteEvaluation {
    pub log_probs: DVector<f64>,
    pub probs: DVector<f64>,
    /// Column `a` is `∇ log π(a|s;w)`.
    pub scores: DMatrix<f64>,
    pub hessians: ActionHessians,
}

/// A policy over a finite, state-dependent action set `{0, …, k-1}`.
pub trait DiscretePolicy<S: ?Sized>: DifferentiablePolicy<S, Action = usize> {
    fn num_actions(&self, s: &S) -> usize;

    fn evaluate(&self, w: &DVector<f64>, s: &S) -> DiscreteEvaluation;

    fn probabilities(&self, w: &DVector<f64>, s: &S) -> DVector<f64> {
        self.evaluate(w, s).probs
    }
}

/// Features `φ(s, a)` for every action of a state.
pub trait ActionFeatures<S: ?Sized> {
    fn dim(&self) -> usize;
    fn num_actions(&self, s: &S) -> usize;
    /// An `n × |A(s)|` matrix whose column `a` is `φ(s, a)`.
    fn features(&self, s: &S) -> DMatrix<f64>;
}

/// State features `φ(s)`.
pub trait StateFeatures<S: ?Sized> {
    fn dim(&self) -> usize;
    fn features(&self, s: &S) -> DVector<f64>;
}

/// Explicit per-state feature tables for finite state spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct TableFeatures {
    dim: usize,
    tables: Vec<DMatrix<f64>>,
}

impl TableFeatures {
    /// `tables[s]` is `n × |A(s)|`; all tables must share the row count.
    pub fn new(tables: Vec<DMatrix<f64>>) -> Result<Self> {
        let dim = tables.first().map(|t| t.nrows()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::InvalidModel("feature tables must be non-empty".into()));
        }
        for (s, t) in tables.iter().enumerate() {
            if t.nrows() != dim || t.ncols() == 0 {
                return Err(Error::InvalidModel(format!("feature table for state {s} has bad shape")));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("feature table for state {s} is not finite")));
            }
        }
        Ok(Self { dim, tables })
    }

    pub fn table(&self, s: usize) -> &DMatrix<f64> {
        &self.tables[s]
    }

    pub fn num_states(&self) -> usize {
        self.tables.len()
    }
}

impl ActionFeatures<usize> for TableFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_actions(&self, s: &usize) -> usize {
        self.tables[*s].ncols()
    }

    fn features(&self, s: &usize) -> DMatrix<f64> {
        self.tables[*s].clone()
    }
}

/// Per-state feature vectors for finite state spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTable {
    rows: Vec<DVector<f64>>,
}

impl StateTable {
    pub fn new(rows: Vec<DVector<f64>>) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidModel("state feature rows must share a positive length".into()));
        }
        Ok(Self { rows })
    }
}

impl StateFeatures<usize> for StateTable {
    fn dim(&self) -> usize {
        self.rows[0].len()
    }

    fn features(&self, s: &usize) -> DVector<f64> {
        self.rows[*s].clone()
    }
}

/// Identity features for vector-valued states.
#[derive(Debug, Clone, Copy)]
pub struct RawState {
    pub dim: usize,
}

impl StateFeatures<DVector<f64>> for RawState {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, s: &DVector<f64>) -> DVector<f64> {
        s.clone()
    }
}

/// Probabilities and log-probabilities of `softmax(logits)`, max-subtracted.
pub fn softmax(logits: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = logits.map(|l| l - max);
    let log_z = shifted.iter().map(|l| l.exp()).sum::<f64>().ln();
    let log_probs = shifted.map(|l| l - log_z);
    let probs = log_probs.map(f64::exp);
    (probs, log_probs)
}

/// Samples an index from a probability vector by inversion.
pub fn sample_index<R: Rng + ?Sized>(probs: &DVector<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off left `acc` just below one: return the last action with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Gibbs (softmax-linear) policy `π(a|s;w) ∝ exp(wᵀφ(s,a))`.
#[derive(Debug, Clone)]
pub struct GibbsPolicy<F> {
    pub features: F,
}

impl<F> GibbsPolicy<F> {
    pub fn new(features: F) -> Self {
        Self { features }
    }
}

/// Gibbs evaluation for a feature matrix whose columns are actions.
pub fn gibbs_evaluation(w: &DVector<f64>, phi: &DMatrix<f64>) -> DiscreteEvaluation {
    let n = phi.nrows();
    let logits = phi.tr_mul(w);
    let (probs, log_probs) = softmax(&logits);
    let mean = phi * &probs;
    let mut scores = phi.clone();
    for mut col in scores.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = DMatrix::zeros(n, n);
    for (a, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            let c = scores.column(a);
            cov.ger(*p, &c, &c, 1.0);
        }
    }
    DiscreteEvaluation {
        log_probs,
        probs,
        scores,
        hessians: ActionHessians::Shared(-cov),
    }
}

impl<S: ?Sized, F: ActionFeatures<S>> DifferentiablePolicy<S> for GibbsPolicy<F> {
    type Action = usize;

    fn dim(&self) -> usize {
        self.features.dim()
    }

    fn log_prob(&self, w: &DVector<f64>, s: &S, a: &usize) -> f64 {
        let logits = self.features.features(s).tr_mul(w);
        softmax(&logits).1[*a]
    }

    fn grad_log_prob(&self, w: &DVector<f64>, s: &S, a: &usize) -> DVector<f64> {
        self.evaluate(w, s).scores.column(*a).into_owned()
    }

    fn hess_log_prob(&self, w: &DVector<f64>, s: &S, a: &usize) -> DMatrix<f64> {
        self.evaluate(w, s).hessians.get(*a).clone()
    }

    fn log_terms(&self, w: &DVector<f64>, s: &S, a: &usize) -> LogPolicyTerms {
        let e = self.evaluate(w, s);
        LogPolicyTerms {
            log_prob: e.log_probs[*a],
            score: e.scores.column(*a).into_owned(),
            hess: e.hessians.get(*a).clone(),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, w: &DVector<f64>, s: &S, rng: &mut R) -> usize {
        let logits = self.features.features(s).tr_mul(w);
        sample_index(&softmax(&logits).0, rng)
    }

    fn traits(&self) -> PolicyTraits {
        PolicyTraits {
            log_concave: true,
            constant_curvature: true,
        }
    }
}

impl<S: ?Sized, F: ActionFeatures<S>> DiscretePolicy<S> for GibbsPolicy<F> {
    fn num_actions(&self, s: &S) -> usize {
        self.features.num_actions(s)
    }

    fn evaluate(&self, w: &DVector<f64>, s: &S) -> DiscreteEvaluation {
        gibbs_evaluation(w, &self.features.features(s))
    }
}

/// Softmax policy with a separate parameter block per state.
///
/// Block `s` holds one logit per action of state `s`.
#[derive(Debug, Clone)]
pub struct TabularSoftmaxPolicy {
    offsets: Vec<usize>,
    dim: usize,
}

impl TabularSoftmaxPolicy {
    pub fn new(actions_per_state: &[usize]) -> Result<Self> {
        if actions_per_state.is_empty() || actions_per_state.contains(&0) {
            return Err(Error::InvalidModel("every state needs at least one action".into()));
        }
        let mut offsets = Vec::with_capacity(actions_per_state.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &k in actions_per_state {
            acc += k;
            offsets.push(acc);
        }
        Ok(Self { offsets, dim: acc })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Result<Self> {
        Self::new(&vec![num_actions; num_states])
    }

    pub fn block(&self, s: usize) -> Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }
}

impl DifferentiablePolicy<usize> for TabularSoftmaxPolicy {
    type Action = usize;

    fn dim(&self) -> usize {
        self.dim
    }

    fn log_prob(&self, w: &DVector<f64>, s: &usize, a: &usize) -> f64 {
        let logits = w.rows_range(self.block(*s)).into_owned();
        softmax(&logits).1[*a]
    }

    fn grad_log_prob(&self, w: &DVector<f64>, s: &usize, a: &usize) -> DVector<f64> {
        self.evaluate(w, s).scores.column(*a).into_owned()
    }

    fn hess_log_prob(&self, w: &DVector<f64>, s: &usize, a: &usize) -> DMatrix<f64> {
        self.evaluate(w, s).hessians.get(*a).clone()
    }

    fn sample<R: Rng + ?Sized>(&self, w: &DVector<f64>, s: &usize, rng: &mut R) -> usize {
        let logits = w.rows_range(self.block(*s)).into_owned();
        sample_index(&softmax(&logits).0, rng)
    }

    fn traits(&self) -> PolicyTraits {
        PolicyTraits {
            log_concave: true,
            constant_curvature: true,
        }
    }

    fn block_map(&self) -> BlockMap {
        BlockMap {
            blocks: (0..self.offsets.len() - 1)
                .map(|s| (format!("state{s}"), self.block(s)))
                .collect(),
        }
    }
}

impl DiscretePolicy<usize> for TabularSoftmaxPolicy {
    fn num_actions(&self, s: &usize) -> usize {
        self.block(*s).len()
    }

    fn evaluate(&self, w: &DVector<f64>, s: &usize) -> DiscreteEvaluation {
        let block = self.block(*s);
        let k = block.len();
        let logits = w.rows_range(block.clone()).into_owned();
        let (probs, log_probs) = softmax(&logits);
        let mut scores = DMatrix::zeros(self.dim, k);
        for a in 0..k {
            for b in 0..k {
                scores[(block.start + b, a)] = if a == b { 1.0 } else { 0.0 } - probs[b];
            }
        }
        let mut hess = DMatrix::zeros(self.dim, self.dim);
        for i in 0..k {
            for j in 0..k {
                let cov = if i == j { probs[i] } else { 0.0 } - probs[i] * probs[j];
                hess[(block.start + i, block.start + j)] = -cov;
            }
        }
        DiscreteEvaluation {
            log_probs,
            probs,
            scores,
            hessians: ActionHessians::Shared(hess),
        }
    }
}

/// Noise model of a [`GaussianLinearPolicy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GaussianNoise {
    /// σ is a fixed constant.
    Fixed(f64),
    /// σ = exp(w_last); the last parameter is log σ.
    LearnedLog,
}

/// Scalar-action Gaussian policy `N(a | wᵀφ(s), σ²)`.
#[derive(Debug, Clone)]
pub struct GaussianLinearPolicy<F> {
    pub features: F,
    noise: GaussianNoise,
}

impl<F> GaussianLinearPolicy<F> {
    pub fn new(features: F, noise: GaussianNoise) -> Result<Self> {
        if let GaussianNoise::Fixed(sigma) = noise {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidModel(format!("Gaussian policy needs σ > 0, got {sigma}")));
            }
        }
        Ok(Self { features, noise })
    }

    pub fn noise(&self) -> GaussianNoise {
        self.noise
    }
}

impl<F> GaussianLinearPolicy<F> {
    /// Mean-block size `m`.
    pub fn mean_dim<S: ?Sized>(&self) -> usize
    where
        F: StateFeatures<S>,
    {
        self.features.dim()
    }

    /// Standard deviation at parameters `w`.
    pub fn sigma(&self, w: &DVector<f64>) -> f64 {
        match self.noise {
            GaussianNoise::Fixed(s) => s,
            GaussianNoise::LearnedLog => w[w.len() - 1].exp(),
        }
    }

    /// Mean `wᵀφ(s)` and σ at `(w, s)`.
    pub fn mean_and_sigma<S: ?Sized>(&self, w: &DVector<f64>, s: &S) -> (f64, f64, DVector<f64>)
    where
        F: StateFeatures<S>,
    {
        let phi = self.features.features(s);
        let m = phi.len();
        let mean = w.rows(0, m).dot(&phi);
        (mean, self.sigma(w), phi)
    }
}

impl<S: ?Sized, F: StateFeatures<S>> DifferentiablePolicy<S> for GaussianLinearPolicy<F> {
    type Action = f64;

    fn dim(&self) -> usize {
        match self.noise {
            GaussianNoise::Fixed(_) => self.features.dim(),
            GaussianNoise::LearnedLog => self.features.dim() + 1,
        }
    }

    fn log_prob(&self, w: &DVector<f64>, s: &S, a: &f64) -> f64 {
        let (mean, sigma, _) = self.mean_and_sigma(w, s);
        let z = (a - mean) / sigma;
        -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln() - 0.5 * z * z
    }

    fn grad_log_prob(&self, w: &DVector<f64>, s: &S, a: &f64) -> DVector<f64> {
        let (mean, sigma, phi) = self.mean_and_sigma(w, s);
        let resid = a - mean;
        let var = sigma * sigma;
        let mut score = DVector::zeros(self.dim());
        score.rows_mut(0, phi.len()).copy_from(&(&phi * (resid / var)));
        if self.noise == GaussianNoise::LearnedLog {
            score[phi.len()] = resid * resid / var - 1.0;
        }
        score
    }

    fn hess_log_prob(&self, w: &DVector<f64>, s: &S, a: &f64) -> DMatrix<f64> {
        self.log_terms(w, s, a).hess
    }

    fn log_terms(&self, w: &DVector<f64>, s: &S, a: &f64) -> LogPolicyTerms {
        let (mean, sigma, phi) = self.mean_and_sigma(w, s);
        let m = phi.len();
        let n = self.dim();
        let var = sigma * sigma;
        let resid = a - mean;
        let log_prob = -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln() - 0.5 * resid * resid / var;
        let mut score = DVector::zeros(n);
        score.rows_mut(0, m).copy_from(&(&phi * (resid / var)));
        let mut hess = DMatrix::zeros(n, n);
        hess.view_mut((0, 0), (m, m)).copy_from(&(&phi * phi.transpose() * (-1.0 / var)));
        if self.noise == GaussianNoise::LearnedLog {
            let z2 = resid * resid / var;
            score[m] = z2 - 1.0;
            hess[(m, m)] = -2.0 * z2;
            let cross = &phi * (-2.0 * resid / var);
            hess.view_mut((0, m), (m, 1)).copy_from(&cross);
            hess.view_mut((m, 0), (1, m)).copy_from(&cross.transpose());
        }
        LogPolicyTerms { log_prob, score, hess }
    }

    fn sample<R: Rng + ?Sized>(&self, w: &DVector<f64>, s: &S, rng: &mut R) -> f64 {
        let (mean, sigma, _) = self.mean_and_sigma(w, s);
        let z: f64 = StandardNormal.sample(rng);
        mean + sigma * z
    }

    fn traits(&self) -> PolicyTraits {
        let mean_only = matches!(self.noise, GaussianNoise::Fixed(_));
        PolicyTraits {
            log_concave: mean_only,
            constant_curvature: mean_only,
        }
    }

    fn block_map(&self) -> BlockMap {
        let m = self.features.dim();
        match self.noise {
            GaussianNoise::Fixed(_) => BlockMap {
                blocks: vec![("mean".to_string(), 0..m)],
            },
            GaussianNoise::LearnedLog => BlockMap {
                blocks: vec![("mean".to_string(), 0..m), ("log_sigma".to_string(), m..m + 1)],
            },
        }
    }
}

/// The policy `π(a|s; T v + b)` seen as a function of `v`.
#[derive(Debug, Clone)]
pub struct AffineReparametrized<P> {
    pub inner: P,
    pub t: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl<P> AffineReparametrized<P> {
    pub fn new(inner: P, t: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if !t.is_square() || t.nrows() != offset.len() {
            return Err(Error::InvalidModel("affine map must be square and match the offset".into()));
        }
        Ok(Self { inner, t, offset })
    }

    /// Inner parameters `T v + b`.
    pub fn map(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.t * v + &self.offset
    }

    /// `T⁻¹ (w − b)`.
    pub fn unmap(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let lu = self.t.clone().lu();
        lu.solve(&(w - &self.offset))
            .ok_or_else(|| Error::Numerical("affine map is singular".into()))
    }
}

impl<S: ?Sized, P: DifferentiablePolicy<S>> DifferentiablePolicy<S> for AffineReparametrized<P> {
    type Action = P::Action;

    fn dim(&self) -> usize {
        self.t.ncols()
    }

    fn log_prob(&self, v: &DVector<f64>, s: &S, a: &P::Action) -> f64 {
        self.inner.log_prob(&self.map(v), s, a)
    }

    fn grad_log_prob(&self, v: &DVector<f64>, s: &S, a: &P::Action) -> DVector<f64> {
        self.t.tr_mul(&self.inner.grad_log_prob(&self.map(v), s, a))
    }

    fn hess_log_prob(&self, v: &DVector<f64>, s: &S, a: &P::Action) -> DMatrix<f64> {
        let h = self.inner.hess_log_prob(&self.map(v), s, a);
        self.t.tr_mul(&h) * &self.t
    }

    fn sample<R: Rng + ?Sized>(&self, v: &DVector<f64>, s: &S, rng: &mut R) -> P::Action {
        self.inner.sample(&self.map(v), s, rng)
    }

    fn traits(&self) -> PolicyTraits {
        self.inner.traits()
    }
}

impl<S: ?Sized, P: DiscretePolicy<S>> DiscretePolicy<S> for AffineReparametrized<P> {
    fn num_actions(&self, s: &S) -> usize {
        self.inner.num_actions(s)
    }

    fn evaluate(&self, v: &DVector<f64>, s: &S) -> DiscreteEvaluation {
        let e = self.inner.evaluate(&self.map(v), s);
        let pull = |h: &DMatrix<f64>| self.t.tr_mul(h) * &self.t;
        DiscreteEvaluation {
            log_probs: e.log_probs,
            probs: e.probs,
            scores: self.t.tr_mul(&e.scores),
            hessians: match &e.hessians {
                ActionHessians::Shared(h) => ActionHessians::Shared(pull(h)),
                ActionHessians::PerAction(hs) => ActionHessians::PerAction(hs.iter().map(pull).collect()),
            },
        }
    }
}
