//! Randomized property suites behind `gnpolicy validate`.
//!
//! Every property is checked over a batch of instances whose seeds are
//! derived from the master seed. The report line names the instance with
//! the worst measured error, so a failure can be replayed on its own.

use std::fmt;

use gnpolicy::calculus::fd::{fd_gradient, fd_hessian_extrapolated, EXTRAPOLATED_HESSIAN_STEP, GRADIENT_STEP};
use gnpolicy::calculus::{
    check_value_consistency, hessian_decomposition, policy_gradient_exact, random_gibbs_model, ExactEvaluation,
    ExactModel, TabularModel,
};
use gnpolicy::experiments::diagnostics::GRIDWORLD_RIDGE;
use gnpolicy::env::build_mccallum;
use gnpolicy::fixtures;
use gnpolicy::linalg::{max_eigenvalue, min_eigenvalue};
use gnpolicy::mdp::random::random_mdp;
use gnpolicy::optimizers::{
    cg_gauss_newton_direction, compute_direction, fd_curvature_product, run_policy_search, CurvatureInputs, MvpMode,
    RuleKind, SearchOptions, StepSchedule, UpdateRule,
};
use gnpolicy::policy::{AffineReparametrized, GibbsPolicy, TableFeatures, TabularSoftmaxPolicy};
use gnpolicy::rng::derive_seed;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;

pub const SUITES: [&str; 7] = ["gradient", "hessian", "definiteness", "affine", "em-gn", "consistency", "cg"];

/// Outcome of one property over its batch of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub property: &'static str,
    pub passed: bool,
    /// Seed of the instance with the worst measured value.
    pub seed: u64,
    pub instances: usize,
    pub detail: String,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} seed={} instances={} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.property,
            self.seed,
            self.instances,
            self.detail
        )
    }
}

/// Tracks the worst error of a property across instances; `bound` is the
/// largest acceptable value.
struct Worst {
    suite: &'static str,
    property: &'static str,
    bound: f64,
    value: f64,
    seed: u64,
    instances: usize,
    error: Option<String>,
}

impl Worst {
    fn new(suite: &'static str, property: &'static str, bound: f64) -> Self {
        Self {
            suite,
            property,
            bound,
            value: f64::NEG_INFINITY,
            seed: 0,
            instances: 0,
            error: None,
        }
    }

    fn record(&mut self, seed: u64, value: gnpolicy::Result<f64>) {
        self.instances += 1;
        match value {
            Ok(v) if v.is_nan() => {
                self.value = f64::NAN;
                self.seed = seed;
            }
            Ok(v) if !self.value.is_nan() && v > self.value => {
                self.value = v;
                self.seed = seed;
            }
            Ok(_) => {}
            Err(e) => {
                if self.error.is_none() {
                    self.error = Some(e.to_string());
                    self.seed = seed;
                }
            }
        }
    }

    fn finish(self) -> PropertyResult {
        let (passed, detail) = match self.error {
            Some(e) => (false, format!("error: {e}")),
            None => (self.value <= self.bound, format!("worst={:.3e} bound={:.1e}", self.value, self.bound)),
        };
        PropertyResult {
            suite: self.suite,
            property: self.property,
            passed,
            seed: self.seed,
            instances: self.instances,
            detail,
        }
    }
}

/// `max|a − b| / max|b|`.
fn rel_m(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

fn rel_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

fn random_w(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

/// A random Gibbs instance with `|S| ≤ 5`, `|A| ≤ 3`, `γ = 0.9` and a random
/// parameter vector.
fn gibbs_instance(seed: u64) -> (TabularModel<GibbsPolicy<TableFeatures>>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = rng.gen_range(2..=5);
    let actions = rng.gen_range(2..=3);
    let n = rng.gen_range(1..=4);
    let model = random_gibbs_model(states, actions, n, 0.9, &mut rng);
    let w = random_w(n, 1.5, &mut rng);
    (model, w)
}

/// Like [`gibbs_instance`] but with at most `|S|(|A| − 1)` features, so that
/// `H2` is generically nonsingular.
fn full_rank_instance(seed: u64) -> (TabularModel<GibbsPolicy<TableFeatures>>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = rng.gen_range(2..=5);
    let actions = rng.gen_range(2..=3);
    let n = rng.gen_range(1..=4.min(states * (actions - 1)));
    let model = random_gibbs_model(states, actions, n, 0.9, &mut rng);
    let w = random_w(n, 1.5, &mut rng);
    (model, w)
}

/// Same family with rewards drawn from `[0.1, 1]`.
fn positive_reward_instance(seed: u64) -> (TabularModel<GibbsPolicy<TableFeatures>>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = rng.gen_range(2..=5);
    let actions = rng.gen_range(2..=3);
    let n = rng.gen_range(1..=4);
    let mdp = random_mdp(states, actions, 0.9, 0.1, 1.0, &mut rng);
    let tables = (0..states)
        .map(|_| DMatrix::from_fn(n, actions, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let policy = GibbsPolicy::new(TableFeatures::new(tables).expect("tables share a shape"));
    let model = TabularModel::new(mdp, policy).expect("action counts agree");
    let w = random_w(n, 1.5, &mut rng);
    (model, w)
}

fn instance_seeds(seed: u64, suite: &str, count: usize) -> impl Iterator<Item = u64> {
    let base = derive_seed(seed, suite.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    (0..count as u64).map(move |i| derive_seed(base, i))
}

fn gradient_suite(seed: u64) -> Vec<PropertyResult> {
    let mut check = Worst::new("gradient", "exact-vs-central-differences", 1e-6);
    for s in instance_seeds(seed, "gradient", 50) {
        let (model, w) = gibbs_instance(s);
        check.record(
            s,
            (|| {
                let exact = policy_gradient_exact(&model, &w)?;
                let fd = fd_gradient(|x| model.objective(x).unwrap_or(f64::NAN), &w, GRADIENT_STEP)?;
                Ok(rel_v(&exact, &fd))
            })(),
        );
    }
    vec![check.finish()]
}

fn hessian_suite(seed: u64) -> Vec<PropertyResult> {
    let mut fd = Worst::new("hessian", "decomposition-vs-central-differences", 1e-5);
    let mut a_split = Worst::new("hessian", "h1-h2-equal-a-plus-v", 1e-9);
    let mut v_pair = Worst::new("hessian", "v1-equals-minus-v2", 1e-9);
    let mut a2 = Worst::new("hessian", "a2-vanishes-for-gibbs", 1e-9);
    let mut fisher = Worst::new("hessian", "fisher-forms-agree", 1e-9);
    for s in instance_seeds(seed, "hessian", 50) {
        let (model, w) = gibbs_instance(s);
        let dec = match hessian_decomposition(&model, &w) {
            Ok(d) => d,
            Err(e) => {
                for c in [&mut fd, &mut a_split, &mut v_pair, &mut a2, &mut fisher] {
                    c.record(s, Err(e.clone()));
                }
                continue;
            }
        };
        let scale = dec.h1.amax().max(dec.h2.amax());
        fd.record(
            s,
            fd_hessian_extrapolated(|x| model.objective(x).unwrap_or(f64::NAN), &w, EXTRAPOLATED_HESSIAN_STEP).map(|h| rel_m(&dec.hessian, &h)),
        );
        let split = (&dec.a1 + &dec.v1 - &dec.h1).amax().max((&dec.a2 + &dec.v2 - &dec.h2).amax());
        a_split.record(s, Ok(split / scale));
        v_pair.record(s, Ok((&dec.v1 + &dec.v2).amax() / scale));
        a2.record(s, Ok(dec.a2.amax() / scale));
        fisher.record(
            s,
            ExactEvaluation::new(&model, &w).map(|e| {
                let f = e.fisher();
                rel_m(&f.outer, &f.curvature)
            }),
        );
    }
    vec![fd.finish(), a_split.finish(), v_pair.finish(), a2.finish(), fisher.finish()]
}

fn definiteness_suite(seed: u64) -> Vec<PropertyResult> {
    // Eigenvalue signs are judged against the matrix scale.
    let mut h2 = Worst::new("definiteness", "h2-negative-semidefinite", 1e-10);
    let mut softmax_h2 = Worst::new("definiteness", "tabular-softmax-h2-negative-semidefinite", 1e-10);
    let mut rest = Worst::new("definiteness", "h1-plus-cross-positive-semidefinite", 1e-10);
    for s in instance_seeds(seed, "definiteness", 100) {
        let (model, w) = gibbs_instance(s);
        h2.record(
            s,
            hessian_decomposition(&model, &w).and_then(|d| Ok(max_eigenvalue(&d.h2)? / d.h2.amax().max(1.0))),
        );

        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mdp = random_mdp(3, 3, 0.9, 0.0, 1.0, &mut rng);
        let policy = TabularSoftmaxPolicy::uniform(3, 3).expect("positive sizes");
        let tab = TabularModel::new(mdp, policy).expect("action counts agree");
        let v = random_w(9, 2.0, &mut rng);
        softmax_h2.record(
            s,
            hessian_decomposition(&tab, &v).and_then(|d| Ok(max_eigenvalue(&d.h2)? / d.h2.amax().max(1.0))),
        );

        let (model, w) = positive_reward_instance(s);
        rest.record(
            s,
            hessian_decomposition(&model, &w).and_then(|d| {
                let m = &d.h1 + d.cross_term();
                Ok(-min_eigenvalue(&m)? / m.amax().max(1.0))
            }),
        );
    }
    vec![h2.finish(), softmax_h2.finish(), rest.finish()]
}

/// Largest relative gap between the original iterates and the mapped
/// iterates of the reparametrized problem.
fn trace_deviation(
    rule: &UpdateRule,
    t: DMatrix<f64>,
    offset: DVector<f64>,
    w0: &DVector<f64>,
) -> gnpolicy::Result<f64> {
    let model = fixtures::interior_gibbs();
    let policy = AffineReparametrized::new(model.policy.clone(), t, offset)?;
    let mapped = TabularModel::new(model.mdp.clone(), policy.clone())?;
    let v0 = policy.unmap(w0)?;
    let options = SearchOptions {
        iterations: 20,
        grad_tol: 0.0,
        ..SearchOptions::default()
    };
    let step = StepSchedule::Constant { alpha: 0.5 };
    let a = run_policy_search(&model, w0, rule, &step, &options)?;
    let b = run_policy_search(&mapped, &v0, rule, &step, &options)?;
    Ok(a.iterates
        .iter()
        .zip(&b.iterates)
        .map(|(w, v)| (policy.map(v) - w).amax() / w.amax().max(1e-300))
        .fold(0.0, f64::max))
}

fn affine_suite(seed: u64) -> Vec<PropertyResult> {
    let mut full = Worst::new("affine", "gn1-gn2-natural-invariant", 1e-8);
    let mut diag = Worst::new("affine", "diagonal-gn-invariant-to-scaling", 1e-8);
    let model = fixtures::interior_gibbs();
    let optimum = fixtures::interior_gibbs_optimum(&model);
    for s in instance_seeds(seed, "affine", 5) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = loop {
            let t: DMatrix<f64> = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-2.0..2.0));
            if t.determinant().abs() > 0.5 {
                break t;
            }
        };
        let offset = random_w(2, 1.0, &mut rng);
        let scales = DVector::from_fn(2, |_, _| rng.gen_range(0.2..5.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        // GN1 needs −A1 positive definite, which holds near the optimum.
        let near = optimum.as_ref().map(|w| w + random_w(2, 0.3, &mut rng)).map_err(|e| e.clone());
        let far = random_w(2, 1.0, &mut rng);
        full.record(
            s,
            (|| {
                let mut worst = 0.0f64;
                for kind in [RuleKind::GaussNewton2, RuleKind::Natural] {
                    worst = worst.max(trace_deviation(&UpdateRule::new(kind), t.clone(), offset.clone(), &far)?);
                }
                let gn1 = trace_deviation(&UpdateRule::new(RuleKind::GaussNewton1), t.clone(), offset.clone(), &near.clone()?)?;
                Ok(worst.max(gn1))
            })(),
        );
        diag.record(
            s,
            (|| {
                let d = DMatrix::from_diagonal(&scales);
                let gn2 = trace_deviation(&UpdateRule::new(RuleKind::DiagGn2), d.clone(), offset.clone(), &far)?;
                let gn1 = trace_deviation(&UpdateRule::new(RuleKind::DiagGn1), d, offset.clone(), &near.clone()?)?;
                Ok(gn2.max(gn1))
            })(),
        );
    }
    // Steepest ascent must visibly depend on the parametrization.
    let mut control = Worst::new("affine", "steepest-detects-non-invariance", -1e-3);
    control.record(
        seed,
        trace_deviation(
            &UpdateRule::new(RuleKind::Steepest),
            fixtures::anisotropic_map(),
            DVector::from_vec(vec![0.2, -0.1]),
            &DVector::from_vec(vec![1.0, 0.5]),
        )
        .map(|d| -d),
    );
    let mut out = vec![full.finish(), diag.finish(), control.finish()];
    if let Some(r) = out.last_mut() {
        r.detail = format!("{} (negated deviation)", r.detail);
    }
    out
}

fn em_gn_suite(seed: u64) -> Vec<PropertyResult> {
    let mut check = Worst::new("em-gn", "gn2-unit-step-equals-em-on-gaussian-mean", 1e-8);
    for s in instance_seeds(seed, "em-gn", 5) {
        let model = fixtures::gaussian_chain(s);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let w0 = random_w(model.dim(), 1.0, &mut rng);
        check.record(
            s,
            (|| {
                let options = SearchOptions {
                    iterations: 20,
                    grad_tol: 0.0,
                    ..SearchOptions::default()
                };
                let step = StepSchedule::Constant { alpha: 1.0 };
                let gn2 = run_policy_search(&model, &w0, &UpdateRule::new(RuleKind::GaussNewton2), &step, &options)?;
                let em = run_policy_search(&model, &w0, &UpdateRule::new(RuleKind::Em), &step, &options)?;
                Ok(gn2
                    .iterates
                    .iter()
                    .zip(&em.iterates)
                    .map(|(a, b)| (a - b).amax())
                    .fold(0.0, f64::max))
            })(),
        );
    }
    vec![check.finish()]
}

fn consistency_suite(seed: u64) -> Vec<PropertyResult> {
    let mut softmax = Worst::new("consistency", "tabular-softmax-consistent", 0.0);
    for s in instance_seeds(seed, "consistency", 100) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let states = rng.gen_range(2..=5);
        let actions = rng.gen_range(2..=3);
        let mdp = random_mdp(states, actions, 0.9, 0.0, 1.0, &mut rng);
        let model = TabularModel::new(mdp, TabularSoftmaxPolicy::uniform(states, actions).expect("positive sizes"))
            .expect("action counts agree");
        let w = random_w(states * actions, 2.0, &mut rng);
        softmax.record(
            s,
            check_value_consistency(&model, &w, 1e-9).map(|r| r.witnesses.len() as f64),
        );
    }
    let mut aliased = Worst::new("consistency", "mccallum-inconsistent-on-aliased-cells", 0.0);
    aliased.record(
        seed,
        (|| {
            let model = build_mccallum()?.gibbs_model();
            let rule = UpdateRule::new(RuleKind::GaussNewton2).with_ridge(GRIDWORLD_RIDGE);
            let options = SearchOptions {
                iterations: 200,
                grad_tol: 0.0,
                ..SearchOptions::default()
            };
            let run = run_policy_search(&model, &DVector::zeros(model.dim()), &rule, &StepSchedule::Constant { alpha: 1.0 }, &options)?;
            let report = check_value_consistency(&model, &run.w, 1e-9)?;
            Ok(if !report.consistent_at_w && report.involves_any(&[3, 4, 5]) { 0.0 } else { 1.0 })
        })(),
    );
    vec![softmax.finish(), aliased.finish()]
}

fn cg_suite(seed: u64) -> Vec<PropertyResult> {
    let mut direct = Worst::new("cg", "exact-mvp-matches-direct-gn2", 1e-6);
    let mut probes = Worst::new("cg", "fd-mvp-matches-exact-product", 1e-3);
    let mut ascent = Worst::new("cg", "warm-started-iterates-ascend", 0.0);
    for s in instance_seeds(seed, "cg", 20) {
        let (model, w) = full_rank_instance(s);
        let eval = match ExactEvaluation::new(&model, &w).and_then(|e| Ok((e.decomposition()?, e))) {
            Ok(x) => x,
            Err(e) => {
                for c in [&mut direct, &mut probes, &mut ascent] {
                    c.record(s, Err(e.clone()));
                }
                continue;
            }
        };
        let (dec, eval) = eval;
        let surrogate = eval.surrogate();
        let n = model.dim();
        let reference = compute_direction(&UpdateRule::new(RuleKind::GaussNewton2), &CurvatureInputs::from_decomposition(&dec));
        let cg = cg_gauss_newton_direction(&model, &surrogate, &dec.grad, Some(n), MvpMode::Exact);
        direct.record(
            s,
            match (&reference, &cg) {
                (Ok(r), Ok(c)) => Ok(rel_v(&c.x, &r.d)),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            },
        );
        ascent.record(
            s,
            cg.map(|c| {
                let worst = c.iterates.iter().map(|x| dec.grad.dot(x)).fold(f64::INFINITY, f64::min);
                if worst > 0.0 {
                    0.0
                } else {
                    1.0
                }
            }),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let neg_h2 = -&dec.h2;
        let worst = (0..5)
            .map(|_| {
                let p = random_w(n, 1.0, &mut rng);
                let exact = &neg_h2 * &p;
                (fd_curvature_product(&model, &surrogate, &p, 1e-6) - &exact).norm() / exact.norm().max(1e-300)
            })
            .fold(0.0, f64::max);
        probes.record(s, Ok(worst));
    }
    vec![direct.finish(), probes.finish(), ascent.finish()]
}

/// Runs one suite, or every suite for `"all"`.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<PropertyResult>, CliError> {
    let run_one = |suite: &str| match suite {
        "gradient" => gradient_suite(seed),
        "hessian" => hessian_suite(seed),
        "definiteness" => definiteness_suite(seed),
        "affine" => affine_suite(seed),
        "em-gn" => em_gn_suite(seed),
        "consistency" => consistency_suite(seed),
        "cg" => cg_suite(seed),
        _ => unreachable!("suite names are checked first"),
    };
    if name == "all" {
        Ok(SUITES.iter().flat_map(|s| run_one(s)).collect())
    } else if SUITES.contains(&name) {
        Ok(run_one(name))
    } else {
        Err(CliError::Config(format!(
            "suite: unknown suite '{name}', expected one of all, {}",
            SUITES.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_a_config_error() {
        assert!(matches!(run_suite("nope", 0), Err(CliError::Config(_))));
    }

    #[test]
    fn failing_instances_are_reported() {
        let mut w = Worst::new("s", "p", 1.0);
        w.record(3, Ok(0.5));
        w.record(4, Ok(2.0));
        w.record(5, Ok(1.5));
        let r = w.finish();
        assert!(!r.passed);
        assert_eq!(r.seed, 4);
        assert_eq!(r.instances, 3);
        let mut w = Worst::new("s", "p", 1.0);
        w.record(1, Ok(f64::NAN));
        w.record(2, Ok(0.1));
        assert!(!w.finish().passed);
    }
}
