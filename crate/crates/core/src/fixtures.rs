//! Small reference instances shared by the test suites, the validation
//! command and the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::calculus::{ContinuousActionChain, QuadratureModel, TabularModel};
use crate::mdp::TabularMdp;
use crate::optimizers::{run_policy_search, RuleKind, SearchOptions, StepSchedule, UpdateRule};
use crate::policy::{GaussianLinearPolicy, GaussianNoise, GibbsPolicy, StateTable, TableFeatures};
use crate::Result;

pub type GibbsModel = TabularModel<GibbsPolicy<TableFeatures>>;

fn features(cols: &[[f64; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(2, cols.len(), |i, a| cols[a][i])
}

/// Three states, three actions, two Gibbs parameters, γ = 0.6, sparse
/// rewards. The return has a strict interior maximum near `(4.7, −2.7)`.
pub fn interior_gibbs() -> GibbsModel {
    let transition = vec![
        vec![vec![0.49, 0.18, 0.33], vec![0.18, 0.34, 0.48], vec![0.35, 0.32, 0.33]],
        vec![vec![0.25, 0.33, 0.42], vec![0.44, 0.32, 0.24], vec![0.35, 0.32, 0.33]],
        vec![vec![0.68, 0.09, 0.23], vec![0.33, 0.31, 0.36], vec![0.15, 0.80, 0.05]],
    ];
    let reward = vec![vec![0.0, 0.0, 0.0], vec![0.57, 0.29, 0.0], vec![0.0, 0.0, 0.16]];
    let mdp = TabularMdp::new(transition, reward, vec![0.21, 0.37, 0.42], 0.6).expect("fixture MDP is valid");
    let tables = vec![
        features(&[[0.66, 0.58], [0.06, 0.66], [0.87, -0.39]]),
        features(&[[0.08, 0.27], [0.09, -0.24], [-0.37, 0.35]]),
        features(&[[-0.18, 0.46], [-0.82, 0.27], [-0.37, -0.71]]),
    ];
    let policy = GibbsPolicy::new(TableFeatures::new(tables).expect("fixture features are valid"));
    TabularModel::new(mdp, policy).expect("fixture action counts agree")
}

/// The maximizer of [`interior_gibbs`], found by running the second
/// Gauss-Newton method from the origin until the gradient vanishes.
pub fn interior_gibbs_optimum(model: &GibbsModel) -> Result<DVector<f64>> {
    let options = SearchOptions {
        iterations: 2000,
        grad_tol: 1e-14,
        ..SearchOptions::default()
    };
    let rule = UpdateRule::new(RuleKind::GaussNewton2);
    let out = run_policy_search(model, &DVector::zeros(2), &rule, &StepSchedule::Constant { alpha: 1.0 }, &options)?;
    Ok(out.w)
}

/// A four-state chain with a fixed-σ Gaussian-linear policy on two state
/// features, evaluated by quadrature.
pub fn gaussian_chain(seed: u64) -> QuadratureModel<StateTable> {
    gaussian_chain_with_noise(seed, GaussianNoise::Fixed(0.5))
}

pub fn gaussian_chain_with_noise(seed: u64, noise: GaussianNoise) -> QuadratureModel<StateTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = ContinuousActionChain::random(4, 0.8, &mut rng);
    let rows = (0..4)
        .map(|s| DVector::from_vec(vec![1.0, s as f64 / 3.0 - 0.5]))
        .collect();
    let policy = GaussianLinearPolicy::new(StateTable::new(rows).expect("rows share a length"), noise)
        .expect("fixture σ is positive");
    QuadratureModel::new(chain, policy, QuadratureModel::<StateTable>::DEFAULT_NODES).expect("node count is positive")
}

/// Three-state ergodic chain for the recurrent-state estimator.
///
/// State 0 is the recurrent state: it has no reward and no features, so the
/// policy there does not depend on `w`. Transitions do not depend on the
/// action, so the stationary distribution is fixed and the expected cycle
/// length has zero gradient.
pub fn recurrent_chain() -> (TabularMdp, GibbsPolicy<TableFeatures>) {
    let rows = [[0.1, 0.5, 0.4], [0.4, 0.3, 0.3], [0.3, 0.4, 0.3]];
    let transition = rows.iter().map(|r| vec![r.to_vec(), r.to_vec()]).collect();
    let reward = vec![vec![0.0, 0.0], vec![1.0, 0.2], vec![0.3, 0.9]];
    let mdp = TabularMdp::new(transition, reward, vec![1.0, 0.0, 0.0], 0.9).expect("fixture MDP is valid");
    let tables = vec![
        DMatrix::zeros(2, 2),
        features(&[[1.0, 0.3], [0.0, -0.5]]),
        features(&[[-0.4, 0.0], [0.8, 1.0]]),
    ];
    (mdp, GibbsPolicy::new(TableFeatures::new(tables).expect("fixture features are valid")))
}

/// A fixed anisotropic reparametrization used as the steepest-ascent
/// negative control.
pub fn anisotropic_map() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[8.0, 0.5, -1.0, 0.125])
}
