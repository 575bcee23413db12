//! Instances shared by the benchmarks.

use gnpolicy::calculus::random_gibbs_model;
use gnpolicy::fixtures::GibbsModel;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random Gibbs problem with `states` states, 4 actions and `features`
/// parameters, plus a parameter vector to evaluate it at.
pub fn gibbs_problem(states: usize, features: usize, seed: u64) -> (GibbsModel, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_gibbs_model(states, 4, features, 0.95, &mut rng);
    let w = DVector::from_fn(features, |_, _| rng.gen_range(-1.0..1.0));
    (model, w)
}
