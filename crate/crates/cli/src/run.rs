//! Executes a configuration: one seeded run per repeat.

use gnpolicy::calculus::{random_gibbs_model, ExactModel, TabularModel};
use gnpolicy::env::gridworld::{hallway_spec, mccallum_spec, GridworldSpec};
use gnpolicy::experiments::diagnostics::{hessian_diagnostics, HessianDiagnostics};
use gnpolicy::optimizers::{run_policy_search, RunTrace, SearchOptions, StepSchedule};
use gnpolicy::policy::TabularSoftmaxPolicy;
use gnpolicy::rng::{derive_seed, stream};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::{EnvironmentConfig, ExperimentConfig, PolicyKind};
use crate::error::CliError;

/// The trace of one repeat and the seed it ran under.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatOutput {
    pub repeat: usize,
    pub seed: u64,
    pub trace: RunTrace,
}

/// Seed of repeat `index` under `master`.
pub fn repeat_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, index as u64)
}

/// Calls `f` with the exact model a tabular configuration describes.
fn with_tabular_model<T>(
    config: &ExperimentConfig,
    f: impl FnOnce(&dyn ExactModel) -> Result<T, CliError>,
) -> Result<T, CliError> {
    let maze = |mut spec: GridworldSpec, discount: Option<f64>| -> Result<_, CliError> {
        if let Some(g) = discount {
            spec.discount = g;
        }
        Ok(spec.build()?)
    };
    let world = match &config.environment {
        EnvironmentConfig::Hallway { discount } => maze(hallway_spec(), *discount)?,
        EnvironmentConfig::Mccallum { discount } => maze(mccallum_spec(), *discount)?,
        EnvironmentConfig::RandomTabular {
            states,
            actions,
            features,
            discount,
            instance_seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*instance_seed);
            let gibbs = random_gibbs_model(*states, *actions, *features, *discount, &mut rng);
            return match config.policy.kind {
                PolicyKind::TabularSoftmax => {
                    let policy = TabularSoftmaxPolicy::uniform(*states, *actions)?;
                    f(&TabularModel::new(gibbs.mdp, policy)?)
                }
                _ => f(&gibbs),
            };
        }
        _ => return Err(CliError::Config(format!("{} is not a tabular environment", config.environment.name()))),
    };
    match config.policy.kind {
        PolicyKind::TabularSoftmax => {
            let policy = TabularSoftmaxPolicy::uniform(world.mdp.num_states(), 4)?;
            f(&TabularModel::new(world.mdp, policy)?)
        }
        _ => f(&world.gibbs_model()),
    }
}

fn initial_weights(config: &ExperimentConfig, dim: usize, seed: u64) -> DVector<f64> {
    if config.policy.init_scale == 0.0 {
        return DVector::zeros(dim);
    }
    let mut rng = stream(derive_seed(seed, 0), 0);
    DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        config.policy.init_scale * z
    })
}

/// Runs repeat `index` of `config`.
pub fn run_repeat(config: &ExperimentConfig, index: usize) -> Result<RepeatOutput, CliError> {
    let seed = repeat_seed(config.seed, index);
    let est = config.estimator.clone().unwrap_or_default();
    let trace = match &config.environment {
        EnvironmentConfig::CartPole(protocol) => {
            let mut p = protocol.clone();
            if let Some(n) = est.trajectories_per_iteration {
                p.episodes_per_iteration = n;
            }
            if let Some(h) = est.horizon {
                p.horizon = h;
            }
            if let Some(sigma) = config.policy.sigma {
                p.policy_sigma = sigma;
            }
            p.run(config.rule.kind, &config.schedule, config.iterations, seed)?.trace
        }
        EnvironmentConfig::Navigation(protocol) => {
            let mut p = protocol.clone();
            if let Some(n) = est.trajectories_per_iteration {
                p.trajectories_per_iteration = n;
            }
            if let Some(h) = est.horizon {
                p.dynamics.horizon = h;
            }
            if let Some(sigma) = config.policy.sigma {
                p.sigma = sigma;
            }
            p.run(&config.rule, &config.schedule, config.iterations, seed)?.trace
        }
        EnvironmentConfig::Tetris(protocol) => {
            let mut p = protocol.clone();
            if let Some(n) = est.trajectories_per_iteration {
                p.games_per_iteration = n;
            }
            if let StepSchedule::Grid { steps } = &config.schedule {
                p.steps = steps.clone();
            }
            p.run(&config.rule, config.iterations, seed)?.trace
        }
        _ => with_tabular_model(config, |model| {
            let options = SearchOptions {
                iterations: config.iterations,
                grad_tol: config.diagnostics.grad_tol.unwrap_or(SearchOptions::default().grad_tol),
                diagnostics: config.diagnostics.hessian_norms,
                timing: config.diagnostics.timing,
            };
            let w0 = initial_weights(config, model.dim(), seed);
            Ok(run_policy_search(model, &w0, &config.rule, &config.schedule, &options)?.trace)
        })?,
    };
    Ok(RepeatOutput {
        repeat: index,
        seed,
        trace,
    })
}

/// Runs every repeat, in parallel, and returns them in repeat order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RepeatOutput>, CliError> {
    (0..config.repeats)
        .into_par_iter()
        .map(|i| run_repeat(config, i))
        .collect()
}

/// Hessian diagnostics for repeat 0 of a tabular configuration.
pub fn run_diagnostics(config: &ExperimentConfig) -> Result<(u64, HessianDiagnostics), CliError> {
    if !config.environment.is_tabular() {
        return Err(CliError::Config(format!(
            "environment: diagnose-hessian needs a tabular environment, got {}",
            config.environment.name()
        )));
    }
    let seed = repeat_seed(config.seed, 0);
    let diag = with_tabular_model(config, |model| {
        let w0 = initial_weights(config, model.dim(), seed);
        Ok(hessian_diagnostics(
            model,
            &w0,
            &config.rule,
            &config.schedule,
            config.iterations,
            &config.diagnostics.checkpoints,
        )?)
    })?;
    Ok((seed, diag))
}
