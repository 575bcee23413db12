//! Spectral norms of `H12 + H12ᵀ` and `A1` along a Gauss-Newton run.
//!
//! The run is taken to convergence first and its last iterate serves as the
//! reference optimum `w*`; the norms are then reported at the requested
//! checkpoints together with the distance `‖w_k − w*‖`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::calculus::{hessian_decomposition, ExactModel};
use crate::env::gridworld::{build_hallway, build_mccallum, Gridworld};
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::optimizers::{run_policy_search, RuleKind, SearchOptions, StepSchedule, UpdateRule};

/// Ridge used by the gridworld runs; the wall features have null directions
/// (a shift shared by every logit) that plain GN2 would otherwise blow up.
pub const GRIDWORLD_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maze {
    Hallway,
    Mccallum,
}

impl Maze {
    pub fn build(self) -> Result<Gridworld> {
        match self {
            Maze::Hallway => build_hallway(),
            Maze::Mccallum => build_mccallum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub iteration: usize,
    pub distance: f64,
    pub h12_norm: f64,
    pub a1_norm: f64,
}

impl DiagnosticRow {
    pub fn log_h12(&self) -> f64 {
        self.h12_norm.ln()
    }

    pub fn log_a1(&self) -> f64 {
        self.a1_norm.ln()
    }

    /// `‖A1‖ / ‖H12 + H12ᵀ‖`, or `None` when both vanish.
    pub fn ratio(&self) -> Option<f64> {
        if self.h12_norm == 0.0 && self.a1_norm == 0.0 {
            None
        } else {
            Some(self.a1_norm / self.h12_norm)
        }
    }
}

#[derive(Debug, Clone)]
pub struct HessianDiagnostics {
    pub w_star: DVector<f64>,
    pub return_star: f64,
    pub rows: Vec<DiagnosticRow>,
}

impl HessianDiagnostics {
    /// The row at `w*` itself.
    pub fn at_optimum(&self) -> &DiagnosticRow {
        self.rows.last().expect("the optimum row is always present")
    }
}

/// Runs `rule` for `iterations` steps from `w0`, then evaluates the norms at
/// each checkpoint iterate (checkpoints past the end are clamped) and at `w*`.
pub fn hessian_diagnostics<M: ExactModel + ?Sized>(
    model: &M,
    w0: &DVector<f64>,
    rule: &UpdateRule,
    schedule: &StepSchedule,
    iterations: usize,
    checkpoints: &[usize],
) -> Result<HessianDiagnostics> {
    let options = SearchOptions {
        iterations,
        grad_tol: 0.0,
        ..SearchOptions::default()
    };
    let run = run_policy_search(model, w0, rule, schedule, &options)?;
    let last = run.iterates.len() - 1;
    let w_star = run.iterates[last].clone();
    let mut ks: Vec<usize> = checkpoints.iter().map(|&k| k.min(last)).collect();
    ks.push(last);
    ks.sort_unstable();
    ks.dedup();
    let rows = ks
        .into_iter()
        .map(|k| {
            let w = &run.iterates[k];
            let dec = hessian_decomposition(model, w)?;
            Ok(DiagnosticRow {
                iteration: k,
                distance: (w - &w_star).norm(),
                h12_norm: spectral_norm(&dec.cross_term()),
                a1_norm: spectral_norm(&dec.a1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let return_star = run
        .trace
        .last()
        .map(|r| r.ret)
        .ok_or_else(|| Error::Numerical("empty run trace".into()))?;
    Ok(HessianDiagnostics { w_star, return_star, rows })
}

/// GN2 from the uniform policy on one of the two mazes.
pub fn maze_diagnostics(maze: Maze, iterations: usize, checkpoints: &[usize]) -> Result<HessianDiagnostics> {
    let world = maze.build()?;
    let model = world.gibbs_model();
    let w0 = DVector::zeros(model.dim());
    hessian_diagnostics(
        &model,
        &w0,
        &UpdateRule::new(RuleKind::GaussNewton2).with_ridge(GRIDWORLD_RIDGE),
        &StepSchedule::Constant { alpha: 1.0 },
        iterations,
        checkpoints,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::gridworld::hallway_spec;

    #[test]
    fn zero_reward_gives_zero_norms() {
        let mut spec = hallway_spec();
        spec.goal_reward = 0.0;
        let model = spec.build().unwrap().gibbs_model();
        let w0 = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.5]);
        let d = hessian_diagnostics(
            &model,
            &w0,
            &UpdateRule::new(RuleKind::GaussNewton2).with_ridge(GRIDWORLD_RIDGE),
            &StepSchedule::Constant { alpha: 1.0 },
            5,
            &[0, 2],
        )
        .unwrap();
        for row in &d.rows {
            assert_eq!(row.h12_norm, 0.0);
            assert_eq!(row.a1_norm, 0.0);
            assert_eq!(row.ratio(), None);
        }
    }

    #[test]
    fn checkpoints_are_clamped_and_end_at_the_optimum() {
        let d = maze_diagnostics(Maze::Hallway, 10, &[0, 5, 50]).unwrap();
        let its: Vec<usize> = d.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 5, 10]);
        assert_eq!(d.at_optimum().distance, 0.0);
        assert!(d.rows[0].distance > d.rows[1].distance);
    }
}
