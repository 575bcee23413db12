//! Gibbs placement policy for Tetris, trained with the recurrent-state
//! estimator and a grid line search.
//!
//! Games are played back to back: a finished game is followed by a fresh
//! empty board, so the empty board (whatever the piece) is visited
//! regularly and serves as the recurrent state. The current piece is ignored
//! when deciding whether the board is in that state.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::tetris::{feature_dim, PlacementFeatures, TetrisBoard};
use crate::error::{Error, Result};
use crate::estimators::RecurrentAccumulator;
use crate::optimizers::{compute_direction, grid_line_search, CurvatureInputs, IterationRecord, RuleKind, RunTrace, UpdateRule};
use crate::policy::{gibbs_evaluation, sample_index, softmax, ActionFeatures, LogPolicyTerms};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TetrisProtocol {
    pub width: usize,
    pub height: usize,
    /// Games sampled for the estimate, and again for each line-search candidate.
    pub games_per_iteration: usize,
    pub steps: Vec<f64>,
    /// Placements after which a game is stopped and counted as finished.
    pub max_placements: usize,
    /// Ridge added to `−Δ²`, relative to the mean of its diagonal.
    pub relative_ridge: f64,
}

impl Default for TetrisProtocol {
    fn default() -> Self {
        Self {
            width: 6,
            height: 6,
            games_per_iteration: 200,
            steps: vec![0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0],
            max_placements: 1000,
            relative_ridge: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TetrisRun {
    pub w: DVector<f64>,
    pub trace: RunTrace,
}

struct Batch {
    mean_lines: f64,
    estimates: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl TetrisProtocol {
    fn check(&self, rule: &UpdateRule) -> Result<()> {
        TetrisBoard::empty(self.width, self.height, 0)?;
        if self.games_per_iteration == 0 || self.max_placements == 0 {
            return Err(Error::InvalidModel("games_per_iteration and max_placements must be positive".into()));
        }
        if self.steps.is_empty() || self.steps.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidModel("line-search steps must be positive".into()));
        }
        if !matches!(rule.kind, RuleKind::Steepest | RuleKind::GaussNewton2 | RuleKind::DiagGn2) {
            return Err(Error::InvalidModel(format!(
                "rule {} is not available with the recurrent-state estimator",
                rule.kind.name()
            )));
        }
        Ok(())
    }

    /// Plays `games` games at `w`; with `estimate` set, also returns the
    /// recurrent-state sums `(Δ¹, Δ²)`.
    fn play<R: Rng + ?Sized>(&self, w: &DVector<f64>, games: usize, estimate: bool, rng: &mut R) -> Result<Batch> {
        let features = PlacementFeatures { width: self.width };
        let n = feature_dim(self.width);
        let mut acc = estimate.then(|| RecurrentAccumulator::new(n));
        let mut total = 0u64;
        for _ in 0..games {
            let mut board = TetrisBoard::new_game(self.width, self.height, rng)?;
            for _ in 0..self.max_placements {
                let phi = features.features(&board);
                let (a, terms) = if acc.is_some() {
                    let e = gibbs_evaluation(w, &phi);
                    let a = sample_index(&e.probs, rng);
                    let terms = LogPolicyTerms {
                        log_prob: e.log_probs[a],
                        score: e.scores.column(a).into_owned(),
                        hess: e.hessians.get(a).clone(),
                    };
                    (a, Some(terms))
                } else {
                    (sample_index(&softmax(&phi.tr_mul(w)).0, rng), None)
                };
                let recurrent = board.is_empty();
                let out = board.place(a, rng)?;
                if let (Some(acc), Some(terms)) = (acc.as_mut(), terms.as_ref()) {
                    acc.observe(recurrent, terms, out.lines as f64);
                }
                total += out.lines as u64;
                if out.terminal {
                    break;
                }
                board = out.board;
            }
        }
        Ok(Batch {
            mean_lines: total as f64 / games as f64,
            estimates: acc.map(|a| {
                let r = a.finish();
                (r.delta1, r.delta2)
            }),
        })
    }

    /// Mean lines cleared per game at `w` over `games` games drawn from `seed`.
    pub fn evaluate(&self, w: &DVector<f64>, games: usize, seed: u64) -> Result<f64> {
        Ok(self.play(w, games, false, &mut stream(seed, 0))?.mean_lines)
    }

    /// Trains from `w = 0`, the uniform policy over placements.
    pub fn run(&self, rule: &UpdateRule, iterations: usize, seed: u64) -> Result<TetrisRun> {
        self.check(rule)?;
        let n = feature_dim(self.width);
        let mut w = DVector::zeros(n);
        let mut trace = RunTrace::default();
        for t in 0..=iterations {
            let batch = self.play(&w, self.games_per_iteration, true, &mut stream(derive_seed(seed, 1), t as u64))?;
            let (delta1, delta2) = batch.estimates.expect("estimates were requested");
            let mut record = IterationRecord {
                iteration: t,
                ret: batch.mean_lines,
                grad_norm: delta1.norm(),
                step_size: 0.0,
                direction_norm: 0.0,
                h12_norm: None,
                a1_norm: None,
                wall_ms: 0.0,
            };
            if t == iterations {
                trace.records.push(record);
                break;
            }
            if delta1.iter().all(|x| *x == 0.0) {
                // No line was cleared in the batch: nothing to follow.
                trace.records.push(record);
                continue;
            }
            let scale = -delta2.trace() / n as f64;
            let rule = rule.clone().with_ridge(self.relative_ridge * scale.max(0.0));
            let inputs = CurvatureInputs {
                grad: delta1,
                h2_diag: Some(delta2.diagonal()),
                h2: Some(delta2),
                ..CurvatureInputs::default()
            };
            let d = compute_direction(&rule, &inputs).map_err(|e| Error::AtIteration {
                iteration: t,
                source: Box::new(e),
            })?;
            record.direction_norm = d.d.norm();
            if record.direction_norm > 0.0 {
                // One simulator seed shared by every candidate step.
                let search_seed = derive_seed(derive_seed(seed, 2), t as u64);
                let out = grid_line_search(
                    |x, s| self.evaluate(x, self.games_per_iteration, s).unwrap_or(f64::NEG_INFINITY),
                    &w,
                    &d.d,
                    &self.steps,
                    search_seed,
                );
                record.step_size = out.step;
                w += &d.d * (out.step / record.direction_norm);
            }
            trace.records.push(record);
        }
        Ok(TetrisRun { w, trace })
    }
}
