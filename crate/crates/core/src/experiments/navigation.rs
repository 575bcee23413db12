//! Policy search on the navigation task with likelihood-ratio estimates.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::navigation::{NavState, Navigation, ParameterNoisePolicy};
use crate::error::{Error, Result};
use crate::estimators::likelihood_ratio_estimates;
use crate::mdp::{Step, Trajectory};
use crate::optimizers::{compute_direction, CurvatureInputs, IterationRecord, RuleKind, RunTrace, StepSchedule, UpdateRule};
use crate::policy::DifferentiablePolicy;
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavigationProtocol {
    pub dynamics: Navigation,
    /// Standard deviation of the parameter noise.
    pub sigma: f64,
    pub trajectories_per_iteration: usize,
    /// Box the initial parameters are drawn from, `[lo, hi]` per coordinate.
    pub init_low: [f64; 2],
    pub init_high: [f64; 2],
}

impl Default for NavigationProtocol {
    fn default() -> Self {
        Self {
            dynamics: Navigation::default(),
            sigma: 1.0,
            trajectories_per_iteration: 50,
            init_low: [0.0, -8.0],
            init_high: [60.0, 0.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct NavigationRun {
    pub w: DVector<f64>,
    pub trace: RunTrace,
}

impl NavigationProtocol {
    pub fn rollout<R: Rng + ?Sized>(&self, policy: &ParameterNoisePolicy, w: &DVector<f64>, rng: &mut R) -> Trajectory<NavState, f64> {
        let mut s = self.dynamics.start(rng);
        let mut traj = Trajectory::default();
        for _ in 0..self.dynamics.horizon {
            let a = policy.sample(w, &s, rng);
            let (next, reward) = self.dynamics.step(&s, a, rng);
            traj.steps.push(Step { state: s, action: a, reward });
            s = next;
        }
        traj
    }

    /// Trains from a uniform draw in the initial box. EM and the CG and
    /// first Gauss-Newton rules need exact quantities and are rejected.
    pub fn run(&self, rule: &UpdateRule, schedule: &StepSchedule, iterations: usize, seed: u64) -> Result<NavigationRun> {
        schedule.validate()?;
        if matches!(schedule, StepSchedule::Grid { .. } | StepSchedule::TwoPoint { .. }) {
            return Err(Error::InvalidModel("navigation uses constant or decaying steps".into()));
        }
        if matches!(
            rule.kind,
            RuleKind::Em | RuleKind::CgGn2 | RuleKind::GaussNewton1 | RuleKind::DiagGn1
        ) {
            return Err(Error::InvalidModel(format!(
                "rule {} is not available with likelihood-ratio estimates",
                rule.kind.name()
            )));
        }
        if self.trajectories_per_iteration == 0 {
            return Err(Error::InvalidModel("trajectories_per_iteration must be positive".into()));
        }
        let policy = ParameterNoisePolicy::new(self.sigma)?;
        let mut setup = stream(derive_seed(seed, 0), 0);
        let mut w = DVector::from_fn(2, |i, _| setup.gen_range(self.init_low[i]..=self.init_high[i]));
        let mut trace = RunTrace::default();
        for t in 0..=iterations {
            let mut rng = stream(derive_seed(seed, 1), t as u64);
            let batch: Vec<_> = (0..self.trajectories_per_iteration)
                .map(|_| self.rollout(&policy, &w, &mut rng))
                .collect();
            let ret = batch.iter().map(|b| b.discounted_return(1.0)).sum::<f64>() / batch.len() as f64;
            let est = likelihood_ratio_estimates(&batch, &policy, &w, 1.0)?;
            let d = compute_direction(rule, &CurvatureInputs::from_estimates(&est))?.d;
            let alpha = if t < iterations { schedule.nominal(t) } else { 0.0 };
            trace.records.push(IterationRecord {
                iteration: t,
                ret,
                grad_norm: est.grad_hat.norm(),
                step_size: alpha,
                direction_norm: d.norm(),
                h12_norm: None,
                a1_norm: None,
                wall_ms: 0.0,
            });
            if !d.iter().all(|x| x.is_finite()) {
                return Err(Error::AtIteration {
                    iteration: t,
                    source: Box::new(Error::Numerical("non-finite search direction".into())),
                });
            }
            w.axpy(alpha, &d, 1.0);
        }
        Ok(NavigationRun { w, trace })
    }
}
