//! Outer homotopy loop: solve the leaders' smoothed NCP along a decreasing
//! epsilon schedule, warm-starting both levels, record the trajectory, and
//! produce the stationarity report of the final iterate.

use crate::follower::{
    classify_degeneracy, solve_followers, DegeneracyReport, FollowerState,
};
use crate::leader::{leader_field, solve_leader_ncp, LeaderError, LeaderState};
use crate::model::GameModel;
use crate::oracle::project_onto_leader_set;
use crate::smoothing::natural_residual;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// Geometric smoothing schedule `eps_k = eps0 * ratio^k`, `k = 0..steps-1`.
/// Defaults reproduce `0.9^k`, `k = 0..74`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub eps0: f64,
    pub ratio: f64,
    pub steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            eps0: 1.0,
            ratio: 0.9,
            steps: 75,
        }
    }
}

impl Schedule {
    pub fn eps_at(&self, k: usize) -> f64 {
        self.eps0 * self.ratio.powi(k as i32)
    }

    pub fn validate(&self) -> Result<(), String> {
        let eps0_ok = self.eps0.is_finite() && self.eps0 > 0.0;
        if !eps0_ok {
            return Err(format!("eps0 must be positive, got {}", self.eps0));
        }
        let ratio_ok = self.ratio > 0.0 && self.ratio < 1.0;
        if !ratio_ok {
            return Err(format!("ratio must lie in (0, 1), got {}", self.ratio));
        }
        if self.steps == 0 {
            return Err("steps must be at least 1".to_string());
        }
        Ok(())
    }
}

/// One homotopy step: the solved state and recomputed residuals at `eps_k`.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub k: usize,
    pub eps: f64,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    /// Natural residual of the leaders' NCP, re-evaluated at the stored state.
    pub ncp_residual: f64,
    /// `||x - Pi_X(x - F_eps(x))||_inf`.
    pub vi_residual: f64,
    /// `max_i |z_i lambda_i - eps^2|`.
    pub follower_comp_error: f64,
    pub newton_iters_leader: usize,
    pub newton_iters_follower: usize,
    /// Semismooth Newton linear solves that hit a pivot failure in this step.
    pub leader_solve_failures: usize,
    /// Follower solves at line-search trial points that failed in this step.
    pub trial_failures: usize,
    /// Wall-clock seconds spent on this step (kept out of the CSV emission so
    /// identical runs stay byte-identical).
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct HomotopyTrajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl HomotopyTrajectory {
    pub fn final_record(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }

    /// Max over the last up-to-10 consecutive deltas `||x_k - x_{k-1}||_inf`;
    /// `None` for trajectories with fewer than two records.
    pub fn cauchy_tail(&self) -> Option<f64> {
        if self.records.len() < 2 {
            return None;
        }
        let start = self.records.len().saturating_sub(11);
        let xs: Vec<&DVector<f64>> = self.records[start..].iter().map(|r| &r.x).collect();
        Some(
            xs.windows(2)
                .map(|w| (w[1] - w[0]).amax())
                .fold(0.0, f64::max),
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct HomotopyOptions {
    /// On a leader-solve failure at step k, retry once after a warm-up solve
    /// at the log-scale midpoint between eps_{k-1} and eps_k.
    pub retry_halve: bool,
}

#[derive(Debug, Error)]
pub enum HomotopyError {
    #[error("leader solve failed at homotopy step {k} (eps = {eps:.6e}): {source}")]
    SolverFailureAt {
        k: usize,
        eps: f64,
        partial: HomotopyTrajectory,
        #[source]
        source: LeaderError,
    },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Drives `eps_k` down the schedule, warm-starting the leader state and the
/// follower state from the previous step, and records every step. The leader
/// multipliers start at 1 for the first epsilon (a strictly positive
/// complementarity start).
pub fn run_homotopy(
    model: &dyn GameModel,
    schedule: &Schedule,
    x0: &DVector<f64>,
    options: &HomotopyOptions,
) -> Result<HomotopyTrajectory, HomotopyError> {
    schedule.validate().map_err(HomotopyError::InvalidSchedule)?;
    let dims = model.dims();
    assert_eq!(x0.len(), dims.n(), "x0 has length {}, expected {}", x0.len(), dims.n());
    assert!(x0.iter().all(|v| v.is_finite()), "x0 must be finite");

    let mut trajectory = HomotopyTrajectory::default();
    let mut v = LeaderState::new(x0.clone(), DVector::from_element(dims.p(), 1.0));
    let mut warm: Option<FollowerState> = None;
    let mut retried = false;

    for k in 0..schedule.steps {
        let eps = schedule.eps_at(k);
        let started = Instant::now();
        let mut attempt = solve_leader_ncp(model, eps, &v, warm.as_ref());
        if attempt.is_err() && options.retry_halve && !retried {
            retried = true;
            let eps_mid = if k == 0 {
                schedule.eps_at(0) / schedule.ratio.sqrt()
            } else {
                schedule.eps_at(k - 1) * schedule.ratio.sqrt()
            };
            log::warn!(
                "leader solve failed at step {k}; retrying via warm-up solve at eps = {eps_mid:.6e}"
            );
            if let Ok(mid) = solve_leader_ncp(model, eps_mid, &v, warm.as_ref()) {
                let mid_state = mid.state;
                let mid_follower = mid.follower;
                attempt = solve_leader_ncp(model, eps, &mid_state, Some(&mid_follower));
            }
        }
        let solve = match attempt {
            Ok(solve) => solve,
            Err(source) => {
                return Err(HomotopyError::SolverFailureAt {
                    k,
                    eps,
                    partial: trajectory,
                    source,
                });
            }
        };

        v = solve.state.clone();
        warm = Some(solve.follower.clone());
        let record = make_record(model, k, eps, &solve, started.elapsed().as_secs_f64());
        trajectory.records.push(record);
    }
    Ok(trajectory)
}

fn make_record(
    model: &dyn GameModel,
    k: usize,
    eps: f64,
    solve: &crate::leader::LeaderSolve,
    wall_time: f64,
) -> TrajectoryRecord {
    let (ncp_residual, vi_residual) = residuals_at(model, &solve.state, eps, Some(&solve.follower));
    TrajectoryRecord {
        k,
        eps,
        x: solve.state.x.clone(),
        y: solve.follower.y.clone(),
        z: solve.follower.z.clone(),
        lambda: solve.follower.lambda.clone(),
        mu: solve.state.mu.clone(),
        ncp_residual,
        vi_residual,
        follower_comp_error: solve.follower.comp_product_error(eps),
        newton_iters_leader: solve.iterations,
        newton_iters_follower: solve.follower_iterations,
        leader_solve_failures: solve.newton_solve_failures,
        trial_failures: solve.trial_failures,
        wall_time,
    }
}

/// Natural residual of the NCP and the VI projection residual at `(x, mu)`.
fn residuals_at(
    model: &dyn GameModel,
    state: &LeaderState,
    eps: f64,
    warm: Option<&FollowerState>,
) -> (f64, f64) {
    let dims = model.dims();
    let poly = model.leader_polyhedron();
    let (field, _) = leader_field(model, &state.x, eps, warm)
        .expect("follower solve must succeed at a solved leader state");
    let v = state.to_vector();
    let mut fh = DVector::zeros(dims.n() + dims.p());
    fh.rows_mut(0, dims.n())
        .copy_from(&(&field + poly.a.transpose() * &state.mu));
    fh.rows_mut(dims.n(), dims.p())
        .copy_from(&(&poly.b - &poly.a * &state.x));
    let ncp = natural_residual(&v, &fh).expect("matching lengths");
    let projected = project_onto_leader_set(model, &(&state.x - &field))
        .expect("projection onto the leader polyhedron");
    let vi = (&state.x - projected).amax();
    (ncp, vi)
}

/// Stationarity report of the final homotopy iterate. All residuals are
/// recomputed from scratch (fresh cold follower solve), never copied from
/// solver internals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarityReport {
    pub eps_final: f64,
    pub x_final: Vec<f64>,
    /// `||x - Pi_X(x - F_eps(x))||_inf` at the final iterate.
    pub projection_residual: f64,
    /// `max_i |z_i lambda_i - eps^2|` of the recomputed follower state.
    pub comp_product_error: f64,
    pub degeneracy: DegeneracyReport,
    /// `J_00` empty at the relaxed tolerance `1e-4 * max(1, ||(z,lambda)||_inf)`.
    pub strict_complementarity: bool,
    /// Approximation label; exact B-/C-stationarity is a property of the
    /// eps -> 0 limit and is never asserted.
    pub stationarity_label: String,
    /// Max `||x_k - x_{k-1}||_inf` over the last 10 steps; `None` for
    /// single-record trajectories.
    pub cauchy_tail: Option<f64>,
}

/// Recomputes the final-state residuals of a trajectory from scratch.
///
/// Panics if the trajectory is empty.
pub fn stationarity_report(
    model: &dyn GameModel,
    trajectory: &HomotopyTrajectory,
) -> StationarityReport {
    let last = trajectory
        .final_record()
        .expect("stationarity report needs a nonempty trajectory");
    report_at(model, last.eps, &last.x, &last.mu, trajectory.cauchy_tail())
}

/// Report of a single solved state; used both by [`stationarity_report`] and
/// by the `--from-report` re-check (which must reproduce the same numbers).
pub fn report_at(
    model: &dyn GameModel,
    eps: f64,
    x: &DVector<f64>,
    mu: &DVector<f64>,
    cauchy_tail: Option<f64>,
) -> StationarityReport {
    let fresh = solve_followers(model, x, eps, None)
        .expect("cold follower solve at the reported state");
    let state = LeaderState::new(x.clone(), mu.clone());
    let (_, vi_residual) = residuals_at(model, &state, eps, Some(&fresh.state));
    let scale = fresh
        .state
        .z
        .iter()
        .chain(fresh.state.lambda.iter())
        .fold(1.0f64, |acc, &v| acc.max(v.abs()));
    let relaxed_tol = 1e-4 * scale;
    let degeneracy = classify_degeneracy(&fresh.state, relaxed_tol);
    let strict = degeneracy.j_zero_zero.is_empty();
    let label = if strict {
        "approximate B-stationary Nash equilibrium (strict complementarity; \
         B- and C-stationarity coincide)"
    } else {
        "approximate C-stationary Nash equilibrium (degenerate indices present)"
    };
    StationarityReport {
        eps_final: eps,
        x_final: x.iter().cloned().collect(),
        projection_residual: vi_residual,
        comp_product_error: fresh.state.comp_product_error(eps),
        degeneracy,
        strict_complementarity: strict,
        stationarity_label: label.to_string(),
        cauchy_tail,
    }
}
