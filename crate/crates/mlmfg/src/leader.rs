//! Leaders' smoothed Nash game as a nonlinear complementarity problem.
//!
//! For `v = (x, mu)` the NCP field is
//! `F_hat(v) = [F_eps(x) + A' mu; b - A x]` with `F_eps` the stacked gradients
//! of the leaders' smoothed reduced objectives; the NCP `0 <= v ⟂ F_hat >= 0`
//! is recast as the semismooth equation `Psi(v) = 0`,
//! `Psi_i = phi_0(v_i, F_hat_i)`, solved by a semismooth Newton method with
//! line search on the merit `1/2 ||Psi||^2`. The stopping criterion is the
//! natural residual `||min(v, F_hat)||_inf < (n + p) 1e-6`.

use crate::follower::{solve_followers, FollowerError, FollowerState};
use crate::lu;
use crate::model::GameModel;
use crate::par::par_map_idx;
use crate::smoothing::{fb, fb_gradient, natural_residual};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Armijo slope parameter.
pub const ARMIJO_SIGMA: f64 = 1e-4;
/// Backtracking factor.
pub const BACKTRACK_BETA: f64 = 0.5;
/// Smallest accepted line-search step.
pub const MIN_STEP: f64 = 1e-12;
/// Outer semismooth Newton iteration cap per epsilon.
pub const MAX_OUTER_ITERS: usize = 200;
/// Relative step for the central differences of `grad F_eps`.
pub const FD_STEP: f64 = 1e-5;
/// De Luca–Facchinei–Kanzow direction test: reject the Newton direction unless
/// `d' grad_merit <= -RHO ||d||^P_EXP`.
pub const DELUCA_RHO: f64 = 1e-8;
pub const DELUCA_P_EXP: f64 = 2.1;

/// Stopping threshold of the natural residual: `(n + p) * 1e-6`.
pub fn stopping_threshold(n: usize, p: usize) -> f64 {
    (n + p) as f64 * 1e-6
}

#[derive(Debug, Error)]
pub enum LeaderError {
    #[error("semismooth Newton did not converge in {iterations} iterations (natural residual {residual:.3e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("line search failed (no sufficient decrease above step {MIN_STEP:.0e}, Newton and gradient directions)")]
    LineSearchFailure,
    #[error("follower solve failed at the current iterate: {0}")]
    Follower(#[from] FollowerError),
}

/// Leaders' primal-dual state: strategies `x` and multipliers `mu` of
/// `A x <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderState {
    pub x: DVector<f64>,
    pub mu: DVector<f64>,
}

impl LeaderState {
    pub fn new(x: DVector<f64>, mu: DVector<f64>) -> Self {
        Self { x, mu }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.x.len() + self.mu.len());
        v.rows_mut(0, self.x.len()).copy_from(&self.x);
        v.rows_mut(self.x.len(), self.mu.len()).copy_from(&self.mu);
        v
    }

    pub fn from_vector(v: &DVector<f64>, n: usize, p: usize) -> Self {
        Self {
            x: v.rows(0, n).into_owned(),
            mu: v.rows(n, p).into_owned(),
        }
    }
}

/// Which direction a semismooth Newton iteration actually took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionKind {
    Newton,
    GradientFallback,
}

/// Per-iteration trace entry of [`solve_leader_ncp`].
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub natural_residual: f64,
    pub merit: f64,
    pub step: f64,
    pub direction: DirectionKind,
}

/// Converged output of [`solve_leader_ncp`] with accounting used by the
/// homotopy records and the nonsingularity acceptance check.
#[derive(Debug, Clone)]
pub struct LeaderSolve {
    pub state: LeaderState,
    /// Follower state solved at the final `x` (warm-start seed for the next
    /// homotopy step).
    pub follower: FollowerState,
    pub natural_residual: f64,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
    /// Total Newton iterations across all follower solves triggered.
    pub follower_iterations: usize,
    /// Semismooth Newton linear solves that failed (singular W).
    pub newton_solve_failures: usize,
    /// Follower solves at line-search trial points that failed and were
    /// treated as insufficient decrease.
    pub trial_failures: usize,
}

/// Stacked leader field `F_eps(x)`: per leader,
/// `grad_{x^nu} theta^nu(x, y_eps(x)) + grad_{x^nu} y_eps(x) * grad_y theta^nu`.
///
/// Returns the field together with the follower solve at `x` so callers can
/// reuse the state as a warm start.
pub fn leader_field(
    model: &dyn GameModel,
    x: &DVector<f64>,
    eps: f64,
    warm: Option<&FollowerState>,
) -> Result<(DVector<f64>, crate::follower::FollowerSolve), FollowerError> {
    let dims = model.dims();
    let sol = solve_followers(model, x, eps, warm)?;
    let resp = crate::follower::response_jacobian(model, x, &sol.state, eps)?;
    let grad_y = resp.y_block();
    let mut field = DVector::zeros(dims.n());
    for nu in 0..dims.n_leaders {
        let off = dims.leader_offset(nu);
        let n_nu = dims.n_nu[nu];
        let own = model.leader_grad_x(nu, x, &sol.state.y)
            + grad_y.rows(off, n_nu) * model.leader_grad_y(nu, x, &sol.state.y);
        field.rows_mut(off, n_nu).copy_from(&own);
    }
    Ok((field, sol))
}

/// `F_hat(v) = [F_eps(x) + A' mu; b - A x]`.
fn f_hat_from_field(
    model: &dyn GameModel,
    v: &DVector<f64>,
    field: &DVector<f64>,
) -> DVector<f64> {
    let dims = model.dims();
    let (n, p) = (dims.n(), dims.p());
    let poly = model.leader_polyhedron();
    let x = v.rows(0, n).into_owned();
    let mu = v.rows(n, p).into_owned();
    let mut fh = DVector::zeros(n + p);
    fh.rows_mut(0, n)
        .copy_from(&(field + poly.a.transpose() * &mu));
    fh.rows_mut(n, p).copy_from(&(&poly.b - &poly.a * &x));
    fh
}

fn psi_from_f_hat(v: &DVector<f64>, fh: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| fb(v[i], fh[i]))
}

/// `Psi^eps(v)`: the componentwise FB recast of the leaders' NCP.
pub fn ncp_residual(
    model: &dyn GameModel,
    v: &LeaderState,
    eps: f64,
    warm: Option<&FollowerState>,
) -> Result<DVector<f64>, FollowerError> {
    let vv = v.to_vector();
    let (field, _) = leader_field(model, &v.x, eps, warm)?;
    let fh = f_hat_from_field(model, &vv, &field);
    Ok(psi_from_f_hat(&vv, &fh))
}

/// An element of the generalized Jacobian of `Psi^eps` at `v` (true Jacobian,
/// rows index components): row `i` is
/// `(xi_i - 1) e_i' + (eta_i - 1) (d F_hat_i / d v)'`, with the designated
/// element `xi = eta = 1/sqrt(2)` on kink rows `(v_i, F_hat_i) = (0, 0)`.
///
/// `grad F_eps` is approximated by central differences with step
/// `h_j = FD_STEP * max(1, |x_j|)` (one follower solve per perturbation,
/// evaluated independently and in parallel when enabled); the `A` blocks are
/// exact.
pub fn ncp_jacobian(
    model: &dyn GameModel,
    v: &LeaderState,
    eps: f64,
    warm: Option<&FollowerState>,
) -> Result<DMatrix<f64>, FollowerError> {
    let vv = v.to_vector();
    let (field, sol) = leader_field(model, &v.x, eps, warm)?;
    let fh = f_hat_from_field(model, &vv, &field);
    ncp_jacobian_at(model, &vv, &fh, eps, &sol.state).map(|(w, _)| w)
}

/// Jacobian assembly with an already-evaluated `F_hat`; returns the matrix and
/// the follower iteration count spent on the finite differences.
fn ncp_jacobian_at(
    model: &dyn GameModel,
    v: &DVector<f64>,
    fh: &DVector<f64>,
    eps: f64,
    warm: &FollowerState,
) -> Result<(DMatrix<f64>, usize), FollowerError> {
    let dims = model.dims();
    let (n, p) = (dims.n(), dims.p());
    let poly = model.leader_polyhedron();
    let x = v.rows(0, n).into_owned();

    // central differences of the leader field, one column per x-coordinate;
    // every perturbed solve warm-starts from the same base state so the
    // results do not depend on evaluation order
    let columns = par_map_idx(n, |j| -> Result<(DVector<f64>, usize), FollowerError> {
        let h = FD_STEP * 1.0f64.max(x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let plus = leader_field(model, &xp, eps, Some(warm))?;
        let minus = leader_field(model, &xm, eps, Some(warm))?;
        Ok(((plus.0 - minus.0) / (2.0 * h), plus.1.iterations + minus.1.iterations))
    });

    let mut jf = DMatrix::zeros(n, n);
    let mut fd_iters = 0usize;
    for (j, col) in columns.into_iter().enumerate() {
        let (c, iters): (DVector<f64>, usize) = col?;
        jf.column_mut(j).copy_from(&c);
        fd_iters += iters;
    }

    // d F_hat / d v = [[JF, A'], [-A, O]]
    let mut jfh = DMatrix::zeros(n + p, n + p);
    jfh.view_mut((0, 0), (n, n)).copy_from(&jf);
    jfh.view_mut((0, n), (n, p)).copy_from(&poly.a.transpose());
    jfh.view_mut((n, 0), (p, n)).copy_from(&(-&poly.a));

    let mut w = DMatrix::zeros(n + p, n + p);
    for i in 0..n + p {
        let (dv, dfh) = fb_gradient(v[i], fh[i], 0.0);
        let (xi, eta) = (dv + 1.0, dfh + 1.0);
        for j in 0..n + p {
            w[(i, j)] = (eta - 1.0) * jfh[(i, j)];
        }
        w[(i, i)] += xi - 1.0;
    }
    Ok((w, fd_iters))
}

/// Solves `Psi^eps(v) = 0` by semismooth Newton with merit line search,
/// stopping at the natural-residual criterion
/// `||min(v, F_hat(v))||_inf < (n + p) 1e-6`.
pub fn solve_leader_ncp(
    model: &dyn GameModel,
    eps: f64,
    v0: &LeaderState,
    warm: Option<&FollowerState>,
) -> Result<LeaderSolve, LeaderError> {
    assert!(eps > 0.0, "solve_leader_ncp requires eps > 0, got {eps}");
    let dims = model.dims();
    let (n, p) = (dims.n(), dims.p());
    let threshold = stopping_threshold(n, p);

    let mut v = v0.to_vector();
    let mut trace = Vec::new();
    let mut follower_iterations = 0usize;
    let mut newton_solve_failures = 0usize;
    let mut trial_failures = 0usize;

    // base-point follower solve; a failure here is a real error
    let (mut field, mut fsol) = leader_field(model, &v.rows(0, n).into_owned(), eps, warm)?;
    follower_iterations += fsol.iterations;

    for it in 0..MAX_OUTER_ITERS {
        let fh = f_hat_from_field(model, &v, &field);
        let nr = natural_residual(&v, &fh).expect("matching lengths");
        if nr < threshold {
            return Ok(LeaderSolve {
                state: LeaderState::from_vector(&v, n, p),
                follower: fsol.state,
                natural_residual: nr,
                iterations: it,
                trace,
                follower_iterations,
                newton_solve_failures,
                trial_failures,
            });
        }

        let psi = psi_from_f_hat(&v, &fh);
        let merit0 = 0.5 * psi.norm_squared();
        let (w, fd_iters) = ncp_jacobian_at(model, &v, &fh, eps, &fsol.state)?;
        follower_iterations += fd_iters;

        let grad_merit = w.transpose() * &psi;
        let newton_dir = match lu::solve(w, &(-&psi)) {
            Ok(d) => Some(d),
            Err(_) => {
                newton_solve_failures += 1;
                None
            }
        };
        // direction selection: Newton if it is a sufficiently good descent
        // direction for the merit, otherwise steepest descent
        let (mut d, mut kind) = match newton_dir {
            Some(d) => {
                let slope = d.dot(&grad_merit);
                let weak = slope > -1e-12 * d.norm() * grad_merit.norm();
                let deluca = slope > -DELUCA_RHO * d.norm().powf(DELUCA_P_EXP);
                if weak || deluca {
                    ((-&grad_merit).into_owned(), DirectionKind::GradientFallback)
                } else {
                    (d, DirectionKind::Newton)
                }
            }
            None => ((-&grad_merit).into_owned(), DirectionKind::GradientFallback),
        };

        let mut accepted = None;
        'search: for attempt in 0..2 {
            let slope = d.dot(&grad_merit);
            let mut t = 1.0;
            while t >= MIN_STEP {
                let v_trial = &v + t * &d;
                match leader_field(model, &v_trial.rows(0, n).into_owned(), eps, Some(&fsol.state))
                {
                    Ok((field_t, fsol_t)) => {
                        follower_iterations += fsol_t.iterations;
                        let fh_t = f_hat_from_field(model, &v_trial, &field_t);
                        let psi_t = psi_from_f_hat(&v_trial, &fh_t);
                        let merit_t = 0.5 * psi_t.norm_squared();
                        if merit_t.is_finite() && merit_t <= merit0 + ARMIJO_SIGMA * t * slope {
                            accepted = Some((v_trial, field_t, fsol_t, t));
                            break 'search;
                        }
                    }
                    Err(e) => {
                        // merit undefined at the trial point: halve the step
                        log::trace!("trial follower solve failed at step {t:.3e}: {e}");
                        trial_failures += 1;
                    }
                }
                t *= BACKTRACK_BETA;
            }
            if attempt == 0 && kind == DirectionKind::Newton {
                // fall back to the steepest-descent direction and search again
                d = (-&grad_merit).into_owned();
                kind = DirectionKind::GradientFallback;
            } else {
                break;
            }
        }

        let (v_new, field_new, fsol_new, step) = accepted.ok_or(LeaderError::LineSearchFailure)?;
        trace.push(IterationRecord {
            natural_residual: nr,
            merit: merit0,
            step,
            direction: kind,
        });
        v = v_new;
        field = field_new;
        fsol = fsol_new;
    }

    let fh = f_hat_from_field(model, &v, &field);
    let nr = natural_residual(&v, &fh).expect("matching lengths");
    if nr < threshold {
        return Ok(LeaderSolve {
            state: LeaderState::from_vector(&v, n, p),
            follower: fsol.state,
            natural_residual: nr,
            iterations: MAX_OUTER_ITERS,
            trace,
            follower_iterations,
            newton_solve_failures,
            trial_failures,
        });
    }
    Err(LeaderError::MaxIterations {
        iterations: MAX_OUTER_ITERS,
        residual: nr,
    })
}
