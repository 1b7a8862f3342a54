//! Independent verification machinery, built to be structurally dissimilar
//! from the main solvers: finite-difference Jacobians, exact projection onto
//! small polyhedra by active-set enumeration, a Gauss–Seidel best-response
//! fixed point for the followers' game (including `eps = 0`), and an
//! alternating projected-gradient oracle for the leaders' game.

use crate::follower::solve_followers;
use crate::model::GameModel;
use crate::par::par_map_idx;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("evaluation failed at coordinate {coordinate}: {message}")]
    Eval { coordinate: usize, message: String },
    #[error("fixed-point iteration did not converge (last change {change:.3e})")]
    NoConvergence { change: f64 },
    #[error("projected-gradient cycling detected (change {change:.3e} without decay)")]
    CyclingDetected { change: f64 },
    #[error("follower constraints are not affine in y; the best-response oracle needs a polyhedral strategy set")]
    NonAffineConstraints,
    #[error("projection failed: {0}")]
    Projection(String),
}

/// Tunables of the oracle solvers. Defaults are two digits tighter than the
/// acceptance tolerances they certify.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    /// Relative step for central differences, in `[1e-8, 1e-3]`.
    pub fd_step: f64,
    /// Sweep-to-sweep fixed-point tolerance of the best-response iteration.
    pub fp_tol: f64,
    pub fp_max_sweeps: usize,
    /// Initial projected-gradient step size.
    pub pg_step: f64,
    /// Joint-change tolerance of the alternating leader descent.
    pub pg_tol: f64,
    /// Cycle cap of the alternating leader descent.
    pub pg_max_iters: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            fp_tol: 1e-10,
            fp_max_sweeps: 500,
            pg_step: 1.0,
            pg_tol: 1e-8,
            pg_max_iters: 400,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        let ok = self.fd_step >= 1e-8
            && self.fd_step <= 1e-3
            && self.fp_tol > 0.0
            && self.fp_max_sweeps > 0
            && self.pg_step > 0.0
            && self.pg_tol > 0.0
            && self.pg_max_iters > 0;
        if ok {
            Ok(())
        } else {
            Err(OracleError::Projection(format!("invalid oracle config: {self:?}")))
        }
    }
}

/// Central-difference Jacobian of `f` at `x` in the transposed convention
/// (row `j` holds the difference quotient with respect to coordinate `j`), so
/// a linear map `f(x) = M x` yields `M'`. Steps are
/// `h_j = fd_step * max(1, |x_j|)`. Rows are evaluated independently (and in
/// parallel when enabled).
pub fn finite_diff_jacobian<F, E>(
    f: F,
    x: &DVector<f64>,
    fd_step: f64,
) -> Result<DMatrix<f64>, OracleError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, E> + Sync,
    E: std::fmt::Display,
{
    let n = x.len();
    let rows = par_map_idx(n, |j| {
        let h = fd_step * 1.0f64.max(x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp).map_err(|e| OracleError::Eval {
            coordinate: j,
            message: e.to_string(),
        })?;
        let fm = f(&xm).map_err(|e| OracleError::Eval {
            coordinate: j,
            message: e.to_string(),
        })?;
        Ok((fp - fm) / (2.0 * h))
    });
    let mut out: Option<DMatrix<f64>> = None;
    for (j, row) in rows.into_iter().enumerate() {
        let row: DVector<f64> = row?;
        let mat = out.get_or_insert_with(|| DMatrix::zeros(n, row.len()));
        mat.row_mut(j).copy_from(&row.transpose());
    }
    Ok(out.unwrap_or_else(|| DMatrix::zeros(n, 0)))
}

/// Euclidean projection of `point` onto `{z | C z <= e}`, solved exactly by
/// enumerating candidate active sets (KKT conditions of the projection QP are
/// sufficient under strict convexity, so the first consistent candidate is the
/// solution). Intended for the desk-scale polyhedra of this crate.
pub fn project_onto_polyhedron(
    c: &DMatrix<f64>,
    e: &DVector<f64>,
    point: &DVector<f64>,
) -> Result<DVector<f64>, OracleError> {
    let dim = point.len();
    let rows = c.nrows();
    assert_eq!(c.ncols(), dim, "constraint matrix has {} columns, point has {}", c.ncols(), dim);
    assert_eq!(e.len(), rows, "rhs length {} vs {} rows", e.len(), rows);
    let feas_tol = 1e-9;

    if rows > 24 {
        return Err(OracleError::Projection(format!(
            "active-set enumeration over {rows} constraints is not supported"
        )));
    }

    let feasible = |z: &DVector<f64>| {
        let slack = e - c * z;
        slack.iter().all(|&s| s >= -feas_tol)
    };
    if feasible(point) {
        return Ok(point.clone());
    }

    // enumerate subsets in increasing cardinality via bitmasks
    let mut masks: Vec<u32> = (1u32..(1 << rows)).collect();
    masks.sort_by_key(|m| m.count_ones());
    for mask in masks {
        let k = mask.count_ones() as usize;
        if k > dim {
            continue;
        }
        let idx: Vec<usize> = (0..rows).filter(|i| mask & (1 << i) != 0).collect();
        let mut cs = DMatrix::zeros(k, dim);
        let mut es = DVector::zeros(k);
        for (r, &i) in idx.iter().enumerate() {
            cs.row_mut(r).copy_from(&c.row(i));
            es[r] = e[i];
        }
        // stationarity on the active set: z = point - Cs' nu,
        // nu = (Cs Cs')^{-1} (Cs point - es), with nu >= 0 required
        let gram = &cs * cs.transpose();
        let rhs = &cs * point - &es;
        let nu = match crate::lu::solve(gram, &rhs) {
            Ok(nu) => nu,
            Err(_) => continue, // linearly dependent subset: skip
        };
        if nu.iter().any(|&v| v < -feas_tol) {
            continue;
        }
        let z = point - cs.transpose() * &nu;
        if feasible(&z) {
            return Ok(z);
        }
    }
    Err(OracleError::Projection(
        "no KKT-consistent active set found (is the polyhedron empty?)".to_string(),
    ))
}

/// Projection onto one leader's strategy set
/// `{x^nu | A_nu x^nu <= b_nu, x^nu >= 0}`.
fn project_leader_block(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    point: &DVector<f64>,
) -> Result<DVector<f64>, OracleError> {
    let dim = point.len();
    let mut c = DMatrix::zeros(a.nrows() + dim, dim);
    let mut e = DVector::zeros(a.nrows() + dim);
    c.view_mut((0, 0), (a.nrows(), dim)).copy_from(a);
    e.rows_mut(0, a.nrows()).copy_from(b);
    for i in 0..dim {
        c[(a.nrows() + i, i)] = -1.0;
    }
    project_onto_polyhedron(&c, &e, point)
}

/// Projection onto the joint leader set `X = {A x <= b, x >= 0}`, block by
/// block (the joint `A` is block diagonal per leader).
pub fn project_onto_leader_set(
    model: &dyn GameModel,
    x: &DVector<f64>,
) -> Result<DVector<f64>, OracleError> {
    let dims = model.dims();
    let poly = model.leader_polyhedron();
    let mut out = DVector::zeros(dims.n());
    let mut row = 0;
    for nu in 0..dims.n_leaders {
        let (off, n_nu, p_nu) = (dims.leader_offset(nu), dims.n_nu[nu], dims.p_nu[nu]);
        let a_block = poly.a.view((row, off), (p_nu, n_nu)).into_owned();
        let b_block = poly.b.rows(row, p_nu).into_owned();
        let proj = project_leader_block(&a_block, &b_block, &x.rows(off, n_nu).into_owned())?;
        out.rows_mut(off, n_nu).copy_from(&proj);
        row += p_nu;
    }
    Ok(out)
}

/// Extracts the polyhedral description `J y^w <= rhs` of follower `omega`'s
/// strategy set at fixed `x`, verifying that `g^w(x, .)` is affine.
fn follower_polyhedron(
    model: &dyn GameModel,
    x: &DVector<f64>,
    omega: usize,
    y_template: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>), OracleError> {
    let dims = model.dims();
    let (m_off, m_w) = (dims.follower_offset(omega), dims.m_omega[omega]);
    let (l_off, l_w) = (dims.constraint_offset(omega), dims.l_omega[omega]);

    let mut y0 = y_template.clone();
    y0.rows_mut(m_off, m_w).fill(0.0);
    let g0 = model.constraints(x, &y0).rows(l_off, l_w).into_owned();
    // true Jacobian of g^w in y^w: transpose of the (m_w x l_w) block
    let jac_full = model.constraint_jac_y(x, &y0);
    let jac = jac_full.view((m_off, l_off), (m_w, l_w)).transpose();

    // affineness check at two probe points
    for seed in [0.37f64, -0.61] {
        let mut probe = y0.clone();
        for i in 0..m_w {
            probe[m_off + i] = seed * (i as f64 + 1.0);
        }
        let g_probe = model.constraints(x, &probe).rows(l_off, l_w).into_owned();
        let predicted = &g0 + &jac * probe.rows(m_off, m_w).into_owned();
        let scale = 1.0f64.max(g_probe.amax());
        if (g_probe - predicted).amax() > 1e-8 * scale {
            return Err(OracleError::NonAffineConstraints);
        }
    }
    Ok((jac.into_owned(), -g0))
}

/// Crude per-block Lipschitz estimate of the follower field via finite
/// differences, used to size the projected-gradient step.
fn block_lipschitz(
    model: &dyn GameModel,
    x: &DVector<f64>,
    y: &DVector<f64>,
    omega: usize,
    fd_step: f64,
) -> f64 {
    let dims = model.dims();
    let (m_off, m_w) = (dims.follower_offset(omega), dims.m_omega[omega]);
    let mut norm: f64 = 0.0;
    for j in 0..m_w {
        let h = fd_step.max(1e-7);
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[m_off + j] += h;
        ym[m_off + j] -= h;
        let gp = model.follower_field(x, &yp).rows(m_off, m_w).into_owned();
        let gm = model.follower_field(x, &ym).rows(m_off, m_w).into_owned();
        norm += ((gp - gm) / (2.0 * h)).norm_squared();
    }
    norm.sqrt().max(1e-2)
}

/// Gauss–Seidel best-response fixed point for the followers' game.
///
/// For `eps = 0` each follower's convex problem is minimized by projected
/// gradient on its own polyhedron; for `eps > 0` each block solves its
/// smoothed KKT subsystem by damped Newton with finite-difference Jacobians.
/// The sweep order is reversible to exercise the uniqueness of the fixed
/// point.
pub fn best_response_fixed_point(
    model: &dyn GameModel,
    x: &DVector<f64>,
    eps: f64,
    cfg: &OracleConfig,
) -> Result<DVector<f64>, OracleError> {
    best_response_fixed_point_ordered(model, x, eps, cfg, false)
}

pub fn best_response_fixed_point_ordered(
    model: &dyn GameModel,
    x: &DVector<f64>,
    eps: f64,
    cfg: &OracleConfig,
    reverse: bool,
) -> Result<DVector<f64>, OracleError> {
    cfg.validate()?;
    let dims = model.dims();
    let m_total = dims.m();
    let mut y = DVector::zeros(m_total);
    let order: Vec<usize> = if reverse {
        (0..dims.n_followers).rev().collect()
    } else {
        (0..dims.n_followers).collect()
    };

    // per-block multiplier/slack state for the smoothed subsystems
    let mut block_aux: Vec<Option<(DVector<f64>, DVector<f64>)>> = vec![None; dims.n_followers];

    let mut last_change = f64::INFINITY;
    for _sweep in 0..cfg.fp_max_sweeps {
        let y_prev = y.clone();
        for &omega in &order {
            if eps == 0.0 {
                best_response_block_pg(model, x, &mut y, omega, cfg)?;
            } else {
                best_response_block_smoothed(model, x, &mut y, omega, eps, cfg, &mut block_aux[omega])?;
            }
        }
        last_change = (&y - &y_prev).amax();
        if last_change <= cfg.fp_tol {
            return Ok(y);
        }
    }
    Err(OracleError::NoConvergence { change: last_change })
}

/// Projected-gradient minimization of follower `omega`'s convex problem at
/// fixed `(x, y^{-omega})`, to the inner tolerance `0.1 * fp_tol`.
fn best_response_block_pg(
    model: &dyn GameModel,
    x: &DVector<f64>,
    y: &mut DVector<f64>,
    omega: usize,
    cfg: &OracleConfig,
) -> Result<(), OracleError> {
    let dims = model.dims();
    let (m_off, m_w) = (dims.follower_offset(omega), dims.m_omega[omega]);
    let (jac, rhs) = follower_polyhedron(model, x, omega, y)?;
    let lip = block_lipschitz(model, x, y, omega, cfg.fd_step);
    let mut step = (1.0 / (2.0 * lip)).min(cfg.pg_step);
    let inner_tol = 0.1 * cfg.fp_tol;
    let mut last = f64::INFINITY;
    for _ in 0..20_000 {
        let grad = model.follower_field(x, y).rows(m_off, m_w).into_owned();
        let target = y.rows(m_off, m_w).into_owned() - step * grad;
        let projected = project_onto_polyhedron(&jac, &rhs, &target)?;
        let change = (&projected - y.rows(m_off, m_w).into_owned()).amax();
        y.rows_mut(m_off, m_w).copy_from(&projected);
        if change <= inner_tol {
            return Ok(());
        }
        if change > last * 1.5 {
            // non-decrease of the fixed-point map: halve the step
            step *= 0.5;
        }
        last = change;
    }
    Err(OracleError::NoConvergence { change: last })
}

/// Damped Newton on follower `omega`'s smoothed KKT subsystem
/// `(y^w, z^w, lambda^w)` at fixed `(x, y^{-omega})`, with finite-difference
/// Jacobians (deliberately not the analytic assembly of the main solver).
fn best_response_block_smoothed(
    model: &dyn GameModel,
    x: &DVector<f64>,
    y: &mut DVector<f64>,
    omega: usize,
    eps: f64,
    cfg: &OracleConfig,
    aux: &mut Option<(DVector<f64>, DVector<f64>)>,
) -> Result<(), OracleError> {
    let dims = model.dims();
    let (m_off, m_w) = (dims.follower_offset(omega), dims.m_omega[omega]);
    let (l_off, l_w) = (dims.constraint_offset(omega), dims.l_omega[omega]);
    let size = m_w + 2 * l_w;

    let (z0, lam0) = aux
        .clone()
        .unwrap_or((DVector::from_element(l_w, eps), DVector::from_element(l_w, eps)));
    let mut u = DVector::zeros(size);
    u.rows_mut(0, m_w).copy_from(&y.rows(m_off, m_w));
    u.rows_mut(m_w, l_w).copy_from(&z0);
    u.rows_mut(m_w + l_w, l_w).copy_from(&lam0);

    let residual = |u: &DVector<f64>| -> Result<DVector<f64>, OracleError> {
        let mut y_full = y.clone();
        y_full.rows_mut(m_off, m_w).copy_from(&u.rows(0, m_w));
        let z = u.rows(m_w, l_w);
        let lam = u.rows(m_w + l_w, l_w).into_owned();
        let field = model.follower_field(x, &y_full).rows(m_off, m_w).into_owned();
        let jac_g = model
            .constraint_jac_y(x, &y_full)
            .view((m_off, l_off), (m_w, l_w))
            .into_owned();
        let g = model.constraints(x, &y_full).rows(l_off, l_w).into_owned();
        let mut r = DVector::zeros(size);
        r.rows_mut(0, m_w).copy_from(&(field + jac_g * &lam));
        r.rows_mut(m_w, l_w).copy_from(&(g + z));
        for i in 0..l_w {
            r[m_w + l_w + i] = crate::smoothing::fb_smoothed(lam[i], z[i], eps);
        }
        Ok(r)
    };

    let tol = (0.1 * cfg.fp_tol).max(1e-13);
    let mut r = residual(&u)?;
    for _ in 0..60 {
        if r.amax() <= tol * size as f64 {
            break;
        }
        let jac_t = finite_diff_jacobian(residual, &u, cfg.fd_step)?;
        let d = crate::lu::solve(jac_t.transpose(), &(-&r))
            .map_err(|e| OracleError::Projection(e.to_string()))?;
        let mut t = 1.0;
        let mut improved = false;
        while t >= 1e-10 {
            let u_trial = &u + t * &d;
            let r_trial = residual(&u_trial)?;
            if r_trial.amax() < r.amax() {
                u = u_trial;
                r = r_trial;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            return Err(OracleError::NoConvergence { change: r.amax() });
        }
    }
    if r.amax() > tol * size as f64 {
        return Err(OracleError::NoConvergence { change: r.amax() });
    }
    y.rows_mut(m_off, m_w).copy_from(&u.rows(0, m_w));
    *aux = Some((
        u.rows(m_w, l_w).into_owned(),
        u.rows(m_w + l_w, l_w).into_owned(),
    ));
    Ok(())
}

/// Alternating per-leader projected-gradient descent on the smoothed reduced
/// objectives, with gradients by central finite differences through the full
/// follower solve. Returns the joint strategies once the cycle-to-cycle change
/// drops below `pg_tol`.
pub fn leader_oracle_equilibrium(
    model: &dyn GameModel,
    eps: f64,
    x0: &DVector<f64>,
    cfg: &OracleConfig,
) -> Result<DVector<f64>, OracleError> {
    cfg.validate()?;
    assert!(eps > 0.0, "leader oracle requires eps > 0");
    let dims = model.dims();
    let mut x = project_onto_leader_set(model, x0)?;
    let mut warm: Option<crate::follower::FollowerState> = None;

    let theta = |nu: usize,
                 x_eval: &DVector<f64>,
                 warm: &mut Option<crate::follower::FollowerState>|
     -> Result<f64, OracleError> {
        let sol = solve_followers(model, x_eval, eps, warm.as_ref()).map_err(|e| {
            OracleError::Eval {
                coordinate: nu,
                message: e.to_string(),
            }
        })?;
        let val = model.leader_objective(nu, x_eval, &sol.state.y);
        *warm = Some(sol.state);
        Ok(val)
    };

    let poly = model.leader_polyhedron();
    let mut steps: Vec<f64> = vec![cfg.pg_step; dims.n_leaders];
    let mut best_change = f64::INFINITY;
    let mut stale_cycles = 0usize;

    for _cycle in 0..cfg.pg_max_iters {
        let x_prev = x.clone();
        let mut row = 0;
        for nu in 0..dims.n_leaders {
            let (off, n_nu, p_nu) = (dims.leader_offset(nu), dims.n_nu[nu], dims.p_nu[nu]);
            let a_block = poly.a.view((row, off), (p_nu, n_nu)).into_owned();
            let b_block = poly.b.rows(row, p_nu).into_owned();
            for _inner in 0..30 {
                // FD gradient of Theta^nu in x^nu through the follower solve
                let mut grad = DVector::zeros(n_nu);
                for j in 0..n_nu {
                    let h = cfg.fd_step * 1.0f64.max(x[off + j].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[off + j] += h;
                    xm[off + j] -= h;
                    grad[j] = (theta(nu, &xp, &mut warm)? - theta(nu, &xm, &mut warm)?) / (2.0 * h);
                }
                let val0 = theta(nu, &x, &mut warm)?;
                // shrink the step until the projected move decreases Theta^nu
                let mut moved = DVector::zeros(n_nu);
                while steps[nu] > 1e-10 {
                    let target = x.rows(off, n_nu).into_owned() - steps[nu] * &grad;
                    let projected = project_leader_block(&a_block, &b_block, &target)?;
                    let mut x_cand = x.clone();
                    x_cand.rows_mut(off, n_nu).copy_from(&projected);
                    let descent = grad.dot(&(&projected - x.rows(off, n_nu).into_owned()));
                    if theta(nu, &x_cand, &mut warm)? <= val0 + 1e-4 * descent {
                        moved = &projected - x.rows(off, n_nu).into_owned();
                        x = x_cand;
                        break;
                    }
                    steps[nu] *= 0.5;
                }
                if moved.amax() <= cfg.pg_tol {
                    break;
                }
            }
            row += p_nu;
        }
        let change = (&x - &x_prev).amax();
        if change <= cfg.pg_tol {
            return Ok(x);
        }
        if change < best_change * (1.0 - 1e-12) {
            best_change = change;
            stale_cycles = 0;
        } else {
            stale_cycles += 1;
            if stale_cycles >= 50 {
                return Err(OracleError::CyclingDetected { change });
            }
        }
    }
    Err(OracleError::NoConvergence { change: best_change })
}
