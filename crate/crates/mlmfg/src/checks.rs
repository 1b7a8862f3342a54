//! Runnable cross-validation suite: the invariants of the follower solver, the
//! leader solver, and the oracles, executed against a concrete instance with a
//! seeded RNG. Backs the `check` CLI command; the acceptance test suite covers
//! the same ground with pinned tolerances.

use crate::follower::{assemble_h, solve_followers, response_jacobian};
use crate::homotopy::{report_at, StationarityReport};
use crate::leader::{leader_field, solve_leader_ncp, LeaderState};
use crate::model::{validate_instance, GameModel, ProblemInstance, QuadraticModel};
use crate::oracle::{
    best_response_fixed_point, best_response_fixed_point_ordered, finite_diff_jacobian,
    project_onto_leader_set, OracleConfig,
};
use crate::par::par_map_idx;
use crate::smoothing::{fb, natural_residual};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: false,
            detail,
        }
    }

    fn from_bound(name: &'static str, value: f64, bound: f64) -> Self {
        Self {
            name,
            passed: value <= bound,
            detail: format!("{value:.3e} (bound {bound:.1e})"),
        }
    }
}

fn random_x(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(0.0..3.0))
}

/// Runs the whole suite against a quadratic instance. Deterministic for a
/// fixed seed; tolerances match the module invariants they exercise.
pub fn run_checks(inst: &ProblemInstance, seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();

    let report = validate_instance(inst);
    if !report.passed() {
        results.push(CheckResult::fail(
            "validate-instance",
            report.violations.join("; "),
        ));
        return results;
    }
    results.push(CheckResult::pass(
        "validate-instance",
        format!(
            "min symmetric eigenvalue {:.6e}",
            report.min_symmetric_eigenvalue.unwrap_or(f64::NAN)
        ),
    ));

    let model = match crate::model::build_quadratic_model(inst.clone()) {
        Ok(m) => m,
        Err(e) => {
            results.push(CheckResult::fail("build-model", e.to_string()));
            return results;
        }
    };

    results.push(fb_random_sweep(seed));
    results.push(model_fd_jacobians(&model, seed));
    results.push(g_block_separability(&model, seed));
    results.push(follower_implicit_consistency(&model, seed));
    results.push(follower_comp_product(&model, seed));
    results.push(follower_warm_start_independence(&model, seed));
    results.push(response_jacobian_fd(&model, seed));
    results.push(follower_eps_continuity(&model, seed));
    results.push(br_oracle_agreement(&model, seed));
    results.push(br_sweep_order(&model, seed));
    results.extend(leader_checks(&model));
    results.push(ncp_jacobian_fd(&model, seed));
    results
}

fn fb_random_sweep(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1);
    let tol = 1e-12;
    for i in 0..10_000 {
        let (a, b) = if i % 4 == 0 {
            // exercise the complementarity set itself
            let t = rng.gen_range(0.0..10.0);
            if i % 8 == 0 {
                (t, 0.0)
            } else {
                (0.0, t)
            }
        } else {
            (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0))
        };
        let zero = fb(a, b).abs() <= tol;
        let comp = a >= -tol && b >= -tol && (a * b).abs() <= tol * 1.0f64.max(a.abs()).max(b.abs());
        if zero != comp {
            return CheckResult::fail(
                "fb-characterization",
                format!("mismatch at (a, b) = ({a}, {b}): fb = {}", fb(a, b)),
            );
        }
    }
    CheckResult::pass("fb-characterization", "10000 samples".to_string())
}

fn model_fd_jacobians(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa2);
    let dims = model.dims().clone();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = random_x(&mut rng, dims.n());
        let y = DVector::from_fn(dims.m(), |_, _| rng.gen_range(-1.0..1.0));
        let jy = model.follower_field_jac_y(&x, &y);
        let jx = model.follower_field_jac_x(&x, &y);
        let fd_y = finite_diff_jacobian(
            |yv: &DVector<f64>| Ok::<_, std::convert::Infallible>(model.follower_field(&x, yv)),
            &y,
            1e-6,
        )
        .unwrap();
        let fd_x = finite_diff_jacobian(
            |xv: &DVector<f64>| Ok::<_, std::convert::Infallible>(model.follower_field(xv, &y)),
            &x,
            1e-6,
        )
        .unwrap();
        let scale_y = 1.0f64.max(jy.amax());
        let scale_x = 1.0f64.max(jx.amax());
        worst = worst
            .max((jy.clone() - fd_y).amax() / scale_y)
            .max((jx.clone() - fd_x).amax() / scale_x);
    }
    CheckResult::from_bound("model-fd-jacobians", worst, 1e-6)
}

fn g_block_separability(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb3);
    let dims = model.dims().clone();
    for _ in 0..20 {
        let x = random_x(&mut rng, dims.n());
        let y = DVector::from_fn(dims.m(), |_, _| rng.gen_range(-1.0..1.0));
        let g0 = model.constraints(&x, &y);
        for omega in 0..dims.n_followers {
            let mut y2 = y.clone();
            for j in 0..dims.m_omega[omega] {
                y2[dims.follower_offset(omega) + j] += rng.gen_range(0.1..1.0);
            }
            let g1 = model.constraints(&x, &y2);
            for other in (0..dims.n_followers).filter(|&o| o != omega) {
                let off = dims.constraint_offset(other);
                for i in 0..dims.l_omega[other] {
                    if g0[off + i] != g1[off + i] {
                        return CheckResult::fail(
                            "g-block-separability",
                            format!("perturbing y^{omega} changed g^{other} row {i}"),
                        );
                    }
                }
            }
        }
    }
    CheckResult::pass("g-block-separability", "20 random perturbations".to_string())
}

fn follower_implicit_consistency(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4);
    let dims = model.dims().clone();
    let tol = crate::follower::TOL_NEWTON_PER_EQ * (dims.m() + 2 * dims.l()) as f64;
    let points: Vec<DVector<f64>> = (0..100).map(|_| random_x(&mut rng, dims.n())).collect();
    let worst = par_map_idx(points.len(), |i| {
        let x = &points[i];
        match solve_followers(model, x, 1.0, None) {
            Ok(sol) => assemble_h(model, x, &sol.state, 1.0).amax(),
            Err(_) => f64::INFINITY,
        }
    })
    .into_iter()
    .fold(0.0f64, f64::max);
    CheckResult::from_bound("follower-implicit-consistency", worst, tol)
}

fn follower_comp_product(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd5);
    let dims = model.dims().clone();
    let mut worst: f64 = 0.0;
    for eps in [1.0, 0.1, 0.01] {
        for _ in 0..10 {
            let x = random_x(&mut rng, dims.n());
            match solve_followers(model, &x, eps, None) {
                Ok(sol) => {
                    worst = worst
                        .max(sol.state.comp_product_error(eps) / 1.0f64.max(eps * eps));
                }
                Err(e) => {
                    return CheckResult::fail("follower-comp-product", e.to_string());
                }
            }
        }
    }
    CheckResult::from_bound("follower-comp-product", worst, 1e-8)
}

fn follower_warm_start_independence(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe6);
    let dims = model.dims().clone();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = random_x(&mut rng, dims.n());
        let eps = rng.gen_range(0.05..1.0);
        let cold = match solve_followers(model, &x, eps, None) {
            Ok(s) => s.state,
            Err(e) => return CheckResult::fail("follower-warm-start-independence", e.to_string()),
        };
        let warm_seed = crate::follower::FollowerState {
            y: DVector::from_fn(dims.m(), |_, _| rng.gen_range(-2.0..4.0)),
            z: DVector::from_element(dims.l(), rng.gen_range(0.5..3.0)),
            lambda: DVector::from_element(dims.l(), rng.gen_range(0.05..1.0)),
        };
        match solve_followers(model, &x, eps, Some(&warm_seed)) {
            Ok(warm) => {
                worst = worst
                    .max((&warm.state.y - &cold.y).amax())
                    .max((&warm.state.z - &cold.z).amax())
                    .max((&warm.state.lambda - &cold.lambda).amax());
            }
            Err(e) => return CheckResult::fail("follower-warm-start-independence", e.to_string()),
        }
    }
    CheckResult::from_bound("follower-warm-start-independence", worst, 1e-8)
}

fn response_jacobian_fd(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf7);
    let dims = model.dims().clone();
    let mut cases = Vec::new();
    for &eps in &[1.0, 0.1, 0.01] {
        for _ in 0..20 {
            cases.push((random_x(&mut rng, dims.n()), eps));
        }
    }
    let worst = par_map_idx(cases.len(), |i| {
        let (x, eps) = &cases[i];
        let sol = match solve_followers(model, x, *eps, None) {
            Ok(s) => s,
            Err(_) => return f64::INFINITY,
        };
        let grad_y = match response_jacobian(model, x, &sol.state, *eps) {
            Ok(r) => r.y_block(),
            Err(_) => return f64::INFINITY,
        };
        let fd = match finite_diff_jacobian(
            |xv: &DVector<f64>| {
                solve_followers(model, xv, *eps, Some(&sol.state)).map(|s| s.state.y)
            },
            x,
            1e-5,
        ) {
            Ok(fd) => fd,
            Err(_) => return f64::INFINITY,
        };
        (grad_y.clone() - fd).amax() / 1.0f64.max(grad_y.amax())
    })
    .into_iter()
    .fold(0.0f64, f64::max);
    CheckResult::from_bound("response-jacobian-fd", worst, 1e-5)
}

fn follower_eps_continuity(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x18);
    let dims = model.dims().clone();
    let x = random_x(&mut rng, dims.n());
    let mut prev: Option<(f64, crate::follower::FollowerState)> = None;
    let mut worst_ratio: f64 = 0.0;
    for k in 0..40 {
        let eps = 0.9f64.powi(k);
        let sol = match solve_followers(model, &x, eps, prev.as_ref().map(|p| &p.1)) {
            Ok(s) => s,
            Err(e) => return CheckResult::fail("follower-eps-continuity", e.to_string()),
        };
        if let Some((eps_prev, w_prev)) = prev {
            let dw = (&sol.state.y - &w_prev.y)
                .amax()
                .max((&sol.state.z - &w_prev.z).amax())
                .max((&sol.state.lambda - &w_prev.lambda).amax());
            let deps = eps_prev - eps;
            worst_ratio = worst_ratio.max(dw / deps);
        }
        prev = Some((eps, sol.state));
    }
    // local Lipschitz continuity in eps: bounded difference quotients, no
    // jumps beyond 10x the typical step scale
    CheckResult::from_bound("follower-eps-continuity", worst_ratio, 10.0)
}

fn br_oracle_agreement(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x29);
    let dims = model.dims().clone();
    let cfg = OracleConfig::default();
    let points: Vec<DVector<f64>> = (0..20).map(|_| random_x(&mut rng, dims.n())).collect();
    let worst = par_map_idx(points.len(), |i| {
        let x = &points[i];
        let br = match best_response_fixed_point(model, x, 0.0, &cfg) {
            Ok(y) => y,
            Err(_) => return f64::INFINITY,
        };
        let tiny = match solve_followers(model, x, 1e-5, None) {
            Ok(s) => s.state.y,
            Err(_) => return f64::INFINITY,
        };
        (br - tiny).amax()
    })
    .into_iter()
    .fold(0.0f64, f64::max);
    CheckResult::from_bound("br-oracle-agreement", worst, 1e-3)
}

fn br_sweep_order(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a);
    let dims = model.dims().clone();
    let cfg = OracleConfig::default();
    let x = random_x(&mut rng, dims.n());
    let fwd = match best_response_fixed_point_ordered(model, &x, 0.0, &cfg, false) {
        Ok(y) => y,
        Err(e) => return CheckResult::fail("br-sweep-order", e.to_string()),
    };
    let rev = match best_response_fixed_point_ordered(model, &x, 0.0, &cfg, true) {
        Ok(y) => y,
        Err(e) => return CheckResult::fail("br-sweep-order", e.to_string()),
    };
    // uniqueness: order changes the iteration, not the fixed point
    CheckResult::from_bound("br-sweep-order", (fwd - rev).amax(), 10.0 * cfg.fp_tol)
}

fn leader_checks(model: &QuadraticModel) -> Vec<CheckResult> {
    let dims = model.dims().clone();
    let (n, p) = (dims.n(), dims.p());
    let eps = 1.0;
    let v0 = LeaderState::new(
        DVector::from_element(n, 3.0),
        DVector::from_element(p, 1.0),
    );
    let sol = match solve_leader_ncp(model, eps, &v0, None) {
        Ok(s) => s,
        Err(e) => {
            return vec![CheckResult::fail("leader-solve", e.to_string())];
        }
    };
    let mut out = Vec::new();

    // stopping criterion re-evaluated from scratch
    let (field, _) = leader_field(model, &sol.state.x, eps, None).unwrap();
    let poly = model.leader_polyhedron();
    let v = sol.state.to_vector();
    let mut fh = DVector::zeros(n + p);
    fh.rows_mut(0, n)
        .copy_from(&(&field + poly.a.transpose() * &sol.state.mu));
    fh.rows_mut(n, p)
        .copy_from(&(&poly.b - &poly.a * &sol.state.x));
    let nr = natural_residual(&v, &fh).unwrap();
    out.push(CheckResult::from_bound(
        "leader-stopping-criterion",
        nr,
        crate::leader::stopping_threshold(n, p),
    ));

    // VI projection residual
    let projected = project_onto_leader_set(model, &(&sol.state.x - &field)).unwrap();
    out.push(CheckResult::from_bound(
        "leader-vi-projection",
        (&sol.state.x - projected).amax(),
        1e-5,
    ));

    // merit monotonicity along the accepted trace
    let monotone = sol
        .trace
        .windows(2)
        .all(|pair| pair[1].merit < pair[0].merit);
    out.push(if monotone {
        CheckResult::pass(
            "leader-merit-monotonicity",
            format!("{} iterations", sol.trace.len()),
        )
    } else {
        CheckResult::fail(
            "leader-merit-monotonicity",
            "merit increased along accepted steps".to_string(),
        )
    });
    out
}

fn ncp_jacobian_fd(model: &QuadraticModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4b);
    let dims = model.dims().clone();
    let (n, p) = (dims.n(), dims.p());
    let eps = 1.0;
    let v = LeaderState::new(
        DVector::from_fn(n, |_, _| rng.gen_range(0.5..1.5)),
        DVector::from_fn(p, |_, _| rng.gen_range(0.3..1.0)),
    );
    let w = match crate::leader::ncp_jacobian(model, &v, eps, None) {
        Ok(w) => w,
        Err(e) => return CheckResult::fail("ncp-jacobian-fd", e.to_string()),
    };
    let vv = v.to_vector();
    let mut worst: f64 = 0.0;
    for j in 0..n + p {
        let h = 1e-5 * 1.0f64.max(vv[j].abs());
        let mut vp = vv.clone();
        let mut vm = vv.clone();
        vp[j] += h;
        vm[j] -= h;
        let psi_p = match crate::leader::ncp_residual(
            model,
            &LeaderState::from_vector(&vp, n, p),
            eps,
            None,
        ) {
            Ok(r) => r,
            Err(e) => return CheckResult::fail("ncp-jacobian-fd", e.to_string()),
        };
        let psi_m = match crate::leader::ncp_residual(
            model,
            &LeaderState::from_vector(&vm, n, p),
            eps,
            None,
        ) {
            Ok(r) => r,
            Err(e) => return CheckResult::fail("ncp-jacobian-fd", e.to_string()),
        };
        let fd = (psi_p - psi_m) / (2.0 * h);
        for i in 0..n + p {
            worst = worst.max((w[(i, j)] - fd[i]).abs() / 1.0f64.max(w[(i, j)].abs()));
        }
    }
    CheckResult::from_bound("ncp-jacobian-fd", worst, 1e-4)
}

/// Maximum absolute mismatch between a stored report and one recomputed from
/// the same `(eps_final, x_final)` state. Used by `check --from-report`.
pub fn recheck_report(model: &dyn GameModel, stored: &StationarityReport) -> (StationarityReport, f64) {
    let x = DVector::from_vec(stored.x_final.clone());
    // mu is not part of the stored report; the recomputed quantities
    // (projection residual, complementarity, degeneracy) depend only on x
    let mu = DVector::zeros(model.dims().p());
    let fresh = report_at(model, stored.eps_final, &x, &mu, stored.cauchy_tail);
    let mismatch = (fresh.projection_residual - stored.projection_residual)
        .abs()
        .max((fresh.comp_product_error - stored.comp_product_error).abs());
    (fresh, mismatch)
}
