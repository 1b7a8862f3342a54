//! Game data model: problem dimensions, the quadratic MLMFG instance data, the
//! abstract [`GameModel`] evaluation interface, assumption validation, and
//! instance file I/O.
//!
//! Derivative conventions follow the transposed-Jacobian notation
//! `grad F(x) = [grad F_1(x), ..., grad F_m(x)]` (columns index output
//! components), so `follower_field_jac_x` has shape `n x m` and the quadratic
//! model's `follower_field_jac_y` is the transpose of the stacked follower
//! block matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {field}: expected {expected}, got {got}")]
    DimensionMismatch {
        field: String,
        expected: String,
        got: String,
    },
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("instance failed validation: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum InstanceIoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported schema version {found} in {path} (supported: 1)")]
    UnsupportedVersion { found: i64, path: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Problem sizes: `N` leaders with per-leader strategy dimensions `n_nu` and
/// constraint row counts `p_nu`; `M` followers with strategy dimensions
/// `m_omega` and inequality-constraint counts `l_omega`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n_leaders: usize,
    pub n_followers: usize,
    pub n_nu: Vec<usize>,
    pub m_omega: Vec<usize>,
    pub l_omega: Vec<usize>,
    pub p_nu: Vec<usize>,
}

impl Dimensions {
    /// Total leader strategy dimension `n`.
    pub fn n(&self) -> usize {
        self.n_nu.iter().sum()
    }

    /// Total follower strategy dimension `m`.
    pub fn m(&self) -> usize {
        self.m_omega.iter().sum()
    }

    /// Total follower constraint count `l`.
    pub fn l(&self) -> usize {
        self.l_omega.iter().sum()
    }

    /// Total leader constraint row count `p`.
    pub fn p(&self) -> usize {
        self.p_nu.iter().sum()
    }

    /// Offset of leader `nu`'s block in the stacked `x`.
    pub fn leader_offset(&self, nu: usize) -> usize {
        self.n_nu[..nu].iter().sum()
    }

    /// Offset of follower `omega`'s block in the stacked `y`.
    pub fn follower_offset(&self, omega: usize) -> usize {
        self.m_omega[..omega].iter().sum()
    }

    /// Offset of follower `omega`'s block in the stacked constraint vector.
    pub fn constraint_offset(&self, omega: usize) -> usize {
        self.l_omega[..omega].iter().sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidDimensions(msg));
        if self.n_leaders == 0 || self.n_followers == 0 {
            return err("need at least one leader and one follower".into());
        }
        if self.n_nu.len() != self.n_leaders || self.p_nu.len() != self.n_leaders {
            return err(format!(
                "n_nu/p_nu length must equal n_leaders = {}",
                self.n_leaders
            ));
        }
        if self.m_omega.len() != self.n_followers || self.l_omega.len() != self.n_followers {
            return err(format!(
                "m_omega/l_omega length must equal n_followers = {}",
                self.n_followers
            ));
        }
        for (name, v) in [
            ("n_nu", &self.n_nu),
            ("m_omega", &self.m_omega),
            ("l_omega", &self.l_omega),
            ("p_nu", &self.p_nu),
        ] {
            if v.contains(&0) {
                return err(format!("{name} entries must be strictly positive: {v:?}"));
            }
        }
        Ok(())
    }
}

/// Per-leader data of the quadratic instance: objective
/// `1/2 x' H x + x' (sum G_cross x^other) + sum_w x' D_w y^w + q' x`
/// subject to `A x <= b`, `x >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderBlock {
    pub h: DMatrix<f64>,
    /// `G_{nu,sigma}` for the other leaders `sigma != nu`, in increasing
    /// `sigma` order.
    pub g_cross: Vec<DMatrix<f64>>,
    /// `D_{nu,omega}` for every follower `omega`.
    pub d: Vec<DMatrix<f64>>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Per-follower data of the quadratic instance: objective
/// `1/2 y' M y + y' (sum Q_cross y^other) - sum_nu x^nu' D_{nu,w} y` subject to
/// `c' y + sum_nu d^nu' x^nu + a >= 0`, `y >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerBlock {
    pub m: DMatrix<f64>,
    /// `Q_{omega,sigma}` for the other followers `sigma != omega`, in
    /// increasing `sigma` order.
    pub q_cross: Vec<DMatrix<f64>>,
    pub c: DVector<f64>,
    pub a: f64,
}

/// Full data of a quadratic MLMFG instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub dims: Dimensions,
    pub leaders: Vec<LeaderBlock>,
    pub followers: Vec<FollowerBlock>,
    /// Coupling vectors `d^nu` of the followers' shared affine constraint.
    pub coupling: Vec<DVector<f64>>,
}

/// Polyhedral leader strategy set `X = {x | A x <= b, x >= 0}` with `A` the
/// block-diagonal stack of the per-leader constraint matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Diagnostic output of [`validate_instance`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    /// Smallest eigenvalue of the symmetric part of the stacked follower block
    /// matrix, when dimensions were consistent enough to form it.
    pub min_symmetric_eigenvalue: Option<f64>,
    /// Largest `|M_w - M_w'|` entry over followers.
    pub max_symmetry_defect: Option<f64>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Abstract evaluation interface for a smooth MLMFG. All evaluations are pure
/// functions of their arguments; implementations must be `Sync` so that
/// finite-difference loops can evaluate perturbed points concurrently.
pub trait GameModel: Sync {
    fn dims(&self) -> &Dimensions;

    /// Stacked follower field `G(x, y)` (the partial gradients of the
    /// followers' objectives in their own strategies), an `m`-vector.
    fn follower_field(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;

    /// `grad_y G(x, y)`, `m x m` in the transposed-Jacobian convention.
    fn follower_field_jac_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;

    /// `grad_x G(x, y)`, `n x m` in the transposed-Jacobian convention.
    fn follower_field_jac_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;

    /// Stacked constraints `g(x, y) <= 0`, an `l`-vector; `g^w` depends only on
    /// `(x, y^w)` (block separability).
    fn constraints(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;

    /// `grad_y g(x, y)`, `m x l` (column `i` is the `y`-gradient of `g_i`).
    fn constraint_jac_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;

    /// `grad_x g(x, y)`, `n x l`.
    fn constraint_jac_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;

    /// `sum_i lambda_i hess_yy g_i(x, y)`, `m x m`.
    fn constraint_hess_yy(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> DMatrix<f64>;

    /// `sum_i lambda_i hess_xy g_i(x, y)`, `n x m`.
    fn constraint_hess_xy(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> DMatrix<f64>;

    /// Leader `nu`'s objective value `theta^nu(x, y)`.
    fn leader_objective(&self, nu: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64;

    /// `grad_{x^nu} theta^nu(x, y)`, an `n_nu`-vector.
    fn leader_grad_x(&self, nu: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;

    /// `grad_y theta^nu(x, y)`, an `m`-vector.
    fn leader_grad_y(&self, nu: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;

    /// The leaders' joint polyhedral constraint data.
    fn leader_polyhedron(&self) -> &Polyhedron;
}

/// [`GameModel`] backed by a quadratic [`ProblemInstance`] with all derivative
/// blocks precomputed analytically.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    inst: ProblemInstance,
    /// Stacked follower block matrix `B = [[M_1, Q_12], [Q_21, M_2]]` (the true
    /// Jacobian of `y -> G(x, y)`).
    b_stack: DMatrix<f64>,
    /// `m x n` matrix with block `(omega, nu) = D_{nu,omega}'`, so that
    /// `G(x, y) = B y - C x`.
    c_stack: DMatrix<f64>,
    /// Constant `grad_y g`, `m x l`.
    jac_y_g: DMatrix<f64>,
    /// Constant `grad_x g`, `n x l`.
    jac_x_g: DMatrix<f64>,
    poly: Polyhedron,
}

impl QuadraticModel {
    pub fn instance(&self) -> &ProblemInstance {
        &self.inst
    }

    /// The stacked follower block matrix `[[M_1, Q_12], [Q_21, M_2]]`.
    pub fn follower_block_matrix(&self) -> &DMatrix<f64> {
        &self.b_stack
    }
}

fn cross_index(own: usize, other: usize) -> usize {
    // g_cross/q_cross store the other players in increasing order, skipping own
    if other < own {
        other
    } else {
        other - 1
    }
}

impl GameModel for QuadraticModel {
    fn dims(&self) -> &Dimensions {
        &self.inst.dims
    }

    fn follower_field(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.b_stack * y - &self.c_stack * x
    }

    fn follower_field_jac_y(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        self.b_stack.transpose()
    }

    fn follower_field_jac_x(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        -self.c_stack.transpose()
    }

    fn constraints(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let dims = &self.inst.dims;
        let mut g = DVector::zeros(dims.l());
        let shared: f64 = self
            .inst
            .coupling
            .iter()
            .enumerate()
            .map(|(nu, d)| d.dot(&x.rows(dims.leader_offset(nu), dims.n_nu[nu]).into_owned()))
            .sum();
        for (omega, fol) in self.inst.followers.iter().enumerate() {
            let yo = y.rows(dims.follower_offset(omega), dims.m_omega[omega]);
            let base = dims.constraint_offset(omega);
            g[base] = -fol.c.dot(&yo.into_owned()) - shared - fol.a;
            for j in 0..dims.m_omega[omega] {
                g[base + 1 + j] = -yo[j];
            }
        }
        g
    }

    fn constraint_jac_y(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        self.jac_y_g.clone()
    }

    fn constraint_jac_x(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        self.jac_x_g.clone()
    }

    fn constraint_hess_yy(
        &self,
        _x: &DVector<f64>,
        _y: &DVector<f64>,
        _lambda: &DVector<f64>,
    ) -> DMatrix<f64> {
        let m = self.inst.dims.m();
        DMatrix::zeros(m, m)
    }

    fn constraint_hess_xy(
        &self,
        _x: &DVector<f64>,
        _y: &DVector<f64>,
        _lambda: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.inst.dims.n(), self.inst.dims.m())
    }

    fn leader_objective(&self, nu: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let dims = &self.inst.dims;
        let lead = &self.inst.leaders[nu];
        let xn = x.rows(dims.leader_offset(nu), dims.n_nu[nu]).into_owned();
        let mut val = 0.5 * xn.dot(&(&lead.h * &xn)) + lead.q.dot(&xn);
        for sigma in (0..dims.n_leaders).filter(|&s| s != nu) {
            let xs = x.rows(dims.leader_offset(sigma), dims.n_nu[sigma]);
            val += xn.dot(&(&lead.g_cross[cross_index(nu, sigma)] * xs));
        }
        for omega in 0..dims.n_followers {
            let yo = y.rows(dims.follower_offset(omega), dims.m_omega[omega]);
            val += xn.dot(&(&lead.d[omega] * yo));
        }
        val
    }

    fn leader_grad_x(&self, nu: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let dims = &self.inst.dims;
        let lead = &self.inst.leaders[nu];
        let xn = x.rows(dims.leader_offset(nu), dims.n_nu[nu]).into_owned();
        // symmetric part of H, in case a stored H is not exactly symmetric
        let mut grad = 0.5 * (&lead.h * &xn) + 0.5 * (lead.h.transpose() * &xn) + &lead.q;
        for sigma in (0..dims.n_leaders).filter(|&s| s != nu) {
            let xs = x.rows(dims.leader_offset(sigma), dims.n_nu[sigma]);
            grad += &lead.g_cross[cross_index(nu, sigma)] * xs;
        }
        for omega in 0..dims.n_followers {
            let yo = y.rows(dims.follower_offset(omega), dims.m_omega[omega]);
            grad += &lead.d[omega] * yo;
        }
        grad
    }

    fn leader_grad_y(&self, nu: usize, x: &DVector<f64>, _y: &DVector<f64>) -> DVector<f64> {
        let dims = &self.inst.dims;
        let lead = &self.inst.leaders[nu];
        let xn = x.rows(dims.leader_offset(nu), dims.n_nu[nu]).into_owned();
        let mut grad = DVector::zeros(dims.m());
        for omega in 0..dims.n_followers {
            grad
                .rows_mut(dims.follower_offset(omega), dims.m_omega[omega])
                .copy_from(&(lead.d[omega].transpose() * &xn));
        }
        grad
    }

    fn leader_polyhedron(&self) -> &Polyhedron {
        &self.poly
    }
}

fn expect_shape(
    field: &str,
    mat: &DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> Result<(), ModelError> {
    if mat.nrows() != rows || mat.ncols() != cols {
        return Err(ModelError::DimensionMismatch {
            field: field.to_string(),
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", mat.nrows(), mat.ncols()),
        });
    }
    Ok(())
}

fn expect_len(field: &str, v: &DVector<f64>, len: usize) -> Result<(), ModelError> {
    if v.len() != len {
        return Err(ModelError::DimensionMismatch {
            field: field.to_string(),
            expected: len.to_string(),
            got: v.len().to_string(),
        });
    }
    Ok(())
}

fn check_shapes(inst: &ProblemInstance) -> Result<(), ModelError> {
    let dims = &inst.dims;
    dims.validate()?;
    if inst.leaders.len() != dims.n_leaders {
        return Err(ModelError::DimensionMismatch {
            field: "leaders".into(),
            expected: dims.n_leaders.to_string(),
            got: inst.leaders.len().to_string(),
        });
    }
    if inst.followers.len() != dims.n_followers {
        return Err(ModelError::DimensionMismatch {
            field: "followers".into(),
            expected: dims.n_followers.to_string(),
            got: inst.followers.len().to_string(),
        });
    }
    if inst.coupling.len() != dims.n_leaders {
        return Err(ModelError::DimensionMismatch {
            field: "coupling".into(),
            expected: dims.n_leaders.to_string(),
            got: inst.coupling.len().to_string(),
        });
    }
    for (nu, lead) in inst.leaders.iter().enumerate() {
        let nn = dims.n_nu[nu];
        expect_shape(&format!("leaders[{nu}].H"), &lead.h, nn, nn)?;
        if lead.g_cross.len() != dims.n_leaders - 1 {
            return Err(ModelError::DimensionMismatch {
                field: format!("leaders[{nu}].G_cross"),
                expected: (dims.n_leaders - 1).to_string(),
                got: lead.g_cross.len().to_string(),
            });
        }
        for sigma in (0..dims.n_leaders).filter(|&s| s != nu) {
            expect_shape(
                &format!("leaders[{nu}].G_cross[{sigma}]"),
                &lead.g_cross[cross_index(nu, sigma)],
                nn,
                dims.n_nu[sigma],
            )?;
        }
        if lead.d.len() != dims.n_followers {
            return Err(ModelError::DimensionMismatch {
                field: format!("leaders[{nu}].D"),
                expected: dims.n_followers.to_string(),
                got: lead.d.len().to_string(),
            });
        }
        for (omega, dmat) in lead.d.iter().enumerate() {
            expect_shape(
                &format!("leaders[{nu}].D[{omega}]"),
                dmat,
                nn,
                dims.m_omega[omega],
            )?;
        }
        expect_len(&format!("leaders[{nu}].q"), &lead.q, nn)?;
        expect_shape(&format!("leaders[{nu}].A"), &lead.a, dims.p_nu[nu], nn)?;
        expect_len(&format!("leaders[{nu}].b"), &lead.b, dims.p_nu[nu])?;
        expect_len(&format!("coupling[{nu}]"), &inst.coupling[nu], nn)?;
    }
    for (omega, fol) in inst.followers.iter().enumerate() {
        let mm = dims.m_omega[omega];
        expect_shape(&format!("followers[{omega}].M"), &fol.m, mm, mm)?;
        if fol.q_cross.len() != dims.n_followers - 1 {
            return Err(ModelError::DimensionMismatch {
                field: format!("followers[{omega}].Q_cross"),
                expected: (dims.n_followers - 1).to_string(),
                got: fol.q_cross.len().to_string(),
            });
        }
        for sigma in (0..dims.n_followers).filter(|&s| s != omega) {
            expect_shape(
                &format!("followers[{omega}].Q_cross[{sigma}]"),
                &fol.q_cross[cross_index(omega, sigma)],
                mm,
                dims.m_omega[sigma],
            )?;
        }
        expect_len(&format!("followers[{omega}].c"), &fol.c, mm)?;
        if dims.l_omega[omega] != mm + 1 {
            return Err(ModelError::DimensionMismatch {
                field: format!("dims.l_omega[{omega}]"),
                expected: format!("{} (1 coupling row + {mm} nonnegativity rows)", mm + 1),
                got: dims.l_omega[omega].to_string(),
            });
        }
    }
    Ok(())
}

/// Stacked follower block matrix `B` with `B[omega, omega] = M_omega` and
/// `B[omega, sigma] = Q_{omega,sigma}`.
fn stack_follower_matrix(inst: &ProblemInstance) -> DMatrix<f64> {
    let dims = &inst.dims;
    let m = dims.m();
    let mut b = DMatrix::zeros(m, m);
    for (omega, fol) in inst.followers.iter().enumerate() {
        let ro = dims.follower_offset(omega);
        b.view_mut((ro, ro), (dims.m_omega[omega], dims.m_omega[omega]))
            .copy_from(&fol.m);
        for sigma in (0..dims.n_followers).filter(|&s| s != omega) {
            let co = dims.follower_offset(sigma);
            b.view_mut((ro, co), (dims.m_omega[omega], dims.m_omega[sigma]))
                .copy_from(&fol.q_cross[cross_index(omega, sigma)]);
        }
    }
    b
}

/// Validates the quadratic-instance assumptions: shape consistency, symmetry of
/// each `M_omega`, and positive definiteness of the stacked follower block
/// matrix (via the smallest eigenvalue of its symmetric part).
pub fn validate_instance(inst: &ProblemInstance) -> ValidationReport {
    let mut violations = Vec::new();
    if let Err(e) = check_shapes(inst) {
        violations.push(e.to_string());
        return ValidationReport {
            violations,
            min_symmetric_eigenvalue: None,
            max_symmetry_defect: None,
        };
    }
    let mut max_defect = 0.0f64;
    for (omega, fol) in inst.followers.iter().enumerate() {
        let defect = (&fol.m - fol.m.transpose()).abs().max();
        max_defect = max_defect.max(defect);
        if defect > 1e-12 {
            violations.push(format!(
                "followers[{omega}].M is not symmetric (max defect {defect:.3e})"
            ));
        }
    }
    let b = stack_follower_matrix(inst);
    let sym = (&b + b.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let pd_ok = min_eig.is_finite() && min_eig > 1e-10;
    if !pd_ok {
        violations.push(format!(
            "stacked follower block matrix is not positive definite \
             (smallest eigenvalue of symmetric part: {min_eig:.3e})"
        ));
    }
    ValidationReport {
        violations,
        min_symmetric_eigenvalue: Some(min_eig),
        max_symmetry_defect: Some(max_defect),
    }
}

/// Builds the analytic [`QuadraticModel`] from a validated instance.
pub fn build_quadratic_model(inst: ProblemInstance) -> Result<QuadraticModel, ModelError> {
    check_shapes(&inst)?;
    let report = validate_instance(&inst);
    if !report.passed() {
        return Err(ModelError::Invalid(report.violations.join("; ")));
    }
    let dims = &inst.dims;
    let (n, m, l, p) = (dims.n(), dims.m(), dims.l(), dims.p());

    let b_stack = stack_follower_matrix(&inst);

    let mut c_stack = DMatrix::zeros(m, n);
    for omega in 0..dims.n_followers {
        for (nu, lead) in inst.leaders.iter().enumerate() {
            c_stack
                .view_mut(
                    (dims.follower_offset(omega), dims.leader_offset(nu)),
                    (dims.m_omega[omega], dims.n_nu[nu]),
                )
                .copy_from(&lead.d[omega].transpose());
        }
    }

    let mut jac_y_g = DMatrix::zeros(m, l);
    for (omega, fol) in inst.followers.iter().enumerate() {
        let ro = dims.follower_offset(omega);
        let co = dims.constraint_offset(omega);
        for i in 0..dims.m_omega[omega] {
            jac_y_g[(ro + i, co)] = -fol.c[i];
            jac_y_g[(ro + i, co + 1 + i)] = -1.0;
        }
    }

    let mut jac_x_g = DMatrix::zeros(n, l);
    for omega in 0..dims.n_followers {
        let co = dims.constraint_offset(omega);
        for (nu, d) in inst.coupling.iter().enumerate() {
            for i in 0..dims.n_nu[nu] {
                jac_x_g[(dims.leader_offset(nu) + i, co)] = -d[i];
            }
        }
    }

    let mut a = DMatrix::zeros(p, n);
    let mut b_rhs = DVector::zeros(p);
    let mut row = 0;
    for (nu, lead) in inst.leaders.iter().enumerate() {
        a.view_mut((row, dims.leader_offset(nu)), (dims.p_nu[nu], dims.n_nu[nu]))
            .copy_from(&lead.a);
        b_rhs.rows_mut(row, dims.p_nu[nu]).copy_from(&lead.b);
        row += dims.p_nu[nu];
    }

    Ok(QuadraticModel {
        inst,
        b_stack,
        c_stack,
        jac_y_g,
        jac_x_g,
        poly: Polyhedron { a, b: b_rhs },
    })
}

/// The two-leader–two-follower quadratic instance used throughout the test
/// suite (the extended Hori–Fukushima model).
pub fn builtin_instance(name: &str) -> Option<ProblemInstance> {
    if name != "hori-fukushima-ext" {
        return None;
    }
    let mat = |rows: &[[f64; 2]; 2]| DMatrix::from_row_slice(2, 2, &[rows[0][0], rows[0][1], rows[1][0], rows[1][1]]);
    let g12 = mat(&[[2.0, -1.0], [2.0, 2.0]]);
    let g21 = -g12.transpose();
    let q12 = mat(&[[1.0, 1.0], [1.0, 2.0]]);
    let q21 = -q12.transpose();
    Some(ProblemInstance {
        dims: Dimensions {
            n_leaders: 2,
            n_followers: 2,
            n_nu: vec![2, 2],
            m_omega: vec![2, 2],
            l_omega: vec![3, 3],
            p_nu: vec![2, 2],
        },
        leaders: vec![
            LeaderBlock {
                h: mat(&[[3.0, -4.0], [-4.0, 2.0]]),
                g_cross: vec![g12],
                d: vec![mat(&[[1.0, 2.0], [2.0, 1.0]]), mat(&[[1.0, 2.0], [1.0, 1.0]])],
                q: DVector::from_vec(vec![-6.0, -6.0]),
                a: mat(&[[2.0, 1.0], [1.0, 2.0]]),
                b: DVector::from_vec(vec![3.0, 1.0]),
            },
            LeaderBlock {
                h: mat(&[[4.0, -5.0], [-5.0, -3.0]]),
                g_cross: vec![g21],
                d: vec![mat(&[[2.0, 1.0], [1.0, 1.0]]), mat(&[[2.0, 1.0], [1.0, 2.0]])],
                q: DVector::from_vec(vec![-6.0, -6.0]),
                a: mat(&[[1.0, 2.0], [2.0, 1.0]]),
                b: DVector::from_vec(vec![3.0, 1.0]),
            },
        ],
        followers: vec![
            FollowerBlock {
                m: mat(&[[3.0, 1.0], [1.0, 3.0]]),
                q_cross: vec![q12],
                c: DVector::from_vec(vec![-1.0, -1.0]),
                a: 4.0,
            },
            FollowerBlock {
                m: mat(&[[2.0, 1.0], [1.0, 3.0]]),
                q_cross: vec![q21],
                c: DVector::from_vec(vec![-1.0, -1.0]),
                a: 4.0,
            },
        ],
        coupling: vec![
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        ],
    })
}

// ---------------------------------------------------------------------------
// Instance file I/O (schema version 1)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LeaderDto {
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    #[serde(rename = "G_cross")]
    g_cross: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "D")]
    d: Vec<Vec<Vec<f64>>>,
    q: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FollowerDto {
    #[serde(rename = "M")]
    m: Vec<Vec<f64>>,
    #[serde(rename = "Q_cross")]
    q_cross: Vec<Vec<Vec<f64>>>,
    c: Vec<f64>,
    a: f64,
}

#[derive(Serialize, Deserialize)]
struct InstanceDto {
    version: i64,
    dims: Dimensions,
    leaders: Vec<LeaderDto>,
    followers: Vec<FollowerDto>,
    coupling: Vec<Vec<f64>>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ModelError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(ModelError::DimensionMismatch {
            field: field.to_string(),
            expected: format!("rectangular matrix with {ncols} columns per row"),
            got: "ragged rows".to_string(),
        });
    }
    let mut flat = Vec::with_capacity(nrows * ncols);
    for r in rows {
        flat.extend_from_slice(r);
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

fn to_dto(inst: &ProblemInstance) -> InstanceDto {
    InstanceDto {
        version: 1,
        dims: inst.dims.clone(),
        leaders: inst
            .leaders
            .iter()
            .map(|l| LeaderDto {
                h: matrix_to_rows(&l.h),
                g_cross: l.g_cross.iter().map(matrix_to_rows).collect(),
                d: l.d.iter().map(matrix_to_rows).collect(),
                q: l.q.iter().cloned().collect(),
                a: matrix_to_rows(&l.a),
                b: l.b.iter().cloned().collect(),
            })
            .collect(),
        followers: inst
            .followers
            .iter()
            .map(|f| FollowerDto {
                m: matrix_to_rows(&f.m),
                q_cross: f.q_cross.iter().map(matrix_to_rows).collect(),
                c: f.c.iter().cloned().collect(),
                a: f.a,
            })
            .collect(),
        coupling: inst.coupling.iter().map(|d| d.iter().cloned().collect()).collect(),
    }
}

fn from_dto(dto: InstanceDto) -> Result<ProblemInstance, ModelError> {
    let leaders = dto
        .leaders
        .iter()
        .enumerate()
        .map(|(nu, l)| {
            Ok(LeaderBlock {
                h: rows_to_matrix(&format!("leaders[{nu}].H"), &l.h)?,
                g_cross: l
                    .g_cross
                    .iter()
                    .enumerate()
                    .map(|(k, m)| rows_to_matrix(&format!("leaders[{nu}].G_cross[{k}]"), m))
                    .collect::<Result<_, _>>()?,
                d: l.d
                    .iter()
                    .enumerate()
                    .map(|(k, m)| rows_to_matrix(&format!("leaders[{nu}].D[{k}]"), m))
                    .collect::<Result<_, _>>()?,
                q: DVector::from_vec(l.q.clone()),
                a: rows_to_matrix(&format!("leaders[{nu}].A"), &l.a)?,
                b: DVector::from_vec(l.b.clone()),
            })
        })
        .collect::<Result<_, ModelError>>()?;
    let followers = dto
        .followers
        .iter()
        .enumerate()
        .map(|(omega, f)| {
            Ok(FollowerBlock {
                m: rows_to_matrix(&format!("followers[{omega}].M"), &f.m)?,
                q_cross: f
                    .q_cross
                    .iter()
                    .enumerate()
                    .map(|(k, m)| rows_to_matrix(&format!("followers[{omega}].Q_cross[{k}]"), m))
                    .collect::<Result<_, _>>()?,
                c: DVector::from_vec(f.c.clone()),
                a: f.a,
            })
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(ProblemInstance {
        dims: dto.dims,
        leaders,
        followers,
        coupling: dto.coupling.into_iter().map(DVector::from_vec).collect(),
    })
}

fn known_keys(value: &serde_json::Value, known: &[&str], at: &str, warnings: &mut Vec<String>) {
    if let serde_json::Value::Object(map) = value {
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                warnings.push(format!("unknown field `{key}` in {at} (ignored)"));
            }
        }
    }
}

/// Loads an instance file, returning the parsed instance plus
/// forward-compatibility warnings for unknown fields.
pub fn load_instance(path: &Path) -> Result<(ProblemInstance, Vec<String>), InstanceIoError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| InstanceIoError::Read {
        path: display.clone(),
        source,
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| InstanceIoError::Parse {
            path: display.clone(),
            message: e.to_string(),
        })?;
    if let Some(v) = value.get("version").and_then(|v| v.as_i64()) {
        if v != 1 {
            return Err(InstanceIoError::UnsupportedVersion {
                found: v,
                path: display,
            });
        }
    }
    let mut warnings = Vec::new();
    known_keys(
        &value,
        &["version", "dims", "leaders", "followers", "coupling"],
        "instance",
        &mut warnings,
    );
    if let Some(arr) = value.get("leaders").and_then(|v| v.as_array()) {
        for (i, lv) in arr.iter().enumerate() {
            known_keys(
                lv,
                &["H", "G_cross", "D", "q", "A", "b"],
                &format!("leaders[{i}]"),
                &mut warnings,
            );
        }
    }
    if let Some(arr) = value.get("followers").and_then(|v| v.as_array()) {
        for (i, fv) in arr.iter().enumerate() {
            known_keys(
                fv,
                &["M", "Q_cross", "c", "a"],
                &format!("followers[{i}]"),
                &mut warnings,
            );
        }
    }
    let dto: InstanceDto = serde_json::from_value(value).map_err(|e| InstanceIoError::Parse {
        path: display.clone(),
        message: e.to_string(),
    })?;
    let inst = from_dto(dto)?;
    check_shapes(&inst)?;
    Ok((inst, warnings))
}

/// Saves an instance as schema-version-1 JSON. Numbers are written in
/// shortest-round-trip decimal form, so `load(save(x)) == x` bit-exactly.
pub fn save_instance(inst: &ProblemInstance, path: &Path) -> Result<(), InstanceIoError> {
    let dto = to_dto(inst);
    let text = serde_json::to_string_pretty(&dto).expect("instance serialization cannot fail");
    std::fs::write(path, text).map_err(|source| InstanceIoError::Write {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn builtin_model() -> QuadraticModel {
        build_quadratic_model(builtin_instance("hori-fukushima-ext").unwrap()).unwrap()
    }

    #[test]
    fn builtin_field_at_reference_start() {
        let model = builtin_model();
        let x = dvector![3.0, 3.0, 3.0, 3.0];
        let y = DVector::zeros(4);
        let g = model.follower_field(&x, &y);
        assert_relative_eq!(g, dvector![-18.0, -15.0, -15.0, -18.0]);
    }

    #[test]
    fn builtin_constraints_at_origin() {
        let model = builtin_model();
        let g = model.constraints(&DVector::zeros(4), &DVector::zeros(4));
        assert_relative_eq!(g, dvector![-4.0, 0.0, 0.0, -4.0, 0.0, 0.0]);
    }

    #[test]
    fn constraint_hessians_are_zero() {
        let model = builtin_model();
        let lambda = dvector![1.0, -2.0, 0.5, 3.0, 0.0, 1.0];
        let x = dvector![1.0, 2.0, 3.0, 4.0];
        let y = dvector![0.5, 0.5, 0.5, 0.5];
        assert_eq!(model.constraint_hess_yy(&x, &y, &lambda).abs().max(), 0.0);
        assert_eq!(model.constraint_hess_xy(&x, &y, &lambda).abs().max(), 0.0);
    }

    #[test]
    fn validation_passes_for_builtin() {
        let report = validate_instance(&builtin_instance("hori-fukushima-ext").unwrap());
        assert!(report.passed(), "violations: {:?}", report.violations);
        // symmetric part is block-diag(M_1, M_2): eigenvalues {2, 4, (5 +/- sqrt 5)/2}
        let min_eig = report.min_symmetric_eigenvalue.unwrap();
        assert_relative_eq!(min_eig, (5.0 - 5.0f64.sqrt()) / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn validation_rejects_zero_m_block() {
        let mut inst = builtin_instance("hori-fukushima-ext").unwrap();
        inst.followers[0].m = DMatrix::zeros(2, 2);
        let report = validate_instance(&inst);
        assert!(!report.passed());
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("not positive definite")));
    }

    #[test]
    fn validation_rejects_bad_rhs_length() {
        let mut inst = builtin_instance("hori-fukushima-ext").unwrap();
        inst.leaders[0].b = dvector![3.0, 1.0, 7.0];
        let report = validate_instance(&inst);
        assert!(!report.passed());
        assert!(report.violations.iter().any(|v| v.contains("b")));
    }

    #[test]
    fn validation_rejects_asymmetric_m() {
        let mut inst = builtin_instance("hori-fukushima-ext").unwrap();
        inst.followers[1].m[(0, 1)] += 1e-6;
        let report = validate_instance(&inst);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("not symmetric")));
    }

    #[test]
    fn jac_y_is_transposed_block_matrix() {
        let model = builtin_model();
        let x = dvector![1.0, 0.0, 2.0, -1.0];
        let y = dvector![0.3, 0.1, 0.2, 0.4];
        let jac = model.follower_field_jac_y(&x, &y);
        assert_relative_eq!(jac, model.follower_block_matrix().transpose());
    }

    #[test]
    fn g_block_separability() {
        let model = builtin_model();
        let x = dvector![1.0, 2.0, 0.5, 0.25];
        let mut y = dvector![0.3, 0.1, 0.2, 0.4];
        let g0 = model.constraints(&x, &y);
        // perturbing follower 2's strategies must not change follower 1's rows
        y[2] += 0.7;
        y[3] -= 0.3;
        let g1 = model.constraints(&x, &y);
        for i in 0..3 {
            assert_eq!(g0[i], g1[i]);
        }
        assert_ne!(g0[3], g1[3]);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let model = builtin_model();
        let x = dvector![1.2, 0.7, 2.1, 0.4];
        let y = dvector![0.3, 0.9, 0.2, 0.5];
        let h = 1e-6;
        for nu in 0..2 {
            let grad = model.leader_grad_x(nu, &x, &y);
            for j in 0..2 {
                let idx = model.dims().leader_offset(nu) + j;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[idx] += h;
                xm[idx] -= h;
                let fd = (model.leader_objective(nu, &xp, &y)
                    - model.leader_objective(nu, &xm, &y))
                    / (2.0 * h);
                assert_relative_eq!(grad[j], fd, max_relative = 1e-6, epsilon = 1e-8);
            }
            let grad_y = model.leader_grad_y(nu, &x, &y);
            for idx in 0..4 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[idx] += h;
                ym[idx] -= h;
                let fd = (model.leader_objective(nu, &x, &yp)
                    - model.leader_objective(nu, &x, &ym))
                    / (2.0 * h);
                assert_relative_eq!(grad_y[idx], fd, max_relative = 1e-6, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn io_round_trip_is_exact() {
        let inst = builtin_instance("hori-fukushima-ext").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instance.json");
        save_instance(&inst, &path).unwrap();
        let (loaded, warnings) = load_instance(&path).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(inst, loaded);
    }

    #[test]
    fn io_missing_field_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        let inst = builtin_instance("hori-fukushima-ext").unwrap();
        let mut value = serde_json::to_value(to_dto(&inst)).unwrap();
        value["followers"][0]
            .as_object_mut()
            .unwrap()
            .remove("M");
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let err = load_instance(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("M"), "error should name the field: {msg}");
    }

    #[test]
    fn io_unknown_field_warns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.json");
        let inst = builtin_instance("hori-fukushima-ext").unwrap();
        let mut value = serde_json::to_value(to_dto(&inst)).unwrap();
        value["solver_hint"] = serde_json::json!("fast");
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let (loaded, warnings) = load_instance(&path).unwrap();
        assert_eq!(loaded, inst);
        assert!(warnings.iter().any(|w| w.contains("solver_hint")));
    }

    #[test]
    fn io_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.json");
        let inst = builtin_instance("hori-fukushima-ext").unwrap();
        let mut value = serde_json::to_value(to_dto(&inst)).unwrap();
        value["version"] = serde_json::json!(2);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(matches!(
            load_instance(&path).unwrap_err(),
            InstanceIoError::UnsupportedVersion { found: 2, .. }
        ));
    }

    #[test]
    fn unknown_builtin_is_none() {
        assert!(builtin_instance("no-such-instance").is_none());
    }

    mod round_trip {
        use super::super::*;
        use proptest::prelude::*;

        fn finite() -> impl Strategy<Value = f64> {
            // full-range finite doubles, including awkward magnitudes
            prop_oneof![
                -1e12..1e12f64,
                (-30i32..30).prop_map(|e| 1.7f64.powi(e)),
                Just(0.0),
                Just(-0.0),
                Just(1e-300),
            ]
        }

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
            proptest::collection::vec(finite(), rows * cols)
                .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
        }

        fn vector(len: usize) -> impl Strategy<Value = DVector<f64>> {
            proptest::collection::vec(finite(), len).prop_map(DVector::from_vec)
        }

        prop_compose! {
            fn instance()(
                h1 in matrix(2, 2), h2 in matrix(1, 1),
                g12 in matrix(2, 1), g21 in matrix(1, 2),
                d11 in matrix(2, 2), d12 in matrix(2, 1),
                d21 in matrix(1, 2), d22 in matrix(1, 1),
                q1 in vector(2), q2 in vector(1),
                a1 in matrix(1, 2), a2 in matrix(2, 1),
                b1 in vector(1), b2 in vector(2),
                m1 in matrix(2, 2), m2 in matrix(1, 1),
                qc12 in matrix(2, 1), qc21 in matrix(1, 2),
                c1 in vector(2), c2 in vector(1),
                fa in proptest::collection::vec(finite(), 2),
                d_1 in vector(2), d_2 in vector(1),
            ) -> ProblemInstance {
                ProblemInstance {
                    dims: Dimensions {
                        n_leaders: 2,
                        n_followers: 2,
                        n_nu: vec![2, 1],
                        m_omega: vec![2, 1],
                        l_omega: vec![3, 2],
                        p_nu: vec![1, 2],
                    },
                    leaders: vec![
                        LeaderBlock { h: h1, g_cross: vec![g12], d: vec![d11, d12], q: q1, a: a1, b: b1 },
                        LeaderBlock { h: h2, g_cross: vec![g21], d: vec![d21, d22], q: q2, a: a2, b: b2 },
                    ],
                    followers: vec![
                        FollowerBlock { m: m1, q_cross: vec![qc12], c: c1, a: fa[0] },
                        FollowerBlock { m: m2, q_cross: vec![qc21], c: c2, a: fa[1] },
                    ],
                    coupling: vec![d_1, d_2],
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            // save -> load is the identity, bit for bit, for any finite data
            #[test]
            fn save_load_identity(inst in instance()) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("roundtrip.json");
                save_instance(&inst, &path).unwrap();
                let (loaded, warnings) = load_instance(&path).unwrap();
                prop_assert!(warnings.is_empty());
                prop_assert_eq!(inst, loaded);
            }
        }
    }
}
