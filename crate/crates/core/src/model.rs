//! Plant, preview, constraint and cost abstractions.
//!
//! Every derivative supplier has a finite-difference default, so a model only
//! needs to provide function values. Second derivatives of the dynamics,
//! preview model and constraints are only ever needed weighted by a multiplier
//! vector, so models expose those contractions instead of third-order tensors.

use serde::{Deserialize, Serialize};

use crate::error::{EneError, Result};
use crate::numerics::{
    concat, fd_gradient, fd_hessian, fd_hessian_relative, fd_jacobian, hstack, max_abs, symmetrize, Lcg, Mat, Vector,
    FD_STEP, FD_STEP_SECOND,
};

/// Default tolerance for treating a constraint as active.
pub const ACTIVATION_TOL: f64 = 1e-8;

/// State, control and preview dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub state: usize,
    pub control: usize,
    pub preview: usize,
}

impl Dims {
    pub fn stage(&self) -> usize {
        self.state + self.control + self.preview
    }

    pub fn terminal(&self) -> usize {
        self.state + self.preview
    }

    /// Split a stacked `[x; u; w]` vector.
    pub fn split_stage(&self, z: &Vector) -> (Vector, Vector, Vector) {
        let (n, m, p) = (self.state, self.control, self.preview);
        (
            z.rows(0, n).into_owned(),
            z.rows(n, m).into_owned(),
            z.rows(n + m, p).into_owned(),
        )
    }

    pub fn split_terminal(&self, z: &Vector) -> (Vector, Vector) {
        (
            z.rows(0, self.state).into_owned(),
            z.rows(self.state, self.preview).into_owned(),
        )
    }
}

fn dims_of(x: &Vector, u: &Vector, w: &Vector) -> Dims {
    Dims {
        state: x.len(),
        control: u.len(),
        preview: w.len(),
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsJacobians {
    pub fx: Mat,
    pub fu: Mat,
    pub fw: Mat,
}

#[derive(Debug, Clone)]
pub struct PreviewJacobians {
    pub gx: Mat,
    pub gw: Mat,
}

#[derive(Debug, Clone)]
pub struct ConstraintJacobians {
    pub cx: Mat,
    pub cu: Mat,
    pub cw: Mat,
}

fn split_columns(j: &Mat, d: Dims) -> (Mat, Mat, Mat) {
    let rows = j.nrows();
    (
        j.view((0, 0), (rows, d.state)).into_owned(),
        j.view((0, d.state), (rows, d.control)).into_owned(),
        j.view((0, d.state + d.control), (rows, d.preview)).into_owned(),
    )
}

/// Discrete-time plant `x' = f(x, u, w)` with nominal preview model `w' = g(x, w)`.
pub trait PlantModel: Send + Sync {
    fn dims(&self) -> Dims;

    fn dynamics(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector;

    fn preview(&self, x: &Vector, w: &Vector) -> Vector;

    fn dynamics_jacobians(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<DynamicsJacobians> {
        let d = dims_of(x, u, w);
        let z = concat(&[x, u, w]);
        let j = fd_jacobian(
            |z| {
                let (x, u, w) = d.split_stage(z);
                self.dynamics(&x, &u, &w)
            },
            &z,
            FD_STEP,
        )?;
        let (fx, fu, fw) = split_columns(&j, d);
        Ok(DynamicsJacobians { fx, fu, fw })
    }

    fn preview_jacobians(&self, x: &Vector, w: &Vector) -> Result<PreviewJacobians> {
        let n = x.len();
        let z = concat(&[x, w]);
        let j = fd_jacobian(
            |z| self.preview(&z.rows(0, n).into_owned(), &z.rows(n, z.len() - n).into_owned()),
            &z,
            FD_STEP,
        )?;
        Ok(PreviewJacobians {
            gx: j.columns(0, n).into_owned(),
            gw: j.columns(n, w.len()).into_owned(),
        })
    }

    /// True when `f` has no curvature, so weighted second derivatives vanish.
    fn dynamics_affine(&self) -> bool {
        false
    }

    fn preview_affine(&self) -> bool {
        false
    }

    /// `Σᵢ weightsᵢ ∇²fᵢ` over the stacked `[x; u; w]` coordinates.
    fn dynamics_curvature(&self, x: &Vector, u: &Vector, w: &Vector, weights: &Vector) -> Result<Mat> {
        let d = dims_of(x, u, w);
        if self.dynamics_affine() {
            return Ok(Mat::zeros(d.stage(), d.stage()));
        }
        let z = concat(&[x, u, w]);
        fd_hessian(
            |z| {
                let (x, u, w) = d.split_stage(z);
                weights.dot(&self.dynamics(&x, &u, &w))
            },
            &z,
            FD_STEP_SECOND,
        )
    }

    /// `Σᵢ weightsᵢ ∇²gᵢ` over the stacked `[x; w]` coordinates.
    fn preview_curvature(&self, x: &Vector, w: &Vector, weights: &Vector) -> Result<Mat> {
        let n = x.len();
        let size = n + w.len();
        if self.preview_affine() {
            return Ok(Mat::zeros(size, size));
        }
        let z = concat(&[x, w]);
        fd_hessian(
            |z| weights.dot(&self.preview(&z.rows(0, n).into_owned(), &z.rows(n, size - n).into_owned())),
            &z,
            FD_STEP_SECOND,
        )
    }
}

/// Inequality constraints `C(x, u, w) ≤ 0`.
pub trait ConstraintSet: Send + Sync {
    fn count(&self) -> usize;

    fn eval(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector;

    fn jacobians(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<ConstraintJacobians> {
        let d = dims_of(x, u, w);
        let z = concat(&[x, u, w]);
        let j = fd_jacobian(
            |z| {
                let (x, u, w) = d.split_stage(z);
                self.eval(&x, &u, &w)
            },
            &z,
            FD_STEP,
        )?;
        let (cx, cu, cw) = split_columns(&j, d);
        Ok(ConstraintJacobians { cx, cu, cw })
    }

    fn affine(&self) -> bool {
        false
    }

    /// `Σᵢ weightsᵢ ∇²Cᵢ` over `[x; u; w]`; `weights` has one entry per constraint.
    fn curvature(&self, x: &Vector, u: &Vector, w: &Vector, weights: &Vector) -> Result<Mat> {
        let d = dims_of(x, u, w);
        if self.affine() || weights.iter().all(|&v| v == 0.0) {
            return Ok(Mat::zeros(d.stage(), d.stage()));
        }
        let z = concat(&[x, u, w]);
        fd_hessian(
            |z| {
                let (x, u, w) = d.split_stage(z);
                weights.dot(&self.eval(&x, &u, &w))
            },
            &z,
            FD_STEP_SECOND,
        )
    }

    fn activation_tol(&self) -> f64 {
        ACTIVATION_TOL
    }
}

/// Stage cost `φ(x, u, w)` and terminal cost `ψ(x, w)`.
pub trait CostSpec: Send + Sync {
    fn stage(&self, x: &Vector, u: &Vector, w: &Vector) -> f64;

    fn terminal(&self, x: &Vector, w: &Vector) -> f64;

    /// Gradient over `[x; u; w]`.
    fn stage_gradient(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector> {
        let d = dims_of(x, u, w);
        fd_gradient(
            |z| {
                let (x, u, w) = d.split_stage(z);
                self.stage(&x, &u, &w)
            },
            &concat(&[x, u, w]),
            FD_STEP,
        )
    }

    /// Hessian over `[x; u; w]`.
    fn stage_hessian(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Mat> {
        let d = dims_of(x, u, w);
        fd_hessian(
            |z| {
                let (x, u, w) = d.split_stage(z);
                self.stage(&x, &u, &w)
            },
            &concat(&[x, u, w]),
            FD_STEP_SECOND,
        )
    }

    /// Gradient over `[x; w]`.
    fn terminal_gradient(&self, x: &Vector, w: &Vector) -> Result<Vector> {
        let n = x.len();
        fd_gradient(
            |z| self.terminal(&z.rows(0, n).into_owned(), &z.rows(n, z.len() - n).into_owned()),
            &concat(&[x, w]),
            FD_STEP,
        )
    }

    /// Hessian over `[x; w]`.
    fn terminal_hessian(&self, x: &Vector, w: &Vector) -> Result<Mat> {
        let n = x.len();
        fd_hessian(
            |z| self.terminal(&z.rows(0, n).into_owned(), &z.rows(n, z.len() - n).into_owned()),
            &concat(&[x, w]),
            FD_STEP_SECOND,
        )
    }
}

/// Affine constraints `C = Cx·x + Cu·u + Cw·w + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraints {
    pub cx: Mat,
    pub cu: Mat,
    pub cw: Mat,
    pub offset: Vector,
    pub activation_tol: f64,
}

impl LinearConstraints {
    pub fn new(cx: Mat, cu: Mat, cw: Mat, offset: Vector) -> Result<Self> {
        let l = offset.len();
        if cx.nrows() != l || cu.nrows() != l || cw.nrows() != l {
            return Err(EneError::DimensionMismatch(format!(
                "constraint blocks have rows {}/{}/{} but offset has {l}",
                cx.nrows(),
                cu.nrows(),
                cw.nrows()
            )));
        }
        Ok(Self {
            cx,
            cu,
            cw,
            offset,
            activation_tol: ACTIVATION_TOL,
        })
    }

    /// `lower ≤ u ≤ upper` as `[u − upper; lower − u] ≤ 0`.
    pub fn control_box(dims: Dims, lower: &Vector, upper: &Vector) -> Result<Self> {
        let m = dims.control;
        if lower.len() != m || upper.len() != m {
            return Err(EneError::DimensionMismatch("box bounds must match the control dimension".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(EneError::InvalidInput("box bounds need lower < upper".into()));
        }
        let eye = Mat::identity(m, m);
        let cu = crate::numerics::vstack(&[&eye, &(-&eye)]);
        let offset = concat(&[&(-upper), lower]);
        Self::new(
            Mat::zeros(2 * m, dims.state),
            cu,
            Mat::zeros(2 * m, dims.preview),
            offset,
        )
    }

    /// No constraints at all.
    pub fn none(dims: Dims) -> Self {
        Self {
            cx: Mat::zeros(0, dims.state),
            cu: Mat::zeros(0, dims.control),
            cw: Mat::zeros(0, dims.preview),
            offset: Vector::zeros(0),
            activation_tol: ACTIVATION_TOL,
        }
    }

    pub fn with_activation_tol(mut self, tol: f64) -> Self {
        self.activation_tol = tol;
        self
    }
}

impl ConstraintSet for LinearConstraints {
    fn count(&self) -> usize {
        self.offset.len()
    }

    fn eval(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        &self.cx * x + &self.cu * u + &self.cw * w + &self.offset
    }

    fn jacobians(&self, _x: &Vector, _u: &Vector, _w: &Vector) -> Result<ConstraintJacobians> {
        Ok(ConstraintJacobians {
            cx: self.cx.clone(),
            cu: self.cu.clone(),
            cw: self.cw.clone(),
        })
    }

    fn affine(&self) -> bool {
        true
    }

    fn activation_tol(&self) -> f64 {
        self.activation_tol
    }
}

/// `φ = ½(z − z_ref)ᵀ H (z − z_ref)` over `z = [x; u; w]`, and likewise for
/// the terminal cost over `[x; w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub stage_weight: Mat,
    pub stage_reference: Vector,
    pub terminal_weight: Mat,
    pub terminal_reference: Vector,
}

impl QuadraticCost {
    pub fn new(stage_weight: Mat, stage_reference: Vector, terminal_weight: Mat, terminal_reference: Vector) -> Result<Self> {
        if stage_weight.nrows() != stage_reference.len()
            || stage_weight.ncols() != stage_reference.len()
            || terminal_weight.nrows() != terminal_reference.len()
            || terminal_weight.ncols() != terminal_reference.len()
        {
            return Err(EneError::DimensionMismatch("quadratic cost weights and references disagree".into()));
        }
        Ok(Self {
            stage_weight: symmetrize(&stage_weight),
            stage_reference,
            terminal_weight: symmetrize(&terminal_weight),
            terminal_reference,
        })
    }

    /// Zero references.
    pub fn centered(stage_weight: Mat, terminal_weight: Mat) -> Result<Self> {
        let (s, t) = (stage_weight.nrows(), terminal_weight.nrows());
        Self::new(stage_weight, Vector::zeros(s), terminal_weight, Vector::zeros(t))
    }
}

impl CostSpec for QuadraticCost {
    fn stage(&self, x: &Vector, u: &Vector, w: &Vector) -> f64 {
        let e = concat(&[x, u, w]) - &self.stage_reference;
        0.5 * e.dot(&(&self.stage_weight * &e))
    }

    fn terminal(&self, x: &Vector, w: &Vector) -> f64 {
        let e = concat(&[x, w]) - &self.terminal_reference;
        0.5 * e.dot(&(&self.terminal_weight * &e))
    }

    fn stage_gradient(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector> {
        Ok(&self.stage_weight * (concat(&[x, u, w]) - &self.stage_reference))
    }

    fn stage_hessian(&self, _x: &Vector, _u: &Vector, _w: &Vector) -> Result<Mat> {
        Ok(self.stage_weight.clone())
    }

    fn terminal_gradient(&self, x: &Vector, w: &Vector) -> Result<Vector> {
        Ok(&self.terminal_weight * (concat(&[x, w]) - &self.terminal_reference))
    }

    fn terminal_hessian(&self, _x: &Vector, _w: &Vector) -> Result<Mat> {
        Ok(self.terminal_weight.clone())
    }
}

/// Scalar profile `a·sin(k) + b·rand(k) + c`, written into the listed preview
/// channels (other channels are zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewGenerator {
    pub sin_amplitude: f64,
    pub rand_amplitude: f64,
    pub offset: f64,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub dim: usize,
}

impl PreviewGenerator {
    /// The scalar profile for `k = 0 … len−1`.
    pub fn scalar_sequence(&self, len: usize) -> Vec<f64> {
        let mut rng = Lcg::new(self.seed);
        (0..len)
            .map(|k| self.sin_amplitude * (k as f64).sin() + self.rand_amplitude * rng.next_f64() + self.offset)
            .collect()
    }

    pub fn sequence(&self, len: usize) -> Result<Vec<Vector>> {
        if let Some(&bad) = self.channels.iter().find(|&&c| c >= self.dim) {
            return Err(EneError::InvalidInput(format!(
                "generator channel {bad} outside preview dimension {}",
                self.dim
            )));
        }
        Ok(self
            .scalar_sequence(len)
            .into_iter()
            .map(|v| {
                let mut w = Vector::zeros(self.dim);
                for &c in &self.channels {
                    w[c] = v;
                }
                w
            })
            .collect())
    }
}

/// Where preview values come from during a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PreviewSignal {
    /// `w(k+1) = g(x(k), w(k))` from the plant model.
    NominalModel,
    /// `w(k+1) = w(k)`.
    HoldConstant,
    /// Measured profile; overrides `w(0)` as well.
    Generator(PreviewGenerator),
}

/// Indices with `Cᵢ ≥ −tol`.
pub fn active_indices(
    constraints: &dyn ConstraintSet,
    x: &Vector,
    u: &Vector,
    w: &Vector,
    tol: f64,
) -> Result<Vec<usize>> {
    let values = constraints.eval(x, u, w);
    let active: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= -tol)
        .map(|(i, _)| i)
        .collect();
    if active.len() > u.len() {
        return Err(EneError::TooManyActive {
            step: 0,
            count: active.len(),
            control_dim: u.len(),
        });
    }
    Ok(active)
}

/// One probe point for [`verify_derivatives`].
#[derive(Debug, Clone)]
pub struct Probe {
    pub x: Vector,
    pub u: Vector,
    pub w: Vector,
}

impl Probe {
    /// Seeded probes spread uniformly in a box around `center`.
    pub fn around(center: &Probe, radius: f64, count: usize, seed: u64) -> Vec<Probe> {
        let mut rng = Lcg::new(seed);
        let mut jitter = |v: &Vector| v.map(|c| c + rng.uniform(-radius, radius));
        (0..count)
            .map(|_| Probe {
                x: jitter(&center.x),
                u: jitter(&center.u),
                w: jitter(&center.w),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupplierCheck {
    pub supplier: String,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub checks: Vec<SupplierCheck>,
    pub tolerance: f64,
}

impl DerivativeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_relative_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&SupplierCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }

    pub fn error_of(&self, supplier: &str) -> Option<f64> {
        self.checks
            .iter()
            .find(|c| c.supplier == supplier)
            .map(|c| c.max_relative_error)
    }
}

/// Pass threshold for [`verify_derivatives`].
pub const DERIVATIVE_TOL: f64 = 1e-4;

fn relative_error(supplied: &Mat, reference: &Mat) -> f64 {
    if supplied.shape() != reference.shape() {
        return f64::INFINITY;
    }
    let diff = max_abs(&(supplied - reference));
    if !diff.is_finite() {
        return f64::INFINITY;
    }
    diff / max_abs(reference).max(1e-3)
}

/// Second differences of `func` together with a bound on their rounding
/// noise, `16 ε |func(at)| / h_min²`.
fn second_difference_reference<F>(func: F, at: &Vector, step: f64) -> Result<(Mat, f64)>
where
    F: Fn(&Vector) -> f64,
{
    let scale = func(at).abs();
    let hessian = fd_hessian_relative(func, at, step)?;
    Ok((hessian, 16.0 * f64::EPSILON * scale / (step * step)))
}

/// Like [`relative_error`] but forgives differences up to `noise`.
fn relative_error_beyond_noise(supplied: &Mat, reference: &Mat, noise: f64) -> f64 {
    if supplied.shape() != reference.shape() {
        return f64::INFINITY;
    }
    let diff = max_abs(&(supplied - reference));
    if !diff.is_finite() {
        return f64::INFINITY;
    }
    (diff - noise).max(0.0) / max_abs(reference).max(1e-3)
}

/// Compare every derivative supplier against central differences of the
/// underlying function values at each probe.
///
/// Second-derivative suppliers are checked two ways and the worse error is
/// recorded: against second differences of the (weighted) values, and against
/// central differences of the matching first-derivative supplier. Curvature
/// weights come from a fixed seed. The value route uses a step of
/// `fd_step * FD_STEP_SECOND / FD_STEP` scaled per coordinate by magnitude,
/// and differences within its rounding noise are not counted.
pub fn verify_derivatives(
    model: &dyn PlantModel,
    constraints: &dyn ConstraintSet,
    cost: &dyn CostSpec,
    probes: &[Probe],
    fd_step: f64,
) -> DerivativeReport {
    let d = model.dims();
    let mut worst: Vec<(&'static str, f64)> = [
        "f_x", "f_u", "f_w", "g_x", "g_w", "C_x", "C_u", "C_w", "phi_grad", "phi_hess", "psi_grad", "psi_hess",
        "f_curvature", "g_curvature", "C_curvature",
    ]
    .iter()
    .map(|&s| (s, 0.0))
    .collect();
    let mut record = |name: &str, err: f64| {
        if let Some(slot) = worst.iter_mut().find(|(s, _)| *s == name) {
            slot.1 = if err.is_nan() { f64::INFINITY } else { slot.1.max(err) };
        }
    };
    let mut rng = Lcg::new(0x5eed);
    let second_step = fd_step * (FD_STEP_SECOND / FD_STEP);
    let two_routes = |supplied: &Mat, chain: Result<Mat>, values: Result<(Mat, f64)>| match (chain, values) {
        (Ok(c), Ok((v, noise))) => {
            relative_error(supplied, &c).max(relative_error_beyond_noise(supplied, &v, noise))
        }
        _ => f64::INFINITY,
    };

    for p in probes {
        let (x, u, w) = (&p.x, &p.u, &p.w);
        let z = concat(&[x, u, w]);
        let zt = concat(&[x, w]);
        let stage = |z: &Vector| {
            let (x, u, w) = d.split_stage(z);
            (x, u, w)
        };
        let terminal = |z: &Vector| d.split_terminal(z);

        let fd_f = fd_jacobian(|z| {
            let (x, u, w) = stage(z);
            model.dynamics(&x, &u, &w)
        }, &z, fd_step);
        match (model.dynamics_jacobians(x, u, w), fd_f) {
            (Ok(j), Ok(r)) => {
                let (rx, ru, rw) = split_columns(&r, d);
                record("f_x", relative_error(&j.fx, &rx));
                record("f_u", relative_error(&j.fu, &ru));
                record("f_w", relative_error(&j.fw, &rw));
            }
            _ => ["f_x", "f_u", "f_w"].iter().for_each(|s| record(s, f64::INFINITY)),
        }

        let fd_g = fd_jacobian(|z| {
            let (x, w) = terminal(z);
            model.preview(&x, &w)
        }, &zt, fd_step);
        match (model.preview_jacobians(x, w), fd_g) {
            (Ok(j), Ok(r)) => {
                record("g_x", relative_error(&j.gx, &r.columns(0, d.state).into_owned()));
                record("g_w", relative_error(&j.gw, &r.columns(d.state, d.preview).into_owned()));
            }
            _ => ["g_x", "g_w"].iter().for_each(|s| record(s, f64::INFINITY)),
        }

        if constraints.count() > 0 {
            let fd_c = fd_jacobian(|z| {
                let (x, u, w) = stage(z);
                constraints.eval(&x, &u, &w)
            }, &z, fd_step);
            match (constraints.jacobians(x, u, w), fd_c) {
                (Ok(j), Ok(r)) => {
                    let (rx, ru, rw) = split_columns(&r, d);
                    record("C_x", relative_error(&j.cx, &rx));
                    record("C_u", relative_error(&j.cu, &ru));
                    record("C_w", relative_error(&j.cw, &rw));
                }
                _ => ["C_x", "C_u", "C_w"].iter().for_each(|s| record(s, f64::INFINITY)),
            }
        }

        let phi = |z: &Vector| {
            let (x, u, w) = stage(z);
            cost.stage(&x, &u, &w)
        };
        let psi = |z: &Vector| {
            let (x, w) = terminal(z);
            cost.terminal(&x, &w)
        };
        let as_col = |v: Vector| Mat::from_column_slice(v.len(), 1, v.as_slice());
        match (cost.stage_gradient(x, u, w), fd_gradient(phi, &z, fd_step)) {
            (Ok(g), Ok(r)) => record("phi_grad", relative_error(&as_col(g), &as_col(r))),
            _ => record("phi_grad", f64::INFINITY),
        }
        let grad_or_nan = |g: Result<Vector>, len: usize| g.unwrap_or_else(|_| Vector::from_element(len, f64::NAN));
        let phi_ref = fd_jacobian(|z| {
            let (x, u, w) = stage(z);
            grad_or_nan(cost.stage_gradient(&x, &u, &w), z.len())
        }, &z, fd_step);
        match cost.stage_hessian(x, u, w) {
            Ok(h) => record("phi_hess", two_routes(&h, phi_ref, second_difference_reference(phi, &z, second_step))),
            _ => record("phi_hess", f64::INFINITY),
        }
        match (cost.terminal_gradient(x, w), fd_gradient(psi, &zt, fd_step)) {
            (Ok(g), Ok(r)) => record("psi_grad", relative_error(&as_col(g), &as_col(r))),
            _ => record("psi_grad", f64::INFINITY),
        }
        let psi_ref = fd_jacobian(|z| {
            let (x, w) = terminal(z);
            grad_or_nan(cost.terminal_gradient(&x, &w), z.len())
        }, &zt, fd_step);
        match cost.terminal_hessian(x, w) {
            Ok(h) => record("psi_hess", two_routes(&h, psi_ref, second_difference_reference(psi, &zt, second_step))),
            _ => record("psi_hess", f64::INFINITY),
        }

        let fw_weights = Vector::from_fn(d.state, |_, _| rng.uniform(-1.0, 1.0));
        let f_ref = fd_jacobian(|z| {
            let (x, u, w) = stage(z);
            match model.dynamics_jacobians(&x, &u, &w) {
                Ok(j) => stacked_dynamics_jacobian(&j).transpose() * &fw_weights,
                Err(_) => Vector::from_element(z.len(), f64::NAN),
            }
        }, &z, fd_step);
        let f_values = second_difference_reference(|z| {
            let (x, u, w) = stage(z);
            model.dynamics(&x, &u, &w).dot(&fw_weights)
        }, &z, second_step);
        match model.dynamics_curvature(x, u, w, &fw_weights) {
            Ok(h) => record("f_curvature", two_routes(&h, f_ref, f_values)),
            _ => record("f_curvature", f64::INFINITY),
        }

        let gw_weights = Vector::from_fn(d.preview, |_, _| rng.uniform(-1.0, 1.0));
        let g_ref = fd_jacobian(|z| {
            let (x, w) = terminal(z);
            match model.preview_jacobians(&x, &w) {
                Ok(j) => hstack(&[&j.gx, &j.gw]).transpose() * &gw_weights,
                Err(_) => Vector::from_element(z.len(), f64::NAN),
            }
        }, &zt, fd_step);
        let g_values = second_difference_reference(|z| {
            let (x, w) = terminal(z);
            model.preview(&x, &w).dot(&gw_weights)
        }, &zt, second_step);
        match model.preview_curvature(x, w, &gw_weights) {
            Ok(h) => record("g_curvature", two_routes(&h, g_ref, g_values)),
            _ => record("g_curvature", f64::INFINITY),
        }

        if constraints.count() > 0 {
            let cw_weights = Vector::from_fn(constraints.count(), |_, _| rng.uniform(0.0, 1.0));
            let c_ref = fd_jacobian(|z| {
                let (x, u, w) = stage(z);
                match constraints.jacobians(&x, &u, &w) {
                    Ok(j) => hstack(&[&j.cx, &j.cu, &j.cw]).transpose() * &cw_weights,
                    Err(_) => Vector::from_element(z.len(), f64::NAN),
                }
            }, &z, fd_step);
            let c_values = second_difference_reference(|z| {
                let (x, u, w) = stage(z);
                constraints.eval(&x, &u, &w).dot(&cw_weights)
            }, &z, second_step);
            match constraints.curvature(x, u, w, &cw_weights) {
                Ok(h) => record("C_curvature", two_routes(&h, c_ref, c_values)),
                _ => record("C_curvature", f64::INFINITY),
            }
        }
    }

    DerivativeReport {
        checks: worst
            .into_iter()
            .map(|(s, e)| SupplierCheck {
                supplier: s.to_string(),
                max_relative_error: e,
            })
            .collect(),
        tolerance: DERIVATIVE_TOL,
    }
}

/// `[fx fu fw]` as one matrix.
pub fn stacked_dynamics_jacobian(j: &DynamicsJacobians) -> Mat {
    hstack(&[&j.fx, &j.fu, &j.fw])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pendulum_box() -> LinearConstraints {
        let dims = Dims {
            state: 4,
            control: 1,
            preview: 4,
        };
        LinearConstraints::control_box(dims, &Vector::from_element(1, -300.0), &Vector::from_element(1, 300.0)).unwrap()
    }

    fn at_force(f: f64) -> (Vector, Vector, Vector) {
        (Vector::zeros(4), Vector::from_element(1, f), Vector::zeros(4))
    }

    #[test]
    fn force_at_bound_is_active() {
        let c = pendulum_box();
        let (x, u, w) = at_force(300.0);
        assert_eq!(active_indices(&c, &x, &u, &w, 1e-8).unwrap(), vec![0]);
        let (x, u, w) = at_force(-300.0);
        assert_eq!(active_indices(&c, &x, &u, &w, 1e-8).unwrap(), vec![1]);
    }

    #[test]
    fn interior_force_has_no_active_rows() {
        let c = pendulum_box();
        let (x, u, w) = at_force(0.0);
        assert!(active_indices(&c, &x, &u, &w, 1e-8).unwrap().is_empty());
    }

    #[test]
    fn tolerance_boundary_counts_as_active() {
        let c = pendulum_box();
        let (x, u, w) = at_force(300.0 - 1e-9);
        assert_eq!(active_indices(&c, &x, &u, &w, 1e-8).unwrap(), vec![0]);
    }

    #[test]
    fn too_many_active_rows_is_an_error() {
        let dims = Dims {
            state: 1,
            control: 1,
            preview: 1,
        };
        let c = LinearConstraints::new(
            Mat::zeros(2, 1),
            Mat::from_row_slice(2, 1, &[1.0, 2.0]),
            Mat::zeros(2, 1),
            Vector::zeros(2),
        )
        .unwrap();
        let r = active_indices(&c, &Vector::zeros(dims.state), &Vector::zeros(1), &Vector::zeros(1), 1e-8);
        assert!(matches!(r, Err(EneError::TooManyActive { count: 2, .. })));
    }

    #[test]
    fn generator_is_deterministic_and_broadcast() {
        let g = PreviewGenerator {
            sin_amplitude: 0.004,
            rand_amplitude: 0.004,
            offset: 0.002,
            seed: 3,
            channels: vec![1, 3],
            dim: 4,
        };
        let a = g.sequence(10).unwrap();
        let b = g.sequence(10).unwrap();
        assert_eq!(a, b);
        for (k, w) in a.iter().enumerate() {
            assert_eq!(w[0], 0.0);
            assert_eq!(w[2], 0.0);
            assert_eq!(w[1], w[3]);
            let base = 0.004 * (k as f64).sin() + 0.002;
            assert!(w[1] >= base && w[1] < base + 0.004);
        }
    }

    #[test]
    fn quadratic_cost_matches_manual_value() {
        let h = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 4.0, 6.0]));
        let cost = QuadraticCost::centered(h, Mat::identity(2, 2)).unwrap();
        let x = Vector::from_element(1, 1.0);
        let u = Vector::from_element(1, 2.0);
        let w = Vector::from_element(1, -1.0);
        // ½(2·1 + 4·4 + 6·1) = 12
        assert_eq!(cost.stage(&x, &u, &w), 12.0);
        assert_eq!(cost.terminal(&x, &w), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn larger_tolerance_never_deactivates(f in -310.0f64..310.0, t1 in 0.0f64..5.0, t2 in 0.0f64..5.0) {
            let c = pendulum_box();
            let (x, u, w) = at_force(f);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let small = active_indices(&c, &x, &u, &w, lo).unwrap();
            let large = active_indices(&c, &x, &u, &w, hi).unwrap();
            proptest::prop_assert!(small.iter().all(|i| large.contains(i)));
        }
    }
}
