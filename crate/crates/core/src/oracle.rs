//! Brute-force reference solvers used to validate the recursions.
//!
//! Nothing here shares code with the backward sweeps: the perturbation
//! problem is assembled as one dense equality-constrained QP, LQR gains come
//! from the textbook Riccati iteration, and costates come from forward
//! sensitivity products.

use serde::{Deserialize, Serialize};

use crate::ene::HamiltonianBlocks;
use crate::error::{EneError, Result};
use crate::numerics::{select_rows, solve_symmetric_indefinite, Mat, Vector};
use crate::ocp::Linearization;

/// Largest stacked KKT system the oracle will assemble.
pub const MAX_QP_DIMENSION: usize = 2000;

/// Minimizer of the second-variation QP with its multipliers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackedQpSolution {
    pub dx: Vec<Vector>,
    pub du: Vec<Vector>,
    pub dw: Vec<Vector>,
    /// Multipliers of the dynamics rows, indexed like `λ(k+1)` (`dlambda[0]`
    /// belongs to the row that defines `δx(1)`).
    pub dlambda: Vec<Vector>,
    pub dlambda_bar: Vec<Vector>,
    pub dmu: Vec<Vector>,
    /// Objective value at the minimizer.
    pub objective: f64,
}

/// Optional first-order terms of the QP.
#[derive(Debug, Clone, Copy, Default)]
pub struct QpLinearTerms<'a> {
    /// `Σ H_u(k)ᵀ δu(k)` added to the objective.
    pub h_u: Option<&'a [Vector]>,
    /// Right-hand side `−Cᵃ(k)` on the active rows instead of zero.
    pub restore_constraints: bool,
}

struct Layout {
    n: usize,
    m: usize,
    p: usize,
    horizon: usize,
}

impl Layout {
    fn x(&self, k: usize) -> usize {
        k * self.n
    }
    fn u(&self, k: usize) -> usize {
        (self.horizon + 1) * self.n + k * self.m
    }
    fn w(&self, k: usize) -> usize {
        (self.horizon + 1) * self.n + self.horizon * self.m + k * self.p
    }
    fn size(&self) -> usize {
        (self.horizon + 1) * (self.n + self.p) + self.horizon * self.m
    }
}

/// The dense objective `½zᵀPz + qᵀz` over `z = [δx(0..N); δu; δw(0..N)]`.
fn objective(lin: &Linearization, blocks: &HamiltonianBlocks, layout: &Layout, h_u: Option<&[Vector]>) -> (Mat, Vector) {
    let (n, m, p) = (layout.n, layout.m, layout.p);
    let size = layout.size();
    let mut hess = Mat::zeros(size, size);
    let mut lin_term = Vector::zeros(size);
    for k in 0..layout.horizon {
        let starts = [(layout.x(k), 0, n), (layout.u(k), n, m), (layout.w(k), n + m, p)];
        let h = &blocks.stages[k];
        for &(r, hr, rl) in &starts {
            for &(c, hc, cl) in &starts {
                let mut view = hess.view_mut((r, c), (rl, cl));
                view += h.view((hr, hc), (rl, cl));
            }
        }
        if let Some(h_u) = h_u {
            lin_term.rows_mut(layout.u(k), m).copy_from(&h_u[k]);
        }
    }
    let t = &lin.terminal_hessian;
    let last = layout.horizon;
    let starts = [(layout.x(last), 0, n), (layout.w(last), n, p)];
    for &(r, hr, rl) in &starts {
        for &(c, hc, cl) in &starts {
            let mut view = hess.view_mut((r, c), (rl, cl));
            view += t.view((hr, hc), (rl, cl));
        }
    }
    (hess, lin_term)
}

/// Solve the perturbation QP with fixed active sets as one dense KKT system.
pub fn solve_stacked_qp(
    lin: &Linearization,
    blocks: &HamiltonianBlocks,
    active: &[Vec<usize>],
    dx0: &Vector,
    dw0: &Vector,
    terms: QpLinearTerms<'_>,
) -> Result<StackedQpSolution> {
    let d = lin.dims;
    let layout = Layout {
        n: d.state,
        m: d.control,
        p: d.preview,
        horizon: lin.horizon(),
    };
    let (n, m, p, horizon) = (layout.n, layout.m, layout.p, layout.horizon);
    let active_rows: usize = active.iter().map(|a| a.len()).sum();
    let eq_rows = (n + p) * (horizon + 1) + active_rows;
    let size = layout.size();
    if size + eq_rows > MAX_QP_DIMENSION {
        return Err(EneError::InvalidInput(format!(
            "stacked QP of dimension {} exceeds {MAX_QP_DIMENSION}",
            size + eq_rows
        )));
    }
    let (hess, q) = objective(lin, blocks, &layout, terms.h_u);

    let mut a = Mat::zeros(eq_rows, size);
    let mut b = Vector::zeros(eq_rows);
    let mut row = 0;
    a.view_mut((row, layout.x(0)), (n, n)).fill_with_identity();
    b.rows_mut(row, n).copy_from(dx0);
    row += n;
    a.view_mut((row, layout.w(0)), (p, p)).fill_with_identity();
    b.rows_mut(row, p).copy_from(dw0);
    row += p;
    let dyn_row0 = row;
    for k in 0..horizon {
        let s = &lin.steps[k];
        a.view_mut((row, layout.x(k)), (n, n)).copy_from(&s.dynamics.fx);
        a.view_mut((row, layout.u(k)), (n, m)).copy_from(&s.dynamics.fu);
        a.view_mut((row, layout.w(k)), (n, p)).copy_from(&s.dynamics.fw);
        a.view_mut((row, layout.x(k + 1)), (n, n)).fill_with_identity();
        let mut neg = a.view_mut((row, layout.x(k + 1)), (n, n));
        neg *= -1.0;
        row += n;
        a.view_mut((row, layout.x(k)), (p, n)).copy_from(&s.preview.gx);
        a.view_mut((row, layout.w(k)), (p, p)).copy_from(&s.preview.gw);
        a.view_mut((row, layout.w(k + 1)), (p, p)).fill_with_identity();
        let mut neg = a.view_mut((row, layout.w(k + 1)), (p, p));
        neg *= -1.0;
        row += p;
    }
    let mut active_row0 = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let s = &lin.steps[k];
        let rows = &active[k];
        active_row0.push(row);
        let la = rows.len();
        if la == 0 {
            continue;
        }
        a.view_mut((row, layout.x(k)), (la, n))
            .copy_from(&select_rows(&s.constraints.cx, rows));
        a.view_mut((row, layout.u(k)), (la, m))
            .copy_from(&select_rows(&s.constraints.cu, rows));
        a.view_mut((row, layout.w(k)), (la, p))
            .copy_from(&select_rows(&s.constraints.cw, rows));
        if terms.restore_constraints {
            for (j, &i) in rows.iter().enumerate() {
                b[row + j] = -s.constraint_values[i];
            }
        }
        row += la;
    }

    let total = size + eq_rows;
    let mut kkt = Mat::zeros(total, total);
    kkt.view_mut((0, 0), (size, size)).copy_from(&hess);
    kkt.view_mut((0, size), (size, eq_rows)).copy_from(&a.transpose());
    kkt.view_mut((size, 0), (eq_rows, size)).copy_from(&a);
    let mut rhs = Mat::zeros(total, 1);
    rhs.view_mut((0, 0), (size, 1)).copy_from(&(-&q));
    rhs.view_mut((size, 0), (eq_rows, 1)).copy_from(&b);
    let sol = solve_symmetric_indefinite(&kkt, &rhs)?;
    let z = sol.view((0, 0), (size, 1)).column(0).into_owned();
    let nu = sol.view((size, 0), (eq_rows, 1)).column(0).into_owned();

    let objective_value = 0.5 * z.dot(&(&hess * &z)) + q.dot(&z);
    let piece = |v: &Vector, start: usize, len: usize| v.rows(start, len).into_owned();
    Ok(StackedQpSolution {
        dx: (0..=horizon).map(|k| piece(&z, layout.x(k), n)).collect(),
        du: (0..horizon).map(|k| piece(&z, layout.u(k), m)).collect(),
        dw: (0..=horizon).map(|k| piece(&z, layout.w(k), p)).collect(),
        dlambda: (0..horizon)
            .map(|k| piece(&nu, dyn_row0 + k * (n + p), n))
            .collect(),
        dlambda_bar: (0..horizon)
            .map(|k| piece(&nu, dyn_row0 + k * (n + p) + n, p))
            .collect(),
        dmu: (0..horizon)
            .map(|k| piece(&nu, active_row0[k], active[k].len()))
            .collect(),
        objective: objective_value,
    })
}

/// Value of the QP objective at an arbitrary δ-trajectory.
pub fn qp_objective(
    lin: &Linearization,
    blocks: &HamiltonianBlocks,
    dx: &[Vector],
    du: &[Vector],
    dw: &[Vector],
    h_u: Option<&[Vector]>,
) -> f64 {
    let d = lin.dims;
    let layout = Layout {
        n: d.state,
        m: d.control,
        p: d.preview,
        horizon: lin.horizon(),
    };
    let (hess, q) = objective(lin, blocks, &layout, h_u);
    let mut z = Vector::zeros(layout.size());
    for k in 0..=layout.horizon {
        z.rows_mut(layout.x(k), layout.n).copy_from(&dx[k]);
        z.rows_mut(layout.w(k), layout.p).copy_from(&dw[k]);
    }
    for k in 0..layout.horizon {
        z.rows_mut(layout.u(k), layout.m).copy_from(&du[k]);
    }
    0.5 * z.dot(&(&hess * &z)) + q.dot(&z)
}

/// Finite-horizon LQR gains and cost-to-go matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LqrSolution {
    /// `K(k)` with the convention `δu = −K(k)δx`.
    pub gains: Vec<Mat>,
    /// `P(0..N)`, with `P(N) = Q_f`.
    pub cost_to_go: Vec<Mat>,
}

/// `P(k) = Q + AᵀP'A − AᵀP'B(R + BᵀP'B)⁻¹BᵀP'A`,
/// `K(k) = (R + BᵀP'B)⁻¹BᵀP'A`.
pub fn discrete_lqr(a: &Mat, b: &Mat, q: &Mat, r: &Mat, qf: &Mat, horizon: usize) -> Result<LqrSolution> {
    let mut p = qf.clone();
    let mut cost_to_go = vec![p.clone()];
    let mut gains = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let btp = b.transpose() * &p;
        let gram = r + &btp * b;
        let k = gram
            .clone()
            .lu()
            .solve(&(&btp * a))
            .ok_or(EneError::SingularMatrix { index: 0, pivot: 0.0 })?;
        p = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        gains.push(k);
        cost_to_go.push(p.clone());
    }
    gains.reverse();
    cost_to_go.reverse();
    Ok(LqrSolution { gains, cost_to_go })
}

/// Costates of an unconstrained trajectory as gradients of the cost-to-go,
/// computed from forward products of the transition matrices
/// `Φ = [[fₓ, f_w], [gₓ, g_w]]`. Returns `(λ, λ̄)` for `k = 0 … N`.
pub fn forward_sensitivity_costates(lin: &Linearization) -> (Vec<Vector>, Vec<Vector>) {
    let d = lin.dims;
    let (n, p) = (d.state, d.preview);
    let horizon = lin.horizon();
    let transition = |k: usize| {
        let s = &lin.steps[k];
        let mut t = Mat::zeros(n + p, n + p);
        t.view_mut((0, 0), (n, n)).copy_from(&s.dynamics.fx);
        t.view_mut((0, n), (n, p)).copy_from(&s.dynamics.fw);
        t.view_mut((n, 0), (p, n)).copy_from(&s.preview.gx);
        t.view_mut((n, n), (p, p)).copy_from(&s.preview.gw);
        t
    };
    let stage_grad = |k: usize| {
        let s = &lin.steps[k];
        crate::numerics::concat(&[&s.phi_x(), &s.phi_w()])
    };
    let mut lambda = Vec::with_capacity(horizon + 1);
    let mut lambda_bar = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        // Φ(j, k) = ∂(x_j, w_j)/∂(x_k, w_k)
        let mut phi = Mat::identity(n + p, n + p);
        let mut grad = Vector::zeros(n + p);
        for j in k..horizon {
            grad += phi.transpose() * stage_grad(j);
            phi = transition(j) * phi;
        }
        grad += phi.transpose() * &lin.terminal_gradient;
        lambda.push(grad.rows(0, n).into_owned());
        lambda_bar.push(grad.rows(n, p).into_owned());
    }
    (lambda, lambda_bar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_lqr_closed_form() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 0.1]);
        let q = Mat::identity(2, 2);
        let r = Mat::from_element(1, 1, 0.5);
        let qf = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let sol = discrete_lqr(&a, &b, &q, &r, &qf, 1).unwrap();
        let expected = (&r + b.transpose() * &qf * &b).try_inverse().unwrap() * b.transpose() * &qf * &a;
        assert!((&sol.gains[0] - expected).amax() < 1e-14);
    }

    #[test]
    fn scalar_two_step_lqr_by_hand() {
        let one = Mat::from_element(1, 1, 1.0);
        let sol = discrete_lqr(&one, &one, &one, &one, &one, 2).unwrap();
        assert!((sol.cost_to_go[1][(0, 0)] - 1.5).abs() < 1e-15);
        assert!((sol.gains[0][(0, 0)] - 0.6).abs() < 1e-15);
        assert!((sol.gains[1][(0, 0)] - 0.5).abs() < 1e-15);
    }
}
