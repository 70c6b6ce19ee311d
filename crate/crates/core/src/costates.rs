//! Backward sweep for the dynamics, preview and constraint multipliers.

use serde::{Deserialize, Serialize};

use crate::error::{EneError, Result};
use crate::numerics::{select_rows, solve_symmetric_indefinite, Mat, Vector};
use crate::ocp::{linearize, Linearization, OcpProblem, Trajectory};

/// Multipliers along a trajectory, all stored as column vectors.
///
/// `mu[k]` holds one entry per active constraint at step `k`, in the order of
/// the trajectory's active set, and is empty at inactive steps. `h_u[k]` is
/// the control gradient of the Hamiltonian, which vanishes at optimal
/// nominals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostateTrajectory {
    pub lambda: Vec<Vector>,
    pub lambda_bar: Vec<Vector>,
    pub mu: Vec<Vector>,
    pub h_u: Vec<Vector>,
}

impl CostateTrajectory {
    pub fn horizon(&self) -> usize {
        self.mu.len()
    }

    /// `μ(k)` scattered into a length-`l` vector (zeros at inactive rows).
    pub fn mu_full(&self, k: usize, active: &[usize], count: usize) -> Vector {
        let mut full = Vector::zeros(count);
        for (j, &i) in active.iter().enumerate() {
            full[i] = self.mu[k][j];
        }
        full
    }

    /// Largest `‖H_u(k)‖∞`.
    pub fn stationarity_norm(&self) -> f64 {
        self.h_u
            .iter()
            .map(|h| h.amax())
            .fold(0.0, f64::max)
    }
}

/// Compute costates for `trajectory` under its recorded active sets.
pub fn backward_costates(problem: &OcpProblem, trajectory: &Trajectory) -> Result<CostateTrajectory> {
    let lin = linearize(problem, trajectory)?;
    costates_from_linearization(&lin, &trajectory.active)
}

/// Costate sweep over precomputed derivatives.
///
/// For `k = N−1 … 0`:
/// `μ = −(Cᵤᵃ Cᵤᵃᵀ)⁻¹ Cᵤᵃ (φᵤ + fᵤᵀλ')`,
/// `λ = φₓ + fₓᵀλ' + gₓᵀλ̄' + Cₓᵃᵀμ`,
/// `λ̄ = φ_w + f_wᵀλ' + g_wᵀλ̄' + C_wᵃᵀμ`,
/// starting from `λ(N) = ψₓ`, `λ̄(N) = ψ_w`.
pub fn costates_from_linearization(lin: &Linearization, active: &[Vec<usize>]) -> Result<CostateTrajectory> {
    let horizon = lin.horizon();
    if active.len() != horizon {
        return Err(EneError::DimensionMismatch(format!(
            "{} active sets for horizon {horizon}",
            active.len()
        )));
    }
    let dims = lin.dims;
    let mut lambda = vec![Vector::zeros(dims.state); horizon + 1];
    let mut lambda_bar = vec![Vector::zeros(dims.preview); horizon + 1];
    let mut mu = vec![Vector::zeros(0); horizon];
    let mut h_u = vec![Vector::zeros(dims.control); horizon];

    lambda[horizon] = lin.psi_x();
    lambda_bar[horizon] = lin.psi_w();

    for k in (0..horizon).rev() {
        let step = &lin.steps[k];
        let (next_l, next_lb) = (lambda[k + 1].clone(), lambda_bar[k + 1].clone());
        let (next_l, next_lb) = (&next_l, &next_lb);
        let f = &step.dynamics;
        let g = &step.preview;
        let stationarity = step.phi_u() + f.fu.transpose() * next_l;

        let rows = &active[k];
        if rows.len() > dims.control {
            return Err(EneError::TooManyActive {
                step: k,
                count: rows.len(),
                control_dim: dims.control,
            });
        }
        let (cx, cu, cw) = (
            select_rows(&step.constraints.cx, rows),
            select_rows(&step.constraints.cu, rows),
            select_rows(&step.constraints.cw, rows),
        );
        let mu_k = if rows.is_empty() {
            Vector::zeros(0)
        } else {
            let gram = &cu * cu.transpose();
            let rhs = Mat::from_column_slice(rows.len(), 1, (&cu * &stationarity).as_slice());
            let sol = solve_symmetric_indefinite(&gram, &rhs).map_err(|e| match e {
                EneError::SingularMatrix { .. } => EneError::RankDeficientActiveSet { step: k },
                other => other,
            })?;
            -sol.column(0).into_owned()
        };

        h_u[k] = &stationarity + cu.transpose() * &mu_k;
        lambda[k] = step.phi_x() + f.fx.transpose() * next_l + g.gx.transpose() * next_lb + cx.transpose() * &mu_k;
        lambda_bar[k] =
            step.phi_w() + f.fw.transpose() * next_l + g.gw.transpose() * next_lb + cw.transpose() * &mu_k;
        if !(lambda[k].iter().chain(lambda_bar[k].iter()).all(|v| v.is_finite())) {
            return Err(EneError::NonFinite {
                context: format!("costates at step {k}"),
            });
        }
        mu[k] = mu_k;
    }

    Ok(CostateTrajectory {
        lambda,
        lambda_bar,
        mu,
        h_u,
    })
}
