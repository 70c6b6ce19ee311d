//! Concrete plants: the cart with inverted pendulum, and random linear
//! systems with preview used as test fixtures.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{EneError, Result};
use crate::model::{
    CostSpec, Dims, DynamicsJacobians, LinearConstraints, PlantModel, PreviewGenerator, PreviewJacobians,
    PreviewSignal, QuadraticCost,
};
use crate::numerics::{fd_jacobian, hstack, symmetrize, Lcg, Mat, Vector, FD_STEP};
use crate::ocp::OcpProblem;

/// Physical constants of the cart–pendulum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    /// Pendulum mass (kg).
    pub pendulum_mass: f64,
    /// Cart mass (kg).
    pub cart_mass: f64,
    /// Pendulum length (m).
    pub length: f64,
    pub gravity: f64,
    /// Cart viscous damping (N·s/m).
    pub damping: f64,
    /// Sample time (s).
    pub sample_time: f64,
    /// Symmetric bound on the cart force (N).
    pub force_bound: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            pendulum_mass: 1.0,
            cart_mass: 5.0,
            length: 2.0,
            gravity: 9.81,
            damping: 10.0,
            sample_time: 0.1,
            force_bound: 300.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pendulum_mass,
            self.cart_mass,
            self.length,
            self.gravity,
            self.damping,
            self.sample_time,
            self.force_bound,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(EneError::InvalidInput("pendulum parameters must be positive and finite".into()))
        }
    }
}

/// Continuous-time derivative of `[z, ż, θ, θ̇]` under cart force `force` and
/// friction terms `w_z` (cart) and `w_theta` (joint).
pub fn pendulum_continuous(x: &Vector, force: f64, w_z: f64, w_theta: f64, p: &PendulumParams) -> Vector {
    let (m, big_m, l, g) = (p.pendulum_mass, p.cart_mass, p.length, p.gravity);
    let (zdot, theta, thetadot) = (x[1], x[2], x[3]);
    let (s, c) = theta.sin_cos();
    let denom = big_m + m * s * s;
    let numer = force - p.damping * zdot - m * (l * thetadot * thetadot * s - g * s * c) - 2.0 * w_z;
    let zddot = numer / denom;
    let thetaddot = (zddot * c + g * s) / l - w_theta / (m * l * l);
    Vector::from_vec(vec![zdot, zddot, thetadot, thetaddot])
}

/// Jacobian of [`pendulum_continuous`] over `[x; F; w]` (4×9), with the
/// preview vector laid out as `[0, w_z, 0, w_θ]`.
fn pendulum_continuous_jacobian(x: &Vector, force: f64, w: &Vector, p: &PendulumParams) -> Mat {
    let (m, big_m, l, g) = (p.pendulum_mass, p.cart_mass, p.length, p.gravity);
    let (zdot, theta, thetadot) = (x[1], x[2], x[3]);
    let (s, c) = theta.sin_cos();
    let denom = big_m + m * s * s;
    let numer = force - p.damping * zdot - m * (l * thetadot * thetadot * s - g * s * c) - 2.0 * w[1];
    let zddot = numer / denom;

    let d_numer_theta = -m * (l * thetadot * thetadot * c - g * (c * c - s * s));
    let d_denom_theta = 2.0 * m * s * c;
    let dz_dtheta = (d_numer_theta * denom - numer * d_denom_theta) / (denom * denom);
    let dz_dzdot = -p.damping / denom;
    let dz_dthetadot = -2.0 * m * l * thetadot * s / denom;
    let dz_dforce = 1.0 / denom;
    let dz_dwz = -2.0 / denom;

    let mut j = Mat::zeros(4, 9);
    j[(0, 1)] = 1.0;
    j[(1, 1)] = dz_dzdot;
    j[(1, 2)] = dz_dtheta;
    j[(1, 3)] = dz_dthetadot;
    j[(1, 4)] = dz_dforce;
    j[(1, 6)] = dz_dwz;
    j[(2, 3)] = 1.0;
    j[(3, 1)] = c * dz_dzdot / l;
    j[(3, 2)] = (c * dz_dtheta - zddot * s + g * c) / l;
    j[(3, 3)] = c * dz_dthetadot / l;
    j[(3, 4)] = c * dz_dforce / l;
    j[(3, 6)] = c * dz_dwz / l;
    j[(3, 8)] = -1.0 / (m * l * l);
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    Euler,
    Rk4,
}

/// Nominal preview evolution used by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NominalPreview {
    /// `w' = a_x·x + a_w·w`, componentwise.
    Recursion { state_coupling: f64, preview_coupling: f64 },
    /// `w' = w`.
    HoldConstant,
}

impl NominalPreview {
    fn couplings(&self) -> (f64, f64) {
        match *self {
            NominalPreview::Recursion {
                state_coupling,
                preview_coupling,
            } => (state_coupling, preview_coupling),
            NominalPreview::HoldConstant => (0.0, 1.0),
        }
    }
}

impl Default for NominalPreview {
    fn default() -> Self {
        NominalPreview::Recursion {
            state_coupling: -0.008,
            preview_coupling: -0.1,
        }
    }
}

/// Sampled cart–pendulum with a four-channel preview `[0, w_z, 0, w_θ]`.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub params: PendulumParams,
    pub discretization: Discretization,
    pub preview_model: NominalPreview,
    /// Use central differences for every derivative instead of the
    /// hand-derived Jacobians.
    pub finite_difference: bool,
}

impl Pendulum {
    pub fn new(params: PendulumParams, discretization: Discretization, preview_model: NominalPreview) -> Self {
        Self {
            params,
            discretization,
            preview_model,
            finite_difference: false,
        }
    }

    fn rate(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        pendulum_continuous(x, u[0], w[1], w[3], &self.params)
    }

    /// Jacobian of the discrete map over `[x; u; w]`.
    fn stage_jacobian(&self, x: &Vector, u: &Vector, w: &Vector) -> Mat {
        let h = self.params.sample_time;
        let jac = |xs: &Vector| pendulum_continuous_jacobian(xs, u[0], w, &self.params);
        // d[xs; u; w]/dz for a stage point xs whose sensitivity is dxs.
        let lift = |dxs: &Mat| {
            let mut full = Mat::zeros(9, 9);
            full.view_mut((0, 0), (4, 9)).copy_from(dxs);
            full.view_mut((4, 4), (5, 5)).fill_with_identity();
            full
        };
        let mut base = Mat::zeros(4, 9);
        base.view_mut((0, 0), (4, 4)).fill_with_identity();
        match self.discretization {
            Discretization::Euler => base + jac(x) * h,
            Discretization::Rk4 => {
                let k1 = self.rate(x, u, w);
                let d1 = jac(x);
                let x2 = x + &k1 * (h / 2.0);
                let k2 = self.rate(&x2, u, w);
                let d2 = jac(&x2) * lift(&(&base + &d1 * (h / 2.0)));
                let x3 = x + &k2 * (h / 2.0);
                let k3 = self.rate(&x3, u, w);
                let d3 = jac(&x3) * lift(&(&base + &d2 * (h / 2.0)));
                let x4 = x + &k3 * h;
                let d4 = jac(&x4) * lift(&(&base + &d3 * h));
                base + (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (h / 6.0)
            }
        }
    }
}

impl PlantModel for Pendulum {
    fn dims(&self) -> Dims {
        Dims {
            state: 4,
            control: 1,
            preview: 4,
        }
    }

    fn dynamics(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        let h = self.params.sample_time;
        match self.discretization {
            Discretization::Euler => x + self.rate(x, u, w) * h,
            Discretization::Rk4 => {
                let k1 = self.rate(x, u, w);
                let k2 = self.rate(&(x + &k1 * (h / 2.0)), u, w);
                let k3 = self.rate(&(x + &k2 * (h / 2.0)), u, w);
                let k4 = self.rate(&(x + &k3 * h), u, w);
                x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        }
    }

    fn preview(&self, x: &Vector, w: &Vector) -> Vector {
        let (ax, aw) = self.preview_model.couplings();
        x * ax + w * aw
    }

    fn dynamics_jacobians(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<DynamicsJacobians> {
        let j = if self.finite_difference {
            let z = crate::numerics::concat(&[x, u, w]);
            let d = self.dims();
            fd_jacobian(
                |z| {
                    let (x, u, w) = d.split_stage(z);
                    self.dynamics(&x, &u, &w)
                },
                &z,
                FD_STEP,
            )?
        } else {
            self.stage_jacobian(x, u, w)
        };
        Ok(DynamicsJacobians {
            fx: j.columns(0, 4).into_owned(),
            fu: j.columns(4, 1).into_owned(),
            fw: j.columns(5, 4).into_owned(),
        })
    }

    fn preview_jacobians(&self, _x: &Vector, _w: &Vector) -> Result<PreviewJacobians> {
        let (ax, aw) = self.preview_model.couplings();
        Ok(PreviewJacobians {
            gx: Mat::identity(4, 4) * ax,
            gw: Mat::identity(4, 4) * aw,
        })
    }

    fn preview_affine(&self) -> bool {
        true
    }

    /// Central differences of the weighted Jacobian `Jᵀ·weights`.
    fn dynamics_curvature(&self, x: &Vector, u: &Vector, w: &Vector, weights: &Vector) -> Result<Mat> {
        let d = self.dims();
        let z = crate::numerics::concat(&[x, u, w]);
        let h = fd_jacobian(
            |z| {
                let (x, u, w) = d.split_stage(z);
                let j = self.dynamics_jacobians(&x, &u, &w).expect("pendulum Jacobian is infallible");
                hstack(&[&j.fx, &j.fu, &j.fw]).transpose() * weights
            },
            &z,
            FD_STEP,
        )?;
        Ok(symmetrize(&h))
    }
}

/// Tracking weights on `y = [z, θ]` and the force penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub position: f64,
    pub angle: f64,
    pub force: f64,
    /// Multiplier on the output weights for the terminal cost.
    pub terminal_scale: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            position: 10.0,
            angle: 50.0,
            force: 0.001,
            terminal_scale: 10.0,
        }
    }
}

/// Actual preview profile `a·sin(k) + b·rand(k) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub sin_amplitude: f64,
    pub rand_amplitude: f64,
    pub offset: f64,
    pub seed: u64,
}

/// The pendulum experiment: nominal problem, perturbation and actual preview.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub name: String,
    pub params: PendulumParams,
    pub discretization: Discretization,
    pub horizon: usize,
    pub x0: Vec<f64>,
    pub w0: Vec<f64>,
    pub preview_model: NominalPreview,
    pub dx0: Vec<f64>,
    pub generator: GeneratorSpec,
    pub weights: CostWeights,
    /// Output reference `[z, θ]`.
    pub reference: Vec<f64>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::small()
    }
}

pub const DEFAULT_SEED: u64 = 1;

impl ScenarioSpec {
    pub fn small() -> Self {
        Self {
            name: "small".into(),
            params: PendulumParams::default(),
            discretization: Discretization::Euler,
            horizon: 35,
            x0: vec![0.0, 0.0, -std::f64::consts::PI, 0.0],
            w0: vec![0.0, 0.1, 0.0, 0.1],
            preview_model: NominalPreview::default(),
            dx0: vec![0.01; 4],
            generator: GeneratorSpec {
                sin_amplitude: 0.004,
                rand_amplitude: 0.004,
                offset: 0.002,
                seed: DEFAULT_SEED,
            },
            weights: CostWeights::default(),
            reference: vec![0.0, 0.0],
        }
    }

    pub fn large() -> Self {
        Self {
            name: "large".into(),
            dx0: vec![0.2; 4],
            generator: GeneratorSpec {
                sin_amplitude: 0.015,
                rand_amplitude: 0.015,
                offset: 0.01,
                seed: DEFAULT_SEED,
            },
            ..Self::small()
        }
    }

    /// The scenario used to compare nominal preview models.
    pub fn preview_sweep() -> Self {
        Self {
            name: "preview-sweep".into(),
            generator: GeneratorSpec {
                sin_amplitude: 0.008,
                rand_amplitude: 0.008,
                offset: 0.004,
                seed: DEFAULT_SEED,
            },
            ..Self::small()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generator.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.horizon == 0 {
            return Err(EneError::InvalidInput("horizon must be at least 1".into()));
        }
        for (name, v, len) in [
            ("x0", &self.x0, 4),
            ("w0", &self.w0, 4),
            ("dx0", &self.dx0, 4),
            ("reference", &self.reference, 2),
        ] {
            if v.len() != len {
                return Err(EneError::InvalidInput(format!("{name} needs {len} entries, got {}", v.len())));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(EneError::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        let w = &self.weights;
        if !(w.position >= 0.0 && w.angle >= 0.0 && w.force > 0.0 && w.terminal_scale >= 0.0) {
            return Err(EneError::InvalidInput("cost weights must be non-negative with a positive force weight".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Pendulum {
        Pendulum::new(self.params, self.discretization, self.preview_model)
    }

    pub fn constraints(&self) -> LinearConstraints {
        let b = self.params.force_bound;
        LinearConstraints::control_box(
            Pendulum::new(self.params, self.discretization, self.preview_model).dims(),
            &Vector::from_element(1, -b),
            &Vector::from_element(1, b),
        )
        .expect("positive force bound gives a valid box")
    }

    /// `φ = δyᵀ diag(q_z, q_θ) δy + r·F²`, `ψ = scale · δyᵀ diag(q_z, q_θ) δy`.
    pub fn cost(&self) -> QuadraticCost {
        let w = &self.weights;
        let mut stage = Mat::zeros(9, 9);
        stage[(0, 0)] = 2.0 * w.position;
        stage[(2, 2)] = 2.0 * w.angle;
        stage[(4, 4)] = 2.0 * w.force;
        let mut terminal = Mat::zeros(8, 8);
        terminal[(0, 0)] = 2.0 * w.position * w.terminal_scale;
        terminal[(2, 2)] = 2.0 * w.angle * w.terminal_scale;
        let mut stage_ref = Vector::zeros(9);
        stage_ref[0] = self.reference[0];
        stage_ref[2] = self.reference[1];
        let mut terminal_ref = Vector::zeros(8);
        terminal_ref[0] = self.reference[0];
        terminal_ref[2] = self.reference[1];
        QuadraticCost::new(stage, stage_ref, terminal, terminal_ref).expect("consistent cost shapes")
    }

    pub fn problem(&self) -> Result<OcpProblem> {
        self.validate()?;
        OcpProblem::new(
            self.horizon,
            Arc::new(self.model()),
            Arc::new(self.constraints()),
            Arc::new(self.cost()),
            Vector::from_vec(self.x0.clone()),
            Vector::from_vec(self.w0.clone()),
        )
    }

    pub fn initial_perturbation(&self) -> Vector {
        Vector::from_vec(self.dx0.clone())
    }

    pub fn generator(&self) -> PreviewGenerator {
        PreviewGenerator {
            sin_amplitude: self.generator.sin_amplitude,
            rand_amplitude: self.generator.rand_amplitude,
            offset: self.generator.offset,
            seed: self.generator.seed,
            channels: vec![1, 3],
            dim: 4,
        }
    }

    pub fn actual_preview(&self) -> PreviewSignal {
        PreviewSignal::Generator(self.generator())
    }

    /// `y = [z, θ]`.
    pub fn output(x: &Vector) -> Vector {
        Vector::from_vec(vec![x[0], x[2]])
    }

    pub fn reference(&self) -> Vector {
        Vector::from_vec(self.reference.clone())
    }
}

/// `x' = A x + B u + E w`, `w' = G x + H w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: Mat,
    pub b: Mat,
    pub e: Mat,
    pub g: Mat,
    pub h: Mat,
}

impl LinearModel {
    pub fn new(a: Mat, b: Mat, e: Mat, g: Mat, h: Mat) -> Result<Self> {
        let (n, m, p) = (a.nrows(), b.ncols(), h.nrows());
        let ok = a.is_square()
            && b.nrows() == n
            && e.shape() == (n, p)
            && g.shape() == (p, n)
            && h.shape() == (p, p);
        if !ok {
            return Err(EneError::DimensionMismatch(format!(
                "linear model blocks inconsistent with n={n}, m={m}, n_w={p}"
            )));
        }
        Ok(Self { a, b, e, g, h })
    }
}

impl PlantModel for LinearModel {
    fn dims(&self) -> Dims {
        Dims {
            state: self.a.nrows(),
            control: self.b.ncols(),
            preview: self.h.nrows(),
        }
    }

    fn dynamics(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        &self.a * x + &self.b * u + &self.e * w
    }

    fn preview(&self, x: &Vector, w: &Vector) -> Vector {
        &self.g * x + &self.h * w
    }

    fn dynamics_jacobians(&self, _x: &Vector, _u: &Vector, _w: &Vector) -> Result<DynamicsJacobians> {
        Ok(DynamicsJacobians {
            fx: self.a.clone(),
            fu: self.b.clone(),
            fw: self.e.clone(),
        })
    }

    fn preview_jacobians(&self, _x: &Vector, _w: &Vector) -> Result<PreviewJacobians> {
        Ok(PreviewJacobians {
            gx: self.g.clone(),
            gw: self.h.clone(),
        })
    }

    fn dynamics_affine(&self) -> bool {
        true
    }

    fn preview_affine(&self) -> bool {
        true
    }
}

/// Options for [`lqr_preview_system`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FixtureOptions {
    /// Zero `E`, `G`, `H` and every cost cross term, so the preview is
    /// decoupled from the plant and the stage cost is block diagonal.
    pub decoupled: bool,
}

/// A random linear plant with preview and a convex quadratic cost.
#[derive(Debug, Clone)]
pub struct LqrFixture {
    pub model: LinearModel,
    pub cost: QuadraticCost,
}

fn random_matrix(rng: &mut Lcg, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

fn scaled_to(m: Mat, frobenius: f64) -> Mat {
    let norm = m.norm();
    if norm == 0.0 {
        m
    } else {
        m * (frobenius / norm)
    }
}

/// Random stable system: `‖A‖_F = 0.9` and `‖H‖_F = 0.8` bound the spectral
/// radii, `R ≻ 0`, and the terminal cost has no state–preview cross term.
pub fn lqr_preview_system(n: usize, m: usize, seed: u64, opts: FixtureOptions) -> Result<LqrFixture> {
    if !(1..=4).contains(&n) || !(1..=2).contains(&m) {
        return Err(EneError::InvalidInput(format!("fixture needs 1≤n≤4 and 1≤m≤2, got n={n}, m={m}")));
    }
    let p = n;
    let mut rng = Lcg::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(17));
    let a = scaled_to(random_matrix(&mut rng, n, n), 0.9);
    let b = random_matrix(&mut rng, n, m);
    let (e, g, h) = if opts.decoupled {
        (Mat::zeros(n, p), Mat::zeros(p, n), Mat::zeros(p, p))
    } else {
        (
            random_matrix(&mut rng, n, p) * 0.5,
            random_matrix(&mut rng, p, n) * 0.2,
            scaled_to(random_matrix(&mut rng, p, p), 0.8),
        )
    };
    let model = LinearModel::new(a, b, e, g, h)?;

    let size = n + m + p;
    let factor = random_matrix(&mut rng, size, size);
    let mut stage = factor.transpose() * &factor * (1.0 / size as f64);
    for i in n..n + m {
        stage[(i, i)] += 0.5;
    }
    for i in 0..n {
        stage[(i, i)] += 0.1;
    }
    if opts.decoupled {
        for i in 0..size {
            for j in 0..size {
                let group = |k: usize| usize::from(k >= n) + usize::from(k >= n + m);
                if group(i) != group(j) {
                    stage[(i, j)] = 0.0;
                }
            }
        }
    }
    let qf = {
        let f = random_matrix(&mut rng, n, n);
        f.transpose() * f + Mat::identity(n, n) * 0.1
    };
    let qw = {
        let f = random_matrix(&mut rng, p, p);
        f.transpose() * f * 0.1
    };
    let mut terminal = Mat::zeros(n + p, n + p);
    terminal.view_mut((0, 0), (n, n)).copy_from(&qf);
    terminal.view_mut((n, n), (p, p)).copy_from(&qw);
    let cost = QuadraticCost::centered(symmetrize(&stage), terminal)?;
    Ok(LqrFixture { model, cost })
}

/// Bounds `|uᵢ + cₓᵢᵀx + c_wᵢᵀw| ≤ bound` on a fixture, with small random
/// state and preview couplings.
pub fn coupled_box_constraints(dims: Dims, bound: f64, seed: u64) -> Result<LinearConstraints> {
    let mut rng = Lcg::new(seed ^ 0xc0ff_ee00);
    let m = dims.control;
    let cx = random_matrix(&mut rng, m, dims.state) * 0.1;
    let cw = random_matrix(&mut rng, m, dims.preview) * 0.1;
    let eye = Mat::identity(m, m);
    LinearConstraints::new(
        crate::numerics::vstack(&[&cx, &(-&cx)]),
        crate::numerics::vstack(&[&eye, &(-&eye)]),
        crate::numerics::vstack(&[&cw, &(-&cw)]),
        Vector::from_element(2 * m, -bound),
    )
}

/// A scalar problem from explicit coefficients, for hand-checked cases.
pub fn scalar_system(a: f64, b: f64, q: f64, r: f64, qf: f64) -> LqrFixture {
    let one = |v: f64| Mat::from_element(1, 1, v);
    let model = LinearModel::new(one(a), one(b), one(0.0), one(0.0), one(0.0)).expect("scalar blocks");
    let mut stage = Mat::zeros(3, 3);
    stage[(0, 0)] = q;
    stage[(1, 1)] = r;
    let mut terminal = Mat::zeros(2, 2);
    terminal[(0, 0)] = qf;
    let cost = QuadraticCost::centered(stage, terminal).expect("scalar cost");
    LqrFixture { model, cost }
}

impl LqrFixture {
    pub fn problem(
        &self,
        horizon: usize,
        constraints: LinearConstraints,
        x0: Vector,
        w0: Vector,
    ) -> Result<OcpProblem> {
        OcpProblem::new(
            horizon,
            Arc::new(self.model.clone()),
            Arc::new(constraints),
            Arc::new(self.cost.clone()) as Arc<dyn CostSpec>,
            x0,
            w0,
        )
    }

    pub fn dims(&self) -> Dims {
        self.model.dims()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn hanging_equilibrium_is_stationary() {
        let d = pendulum_continuous(&Vector::from_vec(vec![0.0, 0.0, -PI, 0.0]), 0.0, 0.0, 0.0, &PendulumParams::default());
        assert!(d.amax() < 1e-12);
    }

    #[test]
    fn horizontal_pole_falls_at_g_over_l() {
        let d = pendulum_continuous(&Vector::from_vec(vec![0.0, 0.0, PI / 2.0, 0.0]), 0.0, 0.0, 0.0, &PendulumParams::default());
        assert!(d[1].abs() < 1e-12);
        assert!((d[3] - 4.905).abs() < 1e-12);
    }

    #[test]
    fn force_enters_affinely() {
        let p = PendulumParams::default();
        let x = Vector::from_vec(vec![0.0, 0.0, 0.0, 0.0]);
        let base = pendulum_continuous(&x, 0.0, 0.0, 0.0, &p)[1];
        let one = pendulum_continuous(&x, 7.0, 0.0, 0.0, &p)[1] - base;
        let two = pendulum_continuous(&x, 14.0, 0.0, 0.0, &p)[1] - base;
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn euler_step_by_hand() {
        let model = ScenarioSpec::small().model();
        let x = Vector::from_vec(vec![0.0, 1.0, -PI, 0.0]);
        let next = model.dynamics(&x, &Vector::zeros(1), &Vector::zeros(4));
        assert!((next[0] - 0.1).abs() < 1e-12);
        assert!((next[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn preview_friction_slope() {
        let p = PendulumParams::default();
        let x = Vector::from_vec(vec![0.1, 0.2, 0.7, -0.3]);
        let eps = 1e-6;
        let a = pendulum_continuous(&x, 3.0, 0.0, 0.0, &p)[1];
        let b = pendulum_continuous(&x, 3.0, eps, 0.0, &p)[1];
        let expected = -2.0 / (p.cart_mass + p.pendulum_mass * x[2].sin().powi(2));
        assert!(((b - a) / eps - expected).abs() < 1e-6);
    }

    #[test]
    fn fixtures_are_deterministic() {
        let a = lqr_preview_system(3, 2, 9, FixtureOptions::default()).unwrap();
        let b = lqr_preview_system(3, 2, 9, FixtureOptions::default()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.cost, b.cost);
    }
}
