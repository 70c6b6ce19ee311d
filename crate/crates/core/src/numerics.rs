//! Dense linear algebra and finite-difference helpers shared by every module.
//!
//! Matrices and vectors are `nalgebra` dynamic types. The pieces that matter
//! for correctness live here: a Bunch–Kaufman `LDLᵀ` factorization for the
//! symmetric indefinite KKT blocks, a pivot-checked Cholesky test, and central
//! differences used both as derivative fallbacks and as test oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{EneError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative residual target for [`solve_symmetric_indefinite`].
pub const RTOL_SOLVE: f64 = 1e-10;
/// Pivots below `PIVOT_FLOOR * ‖A‖∞` are treated as singular.
pub const PIVOT_FLOOR: f64 = 1e-12;
/// Absolute symmetry tolerance accepted by [`is_positive_definite`].
pub const SYM_TOL: f64 = 1e-9;
/// Central-difference step for first derivatives.
pub const FD_STEP: f64 = 1e-5;
/// Step for second differences of scalar functions.
pub const FD_STEP_SECOND: f64 = 1e-4;
/// Cholesky pivots must exceed this to count as positive definite.
pub const PD_PIVOT_MIN: f64 = 1e-10;

/// Bunch–Kaufman growth constant `(1 + √17) / 8`.
const BK_ALPHA: f64 = 0.640_388_203_202_208_4;

/// Infinity norm (max absolute row sum).
pub fn norm_inf(a: &Mat) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry; zero for empty matrices.
pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_abs_vec(v: &Vector) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest `|A_ij − A_ji|`.
pub fn asymmetry(a: &Mat) -> f64 {
    if a.nrows() != a.ncols() {
        return f64::INFINITY;
    }
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Stack matrices with equal column counts on top of each other.
pub fn vstack(blocks: &[&Mat]) -> Mat {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Place matrices with equal row counts side by side.
pub fn hstack(blocks: &[&Mat]) -> Mat {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn concat(parts: &[&Vector]) -> Vector {
    let len: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = Vector::zeros(len);
    let mut i = 0;
    for p in parts {
        out.rows_mut(i, p.len()).copy_from(*p);
        i += p.len();
    }
    out
}

/// Select the given rows of `a`, in order.
pub fn select_rows(a: &Mat, rows: &[usize]) -> Mat {
    let mut out = Mat::zeros(rows.len(), a.ncols());
    for (dst, &src) in rows.iter().enumerate() {
        out.row_mut(dst).copy_from(&a.row(src));
    }
    out
}

pub fn select_entries(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

#[derive(Debug, Clone, Copy)]
enum Pivot {
    One,
    Two,
}

/// `P A Pᵀ = L D Lᵀ` with `L` unit lower triangular and `D` block diagonal
/// (1×1 and 2×2 blocks), using Bunch–Kaufman partial pivoting.
#[derive(Debug, Clone)]
pub struct Ldlt {
    l: Mat,
    d: Mat,
    perm: Vec<usize>,
    blocks: Vec<(usize, Pivot)>,
}

impl Ldlt {
    pub fn factor(a: &Mat) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(EneError::DimensionMismatch(format!(
                "LDLT needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        if !all_finite(a) {
            return Err(EneError::NonFinite {
                context: "LDLT input".into(),
            });
        }
        let floor = PIVOT_FLOOR * norm_inf(a).max(f64::MIN_POSITIVE);
        let mut w = symmetrize(a);
        let mut l = Mat::identity(n, n);
        let mut d = Mat::zeros(n, n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut blocks = Vec::new();

        let swap = |w: &mut Mat, l: &mut Mat, perm: &mut Vec<usize>, k: usize, p: usize, q: usize| {
            if p == q {
                return;
            }
            w.swap_rows(p, q);
            w.swap_columns(p, q);
            for c in 0..k {
                let tmp = l[(p, c)];
                l[(p, c)] = l[(q, c)];
                l[(q, c)] = tmp;
            }
            perm.swap(p, q);
        };

        let mut k = 0;
        while k < n {
            let absakk = w[(k, k)].abs();
            let (imax, colmax) = ((k + 1)..n)
                .map(|i| (i, w[(i, k)].abs()))
                .fold((k, 0.0), |best, c| if c.1 > best.1 { c } else { best });

            if absakk.max(colmax) <= floor {
                return Err(EneError::SingularMatrix {
                    index: k,
                    pivot: absakk.max(colmax),
                });
            }

            let mut kind = Pivot::One;
            if absakk < BK_ALPHA * colmax {
                let rowmax = (k..n)
                    .filter(|&j| j != imax)
                    .map(|j| w[(imax, j)].abs())
                    .fold(0.0, f64::max);
                if absakk * rowmax >= BK_ALPHA * colmax * colmax {
                    // keep k as a 1x1 pivot
                } else if w[(imax, imax)].abs() >= BK_ALPHA * rowmax {
                    swap(&mut w, &mut l, &mut perm, k, k, imax);
                } else {
                    swap(&mut w, &mut l, &mut perm, k, k + 1, imax);
                    kind = Pivot::Two;
                }
            }

            match kind {
                Pivot::One => {
                    let dk = w[(k, k)];
                    if dk.abs() <= floor {
                        return Err(EneError::SingularMatrix { index: k, pivot: dk.abs() });
                    }
                    d[(k, k)] = dk;
                    for i in (k + 1)..n {
                        l[(i, k)] = w[(i, k)] / dk;
                    }
                    for i in (k + 1)..n {
                        for j in (k + 1)..=i {
                            let v = w[(i, j)] - l[(i, k)] * w[(j, k)];
                            w[(i, j)] = v;
                            w[(j, i)] = v;
                        }
                    }
                    blocks.push((k, Pivot::One));
                    k += 1;
                }
                Pivot::Two => {
                    let (e11, e21, e22) = (w[(k, k)], w[(k + 1, k)], w[(k + 1, k + 1)]);
                    let det = e11 * e22 - e21 * e21;
                    let scale = e11.abs().max(e21.abs()).max(e22.abs());
                    if det.abs() <= floor * scale {
                        return Err(EneError::SingularMatrix { index: k, pivot: det.abs() });
                    }
                    d[(k, k)] = e11;
                    d[(k + 1, k)] = e21;
                    d[(k, k + 1)] = e21;
                    d[(k + 1, k + 1)] = e22;
                    let (i11, i12, i22) = (e22 / det, -e21 / det, e11 / det);
                    for i in (k + 2)..n {
                        let (a0, a1) = (w[(i, k)], w[(i, k + 1)]);
                        l[(i, k)] = a0 * i11 + a1 * i12;
                        l[(i, k + 1)] = a0 * i12 + a1 * i22;
                    }
                    for i in (k + 2)..n {
                        for j in (k + 2)..=i {
                            let v = w[(i, j)] - l[(i, k)] * w[(j, k)] - l[(i, k + 1)] * w[(j, k + 1)];
                            w[(i, j)] = v;
                            w[(j, i)] = v;
                        }
                    }
                    blocks.push((k, Pivot::Two));
                    k += 2;
                }
            }
        }
        Ok(Self { l, d, perm, blocks })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Number of negative eigenvalues of `A` (Sylvester inertia of `D`).
    pub fn negative_eigenvalues(&self) -> usize {
        self.blocks
            .iter()
            .map(|&(k, kind)| match kind {
                Pivot::One => usize::from(self.d[(k, k)] < 0.0),
                Pivot::Two => {
                    let (a, b, c) = (self.d[(k, k)], self.d[(k + 1, k)], self.d[(k + 1, k + 1)]);
                    let det = a * c - b * b;
                    if det < 0.0 {
                        1
                    } else if a + c < 0.0 {
                        2
                    } else {
                        0
                    }
                }
            })
            .sum()
    }

    pub fn solve(&self, b: &Mat) -> Mat {
        let n = self.dim();
        let mut y = Mat::zeros(n, b.ncols());
        for (i, &p) in self.perm.iter().enumerate() {
            y.row_mut(i).copy_from(&b.row(p));
        }
        // L z = y
        for c in 0..y.ncols() {
            for i in 0..n {
                let mut s = y[(i, c)];
                for j in 0..i {
                    s -= self.l[(i, j)] * y[(j, c)];
                }
                y[(i, c)] = s;
            }
        }
        // D v = z
        for &(k, kind) in &self.blocks {
            match kind {
                Pivot::One => {
                    let dk = self.d[(k, k)];
                    for c in 0..y.ncols() {
                        y[(k, c)] /= dk;
                    }
                }
                Pivot::Two => {
                    let (a, b2, cc) = (self.d[(k, k)], self.d[(k + 1, k)], self.d[(k + 1, k + 1)]);
                    let det = a * cc - b2 * b2;
                    for c in 0..y.ncols() {
                        let (y0, y1) = (y[(k, c)], y[(k + 1, c)]);
                        y[(k, c)] = (cc * y0 - b2 * y1) / det;
                        y[(k + 1, c)] = (a * y1 - b2 * y0) / det;
                    }
                }
            }
        }
        // Lᵀ t = v
        for c in 0..y.ncols() {
            for i in (0..n).rev() {
                let mut s = y[(i, c)];
                for j in (i + 1)..n {
                    s -= self.l[(j, i)] * y[(j, c)];
                }
                y[(i, c)] = s;
            }
        }
        let mut x = Mat::zeros(n, b.ncols());
        for (i, &p) in self.perm.iter().enumerate() {
            x.row_mut(p).copy_from(&y.row(i));
        }
        x
    }
}

/// Solve `A X = B` for symmetric (possibly indefinite) `A`, with one step of
/// iterative refinement.
pub fn solve_symmetric_indefinite(a: &Mat, b: &Mat) -> Result<Mat> {
    if b.nrows() != a.nrows() {
        return Err(EneError::DimensionMismatch(format!(
            "rhs has {} rows, matrix is {}x{}",
            b.nrows(),
            a.nrows(),
            a.ncols()
        )));
    }
    let f = Ldlt::factor(a)?;
    let mut x = f.solve(b);
    let r = b - a * &x;
    x += f.solve(&r);
    if !all_finite(&x) {
        return Err(EneError::NonFinite {
            context: "symmetric solve".into(),
        });
    }
    Ok(x)
}

pub fn inverse_symmetric(a: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let inv = solve_symmetric_indefinite(a, &Mat::identity(n, n))?;
    Ok(symmetrize(&inv))
}

/// True iff every Cholesky pivot of `a` exceeds [`PD_PIVOT_MIN`].
pub fn is_positive_definite(a: &Mat) -> Result<bool> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(EneError::DimensionMismatch("positive-definite check needs a square matrix".into()));
    }
    let asym = asymmetry(a);
    if asym > SYM_TOL {
        return Err(EneError::NotSymmetric { asymmetry: asym });
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > PD_PIVOT_MIN) {
            return Ok(false);
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(true)
}

/// Central-difference Jacobian of `func` at `at`.
pub fn fd_jacobian<F>(func: F, at: &Vector, step: f64) -> Result<Mat>
where
    F: Fn(&Vector) -> Vector,
{
    if !(step > 0.0) {
        return Err(EneError::InvalidInput(format!("finite-difference step must be positive, got {step}")));
    }
    let f0 = func(at);
    let mut jac = Mat::zeros(f0.len(), at.len());
    let mut probe = at.clone();
    for j in 0..at.len() {
        probe[j] = at[j] + step;
        let fp = func(&probe);
        probe[j] = at[j] - step;
        let fm = func(&probe);
        probe[j] = at[j];
        if fp.iter().chain(fm.iter()).any(|v| !v.is_finite()) {
            return Err(EneError::NonFinite {
                context: format!("finite difference along coordinate {j}"),
            });
        }
        jac.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    Ok(jac)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(func: F, at: &Vector, step: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    let jac = fd_jacobian(|v| Vector::from_element(1, func(v)), at, step)?;
    Ok(jac.row(0).transpose())
}

/// Symmetric second-difference Hessian of a scalar function.
pub fn fd_hessian<F>(func: F, at: &Vector, step: f64) -> Result<Mat>
where
    F: Fn(&Vector) -> f64,
{
    second_differences(func, at, &Vector::from_element(at.len(), step))
}

/// Second-difference Hessian with step `step * max(1, |at_i|)` along each
/// coordinate, so large coordinates do not drown the stencil in rounding.
pub fn fd_hessian_relative<F>(func: F, at: &Vector, step: f64) -> Result<Mat>
where
    F: Fn(&Vector) -> f64,
{
    let steps = at.map(|a| step * a.abs().max(1.0));
    second_differences(func, at, &steps)
}

fn second_differences<F>(func: F, at: &Vector, steps: &Vector) -> Result<Mat>
where
    F: Fn(&Vector) -> f64,
{
    if steps.iter().any(|h| !(*h > 0.0)) {
        return Err(EneError::InvalidInput("finite-difference step must be positive".into()));
    }
    let n = at.len();
    let f0 = func(at);
    let mut h = Mat::zeros(n, n);
    let mut p = at.clone();
    let eval = |p: &Vector| -> Result<f64> {
        let v = func(p);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EneError::NonFinite {
                context: "second difference".into(),
            })
        }
    };
    for i in 0..n {
        let hi = steps[i];
        p[i] = at[i] + hi;
        let fp = eval(&p)?;
        p[i] = at[i] - hi;
        let fm = eval(&p)?;
        p[i] = at[i];
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            p[i] = at[i] + hi;
            p[j] = at[j] + hj;
            let fpp = eval(&p)?;
            p[j] = at[j] - hj;
            let fpm = eval(&p)?;
            p[i] = at[i] - hi;
            let fmm = eval(&p)?;
            p[j] = at[j] + hj;
            let fmp = eval(&p)?;
            p[i] = at[i];
            p[j] = at[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// 64-bit linear congruential generator with Knuth's MMIX constants.
///
/// `state ← 6364136223846793005·state + 1442695040888963407 (mod 2⁶⁴)`; each
/// draw advances the state once and maps its top 53 bits to `[0, 1)`.
#[derive(Debug, Clone)]
pub struct Lcg {
    state: u64,
}

impl Lcg {
    pub const MULTIPLIER: u64 = 6_364_136_223_846_793_005;
    pub const INCREMENT: u64 = 1_442_695_040_888_963_407;

    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self
            .state
            .wrapping_mul(Self::MULTIPLIER)
            .wrapping_add(Self::INCREMENT);
        self.state
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rel_residual(a: &Mat, x: &Mat, b: &Mat) -> f64 {
        (a * x - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn identity_solve() {
        let a = Mat::identity(2, 2);
        let b = Mat::from_row_slice(2, 1, &[3.0, 4.0]);
        let x = solve_symmetric_indefinite(&a, &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn permutation_solve_uses_two_by_two_pivot() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let b = Mat::from_row_slice(2, 1, &[1.0, 2.0]);
        let x = solve_symmetric_indefinite(&a, &b).unwrap();
        assert_abs_diff_eq!(x[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[(1, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(Ldlt::factor(&a).unwrap().negative_eigenvalues(), 1);
    }

    #[test]
    fn random_symmetric_recovers_known_solution() {
        let mut rng = Lcg::new(7);
        let mut a = Mat::from_fn(6, 6, |_, _| rng.uniform(-1.0, 1.0));
        a = symmetrize(&a);
        let x_true = Mat::from_fn(6, 2, |_, _| rng.uniform(-2.0, 2.0));
        let b = &a * &x_true;
        let x = solve_symmetric_indefinite(&a, &b).unwrap();
        assert!((x - x_true).abs().max() < 1e-10);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = Mat::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let b = Mat::from_row_slice(3, 1, &[1.0, 1.0, 0.0]);
        assert!(matches!(
            solve_symmetric_indefinite(&a, &b),
            Err(EneError::SingularMatrix { .. })
        ));
    }

    #[test]
    fn kkt_block_inverse() {
        // [[2, 1], [1, 0]]⁻¹ = [[0, 1], [1, -2]]
        let a = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 0.0]);
        let inv = inverse_symmetric(&a).unwrap();
        let expected = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, -2.0]);
        assert!((inv - expected).abs().max() < 1e-14);
    }

    #[test]
    fn fd_jacobian_examples() {
        let at = Vector::from_vec(vec![1.0, 2.0]);
        let id = fd_jacobian(|v| v.clone(), &at, FD_STEP).unwrap();
        assert!((id - Mat::identity(2, 2)).abs().max() < 1e-10);

        let j = fd_jacobian(|v| Vector::from_vec(vec![v[0] * v[0], v[0] * v[1]]), &at, 1e-5).unwrap();
        let expected = Mat::from_row_slice(2, 2, &[2.0, 0.0, 2.0, 1.0]);
        assert!((j - expected).abs().max() < 1e-8);

        let c = fd_jacobian(|_| Vector::from_vec(vec![3.0, -1.0, 0.5]), &at, FD_STEP).unwrap();
        assert_eq!(c, Mat::zeros(3, 2));
    }

    #[test]
    fn fd_jacobian_rejects_bad_input() {
        let at = Vector::from_vec(vec![0.0]);
        assert!(fd_jacobian(|v| v.clone(), &at, 0.0).is_err());
        let r = fd_jacobian(|v| v.map(|x| 1.0 / x), &at, 1e-5);
        assert!(r.is_ok() || matches!(r, Err(EneError::NonFinite { .. })));
        let r = fd_jacobian(|v| v.map(|x| if x > 0.0 { f64::NAN } else { x }), &at, 1e-5);
        assert!(matches!(r, Err(EneError::NonFinite { .. })));
    }

    #[test]
    fn positive_definite_examples() {
        assert!(is_positive_definite(&Mat::identity(3, 3)).unwrap());
        assert!(!is_positive_definite(&Mat::from_element(1, 1, -1.0)).unwrap());
        let a = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!(is_positive_definite(&a).unwrap());
        let bad = Mat::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(matches!(is_positive_definite(&bad), Err(EneError::NotSymmetric { .. })));
    }

    #[test]
    fn fd_hessian_of_quadratic() {
        let h_true = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = |v: &Vector| 0.5 * v.dot(&(&h_true * v));
        let h = fd_hessian(f, &Vector::from_vec(vec![0.3, -1.2]), FD_STEP_SECOND).unwrap();
        assert!((h - &h_true).abs().max() < 1e-7);
    }

    #[test]
    fn relative_steps_tame_large_coordinates() {
        let f = |v: &Vector| v[0] * v[0] + 3.0 * v[0] * v[1] - v[1];
        let at = Vector::from_vec(vec![400.0, -250.0]);
        let h = fd_hessian_relative(f, &at, FD_STEP_SECOND).unwrap();
        let h_true = Mat::from_row_slice(2, 2, &[2.0, 3.0, 3.0, 0.0]);
        assert!((h - &h_true).abs().max() < 1e-5);
    }

    #[test]
    fn lcg_is_deterministic_and_in_range() {
        let mut a = Lcg::new(42);
        let mut b = Lcg::new(42);
        for _ in 0..1000 {
            let (x, y) = (a.next_f64(), b.next_f64());
            assert_eq!(x.to_bits(), y.to_bits());
            assert!((0.0..1.0).contains(&x));
        }
        let mut c = Lcg::new(0);
        assert_eq!(c.next_u64(), Lcg::INCREMENT);
    }

    proptest! {
        #[test]
        fn solve_reproduces_rhs(seed in 0u64..10_000, n in 1usize..9) {
            let mut rng = Lcg::new(seed);
            let mut a = Mat::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0));
            a = symmetrize(&a);
            for i in 0..n {
                // keep the condition number moderate
                a[(i, i)] += if i % 2 == 0 { 3.0 } else { -3.0 };
            }
            let b = Mat::from_fn(n, 1, |_, _| rng.uniform(-1.0, 1.0));
            let x = solve_symmetric_indefinite(&a, &b).unwrap();
            prop_assert!(rel_residual(&a, &x, &b) <= 1e-9);
        }

        #[test]
        fn fd_jacobian_of_affine_map_is_exact(seed in 0u64..10_000) {
            let mut rng = Lcg::new(seed);
            let m = Mat::from_fn(3, 4, |_, _| rng.uniform(-2.0, 2.0));
            let c = Vector::from_fn(3, |_, _| rng.uniform(-1.0, 1.0));
            let at = Vector::from_fn(4, |_, _| rng.uniform(-1.0, 1.0));
            let j = fd_jacobian(|v| &m * v + &c, &at, FD_STEP).unwrap();
            prop_assert!((j - &m).abs().max() <= 1e-10);
        }
    }
}
