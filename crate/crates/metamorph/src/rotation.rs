//! Axis-angle rotation calculus: the exponential map and its first and
//! second derivatives with respect to the rotation-vector coordinates.
//!
//! Everything here is written in terms of the decomposition
//! `R = I + alpha(theta) K + beta(theta) K^2` with `K = [v]_x` linear in the
//! rotation vector `v` and `theta = |v|`. Derivatives then reduce to a small
//! set of scalar coefficient functions that stay finite at `theta -> 0`.

use nalgebra::{Matrix3, Vector3};

/// Cross-product (skew-symmetric) matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Scalar coefficients of the rotation expansion and its v-derivatives.
///
/// alpha = sin(t)/t, beta = (1-cos(t))/t^2, a1 = alpha'/t, b1 = beta'/t,
/// a2 = a1'/t, b2 = b1'/t. Below `SERIES_CUTOFF` the closed forms lose
/// digits to cancellation, so Taylor series are used instead.
#[derive(Debug, Clone, Copy)]
struct RotCoeffs {
    alpha: f64,
    beta: f64,
    a1: f64,
    b1: f64,
    a2: f64,
    b2: f64,
}

const SERIES_CUTOFF: f64 = 1e-2;

fn coeffs(theta: f64) -> RotCoeffs {
    if theta < SERIES_CUTOFF {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        RotCoeffs {
            alpha: 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0,
            beta: 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0,
            a1: -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0,
            b1: -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0,
            a2: 1.0 / 15.0 - t2 / 210.0 + t4 / 7560.0 - t6 / 498960.0,
            b2: 1.0 / 90.0 - t2 / 1680.0 + t4 / 75600.0 - t6 / 5987520.0,
        }
    } else {
        let (s, c) = theta.sin_cos();
        let half = (0.5 * theta).sin();
        let one_minus_cos = 2.0 * half * half;
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let t4 = t2 * t2;
        let t5 = t4 * theta;
        let t6 = t4 * t2;
        RotCoeffs {
            alpha: s / theta,
            beta: one_minus_cos / t2,
            a1: (theta * c - s) / t3,
            b1: (theta * s - 2.0 * one_minus_cos) / t4,
            a2: (3.0 * s - 3.0 * theta * c - t2 * s) / t5,
            b2: (t2 * c - 5.0 * theta * s + 8.0 * one_minus_cos) / t6,
        }
    }
}

/// Rotation matrix from an axis-angle vector, `R = exp([a]_x)`.
pub fn rodrigues(a: &Vector3<f64>) -> Matrix3<f64> {
    let k = skew(a);
    let cf = coeffs(a.norm());
    Matrix3::identity() + k * cf.alpha + k * k * cf.beta
}

/// `dR/dv_i`, the derivative of the rotation matrix with respect to the
/// i-th rotation-vector coordinate (i in 0..3).
pub fn rotation_gradient(a: &Vector3<f64>, i: usize) -> Matrix3<f64> {
    let cf = coeffs(a.norm());
    let k = skew(a);
    let k2 = k * k;
    let ei = skew(&basis(i));
    k * (cf.a1 * a[i]) + ei * cf.alpha + k2 * (cf.b1 * a[i]) + (ei * k + k * ei) * cf.beta
}

/// `d^2R/(dv_i dv_j)`. Symmetric in `(i, j)`.
pub fn rotation_hessian(a: &Vector3<f64>, i: usize, j: usize) -> Matrix3<f64> {
    let cf = coeffs(a.norm());
    let k = skew(a);
    let k2 = k * k;
    let ei = skew(&basis(i));
    let ej = skew(&basis(j));
    let delta = if i == j { 1.0 } else { 0.0 };
    let eik = ei * k + k * ei;
    let ejk = ej * k + k * ej;
    k * (cf.a2 * a[i] * a[j])
        + (k * delta + ej * a[i] + ei * a[j]) * cf.a1
        + k2 * (cf.b2 * a[i] * a[j])
        + (k2 * delta + ejk * a[i] + eik * a[j]) * cf.b1
        + (ei * ej + ej * ei) * cf.beta
}

/// Matrix whose i-th column is `(dR/dv_i) u`; maps rotation-vector
/// perturbations to displacements of the rotated point.
pub fn rotate_point_jacobian(a: &Vector3<f64>, u: &Vector3<f64>) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for i in 0..3 {
        m.set_column(i, &(rotation_gradient(a, i) * u));
    }
    m
}

/// All nine second derivatives `d^2(R u)/(dv_i dv_j)` as a symmetric
/// 3x3 grid of 3-vectors.
pub fn rotate_point_hessian(a: &Vector3<f64>, u: &Vector3<f64>) -> [[Vector3<f64>; 3]; 3] {
    let mut out = [[Vector3::zeros(); 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let h = rotation_hessian(a, i, j) * u;
            out[i][j] = h;
            out[j][i] = h;
        }
    }
    out
}

/// Axis-angle vector of a rotation matrix, with `|a| <= pi`.
pub fn log_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let t = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = t.acos();
    let antisym = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < 1e-7 {
        return antisym * 0.5;
    }
    if theta > std::f64::consts::PI - 1e-4 {
        // Near a half-turn the antisymmetric part vanishes; recover the
        // axis from the symmetric part instead.
        let b = (r + Matrix3::identity().scale(-t)) / (1.0 - t);
        // b = n n^T (symmetrized); use its largest diagonal for the axis.
        let k = if b[(0, 0)] >= b[(1, 1)] && b[(0, 0)] >= b[(2, 2)] {
            0
        } else if b[(1, 1)] >= b[(2, 2)] {
            1
        } else {
            2
        };
        let sym = (b + b.transpose()) * 0.5;
        let mut n = Vector3::new(sym[(0, k)], sym[(1, k)], sym[(2, k)]);
        n /= sym[(k, k)].max(1e-300).sqrt();
        n.normalize_mut();
        // Fix the sign from the (possibly tiny) antisymmetric part, falling
        // back to a deterministic convention exactly at pi.
        let s = n.dot(&antisym);
        if s < 0.0 || (s == 0.0 && (n.x < 0.0 || (n.x == 0.0 && (n.y < 0.0 || (n.y == 0.0 && n.z < 0.0))))) {
            n = -n;
        }
        return n * theta;
    }
    antisym * (theta / (2.0 * theta.sin()))
}

/// Re-wraps an axis-angle vector so its magnitude stays below pi
/// (and hence below the 2*pi validity bound).
pub fn wrap_axis_angle(a: &Vector3<f64>) -> Vector3<f64> {
    let theta = a.norm();
    if theta <= std::f64::consts::PI {
        return *a;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let wrapped = theta - two_pi * (theta / two_pi).round();
    a * (wrapped / theta)
}

fn basis(i: usize) -> Vector3<f64> {
    let mut e = Vector3::zeros();
    e[i] = 1.0;
    e
}
