//! Hookean spring potential between points on two rigid bars, with analytic
//! gradient and Hessian over the 12 kinematic coordinates of the bar pair,
//! plus energy totals (springs and gravity) over a whole structure.
//!
//! The potential is `V = 1/2 k (l - sqrt(f))^2` with `g` the world-space
//! attachment difference and `f = g.g`. Everything downstream (first-order
//! residuals, projected Hessians, simulator forces) is built from these
//! three evaluations.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rigidbody::{Form, Pose, Structure};
pub use crate::rotation::{rodrigues, rotation_gradient};
use crate::rotation::{rotate_point_hessian, rotate_point_jacobian};

/// Springs whose current length falls below this are degenerate: the
/// direction (and hence the gradient) is undefined.
pub const DEGENERATE_LENGTH: f64 = 1e-9;

/// A linear spring between two bars, attached at body-frame points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Spring {
    pub id: usize,
    pub body_1: usize,
    pub body_2: usize,
    pub u1_local: Vector3<f64>,
    pub u2_local: Vector3<f64>,
    /// Stiffness, g/s^2 (force per unit elongation).
    pub k: f64,
    /// Rest length, millimeters.
    pub l: f64,
    /// Rest length at creation; the optimizer box keeps l within 50% of it.
    pub l0: f64,
    /// Fabrication layer, assigned by the export stage.
    #[serde(default)]
    pub z_layer: Option<i32>,
}

/// Effective (stiffness, rest length) pair for one spring; the design
/// variables the stability optimizer adjusts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpringParam {
    pub k: f64,
    pub l: f64,
}

impl Spring {
    pub fn param(&self) -> SpringParam {
        SpringParam { k: self.k, l: self.l }
    }
}

/// Total potential with its gradient and Hessian over all 6n coordinates.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    /// Potential energy, g*mm^2/s^2.
    pub v: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// World-space attachment difference `g` and its squared norm.
fn spring_geometry(spring: &Spring, pose_1: &Pose, pose_2: &Pose) -> (Vector3<f64>, f64) {
    let g = pose_1.rotation() * spring.u1_local + pose_1.p
        - pose_2.rotation() * spring.u2_local
        - pose_2.p;
    let f = g.norm_squared();
    (g, f)
}

fn check_degenerate(spring: &Spring, f: f64) -> Result<()> {
    if f.sqrt() < DEGENERATE_LENGTH {
        return Err(Error::DegenerateSpring { id: spring.id });
    }
    Ok(())
}

/// Spring potential at the given poses with the spring's own parameters.
pub fn spring_potential(spring: &Spring, pose_1: &Pose, pose_2: &Pose) -> Result<f64> {
    spring_potential_with(spring, &spring.param(), pose_1, pose_2)
}

pub fn spring_potential_with(
    spring: &Spring,
    param: &SpringParam,
    pose_1: &Pose,
    pose_2: &Pose,
) -> Result<f64> {
    let (_, f) = spring_geometry(spring, pose_1, pose_2);
    check_degenerate(spring, f)?;
    let d = f.sqrt();
    Ok(0.5 * param.k * (param.l - d) * (param.l - d))
}

/// The twelve derivatives of `g` with respect to (p1, a1, p2, a2), one
/// 3-vector per coordinate.
fn dg_columns(spring: &Spring, pose_1: &Pose, pose_2: &Pose) -> [Vector3<f64>; 12] {
    let j1 = rotate_point_jacobian(&pose_1.a, &spring.u1_local);
    let j2 = rotate_point_jacobian(&pose_2.a, &spring.u2_local);
    let mut cols = [Vector3::zeros(); 12];
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        cols[i] = e;
        cols[3 + i] = j1.column(i).into();
        cols[6 + i] = -e;
        cols[9 + i] = -Vector3::from(j2.column(i));
    }
    cols
}

/// Analytic gradient of the spring potential, ordered (p1, a1, p2, a2).
pub fn spring_gradient(spring: &Spring, pose_1: &Pose, pose_2: &Pose) -> Result<SVector<f64, 12>> {
    spring_gradient_with(spring, &spring.param(), pose_1, pose_2)
}

pub fn spring_gradient_with(
    spring: &Spring,
    param: &SpringParam,
    pose_1: &Pose,
    pose_2: &Pose,
) -> Result<SVector<f64, 12>> {
    let (g, f) = spring_geometry(spring, pose_1, pose_2);
    check_degenerate(spring, f)?;
    let d = f.sqrt();
    let w = param.k * (1.0 - param.l / d);
    let cols = dg_columns(spring, pose_1, pose_2);
    let mut grad = SVector::<f64, 12>::zeros();
    for i in 0..12 {
        grad[i] = w * g.dot(&cols[i]);
    }
    Ok(grad)
}

/// Analytic 12x12 Hessian of the spring potential.
///
/// `H_ij = k (1 - l/d) (dg_j . dg_i + g . d2g_ij) + k l (h_i h_j) / d^3`
/// with `h_i = g . dg_i`. The second derivatives of `g` live only in the
/// per-body rotation blocks; the bodies still couple through the
/// first-derivative outer products.
pub fn spring_hessian(spring: &Spring, pose_1: &Pose, pose_2: &Pose) -> Result<SMatrix<f64, 12, 12>> {
    spring_hessian_with(spring, &spring.param(), pose_1, pose_2)
}

pub fn spring_hessian_with(
    spring: &Spring,
    param: &SpringParam,
    pose_1: &Pose,
    pose_2: &Pose,
) -> Result<SMatrix<f64, 12, 12>> {
    let (g, f) = spring_geometry(spring, pose_1, pose_2);
    check_degenerate(spring, f)?;
    let d = f.sqrt();
    let w = param.k * (1.0 - param.l / d);
    let outer_coeff = param.k * param.l / (f * d);
    let cols = dg_columns(spring, pose_1, pose_2);
    let mut h_vals = [0.0; 12];
    for i in 0..12 {
        h_vals[i] = g.dot(&cols[i]);
    }
    let rr1 = rotate_point_hessian(&pose_1.a, &spring.u1_local);
    let rr2 = rotate_point_hessian(&pose_2.a, &spring.u2_local);
    let mut h = SMatrix::<f64, 12, 12>::zeros();
    for i in 0..12 {
        for j in i..12 {
            let mut val = w * cols[i].dot(&cols[j]) + outer_coeff * h_vals[i] * h_vals[j];
            // g . d2g/dx_i dx_j: nonzero only within each body's rotation block.
            if (3..6).contains(&i) && (3..6).contains(&j) {
                val += w * g.dot(&rr1[i - 3][j - 3]);
            } else if (9..12).contains(&i) && (9..12).contains(&j) {
                val -= w * g.dot(&rr2[i - 9][j - 9]);
            }
            h[(i, j)] = val;
            h[(j, i)] = val;
        }
    }
    Ok(h)
}

/// World-space force and torque (about each body origin) that a spring
/// exerts on its two bars.
pub fn spring_wrench(
    spring: &Spring,
    param: &SpringParam,
    pose_1: &Pose,
    pose_2: &Pose,
) -> Result<[(Vector3<f64>, Vector3<f64>); 2]> {
    let (g, f) = spring_geometry(spring, pose_1, pose_2);
    check_degenerate(spring, f)?;
    let d = f.sqrt();
    let w = param.k * (1.0 - param.l / d);
    let force_on_1 = -g * w;
    let arm_1 = pose_1.rotation() * spring.u1_local;
    let arm_2 = pose_2.rotation() * spring.u2_local;
    Ok([
        (force_on_1, arm_1.cross(&force_on_1)),
        (-force_on_1, arm_2.cross(&-force_on_1)),
    ])
}

/// Gravitational potential of the structure at a form: sum of
/// `-m g . p` over bars (body origins sit at the bar centroids).
pub fn gravity_potential(structure: &Structure, form: &Form) -> f64 {
    structure
        .bars
        .iter()
        .zip(&form.poses)
        .map(|(bar, pose)| -bar.mass * structure.gravity.dot(&pose.p))
        .sum()
}

/// Gravity generalized forces stacked over all coordinates; only the
/// translation rows are non-zero.
pub fn gravity_force(structure: &Structure) -> DVector<f64> {
    let mut f = DVector::zeros(structure.num_coords());
    for (b, bar) in structure.bars.iter().enumerate() {
        f.fixed_rows_mut::<3>(6 * b)
            .copy_from(&(structure.gravity * bar.mass));
    }
    f
}

/// Scatters a 12-slot spring quantity into the stacked coordinate space.
fn scatter_indices(spring: &Spring) -> [usize; 12] {
    let b1 = 6 * spring.body_1;
    let b2 = 6 * spring.body_2;
    [
        b1, b1 + 1, b1 + 2, b1 + 3, b1 + 4, b1 + 5,
        b2, b2 + 1, b2 + 2, b2 + 3, b2 + 4, b2 + 5,
    ]
}

/// Spring-only gradient over all coordinates.
pub fn spring_gradient_total(
    structure: &Structure,
    form: &Form,
    params: &[SpringParam],
) -> Result<DVector<f64>> {
    let mut grad = DVector::zeros(structure.num_coords());
    for (spring, param) in structure.springs.iter().zip(params) {
        let g12 = spring_gradient_with(
            spring,
            param,
            &form.poses[spring.body_1],
            &form.poses[spring.body_2],
        )?;
        let idx = scatter_indices(spring);
        for (slot, &qi) in idx.iter().enumerate() {
            grad[qi] += g12[slot];
        }
    }
    Ok(grad)
}

/// Spring-only Hessian over all coordinates (gravity contributes nothing).
pub fn spring_hessian_total(
    structure: &Structure,
    form: &Form,
    params: &[SpringParam],
) -> Result<DMatrix<f64>> {
    let nq = structure.num_coords();
    let mut hess = DMatrix::zeros(nq, nq);
    for (spring, param) in structure.springs.iter().zip(params) {
        let h12 = spring_hessian_with(
            spring,
            param,
            &form.poses[spring.body_1],
            &form.poses[spring.body_2],
        )?;
        let idx = scatter_indices(spring);
        for (slot_i, &qi) in idx.iter().enumerate() {
            for (slot_j, &qj) in idx.iter().enumerate() {
                hess[(qi, qj)] += h12[(slot_i, slot_j)];
            }
        }
    }
    Ok(hess)
}

/// Total potential energy (springs plus gravity), gradient and Hessian over
/// all coordinates. Spring parameters are taken from `params`, which must
/// align with `structure.springs`. Gravity contributes to the value and the
/// translation rows of the gradient only; its Hessian is identically zero.
pub fn total_energy_report(
    structure: &Structure,
    form: &Form,
    params: &[SpringParam],
) -> Result<EnergyReport> {
    assert_eq!(
        params.len(),
        structure.springs.len(),
        "design dimension must match the spring set"
    );
    let v = gravity_potential(structure, form) + spring_potential_total(structure, form, params)?;
    let grad = spring_gradient_total(structure, form, params)? - gravity_force(structure);
    let hess = spring_hessian_total(structure, form, params)?;
    Ok(EnergyReport { v, grad, hess })
}

/// Spring-only potential summed over the structure (the regularizer term).
pub fn spring_potential_total(structure: &Structure, form: &Form, params: &[SpringParam]) -> Result<f64> {
    let mut v = 0.0;
    for (spring, param) in structure.springs.iter().zip(params) {
        v += spring_potential_with(spring, param, &form.poses[spring.body_1], &form.poses[spring.body_2])?;
    }
    Ok(v)
}

#[allow(dead_code)]
fn identity3() -> Matrix3<f64> {
    Matrix3::identity()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigidbody::Bar;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        Pose::new(
            Vector3::new(
                200.0 * (rng.gen::<f64>() - 0.5),
                200.0 * (rng.gen::<f64>() - 0.5),
                200.0 * (rng.gen::<f64>() - 0.5),
            ),
            Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                .normalize()
                * (rng.gen::<f64>() * 2.9),
        )
    }

    fn random_spring(rng: &mut impl Rng) -> Spring {
        Spring {
            id: 0,
            body_1: 0,
            body_2: 1,
            u1_local: Vector3::new(
                60.0 * (rng.gen::<f64>() - 0.5),
                60.0 * (rng.gen::<f64>() - 0.5),
                0.0,
            ),
            u2_local: Vector3::new(
                60.0 * (rng.gen::<f64>() - 0.5),
                60.0 * (rng.gen::<f64>() - 0.5),
                0.0,
            ),
            k: 0.5 + 10.0 * rng.gen::<f64>(),
            l: 5.0 + 100.0 * rng.gen::<f64>(),
            l0: 50.0,
            z_layer: None,
        }
    }

    /// Independent distance between the spring anchors via world_point.
    fn oracle_length(spring: &Spring, p1: &Pose, p2: &Pose) -> f64 {
        let a = crate::rigidbody::world_point(p1, &spring.u1_local);
        let b = crate::rigidbody::world_point(p2, &spring.u2_local);
        (a - b).norm()
    }

    #[test]
    fn potential_zero_at_rest_length() {
        let spring = Spring {
            id: 0,
            body_1: 0,
            body_2: 1,
            u1_local: Vector3::zeros(),
            u2_local: Vector3::zeros(),
            k: 3.0,
            l: 7.0,
            l0: 7.0,
            z_layer: None,
        };
        let p1 = Pose::planar(0.0, 0.0, 0.0);
        let p2 = Pose::planar(7.0, 0.0, 0.0);
        assert_abs_diff_eq!(spring_potential(&spring, &p1, &p2).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn potential_direct_evaluation() {
        // k = 2, l = 1, endpoints 3 apart: V = 1/2 * 2 * (1 - 3)^2 = 4.
        let spring = Spring {
            id: 0,
            body_1: 0,
            body_2: 1,
            u1_local: Vector3::zeros(),
            u2_local: Vector3::zeros(),
            k: 2.0,
            l: 1.0,
            l0: 1.0,
            z_layer: None,
        };
        let p1 = Pose::planar(0.0, 0.0, 0.0);
        let p2 = Pose::planar(3.0, 0.0, 0.0);
        assert_abs_diff_eq!(spring_potential(&spring, &p1, &p2).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn potential_matches_distance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let spring = random_spring(&mut rng);
            let p1 = random_pose(&mut rng);
            let p2 = random_pose(&mut rng);
            let d = oracle_length(&spring, &p1, &p2);
            if d < 1.0 {
                continue;
            }
            let expect = 0.5 * spring.k * (spring.l - d) * (spring.l - d);
            let v = spring_potential(&spring, &p1, &p2).unwrap();
            assert_abs_diff_eq!(v, expect, epsilon = 1e-9 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn degenerate_spring_flagged() {
        let spring = Spring {
            id: 3,
            body_1: 0,
            body_2: 1,
            u1_local: Vector3::zeros(),
            u2_local: Vector3::zeros(),
            k: 1.0,
            l: 1.0,
            l0: 1.0,
            z_layer: None,
        };
        let p = Pose::identity();
        match spring_gradient(&spring, &p, &p) {
            Err(Error::DegenerateSpring { id: 3 }) => {}
            other => panic!("expected degenerate spring, got {other:?}"),
        }
    }

    #[test]
    fn gradient_zero_at_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut spring = random_spring(&mut rng);
            let p1 = random_pose(&mut rng);
            let p2 = random_pose(&mut rng);
            let d = oracle_length(&spring, &p1, &p2);
            if d < 1.0 {
                continue;
            }
            spring.l = d;
            let g = spring_gradient(&spring, &p1, &p2).unwrap();
            assert!(g.amax() <= 1e-10 * spring.k * d, "gradient at rest {}", g.amax());
        }
    }

    #[test]
    fn translation_gradients_are_opposite() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let spring = random_spring(&mut rng);
            let p1 = random_pose(&mut rng);
            let p2 = random_pose(&mut rng);
            if oracle_length(&spring, &p1, &p2) < 1.0 {
                continue;
            }
            let g = spring_gradient(&spring, &p1, &p2).unwrap();
            for j in 0..3 {
                assert_abs_diff_eq!(g[j], -g[6 + j], epsilon = 1e-9 * g.amax().max(1.0));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tested = 0;
        while tested < 120 {
            let spring = random_spring(&mut rng);
            let p1 = random_pose(&mut rng);
            let p2 = random_pose(&mut rng);
            if oracle_length(&spring, &p1, &p2) < 2.0 {
                continue;
            }
            tested += 1;
            let analytic = spring_gradient(&spring, &p1, &p2).unwrap();
            let mut fd = SVector::<f64, 12>::zeros();
            for i in 0..12 {
                let h = 1e-6 * coordinate_scale(&p1, &p2, i);
                let (a1, b1) = perturb(&p1, &p2, i, h);
                let (a2, b2) = perturb(&p1, &p2, i, -h);
                fd[i] = (spring_potential(&spring, &a1, &b1).unwrap()
                    - spring_potential(&spring, &a2, &b2).unwrap())
                    / (2.0 * h);
            }
            let scale = analytic.amax().max(1.0);
            assert!(
                (analytic - fd).amax() <= 1e-6 * scale,
                "gradient FD mismatch {}",
                (analytic - fd).amax() / scale
            );
        }
    }

    #[test]
    fn hessian_symmetric_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut tested = 0;
        while tested < 60 {
            let spring = random_spring(&mut rng);
            let p1 = random_pose(&mut rng);
            let p2 = random_pose(&mut rng);
            if oracle_length(&spring, &p1, &p2) < 2.0 {
                continue;
            }
            tested += 1;
            let h12 = spring_hessian(&spring, &p1, &p2).unwrap();
            let sym = (h12 - h12.transpose()).amax();
            assert!(sym <= 1e-9 * h12.amax().max(1.0), "asymmetry {sym}");
            for j in 0..12 {
                let h = 1e-6 * coordinate_scale(&p1, &p2, j);
                let (a1, b1) = perturb(&p1, &p2, j, h);
                let (a2, b2) = perturb(&p1, &p2, j, -h);
                let fd_col = (spring_gradient(&spring, &a1, &b1).unwrap()
                    - spring_gradient(&spring, &a2, &b2).unwrap())
                    / (2.0 * h);
                let analytic_col = h12.column(j);
                let scale = h12.amax().max(1.0);
                assert!(
                    (fd_col - analytic_col).amax() <= 1e-5 * scale,
                    "hessian FD mismatch col {j}: {}",
                    (fd_col - analytic_col).amax() / scale
                );
            }
        }
    }

    #[test]
    fn zero_rest_length_translation_block_is_k_identity() {
        let mut spring = Spring {
            id: 0,
            body_1: 0,
            body_2: 1,
            u1_local: Vector3::new(5.0, -2.0, 0.0),
            u2_local: Vector3::new(-4.0, 7.0, 0.0),
            k: 3.5,
            l: 0.0,
            l0: 1.0,
            z_layer: None,
        };
        spring.l = 0.0;
        let p1 = Pose::planar(10.0, 3.0, 0.4);
        let p2 = Pose::planar(-20.0, 8.0, -0.9);
        let h = spring_hessian(&spring, &p1, &p2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { spring.k } else { 0.0 };
                assert_abs_diff_eq!(h[(i, j)], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn rigid_motion_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let spring = random_spring(&mut rng);
            let p1 = random_pose(&mut rng);
            let p2 = random_pose(&mut rng);
            if oracle_length(&spring, &p1, &p2) < 1.0 {
                continue;
            }
            let v0 = spring_potential(&spring, &p1, &p2).unwrap();
            // One global planar rigid motion applied to both bodies.
            let angle = rng.gen::<f64>() * 3.0;
            let shift = Vector3::new(40.0 * rng.gen::<f64>(), -30.0 * rng.gen::<f64>(), 0.0);
            let rot = rodrigues(&Vector3::new(0.0, 0.0, angle));
            let apply = |q: &Pose| Pose {
                p: rot * q.p + shift,
                a: crate::rotation::log_rotation(&(rot * q.rotation())),
            };
            let v1 = spring_potential(&spring, &apply(&p1), &apply(&p2)).unwrap();
            assert_abs_diff_eq!(v1, v0, epsilon = 1e-10 * v0.abs().max(1.0));
        }
    }

    #[test]
    fn gravity_potential_and_gradient() {
        let bar = Bar::rod(0, 100.0);
        let mass = bar.mass;
        let structure = Structure {
            bars: vec![bar],
            joints: vec![],
            springs: vec![],
            gravity: Vector3::new(0.0, -9810.0, 0.0),
        };
        let h = 37.0;
        let form = Form {
            label: "raised".into(),
            poses: vec![Pose::planar(0.0, h, 0.0)],
        };
        let rep = total_energy_report(&structure, &form, &[]).unwrap();
        assert_abs_diff_eq!(rep.v, mass * 9810.0 * h, epsilon = 1e-9 * rep.v.abs());
        // dV/dp_y = m g; all other entries zero; Hessian identically zero.
        assert_abs_diff_eq!(rep.grad[1], mass * 9810.0, epsilon = 1e-9 * rep.grad[1]);
        assert_abs_diff_eq!(rep.grad[0], 0.0, epsilon = 1e-12);
        assert!(rep.grad.rows(2, 4).amax() <= 1e-12);
        assert!(rep.hess.amax() <= 1e-15);
    }

    #[test]
    fn total_report_gradient_matches_fd() {
        let (structure, form) = crate::scenes::springy_linkage(100.0, 0.9);
        let params: Vec<SpringParam> = structure.springs.iter().map(Spring::param).collect();
        let rep = total_energy_report(&structure, &form, &params).unwrap();
        let nq = structure.num_coords();
        for q in 0..nq {
            let h = 1e-6 * (1.0 + form_coord(&form, q).abs());
            let mut plus = form.clone();
            let mut minus = form.clone();
            *form_coord_mut(&mut plus, q) += h;
            *form_coord_mut(&mut minus, q) -= h;
            let vp = total_energy_report(&structure, &plus, &params).unwrap().v;
            let vm = total_energy_report(&structure, &minus, &params).unwrap().v;
            let fd = (vp - vm) / (2.0 * h);
            let scale = rep.grad.amax().max(1.0);
            assert!(
                (fd - rep.grad[q]).abs() <= 1e-6 * scale,
                "coord {q}: fd {fd} vs analytic {}",
                rep.grad[q]
            );
        }
    }

    #[test]
    fn all_springs_at_rest_no_gravity_gives_zero_gradient() {
        let (mut structure, form) = crate::scenes::springy_linkage(100.0, 0.9);
        structure.gravity = Vector3::zeros();
        let params: Vec<SpringParam> = structure.springs.iter().map(Spring::param).collect();
        let rep = total_energy_report(&structure, &form, &params).unwrap();
        assert!(rep.grad.amax() <= 1e-9, "gradient {}", rep.grad.amax());
    }

    fn coordinate_scale(p1: &Pose, p2: &Pose, i: usize) -> f64 {
        let v = match i {
            0..=2 => p1.p[i],
            3..=5 => p1.a[i - 3],
            6..=8 => p2.p[i - 6],
            _ => p2.a[i - 9],
        };
        1.0 + v.abs()
    }

    fn perturb(p1: &Pose, p2: &Pose, i: usize, h: f64) -> (Pose, Pose) {
        let mut a = *p1;
        let mut b = *p2;
        match i {
            0..=2 => a.p[i] += h,
            3..=5 => a.a[i - 3] += h,
            6..=8 => b.p[i - 6] += h,
            _ => b.a[i - 9] += h,
        }
        (a, b)
    }

    fn form_coord(form: &Form, q: usize) -> f64 {
        let b = q / 6;
        let k = q % 6;
        if k < 3 {
            form.poses[b].p[k]
        } else {
            form.poses[b].a[k - 3]
        }
    }

    fn form_coord_mut(form: &mut Form, q: usize) -> &mut f64 {
        let b = q / 6;
        let k = q % 6;
        if k < 3 {
            &mut form.poses[b].p[k]
        } else {
            &mut form.poses[b].a[k - 3]
        }
    }
}
