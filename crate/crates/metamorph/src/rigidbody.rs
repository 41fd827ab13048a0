//! Maximal-coordinate rigid-bar model: poses, joints, constraint residuals,
//! constraint Jacobians and null-space bases.
//!
//! Every bar carries 6 kinematic coordinates (3 translation, 3 axis-angle
//! rotation); joints are enforced as explicit constraint rows over the
//! stacked coordinate vector. Bars are indexed by position in
//! [`Structure::bars`], and the coordinate block of bar `b` occupies columns
//! `6b..6b+6` of every Jacobian.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{
    rodrigues, rotate_point_hessian, rotate_point_jacobian, rotation_gradient, rotation_hessian,
    skew, wrap_axis_angle,
};
use crate::spring_energy::Spring;

/// Default linear density of a bar, grams per millimeter.
pub const DEFAULT_LINEAR_DENSITY: f64 = 0.01;
/// Default square cross-section side of a bar, millimeters.
pub const DEFAULT_CROSS_SECTION: f64 = 2.0;
/// Default gravitational acceleration, mm/s^2, acting along -y.
pub const STANDARD_GRAVITY: f64 = 9810.0;

/// Rigid-body pose: translation plus axis-angle rotation vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Translation of the body frame origin (millimeters).
    pub p: Vector3<f64>,
    /// Axis-angle rotation vector (radians times unit axis), |a| < 2*pi.
    pub a: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            p: Vector3::zeros(),
            a: Vector3::zeros(),
        }
    }

    pub fn new(p: Vector3<f64>, a: Vector3<f64>) -> Self {
        Pose { p, a }
    }

    /// Planar pose: position (x, y) and rotation angle about z.
    pub fn planar(x: f64, y: f64, angle: f64) -> Self {
        Pose {
            p: Vector3::new(x, y, 0.0),
            a: Vector3::new(0.0, 0.0, angle),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rodrigues(&self.a)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.a.iter()).all(|v| v.is_finite())
    }

    /// Re-wraps the rotation vector to keep |a| below 2*pi.
    pub fn rewrap(&mut self) {
        self.a = wrap_axis_angle(&self.a);
    }
}

/// World position of a body-frame point under `pose`: `R(a) u + p`.
pub fn world_point(pose: &Pose, u_local: &Vector3<f64>) -> Vector3<f64> {
    pose.rotation() * u_local + pose.p
}

/// A rigid bar. The body frame origin sits at the centroid so gravity acts
/// purely on the translation coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bar {
    pub id: usize,
    /// The two bar ends in the body frame.
    pub endpoints_local: [Vector3<f64>; 2],
    /// Distance between the endpoints (millimeters).
    pub length: f64,
    /// Mass in grams.
    pub mass: f64,
    /// Body-frame inertia tensor, g*mm^2.
    #[serde(with = "mat3_serde")]
    pub inertia: Matrix3<f64>,
    /// Fabrication layer, assigned by the export stage.
    #[serde(default)]
    pub z_layer: Option<i32>,
}

impl Bar {
    /// Slender rod of the given length along the local x axis, with the
    /// default linear density and a small square cross-section so the
    /// inertia tensor stays positive-definite.
    pub fn rod(id: usize, length: f64) -> Self {
        Self::rod_with_density(id, length, DEFAULT_LINEAR_DENSITY)
    }

    pub fn rod_with_density(id: usize, length: f64, density: f64) -> Self {
        let mass = length * density;
        let w = DEFAULT_CROSS_SECTION;
        let axial = mass * w * w / 6.0;
        let perp = mass * (length * length + w * w) / 12.0;
        Bar {
            id,
            endpoints_local: [
                Vector3::new(-0.5 * length, 0.0, 0.0),
                Vector3::new(0.5 * length, 0.0, 0.0),
            ],
            length,
            mass,
            inertia: Matrix3::from_diagonal(&Vector3::new(axial, perp, perp)),
            z_layer: None,
        }
    }

    /// Local attachment point at line parameter `s` in [0, 1] between the
    /// two endpoints.
    pub fn point_on_line(&self, s: f64) -> Vector3<f64> {
        self.endpoints_local[0] * (1.0 - s) + self.endpoints_local[1] * s
    }

    /// Recovers the line parameter of a local point on the bar axis.
    pub fn line_parameter(&self, u_local: &Vector3<f64>) -> f64 {
        let d = self.endpoints_local[1] - self.endpoints_local[0];
        (u_local - self.endpoints_local[0]).dot(&d) / d.norm_squared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Hinge,
    Fixed,
}

/// A joint between `body_i` and `body_j`; `body_j = None` attaches to the
/// world frame, in which case `anchor_j` is a world-space point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Joint {
    pub kind: JointKind,
    pub body_i: usize,
    pub body_j: Option<usize>,
    pub anchor_i: Vector3<f64>,
    pub anchor_j: Vector3<f64>,
    /// Hinge axis in both local frames (unit).
    pub axis: Vector3<f64>,
    /// Fixed joints only: reference relative rotation R_j^T R_i at creation,
    /// stored as an axis-angle vector.
    #[serde(default)]
    pub rot_ref: Option<Vector3<f64>>,
}

impl Joint {
    pub fn hinge(body_i: usize, body_j: Option<usize>, anchor_i: Vector3<f64>, anchor_j: Vector3<f64>) -> Self {
        Joint {
            kind: JointKind::Hinge,
            body_i,
            body_j,
            anchor_i,
            anchor_j,
            axis: Vector3::z(),
            rot_ref: None,
        }
    }

    /// Fixed joint freezing the current relative pose of `body_i` with
    /// respect to `body_j` (or the world).
    pub fn fixed_at(body_i: usize, body_j: Option<usize>, anchor_i: Vector3<f64>, poses: &[Pose]) -> Self {
        let ri = poses[body_i].rotation();
        let (rj, pj) = match body_j {
            Some(j) => (poses[j].rotation(), poses[j].p),
            None => (Matrix3::identity(), Vector3::zeros()),
        };
        let anchor_world = ri * anchor_i + poses[body_i].p;
        let anchor_j = rj.transpose() * (anchor_world - pj);
        let rel = rj.transpose() * ri;
        Joint {
            kind: JointKind::Fixed,
            body_i,
            body_j,
            anchor_i,
            anchor_j,
            axis: Vector3::z(),
            rot_ref: Some(crate::rotation::log_rotation(&rel)),
        }
    }

    /// Number of constraint rows this joint contributes (always 6: three
    /// positional plus three rotational).
    pub fn rows(&self) -> usize {
        6
    }
}

/// The immutable topology: bars, joints, the growing spring set and gravity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Structure {
    pub bars: Vec<Bar>,
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub springs: Vec<Spring>,
    /// Gravitational acceleration vector, mm/s^2.
    pub gravity: Vector3<f64>,
}

/// One kinematic configuration of the structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Form {
    pub label: String,
    #[serde(with = "poses_serde")]
    pub poses: Vec<Pose>,
}

impl Structure {
    pub fn num_coords(&self) -> usize {
        6 * self.bars.len()
    }

    pub fn constraint_rows(&self) -> usize {
        self.joints.iter().map(Joint::rows).sum()
    }

    /// Validates ids, axes and grounding. Scenes must anchor at least one
    /// bar to the world with a fixed joint so statics is well-posed.
    pub fn validate(&self) -> Result<()> {
        let n = self.bars.len();
        if n == 0 {
            return Err(Error::InvalidScene("structure has no bars".into()));
        }
        for (i, bar) in self.bars.iter().enumerate() {
            if bar.id != i {
                return Err(Error::InvalidScene(format!(
                    "bar at index {i} has id {}; ids must be dense and ordered",
                    bar.id
                )));
            }
            let len = (bar.endpoints_local[0] - bar.endpoints_local[1]).norm();
            if (len - bar.length).abs() > 1e-6 * bar.length.max(1.0) {
                return Err(Error::InvalidScene(format!(
                    "bar {i}: endpoint distance {len} does not match length {}",
                    bar.length
                )));
            }
            if !(bar.mass > 0.0) {
                return Err(Error::InvalidScene(format!("bar {i}: mass must be positive")));
            }
        }
        let mut grounded = false;
        for (k, j) in self.joints.iter().enumerate() {
            if j.body_i >= n {
                return Err(Error::InvalidScene(format!("joint {k}: body_i out of range")));
            }
            if let Some(b) = j.body_j {
                if b >= n {
                    return Err(Error::InvalidScene(format!("joint {k}: body_j out of range")));
                }
                if b == j.body_i {
                    return Err(Error::InvalidScene(format!("joint {k}: body_i == body_j")));
                }
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidScene(format!("joint {k}: axis not normalized")));
            }
            if j.kind == JointKind::Fixed {
                if j.rot_ref.is_none() {
                    return Err(Error::InvalidScene(format!("joint {k}: fixed joint missing rot_ref")));
                }
                if j.body_j.is_none() {
                    grounded = true;
                }
            }
        }
        if !grounded {
            return Err(Error::InvalidScene(
                "structure has no fixed-to-world joint; ground at least one bar".into(),
            ));
        }
        for s in &self.springs {
            if s.body_1 >= n || s.body_2 >= n {
                return Err(Error::InvalidScene(format!("spring {}: bar id out of range", s.id)));
            }
            if s.body_1 == s.body_2 {
                return Err(Error::InvalidScene(format!("spring {}: attaches a bar to itself", s.id)));
            }
        }
        Ok(())
    }

    /// World positions of both endpoints of every bar.
    pub fn world_endpoints(&self, form: &Form) -> Vec<[Vector3<f64>; 2]> {
        self.bars
            .iter()
            .zip(&form.poses)
            .map(|(bar, pose)| {
                [
                    world_point(pose, &bar.endpoints_local[0]),
                    world_point(pose, &bar.endpoints_local[1]),
                ]
            })
            .collect()
    }

    /// Maximum absolute joint-constraint violation of a form, millimeters
    /// (rotational rows are dimensionless but share the budget).
    pub fn max_constraint_violation(&self, form: &Form) -> f64 {
        let c = constraint_residual(self, form);
        c.amax()
    }
}

/// Rotation matrices of every bar in a form.
fn rotations(form: &Form) -> Vec<Matrix3<f64>> {
    form.poses.iter().map(Pose::rotation).collect()
}

/// World anchor of one joint side; the world side is constant.
fn side_world(form: &Form, rot: &[Matrix3<f64>], body: Option<usize>, anchor: &Vector3<f64>) -> Vector3<f64> {
    match body {
        Some(b) => rot[b] * anchor + form.poses[b].p,
        None => *anchor,
    }
}

/// Stacked joint constraint residual. Per joint: three world-anchor
/// coincidence rows, then three rotational rows (axis alignment for hinges,
/// relative-rotation deviation for fixed joints).
pub fn constraint_residual(structure: &Structure, form: &Form) -> DVector<f64> {
    let rot = rotations(form);
    let mut c = DVector::zeros(structure.constraint_rows());
    let mut row = 0;
    for joint in &structure.joints {
        let wi = side_world(form, &rot, Some(joint.body_i), &joint.anchor_i);
        let wj = side_world(form, &rot, joint.body_j, &joint.anchor_j);
        let dp = wi - wj;
        c.fixed_rows_mut::<3>(row).copy_from(&dp);
        match joint.kind {
            JointKind::Hinge => {
                let ni = rot[joint.body_i] * joint.axis;
                let nj = match joint.body_j {
                    Some(b) => rot[b] * joint.axis,
                    None => joint.axis,
                };
                c.fixed_rows_mut::<3>(row + 3).copy_from(&(ni - nj));
            }
            JointKind::Fixed => {
                let e = relative_rotation_error(joint, &rot);
                c.fixed_rows_mut::<3>(row + 3).copy_from(&vee_antisym(&e));
            }
        }
        row += 6;
    }
    c
}

/// E = R_i R_ref^T R_j^T for a fixed joint; identity when the relative
/// rotation matches its creation value.
fn relative_rotation_error(joint: &Joint, rot: &[Matrix3<f64>]) -> Matrix3<f64> {
    let r_ref = rodrigues(joint.rot_ref.as_ref().expect("fixed joint has rot_ref"));
    let rj_t = match joint.body_j {
        Some(b) => rot[b].transpose(),
        None => Matrix3::identity(),
    };
    rot[joint.body_i] * r_ref.transpose() * rj_t
}

/// vee of the antisymmetric part of a matrix.
fn vee_antisym(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Coordinate Jacobian dC/dq. One row per constraint row, six columns per
/// bar; rotational blocks come from the axis-angle derivative of R. The
/// world side contributes no columns.
pub fn assemble_jacobian(structure: &Structure, form: &Form) -> DMatrix<f64> {
    let rot = rotations(form);
    let mut j = DMatrix::zeros(structure.constraint_rows(), structure.num_coords());
    let mut row = 0;
    for joint in &structure.joints {
        let bi = joint.body_i;
        let ai = &form.poses[bi].a;
        // Positional rows.
        j.view_mut((row, 6 * bi), (3, 3)).copy_from(&Matrix3::identity());
        j.view_mut((row, 6 * bi + 3), (3, 3))
            .copy_from(&rotate_point_jacobian(ai, &joint.anchor_i));
        if let Some(bj) = joint.body_j {
            let aj = &form.poses[bj].a;
            j.view_mut((row, 6 * bj), (3, 3))
                .copy_from(&(-Matrix3::identity()));
            j.view_mut((row, 6 * bj + 3), (3, 3))
                .copy_from(&(-rotate_point_jacobian(aj, &joint.anchor_j)));
        }
        // Rotational rows.
        match joint.kind {
            JointKind::Hinge => {
                j.view_mut((row + 3, 6 * bi + 3), (3, 3))
                    .copy_from(&rotate_point_jacobian(ai, &joint.axis));
                if let Some(bj) = joint.body_j {
                    let aj = &form.poses[bj].a;
                    j.view_mut((row + 3, 6 * bj + 3), (3, 3))
                        .copy_from(&(-rotate_point_jacobian(aj, &joint.axis)));
                }
            }
            JointKind::Fixed => {
                let r_ref = rodrigues(joint.rot_ref.as_ref().unwrap());
                let rj_t = match joint.body_j {
                    Some(b) => rot[b].transpose(),
                    None => Matrix3::identity(),
                };
                let tail = r_ref.transpose() * rj_t;
                let mut block_i = Matrix3::zeros();
                for k in 0..3 {
                    let de = rotation_gradient(ai, k) * tail;
                    block_i.set_column(k, &vee_antisym(&de));
                }
                j.view_mut((row + 3, 6 * bi + 3), (3, 3)).copy_from(&block_i);
                if let Some(bj) = joint.body_j {
                    let aj = &form.poses[bj].a;
                    let head = rot[bi] * r_ref.transpose();
                    let mut block_j = Matrix3::zeros();
                    for k in 0..3 {
                        let de = head * rotation_gradient(aj, k).transpose();
                        block_j.set_column(k, &vee_antisym(&de));
                    }
                    j.view_mut((row + 3, 6 * bj + 3), (3, 3)).copy_from(&block_j);
                }
            }
        }
        row += 6;
    }
    j
}

/// Velocity-space Jacobian mapping stacked (linear velocity, world angular
/// velocity) pairs to constraint-rate rows; used by the forward simulator.
pub fn assemble_velocity_jacobian(structure: &Structure, form: &Form) -> DMatrix<f64> {
    let rot = rotations(form);
    let mut j = DMatrix::zeros(structure.constraint_rows(), structure.num_coords());
    let mut row = 0;
    for joint in &structure.joints {
        let bi = joint.body_i;
        j.view_mut((row, 6 * bi), (3, 3)).copy_from(&Matrix3::identity());
        j.view_mut((row, 6 * bi + 3), (3, 3))
            .copy_from(&(-skew(&(rot[bi] * joint.anchor_i))));
        if let Some(bj) = joint.body_j {
            j.view_mut((row, 6 * bj), (3, 3)).copy_from(&(-Matrix3::identity()));
            j.view_mut((row, 6 * bj + 3), (3, 3))
                .copy_from(&skew(&(rot[bj] * joint.anchor_j)));
        }
        match joint.kind {
            JointKind::Hinge => {
                j.view_mut((row + 3, 6 * bi + 3), (3, 3))
                    .copy_from(&(-skew(&(rot[bi] * joint.axis))));
                if let Some(bj) = joint.body_j {
                    j.view_mut((row + 3, 6 * bj + 3), (3, 3))
                        .copy_from(&skew(&(rot[bj] * joint.axis)));
                }
            }
            JointKind::Fixed => {
                // d/dt vee(antisym(E)) with E-dot = [w_i]x E - E [w_j]x.
                let e = relative_rotation_error(joint, &rot);
                let mut block_i = Matrix3::zeros();
                let mut block_j = Matrix3::zeros();
                for k in 0..3 {
                    let mut ek = Vector3::zeros();
                    ek[k] = 1.0;
                    let sk = skew(&ek);
                    block_i.set_column(k, &vee_antisym(&(sk * e)));
                    block_j.set_column(k, &vee_antisym(&(-e * sk)));
                }
                j.view_mut((row + 3, 6 * bi + 3), (3, 3)).copy_from(&block_i);
                if let Some(bj) = joint.body_j {
                    j.view_mut((row + 3, 6 * bj + 3), (3, 3)).copy_from(&block_j);
                }
            }
        }
        row += 6;
    }
    j
}

/// Sum over constraint rows of `lambda_c * d2C_c/dq2`: the geometric
/// stiffness carried by the constraint manifold under internal loads.
pub fn weighted_constraint_hessian(
    structure: &Structure,
    form: &Form,
    lambda: &DVector<f64>,
) -> DMatrix<f64> {
    let rot = rotations(form);
    let nq = structure.num_coords();
    let mut h = DMatrix::zeros(nq, nq);
    let mut row = 0;
    for joint in &structure.joints {
        let bi = joint.body_i;
        let ai = &form.poses[bi].a;
        // Positional rows: second derivative of R u lives in the a-a block.
        accumulate_point_curvature(&mut h, bi, ai, &joint.anchor_i, lambda, row, 1.0);
        if let Some(bj) = joint.body_j {
            let aj = &form.poses[bj].a;
            accumulate_point_curvature(&mut h, bj, aj, &joint.anchor_j, lambda, row, -1.0);
        }
        match joint.kind {
            JointKind::Hinge => {
                accumulate_point_curvature(&mut h, bi, ai, &joint.axis, lambda, row + 3, 1.0);
                if let Some(bj) = joint.body_j {
                    let aj = &form.poses[bj].a;
                    accumulate_point_curvature(&mut h, bj, aj, &joint.axis, lambda, row + 3, -1.0);
                }
            }
            JointKind::Fixed => {
                let r_ref = rodrigues(joint.rot_ref.as_ref().unwrap());
                let rj_t = match joint.body_j {
                    Some(b) => rot[b].transpose(),
                    None => Matrix3::identity(),
                };
                let tail = r_ref.transpose() * rj_t;
                // a_i a_i block.
                for k in 0..3 {
                    for l in 0..3 {
                        let d2e = rotation_hessian(ai, k, l) * tail;
                        let w = lambda_dot(lambda, row + 3, &vee_antisym(&d2e));
                        h[(6 * bi + 3 + k, 6 * bi + 3 + l)] += w;
                    }
                }
                if let Some(bj) = joint.body_j {
                    let aj = &form.poses[bj].a;
                    let head = rot[bi] * r_ref.transpose();
                    // a_j a_j block.
                    for k in 0..3 {
                        for l in 0..3 {
                            let d2e = head * rotation_hessian(aj, k, l).transpose();
                            let w = lambda_dot(lambda, row + 3, &vee_antisym(&d2e));
                            h[(6 * bj + 3 + k, 6 * bj + 3 + l)] += w;
                        }
                    }
                    // Cross a_i a_j blocks.
                    for k in 0..3 {
                        for l in 0..3 {
                            let d2e = rotation_gradient(ai, k)
                                * r_ref.transpose()
                                * rotation_gradient(aj, l).transpose();
                            let w = lambda_dot(lambda, row + 3, &vee_antisym(&d2e));
                            h[(6 * bi + 3 + k, 6 * bj + 3 + l)] += w;
                            h[(6 * bj + 3 + l, 6 * bi + 3 + k)] += w;
                        }
                    }
                }
            }
        }
        row += 6;
    }
    h
}

fn lambda_dot(lambda: &DVector<f64>, row: usize, v: &Vector3<f64>) -> f64 {
    lambda[row] * v.x + lambda[row + 1] * v.y + lambda[row + 2] * v.z
}

fn accumulate_point_curvature(
    h: &mut DMatrix<f64>,
    body: usize,
    a: &Vector3<f64>,
    u: &Vector3<f64>,
    lambda: &DVector<f64>,
    row: usize,
    sign: f64,
) {
    let hess = rotate_point_hessian(a, u);
    for k in 0..3 {
        for l in 0..3 {
            h[(6 * body + 3 + k, 6 * body + 3 + l)] += sign * lambda_dot(lambda, row, &hess[k][l]);
        }
    }
}

/// Orthonormal basis of the constraint-Jacobian null space.
#[derive(Debug, Clone)]
pub struct NullBasis {
    /// Rows are basis vectors of feasible instantaneous motions; r x 6n.
    pub n: DMatrix<f64>,
    /// Singular-value threshold used to decide rank.
    pub sigma_cut: f64,
}

impl NullBasis {
    pub fn dim(&self) -> usize {
        self.n.nrows()
    }

    /// Back-projects a reduced vector into the full coordinate space.
    pub fn lift(&self, reduced: &DVector<f64>) -> DVector<f64> {
        self.n.transpose() * reduced
    }

    /// Projects a full coordinate vector into the reduced space.
    pub fn project(&self, full: &DVector<f64>) -> DVector<f64> {
        &self.n * full
    }
}

/// Computes an orthonormal null-space basis of `j` by singular-value
/// decomposition with threshold `1e-8 * sigma_max`.
///
/// Errors with [`Error::LockedStructure`] when the null space is empty.
pub fn null_space_basis(j: &DMatrix<f64>) -> Result<NullBasis> {
    let ncols = j.ncols();
    if j.nrows() == 0 {
        return Ok(NullBasis {
            n: DMatrix::identity(ncols, ncols),
            sigma_cut: 0.0,
        });
    }
    // Pad with zero rows so the thin SVD exposes all right singular vectors.
    let work = if j.nrows() < ncols {
        let mut padded = DMatrix::zeros(ncols, ncols);
        padded.view_mut((0, 0), (j.nrows(), ncols)).copy_from(j);
        padded
    } else {
        j.clone()
    };
    let svd = work.svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let sigma_cut = 1e-8 * sigma_max;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[a]
            .partial_cmp(&svd.singular_values[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut rows: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] <= sigma_cut)
        .collect();
    // v_t may have fewer rows than ncols when the input was wide but
    // unpadded (nrows >= ncols case keeps v_t square at ncols).
    rows.retain(|&i| i < v_t.nrows());
    if rows.is_empty() {
        return Err(Error::LockedStructure);
    }
    let mut n = DMatrix::zeros(rows.len(), ncols);
    for (out_row, &i) in rows.iter().enumerate() {
        n.row_mut(out_row).copy_from(&v_t.row(i));
    }
    Ok(NullBasis { n, sigma_cut })
}

mod mat3_serde {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ];
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
            rows[2][1], rows[2][2],
        ))
    }
}

mod poses_serde {
    use super::Pose;
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(poses: &[Pose], s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<[f64; 6]> = poses
            .iter()
            .map(|q| [q.p.x, q.p.y, q.p.z, q.a.x, q.a.y, q.a.z])
            .collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Pose>, D::Error> {
        let flat = Vec::<[f64; 6]>::deserialize(d)?;
        Ok(flat
            .into_iter()
            .map(|v| Pose {
                p: Vector3::new(v[0], v[1], v[2]),
                a: Vector3::new(v[3], v[4], v[5]),
            })
            .collect())
    }
}
