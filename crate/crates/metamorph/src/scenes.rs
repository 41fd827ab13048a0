//! Prefab structures: grounded chains built from vertex polylines and the
//! classic two-bar springy linkage, plus serial-chain kinematics helpers
//! (hinge angles and forward reconstruction) used for energy scans and
//! barrier estimates.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::rigidbody::{world_point, Bar, Form, Joint, JointKind, Pose, Structure};
use crate::scene::Scene;
use crate::spring_energy::Spring;

/// One bar fixed rigidly to the world at its current pose.
pub fn single_fixed_bar(length: f64) -> (Structure, Form) {
    let bar = Bar::rod(0, length);
    let poses = vec![Pose::planar(0.0, 0.0, 0.3)];
    let joint = Joint::fixed_at(0, None, Vector3::zeros(), &poses);
    (
        Structure {
            bars: vec![bar],
            joints: vec![joint],
            springs: vec![],
            gravity: Vector3::new(0.0, -crate::rigidbody::STANDARD_GRAVITY, 0.0),
        },
        Form {
            label: "fixed".into(),
            poses,
        },
    )
}

/// Two equal bars: the upper bar is fixed to the world pointing straight
/// down from the origin, the lower bar hangs from a z-hinge at its tip,
/// rotated by `angle` from straight-down. The single degree of freedom is
/// the lower bar's rotation about the hinge.
pub fn two_bar_chain(length: f64, angle: f64) -> (Structure, Form) {
    let bar0 = Bar::rod(0, length);
    let bar1 = Bar::rod(1, length);
    let half = 0.5 * length;
    let theta0 = -std::f64::consts::FRAC_PI_2;
    let pose0 = Pose::planar(0.0, -half, theta0);
    let dir = Vector2::new(angle.sin(), -angle.cos());
    let hinge_world = Vector2::new(0.0, -length);
    let mid1 = hinge_world + dir * half;
    let pose1 = Pose::planar(mid1.x, mid1.y, theta0 + angle);
    let poses = vec![pose0, pose1];
    let fixed = Joint::fixed_at(0, None, Vector3::zeros(), &poses);
    let hinge = Joint::hinge(
        0,
        Some(1),
        Vector3::new(half, 0.0, 0.0),
        Vector3::new(-half, 0.0, 0.0),
    );
    (
        Structure {
            bars: vec![bar0, bar1],
            joints: vec![fixed, hinge],
            springs: vec![],
            gravity: Vector3::new(0.0, -crate::rigidbody::STANDARD_GRAVITY, 0.0),
        },
        Form {
            label: format!("angle_{angle:.3}"),
            poses,
        },
    )
}

/// Two-bar chain with a spring joining the outer ends, at rest in the
/// returned form. Rotating the lower bar toward straight-down stretches the
/// spring, so the mirrored configurations at +/- `angle` are the two wells
/// of a bistable energy landscape.
pub fn springy_linkage(length: f64, angle: f64) -> (Structure, Form) {
    let (mut structure, form) = two_bar_chain(length, angle);
    let half = 0.5 * length;
    let u1 = Vector3::new(-half, 0.0, 0.0);
    let u2 = Vector3::new(half, 0.0, 0.0);
    let a = world_point(&form.poses[0], &u1);
    let c = world_point(&form.poses[1], &u2);
    let rest = (a - c).norm();
    structure.springs.push(Spring {
        id: 0,
        body_1: 0,
        body_2: 1,
        u1_local: u1,
        u2_local: u2,
        k: 1.0,
        l: rest,
        l0: rest,
        z_layer: None,
    });
    (structure, form)
}

/// Both mirror forms of the springy linkage.
pub fn springy_linkage_forms(length: f64, angle: f64) -> (Structure, [Form; 2]) {
    let (structure, mut form_a) = springy_linkage(length, angle);
    let (_, mut form_b) = two_bar_chain(length, -angle);
    form_a.label = "well_pos".into();
    form_b.label = "well_neg".into();
    (structure, [form_a, form_b])
}

/// Grounded open chain of `m` bars per form, built from `m + 1` vertices.
///
/// All forms share the topology; every bar is exactly `bar_length` long
/// (vertex chains are re-walked at that length along their own directions,
/// so joint constraints hold to machine precision). Forms after the first
/// are rigidly re-posed so the grounded first bar coincides across forms,
/// which the fixed-to-world joint requires.
pub fn chain_scene_from_vertices(
    vertex_forms: &[Vec<Vector2<f64>>],
    labels: &[&str],
    bar_length: f64,
    gravity: Vector3<f64>,
) -> Result<Scene> {
    if vertex_forms.is_empty() {
        return Err(Error::InvalidScene("no vertex chains given".into()));
    }
    let m = vertex_forms[0].len().saturating_sub(1);
    if m == 0 {
        return Err(Error::InvalidScene("need at least two vertices per form".into()));
    }
    for (i, vs) in vertex_forms.iter().enumerate() {
        if vs.len() != m + 1 {
            return Err(Error::InvalidScene(format!(
                "form {i} has {} vertices, expected {}",
                vs.len(),
                m + 1
            )));
        }
    }
    let half = 0.5 * bar_length;
    let mut all_poses: Vec<Vec<Pose>> = Vec::new();
    for vs in vertex_forms {
        let mut poses = Vec::with_capacity(m);
        let mut w = vs[0];
        for j in 0..m {
            let seg = vs[j + 1] - vs[j];
            let norm = seg.norm();
            if norm < 1e-12 {
                return Err(Error::InvalidScene(format!("coincident vertices at bar {j}")));
            }
            let dir = seg / norm;
            let next = w + dir * bar_length;
            let mid = (w + next) * 0.5;
            poses.push(Pose::planar(mid.x, mid.y, dir.y.atan2(dir.x)));
            w = next;
        }
        all_poses.push(poses);
    }
    // Rigidly align every later form so its first bar matches form 0.
    let ref_pose = all_poses[0][0];
    for poses in all_poses.iter_mut().skip(1) {
        let cur = poses[0];
        let dtheta = ref_pose.a.z - cur.a.z;
        let rot = nalgebra::Rotation2::new(dtheta);
        let pivot = Vector2::new(cur.p.x, cur.p.y);
        let target = Vector2::new(ref_pose.p.x, ref_pose.p.y);
        for pose in poses.iter_mut() {
            let xy = Vector2::new(pose.p.x, pose.p.y);
            let moved = rot * (xy - pivot) + target;
            *pose = Pose::planar(moved.x, moved.y, pose.a.z + dtheta);
        }
    }
    let bars: Vec<Bar> = (0..m).map(|j| Bar::rod(j, bar_length)).collect();
    let mut joints = vec![Joint::fixed_at(0, None, Vector3::zeros(), &all_poses[0])];
    for j in 1..m {
        joints.push(Joint::hinge(
            j - 1,
            Some(j),
            Vector3::new(half, 0.0, 0.0),
            Vector3::new(-half, 0.0, 0.0),
        ));
    }
    let structure = Structure {
        bars,
        joints,
        springs: vec![],
        gravity,
    };
    let forms = all_poses
        .into_iter()
        .enumerate()
        .map(|(i, poses)| Form {
            label: labels.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("form{i}")),
            poses,
        })
        .collect();
    let scene = Scene { structure, forms };
    scene.validate()?;
    Ok(scene)
}

/// Bar order of a serial chain: the grounded bar first, then each bar
/// reached through one hinge from its predecessor. `None` when the joint
/// graph is not a simple rooted path.
pub fn serial_chain_order(structure: &Structure) -> Option<Vec<usize>> {
    let n = structure.bars.len();
    let grounded: Vec<usize> = structure
        .joints
        .iter()
        .filter(|j| j.kind == JointKind::Fixed && j.body_j.is_none())
        .map(|j| j.body_i)
        .collect();
    if grounded.len() != 1 {
        return None;
    }
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (idx, j) in structure.joints.iter().enumerate() {
        if j.kind == JointKind::Hinge {
            let b = j.body_j?;
            adjacency[j.body_i].push((b, idx));
            adjacency[b].push((j.body_i, idx));
        }
    }
    let mut order = vec![grounded[0]];
    let mut used_joint = vec![false; structure.joints.len()];
    let mut visited = vec![false; n];
    visited[grounded[0]] = true;
    while order.len() < n {
        let last = *order.last().unwrap();
        let next: Vec<(usize, usize)> = adjacency[last]
            .iter()
            .copied()
            .filter(|&(b, jidx)| !visited[b] && !used_joint[jidx])
            .collect();
        if next.len() != 1 {
            return None;
        }
        let (b, jidx) = next[0];
        visited[b] = true;
        used_joint[jidx] = true;
        order.push(b);
    }
    Some(order)
}

/// Relative hinge angles of a planar serial chain form, one per link after
/// the root: z-rotation of each bar minus its predecessor's.
pub fn chain_hinge_angles(structure: &Structure, form: &Form, order: &[usize]) -> Vec<f64> {
    let _ = structure;
    order
        .windows(2)
        .map(|w| form.poses[w[1]].a.z - form.poses[w[0]].a.z)
        .collect()
}

/// Rebuilds a feasible planar chain form from hinge angles, walking the
/// chain from the (unchanged) grounded root.
pub fn form_from_chain_angles(
    structure: &Structure,
    base: &Form,
    order: &[usize],
    angles: &[f64],
) -> Form {
    let mut poses = base.poses.clone();
    for (step, w) in order.windows(2).enumerate() {
        let (parent, child) = (w[0], w[1]);
        let joint = structure
            .joints
            .iter()
            .find(|j| {
                j.kind == JointKind::Hinge
                    && ((j.body_i == parent && j.body_j == Some(child))
                        || (j.body_i == child && j.body_j == Some(parent)))
            })
            .expect("chain order implies a hinge");
        let (anchor_parent, anchor_child) = if joint.body_i == parent {
            (&joint.anchor_i, &joint.anchor_j)
        } else {
            (&joint.anchor_j, &joint.anchor_i)
        };
        let theta = poses[parent].a.z + angles[step];
        let pivot = world_point(&poses[parent], anchor_parent);
        let rot = nalgebra::Rotation2::new(theta);
        let arm = rot * Vector2::new(anchor_child.x, anchor_child.y);
        poses[child] = Pose::planar(pivot.x - arm.x, pivot.y - arm.y, theta);
    }
    Form {
        label: base.label.clone(),
        poses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_bar_chain_is_feasible() {
        for angle in [-1.2, -0.3, 0.0, 0.7, 2.0] {
            let (structure, form) = two_bar_chain(80.0, angle);
            structure.validate().unwrap();
            assert!(structure.max_constraint_violation(&form) <= 1e-9);
        }
    }

    #[test]
    fn springy_linkage_spring_at_rest() {
        let (structure, form) = springy_linkage(100.0, 0.8);
        let s = &structure.springs[0];
        let v = crate::spring_energy::spring_potential(s, &form.poses[0], &form.poses[1]).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn chain_scene_exact_feasibility_and_alignment() {
        let form_a: Vec<Vector2<f64>> = (0..=5)
            .map(|i| Vector2::new(10.0 * i as f64, 0.0))
            .collect();
        let form_b: Vec<Vector2<f64>> = (0..=5)
            .map(|i| {
                let t = i as f64 * 0.4;
                Vector2::new(25.0 * t.sin() + 3.0 * i as f64, 10.0 * t.cos())
            })
            .collect();
        let scene =
            chain_scene_from_vertices(&[form_a, form_b], &["a", "b"], 10.0, Vector3::zeros())
                .unwrap();
        assert_eq!(scene.structure.bars.len(), 5);
        for form in &scene.forms {
            assert!(scene.structure.max_constraint_violation(form) <= 1e-9);
        }
        // Grounded bar coincides across forms.
        let p0 = scene.forms[0].poses[0];
        let p1 = scene.forms[1].poses[0];
        assert_abs_diff_eq!(p0.p, p1.p, epsilon = 1e-9);
        assert_abs_diff_eq!(p0.a, p1.a, epsilon = 1e-9);
    }

    #[test]
    fn chain_angles_round_trip() {
        let form_b: Vec<Vector2<f64>> = (0..=4)
            .map(|i| {
                let t = i as f64 * 0.5;
                Vector2::new(20.0 * t.cos(), 20.0 * t.sin())
            })
            .collect();
        let form_a: Vec<Vector2<f64>> = (0..=4)
            .map(|i| Vector2::new(12.0 * i as f64, 1.0 * (i as f64).powi(2)))
            .collect();
        let scene =
            chain_scene_from_vertices(&[form_a, form_b], &["a", "b"], 14.0, Vector3::zeros())
                .unwrap();
        let order = serial_chain_order(&scene.structure).unwrap();
        let angles = chain_hinge_angles(&scene.structure, &scene.forms[1], &order);
        let rebuilt =
            form_from_chain_angles(&scene.structure, &scene.forms[0], &order, &angles);
        for (a, b) in rebuilt.poses.iter().zip(&scene.forms[1].poses) {
            assert_abs_diff_eq!(a.p, b.p, epsilon = 1e-8);
            assert_abs_diff_eq!(a.a, b.a, epsilon = 1e-8);
        }
        assert!(scene.structure.max_constraint_violation(&rebuilt) <= 1e-8);
    }
}
