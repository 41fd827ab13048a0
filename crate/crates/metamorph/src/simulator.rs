//! Forward rigid-body dynamics with constraint stabilization, restricted to
//! hinge and fixed joints: an implicit constraint-force solve
//! `A lambda = b` with `A = h J M^-1 J^T + a I`, `a = 1/(h k_p + k_d)`,
//! followed by a symplectic Euler velocity/position update. Used to confirm
//! that optimized forms are genuine attracting equilibria.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rigidbody::{
    assemble_velocity_jacobian, constraint_residual, Form, Pose, Structure,
};
use crate::rotation::{log_rotation, rodrigues};
use crate::spring_energy::{gravity_potential, spring_potential_total, spring_wrench, SpringParam};

/// Poses plus generalized velocities (linear mm/s, world angular rad/s,
/// six slots per bar).
#[derive(Debug, Clone)]
pub struct SimState {
    pub poses: Vec<Pose>,
    pub velocities: DVector<f64>,
    /// Simulated time, seconds.
    pub time: f64,
    /// Set when the constraint-force system went singular and a
    /// least-squares solve was used instead.
    pub lambda_fallback: bool,
}

impl SimState {
    pub fn at_rest(form: &Form) -> Self {
        SimState {
            poses: form.poses.clone(),
            velocities: DVector::zeros(6 * form.poses.len()),
            time: 0.0,
            lambda_fallback: false,
        }
    }

    pub fn form(&self, label: &str) -> Form {
        Form {
            label: label.to_string(),
            poses: self.poses.clone(),
        }
    }
}

/// Stepping parameters. Constraint gains follow the pin-joint defaults
/// (1e8 / 1e4); mass-proportional viscous damping pulls the system toward
/// statics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimParams {
    /// Time step, seconds.
    pub h: f64,
    /// Constraint stiffness (per joint row).
    pub k_p: f64,
    /// Constraint damping (per joint row).
    pub k_d: f64,
    /// Mass-proportional viscous damping coefficient, 1/s.
    pub viscous_damping: f64,
    pub max_steps: usize,
    /// Kinetic-energy settle threshold as a fraction of m_typ * L_typ^2.
    pub settle_ke_rel: f64,
    /// Consecutive below-threshold steps required once the system has been
    /// in motion; screens out the instantaneous near-zero kinetic energy at
    /// oscillation turning points.
    pub settle_hold_steps: usize,
    /// Form-classification tolerance as a fraction of the mean bar length.
    pub classify_rel: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            h: 1e-3,
            k_p: 1e8,
            k_d: 1e4,
            viscous_damping: 0.5,
            max_steps: 200_000,
            settle_ke_rel: 1e-10,
            settle_hold_steps: 50,
            classify_rel: 0.05,
        }
    }
}

fn rotations_of(poses: &[Pose]) -> Vec<Matrix3<f64>> {
    poses.iter().map(Pose::rotation).collect()
}

/// Applies the inverse mass matrix blockwise (world-frame inertia).
fn apply_mass_inverse(
    structure: &Structure,
    rot: &[Matrix3<f64>],
    v: &DVector<f64>,
) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for (b, bar) in structure.bars.iter().enumerate() {
        for k in 0..3 {
            out[6 * b + k] = v[6 * b + k] / bar.mass;
        }
        let iw = rot[b] * bar.inertia * rot[b].transpose();
        let inv = iw.try_inverse().expect("inertia tensor is positive-definite");
        let w = inv * Vector3::new(v[6 * b + 3], v[6 * b + 4], v[6 * b + 5]);
        out.fixed_rows_mut::<3>(6 * b + 3).copy_from(&w);
    }
    out
}

/// External generalized forces at a state: gravity, springs and viscous
/// damping (torques about each body origin).
fn external_forces(
    structure: &Structure,
    poses: &[Pose],
    rot: &[Matrix3<f64>],
    velocities: &DVector<f64>,
    params: &[SpringParam],
    damping: f64,
) -> Result<DVector<f64>> {
    let n = structure.bars.len();
    let mut f = DVector::zeros(6 * n);
    for (b, bar) in structure.bars.iter().enumerate() {
        f.fixed_rows_mut::<3>(6 * b)
            .copy_from(&(structure.gravity * bar.mass));
    }
    for (spring, param) in structure.springs.iter().zip(params) {
        let wrench = spring_wrench(spring, param, &poses[spring.body_1], &poses[spring.body_2])?;
        for (body, (force, torque)) in [spring.body_1, spring.body_2].into_iter().zip(wrench) {
            for k in 0..3 {
                f[6 * body + k] += force[k];
                f[6 * body + 3 + k] += torque[k];
            }
        }
    }
    if damping > 0.0 {
        for (b, bar) in structure.bars.iter().enumerate() {
            for k in 0..3 {
                f[6 * b + k] -= damping * bar.mass * velocities[6 * b + k];
            }
            let iw = rot[b] * bar.inertia * rot[b].transpose();
            let omega = Vector3::new(
                velocities[6 * b + 3],
                velocities[6 * b + 4],
                velocities[6 * b + 5],
            );
            let torque = iw * omega * (-damping);
            for k in 0..3 {
                f[6 * b + 3 + k] += torque[k];
            }
        }
    }
    Ok(f)
}

/// Kinetic energy `1/2 sum (m |v|^2 + w^T I_w w)`.
pub fn kinetic_energy(structure: &Structure, state: &SimState) -> f64 {
    let rot = rotations_of(&state.poses);
    let mut ke = 0.0;
    for (b, bar) in structure.bars.iter().enumerate() {
        let v = Vector3::new(
            state.velocities[6 * b],
            state.velocities[6 * b + 1],
            state.velocities[6 * b + 2],
        );
        let w = Vector3::new(
            state.velocities[6 * b + 3],
            state.velocities[6 * b + 4],
            state.velocities[6 * b + 5],
        );
        let iw = rot[b] * bar.inertia * rot[b].transpose();
        ke += 0.5 * bar.mass * v.norm_squared() + 0.5 * w.dot(&(iw * w));
    }
    ke
}

/// Total mechanical energy (kinetic + spring + gravity potential).
pub fn total_energy(structure: &Structure, state: &SimState, params: &[SpringParam]) -> Result<f64> {
    let form = state.form("");
    Ok(kinetic_energy(structure, state)
        + gravity_potential(structure, &form)
        + spring_potential_total(structure, &form, params)?)
}

/// One constraint-stabilized step.
pub fn step(
    structure: &Structure,
    state: &SimState,
    params: &[SpringParam],
    sim: &SimParams,
) -> Result<SimState> {
    let h = sim.h;
    let form = state.form("");
    let rot = rotations_of(&state.poses);
    let c = constraint_residual(structure, &form);
    let jac = assemble_velocity_jacobian(structure, &form);
    let f_ext = external_forces(
        structure,
        &state.poses,
        &rot,
        &state.velocities,
        params,
        sim.viscous_damping,
    )?;
    let minv_f = apply_mass_inverse(structure, &rot, &f_ext);

    let mut velocities = state.velocities.clone();
    let mut lambda_fallback = state.lambda_fallback;
    if jac.nrows() > 0 {
        let a_coeff = 1.0 / (h * sim.k_p + sim.k_d);
        // M^-1 J^T, one column per constraint row.
        let jt = jac.transpose();
        let mut minv_jt = DMatrix::zeros(jt.nrows(), jt.ncols());
        for col in 0..jt.ncols() {
            let v: DVector<f64> = jt.column(col).into();
            minv_jt.set_column(col, &apply_mass_inverse(structure, &rot, &v));
        }
        let mut a = &jac * &minv_jt * h;
        for i in 0..a.nrows() {
            a[(i, i)] += a_coeff;
        }
        let b = -(&c * (a_coeff * sim.k_p)) - &jac * &state.velocities - (&jac * &minv_f) * h;
        let lambda = match a.clone().cholesky() {
            Some(chol) => chol.solve(&b),
            None => {
                lambda_fallback = true;
                log::warn!("constraint system singular at t = {}; least-squares fallback", state.time);
                a.svd(true, true)
                    .solve(&b, 1e-12)
                    .map_err(|e| Error::NonFinite(format!("lambda solve failed: {e}")))?
            }
        };
        let constraint_force = jt * lambda;
        velocities += (minv_f + apply_mass_inverse(structure, &rot, &constraint_force)) * h;
    } else {
        velocities += minv_f * h;
    }

    // Position update: translations additively, rotations by composing the
    // exponential of the angular velocity.
    let mut poses = state.poses.clone();
    for (b, pose) in poses.iter_mut().enumerate() {
        for k in 0..3 {
            pose.p[k] += h * velocities[6 * b + k];
        }
        let omega = Vector3::new(
            velocities[6 * b + 3],
            velocities[6 * b + 4],
            velocities[6 * b + 5],
        );
        let r_new = rodrigues(&(omega * h)) * pose.rotation();
        pose.a = log_rotation(&r_new);
    }
    let next = SimState {
        poses,
        velocities,
        time: state.time + h,
        lambda_fallback,
    };
    if !next.poses.iter().all(Pose::is_finite) || !next.velocities.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "simulation state non-finite at t = {:.6}s",
            next.time
        )));
    }
    Ok(next)
}

/// Outcome of a settle run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// Index into the scene's form list.
    Form(usize),
    /// Came to rest away from every known form.
    Diverged,
    /// Kinetic energy still above threshold after max_steps.
    Unsettled,
}

/// Characteristic kinetic-energy settle threshold for a structure.
pub fn settle_threshold(structure: &Structure, sim: &SimParams) -> f64 {
    let n = structure.bars.len().max(1) as f64;
    let l = structure.bars.iter().map(|b| b.length).sum::<f64>() / n;
    let m = structure.bars.iter().map(|b| b.mass).sum::<f64>() / n;
    sim.settle_ke_rel * m * l * l
}

/// Applies a velocity perturbation at `start`, steps until the kinetic
/// energy drops below threshold (or max_steps), and classifies the settled
/// state against the known forms by nearest vertex positions.
///
/// Once the system has been in motion, the energy must stay below the
/// threshold for `settle_hold_steps` consecutive steps: kinetic energy also
/// passes through zero at oscillation turning points far from equilibrium.
pub fn settle(
    structure: &Structure,
    start: &Form,
    params: &[SpringParam],
    perturbation: &DVector<f64>,
    sim: &SimParams,
    known_forms: &[Form],
) -> Result<(SimState, Classification)> {
    settle_recorded(structure, start, params, perturbation, sim, known_forms, &mut |_| {})
}

/// [`settle`] with an observer invoked on every state (for trajectory
/// dumps).
#[allow(clippy::too_many_arguments)]
pub fn settle_recorded(
    structure: &Structure,
    start: &Form,
    params: &[SpringParam],
    perturbation: &DVector<f64>,
    sim: &SimParams,
    known_forms: &[Form],
    observer: &mut dyn FnMut(&SimState),
) -> Result<(SimState, Classification)> {
    assert_eq!(perturbation.len(), structure.num_coords());
    let mut state = SimState::at_rest(start);
    state.velocities = perturbation.clone();
    let ke_threshold = settle_threshold(structure, sim);
    let mut steps = 0;
    let mut quiet_steps = 0usize;
    let mut ever_moved = false;
    loop {
        observer(&state);
        if kinetic_energy(structure, &state) < ke_threshold {
            quiet_steps += 1;
            let hold = if ever_moved { sim.settle_hold_steps.max(1) } else { 1 };
            if quiet_steps >= hold {
                let class = classify(structure, &state, known_forms, sim);
                return Ok((state, class));
            }
        } else {
            quiet_steps = 0;
            ever_moved = true;
        }
        if steps >= sim.max_steps {
            return Ok((state, Classification::Unsettled));
        }
        state = step(structure, &state, params, sim)?;
        steps += 1;
    }
}

/// Nearest known form by maximum vertex distance, within tolerance.
pub fn classify(
    structure: &Structure,
    state: &SimState,
    known_forms: &[Form],
    sim: &SimParams,
) -> Classification {
    let settled = structure.world_endpoints(&state.form(""));
    let n = structure.bars.len().max(1) as f64;
    let l_char = structure.bars.iter().map(|b| b.length).sum::<f64>() / n;
    let tol = sim.classify_rel * l_char;
    let mut best: Option<(usize, f64)> = None;
    for (i, form) in known_forms.iter().enumerate() {
        let reference = structure.world_endpoints(form);
        let dist = settled
            .iter()
            .flatten()
            .zip(reference.iter().flatten())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        if best.map(|(_, d)| dist < d).unwrap_or(true) {
            best = Some((i, dist));
        }
    }
    match best {
        Some((i, d)) if d <= tol => Classification::Form(i),
        _ => Classification::Diverged,
    }
}

/// Energy barrier between two chain forms, estimated by scanning the total
/// potential along the linear hinge-angle interpolation path. Returns the
/// smaller climb of the two wells, or `None` for non-chain topologies.
pub fn estimate_barrier(
    structure: &Structure,
    forms: &[Form],
    params: &[SpringParam],
) -> Result<Option<f64>> {
    let Some(order) = crate::scenes::serial_chain_order(structure) else {
        return Ok(None);
    };
    if forms.len() < 2 {
        return Ok(None);
    }
    let a0 = crate::scenes::chain_hinge_angles(structure, &forms[0], &order);
    let a1 = crate::scenes::chain_hinge_angles(structure, &forms[1], &order);
    let samples = 2000;
    let mut v_max = f64::NEG_INFINITY;
    let mut v_ends = [0.0; 2];
    for i in 0..=samples {
        let t = i as f64 / samples as f64;
        let angles: Vec<f64> = a0
            .iter()
            .zip(&a1)
            .map(|(x, y)| x + (y - x) * t)
            .collect();
        let form = crate::scenes::form_from_chain_angles(structure, &forms[0], &order, &angles);
        let v = gravity_potential(structure, &form)
            + spring_potential_total(structure, &form, params)?;
        v_max = v_max.max(v);
        if i == 0 {
            v_ends[0] = v;
        }
        if i == samples {
            v_ends[1] = v;
        }
    }
    Ok(Some((v_max - v_ends[0]).min(v_max - v_ends[1]).max(0.0)))
}
