//! Two-form energy-shaping optimizer over spring stiffnesses and rest
//! lengths: drives the null-space-projected force residual of both forms to
//! zero while keeping every eigenvalue of each form's projected energy
//! Hessian above a margin, under box constraints, via an augmented
//! Lagrangian with a projected-BFGS inner loop. Design-space derivatives
//! are central finite differences over analytic energy evaluations.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rigidbody::{
    assemble_jacobian, null_space_basis, weighted_constraint_hessian, Form, NullBasis, Structure,
};
use crate::scene::{FormStability, StabilityReport};
use crate::solver::{self, AlmOptions, BfgsOptions, Bounds, MeritGradient};
use crate::spring_energy::{
    gravity_force, spring_gradient_total, spring_hessian_total, spring_potential_total, Spring,
    SpringParam,
};

/// Relative stiffness box around the reference fabrication stiffness.
pub const STIFFNESS_BOX: (f64, f64) = (0.01, 100.0);
/// Relative rest-length box around each spring's creation rest length.
pub const REST_LENGTH_BOX: (f64, f64) = (0.5, 1.5);

/// The design variables: per-spring stiffness and rest length, with their
/// box bounds. Flat layout is `[k_0, l_0, k_1, l_1, ...]`.
#[derive(Debug, Clone)]
pub struct DesignVector {
    pub params: Vec<SpringParam>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl DesignVector {
    /// Builds the design vector from the structure's current springs;
    /// stiffness bounds scale with the reference stiffness `k0`, rest
    /// length bounds with each spring's creation rest length.
    pub fn from_springs(springs: &[Spring], k0: f64) -> Self {
        let mut params = Vec::with_capacity(springs.len());
        let mut lb = Vec::with_capacity(2 * springs.len());
        let mut ub = Vec::with_capacity(2 * springs.len());
        for s in springs {
            params.push(s.param());
            lb.push(STIFFNESS_BOX.0 * k0);
            ub.push(STIFFNESS_BOX.1 * k0);
            lb.push(REST_LENGTH_BOX.0 * s.l0);
            ub.push(REST_LENGTH_BOX.1 * s.l0);
        }
        DesignVector { params, lb, ub }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn flat(&self) -> DVector<f64> {
        let mut x = DVector::zeros(2 * self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            x[2 * i] = p.k;
            x[2 * i + 1] = p.l;
        }
        x
    }

    pub fn set_flat(&mut self, x: &DVector<f64>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            p.k = x[2 * i];
            p.l = x[2 * i + 1];
        }
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::new(
            DVector::from_vec(self.lb.clone()),
            DVector::from_vec(self.ub.clone()),
        )
    }

    /// Writes the design values back into the structure's springs.
    pub fn apply_to(&self, structure: &mut Structure) {
        for (spring, p) in structure.springs.iter_mut().zip(&self.params) {
            spring.k = p.k;
            spring.l = p.l;
        }
    }
}

fn params_from_flat(x: &DVector<f64>) -> Vec<SpringParam> {
    (0..x.len() / 2)
        .map(|i| SpringParam {
            k: x[2 * i],
            l: x[2 * i + 1],
        })
        .collect()
}

/// Optimizer knobs. Tolerances left `None` are resolved from the structure
/// scale: the eigenvalue margin as `1e-4 k0 L^2` and the residual tolerance
/// as `1e-6 m g L` (characteristic bar mass/length, standard gravity).
#[derive(Debug, Clone)]
pub struct OptimizerOptions {
    /// Potential regularizer weight.
    pub w: f64,
    /// Minimum accepted projected-Hessian eigenvalue.
    pub eig_margin: Option<f64>,
    /// First-order residual norm tolerance.
    pub residual_tol: Option<f64>,
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Relative central finite-difference step for design derivatives.
    pub fd_step: f64,
    /// Reference fabrication stiffness of the scene, g/s^2.
    pub k0: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            w: 0.001,
            eig_margin: None,
            residual_tol: None,
            max_outer: 50,
            max_inner: 200,
            penalty_growth: 10.0,
            penalty_max: 1e8,
            fd_step: 1e-6,
            k0: 1.0,
        }
    }
}

/// Concrete tolerances after scale resolution.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedTols {
    pub eig_margin: f64,
    pub residual_tol: f64,
}

pub fn resolve_tolerances(structure: &Structure, opts: &OptimizerOptions) -> ResolvedTols {
    let n = structure.bars.len().max(1) as f64;
    let l_char = structure.bars.iter().map(|b| b.length).sum::<f64>() / n;
    let m_char = structure.bars.iter().map(|b| b.mass).sum::<f64>() / n;
    ResolvedTols {
        eig_margin: opts
            .eig_margin
            .unwrap_or(1e-4 * opts.k0 * l_char * l_char),
        residual_tol: opts
            .residual_tol
            .unwrap_or(1e-6 * m_char * crate::rigidbody::STANDARD_GRAVITY * l_char),
    }
}

/// Per-form quantities that do not depend on the design: the constraint
/// Jacobian (with a factored transpose for multiplier solves), its
/// null-space basis and the external (gravity) force.
#[derive(Debug, Clone)]
pub struct FormContext {
    pub jacobian: DMatrix<f64>,
    pub null: NullBasis,
    pub f_ext: DVector<f64>,
    jt_svd: Option<nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

pub fn form_context(structure: &Structure, form: &Form) -> Result<FormContext> {
    let jacobian = assemble_jacobian(structure, form);
    let null = null_space_basis(&jacobian)?;
    let jt_svd = if jacobian.nrows() > 0 {
        Some(jacobian.transpose().svd(true, true))
    } else {
        None
    };
    Ok(FormContext {
        jacobian,
        null,
        f_ext: gravity_force(structure),
        jt_svd,
    })
}

impl FormContext {
    /// Least-squares constraint multipliers balancing a total-potential
    /// gradient: solves `J^T lambda = grad V_total`.
    pub fn multipliers(&self, grad_total: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.jt_svd {
            Some(svd) => svd
                .solve(grad_total, 1e-12)
                .map_err(|e| Error::NonFinite(format!("multiplier solve failed: {e}"))),
            None => Ok(DVector::zeros(0)),
        }
    }
}

/// Null-space-projected force residual `N (f_ext - grad V_spring)` of one
/// form; equals `-N grad V_total` since gravity is the only external force.
pub fn first_order_residual(
    structure: &Structure,
    form: &Form,
    params: &[SpringParam],
) -> Result<DVector<f64>> {
    let ctx = form_context(structure, form)?;
    residual_in_context(structure, form, params, &ctx)
}

pub fn residual_in_context(
    structure: &Structure,
    form: &Form,
    params: &[SpringParam],
    ctx: &FormContext,
) -> Result<DVector<f64>> {
    let grad_spring = spring_gradient_total(structure, form, params)?;
    Ok(ctx.null.project(&(&ctx.f_ext - grad_spring)))
}

/// Reduced energy Hessian over feasible motions:
/// `N (H - sum_c lambda_c d2C_c) N^T` with the multipliers solving
/// `J^T lambda = grad V_total` in the least-squares sense.
///
/// The energy Hessian `H` carries the springs only (gravity is linear in
/// these coordinates); the second term is the geometric stiffness of the
/// constraint manifold under the current internal loads, which is what a
/// feasible-path second difference actually measures. Both extra terms
/// vanish when the structure is load-free, where this reduces to the plain
/// projected spring Hessian.
pub fn projected_hessian(
    structure: &Structure,
    form: &Form,
    params: &[SpringParam],
) -> Result<DMatrix<f64>> {
    let ctx = form_context(structure, form)?;
    projected_hessian_in_context(structure, form, params, &ctx)
}

pub fn projected_hessian_in_context(
    structure: &Structure,
    form: &Form,
    params: &[SpringParam],
    ctx: &FormContext,
) -> Result<DMatrix<f64>> {
    let h = spring_hessian_total(structure, form, params)?;
    let grad_total = spring_gradient_total(structure, form, params)? - &ctx.f_ext;
    let lambda = ctx.multipliers(&grad_total)?;
    let geometric = weighted_constraint_hessian(structure, form, &lambda);
    Ok(&ctx.null.n * (h - geometric) * ctx.null.n.transpose())
}

/// Design-space evaluation model of one form.
///
/// With the poses fixed, every spring's force factor is
/// `phi = k (1 - l/d)` with `d` constant, and the residual, projected
/// Hessian and potential are linear in `phi` (plus `k l / d^3` outer
/// products), so all geometry can be projected once and design sweeps cost
/// O(springs * r^2) instead of re-assembling 12x12 blocks per evaluation.
/// Agrees with the direct evaluation path to roundoff.
#[derive(Debug, Clone)]
pub struct DesignModel {
    /// N f_ext.
    r0: DVector<f64>,
    /// Geometric stiffness of the gravity load alone (projected).
    g_base: DMatrix<f64>,
    springs: Vec<SpringModel>,
}

#[derive(Debug, Clone)]
struct SpringModel {
    /// Projected force direction N scatter(h), h_i = g . dg_i.
    b: DVector<f64>,
    /// Projected stretch-independent Hessian part N scatter(A) N^T.
    p: DMatrix<f64>,
    /// Outer product of the projected force direction.
    bb: DMatrix<f64>,
    /// Geometric stiffness per unit force factor (projected).
    g1: DMatrix<f64>,
    /// Attachment distance at this form.
    d: f64,
}

impl DesignModel {
    pub fn new(structure: &Structure, form: &Form, ctx: &FormContext) -> Result<Self> {
        let nq = structure.num_coords();
        let rows = ctx.jacobian.nrows();
        // Projected per-row constraint curvature.
        let mut row_curvature: Vec<DMatrix<f64>> = Vec::with_capacity(rows);
        for c in 0..rows {
            let mut e = DVector::zeros(rows);
            e[c] = 1.0;
            let gc = weighted_constraint_hessian(structure, form, &e);
            row_curvature.push(&ctx.null.n * gc * ctx.null.n.transpose());
        }
        let weighted_sum = |lambda: &DVector<f64>| -> DMatrix<f64> {
            let mut acc = DMatrix::zeros(ctx.null.dim(), ctx.null.dim());
            for (c, gc) in row_curvature.iter().enumerate() {
                acc += gc * lambda[c];
            }
            acc
        };
        let lambda_base = ctx.multipliers(&(-&ctx.f_ext))?;
        let g_base = weighted_sum(&lambda_base);
        let mut springs = Vec::with_capacity(structure.springs.len());
        for spring in &structure.springs {
            let pose_1 = &form.poses[spring.body_1];
            let pose_2 = &form.poses[spring.body_2];
            let g_vec = pose_1.rotation() * spring.u1_local + pose_1.p
                - pose_2.rotation() * spring.u2_local
                - pose_2.p;
            let d = g_vec.norm();
            if d < crate::spring_energy::DEGENERATE_LENGTH {
                return Err(Error::DegenerateSpring { id: spring.id });
            }
            // Unit-parameter probes recover the per-spring structure
            // exactly: the gradient at (k=1, l=0) is h, and the Hessian at
            // (k=1, l=0) is A (the outer-product term vanishes with l).
            let probe = SpringParam { k: 1.0, l: 0.0 };
            let g12 = crate::spring_energy::spring_gradient_with(spring, &probe, pose_1, pose_2)?;
            let a12 = crate::spring_energy::spring_hessian_with(spring, &probe, pose_1, pose_2)?;
            let mut h_full = DVector::zeros(nq);
            let mut a_full = DMatrix::zeros(nq, nq);
            let idx = [6 * spring.body_1, 6 * spring.body_2];
            for (slot_i, qi) in (0..12).map(|s| (s, idx[s / 6] + s % 6)) {
                h_full[qi] += g12[slot_i];
                for (slot_j, qj) in (0..12).map(|s| (s, idx[s / 6] + s % 6)) {
                    a_full[(qi, qj)] += a12[(slot_i, slot_j)];
                }
            }
            let b = ctx.null.project(&h_full);
            let p = &ctx.null.n * &a_full * ctx.null.n.transpose();
            let bb = &b * b.transpose();
            let lambda_s = ctx.multipliers(&h_full)?;
            let g1 = weighted_sum(&lambda_s);
            springs.push(SpringModel { b, p, bb, g1, d });
        }
        Ok(DesignModel {
            r0: ctx.null.project(&ctx.f_ext),
            g_base,
            springs,
        })
    }

    fn force_factor(s: &SpringModel, param: &SpringParam) -> f64 {
        param.k * (1.0 - param.l / s.d)
    }

    /// `N (f_ext - grad V_spring)`.
    pub fn residual(&self, params: &[SpringParam]) -> DVector<f64> {
        let mut r = self.r0.clone();
        for (s, param) in self.springs.iter().zip(params) {
            r -= &s.b * Self::force_factor(s, param);
        }
        r
    }

    /// Reduced Hessian including the geometric stiffness.
    pub fn hessian(&self, params: &[SpringParam]) -> DMatrix<f64> {
        let mut h = self.g_base.clone();
        for (s, param) in self.springs.iter().zip(params) {
            let phi = Self::force_factor(s, param);
            h += &s.p * phi + &s.bb * (param.k * param.l / (s.d * s.d * s.d)) - &s.g1 * phi;
        }
        h
    }

    /// Spring potential at this form.
    pub fn potential(&self, params: &[SpringParam]) -> f64 {
        self.springs
            .iter()
            .zip(params)
            .map(|(s, p)| 0.5 * p.k * (p.l - s.d) * (p.l - s.d))
            .sum()
    }
}

/// Eigenvalues (ascending) and matching eigenvectors (columns) of a
/// symmetric projected Hessian.
pub fn sorted_eigen(h: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(h.nrows(), h.ncols());
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Objective of the two-form optimization:
/// `sum_i [ 1/2 |r_i|^2 + w V_i ]` over the forms, with `V_i` the spring
/// potential of form `i`.
pub fn stability_objective(
    structure: &Structure,
    forms: &[Form],
    params: &[SpringParam],
    w: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for form in forms {
        let r = first_order_residual(structure, form, params)?;
        total += 0.5 * r.norm_squared() + w * spring_potential_total(structure, form, params)?;
    }
    Ok(total)
}

/// One optimizer trace record (per ALM outer iteration).
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub residuals: Vec<f64>,
    pub min_eigs: Vec<f64>,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub design: DesignVector,
    pub report: StabilityReport,
    pub trace: Vec<TraceRow>,
}

/// Evaluates residual norms and min eigenvalues of every form at a design.
fn stability_state(
    structure: &Structure,
    forms: &[Form],
    contexts: &[FormContext],
    params: &[SpringParam],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut residuals = Vec::with_capacity(forms.len());
    let mut eigs = Vec::with_capacity(forms.len());
    for (form, ctx) in forms.iter().zip(contexts) {
        let r = residual_in_context(structure, form, params, ctx)?;
        residuals.push(r.norm());
        let h = projected_hessian_in_context(structure, form, params, ctx)?;
        let (values, _) = sorted_eigen(&h);
        eigs.push(values);
    }
    Ok((residuals, eigs))
}

fn build_report(
    structure: &Structure,
    forms: &[Form],
    contexts: &[FormContext],
    params: &[SpringParam],
    converged: bool,
    iterations: usize,
    wall_time: f64,
) -> Result<StabilityReport> {
    let (residuals, eigs) = stability_state(structure, forms, contexts, params)?;
    let mut form_reports = Vec::with_capacity(forms.len());
    for (i, form) in forms.iter().enumerate() {
        form_reports.push(FormStability {
            label: form.label.clone(),
            residual_norm: residuals[i],
            eigenvalues: eigs[i].clone(),
            potential: spring_potential_total(structure, form, params)?,
        });
    }
    Ok(StabilityReport {
        forms: form_reports,
        converged,
        iterations,
        wall_time,
    })
}

/// Runs the augmented Lagrangian design optimization.
///
/// Returns `converged = true` iff every form ends with residual norm within
/// tolerance and minimum projected-Hessian eigenvalue at or above the
/// margin; otherwise the best iterate is returned with `converged = false`.
/// A design that already satisfies both criteria is returned unchanged with
/// zero iterations.
pub fn optimize_design(
    structure: &Structure,
    forms: &[Form],
    design0: &DesignVector,
    opts: &OptimizerOptions,
    pool: Option<&rayon::ThreadPool>,
) -> Result<OptimizeOutcome> {
    assert!(!design0.is_empty(), "optimize_design needs at least one spring");
    assert!(forms.len() >= 2, "two forms are required");
    let start = Instant::now();
    let bounds = design0.bounds();
    if !bounds.is_feasible_box() {
        return Err(Error::InfeasibleBounds(
            "a lower bound exceeds its upper bound".into(),
        ));
    }
    let tols = resolve_tolerances(structure, opts);
    let contexts: Vec<FormContext> = forms
        .iter()
        .map(|f| form_context(structure, f))
        .collect::<Result<_>>()?;

    let is_stable = |params: &[SpringParam]| -> Result<bool> {
        let (residuals, eigs) = stability_state(structure, forms, &contexts, params)?;
        Ok(residuals.iter().all(|&r| r <= tols.residual_tol)
            && eigs
                .iter()
                .all(|e| e.first().copied().unwrap_or(f64::INFINITY) >= tols.eig_margin))
    };

    // Feasible start: nothing to do.
    if is_stable(&design0.params)? {
        let report = build_report(
            structure,
            forms,
            &contexts,
            &design0.params,
            true,
            0,
            start.elapsed().as_secs_f64(),
        )?;
        return Ok(OptimizeOutcome {
            design: design0.clone(),
            report,
            trace: vec![],
        });
    }

    // The inner solver works in normalized variables (stiffness in units of
    // k0, rest length in units of each spring's l0) with the objective
    // normalized by the squared characteristic force and the eigenvalue
    // rows by the characteristic Hessian scale. None of this moves the
    // minimizer or the constraint boundary; it makes BFGS curvature and ALM
    // penalties well conditioned.
    let n_bars = structure.bars.len().max(1) as f64;
    let l_char = structure.bars.iter().map(|b| b.length).sum::<f64>() / n_bars;
    let m_char = structure.bars.iter().map(|b| b.mass).sum::<f64>() / n_bars;
    let force_scale = m_char * crate::rigidbody::STANDARD_GRAVITY * l_char;
    let obj_scale = force_scale * force_scale;
    let eig_scale = opts.k0 * l_char * l_char;
    let mut scale = DVector::zeros(2 * design0.len());
    for i in 0..design0.len() {
        scale[2 * i] = opts.k0;
        scale[2 * i + 1] = design0.ub[2 * i + 1] / REST_LENGTH_BOX.1; // the spring's l0
    }
    let to_physical = |xn: &DVector<f64>| -> DVector<f64> { xn.component_mul(&scale) };

    let objective = |xn: &DVector<f64>| -> f64 {
        let params = params_from_flat(&to_physical(xn));
        match (|| -> Result<f64> {
            let mut total = 0.0;
            for (form, ctx) in forms.iter().zip(&contexts) {
                let r = residual_in_context(structure, form, &params, ctx)?;
                total += 0.5 * r.norm_squared()
                    + opts.w * spring_potential_total(structure, form, &params)?;
            }
            Ok(total / obj_scale)
        })() {
            Ok(v) => v,
            Err(_) => f64::INFINITY,
        }
    };
    let eq = |_: &DVector<f64>| DVector::zeros(0);
    let ineq = |xn: &DVector<f64>| -> DVector<f64> {
        let params = params_from_flat(&to_physical(xn));
        let mut rows = Vec::new();
        for (form, ctx) in forms.iter().zip(&contexts) {
            match projected_hessian_in_context(structure, form, &params, ctx) {
                Ok(h) => {
                    let (values, _) = sorted_eigen(&h);
                    rows.extend(values.iter().map(|&l| (tols.eig_margin - l) / eig_scale));
                }
                Err(_) => rows.extend(std::iter::repeat(f64::INFINITY).take(ctx.null.dim())),
            }
        }
        DVector::from_vec(rows)
    };

    let norm_bounds = Bounds::new(
        DVector::from_vec(design0.lb.clone()).component_div(&scale),
        DVector::from_vec(design0.ub.clone()).component_div(&scale),
    );
    let alm_opts = AlmOptions {
        max_outer: opts.max_outer,
        penalty0: 1.0,
        penalty_growth: opts.penalty_growth,
        penalty_max: opts.penalty_max,
        // ALM feasibility on the hinge rows alone never ends the run; the
        // stability criteria observed below do.
        constraint_tol: 0.0,
        inner: BfgsOptions {
            max_iters: opts.max_inner,
            grad_tol: 1e-12,
            max_step: 0.25,
            ..BfgsOptions::default()
        },
    };

    let mut trace: Vec<TraceRow> = Vec::new();
    let mut stable_seen = false;
    let mut observer_error: Option<Error> = None;
    let outcome = {
        let mut on_outer = |outer: usize, xn: &DVector<f64>, penalty: f64| -> bool {
            let params = params_from_flat(&to_physical(xn));
            match stability_state(structure, forms, &contexts, &params) {
                Ok((residuals, eigs)) => {
                    trace.push(TraceRow {
                        iteration: outer,
                        objective: objective(xn) * obj_scale,
                        residuals: residuals.clone(),
                        min_eigs: eigs
                            .iter()
                            .map(|e| e.first().copied().unwrap_or(f64::INFINITY))
                            .collect(),
                        penalty,
                    });
                    let ok = residuals.iter().all(|&r| r <= tols.residual_tol)
                        && eigs.iter().all(|e| {
                            e.first().copied().unwrap_or(f64::INFINITY) >= tols.eig_margin
                        });
                    stable_seen |= ok;
                    ok
                }
                Err(e) => {
                    observer_error = Some(e);
                    true
                }
            }
        };
        solver::solve_alm(
            &objective,
            &eq,
            &ineq,
            &MeritGradient::FiniteDifference {
                rel_step: opts.fd_step,
                pool,
            },
            &design0.flat().component_div(&scale),
            &norm_bounds,
            &alm_opts,
            Some(&mut on_outer),
        )
    };
    if let Some(e) = observer_error {
        return Err(e);
    }
    if outcome.non_finite {
        log::error!(
            "non-finite energy during line search; iterate dump: {:?}",
            to_physical(&outcome.x).as_slice()
        );
        return Err(Error::NonFinite(
            "objective became non-finite during the inner line search".into(),
        ));
    }
    let mut design = design0.clone();
    design.set_flat(&bounds.projected(&to_physical(&outcome.x)));
    let converged = is_stable(&design.params)?;
    debug_assert!(!stable_seen || converged);
    let report = build_report(
        structure,
        forms,
        &contexts,
        &design.params,
        converged,
        outcome.outer_iterations,
        start.elapsed().as_secs_f64(),
    )?;
    Ok(OptimizeOutcome {
        design,
        report,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes;
    use crate::spring_energy::Spring;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn linkage_with_forms(angle: f64) -> (Structure, [Form; 2]) {
        let (mut structure, forms) = scenes::springy_linkage_forms(100.0, angle);
        structure.gravity = Vector3::zeros();
        (structure, forms)
    }

    #[test]
    fn residual_zero_without_forces() {
        let (mut structure, form) = scenes::two_bar_chain(80.0, 0.7);
        structure.gravity = Vector3::zeros();
        let r = first_order_residual(&structure, &form, &[]).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r.amax() <= 1e-12);
    }

    #[test]
    fn residual_equals_pendulum_torque_through_basis() {
        // Horizontal lower bar under gravity: the projected residual is the
        // gravity torque m g (L/2) about the hinge, mapped through the unit
        // basis vector (compared up to the basis sign).
        let length = 80.0;
        let (structure, form) = scenes::two_bar_chain(length, std::f64::consts::FRAC_PI_2);
        let ctx = form_context(&structure, &form).unwrap();
        let r = residual_in_context(&structure, &form, &[], &ctx).unwrap();
        assert_eq!(r.len(), 1);
        let mode = ctx.null.n.row(0).transpose();
        // Analytic: residual = N . (f_ext) with f_ext = gravity on bar 1.
        let mg = structure.bars[1].mass * structure.gravity.y;
        let expected = mode[7] * mg; // y-translation row of bar 1
        assert_abs_diff_eq!(r[0], expected, epsilon = 1e-9 * expected.abs());
        // Magnitude equals m g (L/2) divided by the coordinate-space norm of
        // the unit-angle mode (|dq/dphi| = sqrt((L/2)^2 + 1)).
        let arm = 0.5 * length;
        let mode_norm = (arm * arm + 1.0).sqrt();
        assert_abs_diff_eq!(
            r[0].abs(),
            (structure.bars[1].mass * 9810.0 * arm / mode_norm).abs(),
            epsilon = 1e-6 * 9810.0
        );
    }

    #[test]
    fn residual_identity_two_paths() {
        let (structure, forms) = linkage_with_forms(0.9);
        let mut params: Vec<SpringParam> =
            structure.springs.iter().map(Spring::param).collect();
        params[0].l *= 0.8; // preload the spring
        let ctx = form_context(&structure, &forms[0]).unwrap();
        let r1 = residual_in_context(&structure, &forms[0], &params, &ctx).unwrap();
        let report =
            crate::spring_energy::total_energy_report(&structure, &forms[0], &params).unwrap();
        let r2 = -ctx.null.project(&report.grad);
        assert!((r1 - r2).amax() <= 1e-10);
    }

    #[test]
    fn projected_hessian_no_springs_no_loads_is_zero() {
        let (mut structure, form) = scenes::two_bar_chain(80.0, 0.7);
        structure.gravity = Vector3::zeros();
        let h = projected_hessian(&structure, &form, &[]).unwrap();
        assert_eq!(h.shape(), (1, 1));
        assert!(h.amax() <= 1e-12);
    }

    /// 1D oracle: second difference of total potential along the feasible
    /// hinge path, arc-length parameterized in coordinate space.
    fn manifold_second_difference(
        structure: &Structure,
        form: &Form,
        params: &[SpringParam],
    ) -> f64 {
        let order = scenes::serial_chain_order(structure).unwrap();
        let angles = scenes::chain_hinge_angles(structure, form, &order);
        let energy = |phi: f64| -> f64 {
            let mut a = angles.clone();
            a[0] = phi;
            let f = scenes::form_from_chain_angles(structure, form, &order, &a);
            let report = crate::spring_energy::total_energy_report(structure, &f, params).unwrap();
            report.v
        };
        // Coordinate-space speed of the path at the base angle.
        let dphi = 1e-5;
        let f_plus = scenes::form_from_chain_angles(structure, form, &order, &{
            let mut a = angles.clone();
            a[0] += dphi;
            a
        });
        let mut speed2 = 0.0;
        for (pp, pm) in f_plus.poses.iter().zip(&form.poses) {
            speed2 += ((pp.p - pm.p) / dphi).norm_squared();
            speed2 += ((pp.a - pm.a) / dphi).norm_squared();
        }
        let h = 1e-4;
        let d2_dphi2 =
            (energy(angles[0] + h) - 2.0 * energy(angles[0]) + energy(angles[0] - h)) / (h * h);
        d2_dphi2 / speed2
    }

    #[test]
    fn stretched_form_has_negative_eigenvalue() {
        // At the bifurcation configuration (lower bar straight down) the
        // spring is maximally stretched: an energy maximum along the mode.
        let (mut structure, _) = linkage_with_forms(0.9);
        let (_, bifurcation) = scenes::two_bar_chain(100.0, 0.0);
        structure.gravity = Vector3::zeros();
        let params = vec![SpringParam {
            k: structure.springs[0].k,
            l: structure.springs[0].l0, // rest length of the +/-0.9 wells
        }];
        let h = projected_hessian(&structure, &bifurcation, &params).unwrap();
        let (eigs, _) = sorted_eigen(&h);
        assert!(eigs[0] < 0.0, "expected instability, eig {}", eigs[0]);
        let oracle = manifold_second_difference(&structure, &bifurcation, &params);
        assert_abs_diff_eq!(eigs[0], oracle, epsilon = 1e-2 * oracle.abs());
    }

    #[test]
    fn rest_form_has_positive_eigenvalue_matching_manifold_oracle() {
        let (structure, forms) = linkage_with_forms(0.9);
        let params: Vec<SpringParam> = structure.springs.iter().map(Spring::param).collect();
        let h = projected_hessian(&structure, &forms[0], &params).unwrap();
        let (eigs, vecs) = sorted_eigen(&h);
        assert!(eigs[0] > 0.0, "eig {}", eigs[0]);
        let oracle = manifold_second_difference(&structure, &forms[0], &params);
        // At a taut-at-rest spring the constraint multipliers vanish, so the
        // projected spring Hessian equals the manifold curvature.
        assert_abs_diff_eq!(eigs[0], oracle, epsilon = 2e-3 * oracle.abs());
        // Eigendecomposition residual.
        let v0 = vecs.column(0);
        let resid = (&h * v0 - v0 * eigs[0]).amax();
        assert!(resid <= 1e-8 * h.amax().max(1e-30));
    }

    #[test]
    fn projected_hessian_sees_gravity_curvature() {
        // Springless chain under gravity: the geometric stiffness makes the
        // feasible-path curvature visible — negative inverted, positive
        // hanging — matching the 1D second difference of the potential.
        for (angle, expect_sign) in [(std::f64::consts::PI * 0.98, -1.0), (0.02, 1.0)] {
            let (structure, form) = scenes::two_bar_chain(80.0, angle);
            let h = projected_hessian(&structure, &form, &[]).unwrap();
            let (eigs, _) = sorted_eigen(&h);
            assert!(
                eigs[0] * expect_sign > 0.0,
                "angle {angle}: eig {} sign mismatch",
                eigs[0]
            );
            let oracle = manifold_second_difference(&structure, &form, &[]);
            assert_abs_diff_eq!(eigs[0], oracle, epsilon = 1e-2 * oracle.abs().max(1e-6));
        }
    }

    #[test]
    fn objective_zero_when_everything_rests() {
        let (structure, forms) = linkage_with_forms(0.9);
        let params: Vec<SpringParam> = structure.springs.iter().map(Spring::param).collect();
        let obj = stability_objective(&structure, &forms, &params, 0.001).unwrap();
        assert!(obj.abs() <= 1e-12, "objective {obj}");
    }

    #[test]
    fn objective_regularizer_lower_bound() {
        // Spring stretched in form 1 (rest length shortened), at rest in
        // form 2's geometry being different; objective at least w * V_1.
        let (structure, forms) = linkage_with_forms(0.9);
        let mut params: Vec<SpringParam> = structure.springs.iter().map(Spring::param).collect();
        params[0].l *= 0.7;
        let w = 0.001;
        let v1 =
            spring_potential_total(&structure, &forms[0], &params).unwrap();
        let obj = stability_objective(&structure, &forms, &params, w).unwrap();
        assert!(obj >= w * v1, "objective {obj} below regularizer floor {}", w * v1);
    }

    #[test]
    fn objective_design_gradient_matches_fd() {
        let (structure, forms) = linkage_with_forms(0.9);
        let mut params: Vec<SpringParam> = structure.springs.iter().map(Spring::param).collect();
        params[0].l *= 0.85;
        params[0].k = 3.0;
        let w = 0.001;
        let pack = |p: &[SpringParam]| -> DVector<f64> {
            DVector::from_vec(p.iter().flat_map(|s| [s.k, s.l]).collect())
        };
        let f = |x: &DVector<f64>| {
            stability_objective(&structure, &forms, &params_from_flat(x), w).unwrap()
        };
        let x = pack(&params);
        // Directional derivative both ways at two step sizes brackets the
        // analytic slope within 1e-4 relative.
        let dir = DVector::from_vec(vec![0.7, -0.4]);
        let h1 = 1e-5;
        let slope_fine = (f(&(&x + &dir * h1)) - f(&(&x - &dir * h1))) / (2.0 * h1);
        let h2 = 1e-6;
        let slope_finer = (f(&(&x + &dir * h2)) - f(&(&x - &dir * h2))) / (2.0 * h2);
        assert_abs_diff_eq!(slope_fine, slope_finer, epsilon = 1e-4 * slope_finer.abs().max(1e-9));
    }

    #[test]
    fn already_stable_design_returns_unchanged() {
        let (structure, forms) = linkage_with_forms(0.9);
        // Stiff enough that the rest-state eigenvalue clears the margin.
        let mut design = DesignVector::from_springs(&structure.springs, 1.0);
        design.params[0].k = 5.0;
        let opts = OptimizerOptions::default();
        let out = optimize_design(&structure, &forms, &design, &opts, None).unwrap();
        assert!(out.report.converged);
        assert_eq!(out.report.iterations, 0);
        assert_eq!(out.design.params[0], design.params[0]);
    }

    #[test]
    fn optimizer_stabilizes_detuned_linkage() {
        let (structure, forms) = linkage_with_forms(0.9);
        let mut design = DesignVector::from_springs(&structure.springs, 1.0);
        // Detune: wrong rest length so both forms carry forces.
        design.params[0].l = 1.3 * structure.springs[0].l0;
        design.params[0].k = 2.0;
        let opts = OptimizerOptions::default();
        let out = optimize_design(&structure, &forms, &design, &opts, None).unwrap();
        assert!(out.report.converged, "report: {:?}", out.report);
        let tols = resolve_tolerances(&structure, &opts);
        for f in &out.report.forms {
            assert!(f.residual_norm <= tols.residual_tol);
            assert!(f.eigenvalues[0] >= tols.eig_margin);
        }
        // Box feasibility is exact.
        for (i, p) in out.design.params.iter().enumerate() {
            assert!(p.k >= out.design.lb[2 * i] && p.k <= out.design.ub[2 * i]);
            assert!(p.l >= out.design.lb[2 * i + 1] && p.l <= out.design.ub[2 * i + 1]);
        }
    }
}
