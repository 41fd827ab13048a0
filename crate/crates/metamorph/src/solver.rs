//! Shared constrained-optimization machinery: a box-projected BFGS inner
//! solver and an augmented Lagrangian (method-of-multipliers) outer driver.
//!
//! Both the rigid-deformation curve fit and the two-form stability
//! optimizer run on this. Equality constraints enter through
//! multiplier-plus-quadratic-penalty terms; inequality constraints
//! (`g <= 0`) through the standard PHR hinge form. Merit gradients are
//! either supplied analytically or taken by central finite differences of
//! the merit value.

use nalgebra::{DMatrix, DVector};

/// Componentwise box; entries may be infinite.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn new(lb: DVector<f64>, ub: DVector<f64>) -> Self {
        Bounds { lb, ub }
    }

    pub fn is_feasible_box(&self) -> bool {
        self.lb.iter().zip(self.ub.iter()).all(|(l, u)| l <= u)
    }

    pub fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lb[i], self.ub[i]);
        }
    }

    pub fn projected(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        self.project(&mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop when the projected-gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when the accepted step falls below this.
    pub step_tol: f64,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
    /// Cap on the first trial step's infinity norm; keeps steepest-descent
    /// restarts from overshooting the box on badly scaled gradients.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iters: 200,
            grad_tol: 1e-9,
            step_tol: 1e-14,
            armijo_c1: 1e-4,
            max_backtracks: 60,
            max_step: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub non_finite: bool,
}

/// Box-projected BFGS with Armijo backtracking along the projected path.
pub fn projected_bfgs(
    f: &dyn Fn(&DVector<f64>) -> f64,
    grad: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    bounds: &Bounds,
    opts: &BfgsOptions,
) -> BfgsOutcome {
    let n = x0.len();
    let mut x = bounds.projected(x0);
    let mut fx = f(&x);
    if !fx.is_finite() {
        return BfgsOutcome {
            x,
            f: fx,
            iterations: 0,
            converged: false,
            non_finite: true,
        };
    }
    let mut g = grad(&x);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        // Projected-gradient optimality measure.
        let pg = (&x - bounds.projected(&(&x - &g))).amax();
        if pg <= opts.grad_tol {
            return BfgsOutcome {
                x,
                f: fx,
                iterations,
                converged: true,
                non_finite: false,
            };
        }
        iterations += 1;
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            // Curvature information went bad; restart from steepest descent.
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        // Backtracking along the projected path.
        let dir_inf = dir.amax();
        let mut alpha = if dir_inf > opts.max_step {
            opts.max_step / dir_inf
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let cand = bounds.projected(&(&x + &dir * alpha));
            let step = &cand - &x;
            if step.amax() < opts.step_tol {
                break;
            }
            let fc = f(&cand);
            if fc.is_finite() && fc <= fx + opts.armijo_c1 * g.dot(&step) {
                accepted = Some((cand, fc, step));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, step)) = accepted else {
            // No acceptable step; report the best point found.
            let stalled_non_finite = !f(&bounds.projected(&(&x + &dir * 1e-30))).is_finite();
            return BfgsOutcome {
                x,
                f: fx,
                iterations,
                converged: false,
                non_finite: stalled_non_finite,
            };
        };
        debug_assert!(
            f_new <= fx + 1e-12 * fx.abs().max(1.0),
            "merit increased across an accepted step"
        );
        let g_new = grad(&x_new);
        let y = &g_new - &g;
        let sy = step.dot(&y);
        if sy > 1e-12 * step.norm() * y.norm() {
            let rho = 1.0 / sy;
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let ss = &step * step.transpose();
            let shy = &step * hy.transpose();
            h_inv = h_inv - (&shy + shy.transpose()) * rho + &ss * (rho * rho * yhy + rho);
        }
        let step_size = step.amax();
        x = x_new;
        fx = f_new;
        g = g_new;
        if step_size < opts.step_tol {
            break;
        }
    }
    let pg = (&x - bounds.projected(&(&x - &g))).amax();
    BfgsOutcome {
        converged: pg <= opts.grad_tol,
        x,
        f: fx,
        iterations,
        non_finite: false,
    }
}

/// Central finite-difference gradient with per-coordinate relative step
/// `rel_step * max(1, |x_i|)`. Probes may evaluate on a rayon pool; results
/// are merged in coordinate order either way, so output is deterministic.
pub fn central_fd_gradient(
    f: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    x: &DVector<f64>,
    rel_step: f64,
    pool: Option<&rayon::ThreadPool>,
) -> DVector<f64> {
    let n = x.len();
    let probe = |i: usize| -> f64 {
        let h = rel_step * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    };
    let values: Vec<f64> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(probe).collect()
        }),
        None => (0..n).map(probe).collect(),
    };
    DVector::from_vec(values)
}

/// How the merit gradient of the augmented Lagrangian is obtained.
pub enum MeritGradient<'a> {
    /// Central finite differences of the merit value.
    FiniteDifference {
        rel_step: f64,
        pool: Option<&'a rayon::ThreadPool>,
    },
    /// Caller-assembled analytic gradient of the merit, given the current
    /// equality multipliers, inequality multipliers and penalty.
    Analytic(&'a dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, f64) -> DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct AlmOptions {
    pub max_outer: usize,
    pub penalty0: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Outer loop stops once every equality row and every hinge violation
    /// is below this.
    pub constraint_tol: f64,
    pub inner: BfgsOptions,
}

impl Default for AlmOptions {
    fn default() -> Self {
        AlmOptions {
            max_outer: 50,
            penalty0: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e8,
            constraint_tol: 1e-9,
            inner: BfgsOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlmOutcome {
    pub x: DVector<f64>,
    pub objective: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub max_violation: f64,
    pub penalty: f64,
    pub converged: bool,
    pub non_finite: bool,
}

/// Augmented Lagrangian driver over a box.
///
/// `eq` rows are driven to zero; `ineq` rows are driven to `<= 0`.
/// `on_outer`, when given, observes each outer iterate (index, point,
/// penalty); returning `true` ends the loop early, which callers use for
/// their own convergence criteria.
#[allow(clippy::too_many_arguments)]
pub fn solve_alm(
    objective: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    eq: &(dyn Fn(&DVector<f64>) -> DVector<f64> + Sync),
    ineq: &(dyn Fn(&DVector<f64>) -> DVector<f64> + Sync),
    merit_gradient: &MeritGradient,
    x0: &DVector<f64>,
    bounds: &Bounds,
    opts: &AlmOptions,
    mut on_outer: Option<&mut dyn FnMut(usize, &DVector<f64>, f64) -> bool>,
) -> AlmOutcome {
    let mut x = bounds.projected(x0);
    let mut mu_eq = DVector::zeros(eq(&x).len());
    let mut mu_ineq = DVector::zeros(ineq(&x).len());
    let mut penalty = opts.penalty0;
    let mut prev_violation = f64::INFINITY;
    let mut inner_total = 0;
    let mut non_finite = false;

    let violation = |x: &DVector<f64>| -> f64 {
        let ceq = eq(x);
        let cin = ineq(x);
        let veq = ceq.amax();
        let vin = cin.iter().cloned().fold(0.0, |m: f64, v| m.max(v.max(0.0)));
        if ceq.is_empty() {
            vin
        } else {
            veq.max(vin)
        }
    };

    for outer in 0..opts.max_outer {
        let mu_eq_k = mu_eq.clone();
        let mu_ineq_k = mu_ineq.clone();
        let rho = penalty;
        let merit = move_merit(objective, eq, ineq, &mu_eq_k, &mu_ineq_k, rho);
        let grad: Box<dyn Fn(&DVector<f64>) -> DVector<f64>> = match merit_gradient {
            MeritGradient::FiniteDifference { rel_step, pool } => {
                let step = *rel_step;
                let pool = *pool;
                Box::new(move |x: &DVector<f64>| central_fd_gradient(&merit, x, step, pool))
            }
            MeritGradient::Analytic(g) => {
                let mu_eq_c = mu_eq.clone();
                let mu_ineq_c = mu_ineq.clone();
                Box::new(move |x: &DVector<f64>| g(x, &mu_eq_c, &mu_ineq_c, rho))
            }
        };
        let merit_val = move_merit(objective, eq, ineq, &mu_eq, &mu_ineq, rho);
        let inner = projected_bfgs(&merit_val, &grad, &x, bounds, &opts.inner);
        inner_total += inner.iterations;
        non_finite |= inner.non_finite;
        x = inner.x;

        let ceq = eq(&x);
        let cin = ineq(&x);
        let v = violation(&x);
        let stop_external = match on_outer.as_mut() {
            Some(cb) => cb(outer, &x, penalty),
            None => false,
        };
        let feasible_and_stationary = v <= opts.constraint_tol && inner.converged;
        if feasible_and_stationary || stop_external {
            return AlmOutcome {
                objective: objective(&x),
                x,
                outer_iterations: outer + 1,
                inner_iterations: inner_total,
                max_violation: v,
                penalty,
                converged: true,
                non_finite,
            };
        }
        // Multiplier updates (PHR).
        for i in 0..mu_eq.len() {
            mu_eq[i] += penalty * ceq[i];
        }
        for i in 0..mu_ineq.len() {
            mu_ineq[i] = (mu_ineq[i] + penalty * cin[i]).max(0.0);
        }
        // Grow the penalty unless feasibility improved substantially.
        if v > 0.25 * prev_violation {
            penalty = (penalty * opts.penalty_growth).min(opts.penalty_max);
        }
        prev_violation = v;
    }
    let v = violation(&x);
    AlmOutcome {
        objective: objective(&x),
        x,
        outer_iterations: opts.max_outer,
        inner_iterations: inner_total,
        max_violation: v,
        penalty,
        converged: v <= opts.constraint_tol,
        non_finite,
    }
}

/// PHR augmented Lagrangian value.
fn move_merit<'a>(
    objective: &'a (dyn Fn(&DVector<f64>) -> f64 + Sync),
    eq: &'a (dyn Fn(&DVector<f64>) -> DVector<f64> + Sync),
    ineq: &'a (dyn Fn(&DVector<f64>) -> DVector<f64> + Sync),
    mu_eq: &DVector<f64>,
    mu_ineq: &DVector<f64>,
    rho: f64,
) -> impl Fn(&DVector<f64>) -> f64 + Sync + 'a {
    let mu_eq = mu_eq.clone();
    let mu_ineq = mu_ineq.clone();
    move |x: &DVector<f64>| {
        let mut val = objective(x);
        let ceq = eq(x);
        for i in 0..ceq.len() {
            val += mu_eq[i] * ceq[i] + 0.5 * rho * ceq[i] * ceq[i];
        }
        let cin = ineq(x);
        for i in 0..cin.len() {
            let t = (mu_ineq[i] + rho * cin[i]).max(0.0);
            val += (t * t - mu_ineq[i] * mu_ineq[i]) / (2.0 * rho);
        }
        val
    }
}

/// Analytic merit gradient helper for callers with constraint Jacobians:
/// `grad f + J_eq^T (mu + rho c) + J_ineq^T max(0, mu + rho g)`.
pub fn merit_gradient_weights(
    ceq: &DVector<f64>,
    cin: &DVector<f64>,
    mu_eq: &DVector<f64>,
    mu_ineq: &DVector<f64>,
    rho: f64,
) -> (DVector<f64>, DVector<f64>) {
    let w_eq = DVector::from_fn(ceq.len(), |i, _| mu_eq[i] + rho * ceq[i]);
    let w_in = DVector::from_fn(cin.len(), |i, _| (mu_ineq[i] + rho * cin[i]).max(0.0));
    (w_eq, w_in)
}
