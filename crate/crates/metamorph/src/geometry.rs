//! Input curves to linkage forms: arc-length sampling of piecewise cubic
//! Bézier curves and the rigid-deformation fit that turns samples into a
//! chain of equal-length bars as close as possible to the curve.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{self, AlmOptions, Bounds, MeritGradient};

/// Curves whose total arc length falls below this are rejected.
pub const MIN_ARC_LENGTH: f64 = 1e-9;

/// Planar piecewise cubic Bézier curve, millimeters.
#[derive(Debug, Clone)]
pub struct PiecewiseCurve {
    /// Control-point quadruples; consecutive segments share an endpoint.
    pub segments: Vec<[Vector2<f64>; 4]>,
    pub closed: bool,
}

impl PiecewiseCurve {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidScene("curve has no segments".into()));
        }
        for w in self.segments.windows(2) {
            if (w[0][3] - w[1][0]).norm() > 1e-9 {
                return Err(Error::InvalidScene(
                    "consecutive curve segments do not share an endpoint".into(),
                ));
            }
        }
        if self.closed {
            let first = self.segments[0][0];
            let last = self.segments[self.segments.len() - 1][3];
            if (first - last).norm() > 1e-9 {
                return Err(Error::InvalidScene("closed curve does not close".into()));
            }
        }
        if !self
            .segments
            .iter()
            .flatten()
            .all(|p| p.x.is_finite() && p.y.is_finite())
        {
            return Err(Error::InvalidScene("curve has non-finite control points".into()));
        }
        Ok(())
    }

    /// A single straight segment between two points.
    pub fn line(a: Vector2<f64>, b: Vector2<f64>) -> Self {
        let third = (b - a) / 3.0;
        PiecewiseCurve {
            segments: vec![[a, a + third, a + third * 2.0, b]],
            closed: false,
        }
    }

    /// Circle of the given radius from four Bézier arcs (standard kappa).
    pub fn circle(radius: f64) -> Self {
        let k = radius * 0.552_284_749_830_793_4;
        let r = radius;
        let p = |x: f64, y: f64| Vector2::new(x, y);
        PiecewiseCurve {
            segments: vec![
                [p(r, 0.0), p(r, k), p(k, r), p(0.0, r)],
                [p(0.0, r), p(-k, r), p(-r, k), p(-r, 0.0)],
                [p(-r, 0.0), p(-r, -k), p(-k, -r), p(0.0, -r)],
                [p(0.0, -r), p(k, -r), p(r, -k), p(r, 0.0)],
            ],
            closed: true,
        }
    }
}

fn bezier_point(seg: &[Vector2<f64>; 4], t: f64) -> Vector2<f64> {
    let s = 1.0 - t;
    seg[0] * (s * s * s)
        + seg[1] * (3.0 * s * s * t)
        + seg[2] * (3.0 * s * t * t)
        + seg[3] * (t * t * t)
}

fn bezier_deriv(seg: &[Vector2<f64>; 4], t: f64) -> Vector2<f64> {
    let s = 1.0 - t;
    (seg[1] - seg[0]) * (3.0 * s * s)
        + (seg[2] - seg[1]) * (6.0 * s * t)
        + (seg[3] - seg[2]) * (3.0 * t * t)
}

// 8-point Gauss-Legendre rule on [-1, 1].
const GL8_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

fn gl8_speed_integral(seg: &[Vector2<f64>; 4], t0: f64, t1: f64) -> f64 {
    let half = 0.5 * (t1 - t0);
    let mid = 0.5 * (t0 + t1);
    let mut sum = 0.0;
    for (node, weight) in GL8_NODES.iter().zip(&GL8_WEIGHTS) {
        sum += weight * bezier_deriv(seg, mid - half * node).norm();
        sum += weight * bezier_deriv(seg, mid + half * node).norm();
    }
    sum * half
}

/// Adaptive Gauss-Legendre arc length of a segment over [t0, t1].
fn adaptive_length(seg: &[Vector2<f64>; 4], t0: f64, t1: f64, rel_tol: f64, depth: u32) -> f64 {
    let whole = gl8_speed_integral(seg, t0, t1);
    let mid = 0.5 * (t0 + t1);
    let halves = gl8_speed_integral(seg, t0, mid) + gl8_speed_integral(seg, mid, t1);
    if depth >= 24 || (whole - halves).abs() <= rel_tol * halves.abs().max(1e-300) {
        halves
    } else {
        adaptive_length(seg, t0, mid, rel_tol, depth + 1)
            + adaptive_length(seg, mid, t1, rel_tol, depth + 1)
    }
}

const LENGTH_REL_TOL: f64 = 1e-9;

/// Ordered samples along a curve and the identifier of their source.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSamples {
    pub points: Vec<Vector2<f64>>,
    pub source: String,
}

impl CurveSamples {
    /// Translates the samples so their centroid sits at the origin.
    pub fn normalized(&self) -> CurveSamples {
        let centroid: Vector2<f64> =
            self.points.iter().sum::<Vector2<f64>>() / self.points.len() as f64;
        CurveSamples {
            points: self.points.iter().map(|p| p - centroid).collect(),
            source: self.source.clone(),
        }
    }
}

/// Samples `m + 1` points at uniform arc-length spacing: `m` bar ends plus
/// the terminal vertex. For closed curves the terminal point duplicates the
/// first.
pub fn sample_curve(curve: &PiecewiseCurve, m: usize) -> Result<CurveSamples> {
    assert!(m >= 1, "m must be positive");
    curve.validate()?;
    let seg_lengths: Vec<f64> = curve
        .segments
        .iter()
        .map(|s| adaptive_length(s, 0.0, 1.0, LENGTH_REL_TOL, 0))
        .collect();
    let total: f64 = seg_lengths.iter().sum();
    if total < MIN_ARC_LENGTH {
        return Err(Error::DegenerateCurve { length: total });
    }
    let mut cumulative = vec![0.0];
    for len in &seg_lengths {
        cumulative.push(cumulative.last().unwrap() + len);
    }
    let mut points = Vec::with_capacity(m + 1);
    for k in 0..=m {
        if k == m {
            if curve.closed {
                points.push(points[0]);
            } else {
                points.push(bezier_point(curve.segments.last().unwrap(), 1.0));
            }
            continue;
        }
        let target = total * (k as f64) / (m as f64);
        // Locate the segment holding this arc length.
        let mut idx = match cumulative
            .binary_search_by(|c| c.partial_cmp(&target).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        idx = idx.min(curve.segments.len() - 1);
        let local = target - cumulative[idx];
        let t = invert_arc_length(&curve.segments[idx], seg_lengths[idx], local);
        points.push(bezier_point(&curve.segments[idx], t));
    }
    for w in points.windows(2) {
        if (w[0] - w[1]).norm() < 1e-12 {
            return Err(Error::InvalidScene(
                "curve sampling produced coincident consecutive points".into(),
            ));
        }
    }
    Ok(CurveSamples {
        points,
        source: String::new(),
    })
}

/// Solves len(0, t) = target on one segment with safeguarded Newton.
fn invert_arc_length(seg: &[Vector2<f64>; 4], seg_len: f64, target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    if target >= seg_len {
        return 1.0;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut t: f64 = target / seg_len;
    for _ in 0..60 {
        let f = adaptive_length(seg, 0.0, t, LENGTH_REL_TOL, 0) - target;
        if f.abs() <= LENGTH_REL_TOL * seg_len {
            break;
        }
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let speed = bezier_deriv(seg, t).norm();
        let newton = if speed > 1e-12 { t - f / speed } else { f64::NAN };
        t = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    t
}

/// A chain of `m` equal-length bars fitted to curve samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedForm {
    /// Bar endpoints; m + 1 vertices.
    pub vertices: Vec<Vector2<f64>>,
    /// Common bar length `c`, millimeters.
    pub bar_length: f64,
    /// Final fit objective 1/2 sum |v_j - sample_j|^2, mm^2.
    pub residual: f64,
}

/// Feasibility tolerance of the fit: max |len^2 - c^2| over bars.
pub fn fit_constraint_tol(c: f64) -> f64 {
    1e-8 * c * c
}

fn pack(points: &[Vector2<f64>]) -> DVector<f64> {
    let mut x = DVector::zeros(2 * points.len());
    for (i, p) in points.iter().enumerate() {
        x[2 * i] = p.x;
        x[2 * i + 1] = p.y;
    }
    x
}

fn unpack(x: &DVector<f64>) -> Vec<Vector2<f64>> {
    (0..x.len() / 2)
        .map(|i| Vector2::new(x[2 * i], x[2 * i + 1]))
        .collect()
}

fn length_constraints(x: &DVector<f64>, c: f64) -> DVector<f64> {
    let nv = x.len() / 2;
    let mut out = DVector::zeros(nv - 1);
    for j in 0..nv - 1 {
        let dx = x[2 * j] - x[2 * j + 2];
        let dy = x[2 * j + 1] - x[2 * j + 3];
        out[j] = dx * dx + dy * dy - c * c;
    }
    out
}

/// Minimizes `1/2 sum |v_j - s_j|^2` subject to every consecutive vertex
/// pair sitting exactly `c` apart, via the shared ALM/quasi-Newton solver
/// plus a Gauss-Newton feasibility polish. The returned form satisfies
/// `|len^2 - c^2| <= 1e-8 c^2` on every bar.
pub fn fit_form(
    samples: &CurveSamples,
    c: f64,
    initial: Option<&[Vector2<f64>]>,
) -> Result<FittedForm> {
    assert!(c > 0.0, "bar length must be positive");
    let targets = pack(&samples.points);
    let n = targets.len();
    assert!(n >= 4, "need at least two samples");
    if let Some(init) = initial {
        assert_eq!(init.len(), samples.points.len(), "initial guess size mismatch");
    }
    let x0 = initial.map(pack).unwrap_or_else(|| targets.clone());

    let objective = {
        let targets = targets.clone();
        move |x: &DVector<f64>| 0.5 * (x - &targets).norm_squared()
    };
    let eq = move |x: &DVector<f64>| length_constraints(x, c);
    let ineq = |_: &DVector<f64>| DVector::zeros(0);
    // Merit gradient assembled analytically from the constraint structure.
    let targets_g = targets.clone();
    let merit_grad = move |x: &DVector<f64>,
                           mu: &DVector<f64>,
                           _mu_in: &DVector<f64>,
                           rho: f64|
          -> DVector<f64> {
        let ceq = length_constraints(x, c);
        let mut g = x - &targets_g;
        for j in 0..ceq.len() {
            let w = 2.0 * (mu[j] + rho * ceq[j]);
            let dx = x[2 * j] - x[2 * j + 2];
            let dy = x[2 * j + 1] - x[2 * j + 3];
            g[2 * j] += w * dx;
            g[2 * j + 1] += w * dy;
            g[2 * j + 2] -= w * dx;
            g[2 * j + 3] -= w * dy;
        }
        g
    };

    let opts = AlmOptions {
        constraint_tol: 1e-9 * c * c,
        penalty0: 1.0,
        ..AlmOptions::default()
    };
    let outcome = solver::solve_alm(
        &objective,
        &eq,
        &ineq,
        &MeritGradient::Analytic(&merit_grad),
        &x0,
        &Bounds::unbounded(n),
        &opts,
        None,
    );
    let mut x = outcome.x;
    gauss_newton_polish(&mut x, c);
    let final_violation = length_constraints(&x, c).amax();
    if final_violation > fit_constraint_tol(c) {
        return Err(Error::FitNotConverged {
            residual: final_violation,
        });
    }
    let residual = 0.5 * (&x - &targets).norm_squared();
    Ok(FittedForm {
        vertices: unpack(&x),
        bar_length: c,
        residual,
    })
}

/// Minimum-norm Newton steps onto the constraint set; quadratic cleanup of
/// whatever violation the ALM left behind.
fn gauss_newton_polish(x: &mut DVector<f64>, c: f64) {
    let m = x.len() / 2 - 1;
    for _ in 0..20 {
        let phi = length_constraints(x, c);
        if phi.amax() <= 1e-13 * c * c {
            break;
        }
        let mut jac = DMatrix::zeros(m, x.len());
        for j in 0..m {
            let dx = x[2 * j] - x[2 * j + 2];
            let dy = x[2 * j + 1] - x[2 * j + 3];
            jac[(j, 2 * j)] = 2.0 * dx;
            jac[(j, 2 * j + 1)] = 2.0 * dy;
            jac[(j, 2 * j + 2)] = -2.0 * dx;
            jac[(j, 2 * j + 3)] = -2.0 * dy;
        }
        let jjt = &jac * jac.transpose();
        let Some(chol) = jjt.cholesky() else { break };
        let delta = chol.solve(&phi);
        *x -= jac.transpose() * delta;
    }
}

/// On-disk curves file: two curves, the bar count and an optional
/// prescribed bar length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvesFile {
    pub curves: Vec<CurveSpec>,
    pub m: usize,
    #[serde(default)]
    pub bar_length: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSpec {
    pub closed: bool,
    pub segments: Vec<[[f64; 2]; 4]>,
}

impl CurveSpec {
    pub fn to_curve(&self) -> Result<PiecewiseCurve> {
        let curve = PiecewiseCurve {
            segments: self
                .segments
                .iter()
                .map(|s| {
                    [
                        Vector2::new(s[0][0], s[0][1]),
                        Vector2::new(s[1][0], s[1][1]),
                        Vector2::new(s[2][0], s[2][1]),
                        Vector2::new(s[3][0], s[3][1]),
                    ]
                })
                .collect(),
            closed: self.closed,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn from_curve(curve: &PiecewiseCurve) -> Self {
        CurveSpec {
            closed: curve.closed,
            segments: curve
                .segments
                .iter()
                .map(|s| {
                    [
                        [s[0].x, s[0].y],
                        [s[1].x, s[1].y],
                        [s[2].x, s[2].y],
                        [s[3].x, s[3].y],
                    ]
                })
                .collect(),
        }
    }
}

impl CurvesFile {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: CurvesFile = serde_json::from_str(&text)?;
        if file.curves.len() != 2 {
            return Err(Error::InvalidScene(format!(
                "curves file must contain exactly 2 curves, found {}",
                file.curves.len()
            )));
        }
        if file.m < 1 {
            return Err(Error::InvalidScene("m must be at least 1".into()));
        }
        Ok(file)
    }

    /// Total arc length of one of the curves.
    pub fn arc_length(curve: &PiecewiseCurve) -> f64 {
        curve
            .segments
            .iter()
            .map(|s| adaptive_length(s, 0.0, 1.0, LENGTH_REL_TOL, 0))
            .sum()
    }
}
