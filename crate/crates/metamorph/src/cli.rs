//! Pipeline driver behind the `fit`, `design`, `simulate` and `export`
//! subcommands. Each command is a plain function over parsed arguments so
//! the binary stays a thin wrapper and everything here is testable
//! in-process.
//!
//! Exit codes: 0 success; 1 schema/input error; 2 fit failure; 3 design
//! budget exhausted (artifacts still written); 4 simulation failed to
//! confirm bistability.

use std::fmt::Write as _;
use std::path::PathBuf;

use nalgebra::{DVector, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fabrication_export::{apply_layers, assign_z_depths, export_design_json, render_svg};
use crate::geometry::{fit_form, sample_curve, CurvesFile};
use crate::rigidbody::{assemble_velocity_jacobian, null_space_basis, STANDARD_GRAVITY};
use crate::scene::{write_json, DesignDocument, Scene};
use crate::scenes::chain_scene_from_vertices;
use crate::simulator::{estimate_barrier, kinetic_energy, settle_recorded, Classification, SimParams, SimState};
use crate::spring_energy::SpringParam;
use crate::spring_placement::{design_loop, PlacementOptions};
use crate::stability_opt::{resolve_tolerances, DesignVector, OptimizerOptions, TraceRow};

/// Exit code for an error surfaced by a subcommand.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::FitNotConverged { .. } => 2,
        Error::SimDiverged(_) => 4,
        _ => 1,
    }
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    /// Overrides the curve file's bar count.
    pub m: Option<usize>,
    /// Overrides the curve file's prescribed bar length.
    pub bar_length: Option<f64>,
    pub gravity: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub scene_path: PathBuf,
    pub residuals: Vec<f64>,
    pub bar_length: f64,
    pub bars: usize,
}

/// Samples both curves, fits the rigid chains and writes the scene file.
pub fn cmd_fit(args: &FitArgs) -> Result<FitSummary> {
    let file = CurvesFile::load(&args.input)?;
    let m = args.m.unwrap_or(file.m);
    if m < 1 {
        return Err(Error::InvalidScene("m must be at least 1".into()));
    }
    let curves = file
        .curves
        .iter()
        .map(|c| c.to_curve())
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<_> = curves
        .iter()
        .map(|c| sample_curve(c, m).map(|s| s.normalized()))
        .collect::<Result<Vec<_>>>()?;
    let c = args.bar_length.or(file.bar_length).unwrap_or_else(|| {
        let mean_arc = curves.iter().map(CurvesFile::arc_length).sum::<f64>() / curves.len() as f64;
        mean_arc / m as f64
    });
    let mut residuals = Vec::new();
    let mut vertex_forms = Vec::new();
    for s in &samples {
        let fit = fit_form(s, c, None)?;
        residuals.push(fit.residual);
        vertex_forms.push(fit.vertices);
    }
    let scene = chain_scene_from_vertices(
        &vertex_forms,
        &["form0", "form1"],
        c,
        args.gravity,
    )?;
    std::fs::create_dir_all(&args.out)?;
    let scene_path = args.out.join("scene.json");
    scene.save(&scene_path)?;
    for (i, r) in residuals.iter().enumerate() {
        println!("form{i} fit residual: {r:.9} mm^2");
    }
    Ok(FitSummary {
        scene_path,
        residuals,
        bar_length: c,
        bars: m,
    })
}

#[derive(Debug, Clone)]
pub struct DesignArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub optimizer: OptimizerOptions,
    pub placement: PlacementOptions,
    pub jobs: usize,
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct DesignSummary {
    pub converged: bool,
    pub springs: usize,
    pub design_path: PathBuf,
    pub wall_time: f64,
}

fn build_pool(jobs: usize) -> Option<rayon::ThreadPool> {
    if jobs <= 1 {
        return None;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .ok()
}

/// Runs the iterative spring-addition design loop and writes the design
/// document, the loop trace and (optionally) the optimizer trace CSV.
pub fn cmd_design(args: &DesignArgs) -> Result<DesignSummary> {
    let scene = Scene::load(&args.input)?;
    let pool = build_pool(args.jobs);
    let outcome = design_loop(
        &scene.structure,
        &scene.forms,
        &args.placement,
        &args.optimizer,
        pool.as_ref(),
    )?;
    std::fs::create_dir_all(&args.out)?;
    let design_path = args.out.join("design.json");
    let out_scene = Scene {
        structure: outcome.structure.clone(),
        forms: scene.forms.clone(),
    };
    export_design_json(&out_scene, &outcome.design, Some(&outcome.report), &design_path)?;
    write_json(&args.out.join("loop_trace.json"), &outcome.records)?;
    if args.trace {
        std::fs::write(
            args.out.join("optimizer_trace.csv"),
            optimizer_trace_csv(&outcome.optimizer_trace, scene.forms.len()),
        )?;
    }
    let tols = resolve_tolerances(&outcome.structure, &args.optimizer);
    println!(
        "design {}: {} springs, {} loop iterations",
        if outcome.report.converged { "converged" } else { "NOT converged" },
        outcome.structure.springs.len(),
        outcome.report.iterations
    );
    for f in &outcome.report.forms {
        println!(
            "  {}: residual {:.3e} (tol {:.3e}), min eigenvalue {:.3e} (margin {:.3e})",
            f.label,
            f.residual_norm,
            tols.residual_tol,
            f.eigenvalues.first().copied().unwrap_or(f64::INFINITY),
            tols.eig_margin
        );
    }
    eprintln!("wall time: {:.3}s", outcome.report.wall_time);
    Ok(DesignSummary {
        converged: outcome.report.converged,
        springs: outcome.structure.springs.len(),
        design_path,
        wall_time: outcome.report.wall_time,
    })
}

/// Optimizer trace CSV. Wall-clock time is deliberately absent so repeated
/// runs are byte-identical.
fn optimizer_trace_csv(rows: &[TraceRow], forms: usize) -> String {
    let mut out = String::from("iteration,objective");
    for i in 0..forms {
        let _ = write!(out, ",residual_form{i}");
    }
    for i in 0..forms {
        let _ = write!(out, ",min_eig_form{i}");
    }
    out.push_str(",penalty\n");
    for row in rows {
        let _ = write!(out, "{},{:.12e}", row.iteration, row.objective);
        for r in &row.residuals {
            let _ = write!(out, ",{r:.12e}");
        }
        for e in &row.min_eigs {
            let _ = write!(out, ",{e:.12e}");
        }
        let _ = writeln!(out, ",{:.12e}", row.penalty);
    }
    out
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    /// Random perturbations per form.
    pub count: usize,
    /// Perturbation kinetic energy as a fraction of the estimated barrier.
    pub energy_fraction: f64,
    /// Absolute perturbation kinetic energy; overrides the barrier estimate.
    pub energy: Option<f64>,
    pub seed: u64,
    pub sim: SimParams,
    pub trace: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SimulateRun {
    pub start_form: usize,
    pub perturbation: usize,
    pub classification: Classification,
    pub final_time: f64,
    pub final_kinetic_energy: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SimulateSummary {
    /// matrix[i][j]: runs started at form i that settled at form j.
    pub matrix: Vec<Vec<usize>>,
    pub diverged: usize,
    pub unsettled: usize,
    pub barrier: Option<f64>,
    pub perturbation_energy: f64,
    pub runs: Vec<SimulateRun>,
}

impl SimulateSummary {
    pub fn is_diagonal(&self) -> bool {
        self.diverged == 0
            && self.unsettled == 0
            && self
                .matrix
                .iter()
                .enumerate()
                .all(|(i, row)| row.iter().enumerate().all(|(j, &n)| i == j || n == 0))
    }
}

/// Settles each form under seeded random feasible-velocity perturbations
/// and writes the classification matrix (plus trajectory CSVs when
/// tracing). Perturbation energy defaults to a fraction of the energy
/// barrier estimated along the hinge-interpolation path.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateSummary> {
    let doc = DesignDocument::load(&args.input)?;
    let structure = &doc.scene.structure;
    let forms = &doc.scene.forms;
    let params: Vec<SpringParam> = doc.design.params.clone();
    let barrier = estimate_barrier(structure, forms, &params)?;
    let energy = match args.energy {
        Some(e) => e,
        None => {
            let b = barrier.ok_or_else(|| {
                Error::InvalidScene(
                    "barrier estimate unavailable (non-chain scene); pass an absolute energy".into(),
                )
            })?;
            args.energy_fraction * b
        }
    };
    std::fs::create_dir_all(&args.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut matrix = vec![vec![0usize; forms.len()]; forms.len()];
    let mut diverged = 0;
    let mut unsettled = 0;
    let mut runs = Vec::new();
    for (fi, form) in forms.iter().enumerate() {
        let jac = assemble_velocity_jacobian(structure, form);
        let null = null_space_basis(&jac)?;
        for p in 0..args.count {
            // Random feasible velocity direction, scaled to the target
            // kinetic energy.
            let z = DVector::from_fn(null.dim(), |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let mut dir = null.lift(&z);
            let probe = SimState {
                poses: form.poses.clone(),
                velocities: dir.clone(),
                time: 0.0,
                lambda_fallback: false,
            };
            let unit_ke = kinetic_energy(structure, &probe);
            if unit_ke > 0.0 {
                dir *= (energy / unit_ke).sqrt();
            }
            let mut recorder = TrajectoryRecorder::new(
                args.trace
                    .then(|| args.out.join(format!("traj_form{fi}_run{p}.csv"))),
                structure,
                &params,
            );
            let (state, class) = settle_recorded(
                structure,
                form,
                &params,
                &dir,
                &args.sim,
                forms,
                &mut |s| recorder.record(s),
            )?;
            recorder.finish()?;
            match class {
                Classification::Form(j) => matrix[fi][j] += 1,
                Classification::Diverged => diverged += 1,
                Classification::Unsettled => unsettled += 1,
            }
            runs.push(SimulateRun {
                start_form: fi,
                perturbation: p,
                classification: class,
                final_time: state.time,
                final_kinetic_energy: kinetic_energy(structure, &state),
            });
        }
    }
    let summary = SimulateSummary {
        matrix,
        diverged,
        unsettled,
        barrier,
        perturbation_energy: energy,
        runs,
    };
    write_json(&args.out.join("classification.json"), &summary)?;
    println!(
        "simulate: {} runs, diagonal = {}, diverged = {}, unsettled = {}",
        summary.runs.len(),
        summary.is_diagonal(),
        summary.diverged,
        summary.unsettled
    );
    for (i, row) in summary.matrix.iter().enumerate() {
        println!("  form{i} -> {row:?}");
    }
    Ok(summary)
}

/// Streams every k-th simulation state to a trajectory CSV.
struct TrajectoryRecorder<'a> {
    path: Option<PathBuf>,
    buffer: String,
    structure: &'a crate::rigidbody::Structure,
    params: &'a [SpringParam],
    counter: usize,
}

impl<'a> TrajectoryRecorder<'a> {
    const STRIDE: usize = 10;

    fn new(
        path: Option<PathBuf>,
        structure: &'a crate::rigidbody::Structure,
        params: &'a [SpringParam],
    ) -> Self {
        let mut buffer = String::new();
        if path.is_some() {
            buffer.push_str("time_s");
            for b in 0..structure.bars.len() {
                let _ = write!(
                    buffer,
                    ",px{b},py{b},pz{b},ax{b},ay{b},az{b}"
                );
            }
            buffer.push_str(",kinetic,potential,constraint_violation\n");
        }
        TrajectoryRecorder {
            path,
            buffer,
            structure,
            params,
            counter: 0,
        }
    }

    fn record(&mut self, state: &SimState) {
        if self.path.is_none() {
            return;
        }
        if self.counter % Self::STRIDE == 0 {
            let form = state.form("");
            let ke = kinetic_energy(self.structure, state);
            let pe = crate::spring_energy::gravity_potential(self.structure, &form)
                + crate::spring_energy::spring_potential_total(self.structure, &form, self.params)
                    .unwrap_or(f64::NAN);
            let c = crate::rigidbody::constraint_residual(self.structure, &form).amax();
            let _ = write!(self.buffer, "{:.6}", state.time);
            for pose in &state.poses {
                let _ = write!(
                    self.buffer,
                    ",{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                    pose.p.x, pose.p.y, pose.p.z, pose.a.x, pose.a.y, pose.a.z
                );
            }
            let _ = writeln!(self.buffer, ",{ke:.9e},{pe:.9e},{c:.9e}");
        }
        self.counter += 1;
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(path) = &self.path {
            std::fs::write(path, &self.buffer)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExportArgs {
    pub input: PathBuf,
    pub out: PathBuf,
}

/// Assigns fabrication layers and writes per-form SVGs plus the layered
/// design document and layer summary.
pub fn cmd_export(args: &ExportArgs) -> Result<Vec<PathBuf>> {
    let doc = DesignDocument::load(&args.input)?;
    let mut structure = doc.scene.structure.clone();
    let layers = assign_z_depths(&structure);
    apply_layers(&mut structure, &layers);
    std::fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();
    for form in &doc.scene.forms {
        let path = args.out.join(format!("{}.svg", form.label));
        std::fs::write(&path, render_svg(&structure, form))?;
        written.push(path);
    }
    let layered_scene = Scene {
        structure,
        forms: doc.scene.forms.clone(),
    };
    let design = DesignVector {
        params: doc.design.params.clone(),
        lb: doc.design.lb.clone(),
        ub: doc.design.ub.clone(),
    };
    let fab_path = args.out.join("fabrication.json");
    #[derive(serde::Serialize)]
    struct Fabrication<'a> {
        schema: &'a str,
        layers: &'a crate::fabrication_export::LayerAssignment,
        total_depth_mm: f64,
    }
    write_json(
        &fab_path,
        &Fabrication {
            schema: "metamorph/v1",
            layers: &layers,
            total_depth_mm: layers.total_depth(),
        },
    )?;
    written.push(fab_path);
    let layered_path = args.out.join("design_layered.json");
    export_design_json(&layered_scene, &design, doc.report.as_ref(), &layered_path)?;
    written.push(layered_path);
    Ok(written)
}

/// All numeric defaults in one table, printed by `--show-defaults`.
pub fn defaults_table() -> String {
    let opt = OptimizerOptions::default();
    let placement = PlacementOptions::default();
    let sim = SimParams::default();
    let mut s = String::new();
    let mut row = |k: &str, v: String, unit: &str| {
        let _ = writeln!(s, "{k:<28} {v:<14} {unit}");
    };
    row("regularizer w", format!("{}", opt.w), "-");
    row("eig margin rule", "1e-4 * k0 * L^2".into(), "g*mm^2/s^2");
    row("residual tol rule", "1e-6 * m * g * L".into(), "g*mm^2/s^2");
    row("reference stiffness k0", format!("{}", opt.k0), "g/s^2");
    row("stiffness box", "[0.01, 100] * k0".into(), "g/s^2");
    row("rest length box", "[0.5, 1.5] * l0".into(), "mm");
    row("ALM outer cap", format!("{}", opt.max_outer), "iterations");
    row("BFGS inner cap", format!("{}", opt.max_inner), "iterations");
    row("penalty growth", format!("{}", opt.penalty_growth), "x, cap 1e8");
    row("fd step (relative)", format!("{}", opt.fd_step), "-");
    row("spring budget", "4 * bars".into(), "springs");
    row("mode probe step h_mode", format!("{}", placement.h_mode), "s");
    row("duplicate tolerance", format!("{}", placement.duplicate_tol), "|ds|,|dt|");
    row("sim time step h", format!("{}", sim.h), "s");
    row("constraint k_p", format!("{:.0e}", sim.k_p), "-");
    row("constraint k_d", format!("{:.0e}", sim.k_d), "-");
    row("viscous damping", format!("{}", sim.viscous_damping), "1/s");
    row("sim max steps", format!("{}", sim.max_steps), "steps");
    row("settle KE threshold", format!("{:.0e} * m * L^2", sim.settle_ke_rel), "g*mm^2/s^2");
    row("classify tolerance", format!("{} * L", sim.classify_rel), "mm");
    row("bar linear density", format!("{}", crate::rigidbody::DEFAULT_LINEAR_DENSITY), "g/mm");
    row("bar cross-section", format!("{}", crate::rigidbody::DEFAULT_CROSS_SECTION), "mm");
    row("gravity", format!("{STANDARD_GRAVITY}"), "mm/s^2, -y");
    row(
        "layer pitch",
        format!("{}", crate::fabrication_export::DEFAULT_LAYER_PITCH),
        "mm",
    );
    s
}

/// Parses `x,y,z` into a gravity vector; `off` disables gravity.
pub fn parse_gravity(text: &str) -> Result<Vector3<f64>> {
    if text == "off" {
        return Ok(Vector3::zeros());
    }
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidScene(format!(
            "gravity must be 'x,y,z' or 'off', got '{text}'"
        )));
    }
    let mut v = Vector3::zeros();
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .trim()
            .parse()
            .map_err(|_| Error::InvalidScene(format!("bad gravity component '{p}'")))?;
    }
    Ok(v)
}
