//! Command-line driver for the metamorph pipeline:
//! `fit` -> `design` -> `simulate` -> `export` over JSON scene files.
//! All logic lives in the library; this binary only parses arguments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metamorph::cli::{
    self, defaults_table, parse_gravity, DesignArgs, ExportArgs, FitArgs, SimulateArgs,
};
use metamorph::simulator::SimParams;
use metamorph::spring_placement::PlacementOptions;
use metamorph::stability_opt::OptimizerOptions;

#[derive(Parser)]
#[command(
    name = "metamorph",
    about = "Design bistable planar spring-linkage structures from two target curves",
    version
)]
struct Cli {
    /// Print the table of all numeric defaults and exit.
    #[arg(long, global = true)]
    show_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample two curves and fit a shared rigid bar chain to each.
    Fit {
        /// Curves JSON file.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (writes scene.json).
        #[arg(long)]
        out: PathBuf,
        /// Bar count override (defaults to the file's m).
        #[arg(long)]
        m: Option<usize>,
        /// Bar length override, millimeters.
        #[arg(long)]
        bar_length: Option<f64>,
        /// Gravity as "x,y,z" (mm/s^2) or "off".
        #[arg(long, default_value = "0,-9810,0")]
        gravity: String,
    },
    /// Iteratively add springs until both forms are stable.
    Design {
        /// Scene JSON file from `fit`.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (design.json, loop_trace.json).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        optimizer: OptimizerCli,
        /// Spring budget (default 4 per bar).
        #[arg(long)]
        budget: Option<usize>,
        /// Concurrent finite-difference probe evaluations.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write optimizer_trace.csv.
        #[arg(long)]
        trace: bool,
        /// Accepted for interface uniformity; the design stage is
        /// deterministic and uses no randomness.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate bistability with perturbed forward simulations.
    Simulate {
        /// Design JSON file from `design`.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (classification.json, trajectory CSVs).
        #[arg(long)]
        out: PathBuf,
        /// Perturbations per form.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Perturbation kinetic energy as a fraction of the barrier.
        #[arg(long, default_value_t = 0.1)]
        energy_fraction: f64,
        /// Absolute perturbation kinetic energy (overrides the fraction).
        #[arg(long)]
        energy: Option<f64>,
        /// RNG seed for the perturbation directions.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sim: SimCli,
        /// Also write per-run trajectory CSVs.
        #[arg(long)]
        trace: bool,
    },
    /// Assign fabrication layers and export SVGs plus fabrication JSON.
    Export {
        /// Design JSON file from `design`.
        #[arg(long)]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct OptimizerCli {
    /// Potential regularizer weight.
    #[arg(long)]
    w: Option<f64>,
    /// Minimum accepted projected-Hessian eigenvalue (default scale rule).
    #[arg(long)]
    eig_margin: Option<f64>,
    /// First-order residual tolerance (default scale rule).
    #[arg(long)]
    residual_tol: Option<f64>,
    /// Reference fabrication stiffness k0, g/s^2.
    #[arg(long)]
    k0: Option<f64>,
}

impl OptimizerCli {
    fn to_options(&self) -> OptimizerOptions {
        let mut opts = OptimizerOptions::default();
        if let Some(w) = self.w {
            opts.w = w;
        }
        opts.eig_margin = self.eig_margin;
        opts.residual_tol = self.residual_tol;
        if let Some(k0) = self.k0 {
            opts.k0 = k0;
        }
        opts
    }
}

#[derive(Args)]
struct SimCli {
    /// Time step, seconds.
    #[arg(long)]
    h: Option<f64>,
    /// Constraint stiffness.
    #[arg(long)]
    kp: Option<f64>,
    /// Constraint damping.
    #[arg(long)]
    kd: Option<f64>,
    /// Viscous damping, 1/s.
    #[arg(long)]
    damping: Option<f64>,
    /// Step cap per settle run.
    #[arg(long)]
    max_steps: Option<usize>,
}

impl SimCli {
    fn to_params(&self) -> SimParams {
        let mut p = SimParams::default();
        if let Some(h) = self.h {
            p.h = h;
        }
        if let Some(kp) = self.kp {
            p.k_p = kp;
        }
        if let Some(kd) = self.kd {
            p.k_d = kd;
        }
        if let Some(d) = self.damping {
            p.viscous_damping = d;
        }
        if let Some(m) = self.max_steps {
            p.max_steps = m;
        }
        p
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("METAMORPH_LOG")).init();
    let cli = Cli::parse();
    if cli.show_defaults {
        print!("{}", defaults_table());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("no subcommand given; try --help or --show-defaults");
        return ExitCode::from(1);
    };
    let code = match run(command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            cli::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}

fn run(command: Command) -> metamorph::Result<i32> {
    match command {
        Command::Fit {
            input,
            out,
            m,
            bar_length,
            gravity,
        } => {
            cli::cmd_fit(&FitArgs {
                input,
                out,
                m,
                bar_length,
                gravity: parse_gravity(&gravity)?,
            })?;
            Ok(0)
        }
        Command::Design {
            input,
            out,
            optimizer,
            budget,
            jobs,
            trace,
            seed: _,
        } => {
            let summary = cli::cmd_design(&DesignArgs {
                input,
                out,
                optimizer: optimizer.to_options(),
                placement: PlacementOptions {
                    budget,
                    ..PlacementOptions::default()
                },
                jobs,
                trace,
            })?;
            Ok(if summary.converged { 0 } else { 3 })
        }
        Command::Simulate {
            input,
            out,
            count,
            energy_fraction,
            energy,
            seed,
            sim,
            trace,
        } => {
            let summary = cli::cmd_simulate(&SimulateArgs {
                input,
                out,
                count,
                energy_fraction,
                energy,
                seed,
                sim: sim.to_params(),
                trace,
            })?;
            Ok(if summary.diverged == 0 && summary.unsettled == 0 {
                0
            } else {
                4
            })
        }
        Command::Export { input, out } => {
            cli::cmd_export(&ExportArgs { input, out })?;
            Ok(0)
        }
    }
}
