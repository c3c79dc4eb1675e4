//! `coarse-id`: command-line workbench for FIR identification, error bounds and
//! robust certification.
//!
//! Exit codes: 0 success, 1 other errors, 2 infeasible design, 3 singular
//! design, 4 certification failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coarse_id::design::{pnorm, EnsembleKind};
use coarse_id::par::with_threads;
use coarse_id::pipeline::{self, Artifacts, McRequest, RunConfig, Statistic};
use coarse_id::Error;

#[derive(Parser, Debug)]
#[command(
    name = "coarse-id",
    version,
    about = "Coarse-grained FIR identification and robust certification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for simulation stages (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short = 'o', global = true)]
    out: Option<PathBuf>,
    /// Input norm exponent, a number >= 1 or `inf`.
    #[arg(long, global = true, value_parser = pnorm::parse)]
    p: Option<f64>,
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long = "T", global = true)]
    t: Option<usize>,
    #[arg(long, global = true)]
    r: Option<usize>,
    /// impulse, sinusoid, hadamard or auto.
    #[arg(long, global = true)]
    ensemble: Option<EnsembleKind>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long = "sigma-n", global = true)]
    sigma_n: Option<f64>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Plant impulse response (JSON or CSV) instead of the random family.
    #[arg(long, global = true)]
    plant: Option<PathBuf>,
    #[arg(long = "process-noise", global = true)]
    process_noise: bool,
    /// Attach the simulated noise bound to identification reports.
    #[arg(long = "mc-bound", global = true)]
    mc_bound: bool,
    /// Number of simulation samples.
    #[arg(long = "N", global = true)]
    mc_samples: Option<usize>,
    /// Confidence parameter of simulated bounds.
    #[arg(long = "mc-delta", global = true)]
    mc_delta: Option<f64>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// Decay constant of the plant envelope.
    #[arg(long = "C", global = true)]
    decay_c: Option<f64>,
    /// Uncertainty radius.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Controller JSON {num, den, Ts}.
    #[arg(long, global = true)]
    controller: Option<PathBuf>,
    #[arg(long = "w1-dc", global = true)]
    w1_dc: Option<f64>,
    #[arg(long = "w1-wc", global = true)]
    w1_wc: Option<f64>,
    #[arg(long = "w1-hf", global = true)]
    w1_hf: Option<f64>,
    #[arg(long = "grid-N", global = true)]
    grid_n: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Sensor noise level in closed-loop simulations.
    #[arg(long = "sim-noise", global = true)]
    sim_noise: Option<f64>,
    #[arg(long, global = true)]
    perturbations: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an input ensemble and report its optimality gap.
    Design,
    /// Query the plant, fit the FIR model and attach error bounds.
    Identify,
    /// Analytic sample-complexity and error bounds.
    Bound,
    /// Simulated tail bound or certified quantile of a statistic.
    McBound {
        /// decay_C, e_approx, e_noise or custom.
        #[arg(long, default_value = "decay_C")]
        statistic: Statistic,
        /// Sample file for the custom statistic, one value per line.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Certify Pr(X >= t) at this threshold instead of searching for a quantile.
        #[arg(long)]
        threshold: Option<f64>,
        /// Frequency grid for e_noise.
        #[arg(long = "n-grid")]
        n_grid: Option<usize>,
    },
    /// Certify a controller against the identified uncertainty ball.
    Certify {
        /// Model taps (CSV or JSON); identified afresh when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Closed-loop step response of the plant with a controller.
    Simulate,
    /// Design lower bound and minimax reference.
    LowerBound,
    /// Full identification-to-certification run on the random plant family.
    Demo,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            seed => cfg.seed,
            out => cfg.output_dir,
            p => cfg.p,
            m => cfg.m,
            t => cfg.t,
            r => cfg.r,
            ensemble => cfg.ensemble,
            sigma => cfg.sigma,
            sigma_n => cfg.sigma_n,
            eps => cfg.eps,
            delta => cfg.delta,
            mc_samples => cfg.mc_samples,
            mc_delta => cfg.mc_delta,
            rho => cfg.rho,
            w1_dc => cfg.w1.dc,
            w1_wc => cfg.w1.wc,
            w1_hf => cfg.w1.hf,
            grid_n => cfg.grid_n,
            steps => cfg.steps,
            sim_noise => cfg.sim_noise,
            perturbations => cfg.perturbations,
        );
        if self.plant.is_some() {
            cfg.plant_file = self.plant.clone();
        }
        if self.decay_c.is_some() {
            cfg.decay_c = self.decay_c;
        }
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
        }
        if self.controller.is_some() {
            cfg.controller_file = self.controller.clone();
        }
        cfg.process_noise |= self.process_noise;
        cfg.mc_bound |= self.mc_bound;
    }
}

enum Failure {
    Lib(Error),
    Uncertified,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn emit(cfg: &RunConfig, out: &Artifacts, primary: &str) -> Result<(), Error> {
    out.write_to(&cfg.output_dir)?;
    if let Some(body) = out.get(primary) {
        print!("{body}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json(
            &std::fs::read_to_string(path).map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?,
        )?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;

    match &cli.command {
        Command::Design => emit(&cfg, &pipeline::cmd_design(&cfg)?, "design_report.json")?,
        Command::Identify => emit(&cfg, &pipeline::cmd_identify(&cfg)?, "identify_report.json")?,
        Command::Bound => emit(&cfg, &pipeline::cmd_bound(&cfg)?, "bound_report.json")?,
        Command::LowerBound => emit(&cfg, &pipeline::cmd_lower_bound(&cfg)?, "lower_bound.json")?,
        Command::Simulate => emit(&cfg, &pipeline::cmd_simulate(&cfg)?, "tracking_metrics.json")?,
        Command::McBound {
            statistic,
            samples,
            threshold,
            n_grid,
        } => {
            let req = McRequest {
                statistic: Some(*statistic),
                samples_file: samples.clone(),
                threshold: *threshold,
                n_grid: *n_grid,
            };
            emit(&cfg, &pipeline::cmd_mc_bound(&cfg, &req)?, "mc_bound.json")?;
        }
        Command::Certify { model } => {
            let (out, outcome) = pipeline::cmd_certify(&cfg, model.as_deref())?;
            emit(&cfg, &out, "certify_report.json")?;
            if !outcome.certified {
                return Err(Failure::Uncertified);
            }
        }
        Command::Demo => {
            let (out, outcome) = pipeline::cmd_demo(&cfg)?;
            emit(&cfg, &out, "summary.json")?;
            if !outcome.certified {
                return Err(Failure::Uncertified);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match with_threads(cli.threads, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Uncertified) => {
            eprintln!("certification failed: performance margin is not positive or the loop is unstable");
            ExitCode::from(4)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::InfeasibleSpec(_) => 2,
                Error::SingularDesign { .. } => 3,
                _ => 1,
            })
        }
    }
}
