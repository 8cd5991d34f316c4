mod config;
mod experiments;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use experiments::{Ctx, Part};
use report::{write_manifest, write_outputs, RunManifest};

/// Weak coupling limit experiments on small open quantum systems.
#[derive(Parser)]
#[command(name = "wcl-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory. Defaults to `$WCL_LAB_OUT/<experiment>` or `wcl-lab-out/<experiment>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pin the worker pool to `--jobs` threads (1 if unset).
    #[arg(long)]
    deterministic: bool,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Only validate the configuration.
    #[arg(long)]
    validate_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Davies generator data and residuals.
    Davies(Common),
    /// Semigroup evolution of an observable with Choi diagnostics.
    LindbladEvolve(Common),
    /// Reduced dynamics on the truncated Fock space against the Davies contraction.
    FullEvolve(Common),
    /// Reduced dynamics in the one-excitation sector over a coupling sweep.
    WclSweep(Common),
    /// Multi-time correlation chains against their semigroup limit.
    Correlations(Common),
    /// Resummed expansion against direct propagation.
    ResummationCheck(Common),
    /// Time-bin dilation against the semigroup.
    DilationCheck(Common),
    /// Field matrix elements against the dilation.
    ExtendedWcl {
        #[command(flatten)]
        common: Common,
        /// Parts to run; all by default.
        #[arg(long, value_enum, value_delimiter = ',')]
        parts: Vec<Part>,
    },
    /// Second quantization of fiber multiplications under the scaling map.
    ThetaCheck(Common),
    /// Pairing and involution enumeration.
    Pairings {
        #[command(flatten)]
        common: Common,
        /// Also write every pairing as a bracket sequence.
        #[arg(long)]
        brackets: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Davies,
    LindbladEvolve,
    FullEvolve,
    WclSweep,
    Correlations,
    ResummationCheck,
    DilationCheck,
    ExtendedWcl,
    ThetaCheck,
    Pairings,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Davies => "davies",
            Experiment::LindbladEvolve => "lindblad-evolve",
            Experiment::FullEvolve => "full-evolve",
            Experiment::WclSweep => "wcl-sweep",
            Experiment::Correlations => "correlations",
            Experiment::ResummationCheck => "resummation-check",
            Experiment::DilationCheck => "dilation-check",
            Experiment::ExtendedWcl => "extended-wcl",
            Experiment::ThetaCheck => "theta-check",
            Experiment::Pairings => "pairings",
        }
    }
}

const USAGE_ERROR: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (exp, common, parts, brackets) = match cli.command {
        Command::Davies(c) => (Experiment::Davies, c, vec![], false),
        Command::LindbladEvolve(c) => (Experiment::LindbladEvolve, c, vec![], false),
        Command::FullEvolve(c) => (Experiment::FullEvolve, c, vec![], false),
        Command::WclSweep(c) => (Experiment::WclSweep, c, vec![], false),
        Command::Correlations(c) => (Experiment::Correlations, c, vec![], false),
        Command::ResummationCheck(c) => (Experiment::ResummationCheck, c, vec![], false),
        Command::DilationCheck(c) => (Experiment::DilationCheck, c, vec![], false),
        Command::ExtendedWcl { common, parts } => (Experiment::ExtendedWcl, common, parts, false),
        Command::ThetaCheck(c) => (Experiment::ThetaCheck, c, vec![], false),
        Command::Pairings { common, brackets } => (Experiment::Pairings, common, vec![], brackets),
    };
    match run(exp, &common, &parts, brackets) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(USAGE_ERROR)
        }
    }
}

fn output_dir(common: &Common, loaded: &config::Loaded, exp: Experiment) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if let Some(out) = &loaded.config.out {
        return if out.is_absolute() { out.clone() } else { loaded.base_dir.join(out) };
    }
    let root = std::env::var_os("WCL_LAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("wcl-lab-out"));
    root.join(exp.name())
}

/// Returns whether every check passed.
fn run(exp: Experiment, common: &Common, parts: &[Part], brackets: bool) -> Result<bool> {
    let started = Instant::now();
    let loaded = config::load(&common.config)?;
    let diags = config::validate(&loaded, exp);
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("invalid config: {d}");
        }
        anyhow::bail!("{} problem(s) in {}", diags.len(), common.config.display());
    }
    if common.validate_only {
        println!("{}: ok", common.config.display());
        return Ok(true);
    }
    let model = loaded.resolve_model()?;
    let jobs = match (common.jobs, common.deterministic) {
        (Some(j), _) => j.max(1),
        (None, true) => 1,
        (None, false) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().context("cannot start worker pool")?;
    let ctx = Ctx { cfg: &loaded.config, model: &model.spec, brackets };
    let parts = if parts.is_empty() { vec![Part::Annihilator, Part::Free, Part::Elements] } else { parts.to_vec() };
    let outcome = pool.install(|| match exp {
        Experiment::Davies => experiments::davies(&ctx),
        Experiment::LindbladEvolve => experiments::lindblad_evolve(&ctx),
        Experiment::FullEvolve => experiments::reduced_sweep(&ctx, true),
        Experiment::WclSweep => experiments::reduced_sweep(&ctx, false),
        Experiment::Correlations => experiments::correlations(&ctx),
        Experiment::ResummationCheck => experiments::resummation(&ctx),
        Experiment::DilationCheck => experiments::dilation_check(&ctx),
        Experiment::ExtendedWcl => experiments::extended_wcl(&ctx, &parts),
        Experiment::ThetaCheck => experiments::theta_check(&ctx),
        Experiment::Pairings => experiments::pairings(&ctx),
    })?;
    let dir = output_dir(common, &loaded, exp);
    let files = write_outputs(&dir, &outcome)?;
    let pass = outcome.checks.iter().all(|c| c.pass);
    for c in &outcome.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let manifest = RunManifest {
        tool: "wcl-lab",
        version: env!("CARGO_PKG_VERSION"),
        experiment: exp.name().to_string(),
        config: common.config.display().to_string(),
        config_hash: loaded.config_hash.clone(),
        model: model.spec.name.clone(),
        model_hash: model.hash.clone(),
        seed: loaded.config.seed,
        deterministic: common.deterministic,
        jobs,
        files,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        checks: outcome.checks,
        pass,
    };
    write_manifest(&dir, &manifest)?;
    println!("wrote {}", dir.display());
    Ok(pass)
}
