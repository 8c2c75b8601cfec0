//! `rbridge`: one subcommand per stage plus the `pipeline` runner.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 unsupported model.

mod artifacts;
mod experiment;
mod pipeline;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rbridge::grid::Grid;
use rbridge::io::{read_marginal, Format};
use rbridge::kernel::{encode_kernel, kernel_for_model, read_kernel, KernelMethod};
use rbridge::simulate::Start;
use rbridge::sinkhorn::SinkhornOptions;
use rbridge::{Error, ErrorClass, Result};

use crate::artifacts::Artifacts;
use crate::experiment::{derive_seed, ExperimentConfig, Stage, Suite};
use crate::stages::KernelSet;

#[derive(Parser)]
#[command(name = "rbridge", version, about = "Schrödinger bridges for regime-switching jump diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample reference paths from one start point.
    Simulate(SimulateArgs),
    /// Build a transition kernel, or with `--slices` a full kernel set.
    Kernel(KernelArgs),
    /// Solve the static system for a kernel and two marginals.
    Solve(SolveArgs),
    /// Propagate boundary potentials and build the bridge kernel and marginals.
    Bridge(BridgeArgs),
    /// Finite-difference checks of the Kolmogorov equations.
    Verify(VerifyArgs),
    /// Closed-form unbalanced bridge with killing.
    Usbp(UsbpArgs),
    /// Run the stages listed in an experiment file.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Root seed; overrides `simulation.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Start point as comma-separated coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// Start regime label.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KernelArgs {
    #[arg(long)]
    config: PathBuf,
    /// Grid as `lo:hi:n` per axis, comma separated; overrides `grid.spec`.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    t: f64,
    /// End time; the model horizon when omitted.
    #[arg(long)]
    s: Option<f64>,
    /// auto, gaussian, gaussian-cells, switching or mc.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    paths_per_node: Option<usize>,
    #[arg(long)]
    mc_dt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the kernel set for this many slices into the `--out` directory.
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// A kernel file, or a kernel set directory whose full-horizon kernel is used.
    #[arg(long)]
    kernel: PathBuf,
    #[arg(long)]
    rho0: PathBuf,
    #[arg(long = "rhoT", alias = "rho-t")]
    rho_t: PathBuf,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Initial field with columns `regime, x1..xd, value`.
    #[arg(long)]
    f0: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Convergence table; `solve.json` with the summary is written next to it.
    #[arg(long)]
    report: PathBuf,
    /// Table format; taken from the file extension when omitted.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct BridgeArgs {
    #[arg(long)]
    potentials: PathBuf,
    /// Kernel set directory.
    #[arg(long)]
    kernels: PathBuf,
    /// Bridge kernel over the whole horizon.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    marginals: PathBuf,
    /// Propagated potentials; `potential_slices.csv` next to `--out` when omitted.
    #[arg(long)]
    slices_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// backward, forward, adjoint, bridge, hjb or all; repeatable or comma separated.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    suite: Vec<String>,
    #[arg(long)]
    config: PathBuf,
    /// Propagated potentials from the bridge stage.
    #[arg(long)]
    potentials: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UsbpArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    #[arg(long)]
    slices: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated stage list; overrides `pipeline.stages`.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config | ErrorClass::Io => 2,
        ErrorClass::Numeric => 3,
        ErrorClass::Unsupported => 4,
    }
}

fn set_threads() -> Result<()> {
    let Ok(v) = std::env::var("RB_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("RB_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

fn load(config: &Path, grid: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(spec) = grid {
        let g = Grid::parse(spec)?;
        if g.d() != cfg.model.d {
            return Err(Error::Config(format!("grid has {} axes but the model has d = {}", g.d(), cfg.model.d)));
        }
        cfg.grid = Some(g);
    }
    Ok(cfg)
}

fn table_format(explicit: Option<&str>, path: &Path) -> Result<Format> {
    explicit.map_or(Ok(Format::from_path(path)), Format::parse)
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = load(&a.config, None)?;
    let model = &cfg.model;
    let sim = &cfg.simulation;
    let n = a.paths.unwrap_or(sim.paths);
    let dt = a.dt.unwrap_or(sim.dt);
    if n == 0 || !(dt > 0.0) {
        return Err(Error::Config("--paths and --dt must be positive".into()));
    }
    let x0 = a.x0.or_else(|| sim.x0.clone()).unwrap_or_else(|| vec![0.0; model.d]);
    if x0.len() != model.d {
        return Err(Error::Config(format!("--x0 needs {} coordinates", model.d)));
    }
    let regime = match &a.regime {
        Some(l) => model.regimes.index_of(l).ok_or_else(|| Error::Config(format!("unknown regime `{l}`")))?,
        None => sim.regime,
    };
    let seed = derive_seed(a.seed.unwrap_or(sim.seed), "simulate");
    let paths = stages::reference_paths(model, &Start::new(0.0, x0, regime), n, dt, seed)?;
    let mut art = Artifacts::new("");
    stages::write_paths(&mut art, &path_str(&a.out), &paths, &model.regimes, Format::from_path(&a.out))?;
    art.commit("simulate")?;
    Ok(())
}

fn kernel(a: KernelArgs) -> Result<()> {
    let mut cfg = load(&a.config, a.grid.as_deref())?;
    if let Some(m) = &a.method {
        cfg.kernel.method = KernelMethod::parse(m)?;
    }
    if let Some(p) = a.paths_per_node {
        cfg.kernel.mc_paths = p;
    }
    if let Some(dt) = a.mc_dt {
        cfg.kernel.mc_dt = dt;
    }
    if cfg.kernel.mc_paths == 0 || !(cfg.kernel.mc_dt > 0.0) {
        return Err(Error::Config("--paths-per-node and --mc-dt must be positive".into()));
    }
    let grid = cfg.require_grid()?;
    let mc = cfg.mc_settings(derive_seed(a.seed.unwrap_or(cfg.simulation.seed), "kernel"));
    let mut art = Artifacts::new("");
    match a.slices {
        Some(m) => {
            if m < 2 {
                return Err(Error::Config("--slices must be at least 2".into()));
            }
            let set = KernelSet::build(&cfg.model, grid, m, cfg.kernel.method, &mc)?;
            set.write(&mut art, &path_str(&a.out), cfg.kernel.method)?;
        }
        None => {
            let s = a.s.unwrap_or(cfg.model.horizon);
            if !(s > a.t) {
                return Err(Error::Config(format!("need t < s, got t = {} and s = {s}", a.t)));
            }
            let k = kernel_for_model(&cfg.model, grid, a.t, s, cfg.kernel.method, &mc)?;
            if k.leak_warning {
                eprintln!("warning: more than 5% of some row's mass leaves the grid");
            }
            art.write(&path_str(&a.out), &encode_kernel(&k))?;
        }
    }
    art.commit("kernel")?;
    Ok(())
}

fn solve(a: SolveArgs) -> Result<()> {
    let k = if a.kernel.is_dir() { KernelSet::read(&a.kernel)?.full()?.clone() } else { read_kernel(&a.kernel)? };
    let rho0 = read_marginal(&a.rho0, &k.grid, &k.regimes)?.normalized()?;
    let rho_t = read_marginal(&a.rho_t, &k.grid, &k.regimes)?.normalized()?;
    let defaults = SinkhornOptions::default();
    let opts = SinkhornOptions { tol: a.tol.unwrap_or(defaults.tol), max_iters: a.max_iters.unwrap_or(defaults.max_iters) };
    if !(opts.tol > 0.0) || opts.max_iters == 0 {
        return Err(Error::Config("--tol and --max-iters must be positive".into()));
    }
    let f0 = a.f0.as_deref().map(|p| stages::read_field(p, &k.grid, &k.regimes)).transpose()?;
    let out = stages::solve(&k, &rho0, &rho_t, opts, f0.as_deref())?;
    let format = table_format(a.format.as_deref(), &a.out)?;
    let summary = a.report.with_file_name("solve.json");
    let mut art = Artifacts::new("");
    stages::write_solve(&mut art, &out, &k, opts, (&path_str(&a.out), &path_str(&a.report), &path_str(&summary)), format)?;
    art.commit("solve")?;
    Ok(())
}

fn bridge(a: BridgeArgs) -> Result<()> {
    let set = KernelSet::read(&a.kernels)?;
    let (phi, phihat) = stages::propagate(&a.potentials, &set)?;
    let slices = a.slices_out.unwrap_or_else(|| a.out.with_file_name("potential_slices.csv"));
    let mut art = Artifacts::new("");
    stages::write_bridge(
        &mut art,
        &phi,
        &phihat,
        &set,
        (&path_str(&slices), &path_str(&a.marginals), &path_str(&a.out)),
        Format::from_path(&a.marginals),
    )?;
    art.commit("bridge")?;
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let cfg = load(&a.config, a.grid.as_deref())?;
    let grid = cfg.require_grid()?;
    let mut suites = Vec::new();
    for s in &a.suite {
        for suite in Suite::parse(s)? {
            if !suites.contains(&suite) {
                suites.push(suite);
            }
        }
    }
    let fields = a.potentials.as_deref().map(|p| stages::read_slices(p, grid, &cfg.model.regimes)).transpose()?;
    let inputs = stages::VerifyInputs {
        model: &cfg.model,
        grid,
        potentials: fields.as_ref().map(|(a, b)| (a, b)),
        margin: a.margin.unwrap_or(cfg.verify.margin),
        pairs: a.pairs.unwrap_or(cfg.verify.pairs),
        seed: derive_seed(a.seed.unwrap_or(cfg.simulation.seed), "verify"),
    };
    let report = stages::verify(&inputs, &suites)?;
    let mut art = Artifacts::new("");
    art.write(&path_str(&a.out), stages::pretty(&report).as_bytes())?;
    art.commit("verify")?;
    Ok(())
}

fn usbp(a: UsbpArgs) -> Result<()> {
    let mut cfg = load(&a.config, a.grid.as_deref())?;
    let mut sec = cfg.usbp.take().ok_or_else(|| Error::Config("the configuration has no [usbp] section".into()))?;
    if let Some(m) = a.slices {
        if m < 2 {
            return Err(Error::Config("--slices must be at least 2".into()));
        }
        sec.slices = m;
    }
    let grid = cfg.require_grid()?;
    let mut art = Artifacts::new(&a.out);
    stages::run_usbp(&mut art, "", &cfg.model, grid, &sec, cfg.format)?;
    art.commit("usbp")?;
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = load(&a.config, None)?;
    if let Some(list) = &a.stages {
        cfg.stages = list.iter().map(|s| Stage::parse(s.trim())).collect::<Result<_>>()?;
    }
    cfg.validate_stages()?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    match pipeline::run_pipeline(&cfg, &out) {
        Ok(_) => Ok(()),
        Err(f) => {
            if let Some(stage) = f.stage {
                eprintln!("stage `{}` failed", stage.name());
            }
            Err(f.error)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    set_threads()?;
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Kernel(a) => kernel(a),
        Command::Solve(a) => solve(a),
        Command::Bridge(a) => bridge(a),
        Command::Verify(a) => verify(a),
        Command::Usbp(a) => usbp(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
