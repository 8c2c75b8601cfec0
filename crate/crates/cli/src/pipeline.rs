//! Runs the configured stages in order and records a manifest of their artifacts.

use std::path::Path;
use std::time::Instant;

use rbridge::io::{conv_table, marginal_from_table, marginal_table, marginals_table, Format};
use rbridge::simulate::BridgeSampler;
use rbridge::{Error, Result};
use serde_json::{json, Value};

use crate::artifacts::{write_atomic, Artifacts, Record};
use crate::experiment::{derive_seed, ExperimentConfig, Stage};
use crate::stages::{self, KernelSet};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "rbridge.manifest/1";

/// Seeds of every random stream, split from the root seed.
#[derive(Debug, Clone, Copy)]
pub struct Seeds {
    pub root: u64,
    pub kernel: u64,
    pub simulate: u64,
    pub verify: u64,
}

impl Seeds {
    pub fn new(root: u64) -> Self {
        Seeds {
            root,
            kernel: derive_seed(root, "kernel"),
            simulate: derive_seed(root, "simulate"),
            verify: derive_seed(root, "verify"),
        }
    }
}

struct StageRun {
    stage: Stage,
    seconds: f64,
    artifacts: Vec<Record>,
}

/// Error of a failed stage, kept with its name.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: Option<Stage>,
    pub error: Error,
}

fn run_stage(cfg: &ExperimentConfig, stage: Stage, seeds: &Seeds, art: &mut Artifacts) -> Result<()> {
    let grid = cfg.require_grid()?;
    let model = &cfg.model;
    let root = art.root().to_path_buf();
    let format = cfg.format;
    match stage {
        Stage::Kernel => {
            let set = KernelSet::build(model, grid, cfg.kernel.slices, cfg.kernel.method, &cfg.mc_settings(seeds.kernel))?;
            set.write(art, "kernels", cfg.kernel.method)
        }
        Stage::Solve => {
            let set = KernelSet::read(&root.join("kernels"))?;
            let k = set.full()?;
            // Solve from the marginals as written, so the stage matches `rbridge solve` on its own outputs.
            let mut written = Vec::new();
            for (name, src, t) in [("rho0.csv", &cfg.rho0, 0.0), ("rhoT.csv", &cfg.rho_t, model.horizon)] {
                let table = marginal_table(&src.as_ref().expect("validated").build(grid, &model.regimes, t)?);
                art.write_table(name, &table, Format::Csv)?;
                written.push(marginal_from_table(&table, grid, &model.regimes)?.normalized()?);
            }
            let (rho0, rho_t) = (&written[0], &written[1]);
            let f0 = cfg.solver.f0.as_deref().map(|p| stages::read_field(p, grid, &model.regimes)).transpose()?;
            let out = stages::solve(k, rho0, rho_t, cfg.solver.options, f0.as_deref())?;
            if format == Format::Json {
                art.write_table("conv.json", &conv_table(&out.report), Format::Json)?;
            }
            stages::write_solve(art, &out, k, cfg.solver.options, ("potentials.csv", "conv.csv", "solve.json"), Format::Csv)
        }
        Stage::Bridge => {
            let set = KernelSet::read(&root.join("kernels"))?;
            let (phi, phihat) = stages::propagate(&root.join("potentials.csv"), &set)?;
            if format == Format::Json {
                art.write_table("marginals.json", &marginals_table(&stages::bridge_marginals(&phi, &phihat)?), Format::Json)?;
            }
            stages::write_bridge(
                art,
                &phi,
                &phihat,
                &set,
                ("potential_slices.csv", "marginals.csv", "bridge_kernel.bin"),
                Format::Csv,
            )
        }
        Stage::Verify => {
            let (phi, phihat) = stages::read_slices(&root.join("potential_slices.csv"), grid, &model.regimes)?;
            let inputs = stages::VerifyInputs {
                model,
                grid,
                potentials: Some((&phi, &phihat)),
                margin: cfg.verify.margin,
                pairs: cfg.verify.pairs,
                seed: seeds.verify,
            };
            let report = stages::verify(&inputs, &cfg.verify.suites)?;
            art.write("report.json", stages::pretty(&report).as_bytes())
        }
        Stage::Simulate => {
            let (phi, _) = stages::read_slices(&root.join("potential_slices.csv"), grid, &model.regimes)?;
            let rho0 = rbridge::io::read_marginal(&root.join("rho0.csv"), grid, &model.regimes)?;
            let rho_t = rbridge::io::read_marginal(&root.join("rhoT.csv"), grid, &model.regimes)?;
            let sampler = BridgeSampler::new(model, &phi, &rho0)?;
            let sim = &cfg.simulation;
            let paths = stages::bridge_paths(&sampler, sim.paths, sim.dt, seeds.simulate)?;
            let tv = stages::terminal_tv(&paths, &rho_t);
            stages::write_paths(art, "bridge_paths.csv", &paths, &model.regimes, Format::Csv)?;
            let summary = stages::simulate_summary(sim.paths, sim.dt, seeds.simulate, Some(tv));
            art.write("simulate.json", stages::pretty(&summary).as_bytes())
        }
        Stage::Usbp => stages::run_usbp(art, "usbp", model, grid, cfg.usbp.as_ref().expect("validated"), format),
    }
}

fn manifest(cfg: &ExperimentConfig, seeds: &Seeds, runs: &[StageRun], failure: Option<&StageFailure>) -> Value {
    let stages: Vec<Value> = runs
        .iter()
        .map(|r| {
            json!({
                "name": r.stage.name(),
                "wall_seconds": r.seconds,
                "artifacts": r.artifacts.iter().map(|a| json!({ "path": a.path, "sha256": a.sha256, "bytes": a.bytes })).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "schema": MANIFEST_SCHEMA,
        "status": if failure.is_some() { "failed" } else { "ok" },
        "failed_stage": failure.and_then(|f| f.stage).map(Stage::name),
        "error": failure.map(|f| f.error.to_string()),
        "config_sha256": cfg.hash,
        "versions": { "rbridge": rbridge::VERSION, "rbridge-cli": env!("CARGO_PKG_VERSION") },
        "threads": rayon::current_num_threads(),
        "seeds": { "root": seeds.root, "kernel": seeds.kernel, "simulate": seeds.simulate, "verify": seeds.verify },
        "stages": stages,
    })
}

/// Runs every stage of `cfg` into `out`; the manifest is written at the end whether or not a stage failed.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> std::result::Result<Value, StageFailure> {
    let seeds = Seeds::new(cfg.simulation.seed);
    let mut art = Artifacts::new(out);
    let mut runs = Vec::new();
    let mut failure = None;
    for &stage in &cfg.stages {
        let start = Instant::now();
        let result = run_stage(cfg, stage, &seeds, &mut art)
            .and_then(|()| art.check_unchanged())
            .and_then(|()| art.commit(stage.name()));
        match result {
            Ok(artifacts) => runs.push(StageRun { stage, seconds: start.elapsed().as_secs_f64(), artifacts }),
            Err(error) => {
                failure = Some(StageFailure { stage: Some(stage), error });
                break;
            }
        }
    }
    let m = manifest(cfg, &seeds, &runs, failure.as_ref());
    if let Err(error) = write_atomic(&out.join(MANIFEST), stages::pretty(&m).as_bytes()) {
        return Err(failure.unwrap_or(StageFailure { stage: None, error }));
    }
    match failure {
        Some(f) => Err(f),
        None => Ok(m),
    }
}
