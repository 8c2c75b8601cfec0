//! Stage bodies shared by the subcommands and the pipeline.

use std::path::Path;

use rbridge::expr::CoefficientExpr;
use rbridge::grid::Grid;
use rbridge::io::{
    boundary_fields, conv_table, marginal_from_table, marginals_table, paths_table, potential_from_table, potentials_table,
    read_marginal, Cell, Format, Table,
};
use rbridge::kernel::{encode_kernel, kernel_for_model, Kernel, KernelMethod, Marginal, McSettings};
use rbridge::model::{ModelSpec, RegimeSet};
use rbridge::potentials::{bridge_kernel, bridge_marginal, propagate_phi, propagate_phihat, PotentialField, PotentialKind};
use rbridge::simulate::{monte_carlo, simulate_reference, BridgeSampler, RngStream, SamplePath, Start};
use rbridge::sinkhorn::{iterate_c, BoundaryPotentials, ConvergenceReport, EndpointKernel, SinkhornOptions, SolveStatus};
use rbridge::usbp::{usbp_killing_rate, usbp_kernels, usbp_potentials, KillingModel, UsbpSolution, UsbpTarget};
use rbridge::verify::{check_adjoint, check_backward, check_bridge_forward, check_forward, check_hjb, CheckOptions, ResidualReport};
use rbridge::{Error, Result};
use serde_json::{json, Value};

use crate::artifacts::{sha256_hex, Artifacts};
use crate::experiment::{Suite, TargetSource, UsbpSection};

pub const KERNEL_INDEX: &str = "kernels.json";
pub const KERNEL_SCHEMA: &str = "rbridge.kernels/1";
pub const VERIFY_SCHEMA: &str = "rbridge.verify/1";
pub const USBP_SCHEMA: &str = "rbridge.usbp/1";

/// What a kernel in a set is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Over the whole horizon.
    Full,
    /// From a slice time to the horizon, for the backward potential.
    ToEnd,
    /// From time 0 to a slice time, for the forward potential.
    FromStart,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Full => "full",
            Role::ToEnd => "to_end",
            Role::FromStart => "from_start",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Role::Full),
            "to_end" => Ok(Role::ToEnd),
            "from_start" => Ok(Role::FromStart),
            _ => Err(Error::Format(format!("unknown kernel role `{s}`"))),
        }
    }
}

/// Kernels over `[0, T]`, `[t_m, T]` and `[0, t_m]` on `slices + 1` equally spaced times.
pub struct KernelSet {
    pub kernels: Vec<(Vec<Role>, Kernel)>,
}

impl KernelSet {
    /// Builds the set; kernel `k` uses Monte Carlo seed `mc.seed + k`.
    pub fn build(model: &ModelSpec, grid: &Grid, slices: usize, method: KernelMethod, mc: &McSettings) -> Result<Self> {
        let horizon = model.horizon;
        let times: Vec<f64> = (0..=slices).map(|m| horizon * m as f64 / slices as f64).collect();
        let mut spans: Vec<(f64, f64, Vec<Role>)> = vec![(0.0, horizon, vec![Role::Full, Role::ToEnd, Role::FromStart])];
        spans.extend(times[1..slices].iter().map(|&t| (t, horizon, vec![Role::ToEnd])));
        spans.extend(times[1..slices].iter().map(|&s| (0.0, s, vec![Role::FromStart])));
        let kernels = spans
            .into_iter()
            .enumerate()
            .map(|(k, (t, s, roles))| {
                let settings = McSettings { seed: mc.seed.wrapping_add(k as u64), ..*mc };
                Ok((roles, kernel_for_model(model, grid, t, s, method, &settings)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KernelSet { kernels })
    }

    pub fn full(&self) -> Result<&Kernel> {
        self.with_role(Role::Full).next().ok_or_else(|| Error::Format("kernel set has no full-horizon kernel".into()))
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Kernel> {
        self.kernels.iter().filter(move |(r, _)| r.contains(&role)).map(|(_, k)| k)
    }

    pub fn grid(&self) -> Result<&Grid> {
        Ok(&self.full()?.grid)
    }

    pub fn regimes(&self) -> Result<&RegimeSet> {
        Ok(&self.full()?.regimes)
    }

    /// Writes `dir/kNNN.bin` for every kernel plus the index.
    pub fn write(&self, art: &mut Artifacts, dir: &str, method: KernelMethod) -> Result<()> {
        let mut entries = Vec::new();
        for (k, (roles, kernel)) in self.kernels.iter().enumerate() {
            let file = format!("k{k:03}.bin");
            let bytes = encode_kernel(kernel);
            entries.push(json!({
                "file": file,
                "t": kernel.t,
                "s": kernel.s,
                "roles": roles.iter().map(|r| r.name()).collect::<Vec<_>>(),
                "sha256": sha256_hex(&bytes),
                "leak_warning": kernel.leak_warning,
            }));
            art.write(&join(dir, &file), &bytes)?;
        }
        let full = self.full()?;
        let index = json!({
            "schema": KERNEL_SCHEMA,
            "method": method.name(),
            "grid": full.grid.spec(),
            "regimes": full.regimes.labels(),
            "entries": entries,
        });
        art.write(&join(dir, KERNEL_INDEX), pretty(&index).as_bytes())
    }

    /// Reads a set written by [`KernelSet::write`], checking every file against its recorded hash.
    pub fn read(dir: &Path) -> Result<Self> {
        let index_path = dir.join(KERNEL_INDEX);
        let text = std::fs::read_to_string(&index_path)
            .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", index_path.display())))?;
        let index: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", index_path.display())))?;
        if index["schema"] != KERNEL_SCHEMA {
            return Err(Error::Format(format!("{} is not a kernel index", index_path.display())));
        }
        let entries = index["entries"].as_array().ok_or_else(|| Error::Format("kernel index has no entries".into()))?;
        let mut kernels = Vec::new();
        for e in entries {
            let file = e["file"].as_str().ok_or_else(|| Error::Format("kernel entry without a file".into()))?;
            let path = dir.join(file);
            let bytes = std::fs::read(&path)?;
            if Some(sha256_hex(&bytes).as_str()) != e["sha256"].as_str() {
                return Err(Error::Format(format!("{} does not match its recorded hash", path.display())));
            }
            let roles = e["roles"]
                .as_array()
                .ok_or_else(|| Error::Format("kernel entry without roles".into()))?
                .iter()
                .map(|r| Role::parse(r.as_str().unwrap_or("")))
                .collect::<Result<Vec<_>>>()?;
            kernels.push((roles, rbridge::kernel::decode_kernel(&bytes)?));
        }
        let set = KernelSet { kernels };
        set.full()?;
        Ok(set)
    }
}

fn join(dir: &str, file: &str) -> String {
    if dir.is_empty() {
        file.to_string()
    } else {
        format!("{dir}/{file}")
    }
}

pub fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialise");
    s.push('\n');
    s
}

/// Reads a field file with columns `regime, x1..xd, value`.
pub fn read_field(path: &Path, grid: &Grid, regimes: &RegimeSet) -> Result<Vec<f64>> {
    let mut t = Table::read_csv(path)?;
    let c = t.column("value")?;
    t.columns[c] = "density".into();
    Ok(marginal_from_table(&t, grid, regimes)?.densities())
}

pub struct SolveOutput {
    pub potentials: BoundaryPotentials,
    pub report: ConvergenceReport,
}

/// Runs the Sinkhorn iteration, optionally from an initial field given on the whole grid.
pub fn solve(k: &Kernel, rho0: &Marginal, rho_t: &Marginal, opts: SinkhornOptions, f0: Option<&[f64]>) -> Result<SolveOutput> {
    let ek = EndpointKernel::new(k, rho0, rho_t)?;
    let start: Option<Vec<f64>> = f0.map(|f| ek.cols.iter().map(|&c| f[c]).collect());
    let (potentials, report) = iterate_c(&ek, start.as_deref(), opts)?;
    Ok(SolveOutput { potentials, report })
}

pub fn solve_summary(report: &ConvergenceReport, opts: SinkhornOptions) -> Value {
    json!({
        "schema": "rbridge.solve/1",
        "status": match report.status { SolveStatus::Converged => "converged", SolveStatus::MaxIters => "max_iters" },
        "iterations": report.iterations,
        "tol": opts.tol,
        "max_iters": opts.max_iters,
        "final_residual": report.residuals.last().copied(),
        "error_rho0": report.error_rho0,
        "error_rhoT": report.error_rho_t,
    })
}

/// Fails with a numeric error when the iteration stopped before reaching the tolerance.
pub fn require_converged(report: &ConvergenceReport, opts: SinkhornOptions) -> Result<()> {
    match report.status {
        SolveStatus::Converged => Ok(()),
        SolveStatus::MaxIters => Err(Error::NonConvergence(format!(
            "Sinkhorn stopped after {} iterations with residual {:e} > {:e}",
            report.iterations,
            report.residuals.last().copied().unwrap_or(f64::NAN),
            opts.tol
        ))),
    }
}

/// Writes `potentials`, `conv` and `solve.json`; the convergence table is written even when the solve failed.
pub fn write_solve(
    art: &mut Artifacts,
    out: &SolveOutput,
    k: &Kernel,
    opts: SinkhornOptions,
    names: (&str, &str, &str),
    format: Format,
) -> Result<()> {
    let (potentials, conv, summary) = names;
    art.write_table(conv, &conv_table(&out.report), format)?;
    art.write(summary, pretty(&solve_summary(&out.report, opts)).as_bytes())?;
    require_converged(&out.report, opts)?;
    let (phi, phihat) = boundary_fields(&out.potentials, &k.grid, &k.regimes, k.t, k.s);
    art.write_table(potentials, &potentials_table(&[&phi, &phihat]), format)
}

/// Boundary potentials from a solve, propagated to every slice of a kernel set.
pub fn propagate(potentials: &Path, set: &KernelSet) -> Result<(PotentialField, PotentialField)> {
    let grid = set.grid()?;
    let regimes = set.regimes()?;
    let table = Table::read_csv(potentials)?;
    let phi_b = potential_from_table(&table, grid, regimes, PotentialKind::Phi)?;
    let phihat_b = potential_from_table(&table, grid, regimes, PotentialKind::PhiHat)?;
    if phi_b.slices.len() != 2 || phihat_b.slices.len() != 2 {
        return Err(Error::Format("boundary potentials need exactly two slices".into()));
    }
    let w = grid.weight();
    let to_end: Vec<Kernel> = set.with_role(Role::ToEnd).cloned().collect();
    let from_start: Vec<Kernel> = set.with_role(Role::FromStart).cloned().collect();
    let phi = propagate_phi(&phi_b.slices[1], &to_end)?;
    let start_mass: Vec<f64> = phihat_b.slices[0].iter().map(|v| v * w).collect();
    let phihat = propagate_phihat(&start_mass, &from_start)?;
    Ok((phi, phihat))
}

pub fn bridge_marginals(phi: &PotentialField, phihat: &PotentialField) -> Result<Vec<(f64, Marginal)>> {
    phi.times.iter().map(|&t| Ok((t, bridge_marginal(phi, phihat, t)?))).collect()
}

/// Writes the propagated potentials, the bridge marginals and the full-horizon bridge kernel.
pub fn write_bridge(
    art: &mut Artifacts,
    phi: &PotentialField,
    phihat: &PotentialField,
    set: &KernelSet,
    names: (&str, &str, &str),
    format: Format,
) -> Result<()> {
    let (slices, marginals, kernel) = names;
    art.write_table(slices, &potentials_table(&[phi, phihat]), format)?;
    art.write_table(marginals, &marginals_table(&bridge_marginals(phi, phihat)?), format)?;
    art.write(kernel, &encode_kernel(&bridge_kernel(phi, set.full()?)?))
}

/// Reads the propagated potentials written by the bridge stage.
pub fn read_slices(path: &Path, grid: &Grid, regimes: &RegimeSet) -> Result<(PotentialField, PotentialField)> {
    let t = Table::read_csv(path)?;
    Ok((
        potential_from_table(&t, grid, regimes, PotentialKind::Phi)?,
        potential_from_table(&t, grid, regimes, PotentialKind::PhiHat)?,
    ))
}

fn residual_json(suite: Suite, r: &ResidualReport) -> Value {
    json!({
        "suite": suite.name(),
        "identity": r.identity,
        "grid": r.grid,
        "slices": r.slices,
        "max": r.max,
        "l2": r.l2,
        "per_regime_max": r.per_regime_max,
        "evaluated": r.evaluated,
        "excluded": r.excluded,
    })
}

pub struct VerifyInputs<'a> {
    pub model: &'a ModelSpec,
    pub grid: &'a Grid,
    pub potentials: Option<(&'a PotentialField, &'a PotentialField)>,
    pub margin: usize,
    pub pairs: usize,
    pub seed: u64,
}

/// Runs the requested suites and collects a versioned JSON report.
pub fn verify(inputs: &VerifyInputs, suites: &[Suite]) -> Result<Value> {
    let opts = CheckOptions { margin: inputs.margin, ..CheckOptions::default() };
    let need = |s: Suite| {
        inputs
            .potentials
            .ok_or_else(|| Error::Config(format!("suite `{}` needs propagated potentials", s.name())))
    };
    let mut results = Vec::new();
    for &s in suites {
        let v = match s {
            Suite::Backward => residual_json(s, &check_backward(need(s)?.0, inputs.model, &opts)?),
            Suite::Forward => residual_json(s, &check_forward(need(s)?.1, inputs.model, &opts)?),
            Suite::Bridge => {
                let (phi, phihat) = need(s)?;
                residual_json(s, &check_bridge_forward(phi, phihat, inputs.model, &opts)?)
            }
            Suite::Hjb => residual_json(s, &check_hjb(need(s)?.0, inputs.model, &opts)?),
            Suite::Adjoint => {
                let pairs = check_adjoint(inputs.model, inputs.grid, 0.0, inputs.pairs, inputs.seed)?;
                let rel: Vec<f64> = pairs.iter().map(|p| p.relative).collect();
                json!({
                    "suite": s.name(),
                    "identity": "adjoint",
                    "pairs": pairs.len(),
                    "max_relative": rel.iter().copied().fold(0.0, f64::max),
                    "relative": rel,
                })
            }
        };
        results.push(v);
    }
    Ok(json!({ "schema": VERIFY_SCHEMA, "grid": inputs.grid.spec(), "suites": results }))
}

/// Reference paths from one start point, path `k` on stream `k` of `seed`.
pub fn reference_paths(model: &ModelSpec, start: &Start, n: usize, dt: f64, seed: u64) -> Result<Vec<SamplePath>> {
    monte_carlo(n, |k| simulate_reference(model, start, dt, &RngStream::new(seed, k))).into_iter().collect()
}

pub fn bridge_paths(sampler: &BridgeSampler, n: usize, dt: f64, seed: u64) -> Result<Vec<SamplePath>> {
    monte_carlo(n, |k| sampler.sample(dt, &RngStream::new(seed, k))).into_iter().collect()
}

/// Total variation between the empirical terminal law of `paths` and `target`; mass off the grid counts fully.
pub fn terminal_tv(paths: &[SamplePath], target: &Marginal) -> f64 {
    let n = target.grid.len();
    let mut counts = vec![0.0; n * target.regimes.count()];
    let mut off = 0.0;
    let unit = 1.0 / paths.len() as f64;
    for p in paths {
        let (x, i) = p.terminal();
        match target.grid.locate(x) {
            Some(k) => counts[i * n + k] += unit,
            None => off += unit,
        }
    }
    0.5 * (counts.iter().zip(target.masses()).map(|(a, b)| (a - b).abs()).sum::<f64>() + off)
}

pub fn simulate_summary(n: usize, dt: f64, seed: u64, tv: Option<f64>) -> Value {
    json!({ "schema": "rbridge.simulate/1", "paths": n, "dt": dt, "seed": seed, "terminal_tv": tv })
}

pub fn write_paths(art: &mut Artifacts, rel: &str, paths: &[SamplePath], regimes: &RegimeSet, format: Format) -> Result<()> {
    art.write_table(rel, &paths_table(paths, regimes), format)
}

/// Killing model and target from a `[usbp]` section.
pub fn usbp_inputs(model: &ModelSpec, grid: &Grid, sec: &UsbpSection) -> Result<(KillingModel, UsbpTarget)> {
    let km = KillingModel::new(model.clone(), sec.v.clone(), sec.x0.clone())?;
    let horizon = km.horizon();
    let target = match &sec.target {
        TargetSource::Reference => UsbpTarget::reference(&km, grid)?,
        TargetSource::Shapes { active, dead } => {
            let eval = |e: &CoefficientExpr, x: &[f64]| e.eval(horizon, x, &[]).unwrap_or(f64::NAN);
            UsbpTarget::from_shapes(grid, |x| eval(active, x), |x| eval(dead, x))?
        }
        TargetSource::File(p) => {
            let regimes = RegimeSet::new(vec!["active".into(), "dead".into()])?;
            UsbpTarget::from_marginal(&read_marginal(p, grid, &regimes)?.normalized()?)?
        }
    };
    Ok((km, target))
}

/// `t, x1, rate` at every slice and node where the bridge killing rate is defined.
pub fn killing_rate_table(sol: &UsbpSolution, v: &CoefficientExpr) -> Result<Table> {
    let grid = &sol.phi.grid;
    let mut t = Table::new("killing_rate", vec!["t".into(), "x1".into(), "rate".into()]);
    for &time in &sol.phi.times {
        for x in grid.nodes() {
            match usbp_killing_rate(&sol.phi, v, time, &x) {
                Ok(rate) => t.push(vec![Cell::Num(time), Cell::Num(x[0]), Cell::Num(rate)]),
                Err(Error::ControlDomain(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(t)
}

/// Runs the unbalanced bridge and writes its artifact set under `dir`.
pub fn run_usbp(art: &mut Artifacts, dir: &str, model: &ModelSpec, grid: &Grid, sec: &UsbpSection, format: Format) -> Result<()> {
    let (km, target) = usbp_inputs(model, grid, sec)?;
    let horizon = km.horizon();
    let (p11, p12) = usbp_kernels(&km, grid, 0.0, horizon)?;
    art.write(&join(dir, "p11.bin"), &encode_kernel(&p11))?;
    art.write(&join(dir, "p12.bin"), &encode_kernel(&p12))?;
    let sol = usbp_potentials(&km, &target, sec.slices)?;
    art.write_table(&join(dir, "potentials.csv"), &potentials_table(&[&sol.phi, &sol.phihat]), Format::Csv)?;
    let marginals = bridge_marginals(&sol.phi, &sol.phihat)?;
    art.write_table(&join(dir, "marginals.csv"), &marginals_table(&marginals), Format::Csv)?;
    art.write_table(&join(dir, "killing_rate.csv"), &killing_rate_table(&sol, &sec.v)?, Format::Csv)?;
    if format == Format::Json {
        art.write_table(&join(dir, "marginals.json"), &marginals_table(&marginals), Format::Json)?;
    }
    let w = grid.weight();
    let killed_kernel: f64 = p12.row(sol.start_node).iter().sum::<f64>() * w;
    let killed_exact = 1.0 - (-km.integrated_rate(0.0, horizon)?).exp();
    let terminal = &marginals.last().expect("at least two slices").1;
    let opts = CheckOptions::default();
    let backward = check_backward(&sol.phi, &sol.model, &opts)?;
    let forward = check_forward(&sol.phihat, &sol.model, &opts)?;
    let report = json!({
        "schema": USBP_SCHEMA,
        "grid": grid.spec(),
        "slices": sec.slices,
        "start_node": sol.start_node,
        "killed_mass": { "kernel": killed_kernel, "closed_form": killed_exact, "error": (killed_kernel - killed_exact).abs() },
        "target": { "dead_mass": target.dead_mass(), "relative_entropy": sol.boundary.relative_entropy },
        "boundary": { "sup_active": sol.boundary.sup_active, "sup_dead": sol.boundary.sup_dead, "normalization": sol.boundary.normalization },
        "terminal_tv": terminal.total_variation(&target.to_marginal()?)?,
        "residuals": { "backward": residual_json(Suite::Backward, &backward), "forward": residual_json(Suite::Forward, &forward) },
    });
    art.write(&join(dir, "report.json"), pretty(&report).as_bytes())
}
