//! Experiment files: one TOML document holding the model and every stage's settings.

use std::path::{Path, PathBuf};

use rbridge::config::{model_from_table, parse_toml};
use rbridge::expr::{CoefficientExpr, Scope};
use rbridge::grid::Grid;
use rbridge::io::{read_marginal, Format};
use rbridge::kernel::{KernelMethod, Marginal, McSettings};
use rbridge::model::{ModelSpec, RegimeSet};
use rbridge::sinkhorn::SinkhornOptions;
use rbridge::{Error, Result};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Kernel,
    Solve,
    Bridge,
    Verify,
    Simulate,
    Usbp,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "kernel" => Stage::Kernel,
            "solve" => Stage::Solve,
            "bridge" => Stage::Bridge,
            "verify" => Stage::Verify,
            "simulate" => Stage::Simulate,
            "usbp" => Stage::Usbp,
            _ => return Err(bad(format!("unknown stage `{s}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Kernel => "kernel",
            Stage::Solve => "solve",
            Stage::Bridge => "bridge",
            Stage::Verify => "verify",
            Stage::Simulate => "simulate",
            Stage::Usbp => "usbp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Backward,
    Forward,
    Adjoint,
    Bridge,
    Hjb,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Backward, Suite::Forward, Suite::Adjoint, Suite::Bridge, Suite::Hjb];

    /// Parses one suite name; `all` expands to every suite.
    pub fn parse(s: &str) -> Result<Vec<Suite>> {
        Ok(match s {
            "all" => Suite::ALL.to_vec(),
            "backward" => vec![Suite::Backward],
            "forward" => vec![Suite::Forward],
            "adjoint" => vec![Suite::Adjoint],
            "bridge" => vec![Suite::Bridge],
            "hjb" => vec![Suite::Hjb],
            _ => return Err(bad(format!("unknown verify suite `{s}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Backward => "backward",
            Suite::Forward => "forward",
            Suite::Adjoint => "adjoint",
            Suite::Bridge => "bridge",
            Suite::Hjb => "hjb",
        }
    }
}

/// Where a marginal comes from.
#[derive(Debug, Clone)]
pub enum MarginalSource {
    /// Unnormalised density per regime; regimes without an entry carry no mass.
    Shapes(Vec<(usize, CoefficientExpr)>),
    File(PathBuf),
    Dirac { x: Vec<f64>, regime: usize },
}

impl MarginalSource {
    /// Builds the marginal on `grid`, evaluating shapes at time `t`.
    pub fn build(&self, grid: &Grid, regimes: &RegimeSet, t: f64) -> Result<Marginal> {
        match self {
            MarginalSource::File(p) => read_marginal(p, grid, regimes)?.normalized(),
            MarginalSource::Dirac { x, regime } => Marginal::dirac(grid, regimes, *regime, x),
            MarginalSource::Shapes(shapes) => {
                let n = grid.len();
                let mut w = vec![0.0; n * regimes.count()];
                for (i, e) in shapes {
                    for (k, x) in grid.nodes().iter().enumerate() {
                        let v = e.eval(t, x, &[])?;
                        if !(v >= 0.0 && v.is_finite()) {
                            return Err(Error::Domain(format!("marginal shape `{}` is {v} at {x:?}", e.source())));
                        }
                        w[i * n + k] = v * grid.weight();
                    }
                }
                Marginal::from_weights(grid, regimes, w)?.normalized()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum TargetSource {
    Shapes { active: CoefficientExpr, dead: CoefficientExpr },
    /// The unconditioned killed law, which makes the bridge the reference process.
    Reference,
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct UsbpSection {
    pub v: CoefficientExpr,
    pub x0: Vec<f64>,
    pub slices: usize,
    pub target: TargetSource,
}

#[derive(Debug, Clone)]
pub struct KernelSection {
    pub method: KernelMethod,
    pub slices: usize,
    pub mc_paths: usize,
    pub mc_dt: f64,
}

#[derive(Debug, Clone)]
pub struct SolverSection {
    pub options: SinkhornOptions,
    pub f0: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SimulationSection {
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub x0: Option<Vec<f64>>,
    pub regime: usize,
}

#[derive(Debug, Clone)]
pub struct VerifySection {
    pub suites: Vec<Suite>,
    pub margin: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// SHA-256 of the file contents.
    pub hash: String,
    pub model: ModelSpec,
    pub grid: Option<Grid>,
    pub kernel: KernelSection,
    pub rho0: Option<MarginalSource>,
    pub rho_t: Option<MarginalSource>,
    pub solver: SolverSection,
    pub simulation: SimulationSection,
    pub verify: VerifySection,
    pub usbp: Option<UsbpSection>,
    pub output_dir: PathBuf,
    pub format: Format,
    pub stages: Vec<Stage>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn check_keys(t: &Table, section: &str, allowed: &[&str]) -> Result<()> {
    match t.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(bad(format!("[{section}]: unexpected key `{k}`"))),
        None => Ok(()),
    }
}

fn section<'a>(doc: &'a Table, path: &str) -> Result<Option<&'a Table>> {
    let mut cur = doc;
    for part in path.split('.') {
        match cur.get(part) {
            None => return Ok(None),
            Some(Value::Table(t)) => cur = t,
            Some(_) => return Err(bad(format!("`{path}` must be a table"))),
        }
    }
    Ok(Some(cur))
}

fn num(t: &Table, key: &str, section: &str) -> Result<Option<f64>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Float(v)) => Ok(Some(*v)),
        Some(Value::Integer(v)) => Ok(Some(*v as f64)),
        Some(_) => Err(bad(format!("`{section}.{key}` must be a number"))),
    }
}

fn int(t: &Table, key: &str, section: &str) -> Result<Option<u64>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Integer(v)) if *v >= 0 => Ok(Some(*v as u64)),
        Some(_) => Err(bad(format!("`{section}.{key}` must be a nonnegative integer"))),
    }
}

fn string<'a>(t: &'a Table, key: &str, section: &str) -> Result<Option<&'a str>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(bad(format!("`{section}.{key}` must be a string"))),
    }
}

fn numbers(v: &Value, what: &str) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| bad(format!("`{what}` must be a list of numbers")))?;
    arr.iter()
        .map(|e| match e {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(bad(format!("`{what}` must be a list of numbers"))),
        })
        .collect()
}

fn positive(v: f64, what: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad(format!("`{what}` must be positive, got {v}")))
    }
}

fn existing(base: &Path, rel: &str) -> Result<PathBuf> {
    let p = base.join(rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(bad(format!("referenced file `{}` does not exist", p.display())))
    }
}

fn regime_of(regimes: &RegimeSet, label: &str) -> Result<usize> {
    regimes.index_of(label).ok_or_else(|| bad(format!("unknown regime `{label}`")))
}

fn marginal_source(t: &Table, name: &str, model: &ModelSpec, base: &Path) -> Result<MarginalSource> {
    let sec = format!("marginals.{name}");
    if let Some(f) = string(t, "file", &sec)? {
        check_keys(t, &sec, &["file"])?;
        return Ok(MarginalSource::File(existing(base, f)?));
    }
    if let Some(x) = t.get("dirac") {
        check_keys(t, &sec, &["dirac", "regime"])?;
        let x = numbers(x, &format!("{sec}.dirac"))?;
        if x.len() != model.d {
            return Err(bad(format!("`{sec}.dirac` needs {} coordinates", model.d)));
        }
        let regime = match string(t, "regime", &sec)? {
            Some(l) => regime_of(&model.regimes, l)?,
            None => 0,
        };
        return Ok(MarginalSource::Dirac { x, regime });
    }
    let scope = Scope::new(model.d).with_params(model.params.clone());
    let mut shapes = Vec::new();
    for (label, v) in t {
        let i = regime_of(&model.regimes, label).map_err(|_| bad(format!("[{sec}]: unexpected key `{label}`")))?;
        let src = v.as_str().ok_or_else(|| bad(format!("`{sec}.{label}` must be an expression string")))?;
        shapes.push((i, CoefficientExpr::parse(src, &scope)?));
    }
    if shapes.is_empty() {
        return Err(bad(format!("[{sec}] is empty")));
    }
    Ok(MarginalSource::Shapes(shapes))
}

fn usbp_section(t: &Table, model: &ModelSpec, base: &Path) -> Result<UsbpSection> {
    check_keys(t, "usbp", &["v", "x0", "slices", "target"])?;
    let v_src = match t.get("v") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Float(f)) => f.to_string(),
        Some(Value::Integer(i)) => i.to_string(),
        _ => return Err(bad("`usbp.v` is required and must be an expression")),
    };
    let v = CoefficientExpr::parse(&v_src, &Scope::time_only().with_params(model.params.clone()))?;
    let x0 = match t.get("x0") {
        Some(x) => numbers(x, "usbp.x0")?,
        None => vec![0.0; model.d],
    };
    let slices = int(t, "slices", "usbp")?.unwrap_or(32) as usize;
    if slices < 2 {
        return Err(bad("`usbp.slices` must be at least 2"));
    }
    let target = match t.get("target") {
        None => TargetSource::Reference,
        Some(Value::String(s)) if s == "reference" => TargetSource::Reference,
        Some(Value::Table(tt)) => {
            if let Some(f) = string(tt, "file", "usbp.target")? {
                check_keys(tt, "usbp.target", &["file"])?;
                TargetSource::File(existing(base, f)?)
            } else {
                check_keys(tt, "usbp.target", &["active", "dead"])?;
                let scope = Scope::new(model.d).with_params(model.params.clone());
                let expr = |k: &str| -> Result<CoefficientExpr> {
                    let s = string(tt, k, "usbp.target")?.ok_or_else(|| bad(format!("`usbp.target.{k}` is required")))?;
                    CoefficientExpr::parse(s, &scope)
                };
                TargetSource::Shapes { active: expr("active")?, dead: expr("dead")? }
            }
        }
        Some(_) => return Err(bad("`usbp.target` must be a table or \"reference\"")),
    };
    Ok(UsbpSection { v, x0, slices, target })
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read `{}`: {e}", path.display())))?;
        Self::from_str(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Parses a document; relative file references resolve against `base`.
    ///
    /// Stage requirements are checked separately by [`ExperimentConfig::validate_stages`].
    pub fn from_str(text: &str, base: &Path) -> Result<Self> {
        let doc = parse_toml(text)?;
        check_keys(
            &doc,
            "root",
            &["model", "grid", "kernel", "marginals", "solver", "simulation", "verify", "usbp", "output", "pipeline"],
        )?;
        let model = model_from_table(section(&doc, "model")?.ok_or_else(|| bad("missing [model] table"))?)?;

        let grid = match section(&doc, "grid")? {
            Some(g) => {
                check_keys(g, "grid", &["spec"])?;
                let spec = string(g, "spec", "grid")?.ok_or_else(|| bad("`grid.spec` is required"))?;
                let grid = Grid::parse(spec)?;
                if grid.d() != model.d {
                    return Err(bad(format!("grid has {} axes but the model has d = {}", grid.d(), model.d)));
                }
                Some(grid)
            }
            None => None,
        };

        let empty = Table::new();
        let k = section(&doc, "kernel")?.unwrap_or(&empty);
        check_keys(k, "kernel", &["method", "slices", "paths_per_node", "dt"])?;
        let kernel = KernelSection {
            method: KernelMethod::parse(string(k, "method", "kernel")?.unwrap_or("auto"))?,
            slices: int(k, "slices", "kernel")?.unwrap_or(8) as usize,
            mc_paths: int(k, "paths_per_node", "kernel")?.unwrap_or(McSettings::default().paths_per_node as u64) as usize,
            mc_dt: positive(num(k, "dt", "kernel")?.unwrap_or(McSettings::default().dt), "kernel.dt")?,
        };
        if kernel.slices < 2 {
            return Err(bad("`kernel.slices` must be at least 2"));
        }
        if kernel.mc_paths == 0 {
            return Err(bad("`kernel.paths_per_node` must be positive"));
        }

        let (mut rho0, mut rho_t) = (None, None);
        if let Some(m) = section(&doc, "marginals")? {
            check_keys(m, "marginals", &["rho0", "rhoT"])?;
            if let Some(t) = section(m, "rho0")? {
                rho0 = Some(marginal_source(t, "rho0", &model, base)?);
            }
            if let Some(t) = section(m, "rhoT")? {
                rho_t = Some(marginal_source(t, "rhoT", &model, base)?);
            }
        }

        let s = section(&doc, "solver")?.unwrap_or(&empty);
        check_keys(s, "solver", &["tol", "max_iters", "f0"])?;
        let defaults = SinkhornOptions::default();
        let max_iters = int(s, "max_iters", "solver")?.unwrap_or(defaults.max_iters as u64) as usize;
        if max_iters == 0 {
            return Err(bad("`solver.max_iters` must be positive"));
        }
        let solver = SolverSection {
            options: SinkhornOptions { tol: positive(num(s, "tol", "solver")?.unwrap_or(defaults.tol), "solver.tol")?, max_iters },
            f0: string(s, "f0", "solver")?.map(|f| existing(base, f)).transpose()?,
        };

        let sim = section(&doc, "simulation")?.unwrap_or(&empty);
        check_keys(sim, "simulation", &["paths", "dt", "seed", "x0", "regime"])?;
        let simulation = SimulationSection {
            paths: int(sim, "paths", "simulation")?.unwrap_or(1000) as usize,
            dt: positive(num(sim, "dt", "simulation")?.unwrap_or(0.01), "simulation.dt")?,
            seed: int(sim, "seed", "simulation")?.unwrap_or(0),
            x0: sim.get("x0").map(|v| numbers(v, "simulation.x0")).transpose()?,
            regime: string(sim, "regime", "simulation")?.map(|l| regime_of(&model.regimes, l)).transpose()?.unwrap_or(0),
        };
        if simulation.paths == 0 {
            return Err(bad("`simulation.paths` must be positive"));
        }
        if simulation.x0.as_ref().is_some_and(|x| x.len() != model.d) {
            return Err(bad(format!("`simulation.x0` needs {} coordinates", model.d)));
        }

        let v = section(&doc, "verify")?.unwrap_or(&empty);
        check_keys(v, "verify", &["suites", "margin", "pairs"])?;
        let suites = match v.get("suites") {
            None => Suite::ALL.to_vec(),
            Some(Value::String(s)) => Suite::parse(s)?,
            Some(Value::Array(a)) => {
                let mut out = Vec::new();
                for e in a {
                    let s = e.as_str().ok_or_else(|| bad("`verify.suites` must list suite names"))?;
                    for suite in Suite::parse(s)? {
                        if !out.contains(&suite) {
                            out.push(suite);
                        }
                    }
                }
                out
            }
            Some(_) => return Err(bad("`verify.suites` must list suite names")),
        };
        let verify = VerifySection {
            suites,
            margin: int(v, "margin", "verify")?.unwrap_or(4) as usize,
            pairs: int(v, "pairs", "verify")?.unwrap_or(20) as usize,
        };

        let usbp = section(&doc, "usbp")?.map(|t| usbp_section(t, &model, base)).transpose()?;

        let o = section(&doc, "output")?.unwrap_or(&empty);
        check_keys(o, "output", &["dir", "format"])?;
        let output_dir = base.join(string(o, "dir", "output")?.unwrap_or("out"));
        let format = Format::parse(string(o, "format", "output")?.unwrap_or("csv"))?;

        let stages = match section(&doc, "pipeline")? {
            Some(p) => {
                check_keys(p, "pipeline", &["stages"])?;
                let arr = p
                    .get("stages")
                    .and_then(Value::as_array)
                    .ok_or_else(|| bad("`pipeline.stages` must list stage names"))?;
                arr.iter()
                    .map(|e| e.as_str().ok_or_else(|| bad("`pipeline.stages` must list stage names")).and_then(Stage::parse))
                    .collect::<Result<Vec<_>>>()?
            }
            None => {
                let mut s = Vec::new();
                if rho0.is_some() && rho_t.is_some() {
                    s.extend([Stage::Kernel, Stage::Solve, Stage::Bridge, Stage::Verify, Stage::Simulate]);
                }
                if usbp.is_some() {
                    s.push(Stage::Usbp);
                }
                s
            }
        };

        Ok(ExperimentConfig {
            hash: format!("{:x}", Sha256::digest(text.as_bytes())),
            model,
            grid,
            kernel,
            rho0,
            rho_t,
            solver,
            simulation,
            verify,
            usbp,
            output_dir,
            format,
            stages,
        })
    }

    /// Checks that every requested stage has the sections it needs and that stages come in order.
    pub fn validate_stages(&self) -> Result<()> {
        let order = |s: Stage| match s {
            Stage::Kernel => 0,
            Stage::Solve => 1,
            Stage::Bridge => 2,
            Stage::Verify | Stage::Simulate => 3,
            Stage::Usbp => 4,
        };
        for pair in self.stages.windows(2) {
            if order(pair[0]) > order(pair[1]) || pair[0] == pair[1] {
                return Err(bad(format!("stage `{}` cannot follow `{}`", pair[1].name(), pair[0].name())));
            }
        }
        for s in &self.stages {
            if self.grid.is_none() {
                return Err(bad(format!("stage `{}` needs a [grid] section", s.name())));
            }
            if *s == Stage::Solve && (self.rho0.is_none() || self.rho_t.is_none()) {
                return Err(bad("stage `solve` needs [marginals.rho0] and [marginals.rhoT]"));
            }
            if *s == Stage::Usbp && self.usbp.is_none() {
                return Err(bad("stage `usbp` needs a [usbp] section"));
            }
        }
        Ok(())
    }

    pub fn require_grid(&self) -> Result<&Grid> {
        self.grid.as_ref().ok_or_else(|| bad("a [grid] section or --grid is required"))
    }

    pub fn mc_settings(&self, seed: u64) -> McSettings {
        McSettings { paths_per_node: self.kernel.mc_paths, dt: self.kernel.mc_dt, seed }
    }
}

/// Splits the root seed into a named stream: the first eight bytes of `SHA-256(seed ‖ purpose)`.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(purpose.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL: &str = r#"
[model]
d = 1
T = 1.0
regimes = ["calm", "stress"]
[model.sigma.calm]
s11 = "1"
[model.sigma.stress]
s11 = "1"
[model.Q]
q_calm_stress = "0.5"
q_stress_calm = "0.5"
"#;

    fn parse(extra: &str) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::from_str(&format!("{MODEL}{extra}"), Path::new("."))?;
        cfg.validate_stages()?;
        Ok(cfg)
    }

    #[test]
    fn defaults_and_marginal_shapes() {
        let cfg = parse(
            r#"
[grid]
spec = "-4:4:40"
[marginals.rho0]
calm = "exp(-x1^2)"
[marginals.rhoT]
stress = "exp(-(x1-1)^2)"
"#,
        )
        .unwrap();
        assert_eq!(cfg.stages, vec![Stage::Kernel, Stage::Solve, Stage::Bridge, Stage::Verify, Stage::Simulate]);
        let grid = cfg.grid.clone().unwrap();
        let m = cfg.rho_t.unwrap().build(&grid, &cfg.model.regimes, 1.0).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 1e-12);
        assert_eq!(m.regime_mass(0), 0.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_ranges() {
        assert!(matches!(parse("[solver]\ntolerance = 1e-8\n"), Err(Error::Config(_))));
        assert!(matches!(parse("[solver]\ntol = -1.0\n"), Err(Error::Config(_))));
        assert!(matches!(parse("[marginals.rho0]\nfile = \"missing.csv\"\n"), Err(Error::Config(_))));
        assert!(matches!(parse("[grid]\nspec = \"-1:1:4\"\n[pipeline]\nstages = [\"solve\", \"kernel\"]\n"), Err(Error::Config(_))));
        assert!(matches!(parse("[grid]\nspec = \"-1:1:4\"\n[pipeline]\nstages = [\"usbp\"]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_split_by_purpose() {
        assert_ne!(derive_seed(7, "kernel"), derive_seed(7, "simulate"));
        assert_eq!(derive_seed(7, "kernel"), derive_seed(7, "kernel"));
        assert_ne!(derive_seed(7, "kernel"), derive_seed(8, "kernel"));
    }
}
