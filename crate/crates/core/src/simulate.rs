//! Euler–Maruyama simulation of the reference, controlled and bridge processes,
//! plus Girsanov weights and the KL running cost evaluated by replaying the noise record.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, SwitchLayout};

/// Seeded, independently addressable random stream; one per path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Start {
    pub t: f64,
    pub x: Vec<f64>,
    pub regime: usize,
}

impl Start {
    pub fn new(t: f64, x: Vec<f64>, regime: usize) -> Self {
        Start { t, x, regime }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Jump { atom: usize, z: Vec<f64> },
    Switch { from: usize, to: usize, w: f64 },
}

/// An event applied during step `step`, so visible from `times[step + 1]` on.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub step: usize,
    pub time: f64,
    pub kind: EventKind,
}

/// Everything needed to recompute a Girsanov weight along a path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseRecord {
    /// Brownian increments, `d` per step.
    pub brownian: Vec<f64>,
    /// Accepted jump atom per step.
    pub jumps: Vec<Option<usize>>,
    /// Accepted switch mark `w` per step.
    pub switches: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub d: usize,
    pub times: Vec<f64>,
    /// States, `d` per time.
    pub xs: Vec<f64>,
    pub regimes: Vec<usize>,
    pub events: Vec<Event>,
    pub noise: NoiseRecord,
}

impl SamplePath {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.xs[k * self.d..(k + 1) * self.d]
    }

    pub fn regime(&self, k: usize) -> usize {
        self.regimes[k]
    }

    pub fn terminal(&self) -> (&[f64], usize) {
        let k = self.steps();
        (self.x(k), self.regime(k))
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn brownian(&self, k: usize) -> &[f64] {
        &self.noise.brownian[k * self.d..(k + 1) * self.d]
    }

    /// Event label for the row at `times[k]`.
    pub fn event_kind(&self, k: usize) -> &'static str {
        if k == 0 {
            return "start";
        }
        match (self.noise.jumps[k - 1].is_some(), self.noise.switches[k - 1].is_some()) {
            (false, false) => "diffstep",
            (true, false) => "jump",
            (false, true) => "switch",
            (true, true) => "jump+switch",
        }
    }

    /// First time the path sits in `regime`, if ever.
    pub fn hitting_time(&self, regime: usize) -> Option<f64> {
        self.regimes.iter().position(|&r| r == regime).map(|k| self.times[k])
    }
}

/// Girsanov control triple `(u, theta, xi)` with `xi` in matrix form.
pub trait ControlTriple: Sync {
    fn u(&self, t: f64, x: &[f64], i: usize, out: &mut [f64]) -> Result<()>;
    fn theta(&self, t: f64, x: &[f64], i: usize, atom: usize) -> Result<f64>;
    fn xi(&self, t: f64, x: &[f64], i: usize, j: usize) -> Result<f64>;
}

/// `(0, 0, 1)`: leaves the reference law unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityControls;

impl ControlTriple for IdentityControls {
    fn u(&self, _: f64, _: &[f64], _: usize, out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
    fn theta(&self, _: f64, _: &[f64], _: usize, _: usize) -> Result<f64> {
        Ok(0.0)
    }
    fn xi(&self, _: f64, _: &[f64], _: usize, _: usize) -> Result<f64> {
        Ok(1.0)
    }
}

/// Controls given as coefficient expressions; missing entries default to the identity.
#[derive(Debug, Clone)]
pub struct ExprControls {
    pub u: Vec<Option<Vec<crate::expr::CoefficientExpr>>>,
    pub theta: Vec<Vec<Option<crate::expr::CoefficientExpr>>>,
    pub xi: Vec<Vec<Option<crate::expr::CoefficientExpr>>>,
}

impl ExprControls {
    pub fn identity(model: &ModelSpec) -> Self {
        let s = model.n_regimes();
        ExprControls {
            u: vec![None; s],
            theta: vec![vec![None; model.nu.atoms.len()]; s],
            xi: vec![vec![None; s]; s],
        }
    }

    pub fn with_u(mut self, model: &ModelSpec, regime: usize, srcs: &[&str]) -> Result<Self> {
        let scope = model.scope();
        let v = srcs
            .iter()
            .map(|s| crate::expr::CoefficientExpr::parse(s, &scope))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != model.d {
            return Err(Error::Model("u needs d components".into()));
        }
        self.u[regime] = Some(v);
        Ok(self)
    }

    pub fn with_theta(mut self, model: &ModelSpec, regime: usize, atom: usize, src: &str) -> Result<Self> {
        self.theta[regime][atom] = Some(crate::expr::CoefficientExpr::parse(src, &model.scope())?);
        Ok(self)
    }

    pub fn with_xi(mut self, model: &ModelSpec, from: usize, to: usize, src: &str) -> Result<Self> {
        self.xi[from][to] = Some(crate::expr::CoefficientExpr::parse(src, &model.scope())?);
        Ok(self)
    }
}

impl ControlTriple for ExprControls {
    fn u(&self, t: f64, x: &[f64], i: usize, out: &mut [f64]) -> Result<()> {
        match &self.u[i] {
            None => out.iter_mut().for_each(|v| *v = 0.0),
            Some(v) => {
                for (o, e) in out.iter_mut().zip(v) {
                    *o = e.eval(t, x, &[])?;
                }
            }
        }
        Ok(())
    }
    fn theta(&self, t: f64, x: &[f64], i: usize, atom: usize) -> Result<f64> {
        self.theta[i][atom].as_ref().map_or(Ok(0.0), |e| e.eval(t, x, &[]))
    }
    fn xi(&self, t: f64, x: &[f64], i: usize, j: usize) -> Result<f64> {
        self.xi[i][j].as_ref().map_or(Ok(1.0), |e| e.eval(t, x, &[]))
    }
}

/// Evaluates the wrapped controls at `min(t, t_max)`.
pub struct TimeClamped<'a> {
    pub inner: &'a dyn ControlTriple,
    pub t_max: f64,
}

impl ControlTriple for TimeClamped<'_> {
    fn u(&self, t: f64, x: &[f64], i: usize, out: &mut [f64]) -> Result<()> {
        self.inner.u(t.min(self.t_max), x, i, out)
    }
    fn theta(&self, t: f64, x: &[f64], i: usize, atom: usize) -> Result<f64> {
        self.inner.theta(t.min(self.t_max), x, i, atom)
    }
    fn xi(&self, t: f64, x: &[f64], i: usize, j: usize) -> Result<f64> {
        self.inner.xi(t.min(self.t_max), x, i, j)
    }
}

fn check_theta(v: f64) -> Result<f64> {
    if v < 1.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::ControlDomain(format!("theta = {v} must be finite and below 1")))
    }
}

fn check_xi(v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::ControlDomain(format!("xi = {v} must be finite and positive")))
    }
}

/// Number of steps and uniform step length covering `[t0, t1]` with steps at most `dt`.
pub fn time_steps(t0: f64, t1: f64, dt: f64) -> (usize, f64) {
    let k = (((t1 - t0) / dt) - 1e-9).ceil().max(1.0) as usize;
    (k, (t1 - t0) / k as f64)
}

fn validate_setup(model: &ModelSpec, start: &Start, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("step {dt} must be positive")));
    }
    if start.x.len() != model.d || start.regime >= model.n_regimes() {
        return Err(Error::Config("start state does not match the model".into()));
    }
    if start.t >= model.horizon {
        return Err(Error::Config("start time must precede the horizon".into()));
    }
    let max_rate = (0..model.n_regimes())
        .map(|i| model.exit_rate(start.t, &start.x, i))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max)
        + model.nu.total_weight();
    if max_rate * dt >= 0.1 {
        return Err(Error::Config(format!(
            "step {dt} too large for event rate {max_rate}: need dt < 0.1 / rate"
        )));
    }
    Ok(())
}

struct Workspace {
    b: Vec<f64>,
    sigma: Vec<f64>,
    comp: Vec<f64>,
    u: Vec<f64>,
    db: Vec<f64>,
    g: Vec<f64>,
    y: Vec<f64>,
    lam: Vec<f64>,
    rates: Vec<f64>,
}

impl Workspace {
    fn new(model: &ModelSpec) -> Self {
        let d = model.d;
        Workspace {
            b: vec![0.0; d],
            sigma: vec![0.0; d * d],
            comp: vec![0.0; d],
            u: vec![0.0; d],
            db: vec![0.0; d],
            g: vec![0.0; d],
            y: vec![0.0; d],
            lam: vec![0.0; model.nu.atoms.len()],
            rates: vec![0.0; model.n_regimes()],
        }
    }
}

struct StepOutcome {
    jump: Option<usize>,
    switch: Option<(usize, f64)>,
}

/// One Euler step from `(t, x, i)`; updates `x` and `i` in place.
#[allow(clippy::too_many_arguments)]
fn step(
    model: &ModelSpec,
    controls: Option<&dyn ControlTriple>,
    t: f64,
    dt: f64,
    x: &mut [f64],
    i: &mut usize,
    rng: &mut ChaCha8Rng,
    ws: &mut Workspace,
) -> Result<StepOutcome> {
    let d = model.d;
    let r = *i;
    model.drift(t, x, r, &mut ws.b)?;
    model.diffusion(t, x, r, &mut ws.sigma)?;
    model.compensator(t, x, r, &mut ws.comp)?;
    match controls {
        Some(c) => c.u(t, x, r, &mut ws.u)?,
        None => ws.u.iter_mut().for_each(|v| *v = 0.0),
    }
    for (a, atom) in model.nu.atoms.iter().enumerate() {
        let th = match controls {
            Some(c) => check_theta(c.theta(t, x, r, a)?)?,
            None => 0.0,
        };
        ws.lam[a] = atom.weight * (1.0 - th);
    }
    for j in 0..model.n_regimes() {
        ws.rates[j] = if j == r {
            0.0
        } else {
            let q = model.rate(t, x, r, j)?;
            match controls {
                Some(c) if q > 0.0 => q * check_xi(c.xi(t, x, r, j)?)?,
                _ => q,
            }
        };
    }
    let sq = dt.sqrt();
    for v in ws.db.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = n * sq;
    }
    let u_jump: f64 = rng.gen();
    let u_switch: f64 = rng.gen();

    let total_jump: f64 = ws.lam.iter().sum();
    let layout = SwitchLayout::from_rates(r, &ws.rates);
    if total_jump * dt > 1.0 || layout.total() * dt > 1.0 {
        return Err(Error::Simulation {
            step: 0,
            msg: format!("event probability per step exceeds 1 (jump {}, switch {})", total_jump * dt, layout.total() * dt),
        });
    }

    ws.y.copy_from_slice(x);
    for m in 0..d {
        let mut v = ws.b[m] - ws.comp[m];
        for n in 0..d {
            v -= ws.sigma[m * d + n] * ws.u[n];
        }
        let noise: f64 = (0..d).map(|n| ws.sigma[m * d + n] * ws.db[n]).sum();
        x[m] += v * dt + noise;
    }

    let mut jump = None;
    let mark = u_jump / dt;
    if mark < total_jump {
        let mut acc = 0.0;
        for (a, l) in ws.lam.iter().enumerate() {
            acc += l;
            if mark < acc {
                jump = Some(a);
                break;
            }
        }
        let a = jump.unwrap_or(ws.lam.len() - 1);
        jump = Some(a);
        model.jump(t, &ws.y, r, a, &mut ws.g)?;
        for (xv, g) in x.iter_mut().zip(&ws.g) {
            *xv += g;
        }
    }

    let mut switch = None;
    let w = u_switch / dt;
    if let Some(j) = layout.locate(w) {
        model.hybrid_map(t, &ws.y, r, j, &mut ws.g)?;
        for m in 0..d {
            x[m] += ws.g[m] - ws.y[m];
        }
        *i = j;
        switch = Some((j, w));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Simulation { step: 0, msg: "state became non-finite".into() });
    }
    Ok(StepOutcome { jump, switch })
}

fn run(
    model: &ModelSpec,
    controls: Option<&dyn ControlTriple>,
    start: &Start,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SamplePath> {
    validate_setup(model, start, dt)?;
    let d = model.d;
    let (k_steps, h) = time_steps(start.t, model.horizon, dt);
    let mut path = SamplePath {
        d,
        times: Vec::with_capacity(k_steps + 1),
        xs: Vec::with_capacity((k_steps + 1) * d),
        regimes: Vec::with_capacity(k_steps + 1),
        events: Vec::new(),
        noise: NoiseRecord {
            brownian: Vec::with_capacity(k_steps * d),
            jumps: Vec::with_capacity(k_steps),
            switches: Vec::with_capacity(k_steps),
        },
    };
    let mut x = start.x.clone();
    let mut i = start.regime;
    let mut ws = Workspace::new(model);
    path.times.push(start.t);
    path.xs.extend_from_slice(&x);
    path.regimes.push(i);
    for k in 0..k_steps {
        let t = start.t + k as f64 * h;
        let from = i;
        let out = step(model, controls, t, h, &mut x, &mut i, rng, &mut ws).map_err(|e| match e {
            Error::Simulation { msg, .. } => Error::Simulation { step: k, msg },
            Error::Eval(msg) => Error::Simulation { step: k, msg },
            other => other,
        })?;
        path.noise.brownian.extend_from_slice(&ws.db);
        path.noise.jumps.push(out.jump);
        path.noise.switches.push(out.switch.map(|s| s.1));
        if let Some(a) = out.jump {
            path.events.push(Event { step: k, time: t + h, kind: EventKind::Jump { atom: a, z: model.nu.atoms[a].z.clone() } });
        }
        if let Some((to, w)) = out.switch {
            path.events.push(Event { step: k, time: t + h, kind: EventKind::Switch { from, to, w } });
        }
        let t_next = if k + 1 == k_steps { model.horizon } else { start.t + (k + 1) as f64 * h };
        path.times.push(t_next);
        path.xs.extend_from_slice(&x);
        path.regimes.push(i);
    }
    Ok(path)
}

pub fn simulate_reference(model: &ModelSpec, start: &Start, dt: f64, rng: &RngStream) -> Result<SamplePath> {
    run(model, None, start, dt, &mut rng.rng())
}

pub fn simulate_controlled(
    model: &ModelSpec,
    controls: &dyn ControlTriple,
    start: &Start,
    dt: f64,
    rng: &RngStream,
) -> Result<SamplePath> {
    run(model, Some(controls), start, dt, &mut rng.rng())
}

/// Terminal state only, from `start` to time `t_end`; used for kernel estimation.
pub fn simulate_terminal(model: &ModelSpec, start: &Start, t_end: f64, dt: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, usize)> {
    if start.t >= t_end {
        return Err(Error::Config("start time must precede the end time".into()));
    }
    validate_setup(model, start, dt)?;
    let (k_steps, h) = time_steps(start.t, t_end, dt);
    let mut x = start.x.clone();
    let mut i = start.regime;
    let mut ws = Workspace::new(model);
    for k in 0..k_steps {
        let t = start.t + k as f64 * h;
        step(model, None, t, h, &mut x, &mut i, rng, &mut ws).map_err(|e| match e {
            Error::Simulation { msg, .. } | Error::Eval(msg) => Error::Simulation { step: k, msg },
            other => other,
        })?;
    }
    Ok((x, i))
}

/// Runs `f` on path ids `0..n` in parallel, returning results in id order.
pub fn monte_carlo<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n as u64).into_par_iter().map(f).collect()
}

pub fn log_girsanov_weight(path: &SamplePath, controls: &dyn ControlTriple, model: &ModelSpec) -> Result<f64> {
    let d = model.d;
    let s = model.n_regimes();
    let mut u = vec![0.0; d];
    let mut log_z = 0.0;
    for k in 0..path.steps() {
        let t = path.times[k];
        let x = path.x(k);
        let i = path.regime(k);
        let dt = path.dt(k);
        controls.u(t, x, i, &mut u)?;
        let db = path.brownian(k);
        log_z -= u.iter().zip(db).map(|(a, b)| a * b).sum::<f64>();
        log_z -= 0.5 * u.iter().map(|v| v * v).sum::<f64>() * dt;
        for (a, atom) in model.nu.atoms.iter().enumerate() {
            let th = check_theta(controls.theta(t, x, i, a)?)?;
            log_z += th * atom.weight * dt;
            if path.noise.jumps[k] == Some(a) {
                log_z += (1.0 - th).ln();
            }
        }
        let target = path.noise.switches[k].map(|_| path.regime(k + 1));
        for j in 0..s {
            if j == i {
                continue;
            }
            let q = model.rate(t, x, i, j)?;
            if q == 0.0 && target != Some(j) {
                continue;
            }
            let xi = check_xi(controls.xi(t, x, i, j)?)?;
            log_z += q * (1.0 - xi) * dt;
            if target == Some(j) {
                log_z += xi.ln();
            }
        }
    }
    Ok(log_z)
}

/// `Z_{0,T}` by replaying the recorded noise.
pub fn girsanov_weight(path: &SamplePath, controls: &dyn ControlTriple, model: &ModelSpec) -> Result<f64> {
    Ok(log_girsanov_weight(path, controls, model)?.exp())
}

/// Running KL integrand at one state.
pub fn kl_integrand(controls: &dyn ControlTriple, model: &ModelSpec, t: f64, x: &[f64], i: usize, u: &mut [f64]) -> Result<f64> {
    controls.u(t, x, i, u)?;
    let mut f = 0.5 * u.iter().map(|v| v * v).sum::<f64>();
    for (a, atom) in model.nu.atoms.iter().enumerate() {
        let th = check_theta(controls.theta(t, x, i, a)?)?;
        let one = 1.0 - th;
        f += atom.weight * (one * one.ln() + th);
    }
    for j in 0..model.n_regimes() {
        if j == i {
            continue;
        }
        let q = model.rate(t, x, i, j)?;
        if q > 0.0 {
            let xi = check_xi(controls.xi(t, x, i, j)?)?;
            f += q * (xi * xi.ln() + 1.0 - xi);
        }
    }
    Ok(f)
}

/// Left-point time quadrature of the KL integrand along the path.
pub fn kl_running_cost(path: &SamplePath, controls: &dyn ControlTriple, model: &ModelSpec) -> Result<f64> {
    let mut u = vec![0.0; model.d];
    let mut total = 0.0;
    for k in 0..path.steps() {
        let f = kl_integrand(controls, model, path.times[k], path.x(k), path.regime(k), &mut u)?;
        total += f.max(0.0) * path.dt(k);
    }
    Ok(total)
}

/// Samples bridge paths: starts drawn from the initial marginal, controls from the potential.
pub struct BridgeSampler {
    model: ModelSpec,
    controls: crate::potentials::GridControls,
    starts: Vec<(usize, usize)>,
    cumulative: Vec<f64>,
    grid: crate::grid::Grid,
}

impl BridgeSampler {
    pub fn new(model: &ModelSpec, phi: &crate::potentials::PotentialField, rho0: &crate::kernel::Marginal) -> Result<Self> {
        let controls = crate::potentials::optimal_controls(phi, model)?;
        let n = rho0.grid.len();
        let mut starts = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for i in 0..rho0.regimes.count() {
            for k in 0..n {
                let m = rho0.mass(i, k);
                if m > 0.0 {
                    acc += m;
                    starts.push((i, k));
                    cumulative.push(acc);
                }
            }
        }
        if starts.is_empty() {
            return Err(Error::Domain("initial marginal has no mass".into()));
        }
        Ok(BridgeSampler { model: model.clone(), controls, starts, cumulative, grid: rho0.grid.clone() })
    }

    pub fn controls(&self) -> &crate::potentials::GridControls {
        &self.controls
    }

    pub fn sample(&self, dt: f64, rng: &RngStream) -> Result<SamplePath> {
        let mut r = rng.rng();
        let u: f64 = r.gen::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let pos = self.cumulative.partition_point(|&c| c <= u).min(self.starts.len() - 1);
        let (i, k) = self.starts[pos];
        let start = Start::new(0.0, self.grid.node(k), i);
        let (_, h) = time_steps(0.0, self.model.horizon, dt);
        let clamp = TimeClamped { inner: &self.controls, t_max: self.model.horizon - 2.0 * h };
        run(&self.model, Some(&clamp), &start, dt, &mut r)
    }
}

/// One bridge path with controls derived from the potential `phi`.
pub fn simulate_bridge(
    model: &ModelSpec,
    phi: &crate::potentials::PotentialField,
    rho0: &crate::kernel::Marginal,
    dt: f64,
    rng: &RngStream,
) -> Result<SamplePath> {
    BridgeSampler::new(model, phi, rho0)?.sample(dt, rng)
}
