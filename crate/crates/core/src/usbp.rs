//! Unbalanced bridge: a single-regime diffusion killed at a time-dependent rate, written as a
//! two-regime model with an absorbing dead regime, with explicit kernels and potentials.
//!
//! The base kernel is the exact transition law of the three-point lattice generator on the grid,
//! absorbing beyond the outer nodes. Its sine eigenbasis makes both the killed kernel and the
//! time integral of killed mass cheap per mode, and the family is an exact semigroup on the grid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::CoefficientExpr;
use crate::grid::Grid;
use crate::kernel::{integrate_rate, Kernel, Marginal, Provenance};
use crate::model::{ModelSpec, RegimeSet};
use crate::potentials::{PotentialField, PotentialKind};
use crate::simulate::{kl_running_cost, ControlTriple, SamplePath};

pub const ACTIVE: usize = 0;
pub const DEAD: usize = 1;

/// Tolerance for the time integrals of killed mass.
const KILL_TOL: f64 = 1e-10;

/// Base dynamics plus a killing rate `V(t)` and a fixed start.
#[derive(Debug, Clone)]
pub struct KillingModel {
    pub base: ModelSpec,
    pub v: CoefficientExpr,
    pub x0: Vec<f64>,
}

impl KillingModel {
    pub fn new(base: ModelSpec, v: CoefficientExpr, x0: Vec<f64>) -> Result<Self> {
        if base.n_regimes() != 1 {
            return Err(Error::Model("the killed dynamics must have a single regime".into()));
        }
        if x0.len() != base.d {
            return Err(Error::Model("start point has the wrong dimension".into()));
        }
        if v.depends_on_x() || v.depends_on_z() {
            return Err(Error::Unsupported("the killing rate may depend on time only".into()));
        }
        for k in 0..=200 {
            let t = base.horizon * k as f64 / 200.0;
            let val = v.eval_t(t)?;
            if !(val >= 0.0 && val.is_finite()) {
                return Err(Error::Model(format!("killing rate {val} at t={t} is not a nonnegative number")));
            }
        }
        Ok(KillingModel { base, v, x0 })
    }

    pub fn horizon(&self) -> f64 {
        self.base.horizon
    }

    /// Two-regime model: the base dynamics in `active`, nothing in `dead`, rate `V` from active to dead.
    pub fn model(&self) -> Result<ModelSpec> {
        let regimes = RegimeSet::new(vec!["active".into(), "dead".into()])?;
        let mut m = ModelSpec::builder(self.base.d, regimes, self.base.horizon)
            .params(self.base.params.clone())
            .jumps(self.base.nu.clone())
            .rate_expr(ACTIVE, DEAD, self.v.clone())
            .build()?;
        m.b[ACTIVE] = self.base.b[0].clone();
        m.sigma[ACTIVE] = self.base.sigma[0].clone();
        m.gamma[ACTIVE] = self.base.gamma[0].clone();
        m.validate()?;
        Ok(m)
    }

    /// `int_t^s V`.
    pub fn integrated_rate(&self, t: f64, s: f64) -> Result<f64> {
        integrate_rate(&self.v, t, s, 1e-13)
    }
}

/// Nearest grid node to `x`, the centre of its cell; `None` off the grid.
pub fn nearest_node(grid: &Grid, x: &[f64]) -> Option<usize> {
    grid.locate(x)
}

/// Spectral form of the lattice generator `λ+ (f(x+h) − f) + λ− (f(x−h) − f)` on a 1-D grid,
/// zero beyond the outer nodes.
///
/// With `λ± = σ²/(2h²) ± b/(2h)` this generator is the central-difference discretisation
/// of `b ∂x + ½σ² ∂xx`.
#[derive(Debug, Clone)]
pub struct LatticeDiffusion {
    pub grid: Grid,
    /// Decay rates of the modes, all negative.
    pub mu: Vec<f64>,
    /// `modes[j * n + k]`, orthonormal sine vectors.
    modes: Vec<f64>,
    /// `ln sqrt(λ+ / λ−)`: the kernel carries the factor `exp((y − x) log_ratio)`.
    log_ratio: f64,
}

impl LatticeDiffusion {
    pub fn new(grid: &Grid, b: f64, sigma: f64) -> Result<Self> {
        if grid.d() != 1 {
            return Err(Error::Unsupported("lattice kernels are one-dimensional".into()));
        }
        let n = grid.len();
        let h = grid.axes[0].h();
        let diff = 0.5 * sigma * sigma / (h * h);
        let up = diff + 0.5 * b / h;
        let down = diff - 0.5 * b / h;
        if !(up > 0.0 && down > 0.0) {
            return Err(Error::Unsupported(format!(
                "drift {b} is too strong for diffusion {sigma} at spacing {h}; refine the grid"
            )));
        }
        let log_ratio = 0.5 * (up / down).ln();
        if log_ratio.abs() * n as f64 > 25.0 {
            return Err(Error::Unsupported("drift is too strong relative to diffusion on this grid".into()));
        }
        let np1 = (n + 1) as f64;
        let c = (up * down).sqrt();
        let mu = (1..=n).map(|j| -(up + down) + 2.0 * c * (j as f64 * std::f64::consts::PI / np1).cos()).collect();
        let norm = (2.0 / np1).sqrt();
        let mut modes = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                modes[j * n + k] = norm * (((j + 1) * (k + 1)) as f64 * std::f64::consts::PI / np1).sin();
            }
        }
        Ok(LatticeDiffusion { grid: grid.clone(), mu, modes, log_ratio })
    }

    /// From a single-regime model with constant drift and diffusion and no jumps.
    pub fn from_model(model: &ModelSpec, grid: &Grid) -> Result<Self> {
        if model.d != 1 || grid.d() != 1 {
            return Err(Error::Unsupported("lattice kernels are one-dimensional".into()));
        }
        if !(model.nu.is_empty() || model.gamma[0].iter().all(|e| e.is_zero())) {
            return Err(Error::Unsupported("lattice kernels do not include jumps".into()));
        }
        let (Some(b), Some(s)) = (model.b[0][0].as_constant(), model.sigma[0][0].as_constant()) else {
            return Err(Error::Unsupported("lattice kernels need constant drift and diffusion".into()));
        };
        Self::new(grid, b, s)
    }

    pub fn n(&self) -> usize {
        self.grid.len()
    }

    /// Density row `p(x, ·)` of the operator `sum_j c_j v_j v_jᵀ`, conjugated by the drift factor.
    pub fn row(&self, x: usize, c: &[f64]) -> Vec<f64> {
        let n = self.n();
        let inv_w = 1.0 / self.grid.weight();
        let mut out = vec![0.0; n];
        for (j, cj) in c.iter().enumerate() {
            let a = cj * self.modes[j * n + x];
            if a == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&self.modes[j * n..(j + 1) * n]) {
                *o += a * v;
            }
        }
        for (y, o) in out.iter_mut().enumerate() {
            *o = (*o * ((y as f64 - x as f64) * self.log_ratio).exp() * inv_w).max(0.0);
        }
        out
    }

    /// `sum_y p(x, y) g(y) w` for every `x`.
    pub fn apply(&self, c: &[f64], g: &[f64]) -> Vec<f64> {
        let n = self.n();
        let scaled: Vec<f64> = g.iter().enumerate().map(|(y, v)| v * (y as f64 * self.log_ratio).exp()).collect();
        let proj: Vec<f64> = (0..n)
            .map(|j| c[j] * self.modes[j * n..(j + 1) * n].iter().zip(&scaled).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        (0..n)
            .map(|x| {
                let s: f64 = (0..n).map(|j| proj[j] * self.modes[j * n + x]).sum();
                (s * (-(x as f64) * self.log_ratio).exp()).max(0.0)
            })
            .collect()
    }

    /// Dense density matrix.
    pub fn matrix(&self, c: &[f64]) -> Vec<f64> {
        let n = self.n();
        let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|x| self.row(x, c)).collect();
        rows.concat()
    }

    /// Mode coefficients of the surviving kernel over `[t, s]`.
    pub fn survival_coefficients(&self, km: &KillingModel, t: f64, s: f64) -> Result<Vec<f64>> {
        let lam = km.integrated_rate(t, s)?;
        Ok(self.mu.iter().map(|m| (m * (s - t) - lam).exp()).collect())
    }

    /// Mode coefficients of `int_t^s V(r) q(t, ·, r, ·) dr`.
    pub fn killed_coefficients(&self, km: &KillingModel, t: f64, s: f64) -> Result<Vec<f64>> {
        killed_integrals(km, t, s, &self.mu)
    }
}

/// `int_0^{s−t} V(t+u) exp(−int_t^{t+u} V) exp(μ_j u) du` for every mode.
///
/// Constant rates use the closed form; otherwise composite Simpson on a shared node set is
/// refined by doubling until every mode changes by less than the tolerance.
fn killed_integrals(km: &KillingModel, t: f64, s: f64, mu: &[f64]) -> Result<Vec<f64>> {
    let tau = s - t;
    if tau < 0.0 {
        return Err(Error::Domain(format!("kernel interval [{t}, {s}] is reversed")));
    }
    if tau == 0.0 {
        return Ok(vec![0.0; mu.len()]);
    }
    if let Some(c) = km.v.as_constant() {
        return Ok(mu
            .iter()
            .map(|&m| {
                let a = m - c;
                if a == 0.0 {
                    c * tau
                } else {
                    c * (a * tau).exp_m1() / a
                }
            })
            .collect());
    }
    let mut panels = 64usize;
    let mut prev = simpson_modes(km, t, tau, mu, panels)?;
    loop {
        panels *= 2;
        let next = simpson_modes(km, t, tau, mu, panels)?;
        let change = next.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if change <= 15.0 * KILL_TOL {
            return Ok(next.iter().zip(&prev).map(|(a, b)| a + (a - b) / 15.0).collect());
        }
        if panels >= 1 << 20 {
            return Err(Error::Quadrature(format!("killed-mass integral on [{t}, {s}] did not settle")));
        }
        prev = next;
    }
}

fn simpson_modes(km: &KillingModel, t: f64, tau: f64, mu: &[f64], panels: usize) -> Result<Vec<f64>> {
    let h = tau / panels as f64;
    let mut weight_fn = Vec::with_capacity(panels + 1);
    let mut lam = 0.0;
    for k in 0..=panels {
        let u = k as f64 * h;
        if k > 0 {
            lam += km.integrated_rate(t + (k - 1) as f64 * h, t + u)?;
        }
        let w = if k == 0 || k == panels { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        weight_fn.push((u, w * km.v.eval_t(t + u)? * (-lam).exp()));
    }
    Ok(mu.par_iter().map(|&m| weight_fn.iter().map(|(u, f)| f * (m * u).exp()).sum::<f64>() * h / 3.0).collect())
}

fn single_kernel(grid: &Grid, t: f64, s: f64, values: Vec<f64>) -> Kernel {
    Kernel {
        grid: grid.clone(),
        regimes: RegimeSet::numbered(1),
        t,
        s,
        values,
        provenance: Provenance::Analytic,
        leak: vec![0.0; grid.len()],
        leak_warning: false,
    }
}

/// Surviving kernel `p11` and killed kernel `p12 = int_t^s V(r) q(t, x, r, y) dr` over `[t, s]`.
pub fn usbp_kernels(km: &KillingModel, grid: &Grid, t: f64, s: f64) -> Result<(Kernel, Kernel)> {
    let lat = LatticeDiffusion::from_model(&km.base, grid)?;
    let p11 = lat.matrix(&lat.survival_coefficients(km, t, s)?);
    let p12 = lat.matrix(&lat.killed_coefficients(km, t, s)?);
    Ok((single_kernel(grid, t, s, p11), single_kernel(grid, t, s, p12)))
}

/// Two-regime kernel `[p11, p12; 0, identity]`.
pub fn usbp_full_kernel(p11: &Kernel, p12: &Kernel) -> Result<Kernel> {
    if p11.grid != p12.grid || p11.dim() != p12.dim() || p11.t != p12.t || p11.s != p12.s {
        return Err(Error::GridMismatch("survival and killed kernels do not match".into()));
    }
    let regimes = RegimeSet::new(vec!["active".into(), "dead".into()])?;
    let n = p11.n();
    let mut full = Kernel::identity(&p11.grid, &regimes, p11.t);
    full.s = p11.s;
    let m = 2 * n;
    for x in 0..n {
        full.values[x * m..x * m + n].copy_from_slice(p11.row(x));
        full.values[x * m + n..x * m + 2 * n].copy_from_slice(p12.row(x));
    }
    Ok(full)
}

/// Terminal densities of surviving particles and of killing locations.
#[derive(Debug, Clone, PartialEq)]
pub struct UsbpTarget {
    pub grid: Grid,
    pub active: Vec<f64>,
    pub dead: Vec<f64>,
}

impl UsbpTarget {
    /// Accepts densities whose total mass is 1 within 1e-6 and rescales them to exactly 1.
    pub fn new(grid: &Grid, active: Vec<f64>, dead: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if active.len() != n || dead.len() != n {
            return Err(Error::GridMismatch("target densities do not match the grid".into()));
        }
        if active.iter().chain(&dead).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain("target densities must be finite and nonnegative".into()));
        }
        let total = (active.iter().sum::<f64>() + dead.iter().sum::<f64>()) * grid.weight();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("target mass is {total}, expected 1")));
        }
        let c = 1.0 / total;
        Ok(UsbpTarget {
            grid: grid.clone(),
            active: active.into_iter().map(|v| v * c).collect(),
            dead: dead.into_iter().map(|v| v * c).collect(),
        })
    }

    /// Samples two density shapes and scales them so the whole target has unit mass.
    pub fn from_shapes<A, D>(grid: &Grid, active: A, dead: D) -> Result<Self>
    where
        A: Fn(&[f64]) -> f64,
        D: Fn(&[f64]) -> f64,
    {
        let a: Vec<f64> = grid.nodes().iter().map(|x| active(x)).collect();
        let d: Vec<f64> = grid.nodes().iter().map(|x| dead(x)).collect();
        let total = (a.iter().sum::<f64>() + d.iter().sum::<f64>()) * grid.weight();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Domain("target shapes have no mass".into()));
        }
        Self::new(grid, a.iter().map(|v| v / total).collect(), d.iter().map(|v| v / total).collect())
    }

    /// Terminal law of the unconditioned killed process started at `x0`.
    pub fn reference(km: &KillingModel, grid: &Grid) -> Result<Self> {
        let lat = LatticeDiffusion::from_model(&km.base, grid)?;
        let x0 = start_node(km, grid)?;
        let t = km.horizon();
        let active = lat.row(x0, &lat.survival_coefficients(km, 0.0, t)?);
        let dead = lat.row(x0, &lat.killed_coefficients(km, 0.0, t)?);
        let total = (active.iter().sum::<f64>() + dead.iter().sum::<f64>()) * grid.weight();
        Self::new(grid, active.iter().map(|v| v / total).collect(), dead.iter().map(|v| v / total).collect())
    }

    pub fn from_marginal(m: &Marginal) -> Result<Self> {
        if m.regimes.count() != 2 {
            return Err(Error::GridMismatch("an unbalanced target has two regimes".into()));
        }
        let d = m.densities();
        let n = m.grid.len();
        Self::new(&m.grid, d[..n].to_vec(), d[n..].to_vec())
    }

    pub fn to_marginal(&self) -> Result<Marginal> {
        let regimes = RegimeSet::new(vec!["active".into(), "dead".into()])?;
        let w = self.grid.weight();
        let weights = self.active.iter().chain(&self.dead).map(|v| v * w).collect();
        Marginal::from_weights(&self.grid, &regimes, weights)
    }

    pub fn dead_mass(&self) -> f64 {
        self.dead.iter().sum::<f64>() * self.grid.weight()
    }
}

fn start_node(km: &KillingModel, grid: &Grid) -> Result<usize> {
    nearest_node(grid, &km.x0).ok_or_else(|| Error::Domain("start point lies outside the grid".into()))
}

/// Terminal boundary function with its boundedness and finiteness diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct UsbpBoundary {
    /// `regime·N + node`; zero off the target supports.
    pub g: Vec<f64>,
    pub sup_active: f64,
    pub sup_dead: f64,
    /// Relative entropy of the target against the reference terminal law.
    pub relative_entropy: f64,
    /// `sum_j sum_y g R_T w`, which equals 1.
    pub normalization: f64,
}

/// `g = rho_T / R_T` per regime, where `R_T` is row `x0` of the survival and killed kernels over `[0, T]`.
pub fn usbp_g(target: &UsbpTarget, p11: &Kernel, p12: &Kernel, x0: &[f64]) -> Result<UsbpBoundary> {
    if p11.grid != target.grid || p12.grid != target.grid {
        return Err(Error::GridMismatch("target and kernels use different grids".into()));
    }
    let x = nearest_node(&target.grid, x0).ok_or_else(|| Error::Domain("start point lies outside the grid".into()))?;
    boundary_from_rows(target, p11.row(x), p12.row(x))
}

fn boundary_from_rows(target: &UsbpTarget, ra: &[f64], rd: &[f64]) -> Result<UsbpBoundary> {
    let n = target.grid.len();
    let w = target.grid.weight();
    let mut g = vec![0.0; 2 * n];
    let mut bad = Vec::new();
    let mut sup = [0.0f64; 2];
    let mut entropy = 0.0;
    let mut norm = 0.0;
    for (regime, (rho, r)) in [(&target.active, ra), (&target.dead, rd)].into_iter().enumerate() {
        for k in 0..n {
            if rho[k] == 0.0 {
                continue;
            }
            if !(r[k] > 0.0) {
                bad.push(format!("{}@{}", if regime == ACTIVE { "active" } else { "dead" }, k));
                continue;
            }
            let v = rho[k] / r[k];
            g[regime * n + k] = v;
            sup[regime] = sup[regime].max(v);
            entropy += rho[k] * v.ln() * w;
            norm += v * r[k] * w;
        }
    }
    if !bad.is_empty() {
        return Err(Error::Domain(format!(
            "target puts mass where the reference terminal law vanishes: {}",
            bad.join(", ")
        )));
    }
    Ok(UsbpBoundary { g, sup_active: sup[0], sup_dead: sup[1], relative_entropy: entropy, normalization: norm })
}

/// Closed-form potentials of the unbalanced bridge.
#[derive(Debug, Clone)]
pub struct UsbpSolution {
    pub model: ModelSpec,
    pub phi: PotentialField,
    pub phihat: PotentialField,
    pub boundary: UsbpBoundary,
    pub start_node: usize,
}

impl UsbpSolution {
    /// Initial marginal: unit mass at the start node, active regime.
    pub fn rho0(&self) -> Result<Marginal> {
        Marginal::dirac(&self.phi.grid, &self.phi.regimes, ACTIVE, &self.phi.grid.node(self.start_node))
    }
}

/// Potentials on `slices + 1` equally spaced times in `[0, T]`.
///
/// Backward: `phi_a(t) = p11(t,T) g_a + p12(t,T) g_d`, `phi_d(t) = g_d`.
/// Forward: `phihat_a(s) = p11(0, x0, s, ·)`, `phihat_d(s) = p12(0, x0, s, ·)`.
pub fn usbp_potentials(km: &KillingModel, target: &UsbpTarget, slices: usize) -> Result<UsbpSolution> {
    if slices < 1 {
        return Err(Error::Config("need at least one time slice".into()));
    }
    let grid = &target.grid;
    let model = km.model()?;
    let lat = LatticeDiffusion::from_model(&km.base, grid)?;
    let x0 = start_node(km, grid)?;
    let n = grid.len();
    let horizon = km.horizon();
    let times: Vec<f64> = (0..=slices).map(|m| horizon * m as f64 / slices as f64).collect();
    let ra = lat.row(x0, &lat.survival_coefficients(km, 0.0, horizon)?);
    let rd = lat.row(x0, &lat.killed_coefficients(km, 0.0, horizon)?);
    let boundary = boundary_from_rows(target, &ra, &rd)?;
    let (ga, gd) = boundary.g.split_at(n);
    let phi_slices = times
        .iter()
        .map(|&t| {
            if t == horizon {
                return Ok(boundary.g.clone());
            }
            let a = lat.apply(&lat.survival_coefficients(km, t, horizon)?, ga);
            let b = lat.apply(&lat.killed_coefficients(km, t, horizon)?, gd);
            Ok(a.iter().zip(&b).map(|(p, q)| p + q).chain(gd.iter().copied()).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let phihat_slices = times
        .iter()
        .map(|&s| {
            if s == 0.0 {
                let mut v = vec![0.0; 2 * n];
                v[x0] = 1.0 / grid.weight();
                return Ok(v);
            }
            let mut v = lat.row(x0, &lat.survival_coefficients(km, 0.0, s)?);
            v.extend(lat.row(x0, &lat.killed_coefficients(km, 0.0, s)?));
            Ok(v)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let field = |kind, slices| PotentialField {
        kind,
        grid: grid.clone(),
        regimes: model.regimes.clone(),
        times: times.clone(),
        slices,
    };
    Ok(UsbpSolution {
        phi: field(PotentialKind::Phi, phi_slices),
        phihat: field(PotentialKind::PhiHat, phihat_slices),
        model,
        boundary,
        start_node: x0,
    })
}

/// Killing rate under the bridge, `V(t) phi_d / phi_a` at `(t, x)`.
///
/// The ratio is interpolated linearly in `x` on each slice and geometrically between slices.
pub fn usbp_killing_rate(phi: &PotentialField, v: &CoefficientExpr, t: f64, x: &[f64]) -> Result<f64> {
    let times = &phi.times;
    let (first, last) = (times[0], *times.last().unwrap());
    if !(t >= first && t <= last) {
        return Err(Error::ControlDomain(format!("t={t} is outside the potential slices")));
    }
    let n = phi.n();
    let ratio_at = |m: usize| -> Result<f64> {
        let s = &phi.slices[m];
        let a = phi.grid.interp_linear(&s[ACTIVE * n..(ACTIVE + 1) * n], x);
        let d = phi.grid.interp_linear(&s[DEAD * n..(DEAD + 1) * n], x);
        match (a, d) {
            (Some(a), Some(d)) if a > 0.0 => Ok(d.max(0.0) / a),
            (Some(_), Some(_)) => Err(Error::ControlDomain(format!("active potential vanishes at x={x:?}"))),
            _ => Err(Error::ControlDomain(format!("x={x:?} is off the grid"))),
        }
    };
    let m = times.partition_point(|&s| s <= t).saturating_sub(1).min(times.len() - 2);
    let (t0, t1) = (times[m], times[m + 1]);
    let a = (t - t0) / (t1 - t0);
    let ratio = if a <= 0.0 {
        ratio_at(m)?
    } else if a >= 1.0 {
        ratio_at(m + 1)?
    } else {
        let (r0, r1) = (ratio_at(m)?, ratio_at(m + 1)?);
        if r0 > 0.0 && r1 > 0.0 {
            (r0.ln() * (1.0 - a) + r1.ln() * a).exp()
        } else {
            r0 * (1.0 - a) + r1 * a
        }
    };
    Ok(ratio * v.eval_t(t)?)
}

/// Running relative-entropy cost of a path of the killed model under `controls`.
pub fn usbp_scp_cost(path: &SamplePath, controls: &dyn ControlTriple, km: &KillingModel) -> Result<f64> {
    kl_running_cost(path, controls, &km.model()?)
}
