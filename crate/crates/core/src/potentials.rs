//! Schrödinger potentials on time slices, the bridge kernel and marginals,
//! the optimal control triple and the tilted bridge coefficients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernel::{Kernel, Marginal};
use crate::model::{ModelSpec, RegimeSet};
use crate::simulate::ControlTriple;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialKind {
    /// Backward-propagated terminal boundary function.
    Phi,
    /// Forward-propagated initial boundary measure.
    PhiHat,
}

/// Values per time slice on `regime·N + node`.
///
/// Every slice is a density on the grid; slice 0 of a forward field holds the initial
/// boundary measure divided by the cell volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    pub kind: PotentialKind,
    pub grid: Grid,
    pub regimes: RegimeSet,
    pub times: Vec<f64>,
    pub slices: Vec<Vec<f64>>,
}

const TIME_MATCH: f64 = 1e-9;

impl PotentialField {
    pub fn slice_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= TIME_MATCH * (1.0 + t.abs()))
    }

    pub fn slice(&self, t: f64) -> Result<&[f64]> {
        self.slice_index(t)
            .map(|m| self.slices[m].as_slice())
            .ok_or_else(|| Error::GridMismatch(format!("no potential slice at t={t}")))
    }

    pub fn n(&self) -> usize {
        self.grid.len()
    }

    pub fn value(&self, m: usize, i: usize, node: usize) -> f64 {
        self.slices[m][i * self.n() + node]
    }

    /// Same field multiplied by `c`.
    pub fn scaled(&self, c: f64) -> PotentialField {
        let mut out = self.clone();
        out.slices.iter_mut().flatten().for_each(|v| *v *= c);
        out
    }

    /// Mass `sum phi w` of each slice.
    pub fn slice_masses(&self) -> Vec<f64> {
        let w = self.grid.weight();
        self.slices.iter().map(|s| s.iter().sum::<f64>() * w).collect()
    }
}

fn check_field(f: &[f64], k: &Kernel, what: &str) -> Result<()> {
    if f.len() != k.dim() {
        return Err(Error::GridMismatch(format!("{what} does not match the kernel shape")));
    }
    if f.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("{what} must be finite and nonnegative")));
    }
    Ok(())
}

/// `sum_j sum_y p(x, y) g(y) w` for every row.
pub fn apply_backward(k: &Kernel, g: &[f64]) -> Vec<f64> {
    let w = k.grid.weight();
    (0..k.dim()).into_par_iter().map(|r| k.row(r).iter().zip(g).map(|(p, v)| p * v).sum::<f64>() * w).collect()
}

/// `sum_i sum_x mass(x) p(x, y)` for every column.
pub fn apply_forward(k: &Kernel, mass: &[f64]) -> Vec<f64> {
    let m = k.dim();
    let mut out = vec![0.0; m];
    for (r, &a) in mass.iter().enumerate() {
        if a != 0.0 {
            for (o, p) in out.iter_mut().zip(k.row(r)) {
                *o += a * p;
            }
        }
    }
    out
}

fn field_from(kind: PotentialKind, k: &Kernel, times: Vec<f64>, slices: Vec<Vec<f64>>) -> PotentialField {
    PotentialField { kind, grid: k.grid.clone(), regimes: k.regimes.clone(), times, slices }
}

/// `phi(t_m) = K(t_m, T) g` for kernels that all end at the horizon; the last slice is `g`.
pub fn propagate_phi(g: &[f64], kernels: &[Kernel]) -> Result<PotentialField> {
    let first = kernels.first().ok_or_else(|| Error::Config("no kernels to propagate with".into()))?;
    check_field(g, first, "terminal boundary function")?;
    let horizon = first.s;
    let mut ks: Vec<&Kernel> = kernels.iter().collect();
    ks.sort_by(|a, b| a.t.total_cmp(&b.t));
    for k in &ks {
        if (k.s - horizon).abs() > TIME_MATCH * (1.0 + horizon.abs()) || k.grid != first.grid {
            return Err(Error::GridMismatch("kernels must share the grid and end at the horizon".into()));
        }
    }
    let mut times: Vec<f64> = ks.iter().map(|k| k.t).collect();
    let mut slices: Vec<Vec<f64>> = ks.iter().map(|k| apply_backward(k, g)).collect();
    times.push(horizon);
    slices.push(g.to_vec());
    Ok(field_from(PotentialKind::Phi, first, times, slices))
}

/// Backward recursion through consecutive step kernels `K(t_m, t_{m+1})`.
pub fn propagate_phi_stepwise(g: &[f64], steps: &[Kernel]) -> Result<PotentialField> {
    let first = steps.first().ok_or_else(|| Error::Config("no kernels to propagate with".into()))?;
    check_field(g, first, "terminal boundary function")?;
    check_consecutive(steps)?;
    let mut slices = vec![g.to_vec()];
    for k in steps.iter().rev() {
        let next = apply_backward(k, slices.last().unwrap());
        slices.push(next);
    }
    slices.reverse();
    let mut times: Vec<f64> = steps.iter().map(|k| k.t).collect();
    times.push(steps.last().unwrap().s);
    Ok(field_from(PotentialKind::Phi, first, times, slices))
}

fn check_consecutive(steps: &[Kernel]) -> Result<()> {
    for pair in steps.windows(2) {
        if (pair[0].s - pair[1].t).abs() > TIME_MATCH * (1.0 + pair[0].s.abs()) || pair[0].grid != pair[1].grid {
            return Err(Error::GridMismatch("step kernels must be consecutive on one grid".into()));
        }
    }
    Ok(())
}

/// `phihat(s_m, y) = sum_x mass(x) p(0, x, s_m, y)` for kernels that all start at the same time.
///
/// `start_mass` is the initial boundary function times the reference start law, as cell masses.
pub fn propagate_phihat(start_mass: &[f64], kernels: &[Kernel]) -> Result<PotentialField> {
    let first = kernels.first().ok_or_else(|| Error::Config("no kernels to propagate with".into()))?;
    check_field(start_mass, first, "initial boundary measure")?;
    let t0 = first.t;
    let mut ks: Vec<&Kernel> = kernels.iter().collect();
    ks.sort_by(|a, b| a.s.total_cmp(&b.s));
    for k in &ks {
        if (k.t - t0).abs() > TIME_MATCH * (1.0 + t0.abs()) || k.grid != first.grid {
            return Err(Error::GridMismatch("kernels must share the grid and the start time".into()));
        }
    }
    let w = first.grid.weight();
    let mut times = vec![t0];
    let mut slices = vec![start_mass.iter().map(|m| m / w).collect::<Vec<_>>()];
    for k in ks {
        times.push(k.s);
        slices.push(apply_forward(k, start_mass));
    }
    Ok(field_from(PotentialKind::PhiHat, first, times, slices))
}

/// Forward recursion through consecutive step kernels.
pub fn propagate_phihat_stepwise(start_mass: &[f64], steps: &[Kernel]) -> Result<PotentialField> {
    let first = steps.first().ok_or_else(|| Error::Config("no kernels to propagate with".into()))?;
    check_field(start_mass, first, "initial boundary measure")?;
    check_consecutive(steps)?;
    let w = first.grid.weight();
    let mut times = vec![first.t];
    let mut slices = vec![start_mass.iter().map(|m| m / w).collect::<Vec<_>>()];
    let mut mass = start_mass.to_vec();
    for k in steps {
        let dens = apply_forward(k, &mass);
        mass = dens.iter().map(|v| v * w).collect();
        times.push(k.s);
        slices.push(dens);
    }
    Ok(field_from(PotentialKind::PhiHat, first, times, slices))
}

/// `p̂(t, x, s, y) = phi(s, y) / phi(t, x) · p(t, x, s, y)`; rows with `phi(t, x) = 0` are zero.
pub fn bridge_kernel(phi: &PotentialField, k: &Kernel) -> Result<Kernel> {
    if phi.grid != k.grid || phi.regimes.count() != k.regimes.count() {
        return Err(Error::GridMismatch("potential and kernel use different grids".into()));
    }
    let from = phi.slice(k.t)?;
    let to = phi.slice(k.s)?;
    let m = k.dim();
    let mut out = k.clone();
    out.values.par_chunks_mut(m).enumerate().for_each(|(r, row)| {
        if from[r] > 0.0 {
            let inv = 1.0 / from[r];
            for (v, f) in row.iter_mut().zip(to) {
                *v *= f * inv;
            }
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    });
    Ok(out)
}

/// Bridge marginal at `t` as cell masses `phi · phihat · w`.
pub fn bridge_marginal(phi: &PotentialField, phihat: &PotentialField, t: f64) -> Result<Marginal> {
    if phi.grid != phihat.grid {
        return Err(Error::GridMismatch("potentials use different grids".into()));
    }
    let a = phi.slice(t)?;
    let b = phihat.slice(t)?;
    let w = phi.grid.weight();
    Marginal::from_weights(&phi.grid, &phi.regimes, a.iter().zip(b).map(|(x, y)| x * y * w).collect())
}

/// Gradient of `log phi` at every node of one slice, `d` entries per `(regime, node)`; NaN where undefined.
fn log_gradient(grid: &Grid, regimes: usize, slice: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let d = grid.d();
    let mut out = vec![f64::NAN; regimes * n * d];
    out.par_chunks_mut(d).enumerate().for_each(|(r, g)| {
        let (i, k) = (r / n, r % n);
        let idx = grid.multi_index(k);
        let base = i * n;
        for a in 0..d {
            let ax = &grid.axes[a];
            let stride = grid.stride(a);
            let at = |off: i64| slice[base + (k as i64 + off * stride as i64) as usize];
            let h = ax.h();
            let ka = idx[a];
            let v = if ka == 0 {
                let (f0, f1, f2) = (at(0), at(1), at(2));
                (4.0 * (f1 / f0).ln() - (f2 / f0).ln()) / (2.0 * h)
            } else if ka + 1 == ax.n {
                let (f0, f1, f2) = (at(0), at(-1), at(-2));
                -(4.0 * (f1 / f0).ln() - (f2 / f0).ln()) / (2.0 * h)
            } else {
                (at(1) / at(-1)).ln() / (2.0 * h)
            };
            g[a] = if v.is_finite() { v } else { f64::NAN };
        }
    });
    out
}

/// Optimal controls read off the potential by grid interpolation.
///
/// `u* = −σᵀ ∇log phi` interpolates the nodal log-gradients linearly in space and time;
/// `θ*` and `ξ*` are ratios of `phi` interpolated linearly in space and log-linearly in time.
/// Near the horizon, a slice where `phi` vanishes on the stencil is skipped in favour of its neighbour.
#[derive(Debug, Clone)]
pub struct GridControls {
    model: ModelSpec,
    phi: PotentialField,
    grad: Vec<Vec<f64>>,
}

pub fn optimal_controls(phi: &PotentialField, model: &ModelSpec) -> Result<GridControls> {
    if phi.kind != PotentialKind::Phi {
        return Err(Error::Config("optimal controls need a backward potential".into()));
    }
    if phi.grid.d() != model.d || phi.regimes.count() != model.n_regimes() {
        return Err(Error::GridMismatch("potential grid does not match the model".into()));
    }
    let n = phi.n();
    let last = phi.times.len() - 1;
    let mut zeros = Vec::new();
    for (m, s) in phi.slices.iter().enumerate().take(last) {
        for (r, v) in s.iter().enumerate() {
            if !(*v > 0.0) && !model.is_frozen(r / n) {
                zeros.push((phi.times[m], r / n, r % n));
            }
        }
    }
    if !zeros.is_empty() {
        let shown: Vec<String> = zeros.iter().take(8).map(|(t, i, k)| format!("(t={t}, regime {i}, node {k})")).collect();
        return Err(Error::ControlDomain(format!(
            "potential vanishes at {} interior nodes: {}",
            zeros.len(),
            shown.join(", ")
        )));
    }
    let grad = phi.slices.iter().map(|s| log_gradient(&phi.grid, phi.regimes.count(), s)).collect();
    Ok(GridControls { model: model.clone(), phi: phi.clone(), grad })
}

impl GridControls {
    pub fn potential(&self) -> &PotentialField {
        &self.phi
    }

    /// Bracketing slices and the fractional position of `t` between them.
    fn bracket(&self, t: f64) -> (usize, f64) {
        let ts = &self.phi.times;
        let last = ts.len() - 1;
        if last == 0 || t <= ts[0] {
            return (0, 0.0);
        }
        if t >= ts[last] {
            return (last - 1, 1.0);
        }
        let m = ts.partition_point(|&s| s <= t).saturating_sub(1).min(last - 1);
        (m, (t - ts[m]) / (ts[m + 1] - ts[m]))
    }

    fn off_grid(x: &[f64]) -> Error {
        Error::ControlDomain(format!("state {x:?} is outside the potential grid"))
    }

    /// `∇log phi(t, x, i)`.
    pub fn grad_log_phi(&self, t: f64, x: &[f64], i: usize, out: &mut [f64]) -> Result<()> {
        let (m, f) = self.bracket(t);
        let n = self.phi.n();
        let d = self.phi.grid.d();
        let mut comp = vec![0.0; n];
        for a in 0..d {
            let mut at = |s: usize| -> Result<f64> {
                for k in 0..n {
                    comp[k] = self.grad[s][(i * n + k) * d + a];
                }
                self.phi.grid.interp_linear(&comp, x).ok_or_else(|| Self::off_grid(x))
            };
            let lo = at(m)?;
            let hi = if self.phi.times.len() > 1 { at(m + 1)? } else { lo };
            out[a] = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => (1.0 - f) * lo + f * hi,
                (true, false) => lo,
                (false, true) => hi,
                (false, false) => {
                    return Err(Error::ControlDomain(format!(
                        "log-gradient of the potential is undefined at t={t}, x={x:?}, regime {i}"
                    )))
                }
            };
        }
        Ok(())
    }

    /// `phi(t, y, j) / phi(t, x, i)`.
    pub fn ratio(&self, t: f64, y: &[f64], j: usize, x: &[f64], i: usize) -> Result<f64> {
        let (m, f) = self.bracket(t);
        let n = self.phi.n();
        let grid = &self.phi.grid;
        let slice_ratio = |s: usize| -> Result<Option<f64>> {
            let sl = &self.phi.slices[s];
            let den = grid.interp_linear(&sl[i * n..(i + 1) * n], x).ok_or_else(|| Self::off_grid(x))?;
            let num = grid.interp_linear(&sl[j * n..(j + 1) * n], y).ok_or_else(|| Self::off_grid(y))?;
            Ok(if den > 0.0 { Some(num.max(0.0) / den) } else { None })
        };
        let lo = slice_ratio(m)?;
        let hi = if self.phi.times.len() > 1 { slice_ratio(m + 1)? } else { lo };
        match (lo, hi) {
            (Some(a), Some(b)) => Ok(if f == 0.0 {
                a
            } else if f == 1.0 {
                b
            } else if a > 0.0 && b > 0.0 {
                ((1.0 - f) * a.ln() + f * b.ln()).exp()
            } else {
                0.0
            }),
            (Some(a), None) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) => Err(Error::ControlDomain(format!("potential vanishes at t={t}, x={x:?}, regime {i}"))),
        }
    }
}

impl ControlTriple for GridControls {
    fn u(&self, t: f64, x: &[f64], i: usize, out: &mut [f64]) -> Result<()> {
        let d = self.model.d;
        let mut g = vec![0.0; d];
        self.grad_log_phi(t, x, i, &mut g)?;
        let mut sigma = vec![0.0; d * d];
        self.model.diffusion(t, x, i, &mut sigma)?;
        for n in 0..d {
            out[n] = -(0..d).map(|m| sigma[m * d + n] * g[m]).sum::<f64>();
        }
        Ok(())
    }

    fn theta(&self, t: f64, x: &[f64], i: usize, atom: usize) -> Result<f64> {
        let mut g = vec![0.0; self.model.d];
        self.model.jump(t, x, i, atom, &mut g)?;
        let y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + b).collect();
        Ok(1.0 - self.ratio(t, &y, i, x, i)?)
    }

    fn xi(&self, t: f64, x: &[f64], i: usize, j: usize) -> Result<f64> {
        let mut y = vec![0.0; self.model.d];
        self.model.hybrid_map(t, x, i, j, &mut y)?;
        self.ratio(t, &y, j, x, i)
    }
}

/// Tilted coefficients at every slice before the horizon, node and regime.
///
/// Entries are NaN where the potential vanishes or a jump target leaves the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeCoefficients {
    pub times: Vec<f64>,
    pub grid: Grid,
    pub regimes: usize,
    /// `b^phi`, `d` entries per `(regime, node)`.
    pub drift: Vec<Vec<f64>>,
    /// `phi(x + γ_a, i) / phi(x, i)`, one entry per atom per `(regime, node)`.
    pub jump_multipliers: Vec<Vec<f64>>,
    /// `phi(ψ_ij(x), j) / phi(x, i)` at index `(i·S + j)·N + node`.
    pub switch_multipliers: Vec<Vec<f64>>,
    /// Largest gap between `b^phi` and `b − σu* − Σ θ* γ w` over compensated atoms.
    pub identity_error: f64,
}

/// Identity tolerance between the tilted drift and the drift of the optimal triple.
pub const DRIFT_IDENTITY_TOL: f64 = 1e-10;

pub fn bridge_coefficients(phi: &PotentialField, model: &ModelSpec) -> Result<BridgeCoefficients> {
    let controls = optimal_controls(phi, model)?;
    let grid = &phi.grid;
    let n = grid.len();
    let d = model.d;
    let s = model.n_regimes();
    let atoms = model.nu.atoms.len();
    let slices = phi.times.len().saturating_sub(1).max(1);
    let interp = |m: usize, j: usize, y: &[f64]| grid.interp_linear(&phi.slices[m][j * n..(j + 1) * n], y);
    let per_slice: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)>> = (0..slices)
        .into_par_iter()
        .map(|m| {
            let t = phi.times[m];
            let mut drift = vec![f64::NAN; s * n * d];
            let mut jumps = vec![f64::NAN; s * n * atoms];
            let mut switches = vec![f64::NAN; s * s * n];
            let mut worst: f64 = 0.0;
            let mut b = vec![0.0; d];
            let mut sigma = vec![0.0; d * d];
            let mut cov = vec![0.0; d * d];
            let mut gam = vec![0.0; d];
            let mut u = vec![0.0; d];
            let mut y = vec![0.0; d];
            for i in 0..s {
                for k in 0..n {
                    let r = i * n + k;
                    let here = phi.slices[m][r];
                    if !(here > 0.0) {
                        continue;
                    }
                    let x = grid.node(k);
                    let g = &controls.grad[m][r * d..(r + 1) * d];
                    model.drift(t, &x, i, &mut b)?;
                    model.diffusion(t, &x, i, &mut sigma)?;
                    model.covariance(t, &x, i, &mut cov)?;
                    let mut bphi: Vec<f64> = (0..d).map(|a| b[a] + (0..d).map(|c| cov[a * d + c] * g[c]).sum::<f64>()).collect();
                    let mut jump_ok = true;
                    for (a, atom) in model.nu.atoms.iter().enumerate() {
                        model.jump(t, &x, i, a, &mut gam)?;
                        let target: Vec<f64> = x.iter().zip(&gam).map(|(p, q)| p + q).collect();
                        match interp(m, i, &target) {
                            Some(v) => {
                                let mult = v.max(0.0) / here;
                                jumps[r * atoms + a] = mult;
                                if model.nu.compensated(a) {
                                    for c in 0..d {
                                        bphi[c] += (mult - 1.0) * gam[c] * atom.weight;
                                    }
                                }
                            }
                            None => jump_ok = false,
                        }
                    }
                    for j in 0..s {
                        if j == i {
                            continue;
                        }
                        model.hybrid_map(t, &x, i, j, &mut y)?;
                        if let Some(v) = interp(m, j, &y) {
                            switches[(i * s + j) * n + k] = v.max(0.0) / here;
                        }
                    }
                    if !jump_ok || bphi.iter().any(|v| !v.is_finite()) {
                        continue;
                    }
                    // Same drift from the optimal triple.
                    controls.u(t, &x, i, &mut u)?;
                    let mut alt: Vec<f64> = (0..d).map(|a| b[a] - (0..d).map(|c| sigma[a * d + c] * u[c]).sum::<f64>()).collect();
                    for (a, atom) in model.nu.atoms.iter().enumerate() {
                        if model.nu.compensated(a) {
                            let th = controls.theta(t, &x, i, a)?;
                            model.jump(t, &x, i, a, &mut gam)?;
                            for c in 0..d {
                                alt[c] -= th * gam[c] * atom.weight;
                            }
                        }
                    }
                    for c in 0..d {
                        worst = worst.max((alt[c] - bphi[c]).abs() / (1.0 + bphi[c].abs()));
                    }
                    drift[r * d..(r + 1) * d].copy_from_slice(&bphi);
                }
            }
            Ok((drift, jumps, switches, worst))
        })
        .collect();
    let mut out = BridgeCoefficients {
        times: phi.times[..slices].to_vec(),
        grid: grid.clone(),
        regimes: s,
        drift: Vec::with_capacity(slices),
        jump_multipliers: Vec::with_capacity(slices),
        switch_multipliers: Vec::with_capacity(slices),
        identity_error: 0.0,
    };
    for r in per_slice {
        let (a, b, c, e) = r?;
        out.drift.push(a);
        out.jump_multipliers.push(b);
        out.switch_multipliers.push(c);
        out.identity_error = out.identity_error.max(e);
    }
    if out.identity_error > DRIFT_IDENTITY_TOL {
        return Err(Error::NonConvergence(format!(
            "tilted drift and optimal-control drift disagree by {}",
            out.identity_error
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{compose, kernel_gaussian, kernel_gaussian_switching};
    use crate::model::{Atom, JumpMeasure};

    fn grid() -> Grid {
        Grid::parse("-8:8:160").unwrap()
    }

    fn slices(t_end: f64, m: usize) -> Vec<f64> {
        (0..=m).map(|k| t_end * k as f64 / m as f64).collect()
    }

    fn to_horizon(g: &Grid, times: &[f64], rates: &[f64]) -> Vec<Kernel> {
        let t_end = *times.last().unwrap();
        times[..times.len() - 1]
            .iter()
            .map(|&t| kernel_gaussian_switching(g, t, t_end, &[0.0], &[1.0], rates).unwrap())
            .collect()
    }

    #[test]
    fn constant_terminal_gives_constant_phi() {
        let g = grid();
        let ks = to_horizon(&g, &slices(1.0, 4), &[0.0, 0.3, 0.6, 0.0]);
        let phi = propagate_phi(&vec![1.0; 320], &ks).unwrap();
        let mid = g.locate(&[0.0]).unwrap();
        for s in &phi.slices {
            assert!((s[mid] - 1.0).abs() < 1e-10);
            assert!((s[160 + mid] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn martingale_and_tower() {
        let g = Grid::parse("-6:6:200").unwrap();
        let gy: Vec<f64> = g.nodes().iter().map(|x| x[0] + 6.0).collect();
        let k = kernel_gaussian(&g, 0.0, 1.0, &[0.0], &[1.0]).unwrap();
        let phi = propagate_phi(&gy, std::slice::from_ref(&k)).unwrap();
        for (node, x) in g.nodes().iter().enumerate() {
            if x[0].abs() < 2.0 {
                assert!((phi.slices[0][node] - x[0] - 6.0).abs() < 2e-3);
            }
        }
        let a = kernel_gaussian(&g, 0.0, 0.4, &[0.0], &[1.0]).unwrap();
        let b = kernel_gaussian(&g, 0.4, 1.0, &[0.0], &[1.0]).unwrap();
        let two = propagate_phi_stepwise(&gy, &[a.clone(), b.clone()]).unwrap();
        let direct = propagate_phi(&gy, &[compose(&a, &b).unwrap()]).unwrap();
        let diff = two.slices[0].iter().zip(&direct.slices[0]).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "{diff}");
    }

    #[test]
    fn forward_mass_and_dirac() {
        let g = grid();
        let rs = RegimeSet::numbered(2);
        let rho0 = Marginal::dirac(&g, &rs, 0, &[0.05]).unwrap();
        let times = slices(1.0, 4);
        let ks: Vec<Kernel> = times[1..]
            .iter()
            .map(|&s| kernel_gaussian_switching(&g, 0.0, s, &[0.0], &[1.0], &[0.0, 0.5, 0.0, 0.0]).unwrap())
            .collect();
        let ph = propagate_phihat(&rho0.masses(), &ks).unwrap();
        let x0 = g.locate(&[0.05]).unwrap();
        assert_eq!(ph.slices[2][7], ks[1].at(0, x0, 0, 7));
        for m in ph.slice_masses() {
            assert!((m - 1.0).abs() < 1e-8);
        }
        let zero = propagate_phihat(&vec![0.0; 320], &ks).unwrap();
        assert!(zero.slices.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_potential_leaves_kernel() {
        let g = Grid::parse("-2:2:10").unwrap();
        let k = kernel_gaussian(&g, 0.0, 1.0, &[0.0], &[1.0]).unwrap();
        let phi = PotentialField {
            kind: PotentialKind::Phi,
            grid: g.clone(),
            regimes: RegimeSet::numbered(1),
            times: vec![0.0, 1.0],
            slices: vec![vec![1.0; 10]; 2],
        };
        assert_eq!(bridge_kernel(&phi, &k).unwrap(), k);
        let m = ModelSpec::builder(1, RegimeSet::numbered(1), 1.0).diffusion(0, &["1"]).build().unwrap();
        let c = optimal_controls(&phi, &m).unwrap();
        let mut u = [1.0];
        c.u(0.3, &[0.2], 0, &mut u).unwrap();
        assert_eq!(u[0], 0.0);
        let bc = bridge_coefficients(&phi, &m).unwrap();
        assert!(bc.drift[0].iter().all(|v| *v == 0.0));
    }

    fn gaussian_fixture() -> (Grid, PotentialField, Vec<Kernel>) {
        let g = grid();
        let times = slices(1.0, 8);
        let rates = [0.0, 0.4, 0.7, 0.0];
        let steps: Vec<Kernel> = times
            .windows(2)
            .map(|w| kernel_gaussian_switching(&g, w[0], w[1], &[0.0], &[1.0], &rates).unwrap())
            .collect();
        let gt: Vec<f64> = (0..320)
            .map(|r| {
                let x = g.node(r % 160)[0];
                (1.0 + (r / 160) as f64) * (-(x - 1.0) * (x - 1.0)).exp()
            })
            .collect();
        let phi = propagate_phi_stepwise(&gt, &steps).unwrap();
        (g, phi, steps)
    }

    #[test]
    fn bridge_rows_stochastic_and_semigroup() {
        let (g, phi, steps) = gaussian_fixture();
        let p1 = bridge_kernel(&phi, &steps[2]).unwrap();
        let p2 = bridge_kernel(&phi, &steps[3]).unwrap();
        for r in 0..p1.dim() {
            let x = g.node(r % 160)[0];
            assert!(p1.row_mass(r) <= 1.0 + 1e-8);
            if x.abs() < 4.0 {
                assert!((p1.row_mass(r) - 1.0).abs() < 1e-8, "{r}");
            }
        }
        let direct = bridge_kernel(&phi, &compose(&steps[2], &steps[3]).unwrap()).unwrap();
        let comp = compose(&p1, &p2).unwrap();
        assert!(comp.max_abs_diff(&direct).unwrap() < 1e-8);
        // Gauge invariance.
        let scaled = bridge_kernel(&phi.scaled(4.0), &steps[2]).unwrap();
        assert!(scaled.max_abs_diff(&p1).unwrap() <= 1e-15);
    }

    #[test]
    fn pinned_brownian_drift() {
        let g = Grid::parse("-4:4:200").unwrap();
        let a = 0.5;
        let cell = g.locate(&[a]).unwrap();
        let mut gt = vec![0.0; 200];
        gt[cell] = 1.0 / g.weight();
        let times = slices(1.0, 8);
        let ks: Vec<Kernel> = times[..8].iter().map(|&t| kernel_gaussian(&g, t, 1.0, &[0.0], &[1.0]).unwrap()).collect();
        let phi = propagate_phi(&gt, &ks).unwrap();
        let m = ModelSpec::builder(1, RegimeSet::numbered(1), 1.0).diffusion(0, &["1"]).build().unwrap();
        let c = optimal_controls(&phi, &m).unwrap();
        let pin = g.node(cell)[0];
        for &t in &[0.0, 0.25, 0.5, 0.75] {
            for &x in &[-1.5, -0.5, 1.0, 2.0] {
                let mut u = [0.0];
                c.u(t, &[x], 0, &mut u).unwrap();
                let expect = (x - pin) / (1.0 - t);
                assert!((u[0] - expect).abs() <= 0.05 * expect.abs(), "t={t} x={x} u={} want {expect}", u[0]);
            }
        }
    }

    #[test]
    fn second_order_gradient() {
        let err = |n: usize| {
            let g = Grid::uniform_1d(-3.0, 3.0, n).unwrap();
            let f: Vec<f64> = g.nodes().iter().map(|x| (x[0].sin() + 2.0).powi(2)).collect();
            let gr = log_gradient(&g, 1, &f);
            g.nodes()
                .iter()
                .enumerate()
                .map(|(k, x)| (gr[k] - 2.0 * x[0].cos() / (x[0].sin() + 2.0)).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(60) / err(120);
        assert!(ratio > 3.5 && ratio < 4.5, "{ratio}");
    }

    #[test]
    fn coefficients_with_jumps_and_switching() {
        let g = Grid::parse("-6:6:120").unwrap();
        let nu = JumpMeasure::new(vec![Atom { z: vec![0.3], weight: 0.8 }, Atom { z: vec![-1.5], weight: 0.2 }], true).unwrap();
        let m = ModelSpec::builder(1, RegimeSet::numbered(2), 1.0)
            .jumps(nu)
            .drift(0, &["0.1"])
            .diffusion(0, &["1"])
            .diffusion(1, &["0.5"])
            .jump_amplitude(0, &["z1"])
            .jump_amplitude(1, &["0.5*z1"])
            .rate(0, 1, "0.5")
            .rate(1, 0, "0.2")
            .hybrid_map(0, 1, &["x1 + 0.1"])
            .build()
            .unwrap();
        let slices: Vec<Vec<f64>> = (0..3)
            .map(|m| {
                (0..240)
                    .map(|r| {
                        let x = g.node(r % 120)[0];
                        (1.0 + 0.2 * m as f64) * (1.0 + (r / 120) as f64) * (-(x - 0.3).powi(2) / (2.0 + m as f64)).exp()
                    })
                    .collect()
            })
            .collect();
        let phi = PotentialField {
            kind: PotentialKind::Phi,
            grid: g.clone(),
            regimes: RegimeSet::numbered(2),
            times: vec![0.0, 0.5, 1.0],
            slices,
        };
        let bc = bridge_coefficients(&phi, &m).unwrap();
        assert!(bc.identity_error <= DRIFT_IDENTITY_TOL);
        let c = optimal_controls(&phi, &m).unwrap();
        let x = [0.7];
        let xi = c.xi(0.25, &x, 0, 1).unwrap();
        let direct = c.ratio(0.25, &[0.8], 1, &x, 0).unwrap();
        assert_eq!(xi, direct);
        let scaled = optimal_controls(&phi.scaled(3.0), &m).unwrap();
        let (mut u1, mut u2) = ([0.0], [0.0]);
        c.u(0.3, &x, 0, &mut u1).unwrap();
        scaled.u(0.3, &x, 0, &mut u2).unwrap();
        assert!((u1[0] - u2[0]).abs() <= 1e-13 * u1[0].abs().max(1.0));
        assert!(matches!(c.u(0.3, &[7.0], 0, &mut u1), Err(Error::ControlDomain(_))));
    }
}
