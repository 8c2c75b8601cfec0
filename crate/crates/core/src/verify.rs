//! Finite-difference checks of the Kolmogorov equations and operator identities.
//!
//! Fields are node values on `regime·N + node`. Derivatives use second-order central
//! differences (one-sided at the edges), so on compactly supported fields the discrete
//! generator and its discrete adjoint are exact transposes under `⟨f, g⟩ = sum f g w`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::ModelSpec;
use crate::potentials::PotentialField;

/// Operator output plus nodes whose displaced evaluations left the grid or whose tilt was undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub values: Vec<f64>,
    pub flagged: Vec<bool>,
}

fn check_grid(grid: &Grid) -> Result<()> {
    if grid.axes.iter().any(|a| a.n < 4) {
        return Err(Error::Config("finite-difference checks need at least 4 nodes per axis".into()));
    }
    Ok(())
}

/// First derivative along `axis` of one regime's values.
fn d1(grid: &Grid, f: &[f64], axis: usize) -> Vec<f64> {
    let ax = &grid.axes[axis];
    let s = grid.stride(axis) as isize;
    let h = ax.h();
    (0..grid.len())
        .map(|k| {
            let ka = (k / s as usize) % ax.n;
            let at = |o: isize| f[(k as isize + o * s) as usize];
            if ka == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if ka + 1 == ax.n {
                (3.0 * at(0) - 4.0 * at(-1) + at(-2)) / (2.0 * h)
            } else {
                (at(1) - at(-1)) / (2.0 * h)
            }
        })
        .collect()
}

/// Second derivative along `axis`.
fn d2(grid: &Grid, f: &[f64], axis: usize) -> Vec<f64> {
    let ax = &grid.axes[axis];
    let s = grid.stride(axis) as isize;
    let h2 = ax.h() * ax.h();
    (0..grid.len())
        .map(|k| {
            let ka = (k / s as usize) % ax.n;
            let at = |o: isize| f[(k as isize + o * s) as usize];
            if ka == 0 {
                (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) / h2
            } else if ka + 1 == ax.n {
                (2.0 * at(0) - 5.0 * at(-1) + 4.0 * at(-2) - at(-3)) / h2
            } else {
                (at(1) - 2.0 * at(0) + at(-1)) / h2
            }
        })
        .collect()
}

/// Nodal coefficients of a generator at one time.
#[derive(Debug, Clone)]
struct NodeCoefficients {
    t: f64,
    /// `d` per `(regime, node)`.
    drift: Vec<f64>,
    /// `d × d` per `(regime, node)`.
    cov: Vec<f64>,
    /// Per atom, intensity per `(regime, node)`.
    jump_weight: Vec<Vec<f64>>,
    /// Rate at `(i·S + j)·N + node`.
    rates: Vec<f64>,
    /// Nodes where the coefficients are undefined.
    flagged: Vec<bool>,
}

impl NodeCoefficients {
    fn reference(model: &ModelSpec, grid: &Grid, t: f64) -> Result<Self> {
        let n = grid.len();
        let s = model.n_regimes();
        let d = model.d;
        let mut c = NodeCoefficients {
            t,
            drift: vec![0.0; s * n * d],
            cov: vec![0.0; s * n * d * d],
            jump_weight: model.nu.atoms.iter().map(|a| vec![a.weight; s * n]).collect(),
            rates: vec![0.0; s * s * n],
            flagged: vec![false; s * n],
        };
        let mut b = vec![0.0; d];
        for i in 0..s {
            for k in 0..n {
                let x = grid.node(k);
                let r = i * n + k;
                model.drift(t, &x, i, &mut b)?;
                c.drift[r * d..(r + 1) * d].copy_from_slice(&b);
                model.covariance(t, &x, i, &mut c.cov[r * d * d..(r + 1) * d * d])?;
                for j in 0..s {
                    if j != i {
                        c.rates[(i * s + j) * n + k] = model.rate(t, &x, i, j)?;
                    }
                }
            }
        }
        Ok(c)
    }

    /// Coefficients of the bridge: drift `b + a ∇φ/φ + Σ (ratio − 1) γ w`, intensities `w · ratio`, rates `Q · ratio`.
    fn tilted(model: &ModelSpec, grid: &Grid, t: f64, phi: &[f64]) -> Result<Self> {
        let mut c = Self::reference(model, grid, t)?;
        let n = grid.len();
        let s = model.n_regimes();
        let d = model.d;
        let mut gam = vec![0.0; d];
        let mut y = vec![0.0; d];
        for i in 0..s {
            let slice = &phi[i * n..(i + 1) * n];
            let grads: Vec<Vec<f64>> = (0..d).map(|a| d1(grid, slice, a)).collect();
            for k in 0..n {
                let r = i * n + k;
                let here = slice[k];
                if !(here > 0.0) {
                    c.flagged[r] = true;
                    c.drift[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    c.jump_weight.iter_mut().for_each(|w| w[r] = 0.0);
                    for j in 0..s {
                        c.rates[(i * s + j) * n + k] = 0.0;
                    }
                    continue;
                }
                let x = grid.node(k);
                for m in 0..d {
                    let mut v = 0.0;
                    for q in 0..d {
                        v += c.cov[r * d * d + m * d + q] * grads[q][k] / here;
                    }
                    c.drift[r * d + m] += v;
                }
                for (a, atom) in model.nu.atoms.iter().enumerate() {
                    model.jump(t, &x, i, a, &mut gam)?;
                    let target: Vec<f64> = x.iter().zip(&gam).map(|(p, q)| p + q).collect();
                    match grid.interp(slice, &target) {
                        Some(v) => {
                            let ratio = v.max(0.0) / here;
                            c.jump_weight[a][r] = atom.weight * ratio;
                            if model.nu.compensated(a) {
                                for m in 0..d {
                                    c.drift[r * d + m] += (ratio - 1.0) * gam[m] * atom.weight;
                                }
                            }
                        }
                        None => c.flagged[r] = true,
                    }
                }
                for j in 0..s {
                    if j == i {
                        continue;
                    }
                    model.hybrid_map(t, &x, i, j, &mut y)?;
                    match grid.interp(&phi[j * n..(j + 1) * n], &y) {
                        Some(v) => c.rates[(i * s + j) * n + k] *= v.max(0.0) / here,
                        None => c.flagged[r] = true,
                    }
                }
            }
        }
        Ok(c)
    }
}

/// Interpolated value of regime `i` at `x`; `None` off the grid.
fn value_at(grid: &Grid, f: &[f64], i: usize, x: &[f64], exact_node: Option<usize>) -> Option<f64> {
    let n = grid.len();
    match exact_node {
        Some(k) => Some(f[i * n + k]),
        None => grid.interp(&f[i * n..(i + 1) * n], x),
    }
}

fn generator(model: &ModelSpec, grid: &Grid, c: &NodeCoefficients, f: &[f64]) -> Result<Action> {
    check_grid(grid)?;
    let n = grid.len();
    let s = model.n_regimes();
    let d = model.d;
    if f.len() != s * n {
        return Err(Error::GridMismatch("field does not match grid and regimes".into()));
    }
    let t = c.t;
    let mut values = vec![0.0; s * n];
    let mut flagged = c.flagged.clone();
    for i in 0..s {
        let fi = &f[i * n..(i + 1) * n];
        let g1: Vec<Vec<f64>> = (0..d).map(|a| d1(grid, fi, a)).collect();
        let g2: Vec<Vec<f64>> = (0..d).map(|a| d2(grid, fi, a)).collect();
        let mixed: Vec<Vec<Vec<f64>>> = (0..d)
            .map(|m| (0..d).map(|q| if m == q { Vec::new() } else { d1(grid, &g1[q], m) }).collect())
            .collect();
        let out: Vec<Result<(f64, bool)>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let r = i * n + k;
                let x = grid.node(k);
                let mut v = 0.0;
                let mut flag = false;
                for m in 0..d {
                    v += c.drift[r * d + m] * g1[m][k];
                    for q in 0..d {
                        let a = c.cov[r * d * d + m * d + q];
                        v += 0.5 * a * if m == q { g2[m][k] } else { mixed[m][q][k] };
                    }
                }
                let mut gam = vec![0.0; d];
                for (a, _) in model.nu.atoms.iter().enumerate() {
                    model.jump(t, &x, i, a, &mut gam)?;
                    let target: Vec<f64> = x.iter().zip(&gam).map(|(p, q)| p + q).collect();
                    let shifted = match value_at(grid, f, i, &target, None) {
                        Some(val) => val,
                        None => {
                            flag = true;
                            0.0
                        }
                    };
                    let mut term = shifted - fi[k];
                    if model.nu.compensated(a) {
                        term -= (0..d).map(|m| gam[m] * g1[m][k]).sum::<f64>();
                    }
                    v += c.jump_weight[a][r] * term;
                }
                let mut y = vec![0.0; d];
                for j in 0..s {
                    if j == i {
                        continue;
                    }
                    let q = c.rates[(i * s + j) * n + k];
                    if q == 0.0 {
                        continue;
                    }
                    let node = if model.psi[i][j].is_none() {
                        Some(k)
                    } else {
                        model.hybrid_map(t, &x, i, j, &mut y)?;
                        None
                    };
                    let target = match value_at(grid, f, j, &y, node) {
                        Some(val) => val,
                        None => {
                            flag = true;
                            0.0
                        }
                    };
                    v += q * (target - fi[k]);
                }
                Ok((v, flag))
            })
            .collect();
        for (k, o) in out.into_iter().enumerate() {
            let (v, flag) = o?;
            values[i * n + k] = v;
            flagged[i * n + k] |= flag;
        }
    }
    Ok(Action { values, flagged })
}

/// An affine map `x ↦ J x + c` recovered from the model; inverted in closed form.
struct AffineMap {
    inv: Vec<f64>,
    det: f64,
}

impl AffineMap {
    /// Jacobian of `x ↦ x + displacement(x)` by central differences, exact for affine maps.
    fn probe<F: Fn(&[f64], &mut [f64]) -> Result<()>>(d: usize, at: &[f64], map: F) -> Result<Self> {
        let e = 1e-3;
        let mut jac = vec![0.0; d * d];
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        let mut p = at.to_vec();
        for q in 0..d {
            p[q] = at[q] + e;
            map(&p, &mut plus)?;
            p[q] = at[q] - e;
            map(&p, &mut minus)?;
            p[q] = at[q];
            for m in 0..d {
                jac[m * d + q] = (plus[m] - minus[m]) / (2.0 * e);
            }
        }
        let (det, inv) = crate::quad::det_inverse(&jac, d)
            .ok_or_else(|| Error::Unsupported("displacement map is not invertible".into()))?;
        Ok(AffineMap { inv, det })
    }

    /// Preimage of `y` given the image `fy` of `y` itself.
    fn preimage(&self, y: &[f64], fy: &[f64]) -> Vec<f64> {
        let d = y.len();
        (0..d).map(|m| y[m] - (0..d).map(|q| self.inv[m * d + q] * (fy[q] - y[q])).sum::<f64>()).collect()
    }
}

fn require_affine(model: &ModelSpec) -> Result<()> {
    for i in 0..model.n_regimes() {
        if model.gamma[i].iter().any(|e| e.x_degree().map_or(true, |k| k > 1)) {
            return Err(Error::Unsupported(format!(
                "adjoint needs jump amplitudes affine in x; regime {} is not",
                model.regimes.label(i)
            )));
        }
        for j in 0..model.n_regimes() {
            if let Some(v) = &model.psi[i][j] {
                if v.iter().any(|e| e.x_degree().map_or(true, |k| k > 1)) {
                    return Err(Error::Unsupported("adjoint needs hybrid maps affine in x".into()));
                }
            }
        }
    }
    Ok(())
}

fn adjoint(model: &ModelSpec, grid: &Grid, c: &NodeCoefficients, g: &[f64]) -> Result<Action> {
    check_grid(grid)?;
    require_affine(model)?;
    let n = grid.len();
    let s = model.n_regimes();
    let d = model.d;
    if g.len() != s * n {
        return Err(Error::GridMismatch("field does not match grid and regimes".into()));
    }
    let t = c.t;
    let mut values = vec![0.0; s * n];
    let mut flagged = c.flagged.clone();
    let atoms = model.nu.atoms.len();
    for i in 0..s {
        let gi = &g[i * n..(i + 1) * n];
        let mut acc = vec![0.0; n];
        for m in 0..d {
            let bg: Vec<f64> = (0..n).map(|k| c.drift[(i * n + k) * d + m] * gi[k]).collect();
            for (a, v) in acc.iter_mut().zip(d1(grid, &bg, m)) {
                *a -= v;
            }
            for q in 0..d {
                let ag: Vec<f64> = (0..n).map(|k| c.cov[(i * n + k) * d * d + m * d + q] * gi[k]).collect();
                let term = if m == q { d2(grid, &ag, m) } else { d1(grid, &d1(grid, &ag, m), q) };
                for (a, v) in acc.iter_mut().zip(term) {
                    *a += 0.5 * v;
                }
            }
        }
        let mut gam = vec![0.0; d];
        for a in 0..atoms {
            let wg: Vec<f64> = (0..n).map(|k| c.jump_weight[a][i * n + k] * gi[k]).collect();
            if model.nu.compensated(a) {
                for m in 0..d {
                    let mut gw = vec![0.0; n];
                    for k in 0..n {
                        model.jump(t, &grid.node(k), i, a, &mut gam)?;
                        gw[k] = gam[m] * wg[k];
                    }
                    for (o, v) in acc.iter_mut().zip(d1(grid, &gw, m)) {
                        *o += v;
                    }
                }
            }
            for k in 0..n {
                let y = grid.node(k);
                let jump = |x: &[f64], out: &mut [f64]| -> Result<()> {
                    model.jump(t, x, i, a, out)?;
                    for (o, p) in out.iter_mut().zip(x) {
                        *o += p;
                    }
                    Ok(())
                };
                let map = AffineMap::probe(d, &y, jump)?;
                let mut fy = vec![0.0; d];
                jump(&y, &mut fy)?;
                let pre = map.preimage(&y, &fy);
                match grid.interp(&wg, &pre) {
                    Some(v) => acc[k] += v / map.det.abs(),
                    None => flagged[i * n + k] = true,
                }
                acc[k] -= wg[k];
            }
        }
        for j in 0..s {
            if j == i {
                continue;
            }
            let qg: Vec<f64> = (0..n).map(|k| c.rates[(j * s + i) * n + k] * g[j * n + k]).collect();
            for k in 0..n {
                acc[k] -= c.rates[(i * s + j) * n + k] * gi[k];
                if model.psi[j][i].is_none() {
                    acc[k] += qg[k];
                    continue;
                }
                let y = grid.node(k);
                let psi = |x: &[f64], out: &mut [f64]| model.hybrid_map(t, x, j, i, out);
                let map = AffineMap::probe(d, &y, psi)?;
                let mut fy = vec![0.0; d];
                psi(&y, &mut fy)?;
                let pre = map.preimage(&y, &fy);
                match grid.interp(&qg, &pre) {
                    Some(v) => acc[k] += v / map.det.abs(),
                    None => flagged[i * n + k] = true,
                }
            }
        }
        values[i * n..(i + 1) * n].copy_from_slice(&acc);
    }
    Ok(Action { values, flagged })
}

/// Reference generator `L f` at time `t`.
pub fn apply_l(model: &ModelSpec, grid: &Grid, t: f64, f: &[f64]) -> Result<Action> {
    generator(model, grid, &NodeCoefficients::reference(model, grid, t)?, f)
}

/// Adjoint `L* g` at time `t`; jump amplitudes and hybrid maps must be affine in `x`.
pub fn apply_lstar(model: &ModelSpec, grid: &Grid, t: f64, g: &[f64]) -> Result<Action> {
    adjoint(model, grid, &NodeCoefficients::reference(model, grid, t)?, g)
}

/// Bridge generator with coefficients tilted by the potential slice `phi` at time `t`.
pub fn apply_bridge_l(model: &ModelSpec, grid: &Grid, t: f64, phi: &[f64], f: &[f64]) -> Result<Action> {
    generator(model, grid, &NodeCoefficients::tilted(model, grid, t, phi)?, f)
}

/// Adjoint of the bridge generator.
pub fn apply_bridge_lstar(model: &ModelSpec, grid: &Grid, t: f64, phi: &[f64], g: &[f64]) -> Result<Action> {
    adjoint(model, grid, &NodeCoefficients::tilted(model, grid, t, phi)?, g)
}

/// `sum_i sum_x f g w`.
pub fn inner_product(grid: &Grid, f: &[f64], g: &[f64]) -> f64 {
    f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * grid.weight()
}

/// Which nodes and slices enter a residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Nodes closer than this to an edge are skipped.
    pub margin: usize,
    /// Only slices with `t_lo <= t <= t_hi` are checked.
    pub t_lo: f64,
    pub t_hi: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { margin: 4, t_lo: f64::NEG_INFINITY, t_hi: f64::INFINITY }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub identity: String,
    pub grid: String,
    pub slices: usize,
    pub max: f64,
    /// Discrete `L²` norm over the checked nodes and slices.
    pub l2: f64,
    /// Largest residual per regime.
    pub per_regime_max: Vec<f64>,
    pub evaluated: usize,
    pub excluded: usize,
    /// Coarse residual over fine residual, when a refined run was supplied.
    pub ratio: Option<f64>,
}

impl ResidualReport {
    /// Attaches the refinement ratio against a run with halved grid and time steps.
    pub fn refined(mut self, fine: &ResidualReport) -> ResidualReport {
        self.ratio = Some(self.max / fine.max);
        self
    }
}

struct Accumulator {
    regimes: usize,
    max: f64,
    sq: f64,
    per: Vec<f64>,
    evaluated: usize,
    excluded: usize,
}

impl Accumulator {
    fn new(regimes: usize) -> Self {
        Accumulator { regimes, max: 0.0, sq: 0.0, per: vec![0.0; regimes], evaluated: 0, excluded: 0 }
    }

    fn add(&mut self, grid: &Grid, residual: &[f64], flagged: &[bool], margin: usize, dt: f64) {
        let n = grid.len();
        for i in 0..self.regimes {
            for k in 0..n {
                if grid.near_edge(k, margin) {
                    continue;
                }
                let r = i * n + k;
                if flagged[r] || !residual[r].is_finite() {
                    self.excluded += 1;
                    continue;
                }
                let v = residual[r].abs();
                self.max = self.max.max(v);
                self.per[i] = self.per[i].max(v);
                self.sq += v * v * grid.weight() * dt;
                self.evaluated += 1;
            }
        }
    }

    fn report(self, identity: &str, grid: &Grid, slices: usize) -> ResidualReport {
        ResidualReport {
            identity: identity.into(),
            grid: grid.spec(),
            slices,
            max: self.max,
            l2: self.sq.sqrt(),
            per_regime_max: self.per,
            evaluated: self.evaluated,
            excluded: self.excluded,
            ratio: None,
        }
    }
}

/// Second-order time derivative at interior slice `m` on a possibly nonuniform slice grid.
fn time_derivative(times: &[f64], slices: &[Vec<f64>], m: usize) -> Vec<f64> {
    let hm = times[m] - times[m - 1];
    let hp = times[m + 1] - times[m];
    let (a, b, c) = (&slices[m - 1], &slices[m], &slices[m + 1]);
    (0..b.len())
        .map(|r| ((c[r] - b[r]) * hm / hp + (b[r] - a[r]) * hp / hm) / (hm + hp))
        .collect()
}

fn interior_slices(times: &[f64], opts: &CheckOptions) -> Result<Vec<usize>> {
    if times.len() < 3 {
        return Err(Error::Config("residual checks need at least 3 slices".into()));
    }
    Ok((1..times.len() - 1).filter(|&m| times[m] >= opts.t_lo && times[m] <= opts.t_hi).collect())
}

fn check_field(field: &PotentialField, model: &ModelSpec) -> Result<()> {
    if field.grid.d() != model.d || field.regimes.count() != model.n_regimes() {
        return Err(Error::GridMismatch("field does not match the model".into()));
    }
    Ok(())
}

/// `max |∂_t phi + L phi|` over interior nodes and slices.
pub fn check_backward(phi: &PotentialField, model: &ModelSpec, opts: &CheckOptions) -> Result<ResidualReport> {
    check_field(phi, model)?;
    let ms = interior_slices(&phi.times, opts)?;
    let mut acc = Accumulator::new(model.n_regimes());
    for &m in &ms {
        let dt = time_derivative(&phi.times, &phi.slices, m);
        let l = apply_l(model, &phi.grid, phi.times[m], &phi.slices[m])?;
        let res: Vec<f64> = dt.iter().zip(&l.values).map(|(a, b)| a + b).collect();
        acc.add(&phi.grid, &res, &l.flagged, opts.margin, phi.times[m + 1] - phi.times[m]);
    }
    Ok(acc.report("backward", &phi.grid, ms.len()))
}

/// `max |−∂_s phihat + L* phihat|` over interior nodes and slices.
pub fn check_forward(phihat: &PotentialField, model: &ModelSpec, opts: &CheckOptions) -> Result<ResidualReport> {
    check_field(phihat, model)?;
    let ms = interior_slices(&phihat.times, opts)?;
    let mut acc = Accumulator::new(model.n_regimes());
    for &m in &ms {
        let dt = time_derivative(&phihat.times, &phihat.slices, m);
        let l = apply_lstar(model, &phihat.grid, phihat.times[m], &phihat.slices[m])?;
        let res: Vec<f64> = dt.iter().zip(&l.values).map(|(a, b)| b - a).collect();
        acc.add(&phihat.grid, &res, &l.flagged, opts.margin, phihat.times[m + 1] - phihat.times[m]);
    }
    Ok(acc.report("forward", &phihat.grid, ms.len()))
}

fn check_pair(phi: &PotentialField, phihat: &PotentialField, model: &ModelSpec) -> Result<()> {
    check_field(phi, model)?;
    check_field(phihat, model)?;
    if phi.grid != phihat.grid || phi.times.len() != phihat.times.len() {
        return Err(Error::GridMismatch("potentials use different grids or slices".into()));
    }
    for (a, b) in phi.times.iter().zip(&phihat.times) {
        if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
            return Err(Error::GridMismatch("potentials use different slice times".into()));
        }
    }
    Ok(())
}

/// `max |−∂_t P + L*_P̂ P|` for the product density `P = phi · phihat`.
pub fn check_bridge_forward(
    phi: &PotentialField,
    phihat: &PotentialField,
    model: &ModelSpec,
    opts: &CheckOptions,
) -> Result<ResidualReport> {
    check_pair(phi, phihat, model)?;
    let ms = interior_slices(&phi.times, opts)?;
    let product: Vec<Vec<f64>> =
        phi.slices.iter().zip(&phihat.slices).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect()).collect();
    let mut acc = Accumulator::new(model.n_regimes());
    for &m in &ms {
        let dt = time_derivative(&phi.times, &product, m);
        let l = apply_bridge_lstar(model, &phi.grid, phi.times[m], &phi.slices[m], &product[m])?;
        let res: Vec<f64> = dt.iter().zip(&l.values).map(|(a, b)| b - a).collect();
        acc.add(&phi.grid, &res, &l.flagged, opts.margin, phi.times[m + 1] - phi.times[m]);
    }
    Ok(acc.report("bridge-forward", &phi.grid, ms.len()))
}

/// Residual of the equation for `log phi`:
/// `(∂_t + L) log phi + ½|σᵀ∇log phi|² + Σ w (e^Δ − 1 − Δ) + Σ Q (e^Δ − 1 − Δ) = 0`,
/// with `Δ` the jump or switch increment of `log phi`.
pub fn check_hjb(phi: &PotentialField, model: &ModelSpec, opts: &CheckOptions) -> Result<ResidualReport> {
    check_field(phi, model)?;
    let ms = interior_slices(&phi.times, opts)?;
    let grid = &phi.grid;
    let n = grid.len();
    let s = model.n_regimes();
    let d = model.d;
    let logs: Vec<Vec<f64>> = phi.slices.iter().map(|sl| sl.iter().map(|v| v.ln()).collect()).collect();
    let mut acc = Accumulator::new(s);
    for &m in &ms {
        let t = phi.times[m];
        let lg = &logs[m];
        let dt = time_derivative(&phi.times, &logs, m);
        let l = apply_l(model, grid, t, lg)?;
        let mut res = vec![0.0; s * n];
        let mut flagged = l.flagged.clone();
        let mut sigma = vec![0.0; d * d];
        let mut gam = vec![0.0; d];
        let mut y = vec![0.0; d];
        for i in 0..s {
            let li = &lg[i * n..(i + 1) * n];
            let grads: Vec<Vec<f64>> = (0..d).map(|a| d1(grid, li, a)).collect();
            for k in 0..n {
                let r = i * n + k;
                if !li[k].is_finite() {
                    flagged[r] = true;
                    continue;
                }
                let x = grid.node(k);
                model.diffusion(t, &x, i, &mut sigma)?;
                let mut v = dt[r] + l.values[r];
                for q in 0..d {
                    let c: f64 = (0..d).map(|p| sigma[p * d + q] * grads[p][k]).sum();
                    v += 0.5 * c * c;
                }
                for (a, atom) in model.nu.atoms.iter().enumerate() {
                    model.jump(t, &x, i, a, &mut gam)?;
                    let target: Vec<f64> = x.iter().zip(&gam).map(|(p, q)| p + q).collect();
                    match grid.interp(li, &target) {
                        Some(z) => {
                            let delta = z - li[k];
                            v += atom.weight * (delta.exp() - 1.0 - delta);
                        }
                        None => flagged[r] = true,
                    }
                }
                for j in 0..s {
                    if j == i {
                        continue;
                    }
                    let q = model.rate(t, &x, i, j)?;
                    if q == 0.0 {
                        continue;
                    }
                    model.hybrid_map(t, &x, i, j, &mut y)?;
                    let other = if model.psi[i][j].is_none() {
                        Some(lg[j * n + k])
                    } else {
                        grid.interp(&lg[j * n..(j + 1) * n], &y)
                    };
                    match other {
                        Some(z) if z.is_finite() => {
                            let delta = z - li[k];
                            v += q * (delta.exp() - 1.0 - delta);
                        }
                        _ => flagged[r] = true,
                    }
                }
                res[r] = v;
            }
        }
        acc.add(grid, &res, &flagged, opts.margin, phi.times[m + 1] - phi.times[m]);
    }
    Ok(acc.report("hjb", grid, ms.len()))
}

/// Smooth test function `c_i exp(−|x − μ_i|² / (2 s²))` with analytic derivatives.
#[derive(Debug, Clone)]
pub struct Bump {
    pub centre: Vec<Vec<f64>>,
    pub scale: Vec<f64>,
    pub width: f64,
    /// Time slope: `f(t, ·) = (1 + slope t) · bump`.
    pub slope: f64,
}

impl Bump {
    pub fn random(d: usize, regimes: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        Bump {
            centre: (0..regimes).map(|_| (0..d).map(|_| rng.gen_range(lo..hi)).collect()).collect(),
            scale: (0..regimes).map(|_| rng.gen_range(0.5..2.0)).collect(),
            width: rng.gen_range(0.4..1.0),
            slope: rng.gen_range(-0.5..0.5),
        }
    }

    pub fn value(&self, t: f64, x: &[f64], i: usize) -> f64 {
        let r2: f64 = x.iter().zip(&self.centre[i]).map(|(a, b)| (a - b) * (a - b)).sum();
        (1.0 + self.slope * t) * self.scale[i] * (-r2 / (2.0 * self.width * self.width)).exp()
    }

    pub fn dt(&self, t: f64, x: &[f64], i: usize) -> f64 {
        self.value(t, x, i) * self.slope / (1.0 + self.slope * t)
    }

    pub fn grad(&self, t: f64, x: &[f64], i: usize) -> Vec<f64> {
        let f = self.value(t, x, i);
        let w2 = self.width * self.width;
        x.iter().zip(&self.centre[i]).map(|(a, b)| -f * (a - b) / w2).collect()
    }

    pub fn hessian(&self, t: f64, x: &[f64], i: usize) -> Vec<f64> {
        let d = x.len();
        let f = self.value(t, x, i);
        let w2 = self.width * self.width;
        let mut h = vec![0.0; d * d];
        for m in 0..d {
            for q in 0..d {
                let dm = x[m] - self.centre[i][m];
                let dq = x[q] - self.centre[i][q];
                h[m * d + q] = f * (dm * dq / (w2 * w2) - if m == q { 1.0 / w2 } else { 0.0 });
            }
        }
        h
    }
}

/// Checks `(∂_t + L_P̂) f = (1/phi)(∂_t + L)(phi f) − f (∂_t + L) phi / phi` at slice `m` on `count` random bumps.
///
/// `f` is differentiated analytically and `phi` by finite differences, so both sides use the
/// same derivatives of `phi`; the last term carries the discretisation residual of the backward equation.
/// Reports the largest relative discrepancy.
pub fn check_h_transform(
    phi: &PotentialField,
    model: &ModelSpec,
    m: usize,
    count: usize,
    seed: u64,
    opts: &CheckOptions,
) -> Result<ResidualReport> {
    check_field(phi, model)?;
    if m == 0 || m + 1 >= phi.times.len() {
        return Err(Error::Config("h-transform check needs an interior slice".into()));
    }
    let grid = &phi.grid;
    let n = grid.len();
    let s = model.n_regimes();
    let d = model.d;
    let t = phi.times[m];
    let sl = &phi.slices[m];
    let dphi_t = time_derivative(&phi.times, &phi.slices, m);
    let lphi = apply_l(model, grid, t, sl)?;
    let coeffs = NodeCoefficients::tilted(model, grid, t, sl)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = grid.axes[0].lower + 0.3 * (grid.axes[0].upper - grid.axes[0].lower);
    let hi = grid.axes[0].upper - 0.3 * (grid.axes[0].upper - grid.axes[0].lower);
    let mut acc = Accumulator::new(s);
    let mut b = vec![0.0; d];
    let mut cov = vec![0.0; d * d];
    let mut gam = vec![0.0; d];
    let mut y = vec![0.0; d];
    for _ in 0..count {
        let bump = Bump::random(d, s, lo, hi, &mut rng);
        let mut res = vec![0.0; s * n];
        let mut flagged = coeffs.flagged.clone();
        for i in 0..s {
            let si = &sl[i * n..(i + 1) * n];
            let g1: Vec<Vec<f64>> = (0..d).map(|a| d1(grid, si, a)).collect();
            let g2: Vec<Vec<f64>> = (0..d).map(|a| d2(grid, si, a)).collect();
            let mixed: Vec<Vec<Vec<f64>>> = (0..d)
                .map(|p| (0..d).map(|q| if p == q { g2[p].clone() } else { d1(grid, &g1[q], p) }).collect())
                .collect();
            for k in 0..n {
                let r = i * n + k;
                let ph = si[k];
                if flagged[r] || !(ph > 0.0) {
                    flagged[r] = true;
                    continue;
                }
                let x = grid.node(k);
                let f = bump.value(t, &x, i);
                let gf = bump.grad(t, &x, i);
                let hf = bump.hessian(t, &x, i);
                let ft = bump.dt(t, &x, i);
                model.drift(t, &x, i, &mut b)?;
                model.covariance(t, &x, i, &mut cov)?;
                // Left side: bridge generator with the tilted coefficients.
                let mut lhs = ft;
                for p in 0..d {
                    lhs += coeffs.drift[r * d + p] * gf[p];
                    for q in 0..d {
                        lhs += 0.5 * cov[p * d + q] * hf[p * d + q];
                    }
                }
                // Right side: product rule on phi f.
                let mut rhs = ph * ft + f * dphi_t[r];
                for p in 0..d {
                    rhs += b[p] * (f * g1[p][k] + ph * gf[p]);
                    for q in 0..d {
                        rhs += 0.5
                            * cov[p * d + q]
                            * (f * mixed[p][q][k] + g1[p][k] * gf[q] + g1[q][k] * gf[p] + ph * hf[p * d + q]);
                    }
                }
                for (a, atom) in model.nu.atoms.iter().enumerate() {
                    model.jump(t, &x, i, a, &mut gam)?;
                    let target: Vec<f64> = x.iter().zip(&gam).map(|(p, q)| p + q).collect();
                    let Some(pt) = grid.interp(si, &target) else {
                        flagged[r] = true;
                        continue;
                    };
                    let ft_shift = bump.value(t, &target, i);
                    let comp = model.nu.compensated(a);
                    let gdot: f64 = (0..d).map(|p| gam[p] * gf[p]).sum();
                    let pdot: f64 = (0..d).map(|p| gam[p] * g1[p][k]).sum();
                    lhs += coeffs.jump_weight[a][r] * (ft_shift - f - if comp { gdot } else { 0.0 });
                    rhs += atom.weight
                        * (pt.max(0.0) * ft_shift - ph * f - if comp { f * pdot + ph * gdot } else { 0.0 });
                }
                for j in 0..s {
                    if j == i {
                        continue;
                    }
                    let q = model.rate(t, &x, i, j)?;
                    if q == 0.0 {
                        continue;
                    }
                    model.hybrid_map(t, &x, i, j, &mut y)?;
                    let pj = if model.psi[i][j].is_none() {
                        Some(sl[j * n + k])
                    } else {
                        grid.interp(&sl[j * n..(j + 1) * n], &y)
                    };
                    let Some(pj) = pj else {
                        flagged[r] = true;
                        continue;
                    };
                    let fj = bump.value(t, &y, j);
                    lhs += coeffs.rates[(i * s + j) * n + k] * (fj - f);
                    rhs += q * (pj.max(0.0) * fj - ph * f);
                }
                rhs = (rhs - f * (dphi_t[r] + lphi.values[r])) / ph;
                let scale = lhs.abs().max(rhs.abs()).max(f.abs()).max(1e-300);
                res[r] = (lhs - rhs) / scale;
            }
        }
        acc.add(grid, &res, &flagged, opts.margin, 1.0);
    }
    Ok(acc.report("h-transform", grid, 1))
}

/// Pairings `⟨Lf, g⟩` and `⟨f, L*g⟩` for one test pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointPair {
    pub forward: f64,
    pub adjoint: f64,
    /// `|forward − adjoint| / max(|forward|, |adjoint|)`.
    pub relative: f64,
}

/// Relative discrepancy of the discrete adjoint on one pair of node fields at time `t`.
///
/// A node whose displaced evaluation left the grid is accepted only where the field it pairs with vanishes.
pub fn adjoint_pair(model: &ModelSpec, grid: &Grid, t: f64, f: &[f64], g: &[f64]) -> Result<AdjointPair> {
    let lf = apply_l(model, grid, t, f)?;
    let lg = apply_lstar(model, grid, t, g)?;
    let hit = |flagged: &[bool], other: &[f64]| flagged.iter().zip(other).any(|(&b, v)| b && *v != 0.0);
    if hit(&lf.flagged, g) || hit(&lg.flagged, f) {
        return Err(Error::Domain("a displaced evaluation left the grid".into()));
    }
    let forward = inner_product(grid, &lf.values, g);
    let adjoint = inner_product(grid, f, &lg.values);
    let scale = forward.abs().max(adjoint.abs()).max(1e-300);
    Ok(AdjointPair { forward, adjoint, relative: (forward - adjoint).abs() / scale })
}

/// `(1 − r²)⁴` on `r < 1`, zero outside.
fn compact_bump(x: &[f64], centre: &[f64], radius: f64) -> f64 {
    let r2: f64 = x.iter().zip(centre).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (radius * radius);
    if r2 < 1.0 {
        (1.0 - r2).powi(4)
    } else {
        0.0
    }
}

/// Adjointness on `count` random pairs of compactly supported bumps centred in the middle of the first axis.
pub fn check_adjoint(model: &ModelSpec, grid: &Grid, t: f64, count: usize, seed: u64) -> Result<Vec<AdjointPair>> {
    if grid.d() != model.d {
        return Err(Error::GridMismatch("grid dimension differs from the model".into()));
    }
    let s = model.n_regimes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = grid.nodes();
    let field = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut out = Vec::with_capacity(s * nodes.len());
        for _ in 0..s {
            let centre: Vec<f64> = grid
                .axes
                .iter()
                .map(|a| {
                    let mid = 0.5 * (a.lower + a.upper);
                    let span = a.upper - a.lower;
                    rng.gen_range(mid - 0.1 * span..mid + 0.1 * span)
                })
                .collect();
            let span = grid.axes.iter().map(|a| a.upper - a.lower).fold(f64::INFINITY, f64::min);
            let radius = rng.gen_range(0.1..0.25) * span;
            let scale = rng.gen_range(0.5..2.0);
            out.extend(nodes.iter().map(|x| scale * compact_bump(x, &centre, radius)));
        }
        out
    };
    (0..count)
        .map(|_| {
            let f = field(&mut rng);
            let g = field(&mut rng);
            adjoint_pair(model, grid, t, &f, &g)
        })
        .collect()
}
