//! Transition kernels discretised on a grid × regime set, and grid marginals.
//!
//! A kernel is a dense `(S·N) × (S·N)` matrix with row index `i·N + x` and column
//! index `j·N + y`; entries are densities in `y`, so row sums need the quadrature weight.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::expr::CoefficientExpr;
use crate::grid::{Axis, Grid};
use crate::model::{ModelSpec, RegimeSet};
use crate::quad::{adaptive_simpson, cholesky, expm, forward_solve};
use crate::simulate::{simulate_terminal, RngStream, Start};

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Analytic,
    MonteCarlo { paths: usize, bandwidth: f64 },
    Composed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub grid: Grid,
    pub regimes: RegimeSet,
    pub t: f64,
    pub s: f64,
    pub values: Vec<f64>,
    pub provenance: Provenance,
    /// Mass per row that left the grid (Monte Carlo) or was inherited through composition.
    pub leak: Vec<f64>,
    pub leak_warning: bool,
}

/// Rows whose Monte Carlo leak exceeds this fraction raise the warning flag.
pub const LEAK_WARNING: f64 = 0.05;

impl Kernel {
    pub fn dim(&self) -> usize {
        self.grid.len() * self.regimes.count()
    }

    pub fn n(&self) -> usize {
        self.grid.len()
    }

    pub fn at(&self, i: usize, x: usize, j: usize, y: usize) -> f64 {
        let n = self.n();
        self.values[(i * n + x) * self.dim() + j * n + y]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let m = self.dim();
        &self.values[r * m..(r + 1) * m]
    }

    /// `sum_j sum_y p_ij(x, y) w`.
    pub fn row_mass(&self, r: usize) -> f64 {
        self.row(r).iter().sum::<f64>() * self.grid.weight()
    }

    /// Kernel of the identity map: unit mass in the cell of `x`, same regime.
    pub fn identity(grid: &Grid, regimes: &RegimeSet, t: f64) -> Kernel {
        let m = grid.len() * regimes.count();
        let mut values = vec![0.0; m * m];
        let inv = 1.0 / grid.weight();
        for r in 0..m {
            values[r * m + r] = inv;
        }
        Kernel {
            grid: grid.clone(),
            regimes: regimes.clone(),
            t,
            s: t,
            values,
            provenance: Provenance::Analytic,
            leak: vec![0.0; m],
            leak_warning: false,
        }
    }

    fn same_layout(&self, other: &Kernel) -> Result<()> {
        if self.grid != other.grid || self.regimes != other.regimes {
            return Err(Error::GridMismatch("kernels live on different grids or regime sets".into()));
        }
        Ok(())
    }

    /// Largest entrywise difference.
    pub fn max_abs_diff(&self, other: &Kernel) -> Result<f64> {
        self.same_layout(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Largest entrywise difference over the rows selected by `keep`.
    pub fn max_abs_diff_rows<F: Fn(usize) -> bool>(&self, other: &Kernel, keep: F) -> Result<f64> {
        self.same_layout(other)?;
        Ok((0..self.dim())
            .filter(|&r| keep(r))
            .flat_map(|r| self.row(r).iter().zip(other.row(r)).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max))
    }

    /// True when the start node of row `r` lies in the box `|x_a| <= radius` on every axis.
    pub fn row_within(&self, r: usize, radius: f64) -> bool {
        self.grid.node(r % self.n()).iter().all(|v| v.abs() <= radius)
    }

    /// Sum of entrywise differences times the quadrature weight, maximised over rows.
    pub fn l1_row_diff(&self, other: &Kernel) -> Result<f64> {
        self.same_layout(other)?;
        let m = self.dim();
        let w = self.grid.weight();
        Ok((0..m)
            .map(|r| self.row(r).iter().zip(other.row(r)).map(|(a, b)| (a - b).abs()).sum::<f64>() * w)
            .fold(0.0, f64::max))
    }

    /// Hex SHA-256 of the serialised kernel.
    pub fn content_hash(&self) -> String {
        let body = encode_body(self);
        hex(&Sha256::digest(&body))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_times(t: f64, s: f64) -> Result<f64> {
    if !(s > t) {
        return Err(Error::Config(format!("kernel needs t < s, got t={t}, s={s}")));
    }
    Ok(s - t)
}

fn covariance(sigma: &[f64], d: usize, tau: f64) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for m in 0..d {
        for n in 0..d {
            c[m * d + n] = tau * (0..d).map(|k| sigma[m * d + k] * sigma[n * d + k]).sum::<f64>();
        }
    }
    c
}

/// Gaussian density with mean `x + b·tau` and covariance `sigma sigma^T tau` at `y`.
pub fn gaussian_density(x: &[f64], y: &[f64], b: &[f64], chol: &[f64], log_norm: f64, tau: f64) -> f64 {
    let d = x.len();
    let r: Vec<f64> = (0..d).map(|m| (y[m] - x[m]) - b[m] * tau).collect();
    let v = forward_solve(chol, &r, d);
    (log_norm - 0.5 * v.iter().map(|a| a * a).sum::<f64>()).exp()
}

fn gaussian_values(grid: &Grid, tau: f64, b: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    let d = grid.d();
    if b.len() != d || sigma.len() != d * d {
        return Err(Error::Config("drift or diffusion has the wrong shape".into()));
    }
    let cov = covariance(sigma, d, tau);
    let chol = cholesky(&cov, d).ok_or_else(|| Error::Domain("covariance is singular".into()))?;
    let log_det: f64 = (0..d).map(|i| 2.0 * chol[i * d + i].ln()).sum();
    let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    let n = grid.len();
    let nodes = grid.nodes();
    let mut values = vec![0.0; n * n];
    values.par_chunks_mut(n).enumerate().for_each(|(xk, row)| {
        for (yk, v) in row.iter_mut().enumerate() {
            *v = gaussian_density(&nodes[xk], &nodes[yk], b, &chol, log_norm, tau);
        }
    });
    Ok(values)
}

/// Pointwise Gaussian kernel for constant drift `b` and diffusion `sigma` (row-major).
pub fn kernel_gaussian(grid: &Grid, t: f64, s: f64, b: &[f64], sigma: &[f64]) -> Result<Kernel> {
    let tau = check_times(t, s)?;
    let values = gaussian_values(grid, tau, b, sigma)?;
    Ok(Kernel {
        grid: grid.clone(),
        regimes: RegimeSet::numbered(1),
        t,
        s,
        values,
        provenance: Provenance::Analytic,
        leak: vec![0.0; grid.len()],
        leak_warning: false,
    })
}

/// `P(a < Z < b)` for a standard normal, accurate in both tails.
fn normal_interval(a: f64, b: f64) -> f64 {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    if a >= 0.0 {
        0.5 * (erfc(a * r) - erfc(b * r))
    } else if b <= 0.0 {
        0.5 * (erfc(-b * r) - erfc(-a * r))
    } else {
        1.0 - 0.5 * erfc(b * r) - 0.5 * erfc(-a * r)
    }
}

/// Probability that a 1-D Gaussian step of mean `mu`, std `sd` lands in the cell at node offset `off`.
fn cell_probability(axis: &Axis, off: i64, mu: f64, sd: f64) -> f64 {
    let h = axis.h();
    let lo = (off as f64 - 0.5) * h - mu;
    let hi = (off as f64 + 0.5) * h - mu;
    if sd == 0.0 {
        return if lo <= 0.0 && 0.0 < hi { 1.0 } else { 0.0 };
    }
    normal_interval(lo / sd, hi / sd)
}

/// Per-axis cell probabilities indexed by offset `y - x + (n - 1)`.
fn cell_tables(grid: &Grid, tau: f64, b: &[f64], sd: &[f64]) -> Vec<Vec<f64>> {
    grid.axes
        .iter()
        .enumerate()
        .map(|(a, ax)| {
            let n = ax.n as i64;
            (-(n - 1)..n).map(|off| cell_probability(ax, off, b[a] * tau, sd[a] * tau.sqrt())).collect()
        })
        .collect()
}

fn diagonal_sd(sigma: &[f64], d: usize) -> Result<Vec<f64>> {
    let cov = covariance(sigma, d, 1.0);
    for m in 0..d {
        for n in 0..d {
            if m != n && cov[m * d + n].abs() > 1e-14 {
                return Err(Error::Unsupported("cell-averaged Gaussian kernels need a diagonal covariance".into()));
            }
        }
    }
    Ok((0..d).map(|m| cov[m * d + m].sqrt()).collect())
}

/// Cell-averaged Gaussian density: the exact mass of each target cell divided by its volume.
///
/// Rows conserve mass up to what leaves the grid, at any step length.
pub fn kernel_gaussian_cells(grid: &Grid, t: f64, s: f64, b: &[f64], sigma: &[f64]) -> Result<Kernel> {
    let tau = check_times(t, s)?;
    let d = grid.d();
    let sd = diagonal_sd(sigma, d)?;
    if sd.iter().any(|v| *v <= 0.0) {
        return Err(Error::Domain("covariance is singular".into()));
    }
    let tables = cell_tables(grid, tau, b, &sd);
    let values = offset_kernel(grid, |off| {
        off.iter().enumerate().map(|(a, &o)| tables[a][(o + grid.axes[a].n as i64 - 1) as usize]).product()
    });
    Ok(Kernel {
        grid: grid.clone(),
        regimes: RegimeSet::numbered(1),
        t,
        s,
        values,
        provenance: Provenance::Analytic,
        leak: vec![0.0; grid.len()],
        leak_warning: false,
    })
}

/// Fills an `N × N` kernel whose entry depends only on the node offset; `mass(off)` is a cell probability.
fn offset_kernel<F: Fn(&[i64]) -> f64 + Sync>(grid: &Grid, mass: F) -> Vec<f64> {
    let n = grid.len();
    let inv_w = 1.0 / grid.weight();
    let idx: Vec<Vec<usize>> = (0..n).map(|k| grid.multi_index(k)).collect();
    let mut values = vec![0.0; n * n];
    values.par_chunks_mut(n).enumerate().for_each(|(xk, row)| {
        let mut off = vec![0i64; grid.d()];
        for (yk, v) in row.iter_mut().enumerate() {
            for a in 0..grid.d() {
                off[a] = idx[yk][a] as i64 - idx[xk][a] as i64;
            }
            *v = mass(&off) * inv_w;
        }
    });
    values
}

/// Exact kernel of a Brownian motion with drift whose regime is an independent Markov chain
/// with constant generator `rates` (off-diagonal entries, row-major `S × S`).
pub fn kernel_gaussian_switching(
    grid: &Grid,
    t: f64,
    s: f64,
    b: &[f64],
    sigma: &[f64],
    rates: &[f64],
) -> Result<Kernel> {
    let tau = check_times(t, s)?;
    let sr = (rates.len() as f64).sqrt() as usize;
    if sr * sr != rates.len() || sr == 0 {
        return Err(Error::Config("rate matrix must be square".into()));
    }
    let mut gen = rates.to_vec();
    for i in 0..sr {
        if (0..sr).any(|j| j != i && gen[i * sr + j] < 0.0) {
            return Err(Error::Model("switching rates must be nonnegative".into()));
        }
        gen[i * sr + i] = -(0..sr).filter(|&j| j != i).map(|j| gen[i * sr + j]).sum::<f64>();
    }
    let p: Vec<f64> = expm(&gen.iter().map(|v| v * tau).collect::<Vec<_>>(), sr);
    let g = gaussian_values(grid, tau, b, sigma)?;
    let n = grid.len();
    let m = n * sr;
    let mut values = vec![0.0; m * m];
    values.par_chunks_mut(m).enumerate().for_each(|(r, row)| {
        let (i, x) = (r / n, r % n);
        for j in 0..sr {
            let pij = p[i * sr + j].max(0.0);
            for y in 0..n {
                row[j * n + y] = pij * g[x * n + y];
            }
        }
    });
    Ok(Kernel {
        grid: grid.clone(),
        regimes: RegimeSet::numbered(sr),
        t,
        s,
        values,
        provenance: Provenance::Analytic,
        leak: vec![0.0; m],
        leak_warning: false,
    })
}

/// `int_t^s V(r) dr` by adaptive Simpson; negative rates are rejected.
pub fn integrate_rate(v: &CoefficientExpr, t: f64, s: f64, tol: f64) -> Result<f64> {
    if let Some(c) = v.as_constant() {
        if c < 0.0 {
            return Err(Error::Model(format!("killing rate {c} is negative")));
        }
        return Ok(c * (s - t));
    }
    adaptive_simpson(
        |r| {
            let val = v.eval_t(r)?;
            if val < 0.0 {
                Err(Error::Model(format!("killing rate {val} is negative at t={r}")))
            } else {
                Ok(val)
            }
        },
        t,
        s,
        tol,
        40,
    )
}

/// Multiplies a single-regime kernel by the survival factor `exp(-int_t^s V)`.
pub fn kernel_killing(base: &Kernel, v: &CoefficientExpr) -> Result<Kernel> {
    if base.regimes.count() != 1 {
        return Err(Error::Config("killing applies to single-regime kernels".into()));
    }
    let factor = (-integrate_rate(v, base.t, base.s, 1e-10)?).exp();
    let mut out = base.clone();
    out.values.iter_mut().for_each(|p| *p *= factor);
    Ok(out)
}

/// Monte Carlo kernel: `paths_per_node` reference paths from every `(x, i)`, binned at time `s`.
pub fn kernel_mc(
    model: &ModelSpec,
    grid: &Grid,
    t: f64,
    s: f64,
    paths_per_node: usize,
    dt: f64,
    seed: u64,
) -> Result<Kernel> {
    check_times(t, s)?;
    if paths_per_node < 1000 {
        return Err(Error::Config("Monte Carlo kernels need at least 1000 paths per node".into()));
    }
    if grid.d() != model.d {
        return Err(Error::GridMismatch("grid dimension differs from the model".into()));
    }
    let n = grid.len();
    let sc = model.n_regimes();
    let m = n * sc;
    let inv = 1.0 / (paths_per_node as f64 * grid.weight());
    let rows: Vec<Result<(Vec<f64>, f64)>> = (0..m)
        .into_par_iter()
        .map(|r| {
            let (i, k) = (r / n, r % n);
            let start = Start::new(t, grid.node(k), i);
            let mut row = vec![0.0; m];
            let mut leaked = 0usize;
            for p in 0..paths_per_node {
                let mut rng = RngStream::new(seed, (r * paths_per_node + p) as u64).rng();
                let (y, j) = simulate_terminal(model, &start, s, dt, &mut rng)?;
                match grid.locate(&y) {
                    Some(c) => row[j * n + c] += inv,
                    None => leaked += 1,
                }
            }
            Ok((row, leaked as f64 / paths_per_node as f64))
        })
        .collect();
    let mut values = Vec::with_capacity(m * m);
    let mut leak = Vec::with_capacity(m);
    for r in rows {
        let (row, l) = r?;
        values.extend(row);
        leak.push(l);
    }
    let leak_warning = leak.iter().any(|l| *l > LEAK_WARNING);
    let bandwidth = grid.axes.iter().map(|a| a.h()).fold(0.0, f64::max);
    Ok(Kernel {
        grid: grid.clone(),
        regimes: model.regimes.clone(),
        t,
        s,
        values,
        provenance: Provenance::MonteCarlo { paths: paths_per_node, bandwidth },
        leak,
        leak_warning,
    })
}

/// Chapman–Kolmogorov product `sum_iota sum_w p1(x, w) w_w p2(w, y)`.
pub fn compose(k1: &Kernel, k2: &Kernel) -> Result<Kernel> {
    k1.same_layout(k2)?;
    if (k1.s - k2.t).abs() > 1e-12 * (1.0 + k1.s.abs()) {
        return Err(Error::GridMismatch(format!("cannot compose kernels ending at {} and starting at {}", k1.s, k2.t)));
    }
    let m = k1.dim();
    let w = k1.grid.weight();
    let mut values = vec![0.0; m * m];
    values.par_chunks_mut(m).enumerate().for_each(|(r, out)| {
        let a = k1.row(r);
        for (k, &ak) in a.iter().enumerate() {
            if ak == 0.0 {
                continue;
            }
            let c = ak * w;
            for (o, bv) in out.iter_mut().zip(k2.row(k)) {
                *o += c * bv;
            }
        }
    });
    let leak = (0..m)
        .map(|r| k1.leak[r] + k1.row(r).iter().zip(&k2.leak).map(|(a, l)| a * w * l).sum::<f64>())
        .collect::<Vec<_>>();
    Ok(Kernel {
        grid: k1.grid.clone(),
        regimes: k1.regimes.clone(),
        t: k1.t,
        s: k2.s,
        values,
        provenance: Provenance::Composed,
        leak_warning: k1.leak_warning || k2.leak_warning,
        leak,
    })
}

const MAGIC: &[u8; 8] = b"RBKERNEL";
const VERSION: u32 = 1;

fn encode_body(k: &Kernel) -> Vec<u8> {
    let m = k.dim();
    let mut out = Vec::with_capacity(64 + 8 * (m * m + m));
    out.extend((k.regimes.count() as u32).to_le_bytes());
    for l in k.regimes.labels() {
        out.extend((l.len() as u32).to_le_bytes());
        out.extend(l.as_bytes());
    }
    out.extend((k.grid.d() as u32).to_le_bytes());
    for a in &k.grid.axes {
        out.extend(a.lower.to_le_bytes());
        out.extend(a.upper.to_le_bytes());
        out.extend((a.n as u64).to_le_bytes());
    }
    out.extend(k.t.to_le_bytes());
    out.extend(k.s.to_le_bytes());
    let (tag, paths, bw) = match k.provenance {
        Provenance::Analytic => (0u8, 0u64, 0.0),
        Provenance::MonteCarlo { paths, bandwidth } => (1, paths as u64, bandwidth),
        Provenance::Composed => (2, 0, 0.0),
    };
    out.push(tag);
    out.extend(paths.to_le_bytes());
    out.extend(bw.to_le_bytes());
    out.push(k.leak_warning as u8);
    for v in k.values.iter().chain(&k.leak) {
        out.extend(v.to_le_bytes());
    }
    out
}

/// Serialises as magic, version, SHA-256 of the body, then the body (dims, then little-endian values).
pub fn encode_kernel(k: &Kernel) -> Vec<u8> {
    let body = encode_body(k);
    let mut out = Vec::with_capacity(body.len() + 44);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(Sha256::digest(&body));
    out.extend(body);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("kernel file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_kernel(buf: &[u8]) -> Result<Kernel> {
    if buf.len() < 44 || &buf[..8] != MAGIC {
        return Err(Error::Format("not a kernel file".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported kernel file version {version}")));
    }
    let body = &buf[44..];
    if Sha256::digest(body).as_slice() != &buf[12..44] {
        return Err(Error::Format("kernel file hash mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    let sc = c.u32()? as usize;
    let mut labels = Vec::with_capacity(sc);
    for _ in 0..sc {
        let len = c.u32()? as usize;
        labels.push(String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Format("bad regime label".into()))?);
    }
    let d = c.u32()? as usize;
    let mut axes = Vec::with_capacity(d);
    for _ in 0..d {
        let lo = c.f64()?;
        let hi = c.f64()?;
        let n = c.u64()? as usize;
        axes.push(Axis::new(lo, hi, n)?);
    }
    let grid = Grid::new(axes)?;
    let t = c.f64()?;
    let s = c.f64()?;
    let tag = c.take(1)?[0];
    let paths = c.u64()? as usize;
    let bandwidth = c.f64()?;
    let provenance = match tag {
        0 => Provenance::Analytic,
        1 => Provenance::MonteCarlo { paths, bandwidth },
        2 => Provenance::Composed,
        _ => return Err(Error::Format("unknown kernel provenance".into())),
    };
    let leak_warning = c.take(1)?[0] != 0;
    let m = grid.len() * sc;
    let mut values = Vec::with_capacity(m * m);
    for _ in 0..m * m {
        values.push(c.f64()?);
    }
    let mut leak = Vec::with_capacity(m);
    for _ in 0..m {
        leak.push(c.f64()?);
    }
    Ok(Kernel { grid, regimes: RegimeSet::new(labels)?, t, s, values, provenance, leak, leak_warning })
}

pub fn write_kernel(path: &Path, k: &Kernel) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_kernel(k))?;
    Ok(())
}

pub fn read_kernel(path: &Path) -> Result<Kernel> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_kernel(&buf)
}

/// On-disk kernel cache keyed by a hash of whatever determines the kernel.
pub struct KernelCache {
    dir: PathBuf,
}

impl KernelCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(KernelCache { dir })
    }

    pub fn key(material: &str) -> String {
        hex(&Sha256::digest(material.as_bytes()))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    pub fn get_or_build<F: FnOnce() -> Result<Kernel>>(&self, material: &str, build: F) -> Result<Kernel> {
        let path = self.path(&Self::key(material));
        if path.exists() {
            if let Ok(k) = read_kernel(&path) {
                return Ok(k);
            }
        }
        let k = build()?;
        let tmp = path.with_extension("partial");
        write_kernel(&tmp, &k)?;
        std::fs::rename(&tmp, &path)?;
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiracMass {
    pub regime: usize,
    pub node: usize,
    pub mass: f64,
}

/// A measure on grid × regimes: cell masses (density times weight) plus point masses at nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub grid: Grid,
    pub regimes: RegimeSet,
    /// Indexed `i·N + node`.
    pub weights: Vec<f64>,
    pub dirac: Vec<DiracMass>,
}

impl Marginal {
    pub fn from_weights(grid: &Grid, regimes: &RegimeSet, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() * regimes.count() {
            return Err(Error::GridMismatch("marginal weights do not match grid and regimes".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Domain("marginal weights must be finite and nonnegative".into()));
        }
        Ok(Marginal { grid: grid.clone(), regimes: regimes.clone(), weights, dirac: Vec::new() })
    }

    /// Cell masses `f(i, x) · w` from a density.
    pub fn from_density<F: Fn(usize, &[f64]) -> f64>(grid: &Grid, regimes: &RegimeSet, f: F) -> Result<Self> {
        let w = grid.weight();
        let n = grid.len();
        let weights = (0..n * regimes.count()).map(|r| f(r / n, &grid.node(r % n)) * w).collect();
        Marginal::from_weights(grid, regimes, weights)
    }

    /// Unit point mass at the node of the cell containing `x`.
    pub fn dirac(grid: &Grid, regimes: &RegimeSet, regime: usize, x: &[f64]) -> Result<Self> {
        let node = grid.locate(x).ok_or_else(|| Error::Domain(format!("point {x:?} is off the grid")))?;
        Ok(Marginal {
            grid: grid.clone(),
            regimes: regimes.clone(),
            weights: vec![0.0; grid.len() * regimes.count()],
            dirac: vec![DiracMass { regime, node, mass: 1.0 }],
        })
    }

    pub fn mass(&self, i: usize, node: usize) -> f64 {
        let n = self.grid.len();
        self.weights[i * n + node]
            + self.dirac.iter().filter(|d| d.regime == i && d.node == node).map(|d| d.mass).sum::<f64>()
    }

    /// All masses, indexed `i·N + node`.
    pub fn masses(&self) -> Vec<f64> {
        let n = self.grid.len();
        let mut m = self.weights.clone();
        for d in &self.dirac {
            m[d.regime * n + d.node] += d.mass;
        }
        m
    }

    pub fn total_mass(&self) -> f64 {
        self.masses().iter().sum()
    }

    pub fn regime_mass(&self, i: usize) -> f64 {
        let n = self.grid.len();
        self.masses()[i * n..(i + 1) * n].iter().sum()
    }

    /// Mass divided by the cell volume.
    pub fn densities(&self) -> Vec<f64> {
        let w = self.grid.weight();
        self.masses().iter().map(|m| m / w).collect()
    }

    /// Flat indices with positive mass.
    pub fn support(&self) -> Vec<usize> {
        self.masses().iter().enumerate().filter(|(_, m)| **m > 0.0).map(|(k, _)| k).collect()
    }

    pub fn normalized(mut self) -> Result<Self> {
        let total = self.total_mass();
        if !(total > 0.0) {
            return Err(Error::Domain("cannot normalise a zero measure".into()));
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        self.dirac.iter_mut().for_each(|d| d.mass /= total);
        Ok(self)
    }

    /// Half the L1 distance between mass vectors.
    pub fn total_variation(&self, other: &Marginal) -> Result<f64> {
        if self.grid != other.grid || self.regimes.count() != other.regimes.count() {
            return Err(Error::GridMismatch("marginals live on different grids".into()));
        }
        Ok(0.5 * self.masses().iter().zip(other.masses()).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

/// How to build a kernel for a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMethod {
    /// Closed form when the model allows one, Monte Carlo otherwise.
    Auto,
    Gaussian,
    GaussianCells,
    Switching,
    MonteCarlo,
}

impl KernelMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(KernelMethod::Auto),
            "gaussian" => Ok(KernelMethod::Gaussian),
            "gaussian-cells" | "cells" => Ok(KernelMethod::GaussianCells),
            "switching" => Ok(KernelMethod::Switching),
            "mc" | "monte-carlo" => Ok(KernelMethod::MonteCarlo),
            _ => Err(Error::Config(format!("unknown kernel method `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelMethod::Auto => "auto",
            KernelMethod::Gaussian => "gaussian",
            KernelMethod::GaussianCells => "gaussian-cells",
            KernelMethod::Switching => "switching",
            KernelMethod::MonteCarlo => "mc",
        }
    }
}

/// Monte Carlo settings for [`kernel_for_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub paths_per_node: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings { paths_per_node: 1000, dt: 0.01, seed: 0 }
    }
}

/// Shared constant drift and diffusion of every regime, when there are no jumps and no hybrid maps.
fn shared_constant_coefficients(model: &ModelSpec) -> Option<(Vec<f64>, Vec<f64>)> {
    let no_jumps = model.nu.is_empty() || model.gamma.iter().flatten().all(|e| e.is_zero());
    if !no_jumps || model.has_hybrid_jumps() || !model.constant_diffusion() {
        return None;
    }
    let consts = |v: &[CoefficientExpr]| v.iter().map(|e| e.as_constant()).collect::<Option<Vec<f64>>>();
    let b = consts(&model.b[0])?;
    let sigma = consts(&model.sigma[0])?;
    for i in 1..model.n_regimes() {
        if consts(&model.b[i])? != b || consts(&model.sigma[i])? != sigma {
            return None;
        }
    }
    Some((b, sigma))
}

fn constant_rates(model: &ModelSpec) -> Option<Vec<f64>> {
    let s = model.n_regimes();
    let mut rates = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            if let Some(e) = &model.q[i][j] {
                rates[i * s + j] = e.as_constant()?;
            }
        }
    }
    Some(rates)
}

/// Kernel over `[t, s]` for `model` by the requested method.
pub fn kernel_for_model(
    model: &ModelSpec,
    grid: &Grid,
    t: f64,
    s: f64,
    method: KernelMethod,
    mc: &McSettings,
) -> Result<Kernel> {
    if grid.d() != model.d {
        return Err(Error::GridMismatch("grid dimension differs from the model".into()));
    }
    let shared = shared_constant_coefficients(model);
    let rates = constant_rates(model);
    let closed = |cells: bool| -> Result<Kernel> {
        let (b, sigma) = shared
            .clone()
            .ok_or_else(|| Error::Unsupported("closed-form kernels need constant, shared b and sigma without jumps".into()))?;
        if model.n_regimes() == 1 {
            return if cells { kernel_gaussian_cells(grid, t, s, &b, &sigma) } else { kernel_gaussian(grid, t, s, &b, &sigma) };
        }
        let rates = rates.clone().ok_or_else(|| Error::Unsupported("closed-form kernels need constant switching rates".into()))?;
        let mut k = kernel_gaussian_switching(grid, t, s, &b, &sigma, &rates)?;
        k.regimes = model.regimes.clone();
        Ok(k)
    };
    let mut k = match method {
        KernelMethod::Gaussian | KernelMethod::Switching => closed(false)?,
        KernelMethod::GaussianCells => closed(true)?,
        KernelMethod::MonteCarlo => kernel_mc(model, grid, t, s, mc.paths_per_node, mc.dt, mc.seed)?,
        KernelMethod::Auto => {
            if shared.is_some() && rates.is_some() {
                closed(false)?
            } else {
                kernel_mc(model, grid, t, s, mc.paths_per_node, mc.dt, mc.seed)?
            }
        }
    };
    k.regimes = model.regimes.clone();
    Ok(k)
}
