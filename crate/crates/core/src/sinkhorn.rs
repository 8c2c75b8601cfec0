//! Multi-regime Fortet–Sinkhorn iteration for the static Schrödinger system.
//!
//! Fields live on support lists: start support rows `(i, x)` with `rho0 > 0` and end
//! support columns `(j, y)` with `rhoT > 0`, both as flat indices `regime·N + node`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Axis, Grid};
use crate::kernel::{Kernel, Marginal, Provenance};
use crate::model::RegimeSet;

/// `p_ij(0, x, T, y)` restricted to `supp(rho0) × supp(rhoT)`, with both marginals' masses.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointKernel {
    /// Flat start indices.
    pub rows: Vec<usize>,
    /// Flat end indices.
    pub cols: Vec<usize>,
    /// Densities, `rows.len() × cols.len()` row-major.
    pub values: Vec<f64>,
    /// Start masses on `rows`.
    pub mass0: Vec<f64>,
    /// End masses on `cols`.
    pub mass_t: Vec<f64>,
    /// Quadrature weight of an end cell; fields are normed with it.
    pub weight: f64,
    /// Length of the full flat index space.
    pub dim: usize,
}

impl EndpointKernel {
    pub fn new(k: &Kernel, rho0: &Marginal, rho_t: &Marginal) -> Result<Self> {
        if rho0.grid != k.grid || rho_t.grid != k.grid {
            return Err(Error::GridMismatch("marginals and kernel use different grids".into()));
        }
        if rho0.regimes.count() != k.regimes.count() || rho_t.regimes.count() != k.regimes.count() {
            return Err(Error::GridMismatch("marginals and kernel use different regime sets".into()));
        }
        Self::from_dense(&k.values, k.dim(), k.grid.weight(), &rho0.masses(), &rho_t.masses())
    }

    /// From a dense `dim × dim` kernel and full-length mass vectors.
    pub fn from_dense(values: &[f64], dim: usize, weight: f64, mass0: &[f64], mass_t: &[f64]) -> Result<Self> {
        if values.len() != dim * dim || mass0.len() != dim || mass_t.len() != dim {
            return Err(Error::GridMismatch("kernel and marginal shapes differ".into()));
        }
        if mass0.iter().chain(mass_t).any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(Error::Domain("marginal masses must be finite and nonnegative".into()));
        }
        let rows: Vec<usize> = (0..dim).filter(|&r| mass0[r] > 0.0).collect();
        let cols: Vec<usize> = (0..dim).filter(|&c| mass_t[c] > 0.0).collect();
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::Domain("a marginal has empty support".into()));
        }
        let mut restricted = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            for &c in &cols {
                let v = values[r * dim + c];
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidKernel(format!(
                        "kernel entry ({r}, {c}) = {v} is not positive on the marginal supports"
                    )));
                }
                restricted.push(v);
            }
        }
        Ok(EndpointKernel {
            mass0: rows.iter().map(|&r| mass0[r]).collect(),
            mass_t: cols.iter().map(|&c| mass_t[c]).collect(),
            rows,
            cols,
            values: restricted,
            weight,
            dim,
        })
    }

    fn entry(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols.len() + c]
    }
}

/// Pointwise reciprocal.
pub fn map_d(f: &[f64]) -> Result<Vec<f64>> {
    f.iter()
        .map(|&v| {
            if v > 0.0 {
                Ok(1.0 / v)
            } else {
                Err(Error::Domain(format!("reciprocal of non-positive value {v}")))
            }
        })
        .collect()
}

/// `sum_j int p(x, y) rhoT(y) f(y) dy` for every start support node.
pub fn map_e_rho_t(f: &[f64], k: &EndpointKernel) -> Result<Vec<f64>> {
    if f.len() != k.cols.len() {
        return Err(Error::GridMismatch("field does not live on the end support".into()));
    }
    let g: Vec<f64> = f.iter().zip(&k.mass_t).map(|(a, m)| a * m).collect();
    Ok((0..k.rows.len())
        .into_par_iter()
        .map(|r| k.values[r * k.cols.len()..(r + 1) * k.cols.len()].iter().zip(&g).map(|(p, v)| p * v).sum())
        .collect())
}

/// `sum_i int p(x, y) rho0(dx) f(x)` for every end support node.
pub fn map_e_rho0(f: &[f64], k: &EndpointKernel) -> Result<Vec<f64>> {
    if f.len() != k.rows.len() {
        return Err(Error::GridMismatch("field does not live on the start support".into()));
    }
    let g: Vec<f64> = f.iter().zip(&k.mass0).map(|(a, m)| a * m).collect();
    let nc = k.cols.len();
    Ok((0..nc)
        .into_par_iter()
        .map(|c| (0..k.rows.len()).map(|r| k.entry(r, c) * g[r]).sum())
        .collect())
}

/// One application of `E_rho0 ∘ D ∘ E_rhoT ∘ D`.
pub fn map_c(f: &[f64], k: &EndpointKernel) -> Result<Vec<f64>> {
    map_e_rho0(&map_d(&map_e_rho_t(&map_d(f)?, k)?)?, k)
}

/// Combined norm `sqrt(sum_j sum_y f(y, j)^2 w)`.
pub fn field_norm(f: &[f64], weight: f64) -> f64 {
    (f.iter().map(|v| v * v).sum::<f64>() * weight).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions { tol: 1e-10, max_iters: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub iterations: usize,
    /// `‖f_k − f_{k−1}‖` for every iteration.
    pub residuals: Vec<f64>,
    /// Largest nodewise mass error of the reconstructed start marginal.
    pub error_rho0: f64,
    /// Largest nodewise mass error of the reconstructed end marginal.
    pub error_rho_t: f64,
    pub status: SolveStatus,
}

/// Solution of the static system, each field stored over the full flat index space (zero off support).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPotentials {
    /// `phi(0, x, i)`.
    pub phi0: Vec<f64>,
    /// `phi(T, y, j)`, the terminal boundary function.
    pub phi_t: Vec<f64>,
    /// `phihat(0, dx, i)` as masses: the initial boundary function times the reference start law.
    pub phihat0: Vec<f64>,
    /// `phihat(T, y, j)`, unit norm.
    pub phihat_t: Vec<f64>,
    pub support0: Vec<usize>,
    pub support_t: Vec<usize>,
    pub weight: f64,
}

impl BoundaryPotentials {
    /// Coupling masses `phihat0(x) p(x, y) phiT(y) w` on the supports, row-major.
    pub fn coupling(&self, k: &EndpointKernel) -> Vec<f64> {
        let mut out = Vec::with_capacity(k.rows.len() * k.cols.len());
        for (r, &ri) in k.rows.iter().enumerate() {
            for (c, &ci) in k.cols.iter().enumerate() {
                out.push(self.phihat0[ri] * k.entry(r, c) * self.phi_t[ci] * self.weight);
            }
        }
        out
    }

    /// Start and end marginal masses of the coupling, over the full index space.
    pub fn reconstructed(&self, k: &EndpointKernel) -> (Vec<f64>, Vec<f64>) {
        let pi = self.coupling(k);
        let nc = k.cols.len();
        let mut m0 = vec![0.0; self.phi0.len()];
        let mut mt = vec![0.0; self.phi0.len()];
        for (r, &ri) in k.rows.iter().enumerate() {
            m0[ri] = pi[r * nc..(r + 1) * nc].iter().sum();
        }
        for (c, &ci) in k.cols.iter().enumerate() {
            mt[ci] = (0..k.rows.len()).map(|r| pi[r * nc + c]).sum();
        }
        (m0, mt)
    }
}

/// Normalised Sinkhorn iteration from `f0` (default `≡ 1`), then the potential quadruple.
pub fn iterate_c(
    k: &EndpointKernel,
    f0: Option<&[f64]>,
    opts: SinkhornOptions,
) -> Result<(BoundaryPotentials, ConvergenceReport)> {
    let nc = k.cols.len();
    let mut f: Vec<f64> = match f0 {
        Some(v) => {
            if v.len() != nc {
                return Err(Error::GridMismatch("initial field does not live on the end support".into()));
            }
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::Domain("initial field must be bounded and positive".into()));
            }
            v.to_vec()
        }
        None => vec![1.0; nc],
    };
    let norm = field_norm(&f, k.weight);
    f.iter_mut().for_each(|v| *v /= norm);
    let mut residuals = Vec::new();
    let mut status = SolveStatus::MaxIters;
    for _ in 0..opts.max_iters {
        let mut next = map_c(&f, k)?;
        let norm = field_norm(&next, k.weight);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NonConvergence(format!("iterate norm became {norm}")));
        }
        next.iter_mut().for_each(|v| *v /= norm);
        let diff: Vec<f64> = next.iter().zip(&f).map(|(a, b)| a - b).collect();
        let res = field_norm(&diff, k.weight);
        residuals.push(res);
        f = next;
        if res <= opts.tol {
            status = SolveStatus::Converged;
            break;
        }
    }
    let dim = k.dim;
    let mut bp = BoundaryPotentials {
        phi0: vec![0.0; dim],
        phi_t: vec![0.0; dim],
        phihat0: vec![0.0; dim],
        phihat_t: vec![0.0; dim],
        support0: k.rows.clone(),
        support_t: k.cols.clone(),
        weight: k.weight,
    };
    let inv_f = map_d(&f)?;
    let phi0 = map_e_rho_t(&inv_f, k)?;
    for (c, &ci) in k.cols.iter().enumerate() {
        bp.phihat_t[ci] = f[c];
        bp.phi_t[ci] = k.mass_t[c] / k.weight / f[c];
    }
    for (r, &ri) in k.rows.iter().enumerate() {
        bp.phi0[ri] = phi0[r];
        bp.phihat0[ri] = k.mass0[r] / phi0[r];
    }
    let (m0, mt) = bp.reconstructed(k);
    let err = |m: &[f64], idx: &[usize], target: &[f64]| {
        idx.iter().zip(target).map(|(&i, t)| (m[i] - t).abs()).fold(0.0, f64::max)
    };
    let report = ConvergenceReport {
        iterations: residuals.len(),
        error_rho0: err(&m0, &k.rows, &k.mass0),
        error_rho_t: err(&mt, &k.cols, &k.mass_t),
        residuals,
        status,
    };
    Ok((bp, report))
}

/// Solves the system for a grid kernel and two marginals.
pub fn solve(
    k: &Kernel,
    rho0: &Marginal,
    rho_t: &Marginal,
    opts: SinkhornOptions,
) -> Result<(BoundaryPotentials, ConvergenceReport)> {
    iterate_c(&EndpointKernel::new(k, rho0, rho_t)?, None, opts)
}

/// Flattened single-regime problem: regime `i` becomes the unit cell `[2i, 2i+1]` of an extra axis.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub kernel: Kernel,
    pub rho0: Marginal,
    pub rho_t: Marginal,
    regimes: usize,
    nodes: usize,
}

impl Embedding {
    /// Flat index in the embedded grid of `(regime, node)`.
    pub fn embedded_index(&self, regime: usize, node: usize) -> usize {
        node * 2 * self.regimes + 2 * regime
    }

    /// Maps an embedded full-length field back to `regime·N + node` layout.
    pub fn unflatten(&self, field: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.regimes * self.nodes];
        for i in 0..self.regimes {
            for k in 0..self.nodes {
                out[i * self.nodes + k] = field[self.embedded_index(i, k)];
            }
        }
        out
    }

    pub fn unflatten_potentials(&self, bp: &BoundaryPotentials) -> BoundaryPotentials {
        let back = |idx: &[usize]| {
            let mut v: Vec<usize> = idx
                .iter()
                .map(|&e| {
                    let (node, cell) = (e / (2 * self.regimes), e % (2 * self.regimes));
                    (cell / 2) * self.nodes + node
                })
                .collect();
            v.sort_unstable();
            v
        };
        BoundaryPotentials {
            phi0: self.unflatten(&bp.phi0),
            phi_t: self.unflatten(&bp.phi_t),
            phihat0: self.unflatten(&bp.phihat0),
            phihat_t: self.unflatten(&bp.phihat_t),
            support0: back(&bp.support0),
            support_t: back(&bp.support_t),
            weight: bp.weight,
        }
    }
}

pub fn embed_flatten(k: &Kernel, rho0: &Marginal, rho_t: &Marginal) -> Result<Embedding> {
    if rho0.grid != k.grid || rho_t.grid != k.grid {
        return Err(Error::GridMismatch("marginals and kernel use different grids".into()));
    }
    let s = k.regimes.count();
    let n = k.grid.len();
    let mut axes = k.grid.axes.clone();
    axes.push(Axis::new(0.0, 2.0 * s as f64, 2 * s)?);
    let grid = Grid::new(axes)?;
    let m = grid.len();
    let emb = Embedding {
        kernel: Kernel {
            grid: grid.clone(),
            regimes: RegimeSet::numbered(1),
            t: k.t,
            s: k.s,
            values: Vec::new(),
            provenance: Provenance::Composed,
            leak: vec![0.0; m],
            leak_warning: k.leak_warning,
        },
        rho0: Marginal::from_weights(&grid, &RegimeSet::numbered(1), vec![0.0; m])?,
        rho_t: Marginal::from_weights(&grid, &RegimeSet::numbered(1), vec![0.0; m])?,
        regimes: s,
        nodes: n,
    };
    let mut values = vec![0.0; m * m];
    for i in 0..s {
        for x in 0..n {
            let r = emb.embedded_index(i, x);
            for j in 0..s {
                for y in 0..n {
                    values[r * m + emb.embedded_index(j, y)] = k.at(i, x, j, y);
                }
            }
        }
    }
    let embed_masses = |mg: &Marginal| {
        let masses = mg.masses();
        let mut out = vec![0.0; m];
        for i in 0..s {
            for x in 0..n {
                out[emb.embedded_index(i, x)] = masses[i * n + x];
            }
        }
        out
    };
    let w0 = embed_masses(rho0);
    let wt = embed_masses(rho_t);
    let mut emb = emb;
    emb.kernel.values = values;
    emb.kernel.provenance = k.provenance.clone();
    emb.rho0.weights = w0;
    emb.rho_t.weights = wt;
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(values: &[f64], n: usize, w: f64, m0: &[f64], mt: &[f64]) -> EndpointKernel {
        EndpointKernel::from_dense(values, n, w, m0, mt).unwrap()
    }

    #[test]
    fn reciprocal() {
        assert_eq!(map_d(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(map_d(&[2.0, 4.0]).unwrap(), vec![0.5, 0.25]);
        let f = [3.7, 0.013, 1e5];
        let back = map_d(&map_d(&f).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&f) {
            assert!(((a - b) / b).abs() <= f64::EPSILON);
        }
        assert!(map_d(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn single_term_product() {
        let k = tiny(&[2.0], 1, 1.0, &[1.0], &[1.0]);
        assert_eq!(map_e_rho_t(&[3.0], &k).unwrap(), vec![6.0]);
        assert_eq!(map_e_rho0(&[0.0], &k).unwrap(), vec![0.0]);
    }

    #[test]
    fn constant_kernel_gives_constant_output() {
        let k = tiny(&[0.7; 9], 3, 0.5, &[0.2, 0.3, 0.5], &[0.1, 0.6, 0.3]);
        let out = map_e_rho_t(&[1.0, 2.0, 0.5], &k).unwrap();
        assert!(out.iter().all(|v| (v - out[0]).abs() < 1e-15));
    }

    #[test]
    fn summation_order_oracle() {
        let p = [1.3, 0.4, 2.2, 0.9];
        let k = tiny(&p, 2, 0.25, &[0.3, 0.7], &[0.6, 0.4]);
        let f = [1.7, 0.2];
        let out = map_e_rho0(&f, &k).unwrap();
        for c in 0..2 {
            let reversed = (0..2).rev().map(|r| f[r] * k.mass0[r] * p[r * 2 + c]).sum::<f64>();
            assert!((out[c] - reversed).abs() <= 1e-15);
        }
    }

    #[test]
    fn dirac_start_reduction() {
        let grid = Grid::parse("-2:2:8").unwrap();
        let rs = RegimeSet::numbered(2);
        let k = crate::kernel::kernel_gaussian_switching(&grid, 0.0, 1.0, &[0.0], &[1.0], &[0.0, 0.5, 0.0, 0.0]).unwrap();
        let rho0 = Marginal::dirac(&grid, &rs, 0, &[0.1]).unwrap();
        let rho_t = Marginal::from_density(&grid, &rs, |_, _| 1.0 / 8.0).unwrap();
        let ek = EndpointKernel::new(&k, &rho0, &rho_t).unwrap();
        let out = map_e_rho0(&[2.0], &ek).unwrap();
        let x0 = grid.locate(&[0.1]).unwrap();
        for (c, &ci) in ek.cols.iter().enumerate() {
            assert_eq!(out[c], k.at(0, x0, ci / 8, ci % 8) * 2.0);
        }
    }

    #[test]
    fn constant_kernel_couples_independently() {
        let m0 = [0.2, 0.3, 0.5];
        let mt = [0.1, 0.6, 0.3];
        let k = tiny(&[1.3; 9], 3, 0.5, &m0, &mt);
        let (bp, rep) = iterate_c(&k, None, SinkhornOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        let f = &bp.phihat_t;
        assert!(f.iter().all(|v| (v - f[0]).abs() < 1e-12));
        let pi = bp.coupling(&k);
        for r in 0..3 {
            for c in 0..3 {
                assert!((pi[r * 3 + c] - m0[r] * mt[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_fixed_point() {
        let k = tiny(&[2.5], 1, 0.1, &[1.0], &[1.0]);
        let (bp, rep) = iterate_c(&k, None, SinkhornOptions::default()).unwrap();
        assert!(rep.iterations <= 1);
        assert!((bp.phi0[0] * bp.phihat0[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_zero_kernel_on_support() {
        let r = EndpointKernel::from_dense(&[1.0, 0.0, 1.0, 1.0], 2, 1.0, &[0.5, 0.5], &[0.5, 0.5]);
        assert!(matches!(r, Err(Error::InvalidKernel(_))));
        assert!(EndpointKernel::from_dense(&[1.0, 0.0, 1.0, 1.0], 2, 1.0, &[0.0, 1.0], &[0.5, 0.5]).is_ok());
    }

    #[test]
    fn max_iters_is_reported() {
        let k = tiny(&[1.0, 0.2, 0.3, 1.1], 2, 1.0, &[0.5, 0.5], &[0.3, 0.7]);
        let (_, rep) = iterate_c(&k, None, SinkhornOptions { tol: 0.0, max_iters: 3 }).unwrap();
        assert_eq!(rep.status, SolveStatus::MaxIters);
        assert_eq!(rep.residuals.len(), 3);
    }

    #[test]
    fn single_regime_embedding_is_a_restructuring() {
        let grid = Grid::parse("-1:1:4").unwrap();
        let k = crate::kernel::kernel_gaussian(&grid, 0.0, 1.0, &[0.0], &[1.0]).unwrap();
        let rs = RegimeSet::numbered(1);
        let rho = Marginal::from_density(&grid, &rs, |_, _| 0.5).unwrap();
        let e = embed_flatten(&k, &rho, &rho).unwrap();
        assert_eq!(e.kernel.dim(), 8);
        assert_eq!(e.unflatten(&e.rho0.weights), rho.weights);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fixed_point_and_marginals(
            p in proptest::collection::vec(0.1f64..3.0, 9),
            a in proptest::collection::vec(0.05f64..1.0, 3),
            b in proptest::collection::vec(0.05f64..1.0, 3),
            scale in 0.1f64..10.0,
        ) {
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            let m0: Vec<f64> = a.iter().map(|v| v / sa).collect();
            let mt: Vec<f64> = b.iter().map(|v| v / sb).collect();
            let k = tiny(&p, 3, 0.3, &m0, &mt);
            let (bp, rep) = iterate_c(&k, None, SinkhornOptions::default()).unwrap();
            prop_assert_eq!(rep.status, SolveStatus::Converged);
            prop_assert!(rep.error_rho0 <= 1e-9 && rep.error_rho_t <= 1e-9);
            let f: Vec<f64> = k.cols.iter().map(|&c| bp.phihat_t[c]).collect();
            let mut cf = map_c(&f, &k).unwrap();
            let n = field_norm(&cf, k.weight);
            cf.iter_mut().for_each(|v| *v /= n);
            let diff: Vec<f64> = cf.iter().zip(&f).map(|(x, y)| x - y).collect();
            prop_assert!(field_norm(&diff, k.weight) <= 2e-10);
            // Scaling the initial guess leaves the normalised output unchanged.
            let f0 = vec![scale; 3];
            let (bp2, _) = iterate_c(&k, Some(&f0), SinkhornOptions::default()).unwrap();
            let pi1 = bp.coupling(&k);
            let pi2 = bp2.coupling(&k);
            for (x, y) in pi1.iter().zip(&pi2) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
