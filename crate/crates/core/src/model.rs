//! Regime-switching jump diffusion: coefficients, jump measure and switching layout.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::expr::{CoefficientExpr, Scope};

/// Jumps with `|z|` at most this radius are compensated when the model asks for it.
pub const SMALL_JUMP_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegimeSet {
    labels: Vec<String>,
}

impl RegimeSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Model("at least one regime is required".into()));
        }
        for (k, l) in labels.iter().enumerate() {
            if labels[..k].contains(l) {
                return Err(Error::Model(format!("duplicate regime label `{l}`")));
            }
        }
        Ok(RegimeSet { labels })
    }

    /// Regimes labelled `1..=count`.
    pub fn numbered(count: usize) -> Self {
        RegimeSet { labels: (1..=count.max(1)).map(|k| k.to_string()).collect() }
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub z: Vec<f64>,
    pub weight: f64,
}

impl Atom {
    pub fn is_small(&self) -> bool {
        self.z.iter().map(|v| v * v).sum::<f64>().sqrt() <= SMALL_JUMP_RADIUS
    }
}

/// Finite atomised jump measure.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMeasure {
    pub atoms: Vec<Atom>,
    pub dim: usize,
    pub compensate_small: bool,
}

impl JumpMeasure {
    pub fn none() -> Self {
        JumpMeasure { atoms: Vec::new(), dim: 0, compensate_small: false }
    }

    pub fn new(atoms: Vec<Atom>, compensate_small: bool) -> Result<Self> {
        let dim = atoms.first().map_or(0, |a| a.z.len());
        for a in &atoms {
            if a.z.len() != dim {
                return Err(Error::Model("jump atoms have inconsistent dimension".into()));
            }
            if !(a.weight >= 0.0 && a.weight.is_finite()) {
                return Err(Error::Model(format!("jump weight {} must be finite and nonnegative", a.weight)));
            }
            if a.z.iter().all(|v| *v == 0.0) {
                return Err(Error::Model("jump measure may not charge z = 0".into()));
            }
        }
        Ok(JumpMeasure { atoms, dim, compensate_small })
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Whether atom `a` enters the compensator.
    pub fn compensated(&self, a: usize) -> bool {
        self.compensate_small && self.atoms[a].is_small()
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub d: usize,
    pub regimes: RegimeSet,
    pub horizon: f64,
    /// `b[i][m]`, drift component `m` in regime `i`.
    pub b: Vec<Vec<CoefficientExpr>>,
    /// `sigma[i][m * d + n]`, row-major `d x d`.
    pub sigma: Vec<Vec<CoefficientExpr>>,
    /// `gamma[i][m]`, jump amplitude component over `(t, x, z)`.
    pub gamma: Vec<Vec<CoefficientExpr>>,
    pub nu: JumpMeasure,
    /// `q[i][j]`; `None` means rate zero. Diagonal entries are always `None`.
    pub q: Vec<Vec<Option<CoefficientExpr>>>,
    /// `psi[i][j]`; `None` means the identity map.
    pub psi: Vec<Vec<Option<Vec<CoefficientExpr>>>>,
    pub params: BTreeMap<String, f64>,
}

/// Incremental construction of a [`ModelSpec`] from expression sources.
pub struct ModelBuilder {
    model: ModelSpec,
    scope: Scope,
    pending: Option<Error>,
}

impl ModelBuilder {
    pub fn params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.scope.params = params.clone();
        self.model.params = params;
        self
    }

    pub fn jumps(mut self, nu: JumpMeasure) -> Self {
        self.scope.jump_dim = nu.dim;
        self.model.nu = nu;
        self
    }

    fn parse(&mut self, src: &str) -> Option<CoefficientExpr> {
        match CoefficientExpr::parse(src, &self.scope) {
            Ok(e) => Some(e),
            Err(e) => {
                self.pending.get_or_insert(e);
                None
            }
        }
    }

    fn parse_vec(&mut self, srcs: &[&str], len: usize, what: &str) -> Option<Vec<CoefficientExpr>> {
        if srcs.len() != len {
            self.pending
                .get_or_insert(Error::Model(format!("{what} needs {len} entries, got {}", srcs.len())));
            return None;
        }
        srcs.iter().map(|s| self.parse(s)).collect()
    }

    pub fn drift(mut self, regime: usize, srcs: &[&str]) -> Self {
        if let Some(v) = self.parse_vec(srcs, self.model.d, "drift") {
            self.model.b[regime] = v;
        }
        self
    }

    /// Row-major `d x d` diffusion matrix.
    pub fn diffusion(mut self, regime: usize, srcs: &[&str]) -> Self {
        let d = self.model.d;
        if let Some(v) = self.parse_vec(srcs, d * d, "diffusion") {
            self.model.sigma[regime] = v;
        }
        self
    }

    pub fn jump_amplitude(mut self, regime: usize, srcs: &[&str]) -> Self {
        if let Some(v) = self.parse_vec(srcs, self.model.d, "jump amplitude") {
            self.model.gamma[regime] = v;
        }
        self
    }

    pub fn rate(mut self, from: usize, to: usize, src: &str) -> Self {
        if from == to {
            self.pending.get_or_insert(Error::Model("diagonal switching rates are implied".into()));
            return self;
        }
        if let Some(e) = self.parse(src) {
            self.model.q[from][to] = Some(e);
        }
        self
    }

    pub fn rate_expr(mut self, from: usize, to: usize, e: CoefficientExpr) -> Self {
        self.model.q[from][to] = Some(e);
        self
    }

    pub fn hybrid_map(mut self, from: usize, to: usize, srcs: &[&str]) -> Self {
        if from == to {
            self.pending.get_or_insert(Error::Model("psi_ii must be the identity".into()));
            return self;
        }
        if let Some(v) = self.parse_vec(srcs, self.model.d, "hybrid-jump map") {
            self.model.psi[from][to] = Some(v);
        }
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        if let Some(e) = self.pending {
            return Err(e);
        }
        self.model.validate()?;
        Ok(self.model)
    }
}

impl ModelSpec {
    pub fn builder(d: usize, regimes: RegimeSet, horizon: f64) -> ModelBuilder {
        let s = regimes.count();
        let model = ModelSpec {
            d,
            regimes,
            horizon,
            b: vec![vec![CoefficientExpr::zero(); d]; s],
            sigma: vec![vec![CoefficientExpr::zero(); d * d]; s],
            gamma: vec![vec![CoefficientExpr::zero(); d]; s],
            nu: JumpMeasure::none(),
            q: vec![vec![None; s]; s],
            psi: vec![vec![None; s]; s],
            params: BTreeMap::new(),
        };
        ModelBuilder { model, scope: Scope::new(d), pending: None }
    }

    pub fn scope(&self) -> Scope {
        Scope::new(self.d).with_jumps(self.nu.dim).with_params(self.params.clone())
    }

    pub fn n_regimes(&self) -> usize {
        self.regimes.count()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_regimes();
        if self.d == 0 {
            return Err(Error::Model("dimension must be at least 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Model("horizon must be positive".into()));
        }
        let shapes_ok = self.b.len() == s
            && self.sigma.len() == s
            && self.gamma.len() == s
            && self.q.len() == s
            && self.psi.len() == s
            && self.b.iter().all(|v| v.len() == self.d)
            && self.sigma.iter().all(|v| v.len() == self.d * self.d)
            && self.gamma.iter().all(|v| v.len() == self.d)
            && self.q.iter().all(|r| r.len() == s)
            && self.psi.iter().all(|r| r.len() == s);
        if !shapes_ok {
            return Err(Error::Model("coefficient shapes do not match d and regime count".into()));
        }
        for i in 0..s {
            if self.q[i][i].is_some() || self.psi[i][i].is_some() {
                return Err(Error::Model("diagonal rate or hybrid map given; psi_ii is the identity".into()));
            }
            let mut others = self.b[i].iter().chain(&self.sigma[i]);
            if let Some(e) = others.find(|e| e.depends_on_z()) {
                return Err(Error::Model(format!("`{e}` may not reference jump marks")));
            }
        }
        // gamma(t, x, i, 0) = 0 probed at a few points.
        let zero = vec![0.0; self.nu.dim];
        let probes = [vec![0.0; self.d], vec![1.0; self.d], vec![-0.5; self.d]];
        let mut out = vec![0.0; self.d];
        for i in 0..s {
            for x in &probes {
                for t in [0.0, 0.5 * self.horizon] {
                    if self.nu.dim == 0 && self.gamma[i].iter().any(|e| e.depends_on_z()) {
                        return Err(Error::Model("jump amplitude references z without jump atoms".into()));
                    }
                    if self.gamma_at(t, x, i, &zero, &mut out).is_ok() && out.iter().any(|v| v.abs() > 1e-12) {
                        return Err(Error::Model(format!("jump amplitude in regime {} is nonzero at z = 0", self.regimes.label(i))));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn drift(&self, t: f64, x: &[f64], i: usize, out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.b[i]) {
            *o = e.eval(t, x, &[])?;
        }
        Ok(())
    }

    /// Row-major `d x d` diffusion coefficient.
    pub fn diffusion(&self, t: f64, x: &[f64], i: usize, out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.sigma[i]) {
            *o = e.eval(t, x, &[])?;
        }
        Ok(())
    }

    /// `a = sigma sigma^T`, row-major.
    pub fn covariance(&self, t: f64, x: &[f64], i: usize, out: &mut [f64]) -> Result<()> {
        let d = self.d;
        let mut s = vec![0.0; d * d];
        self.diffusion(t, x, i, &mut s)?;
        for m in 0..d {
            for n in 0..d {
                out[m * d + n] = (0..d).map(|k| s[m * d + k] * s[n * d + k]).sum();
            }
        }
        Ok(())
    }

    fn gamma_at(&self, t: f64, x: &[f64], i: usize, z: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.gamma[i]) {
            *o = e.eval(t, x, z)?;
        }
        Ok(())
    }

    /// Jump amplitude for atom `a`.
    pub fn jump(&self, t: f64, x: &[f64], i: usize, a: usize, out: &mut [f64]) -> Result<()> {
        self.gamma_at(t, x, i, &self.nu.atoms[a].z, out)
    }

    /// `sum over compensated atoms of weight * gamma`.
    pub fn compensator(&self, t: f64, x: &[f64], i: usize, out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut g = vec![0.0; self.d];
        for a in 0..self.nu.atoms.len() {
            if self.nu.compensated(a) {
                self.jump(t, x, i, a, &mut g)?;
                let w = self.nu.atoms[a].weight;
                for (o, gv) in out.iter_mut().zip(&g) {
                    *o += w * gv;
                }
            }
        }
        Ok(())
    }

    pub fn rate(&self, t: f64, x: &[f64], i: usize, j: usize) -> Result<f64> {
        match &self.q[i][j] {
            None => Ok(0.0),
            Some(e) => {
                let v = e.eval(t, x, &[])?;
                if v < 0.0 {
                    Err(Error::Model(format!(
                        "negative switching rate {v} for {}->{} at t={t}",
                        self.regimes.label(i),
                        self.regimes.label(j)
                    )))
                } else {
                    Ok(v)
                }
            }
        }
    }

    pub fn exit_rate(&self, t: f64, x: &[f64], i: usize) -> Result<f64> {
        let mut total = 0.0;
        for j in 0..self.n_regimes() {
            if j != i {
                total += self.rate(t, x, i, j)?;
            }
        }
        Ok(total)
    }

    /// `psi_ij(t, x)`.
    pub fn hybrid_map(&self, t: f64, x: &[f64], i: usize, j: usize, out: &mut [f64]) -> Result<()> {
        match &self.psi[i][j] {
            None => out.copy_from_slice(x),
            Some(v) => {
                for (o, e) in out.iter_mut().zip(v) {
                    *o = e.eval(t, x, &[])?;
                }
            }
        }
        Ok(())
    }

    pub fn has_hybrid_jumps(&self) -> bool {
        self.psi.iter().flatten().any(|p| p.is_some())
    }

    /// A regime in which nothing moves and nothing leaves.
    pub fn is_frozen(&self, i: usize) -> bool {
        let zero_jumps = self.nu.is_empty() || self.gamma[i].iter().all(|e| e.is_zero());
        self.b[i].iter().all(|e| e.is_zero())
            && self.sigma[i].iter().all(|e| e.is_zero())
            && zero_jumps
            && self.q[i].iter().all(|e| e.as_ref().map_or(true, |e| e.is_zero()))
    }

    /// True when b and sigma are constant in every regime.
    pub fn constant_diffusion(&self) -> bool {
        self.b.iter().chain(&self.sigma).flatten().all(|e| e.as_constant().is_some())
    }
}

/// Consecutive layout of the intervals `Delta_ij` on `[0, inf)` for one `(t, x, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchLayout {
    pub from: usize,
    /// `(j, start, end)` in increasing `j`, skipping `from`.
    pub intervals: Vec<(usize, f64, f64)>,
}

impl SwitchLayout {
    pub fn from_rates(from: usize, rates: &[f64]) -> Self {
        let mut start = 0.0;
        let mut intervals = Vec::with_capacity(rates.len().saturating_sub(1));
        for (j, &r) in rates.iter().enumerate() {
            if j == from {
                continue;
            }
            intervals.push((j, start, start + r));
            start += r;
        }
        SwitchLayout { from, intervals }
    }

    pub fn total(&self) -> f64 {
        self.intervals.last().map_or(0.0, |iv| iv.2)
    }

    pub fn interval(&self, j: usize) -> Option<(f64, f64)> {
        self.intervals.iter().find(|iv| iv.0 == j).map(|iv| (iv.1, iv.2))
    }

    /// Target regime of the interval containing `w`.
    pub fn locate(&self, w: f64) -> Option<usize> {
        self.intervals.iter().find(|iv| w >= iv.1 && w < iv.2).map(|iv| iv.0)
    }
}

pub fn switch_layout(model: &ModelSpec, t: f64, x: &[f64], i: usize) -> Result<SwitchLayout> {
    let rates = (0..model.n_regimes())
        .map(|j| if j == i { Ok(0.0) } else { model.rate(t, x, i, j) })
        .collect::<Result<Vec<_>>>()?;
    Ok(SwitchLayout::from_rates(i, &rates))
}

/// Regime increment and spatial displacement selected by the mark `w`.
pub fn switch_maps(model: &ModelSpec, t: f64, x: &[f64], i: usize, w: f64) -> Result<(i64, Vec<f64>)> {
    let layout = switch_layout(model, t, x, i)?;
    match layout.locate(w) {
        None => Ok((0, vec![0.0; model.d])),
        Some(j) => {
            let mut y = vec![0.0; model.d];
            model.hybrid_map(t, x, i, j, &mut y)?;
            for (v, xv) in y.iter_mut().zip(x) {
                *v -= xv;
            }
            Ok((j as i64 - i as i64, y))
        }
    }
}
