//! Uniform tensor grids with midpoint quadrature and local interpolation.
//!
//! Nodes are cell centres: axis `a` has `n` cells of width `h` on `[lower, upper]`.
//! Flat node indices are row-major with the last axis fastest.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lower: f64, upper: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("axis needs at least 2 points, got {n}")));
        }
        if !(upper > lower && lower.is_finite() && upper.is_finite()) {
            return Err(Error::Config(format!("axis bounds [{lower}, {upper}] are invalid")));
        }
        Ok(Axis { lower, upper, n })
    }

    pub fn h(&self) -> f64 {
        (self.upper - self.lower) / self.n as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.lower + (k as f64 + 0.5) * self.h()
    }

    /// Position in node units: node `k` sits at `k`.
    fn coord(&self, x: f64) -> f64 {
        (x - self.lower) / self.h() - 0.5
    }

    /// Cell index containing `x`, if inside `[lower, upper)`.
    pub fn cell(&self, x: f64) -> Option<usize> {
        let u = (x - self.lower) / self.h();
        if u >= 0.0 && u < self.n as f64 {
            Some((u as usize).min(self.n - 1))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<Axis>,
}

/// Interpolation stencil along one axis: node indices and weights.
#[derive(Debug, Clone, Copy)]
struct Stencil1 {
    idx: [usize; 4],
    w: [f64; 4],
    len: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("grid needs at least one axis".into()));
        }
        Ok(Grid { axes })
    }

    pub fn uniform_1d(lower: f64, upper: f64, n: usize) -> Result<Self> {
        Grid::new(vec![Axis::new(lower, upper, n)?])
    }

    /// Parses `"lo:hi:n"` per axis, axes separated by commas.
    pub fn parse(spec: &str) -> Result<Self> {
        let axes = spec
            .split(',')
            .map(|part| {
                let f: Vec<&str> = part.trim().split(':').collect();
                if f.len() != 3 {
                    return Err(Error::Config(format!("grid axis `{part}` must be lo:hi:n")));
                }
                let num = |s: &str| -> Result<f64> {
                    s.trim().parse().map_err(|_| Error::Config(format!("bad number `{s}` in grid spec")))
                };
                let n: usize =
                    f[2].trim().parse().map_err(|_| Error::Config(format!("bad count `{}` in grid spec", f[2])))?;
                Axis::new(num(f[0])?, num(f[1])?, n)
            })
            .collect::<Result<Vec<_>>>()?;
        Grid::new(axes)
    }

    pub fn spec(&self) -> String {
        self.axes
            .iter()
            .map(|a| format!("{:?}:{:?}:{}", a.lower, a.upper, a.n))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn d(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Midpoint quadrature weight, identical for every node.
    pub fn weight(&self) -> f64 {
        self.axes.iter().map(|a| a.h()).product()
    }

    pub fn volume(&self) -> f64 {
        self.axes.iter().map(|a| a.upper - a.lower).product()
    }

    /// Same bounds with twice as many cells per axis.
    pub fn refined(&self) -> Grid {
        Grid { axes: self.axes.iter().map(|a| Axis { n: 2 * a.n, ..*a }).collect() }
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.axes[axis + 1..].iter().map(|a| a.n).product()
    }

    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.d()];
        for a in (0..self.d()).rev() {
            idx[a] = k % self.axes[a].n;
            k /= self.axes[a].n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (&i, a)| acc * a.n + i)
    }

    pub fn node(&self, k: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.d()];
        self.node_into(k, &mut x);
        x
    }

    pub fn node_into(&self, mut k: usize, out: &mut [f64]) {
        for a in (0..self.d()).rev() {
            let ax = &self.axes[a];
            out[a] = ax.node(k % ax.n);
            k /= ax.n;
        }
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.node(k)).collect()
    }

    /// Flat index of the cell containing `x`.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut k = 0;
        for (a, ax) in self.axes.iter().enumerate() {
            k = k * ax.n + ax.cell(x[a])?;
        }
        Some(k)
    }

    /// True if node `k` lies within `margin` nodes of an edge on some axis.
    pub fn near_edge(&self, k: usize, margin: usize) -> bool {
        self.multi_index(k)
            .iter()
            .zip(&self.axes)
            .any(|(&i, a)| i < margin || i + margin >= a.n)
    }

    fn stencil(&self, axis: usize, x: f64, cubic: bool) -> Option<Stencil1> {
        let ax = &self.axes[axis];
        let last = (ax.n - 1) as f64;
        // Points within rounding of the outer nodes count as on the grid.
        let u = ax.coord(x);
        let u = if u < 0.0 && u > -1e-9 { 0.0 } else if u > last && u < last + 1e-9 { last } else { u };
        if !(u >= 0.0 && u <= last) {
            return None;
        }
        let mut k = u.floor() as usize;
        if k >= ax.n - 1 {
            k = ax.n - 2;
        }
        let a = u - k as f64;
        if cubic && k >= 1 && k + 2 < ax.n {
            let w = [
                -a * (a - 1.0) * (a - 2.0) / 6.0,
                (a + 1.0) * (a - 1.0) * (a - 2.0) / 2.0,
                -(a + 1.0) * a * (a - 2.0) / 2.0,
                (a + 1.0) * a * (a - 1.0) / 6.0,
            ];
            Some(Stencil1 { idx: [k - 1, k, k + 1, k + 2], w, len: 4 })
        } else {
            Some(Stencil1 { idx: [k, k + 1, 0, 0], w: [1.0 - a, a, 0.0, 0.0], len: 2 })
        }
    }

    fn interp_with(&self, values: &[f64], x: &[f64], cubic: bool) -> Option<f64> {
        let st: Vec<Stencil1> = (0..self.d()).map(|a| self.stencil(a, x[a], cubic)).collect::<Option<_>>()?;
        let mut total = 0.0;
        let mut counter = vec![0usize; self.d()];
        loop {
            let mut w = 1.0;
            let mut k = 0;
            for (a, s) in st.iter().enumerate() {
                w *= s.w[counter[a]];
                k = k * self.axes[a].n + s.idx[counter[a]];
            }
            total += w * values[k];
            let mut a = self.d();
            loop {
                if a == 0 {
                    return Some(total);
                }
                a -= 1;
                counter[a] += 1;
                if counter[a] < st[a].len {
                    break;
                }
                counter[a] = 0;
            }
        }
    }

    /// Cubic interpolation in the interior, linear next to the edges; `None` off grid.
    pub fn interp(&self, values: &[f64], x: &[f64]) -> Option<f64> {
        self.interp_with(values, x, true)
    }

    /// Multilinear interpolation, positivity preserving.
    pub fn interp_linear(&self, values: &[f64], x: &[f64]) -> Option<f64> {
        self.interp_with(values, x, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_cover_volume() {
        let g = Grid::parse("-6:6:200").unwrap();
        assert_eq!(g.len(), 200);
        assert!((g.weight() * g.len() as f64 - 12.0).abs() < 1e-12);
        let g2 = Grid::parse("0:1:4, -1:1:8").unwrap();
        assert!((g2.weight() * g2.len() as f64 - g2.volume()).abs() < 1e-14);
        assert!(Grid::parse("0:1:1").is_err());
        assert!(Grid::parse("1:0:4").is_err());
    }

    #[test]
    fn index_round_trip() {
        let g = Grid::parse("0:1:3,0:1:4,0:2:5").unwrap();
        for k in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(k)), k);
            assert_eq!(g.locate(&g.node(k)), Some(k));
        }
    }

    #[test]
    fn interpolation_exact_on_cubics() {
        let g = Grid::parse("-1:1:20").unwrap();
        let f: Vec<f64> = (0..g.len()).map(|k| {
            let x = g.node(k)[0];
            x * x * x - 2.0 * x
        }).collect();
        for &x in &[-0.33, 0.0, 0.41, 0.77] {
            let v = g.interp(&f, &[x]).unwrap();
            assert!((v - (x * x * x - 2.0 * x)).abs() < 1e-12);
        }
        assert!(g.interp(&f, &[0.999]).is_none());
        let nodes = g.node(0)[0];
        assert!((g.interp(&f, &[nodes]).unwrap() - f[0]).abs() < 1e-15);
    }

    #[test]
    fn bilinear_exact_on_bilinear() {
        let g = Grid::parse("0:1:5,0:2:6").unwrap();
        let f: Vec<f64> = g.nodes().iter().map(|x| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1]).collect();
        let x = [0.37, 1.21];
        let v = g.interp_linear(&f, &x).unwrap();
        assert!((v - (1.0 + 0.74 - 1.21 + 0.5 * 0.37 * 1.21)).abs() < 1e-13);
    }
}
