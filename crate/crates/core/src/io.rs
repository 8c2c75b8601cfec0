//! Tables for results: CSV or versioned JSON, floats with 17 significant digits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernel::Marginal;
use crate::model::RegimeSet;
use crate::potentials::{PotentialField, PotentialKind};
use crate::simulate::SamplePath;
use crate::sinkhorn::{BoundaryPotentials, ConvergenceReport};
use crate::usbp::nearest_node;

pub const TABLE_SCHEMA: &str = "rbridge.table/1";

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(v) => fmt_f64(*v),
            Cell::Text(s) => s.clone(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Cell::Int(i) => (*i).into(),
            Cell::Num(v) => match serde_json::Number::from_f64(*v) {
                Some(n) => serde_json::Value::Number(n),
                None => fmt_f64(*v).into(),
            },
            Cell::Text(s) => s.clone().into(),
        }
    }
}

/// Scientific notation with 17 significant digits, enough to round-trip every `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown table format `{s}`"))),
        }
    }

    /// Chosen from the file extension; CSV unless it ends in `.json`.
    pub fn from_path(path: &Path) -> Self {
        if path.extension().is_some_and(|e| e == "json") {
            Format::Json
        } else {
            Format::Csv
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: Vec<String>) -> Self {
        Table { name: name.into(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&self.columns).map_err(fail)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render)).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Value> =
            self.rows.iter().map(|r| serde_json::Value::Array(r.iter().map(Cell::json).collect())).collect();
        let doc = serde_json::json!({
            "schema": TABLE_SCHEMA,
            "table": self.name,
            "columns": self.columns,
            "rows": rows,
        });
        serde_json::to_string_pretty(&doc).expect("tables serialise") + "\n"
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => Ok(self.to_json()),
        }
    }

    /// Reads a CSV file; cells that parse as numbers become numbers.
    pub fn read_csv(path: &Path) -> Result<Table> {
        let text = std::fs::read_to_string(path)?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let columns: Vec<String> = r.headers().map_err(fail)?.iter().map(|s| s.trim().to_string()).collect();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut t = Table::new(&name, columns);
        for rec in r.records() {
            let rec = rec.map_err(fail)?;
            t.rows.push(
                rec.iter()
                    .map(|s| {
                        let s = s.trim();
                        s.parse::<f64>().map(Cell::Num).unwrap_or_else(|_| Cell::Text(s.to_string()))
                    })
                    .collect(),
            );
        }
        Ok(t)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Format(format!("table `{}` has no column `{name}`", self.name)))
    }

    fn num(&self, row: usize, col: usize) -> Result<f64> {
        match &self.rows[row][col] {
            Cell::Num(v) => Ok(*v),
            Cell::Int(i) => Ok(*i as f64),
            Cell::Text(s) => Err(Error::Format(format!("row {}: `{s}` is not a number", row + 1))),
        }
    }

    fn text(&self, row: usize, col: usize) -> String {
        self.rows[row][col].render()
    }
}

fn coord_columns(d: usize) -> Vec<String> {
    (1..=d).map(|m| format!("x{m}")).collect()
}

fn node_cells(grid: &Grid, k: usize) -> Vec<Cell> {
    grid.node(k).into_iter().map(Cell::Num).collect()
}

/// `regime, x1..xd, density` with point masses folded into their cells.
pub fn marginal_table(m: &Marginal) -> Table {
    let n = m.grid.len();
    let mut cols = vec!["regime".to_string()];
    cols.extend(coord_columns(m.grid.d()));
    cols.push("density".into());
    let mut t = Table::new("marginal", cols);
    let w = m.grid.weight();
    let masses = m.masses();
    for i in 0..m.regimes.count() {
        for k in 0..n {
            let mut row = vec![Cell::Text(m.regimes.label(i).into())];
            row.extend(node_cells(&m.grid, k));
            row.push(Cell::Num(masses[i * n + k] / w));
            t.push(row);
        }
    }
    t
}

/// Locates the node of row `r` from its coordinate columns.
fn row_node(t: &Table, r: usize, cols: &[usize], grid: &Grid) -> Result<usize> {
    let x = cols.iter().map(|&c| t.num(r, c)).collect::<Result<Vec<f64>>>()?;
    let k = nearest_node(grid, &x).ok_or_else(|| Error::GridMismatch(format!("row {}: {x:?} is off the grid", r + 1)))?;
    let node = grid.node(k);
    for (a, (p, q)) in x.iter().zip(&node).enumerate() {
        if (p - q).abs() > 1e-6 * grid.axes[a].h() {
            return Err(Error::GridMismatch(format!("row {}: {x:?} is not a grid node", r + 1)));
        }
    }
    Ok(k)
}

fn regime_of(t: &Table, r: usize, col: usize, regimes: &RegimeSet) -> Result<usize> {
    let label = t.text(r, col);
    regimes
        .index_of(&label)
        .or_else(|| label.parse::<f64>().ok().and_then(|v| regimes.index_of(&format!("{}", v as i64))))
        .ok_or_else(|| Error::GridMismatch(format!("row {}: unknown regime `{label}`", r + 1)))
}

/// Reads `regime, x1..xd, density` (or `weight` for cell masses); absent nodes carry no mass.
pub fn marginal_from_table(t: &Table, grid: &Grid, regimes: &RegimeSet) -> Result<Marginal> {
    let rc = t.column("regime")?;
    let xc = coord_columns(grid.d()).iter().map(|c| t.column(c)).collect::<Result<Vec<_>>>()?;
    let (vc, is_density) = match t.column("density") {
        Ok(c) => (c, true),
        Err(_) => (t.column("weight")?, false),
    };
    let n = grid.len();
    let w = grid.weight();
    let mut weights = vec![0.0; n * regimes.count()];
    for r in 0..t.rows.len() {
        let i = regime_of(t, r, rc, regimes)?;
        let k = row_node(t, r, &xc, grid)?;
        let v = t.num(r, vc)?;
        weights[i * n + k] = if is_density { v * w } else { v };
    }
    Marginal::from_weights(grid, regimes, weights)
}

pub fn read_marginal(path: &Path, grid: &Grid, regimes: &RegimeSet) -> Result<Marginal> {
    marginal_from_table(&Table::read_csv(path)?, grid, regimes)
}

fn kind_name(kind: PotentialKind) -> &'static str {
    match kind {
        PotentialKind::Phi => "phi",
        PotentialKind::PhiHat => "phihat",
    }
}

/// `field, t, regime, x1..xd, value` for every slice of every field.
pub fn potentials_table(fields: &[&PotentialField]) -> Table {
    let d = fields.first().map_or(1, |f| f.grid.d());
    let mut cols = vec!["field".to_string(), "t".into(), "regime".into()];
    cols.extend(coord_columns(d));
    cols.push("value".into());
    let mut t = Table::new("potentials", cols);
    for f in fields {
        let n = f.n();
        for (m, s) in f.slices.iter().enumerate() {
            for i in 0..f.regimes.count() {
                for k in 0..n {
                    let mut row =
                        vec![Cell::Text(kind_name(f.kind).into()), Cell::Num(f.times[m]), Cell::Text(f.regimes.label(i).into())];
                    row.extend(node_cells(&f.grid, k));
                    row.push(Cell::Num(s[i * n + k]));
                    t.push(row);
                }
            }
        }
    }
    t
}

/// Boundary potentials from a solve as two-slice fields on `[t0, t1]`: `phi` and `phihat` as densities.
pub fn boundary_fields(bp: &BoundaryPotentials, grid: &Grid, regimes: &RegimeSet, t0: f64, t1: f64) -> (PotentialField, PotentialField) {
    let w = bp.weight;
    let field = |kind, slices| PotentialField { kind, grid: grid.clone(), regimes: regimes.clone(), times: vec![t0, t1], slices };
    (
        field(PotentialKind::Phi, vec![bp.phi0.clone(), bp.phi_t.clone()]),
        field(PotentialKind::PhiHat, vec![bp.phihat0.iter().map(|m| m / w).collect(), bp.phihat_t.clone()]),
    )
}

/// Rebuilds one field of a potentials table.
pub fn potential_from_table(t: &Table, grid: &Grid, regimes: &RegimeSet, kind: PotentialKind) -> Result<PotentialField> {
    let fc = t.column("field")?;
    let tc = t.column("t")?;
    let rc = t.column("regime")?;
    let vc = t.column("value")?;
    let xc = coord_columns(grid.d()).iter().map(|c| t.column(c)).collect::<Result<Vec<_>>>()?;
    let n = grid.len();
    let mut times: Vec<f64> = Vec::new();
    let mut slices: Vec<Vec<f64>> = Vec::new();
    for r in 0..t.rows.len() {
        if t.text(r, fc) != kind_name(kind) {
            continue;
        }
        let time = t.num(r, tc)?;
        let m = match times.iter().position(|&s| s == time) {
            Some(m) => m,
            None => {
                times.push(time);
                slices.push(vec![0.0; n * regimes.count()]);
                times.len() - 1
            }
        };
        let i = regime_of(t, r, rc, regimes)?;
        let k = row_node(t, r, &xc, grid)?;
        slices[m][i * n + k] = t.num(r, vc)?;
    }
    if times.is_empty() {
        return Err(Error::Format(format!("no `{}` rows in the potentials table", kind_name(kind))));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|a, b| times[*a].total_cmp(&times[*b]));
    Ok(PotentialField {
        kind,
        grid: grid.clone(),
        regimes: regimes.clone(),
        times: order.iter().map(|&m| times[m]).collect(),
        slices: order.iter().map(|&m| slices[m].clone()).collect(),
    })
}

/// `iter, residual`.
pub fn conv_table(report: &ConvergenceReport) -> Table {
    let mut t = Table::new("conv", vec!["iter".into(), "residual".into()]);
    for (k, r) in report.residuals.iter().enumerate() {
        t.push(vec![Cell::Int(k as i64 + 1), Cell::Num(*r)]);
    }
    t
}

/// `path_id, t, x1..xd, regime, event_kind`.
pub fn paths_table(paths: &[SamplePath], regimes: &RegimeSet) -> Table {
    let d = paths.first().map_or(1, |p| p.d);
    let mut cols = vec!["path_id".to_string(), "t".into()];
    cols.extend(coord_columns(d));
    cols.push("regime".into());
    cols.push("event_kind".into());
    let mut t = Table::new("paths", cols);
    for (id, p) in paths.iter().enumerate() {
        for k in 0..=p.steps() {
            let mut row = vec![Cell::Int(id as i64), Cell::Num(p.times[k])];
            row.extend(p.x(k).iter().map(|v| Cell::Num(*v)));
            row.push(Cell::Text(regimes.label(p.regime(k)).into()));
            row.push(Cell::Text(p.event_kind(k).into()));
            t.push(row);
        }
    }
    t
}

/// `t, regime, x1..xd, density` for a sequence of marginals.
pub fn marginals_table(slices: &[(f64, Marginal)]) -> Table {
    let d = slices.first().map_or(1, |(_, m)| m.grid.d());
    let mut cols = vec!["t".to_string(), "regime".into()];
    cols.extend(coord_columns(d));
    cols.push("density".into());
    let mut t = Table::new("marginals", cols);
    for (time, m) in slices {
        let n = m.grid.len();
        let w = m.grid.weight();
        let masses = m.masses();
        for i in 0..m.regimes.count() {
            for k in 0..n {
                let mut row = vec![Cell::Num(*time), Cell::Text(m.regimes.label(i).into())];
                row.extend(node_cells(&m.grid, k));
                row.push(Cell::Num(masses[i * n + k] / w));
                t.push(row);
            }
        }
    }
    t
}
