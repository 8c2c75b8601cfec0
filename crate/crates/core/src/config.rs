//! Model files in TOML.
//!
//! ```toml
//! [model]
//! d = 1
//! T = 1.0
//! regimes = ["calm", "stress"]   # or a count: regimes = 2
//!
//! [model.params]
//! k = 0.5
//!
//! [model.b.calm]
//! x1 = "-k*x1"
//!
//! [model.sigma.calm]
//! s11 = "1"
//!
//! [model.gamma.calm]
//! x1 = "z1"
//!
//! [model.nu]
//! atoms = [[0.3, 1.5], [-0.3, 1.5]]   # [z1..zl, weight]
//! compensate_small = true
//!
//! [model.Q]
//! q_calm_stress = "0.5"
//!
//! [model.psi]
//! psi_calm_stress = ["x1 + 1"]
//! ```
//!
//! Labels made of single characters may also be written without the separator, as in `q_12`.

use std::collections::BTreeMap;
use std::path::Path;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::{Atom, JumpMeasure, ModelSpec, RegimeSet};

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn number(v: &Value, what: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(format!("{what} must be a number"))),
    }
}

/// A coefficient written as a string or a bare number.
fn source(v: &Value, what: &str) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Float(_) | Value::Integer(_) => Ok(format!("{}", number(v, what)?)),
        _ => Err(bad(format!("{what} must be an expression string"))),
    }
}

fn table<'a>(parent: &'a Table, key: &str) -> Result<Option<&'a Table>> {
    match parent.get(key) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(bad(format!("`{key}` must be a table"))),
    }
}

fn regime_set(v: Option<&Value>) -> Result<RegimeSet> {
    match v {
        None => Ok(RegimeSet::numbered(1)),
        Some(Value::Integer(n)) if *n >= 1 => Ok(RegimeSet::numbered(*n as usize)),
        Some(Value::Array(a)) => RegimeSet::new(
            a.iter()
                .map(|l| l.as_str().map(String::from).ok_or_else(|| bad("regime labels must be strings")))
                .collect::<Result<_>>()?,
        ),
        Some(_) => Err(bad("`regimes` must be a positive count or a list of labels")),
    }
}

fn regime_index(regimes: &RegimeSet, label: &str) -> Result<usize> {
    regimes.index_of(label).ok_or_else(|| bad(format!("unknown regime `{label}`")))
}

/// Splits `<prefix>_<from>_<to>` or `<prefix>_<ab>` into two regime indices.
fn pair(regimes: &RegimeSet, key: &str, prefix: &str) -> Result<(usize, usize)> {
    let rest = key
        .strip_prefix(prefix)
        .and_then(|r| r.strip_prefix('_'))
        .ok_or_else(|| bad(format!("key `{key}` should start with `{prefix}_`")))?;
    for (k, _) in rest.match_indices('_') {
        if let (Some(i), Some(j)) = (regimes.index_of(&rest[..k]), regimes.index_of(&rest[k + 1..])) {
            return Ok((i, j));
        }
    }
    let chars: Vec<char> = rest.chars().collect();
    if chars.len() == 2 {
        if let (Some(i), Some(j)) = (regimes.index_of(&chars[0].to_string()), regimes.index_of(&chars[1].to_string())) {
            return Ok((i, j));
        }
    }
    Err(bad(format!("key `{key}` does not name two regimes")))
}

/// One source per coordinate from a table keyed `x1..xd`; missing entries are zero.
fn components(t: &Table, d: usize, what: &str) -> Result<Vec<String>> {
    let mut out = vec!["0".to_string(); d];
    for (k, v) in t {
        let m = k
            .strip_prefix('x')
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|m| (1..=d).contains(m))
            .ok_or_else(|| bad(format!("{what}: unexpected key `{k}`, use x1..x{d}")))?;
        out[m - 1] = source(v, what)?;
    }
    Ok(out)
}

/// Row-major `d × d` sources from keys `s<row><col>` (or `s<row>_<col>`); missing entries are zero.
fn matrix(t: &Table, d: usize) -> Result<Vec<String>> {
    let mut out = vec!["0".to_string(); d * d];
    for (k, v) in t {
        let body = k.strip_prefix('s').ok_or_else(|| bad(format!("sigma: unexpected key `{k}`")))?;
        let (r, c) = match body.split_once('_') {
            Some((r, c)) => (r.parse::<usize>().ok(), c.parse::<usize>().ok()),
            None if body.len() == 2 => (body[..1].parse().ok(), body[1..].parse().ok()),
            None => (None, None),
        };
        match (r, c) {
            (Some(r), Some(c)) if (1..=d).contains(&r) && (1..=d).contains(&c) => {
                out[(r - 1) * d + c - 1] = source(v, "sigma")?;
            }
            _ => return Err(bad(format!("sigma: unexpected key `{k}`, use s11..s{d}{d}"))),
        }
    }
    Ok(out)
}

fn jump_measure(t: &Table) -> Result<JumpMeasure> {
    let compensate = match t.get("compensate_small") {
        None => true,
        Some(Value::Boolean(b)) => *b,
        Some(_) => return Err(bad("`compensate_small` must be true or false")),
    };
    let atoms = match t.get("atoms") {
        None => Vec::new(),
        Some(Value::Array(a)) => a
            .iter()
            .map(|row| {
                let nums = row
                    .as_array()
                    .ok_or_else(|| bad("each atom is a list [z1..zl, weight]"))?
                    .iter()
                    .map(|v| number(v, "atom entry"))
                    .collect::<Result<Vec<f64>>>()?;
                if nums.len() < 2 {
                    return Err(bad("each atom is a list [z1..zl, weight]"));
                }
                let (z, w) = nums.split_at(nums.len() - 1);
                Ok(Atom { z: z.to_vec(), weight: w[0] })
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(bad("`atoms` must be a list")),
    };
    for k in t.keys() {
        if k != "atoms" && k != "compensate_small" {
            return Err(bad(format!("nu: unexpected key `{k}`")));
        }
    }
    if atoms.is_empty() {
        let mut nu = JumpMeasure::none();
        nu.compensate_small = compensate;
        return Ok(nu);
    }
    JumpMeasure::new(atoms, compensate)
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Builds a model from the `[model]` table.
pub fn model_from_table(m: &Table) -> Result<ModelSpec> {
    const KEYS: [&str; 10] = ["d", "T", "regimes", "params", "b", "sigma", "gamma", "nu", "Q", "psi"];
    if let Some(k) = m.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(bad(format!("model: unexpected key `{k}`")));
    }
    let d = match m.get("d") {
        Some(Value::Integer(d)) if *d >= 1 => *d as usize,
        _ => return Err(bad("`model.d` must be a positive integer")),
    };
    let horizon = number(m.get("T").ok_or_else(|| bad("`model.T` is required"))?, "model.T")?;
    let regimes = regime_set(m.get("regimes"))?;
    let mut params = BTreeMap::new();
    if let Some(p) = table(m, "params")? {
        for (k, v) in p {
            params.insert(k.clone(), number(v, &format!("parameter `{k}`"))?);
        }
    }
    let mut builder = ModelSpec::builder(d, regimes.clone(), horizon).params(params);
    if let Some(nu) = table(m, "nu")? {
        builder = builder.jumps(jump_measure(nu)?);
    }
    let per_regime = |key: &str| -> Result<Vec<(usize, Table)>> {
        let Some(t) = table(m, key)? else { return Ok(Vec::new()) };
        t.iter()
            .map(|(label, v)| match v {
                Value::Table(inner) => Ok((regime_index(&regimes, label)?, inner.clone())),
                _ => Err(bad(format!("`model.{key}.{label}` must be a table"))),
            })
            .collect()
    };
    for (i, t) in per_regime("b")? {
        builder = builder.drift(i, &strs(&components(&t, d, "b")?));
    }
    for (i, t) in per_regime("sigma")? {
        builder = builder.diffusion(i, &strs(&matrix(&t, d)?));
    }
    for (i, t) in per_regime("gamma")? {
        builder = builder.jump_amplitude(i, &strs(&components(&t, d, "gamma")?));
    }
    if let Some(q) = table(m, "Q")? {
        for (k, v) in q {
            let (i, j) = pair(&regimes, k, "q")?;
            builder = builder.rate(i, j, &source(v, k)?);
        }
    }
    if let Some(p) = table(m, "psi")? {
        for (k, v) in p {
            let (i, j) = pair(&regimes, k, "psi")?;
            let srcs = v
                .as_array()
                .ok_or_else(|| bad(format!("`{k}` must be a list of {d} expressions")))?
                .iter()
                .map(|e| source(e, k))
                .collect::<Result<Vec<_>>>()?;
            builder = builder.hybrid_map(i, j, &strs(&srcs));
        }
    }
    builder.build()
}

/// Parses a TOML document and builds the model from its `[model]` table.
pub fn model_from_toml(text: &str) -> Result<ModelSpec> {
    let doc = parse_toml(text)?;
    let m = table(&doc, "model")?.ok_or_else(|| bad("missing [model] table"))?;
    model_from_table(m)
}

pub fn parse_toml(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| bad(e.to_string()))
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    model_from_toml(&std::fs::read_to_string(path)?)
}
