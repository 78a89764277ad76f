//! Plain-text state files and grid-field dumps.
//!
//! A state file is
//!
//! ```text
//! kym-state 1
//! model square(1,1)
//! labels 0 0 1 2
//! grid 16
//! nodes 289
//! 0 0 <phi> <m>
//! ...
//! ```
//!
//! with `facets <k>` followed by `k` lines `n1 n2 offset` in place of the
//! `model` line for polygons given by facets. Values use the shortest
//! round-tripping decimal form, so reading back is exact.

use crate::error::{KymError, Result};
use crate::polytope::{Facet, Grid, NamedModel, PolytopeSpec};
use crate::system::{Model, PairState};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

const MAGIC: &str = "kym-state 1";

pub fn write_state<W: Write>(state: &PairState, mut w: W) -> Result<()> {
    let m = &state.model;
    writeln!(w, "{MAGIC}")?;
    match &m.polytope.model {
        Some(nm) => writeln!(w, "model {}", nm.label())?,
        None => {
            writeln!(w, "facets {}", m.polytope.facets.len())?;
            for f in &m.polytope.facets {
                writeln!(w, "{} {} {}", f.normal[0], f.normal[1], f.offset)?;
            }
        }
    }
    let labels: Vec<String> = m.bundle.labels.iter().map(|l| l.to_string()).collect();
    writeln!(w, "labels {}", labels.join(" "))?;
    writeln!(w, "grid {}", m.resolution)?;
    writeln!(w, "nodes {}", m.n())?;
    for (k, nd) in m.grid.nodes.iter().enumerate() {
        writeln!(w, "{} {} {} {}", nd.ij[0], nd.ij[1], state.u.phi[k], state.bp.m[k])?;
    }
    Ok(())
}

pub fn state_to_string(state: &PairState) -> String {
    let mut buf = Vec::new();
    write_state(state, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

fn corrupt(line: usize, what: impl std::fmt::Display) -> KymError {
    KymError::CorruptState(format!("line {line}: {what}"))
}

fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| corrupt(line, format!("bad number '{s}'")))
}

pub fn read_state<R: BufRead>(r: R) -> Result<PairState> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = || -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i, l)),
            Some((i, Err(e))) => Err(corrupt(i, e)),
            None => Err(KymError::CorruptState("unexpected end of file".into())),
        }
    };
    let keyed = |(i, l): (usize, String), key: &str| -> Result<(usize, String)> {
        l.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(|rest| (i, rest.trim().to_string()))
            .ok_or_else(|| corrupt(i, format!("expected '{key}'")))
    };
    let (i, head) = next()?;
    if head.trim() != MAGIC {
        return Err(corrupt(i, format!("expected header '{MAGIC}'")));
    }
    let (i, l) = next()?;
    let spec = if let Some(name) = l.strip_prefix("model ") {
        PolytopeSpec::Named(NamedModel::parse(name).map_err(|e| corrupt(i, e))?)
    } else {
        let (i, k) = keyed((i, l), "facets")?;
        let k: usize = num(&k, i)?;
        let mut f = Vec::with_capacity(k);
        for _ in 0..k {
            let (i, l) = next()?;
            let p: Vec<&str> = l.split_whitespace().collect();
            if p.len() != 3 {
                return Err(corrupt(i, "facet line needs 'n1 n2 offset'"));
            }
            f.push(Facet::new([num(p[0], i)?, num(p[1], i)?], num(p[2], i)?));
        }
        PolytopeSpec::Facets(f)
    };
    let (i, l) = keyed(next()?, "labels")?;
    let labels = l.split_whitespace().map(|s| num(s, i)).collect::<Result<Vec<i64>>>()?;
    let (i, l) = keyed(next()?, "grid")?;
    let res: usize = num(&l, i)?;
    let model = Model::from_spec(&spec, res, &labels).map_err(|e| corrupt(i, e))?;
    let (i, l) = keyed(next()?, "nodes")?;
    let n: usize = num(&l, i)?;
    if n != model.n() {
        return Err(corrupt(i, format!("{n} nodes declared, grid has {}", model.n())));
    }
    read_fields(&model, n, &mut next)
}

fn read_fields(model: &Arc<Model>, n: usize, next: &mut dyn FnMut() -> Result<(usize, String)>) -> Result<PairState> {
    let index: HashMap<[i64; 2], usize> = model.grid.nodes.iter().enumerate().map(|(k, nd)| (nd.ij, k)).collect();
    let mut phi = vec![f64::NAN; n];
    let mut m = vec![f64::NAN; n];
    let mut seen = vec![false; n];
    for _ in 0..n {
        let (i, l) = next()?;
        let p: Vec<&str> = l.split_whitespace().collect();
        if p.len() != 4 {
            return Err(corrupt(i, "node line needs 'i j phi m'"));
        }
        let ij = [num(p[0], i)?, num(p[1], i)?];
        let k = *index.get(&ij).ok_or_else(|| corrupt(i, format!("node {ij:?} is not on the grid")))?;
        if seen[k] {
            return Err(corrupt(i, format!("node {ij:?} repeated")));
        }
        seen[k] = true;
        let (a, b): (f64, f64) = (num(p[2], i)?, num(p[3], i)?);
        if !a.is_finite() || !b.is_finite() {
            return Err(corrupt(i, "non-finite value"));
        }
        phi[k] = a;
        m[k] = b;
    }
    PairState::with_fields(model, phi, m)
}

pub fn read_state_str(s: &str) -> Result<PairState> {
    read_state(s.as_bytes())
}

pub fn read_state_file(path: &std::path::Path) -> Result<PairState> {
    let f = std::fs::File::open(path)?;
    read_state(std::io::BufReader::new(f))
}

pub fn write_state_file(state: &PairState, path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_state(state, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Nodal field as a matrix over the bounding-box lattice, one row per `j`
/// (bottom first), `nan` outside the polygon. The header line is
/// `# nx ny hx hy xmin ymin xmax ymax`.
pub fn write_field<W: Write>(g: &Grid, field: &[f64], mut w: W) -> Result<()> {
    if field.len() != g.len() {
        return Err(KymError::ShapeMismatch { expected: g.len(), got: field.len() });
    }
    let (nx, ny) = (g.cells[0] + 1, g.cells[1] + 1);
    // + 0.0 turns a negative zero into zero
    let lo = [g.origin[0] + 0.0, g.origin[1] + 0.0];
    let hi = [lo[0] + g.cells[0] as f64 * g.spacing[0], lo[1] + g.cells[1] as f64 * g.spacing[1]];
    writeln!(w, "# {nx} {ny} {} {} {} {} {} {}", g.spacing[0], g.spacing[1], lo[0], lo[1], hi[0], hi[1])?;
    for j in 0..ny as i64 {
        let row: Vec<String> = (0..nx as i64)
            .map(|i| match g.index([i, j]) {
                Some(k) => field[k].to_string(),
                None => "nan".to_string(),
            })
            .collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}
