//! Reports, iterate histories and field dumps.

use kym::invariants::s_alpha_from;
use kym::solver::IterateRecord;
use kym::state_io::{write_field, write_state_file};
use kym::{evaluate, Coupling, KymError, PairState, Result, TopoConstants};
use serde::Serialize;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// Exit code for an error: 2 for bad input, 1 for everything that went wrong
/// while computing.
pub fn exit_code(e: &KymError) -> u8 {
    match e {
        KymError::Config(_)
        | KymError::NonDelzant(_)
        | KymError::Unbounded(_)
        | KymError::GridAlignment(_)
        | KymError::ShapeMismatch { .. }
        | KymError::MissingTrace(_)
        | KymError::ClassMismatch(_)
        | KymError::PathTooCoarse(_)
        | KymError::CorruptState(_)
        | KymError::Io(_) => 2,
        _ => 1,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub message: String,
}

impl From<&KymError> for ErrorRecord {
    fn from(e: &KymError) -> Self {
        ErrorRecord { kind: e.kind(), message: e.to_string() }
    }
}

/// Seconds since the epoch; the only field allowed to differ between runs.
pub fn timestamp() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Class description shared by all reports.
#[derive(Clone, Debug, Serialize)]
pub struct ClassInfo {
    pub polytope: String,
    pub labels: Vec<i64>,
    pub grid: usize,
    pub nodes: usize,
}

impl ClassInfo {
    pub fn of(state: &PairState) -> Self {
        let m = &state.model;
        let polytope = match &m.polytope.model {
            Some(nm) => nm.label(),
            None => {
                let f: Vec<String> =
                    m.polytope.facets.iter().map(|f| format!("({},{};{})", f.normal[0], f.normal[1], f.offset)).collect();
                format!("facets[{}]", f.join(" "))
            }
        };
        ClassInfo { polytope, labels: m.bundle.labels.clone(), grid: m.resolution, nodes: m.n() }
    }
}

pub fn out_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| KymError::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| KymError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| KymError::Io(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> KymError {
    KymError::Io(e.to_string())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct HistoryRow {
    pub leg: usize,
    pub iteration: usize,
    pub residual_linf: f64,
    pub residual_l2: f64,
    pub projected_linf: f64,
    pub damping: f64,
}

pub fn history_rows(leg: usize, h: &[IterateRecord]) -> Vec<HistoryRow> {
    h.iter()
        .map(|r| HistoryRow {
            leg,
            iteration: r.iteration,
            residual_linf: r.residual_linf,
            residual_l2: r.residual_l2,
            projected_linf: r.projected_linf,
            damping: r.damping,
        })
        .collect()
}

pub fn save_state(state: &PairState, path: &Path) -> Result<()> {
    write_state_file(state, path)
}

/// `phi`, `m` and the evaluated curvature fields under `dir/fields`.
pub fn dump_fields(dir: &Path, state: &PairState, a: Coupling, tc: &TopoConstants) -> Result<()> {
    let fd = out_dir(&dir.join("fields"))?;
    let g = &state.model.grid;
    let mut fields: Vec<(&str, Vec<f64>)> = vec![("phi", state.u.phi.clone()), ("m", state.bp.m.clone())];
    if let Ok(ev) = evaluate(state) {
        let res = kym::system::residual_from(&ev, a, tc);
        fields.push(("scalar", ev.metric.scalar.clone()));
        fields.push(("lambda_f", kym::gauge::lambda_f(&ev.b)));
        fields.push(("s_alpha", s_alpha_from(&ev, a, tc)));
        fields.push(("residual_hym", res.hym));
        fields.push(("residual_scalar", res.scalar));
    }
    for (name, f) in fields {
        let file = File::create(fd.join(format!("{name}.txt")))?;
        write_field(g, &f, BufWriter::new(file))?;
    }
    Ok(())
}
