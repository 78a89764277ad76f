//! Run configuration: TOML with `[polytope]`, `[bundle]`, `[coupling]`,
//! `[solver]` and optional `[perturbation]`, `[flow]`, `[geodesic]`, `[run]`.

use kym::perturb::Perturbation;
use kym::polytope::NamedModel;
use kym::solver::{ContinuationPath, ContinuationTarget, FlowOptions, NewtonOptions};
use kym::{Coupling, Facet, KymError, Model, PolytopeSpec, Result};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub polytope: PolytopeSection,
    pub bundle: BundleSection,
    pub coupling: CouplingSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub perturbation: Option<Perturbation>,
    #[serde(default)]
    pub flow: FlowOptions,
    #[serde(default)]
    pub geodesic: GeodesicSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeSection {
    /// `square(1,1)`, `triangle(1)`, `trapezoid(1,2)`.
    pub model: Option<String>,
    pub facets: Option<Vec<FacetEntry>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacetEntry {
    pub normal: [i64; 2],
    pub offset: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSection {
    /// Degree tuple for a named model; empty for the trivial bundle.
    pub degrees: Option<Vec<i64>>,
    /// One label per facet.
    pub labels: Option<Vec<i64>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    pub alpha0: f64,
    pub alpha1: f64,
    /// Continuation legs; the last one is the final target.
    pub path: Option<Vec<Leg>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Leg {
    pub alpha0: Option<f64>,
    pub alpha1: f64,
    #[serde(default = "unit_scale")]
    pub scale: [f64; 2],
}

fn unit_scale() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// Lattice cells per unit length.
    pub grid: usize,
    pub tol: f64,
    pub max_iterations: usize,
    pub min_damping: f64,
    /// Start from this state file instead of the reference state.
    pub start: Option<PathBuf>,
    pub max_step: f64,
    pub min_step: f64,
    pub futaki_threshold: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let n = NewtonOptions::default();
        let c = ContinuationPath::new(Vec::new());
        SolverSection {
            grid: 32,
            tol: n.tol,
            max_iterations: n.max_iterations,
            min_damping: n.min_damping,
            start: None,
            max_step: c.max_step,
            min_step: c.min_step,
            futaki_threshold: c.futaki_threshold,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicSection {
    pub start: Option<PathBuf>,
    pub end: Option<PathBuf>,
    pub samples: usize,
}

impl Default for GeodesicSection {
    fn default() -> Self {
        GeodesicSection { start: None, end: None, samples: 33 }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub grid: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!(" (line {})", text[..s.start].matches('\n').count() + 1)).unwrap_or_default();
            KymError::Config(format!("{}{at}", e.message()))
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KymError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        // relative state paths are relative to the config file
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.solver.start, &mut cfg.geodesic.start, &mut cfg.geodesic.end].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(g) = o.grid {
            self.solver.grid = g;
        }
        if let Some(s) = o.seed {
            self.run.seed = Some(s);
        }
        if let Some(t) = o.tol {
            self.solver.tol = t;
        }
    }

    /// Checks everything that can be checked without building the grid.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KymError::Config(m));
        match (&self.polytope.model, &self.polytope.facets) {
            (Some(_), Some(_)) => return bad("polytope: give either 'model' or 'facets', not both".into()),
            (None, None) => return bad("polytope: missing key 'model' (or 'facets')".into()),
            _ => {}
        }
        match (&self.bundle.degrees, &self.bundle.labels) {
            (Some(_), Some(_)) => return bad("bundle: give either 'degrees' or 'labels', not both".into()),
            (None, None) => return bad("bundle: missing key 'degrees' (or 'labels')".into()),
            (Some(_), None) if self.polytope.model.is_none() => {
                return bad("bundle: 'degrees' needs a named polytope model; use 'labels' with facets".into())
            }
            _ => {}
        }
        Coupling::new(self.coupling.alpha0, self.coupling.alpha1)?;
        for (k, leg) in self.coupling.path.iter().flatten().enumerate() {
            Coupling::new(leg.alpha0.unwrap_or(self.coupling.alpha0), leg.alpha1)
                .map_err(|e| KymError::Config(format!("coupling.path[{k}]: {e}")))?;
            if leg.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return bad(format!("coupling.path[{k}]: scale factors must be positive"));
            }
        }
        let s = &self.solver;
        if s.grid < 2 {
            return bad(format!("solver: grid must be at least 2, got {}", s.grid));
        }
        if !(s.tol.is_finite() && s.tol > 0.0) {
            return bad(format!("solver: tol must be positive, got {}", s.tol));
        }
        if !(s.min_damping > 0.0 && s.min_damping <= 1.0) {
            return bad(format!("solver: min_damping must lie in (0, 1], got {}", s.min_damping));
        }
        if !(s.min_step > 0.0 && s.min_step <= s.max_step && s.max_step <= 1.0) {
            return bad("solver: need 0 < min_step <= max_step <= 1".into());
        }
        if let Some(p) = &self.perturbation {
            if !(p.phi_amplitude.is_finite() && p.m_amplitude.is_finite()) {
                return bad("perturbation: amplitudes must be finite".into());
            }
        }
        if self.geodesic.samples < 3 {
            return bad(format!("geodesic: samples must be at least 3, got {}", self.geodesic.samples));
        }
        Ok(())
    }

    pub fn coupling(&self) -> Result<Coupling> {
        Coupling::new(self.coupling.alpha0, self.coupling.alpha1)
    }

    pub fn newton(&self) -> NewtonOptions {
        NewtonOptions { tol: self.solver.tol, max_iterations: self.solver.max_iterations, min_damping: self.solver.min_damping }
    }

    /// Continuation targets; a single leg at `[coupling]` when no path is given.
    pub fn continuation(&self) -> Result<ContinuationPath> {
        let targets = match &self.coupling.path {
            Some(legs) => legs
                .iter()
                .map(|l| {
                    Ok(ContinuationTarget {
                        coupling: Coupling::new(l.alpha0.unwrap_or(self.coupling.alpha0), l.alpha1)?,
                        scale: l.scale,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => vec![ContinuationTarget { coupling: self.coupling()?, scale: [1.0, 1.0] }],
        };
        let mut p = ContinuationPath::new(targets);
        p.max_step = self.solver.max_step;
        p.min_step = self.solver.min_step;
        p.futaki_threshold = self.solver.futaki_threshold;
        p.newton = self.newton();
        Ok(p)
    }

    pub fn model(&self) -> Result<Arc<Model>> {
        let n = self.solver.grid;
        match (&self.polytope.model, &self.polytope.facets) {
            (Some(name), _) => {
                let nm = NamedModel::parse(name)?;
                let labels = match (&self.bundle.labels, &self.bundle.degrees) {
                    (Some(l), _) => l.clone(),
                    (None, Some(d)) => kym::gauge::labels_from_degrees(&nm, d)?,
                    (None, None) => unreachable!("validated"),
                };
                Model::from_spec(&PolytopeSpec::Named(nm), n, &labels)
            }
            (None, Some(f)) => {
                let facets: Vec<Facet> = f.iter().map(|e| Facet::new(e.normal, e.offset)).collect();
                let labels = self.bundle.labels.clone().unwrap_or_else(|| vec![0; facets.len()]);
                Model::from_spec(&PolytopeSpec::Facets(facets), n, &labels)
            }
            (None, None) => unreachable!("validated"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQUARE: &str = r#"
[polytope]
model = "square(1,1)"
[bundle]
degrees = [1, 2]
[coupling]
alpha0 = 1.0
alpha1 = 0.1
[solver]
grid = 8
"#;

    #[test]
    fn minimal_square_parses() {
        let c = RunConfig::parse(SQUARE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.model().unwrap().bundle.labels, vec![0, 0, 1, 2]);
        assert_eq!(c.continuation().unwrap().targets.len(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::parse(&SQUARE.replace("grid = 8", "grid = 8\ngird = 9")).unwrap_err();
        assert!(e.to_string().contains("gird"), "{e}");
    }

    #[test]
    fn missing_key_is_named() {
        let e = RunConfig::parse(&SQUARE.replace("alpha1 = 0.1", "")).unwrap_err();
        assert!(e.to_string().contains("alpha1"), "{e}");
        let c = RunConfig::parse(&SQUARE.replace("model = \"square(1,1)\"", "")).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("model"));
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::parse(SQUARE).unwrap();
        c.apply(&Overrides { grid: Some(16), seed: Some(3), tol: Some(1e-6) });
        assert_eq!((c.solver.grid, c.run.seed, c.solver.tol), (16, Some(3), 1e-6));
    }

    #[test]
    fn facet_lists_take_labels_not_degrees() {
        let text = r#"
[polytope]
facets = [{ normal = [1, 0], offset = 0.0 }, { normal = [0, 1], offset = 0.0 }, { normal = [-1, -1], offset = 1.0 }]
[bundle]
labels = [0, 0, 1]
[coupling]
alpha0 = 1.0
alpha1 = 0.5
"#;
        let mut c = RunConfig::parse(text).unwrap();
        c.validate().unwrap();
        c.solver.grid = 8;
        assert_eq!(c.model().unwrap().polytope.facets.len(), 3);
        c.bundle = BundleSection { degrees: Some(vec![1]), labels: None };
        assert!(c.validate().is_err());
    }
}
