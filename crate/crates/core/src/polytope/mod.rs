//! Delzant polygons, their lattice grids, quadrature and boundary flux.

mod grid;

pub use grid::{boundary_flux, flux_from_traces, integrate, DiffOps, Grid, Node};

use crate::error::{KymError, Result};
use serde::{Deserialize, Serialize};

/// Facet `l(x) = <normal, x> + offset >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub normal: [i64; 2],
    pub offset: f64,
}

impl Facet {
    pub fn new(normal: [i64; 2], offset: f64) -> Self {
        Facet { normal, offset }
    }
    #[inline]
    pub fn value(&self, x: [f64; 2]) -> f64 {
        self.normal[0] as f64 * x[0] + self.normal[1] as f64 * x[1] + self.offset
    }
    pub fn normal_f64(&self) -> [f64; 2] {
        [self.normal[0] as f64, self.normal[1] as f64]
    }
}

/// Named model with its size parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NamedModel {
    /// `[0,a] x [0,b]`.
    Square { a: f64, b: f64 },
    /// `{x >= 0, x1 + x2 <= l}`.
    Triangle { l: f64 },
    /// `{x >= 0, x1 <= a, x1 + x2 <= b}`, `0 < a < b`: first Hirzebruch surface.
    Trapezoid { a: f64, b: f64 },
}

impl NamedModel {
    pub fn facets(&self) -> Vec<Facet> {
        match *self {
            NamedModel::Square { a, b } => vec![
                Facet::new([1, 0], 0.0),
                Facet::new([0, 1], 0.0),
                Facet::new([-1, 0], a),
                Facet::new([0, -1], b),
            ],
            NamedModel::Triangle { l } => vec![
                Facet::new([1, 0], 0.0),
                Facet::new([0, 1], 0.0),
                Facet::new([-1, -1], l),
            ],
            NamedModel::Trapezoid { a, b } => vec![
                Facet::new([1, 0], 0.0),
                Facet::new([0, 1], 0.0),
                Facet::new([-1, 0], a),
                Facet::new([-1, -1], b),
            ],
        }
    }

    /// Apply class scale factors `(sa, sb)` to the size parameters.
    pub fn rescaled(&self, s: [f64; 2]) -> NamedModel {
        match *self {
            NamedModel::Square { a, b } => NamedModel::Square { a: a * s[0], b: b * s[1] },
            NamedModel::Triangle { l } => NamedModel::Triangle { l: l * s[0] },
            NamedModel::Trapezoid { a, b } => NamedModel::Trapezoid { a: a * s[0], b: b * s[1] },
        }
    }

    /// Parse `square(1,1)`, `square(2)`, `triangle(1)`, `trapezoid(1,2)`, `hirzebruch`.
    pub fn parse(s: &str) -> Result<NamedModel> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) => {
                let inner = s[i + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| KymError::Config(format!("unbalanced parentheses in model '{s}'")))?;
                let args: std::result::Result<Vec<f64>, _> =
                    inner.split(',').map(|t| t.trim().parse::<f64>()).collect();
                let args = args.map_err(|_| KymError::Config(format!("bad model parameters in '{s}'")))?;
                (s[..i].trim(), args)
            }
            None => (s, Vec::new()),
        };
        let bad = || KymError::Config(format!("wrong number of parameters for model '{s}'"));
        let m = match name {
            "square" | "rectangle" => match args.as_slice() {
                [] => NamedModel::Square { a: 1.0, b: 1.0 },
                [a] => NamedModel::Square { a: *a, b: *a },
                [a, b] => NamedModel::Square { a: *a, b: *b },
                _ => return Err(bad()),
            },
            "triangle" | "simplex" => match args.as_slice() {
                [] => NamedModel::Triangle { l: 1.0 },
                [l] => NamedModel::Triangle { l: *l },
                _ => return Err(bad()),
            },
            "trapezoid" | "hirzebruch" => match args.as_slice() {
                [] => NamedModel::Trapezoid { a: 1.0, b: 2.0 },
                [a, b] => NamedModel::Trapezoid { a: *a, b: *b },
                _ => return Err(bad()),
            },
            _ => return Err(KymError::Config(format!("unknown polytope model '{name}'"))),
        };
        let params: Vec<f64> = match m {
            NamedModel::Square { a, b } | NamedModel::Trapezoid { a, b } => vec![a, b],
            NamedModel::Triangle { l } => vec![l],
        };
        if params.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(KymError::Unbounded(format!("model '{s}' needs positive sizes")));
        }
        if let NamedModel::Trapezoid { a, b } = m {
            if b <= a {
                return Err(KymError::Unbounded(format!("trapezoid needs b > a, got ({a}, {b})")));
            }
        }
        Ok(m)
    }

    pub fn label(&self) -> String {
        match *self {
            NamedModel::Square { a, b } => format!("square({a},{b})"),
            NamedModel::Triangle { l } => format!("triangle({l})"),
            NamedModel::Trapezoid { a, b } => format!("trapezoid({a},{b})"),
        }
    }
}

/// Either a named model or an explicit facet list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PolytopeSpec {
    Named(NamedModel),
    Facets(Vec<Facet>),
}

/// Boundary edge: facet index and its two endpoints (counter-clockwise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub facet: usize,
    pub start: [f64; 2],
    pub end: [f64; 2],
}

/// Validated Delzant polygon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    pub facets: Vec<Facet>,
    /// Counter-clockwise.
    pub vertices: Vec<[f64; 2]>,
    /// Edges in counter-clockwise order.
    pub edges: Vec<Edge>,
    pub model: Option<NamedModel>,
}

pub(crate) fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn det_i(a: [i64; 2], b: [i64; 2]) -> i64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Validate a facet list or named model into a Delzant polygon.
pub fn build_polytope(spec: &PolytopeSpec) -> Result<Polytope> {
    match spec {
        PolytopeSpec::Named(m) => {
            let mut p = from_facets(m.facets())?;
            p.model = Some(m.clone());
            Ok(p)
        }
        PolytopeSpec::Facets(f) => from_facets(f.clone()),
    }
}

fn from_facets(facets: Vec<Facet>) -> Result<Polytope> {
    if facets.len() < 3 {
        return Err(KymError::Unbounded(format!("{} facets cannot bound a polygon", facets.len())));
    }
    for (i, f) in facets.iter().enumerate() {
        if f.normal == [0, 0] || !f.offset.is_finite() {
            return Err(KymError::NonDelzant(format!("facet {i} has a degenerate normal or offset")));
        }
        if gcd(f.normal[0], f.normal[1]) != 1 {
            return Err(KymError::NonDelzant(format!("facet {i} normal {:?} is not primitive", f.normal)));
        }
    }
    // recession cone check: an unbounded region contains a ray along some facet line
    for f in &facets {
        for s in [1i64, -1] {
            let d = [-f.normal[1] * s, f.normal[0] * s];
            if facets.iter().all(|g| g.normal[0] * d[0] + g.normal[1] * d[1] >= 0) {
                return Err(KymError::Unbounded(format!("region recedes along direction {d:?}")));
            }
        }
    }
    let scale = facets.iter().map(|f| f.offset.abs()).fold(1.0, f64::max);
    let tol = 1e-9 * scale;
    let mut verts: Vec<[f64; 2]> = Vec::new();
    for i in 0..facets.len() {
        for j in i + 1..facets.len() {
            let (a, b) = (facets[i].normal, facets[j].normal);
            let d = det_i(a, b);
            if d == 0 {
                continue;
            }
            let (ci, cj) = (-facets[i].offset, -facets[j].offset);
            let x = [
                (ci * b[1] as f64 - cj * a[1] as f64) / d as f64,
                (a[0] as f64 * cj - b[0] as f64 * ci) / d as f64,
            ];
            if facets.iter().all(|f| f.value(x) >= -tol)
                && !verts.iter().any(|v| (v[0] - x[0]).abs() + (v[1] - x[1]).abs() <= tol)
            {
                verts.push(x);
            }
        }
    }
    if verts.len() < 3 {
        return Err(KymError::Unbounded("feasible region is empty or degenerate".into()));
    }
    let c = [
        verts.iter().map(|v| v[0]).sum::<f64>() / verts.len() as f64,
        verts.iter().map(|v| v[1]).sum::<f64>() / verts.len() as f64,
    ];
    verts.sort_by(|p, q| {
        let ap = (p[1] - c[1]).atan2(p[0] - c[0]);
        let aq = (q[1] - c[1]).atan2(q[0] - c[0]);
        ap.partial_cmp(&aq).unwrap()
    });
    let on = |x: [f64; 2]| -> Vec<usize> {
        (0..facets.len()).filter(|&k| facets[k].value(x).abs() <= tol).collect()
    };
    for v in &verts {
        let act = on(*v);
        if act.len() != 2 {
            return Err(KymError::NonDelzant(format!(
                "{} facets vanish at vertex {v:?}, expected exactly 2",
                act.len()
            )));
        }
        let d = det_i(facets[act[0]].normal, facets[act[1]].normal);
        if d.abs() != 1 {
            return Err(KymError::NonDelzant(format!(
                "normals {:?}, {:?} at vertex {v:?} have determinant {d}",
                facets[act[0]].normal, facets[act[1]].normal
            )));
        }
    }
    let nv = verts.len();
    let mut edges = Vec::with_capacity(nv);
    for k in 0..nv {
        let (p, q) = (verts[k], verts[(k + 1) % nv]);
        let fp = on(p);
        let common: Vec<usize> = on(q).into_iter().filter(|f| fp.contains(f)).collect();
        if common.len() != 1 {
            return Err(KymError::NonDelzant(format!("vertices {p:?} and {q:?} share no facet")));
        }
        edges.push(Edge { facet: common[0], start: p, end: q });
    }
    for i in 0..facets.len() {
        if !edges.iter().any(|e| e.facet == i) {
            return Err(KymError::NonDelzant(format!("facet {i} is redundant (no edge)")));
        }
    }
    Ok(Polytope { facets, vertices: verts, edges, model: None })
}

impl Polytope {
    pub fn n_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        0.5 * (0..n)
            .map(|k| {
                let (p, q) = (self.vertices[k], self.vertices[(k + 1) % n]);
                p[0] * q[1] - p[1] * q[0]
            })
            .sum::<f64>()
    }

    /// Euclidean edge length divided by the normal length, summed over edges.
    pub fn lattice_perimeter(&self) -> f64 {
        self.edges.iter().map(|e| self.lattice_length(e.facet)).sum()
    }

    pub fn lattice_length(&self, facet: usize) -> f64 {
        let e = self.edges.iter().find(|e| e.facet == facet).expect("facet edge");
        let n = self.facets[facet].normal_f64();
        let len = ((e.end[0] - e.start[0]).powi(2) + (e.end[1] - e.start[1]).powi(2)).sqrt();
        len / (n[0] * n[0] + n[1] * n[1]).sqrt()
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.vertices.len();
        let (mut cx, mut cy, mut a) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let (p, q) = (self.vertices[k], self.vertices[(k + 1) % n]);
            let w = p[0] * q[1] - p[1] * q[0];
            a += w;
            cx += (p[0] + q[0]) * w;
            cy += (p[1] + q[1]) * w;
        }
        [cx / (3.0 * a), cy / (3.0 * a)]
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Axis-aligned rectangle (all normals along the axes).
    pub fn is_rectangle(&self) -> bool {
        self.facets.iter().all(|f| f.normal[0] == 0 || f.normal[1] == 0)
    }

    pub fn label(&self) -> String {
        match &self.model {
            Some(m) => m.label(),
            None => format!("facets{:?}", self.facets.iter().map(|f| (f.normal, f.offset)).collect::<Vec<_>>()),
        }
    }

    /// Same class up to round-off.
    pub fn same_class(&self, other: &Polytope) -> bool {
        self.facets.len() == other.facets.len()
            && self
                .facets
                .iter()
                .zip(&other.facets)
                .all(|(a, b)| a.normal == b.normal && (a.offset - b.offset).abs() <= 1e-12 * (1.0 + a.offset.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(s: &str) -> Polytope {
        build_polytope(&PolytopeSpec::Named(NamedModel::parse(s).unwrap())).unwrap()
    }

    #[test]
    fn unit_square_has_four_facets() {
        let p = named("square(1,1)");
        assert_eq!(p.n_facets(), 4);
        assert_eq!(p.vertices.len(), 4);
        assert!((p.area() - 1.0).abs() < 1e-15);
        assert!((p.lattice_perimeter() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn standard_simplex() {
        let p = named("triangle(1)");
        assert_eq!(p.n_facets(), 3);
        assert!((p.area() - 0.5).abs() < 1e-15);
        assert!((p.lattice_perimeter() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn hirzebruch_trapezoid_is_delzant() {
        let f = vec![
            Facet::new([1, 0], 0.0),
            Facet::new([0, 1], 0.0),
            Facet::new([-1, -1], 2.0),
            Facet::new([-1, 0], 1.0),
        ];
        let p = build_polytope(&PolytopeSpec::Facets(f)).unwrap();
        assert_eq!(p.vertices.len(), 4);
        assert!((p.area() - 1.5).abs() < 1e-14);
        for v in [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 2.0]] {
            assert!(p.vertices.iter().any(|w| (w[0] - v[0]).abs() + (w[1] - v[1]).abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_non_delzant_corner() {
        // weighted projective plane corner at (0,1): det = -2
        let f = vec![Facet::new([1, 0], 0.0), Facet::new([0, 1], 0.0), Facet::new([-1, -2], 2.0)];
        let e = build_polytope(&PolytopeSpec::Facets(f)).unwrap_err();
        assert_eq!(e.kind(), "NonDelzant");
    }

    #[test]
    fn rejects_unbounded_region() {
        let f = vec![Facet::new([1, 0], 0.0), Facet::new([0, 1], 0.0), Facet::new([-1, 1], 1.0)];
        let e = build_polytope(&PolytopeSpec::Facets(f)).unwrap_err();
        assert_eq!(e.kind(), "Unbounded");
    }

    #[test]
    fn rejects_non_primitive_normal() {
        let f = vec![Facet::new([2, 0], 0.0), Facet::new([0, 1], 0.0), Facet::new([-1, -1], 1.0)];
        assert_eq!(build_polytope(&PolytopeSpec::Facets(f)).unwrap_err().kind(), "NonDelzant");
    }

    #[test]
    fn parses_model_names() {
        assert_eq!(NamedModel::parse("square(2)").unwrap(), NamedModel::Square { a: 2.0, b: 2.0 });
        assert_eq!(NamedModel::parse("hirzebruch").unwrap(), NamedModel::Trapezoid { a: 1.0, b: 2.0 });
        assert!(NamedModel::parse("circle(1)").is_err());
        assert!(NamedModel::parse("trapezoid(2,1)").is_err());
    }
}
