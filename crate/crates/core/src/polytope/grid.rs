//! Closed lattice grid on a Delzant polygon.
//!
//! Nodes are the lattice points of the closed polygon (boundary included);
//! stencils are second order everywhere, one-sided where a centered stencil
//! would leave the polygon.

use super::Polytope;
use crate::error::{KymError, Result};
use crate::linalg::{compensated_sum, Sparse};
use sprs::TriMat;
use std::collections::BTreeMap;

/// Grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub ij: [i64; 2],
    pub x: [f64; 2],
    /// Bit `k` set when the node lies on facet `k`.
    pub on_facets: u32,
}

impl Node {
    pub fn is_boundary(&self) -> bool {
        self.on_facets != 0
    }
}

/// Finite-difference operators acting on nodal fields.
#[derive(Clone, Debug)]
pub struct DiffOps {
    pub d1: Sparse,
    pub d2: Sparse,
    pub d11: Sparse,
    pub d12: Sparse,
    pub d22: Sparse,
    /// Second derivatives for the divergence form `sum_jk d_jk U^jk`:
    /// along an axis facet the normal rows reflect across the facet, using
    /// that `U^nn` and its normal derivative are fixed there.
    pub div: [Sparse; 3],
}

impl DiffOps {
    pub fn first(&self, k: usize) -> &Sparse {
        if k == 0 {
            &self.d1
        } else {
            &self.d2
        }
    }
    pub fn second(&self, a: usize, b: usize) -> &Sparse {
        match (a.min(b), a.max(b)) {
            (0, 0) => &self.d11,
            (0, 1) => &self.d12,
            _ => &self.d22,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub origin: [f64; 2],
    /// `(hx, hy)`.
    pub spacing: [f64; 2],
    /// Cells per axis of the bounding box.
    pub cells: [usize; 2],
    pub nodes: Vec<Node>,
    lookup: Vec<usize>,
    /// Quadrature weights, summing to the area.
    pub weights: Vec<f64>,
    /// `l_k` at node `n`: `lvals[n * n_facets + k]`, exactly zero on facet `k`.
    lvals: Vec<f64>,
    n_facets: usize,
    /// Facet nodes ordered from edge start to edge end.
    pub facet_nodes: Vec<Vec<usize>>,
    pub ops: DiffOps,
}

const DIRS: [[i64; 2]; 4] = [[1, 0], [0, 1], [1, 1], [1, -1]];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Side {
    Centered,
    Forward,
    Backward,
}

fn first_stencil(side: Side) -> &'static [(i64, f64)] {
    match side {
        Side::Centered => &[(-1, -0.5), (1, 0.5)],
        Side::Forward => &[(0, -1.5), (1, 2.0), (2, -0.5)],
        Side::Backward => &[(0, 1.5), (-1, -2.0), (-2, 0.5)],
    }
}

fn second_stencil(side: Side) -> &'static [(i64, f64)] {
    match side {
        Side::Centered => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        Side::Forward => &[(0, 2.0), (1, -5.0), (2, 4.0), (3, -1.0)],
        Side::Backward => &[(0, 2.0), (-1, -5.0), (-2, 4.0), (-3, -1.0)],
    }
}

const SIDES: [Side; 3] = [Side::Centered, Side::Forward, Side::Backward];

type Stencil = Vec<([i64; 2], f64)>;

struct FramePick {
    dirs: [[i64; 2]; 2],
    first: [Stencil; 2],
    second: [Stencil; 2],
    mixed: Stencil,
    score: usize,
}

impl Grid {
    /// Build the grid with `n` cells per unit length (per side length for
    /// rectangles).
    pub fn new(p: &Polytope, n: usize) -> Result<Grid> {
        if n < 4 {
            return Err(KymError::GridAlignment(format!("resolution {n} too coarse (need >= 4)")));
        }
        let (lo, hi) = p.bounding_box();
        let spacing = if p.is_rectangle() {
            [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64]
        } else {
            [1.0 / n as f64, 1.0 / n as f64]
        };
        let to_idx = |x: f64, k: usize| -> Result<i64> {
            let t = (x - lo[k]) / spacing[k];
            let r = t.round();
            if (t - r).abs() > 1e-9 * (1.0 + t.abs()) {
                return Err(KymError::GridAlignment(format!(
                    "vertex coordinate {x} is not a multiple of h = {}",
                    spacing[k]
                )));
            }
            Ok(r as i64)
        };
        let cells = [to_idx(hi[0], 0)? as usize, to_idx(hi[1], 1)? as usize];
        for e in &p.edges {
            let a = [to_idx(e.start[0], 0)?, to_idx(e.start[1], 1)?];
            let b = [to_idx(e.end[0], 0)?, to_idx(e.end[1], 1)?];
            let d = [b[0] - a[0], b[1] - a[1]];
            let g = super::gcd(d[0], d[1]).max(1);
            let u = [d[0] / g, d[1] / g];
            if !DIRS.iter().any(|v| *v == u || [-v[0], -v[1]] == u) {
                return Err(KymError::GridAlignment(format!(
                    "edge direction {u:?} not representable on the lattice"
                )));
            }
        }
        let nf = p.n_facets();
        let htol = 1e-9 * (spacing[0] + spacing[1]);
        let stride = cells[0] + 1;
        let mut lookup = vec![usize::MAX; (cells[0] + 1) * (cells[1] + 1)];
        let mut nodes = Vec::new();
        let mut lvals = Vec::new();
        for j in 0..=cells[1] {
            for i in 0..=cells[0] {
                let x = [lo[0] + i as f64 * spacing[0], lo[1] + j as f64 * spacing[1]];
                let ls: Vec<f64> = p.facets.iter().map(|f| f.value(x)).collect();
                if ls.iter().any(|&l| l < -htol) {
                    continue;
                }
                let mut mask = 0u32;
                for (k, &l) in ls.iter().enumerate() {
                    if l.abs() <= htol {
                        mask |= 1 << k;
                    }
                }
                lookup[j * stride + i] = nodes.len();
                nodes.push(Node { ij: [i as i64, j as i64], x, on_facets: mask });
                lvals.extend(ls.iter().enumerate().map(|(k, &l)| if mask & (1 << k) != 0 { 0.0 } else { l }));
            }
        }
        let mut g = Grid {
            origin: lo,
            spacing,
            cells,
            nodes,
            lookup,
            weights: Vec::new(),
            lvals,
            n_facets: nf,
            facet_nodes: Vec::new(),
            ops: DiffOps {
                d1: Sparse::zero((0, 0)),
                d2: Sparse::zero((0, 0)),
                d11: Sparse::zero((0, 0)),
                d12: Sparse::zero((0, 0)),
                d22: Sparse::zero((0, 0)),
                div: [Sparse::zero((0, 0)), Sparse::zero((0, 0)), Sparse::zero((0, 0))],
            },
        };
        g.weights = g.build_weights();
        g.facet_nodes = g.build_facet_nodes(p)?;
        g.ops = g.build_ops()?;
        g.ops.div = g.build_divergence_ops(p);
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest spacing.
    pub fn h(&self) -> f64 {
        self.spacing[0].max(self.spacing[1])
    }

    pub fn index(&self, ij: [i64; 2]) -> Option<usize> {
        if ij[0] < 0 || ij[1] < 0 || ij[0] > self.cells[0] as i64 || ij[1] > self.cells[1] as i64 {
            return None;
        }
        let k = self.lookup[ij[1] as usize * (self.cells[0] + 1) + ij[0] as usize];
        (k != usize::MAX).then_some(k)
    }

    #[inline]
    pub fn l(&self, node: usize, facet: usize) -> f64 {
        self.lvals[node * self.n_facets + facet]
    }

    pub fn n_facets(&self) -> usize {
        self.n_facets
    }

    pub fn interior(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&n| !self.nodes[n].is_boundary())
    }

    /// Evaluate a function at every node.
    pub fn sample<F: Fn([f64; 2]) -> f64>(&self, f: F) -> Vec<f64> {
        self.nodes.iter().map(|n| f(n.x)).collect()
    }

    fn build_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.len()];
        let cell = self.spacing[0] * self.spacing[1];
        for j in 0..self.cells[1] as i64 {
            for i in 0..self.cells[0] as i64 {
                let c = [[i, j], [i + 1, j], [i + 1, j + 1], [i, j + 1]].map(|q| self.index(q));
                let present = c.iter().filter(|k| k.is_some()).count();
                if present == 4 {
                    for k in c.iter().flatten() {
                        w[*k] += 0.25 * cell;
                    }
                } else if present == 3 {
                    for k in c.iter().flatten() {
                        w[*k] += cell / 6.0;
                    }
                }
            }
        }
        w
    }

    fn build_facet_nodes(&self, p: &Polytope) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); p.n_facets()];
        for e in &p.edges {
            let mut v: Vec<usize> = (0..self.len()).filter(|&n| self.nodes[n].on_facets & (1 << e.facet) != 0).collect();
            let d = [e.end[0] - e.start[0], e.end[1] - e.start[1]];
            let t = |n: usize| (self.nodes[n].x[0] - e.start[0]) * d[0] + (self.nodes[n].x[1] - e.start[1]) * d[1];
            v.sort_by(|a, b| t(*a).partial_cmp(&t(*b)).unwrap());
            if v.len() < 2 {
                return Err(KymError::GridAlignment(format!("facet {} carries fewer than 2 nodes", e.facet)));
            }
            out[e.facet] = v;
        }
        Ok(out)
    }

    fn present(&self, p: [i64; 2], e: [i64; 2], offsets: &[(i64, f64)]) -> bool {
        offsets.iter().all(|(s, _)| self.index([p[0] + s * e[0], p[1] + s * e[1]]).is_some())
    }

    fn pick_frame(&self, p: [i64; 2]) -> Option<FramePick> {
        let mut best: Option<FramePick> = None;
        for a in 0..DIRS.len() {
            for b in a + 1..DIRS.len() {
                let dirs = [DIRS[a], DIRS[b]];
                let mut first: Vec<(Side, Stencil)> = Vec::new();
                let mut second: Vec<(Side, Stencil)> = Vec::new();
                for e in dirs {
                    let f = SIDES.iter().find(|s| self.present(p, e, first_stencil(**s)));
                    let s = SIDES.iter().find(|s| self.present(p, e, second_stencil(**s)));
                    let (Some(f), Some(s)) = (f, s) else { break };
                    let lift = |st: &[(i64, f64)]| st.iter().map(|(t, w)| ([t * e[0], t * e[1]], *w)).collect::<Stencil>();
                    first.push((*f, lift(first_stencil(*f))));
                    second.push((*s, lift(second_stencil(*s))));
                }
                if first.len() < 2 {
                    continue;
                }
                // mixed derivative: tensor product of first-derivative stencils
                let mut mixed: Option<(usize, Stencil)> = None;
                'outer: for sa in SIDES {
                    for sb in SIDES {
                        let mut st = Stencil::new();
                        let mut ok = true;
                        for (ta, wa) in first_stencil(sa) {
                            for (tb, wb) in first_stencil(sb) {
                                let off = [ta * dirs[0][0] + tb * dirs[1][0], ta * dirs[0][1] + tb * dirs[1][1]];
                                if self.index([p[0] + off[0], p[1] + off[1]]).is_none() {
                                    ok = false;
                                }
                                st.push((off, wa * wb));
                            }
                        }
                        if ok {
                            let sc = (sa == Side::Centered) as usize + (sb == Side::Centered) as usize;
                            mixed = Some((sc, st));
                            break 'outer;
                        }
                    }
                }
                let Some((msc, mixed)) = mixed else { continue };
                let score = 4 * ((a == 0 && b == 1) as usize)
                    + first.iter().chain(second.iter()).filter(|(s, _)| *s == Side::Centered).count()
                    + msc;
                if best.as_ref().is_none_or(|bst| score > bst.score) {
                    let [f0, f1]: [(Side, Stencil); 2] = first.try_into().ok()?;
                    let [s0, s1]: [(Side, Stencil); 2] = second.try_into().ok()?;
                    best = Some(FramePick { dirs, first: [f0.1, f1.1], second: [s0.1, s1.1], mixed, score });
                }
            }
        }
        best
    }

    fn build_ops(&self) -> Result<DiffOps> {
        let n = self.len();
        let mut t: [Vec<(usize, usize, f64)>; 5] = Default::default();
        for (row, node) in self.nodes.iter().enumerate() {
            let p = node.ij;
            let fr = self.pick_frame(p).ok_or_else(|| {
                KymError::GridAlignment(format!("no second-order stencil fits at node {:?}; refine the grid", node.x))
            })?;
            // physical frame vectors and inverse
            let v = fr.dirs.map(|d| [d[0] as f64 * self.spacing[0], d[1] as f64 * self.spacing[1]]);
            let det = v[0][0] * v[1][1] - v[1][0] * v[0][1];
            // V = [v0 v1] as columns; winv = V^{-1}
            let winv = [[v[1][1] / det, -v[1][0] / det], [-v[0][1] / det, v[0][0] / det]];
            let mut acc: [BTreeMap<usize, f64>; 5] = Default::default();
            let mut put = |slot: usize, st: &Stencil, coef: f64| {
                if coef == 0.0 {
                    return;
                }
                for (off, w) in st {
                    let col = self.index([p[0] + off[0], p[1] + off[1]]).expect("stencil node");
                    *acc[slot].entry(col).or_insert(0.0) += coef * w;
                }
            };
            // grad_i = sum_a winv[a][i] delta_a
            for i in 0..2 {
                for a in 0..2 {
                    put(i, &fr.first[a], winv[a][i]);
                }
            }
            // H_ij = sum_ab winv[a][i] K_ab winv[b][j]
            for (slot, (i, j)) in [(2, (0, 0)), (3, (0, 1)), (4, (1, 1))] {
                for a in 0..2 {
                    for b in 0..2 {
                        let c = winv[a][i] * winv[b][j];
                        if a == b {
                            put(slot, &fr.second[a], c);
                        } else {
                            put(slot, &fr.mixed, c);
                        }
                    }
                }
            }
            for s in 0..5 {
                for (&col, &w) in &acc[s] {
                    if w != 0.0 {
                        t[s].push((row, col, w));
                    }
                }
            }
        }
        let mk = |v: &Vec<(usize, usize, f64)>| {
            let mut m = TriMat::new((n, n));
            for &(r, c, w) in v {
                m.add_triplet(r, c, w);
            }
            m.to_csr()
        };
        let (d11, d12, d22) = (mk(&t[2]), mk(&t[3]), mk(&t[4]));
        Ok(DiffOps { d1: mk(&t[0]), d2: mk(&t[1]), div: [d11.clone(), d12.clone(), d22.clone()], d11, d12, d22 })
    }

    /// Side of the axis facets through a node: `Forward` when the polygon
    /// lies on the increasing side along that axis.
    fn axis_sides(&self, p: &Polytope, node: usize) -> [Option<Side>; 2] {
        let mut out = [None, None];
        for (k, f) in p.facets.iter().enumerate() {
            if self.nodes[node].on_facets & (1 << k) == 0 {
                continue;
            }
            for a in 0..2 {
                if f.normal[1 - a] == 0 {
                    out[a] = Some(if f.normal[a] > 0 { Side::Forward } else { Side::Backward });
                }
            }
        }
        out
    }

    /// Rows of the three divergence operators at a node inside a facet with
    /// normal `(+-1, +-1)`, written in the frame `n = nu / sqrt 2`,
    /// `t = J n` (reflected `d_nn`, centered `d_tt`, two-point `d_nt`) and
    /// rotated back: `d_jk U^jk = d_nn U^nn + 2 d_nt U^nt + d_tt U^tt`.
    fn diagonal_rows(&self, p: &Polytope, node: usize) -> Option<[Vec<(usize, f64)>; 3]> {
        let h = self.spacing[0];
        if (self.spacing[1] - h).abs() > 1e-12 * h {
            return None;
        }
        let nd = &self.nodes[node];
        let f = p.facets.iter().enumerate().find(|(k, f)| {
            nd.on_facets & (1 << k) != 0 && f.normal[0].abs() == 1 && f.normal[1].abs() == 1
        })?;
        let e_in = f.1.normal;
        let e_t = [-e_in[1], e_in[0]];
        let at = |c: [i64; 2]| self.index([nd.ij[0] + c[0], nd.ij[1] + c[1]]);
        let add = |a: [i64; 2], b: [i64; 2]| [a[0] + b[0], a[1] + b[1]];
        let neg = |a: [i64; 2]| [-a[0], -a[1]];
        let h2 = h * h;
        let dnn = vec![([0, 0], -1.0 / h2), (e_in, 1.0 / h2)];
        let dtt = vec![([0, 0], -1.0 / h2), (e_t, 0.5 / h2), (neg(e_t), 0.5 / h2)];
        let q = 0.25 / h2;
        let dnt = vec![(add(e_in, e_t), q), (add(e_in, neg(e_t)), -q), (e_t, -q), (neg(e_t), q)];
        let r2 = std::f64::consts::FRAC_1_SQRT_2;
        let n = [e_in[0] as f64 * r2, e_in[1] as f64 * r2];
        let t = [e_t[0] as f64 * r2, e_t[1] as f64 * r2];
        let coef = [
            [n[0] * n[0], 2.0 * n[0] * t[0], t[0] * t[0]],
            [n[0] * n[1], n[0] * t[1] + n[1] * t[0], t[0] * t[1]],
            [n[1] * n[1], 2.0 * n[1] * t[1], t[1] * t[1]],
        ];
        let mut out: [Vec<(usize, f64)>; 3] = Default::default();
        for (s, c) in coef.iter().enumerate() {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for (st, w) in [(&dnn, c[0]), (&dnt, c[1]), (&dtt, c[2])] {
                for &(off, v) in st {
                    *acc.entry(at(off)?).or_insert(0.0) += w * v;
                }
            }
            out[s] = acc.into_iter().filter(|(_, v)| *v != 0.0).collect();
        }
        Some(out)
    }

    fn build_divergence_ops(&self, p: &Polytope) -> [Sparse; 3] {
        let n = self.len();
        let axis = [[1i64, 0], [0, 1]];
        let mut rows: [BTreeMap<usize, Vec<(usize, f64)>>; 3] = Default::default();
        for (row, node) in self.nodes.iter().enumerate() {
            let sides = self.axis_sides(p, row);
            if sides == [None, None] {
                if let Some(st) = self.diagonal_rows(p, row) {
                    for (s, r) in st.into_iter().enumerate() {
                        rows[s].insert(row, r);
                    }
                }
                continue;
            }
            let at = |off: [i64; 2]| self.index([node.ij[0] + off[0], node.ij[1] + off[1]]);
            for a in 0..2 {
                let Some(side) = sides[a] else { continue };
                let s = if side == Side::Forward { 1 } else { -1 };
                let e = axis[a];
                if let Some(nb) = at([s * e[0], s * e[1]]) {
                    let h2 = self.spacing[a] * self.spacing[a];
                    rows[2 * a].insert(row, vec![(row, -2.0 / h2), (nb, 2.0 / h2)]);
                }
            }
            // two-point differences across the facet, centered along it
            let first = |a: usize| -> Option<Vec<(i64, f64)>> {
                let h = self.spacing[a];
                let e = axis[a];
                let has = |t: i64| at([t * e[0], t * e[1]]).is_some();
                match sides[a] {
                    Some(Side::Forward) => Some(vec![(0, -1.0 / h), (1, 1.0 / h)]),
                    Some(_) => Some(vec![(-1, -1.0 / h), (0, 1.0 / h)]),
                    None if has(-1) && has(1) => Some(vec![(-1, -0.5 / h), (1, 0.5 / h)]),
                    None => None,
                }
            };
            if let (Some(fx), Some(fy)) = (first(0), first(1)) {
                let mut st = Vec::new();
                for &(tx, wx) in &fx {
                    for &(ty, wy) in &fy {
                        st.push((at([tx, ty]), wx * wy));
                    }
                }
                if st.iter().all(|(c, _)| c.is_some()) {
                    rows[1].insert(row, st.into_iter().map(|(c, w)| (c.unwrap(), w)).collect());
                }
            }
        }
        let base = [&self.ops.d11, &self.ops.d12, &self.ops.d22];
        std::array::from_fn(|s| {
            let mut m = TriMat::new((n, n));
            for (r, vals) in base[s].outer_iterator().enumerate() {
                match rows[s].get(&r) {
                    Some(st) => st.iter().for_each(|&(c, w)| m.add_triplet(r, c, w)),
                    None => vals.iter().for_each(|(c, &w)| m.add_triplet(r, c, w)),
                }
            }
            m.to_csr()
        })
    }
}

/// Quadrature approximation of the integral of a nodal field.
pub fn integrate(field: &[f64], g: &Grid) -> Result<f64> {
    if field.len() != g.len() {
        return Err(KymError::ShapeMismatch { expected: g.len(), got: field.len() });
    }
    Ok(compensated_sum(field.iter().zip(&g.weights).map(|(f, w)| f * w)))
}

/// Outward flux of a nodal vector field through the boundary, computed from
/// its facet traces `<sigma, nu_k>` by the trapezoid rule along each edge.
pub fn boundary_flux(field: &[[f64; 2]], p: &Polytope, g: &Grid) -> Result<f64> {
    if field.len() != g.len() {
        return Err(KymError::ShapeMismatch { expected: g.len(), got: field.len() });
    }
    let mut parts = Vec::new();
    for (k, f) in p.facets.iter().enumerate() {
        let nu = f.normal_f64();
        let nn = (nu[0] * nu[0] + nu[1] * nu[1]).sqrt();
        let nodes = &g.facet_nodes[k];
        for w in nodes.windows(2) {
            let (a, b) = (&g.nodes[w[0]], &g.nodes[w[1]]);
            let ds = ((b.x[0] - a.x[0]).powi(2) + (b.x[1] - a.x[1]).powi(2)).sqrt();
            let ta = field[w[0]][0] * nu[0] + field[w[0]][1] * nu[1];
            let tb = field[w[1]][0] * nu[0] + field[w[1]][1] * nu[1];
            // outward normal is -nu / |nu|
            parts.push(-0.5 * (ta + tb) * ds / nn);
        }
    }
    Ok(compensated_sum(parts))
}

/// Outward flux from per-facet constant traces `<sigma, nu_k>`.
pub fn flux_from_traces(traces: &[Option<f64>], p: &Polytope) -> Result<f64> {
    if traces.len() != p.n_facets() {
        return Err(KymError::ShapeMismatch { expected: p.n_facets(), got: traces.len() });
    }
    let mut parts = Vec::new();
    for (k, t) in traces.iter().enumerate() {
        let t = t.ok_or(KymError::MissingTrace(k))?;
        parts.push(-t * p.lattice_length(k));
    }
    Ok(compensated_sum(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matvec;
    use crate::polytope::{build_polytope, NamedModel, PolytopeSpec};

    fn setup(s: &str, n: usize) -> (Polytope, Grid) {
        let p = build_polytope(&PolytopeSpec::Named(NamedModel::parse(s).unwrap())).unwrap();
        let g = Grid::new(&p, n).unwrap();
        (p, g)
    }

    #[test]
    fn weights_sum_to_area() {
        for (s, a) in [("square(1,1)", 1.0), ("triangle(1)", 0.5), ("trapezoid(1,2)", 1.5), ("square(2,1.5)", 3.0)] {
            let (_, g) = setup(s, 16);
            assert!((integrate(&vec![1.0; g.len()], &g).unwrap() - a).abs() < 1e-13, "{s}");
        }
    }

    #[test]
    fn monomial_integrals() {
        let (_, g) = setup("square(1,1)", 32);
        let v = integrate(&g.sample(|x| x[0]), &g).unwrap();
        assert!((v - 0.5).abs() < 1e-14);
        let (_, g) = setup("triangle(1)", 64);
        let v = integrate(&g.sample(|x| x[0] * x[1]), &g).unwrap();
        assert!((v - 1.0 / 24.0).abs() < 1e-4);
    }

    #[test]
    fn quadrature_converges_second_order() {
        let f = |x: [f64; 2]| (x[0] * x[1]).powi(2) + x[0].powi(3);
        // triangle: int x^2 y^2 = 2!2!/6! = 4/720, int x^3 = 3!/5! = 1/20
        let ex = 4.0 / 720.0 + 1.0 / 20.0;
        let e1 = {
            let (_, g) = setup("triangle(1)", 16);
            (integrate(&g.sample(f), &g).unwrap() - ex).abs()
        };
        let e2 = {
            let (_, g) = setup("triangle(1)", 32);
            (integrate(&g.sample(f), &g).unwrap() - ex).abs()
        };
        assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn stencils_exact_on_quadratics() {
        for s in ["square(1,1)", "triangle(1)", "trapezoid(1,2)"] {
            let (_, g) = setup(s, 8);
            let f = g.sample(|x| 0.3 + x[0] - 2.0 * x[1] + 1.5 * x[0] * x[0] - 0.7 * x[0] * x[1] + 0.25 * x[1] * x[1]);
            let d1 = matvec(&g.ops.d1, &f);
            let d2 = matvec(&g.ops.d2, &f);
            let d11 = matvec(&g.ops.d11, &f);
            let d12 = matvec(&g.ops.d12, &f);
            let d22 = matvec(&g.ops.d22, &f);
            for (k, nd) in g.nodes.iter().enumerate() {
                let x = nd.x;
                assert!((d1[k] - (1.0 + 3.0 * x[0] - 0.7 * x[1])).abs() < 1e-10, "{s} d1 at {x:?}");
                assert!((d2[k] - (-2.0 - 0.7 * x[0] + 0.5 * x[1])).abs() < 1e-10, "{s} d2");
                assert!((d11[k] - 3.0).abs() < 1e-9, "{s} d11 at {x:?}");
                assert!((d12[k] + 0.7).abs() < 1e-9, "{s} d12 at {x:?}");
                assert!((d22[k] - 0.5).abs() < 1e-9, "{s} d22");
            }
        }
    }

    #[test]
    fn flux_of_linear_fields() {
        let (p, g) = setup("square(1,1)", 16);
        let s: Vec<[f64; 2]> = g.nodes.iter().map(|n| [1.0 * n.x[0], 2.0 * n.x[1]]).collect();
        assert!((boundary_flux(&s, &p, &g).unwrap() - 3.0).abs() < 1e-13);
        let zero = vec![[0.0; 2]; g.len()];
        assert_eq!(boundary_flux(&zero, &p, &g).unwrap(), 0.0);
        let (p, g) = setup("square(2,3)", 12);
        let s: Vec<[f64; 2]> = g.nodes.iter().map(|n| n.x).collect();
        assert!((boundary_flux(&s, &p, &g).unwrap() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn flux_from_constant_traces() {
        let (p, _) = setup("square(1,1)", 8);
        let f = flux_from_traces(&[Some(0.0), Some(0.0), Some(-1.0), Some(-2.0)], &p).unwrap();
        assert!((f - 3.0).abs() < 1e-15);
        assert_eq!(flux_from_traces(&[Some(0.0), None, Some(0.0), Some(0.0)], &p).unwrap_err(), KymError::MissingTrace(1));
    }

    #[test]
    fn refinement_nests_nodes() {
        let (_, g1) = setup("trapezoid(1,2)", 8);
        let (_, g2) = setup("trapezoid(1,2)", 16);
        for n in &g1.nodes {
            assert!(g2.index([2 * n.ij[0], 2 * n.ij[1]]).is_some());
        }
    }
}
