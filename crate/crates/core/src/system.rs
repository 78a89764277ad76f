//! Coupled residuals, topological constants and pointwise identities.

use crate::error::{KymError, Result};
use crate::gauge::{
    curvature_matrix, labels_from_degrees, lambda_f, metric_norm_f, pointwise_norm_f, topform_ff, BundleData,
    BundlePotential,
};
use crate::linalg::{compensated_sum, max_abs, Mat2, Sym2};
use crate::polytope::{boundary_flux, build_polytope, integrate, Grid, NamedModel, Polytope, PolytopeSpec};
use crate::toric::{fd_gradient, hessian_fields, MetricFields, ReferenceMetric, SymplecticPotential};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Coupling constants `(alpha0, alpha1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub alpha0: f64,
    pub alpha1: f64,
}

impl Coupling {
    pub fn new(alpha0: f64, alpha1: f64) -> Result<Self> {
        if !(alpha0.is_finite() && alpha1.is_finite()) || (alpha0 == 0.0 && alpha1 == 0.0) {
            return Err(KymError::Config(format!("invalid coupling ({alpha0}, {alpha1})")));
        }
        Ok(Coupling { alpha0, alpha1 })
    }

    /// `alpha = 2 alpha1 / alpha0`.
    pub fn ratio(&self) -> f64 {
        2.0 * self.alpha1 / self.alpha0
    }
}

/// Polytope, grid, reference metric and bundle data shared by all states of a
/// class.
#[derive(Debug)]
pub struct Model {
    pub polytope: Polytope,
    pub grid: Grid,
    pub reference: ReferenceMetric,
    pub bundle: BundleData,
    pub resolution: usize,
}

impl Model {
    pub fn new(polytope: Polytope, resolution: usize, labels: &[i64]) -> Result<Arc<Model>> {
        let grid = Grid::new(&polytope, resolution)?;
        let reference = ReferenceMetric::new(&polytope, &grid);
        let bundle = BundleData::new(&polytope, &grid, labels)?;
        Ok(Arc::new(Model { polytope, grid, reference, bundle, resolution }))
    }

    /// Named model with a degree tuple (empty for the trivial bundle).
    pub fn named(name: &str, resolution: usize, degrees: &[i64]) -> Result<Arc<Model>> {
        let nm = NamedModel::parse(name)?;
        let labels = labels_from_degrees(&nm, degrees)?;
        Model::new(build_polytope(&PolytopeSpec::Named(nm))?, resolution, &labels)
    }

    pub fn from_spec(spec: &PolytopeSpec, resolution: usize, labels: &[i64]) -> Result<Arc<Model>> {
        Model::new(build_polytope(spec)?, resolution, labels)
    }

    pub fn n(&self) -> usize {
        self.grid.len()
    }

    pub fn volume(&self) -> f64 {
        compensated_sum(self.grid.weights.iter().copied())
    }

    pub fn same_class(&self, other: &Model) -> bool {
        self.polytope.same_class(&other.polytope)
            && self.bundle.labels == other.bundle.labels
            && self.grid.len() == other.grid.len()
            && self.grid.spacing == other.grid.spacing
    }
}

/// A pair `(u, m)`: the solver unknown.
#[derive(Clone, Debug)]
pub struct PairState {
    pub model: Arc<Model>,
    pub u: SymplecticPotential,
    pub bp: BundlePotential,
}

impl PairState {
    /// Guillemin metric and reference bundle section.
    pub fn reference(model: &Arc<Model>) -> Self {
        let n = model.n();
        PairState { model: model.clone(), u: SymplecticPotential::reference(n), bp: BundlePotential::reference(n) }
    }

    pub fn with_fields(model: &Arc<Model>, phi: Vec<f64>, m: Vec<f64>) -> Result<Self> {
        let n = model.n();
        for v in [&phi, &m] {
            if v.len() != n {
                return Err(KymError::ShapeMismatch { expected: n, got: v.len() });
            }
        }
        Ok(PairState { model: model.clone(), u: SymplecticPotential { phi }, bp: BundlePotential { m } })
    }

    /// Stacked unknowns `(phi, m)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.u.phi.clone();
        v.extend_from_slice(&self.bp.m);
        v
    }

    pub fn from_vec(model: &Arc<Model>, x: &[f64]) -> Self {
        let n = model.n();
        PairState {
            model: model.clone(),
            u: SymplecticPotential { phi: x[..n].to_vec() },
            bp: BundlePotential { m: x[n..2 * n].to_vec() },
        }
    }

    pub fn check_class(&self, other: &PairState) -> Result<()> {
        if Arc::ptr_eq(&self.model, &other.model) || self.model.same_class(&other.model) {
            Ok(())
        } else {
            Err(KymError::ClassMismatch(format!(
                "{} / {:?} vs {} / {:?}",
                self.model.polytope.label(),
                self.model.bundle.labels,
                other.model.polytope.label(),
                other.model.bundle.labels
            )))
        }
    }
}

/// Derived fields of a state.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metric: MetricFields,
    pub sigma: Vec<[f64; 2]>,
    pub b: Vec<Mat2>,
    pub grad_m: Vec<[f64; 2]>,
    pub hess_m: Vec<Sym2>,
}

pub fn evaluate(state: &PairState) -> Result<Evaluation> {
    let m = &state.model;
    let metric = hessian_fields(m, &state.u)?;
    let c = curvature_matrix(&m.grid, &metric, &m.bundle, &state.bp)?;
    Ok(Evaluation { metric, sigma: c.sigma, b: c.b, grad_m: c.grad_m, hess_m: c.hess_m })
}

/// `(z, S_hat, c_hat, c)` and the volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoConstants {
    pub z: f64,
    pub s_hat: f64,
    pub c_hat: f64,
    pub c: f64,
    pub vol: f64,
}

impl TopoConstants {
    /// Recompute `c` for another coupling.
    pub fn with_coupling(&self, a: Coupling) -> TopoConstants {
        TopoConstants { c: a.alpha0 * self.s_hat + 2.0 * a.alpha1 * self.c_hat, ..*self }
    }
}

pub fn topo_constants(state: &PairState, a: Coupling) -> Result<TopoConstants> {
    let ev = evaluate(state)?;
    topo_constants_from(state, &ev, a)
}

/// Constants evaluated at the reference state of the class.
pub fn class_constants(model: &Arc<Model>, a: Coupling) -> Result<TopoConstants> {
    topo_constants(&PairState::reference(model), a)
}

pub fn topo_constants_from(state: &PairState, ev: &Evaluation, a: Coupling) -> Result<TopoConstants> {
    let m = &state.model;
    let vol = m.volume();
    let z = boundary_flux(&ev.sigma, &m.polytope, &m.grid)? / vol;
    let c_hat = match image_area(&ev.sigma, &m.grid, vol) {
        Some(area) => 2.0 * area / vol,
        None => integrate(&topform_ff(&ev.b), &m.grid)? / (2.0 * vol),
    };
    let s_hat = integrate(&ev.metric.scalar, &m.grid)? / vol;
    Ok(TopoConstants { z, s_hat, c_hat, c: a.alpha0 * s_hat + 2.0 * a.alpha1 * c_hat, vol })
}

/// `int det(d sigma)` with `sigma` interpolated bilinearly on full cells and
/// linearly on half cells: the signed area swept by `sigma`, which telescopes
/// to the boundary and so depends only on the facet traces. `None` when the
/// cells do not tile the polygon.
fn image_area(sigma: &[[f64; 2]], g: &Grid, vol: f64) -> Option<f64> {
    let shoelace = |ks: &[usize]| {
        0.5 * (0..ks.len())
            .map(|i| {
                let (a, b) = (sigma[ks[i]], sigma[ks[(i + 1) % ks.len()]]);
                a[0] * b[1] - a[1] * b[0]
            })
            .sum::<f64>()
    };
    let cell = g.spacing[0] * g.spacing[1];
    let (mut area, mut covered) = (0.0, 0.0);
    for i in 0..g.cells[0] as i64 {
        for j in 0..g.cells[1] as i64 {
            let ks: Vec<usize> = [[i, j], [i + 1, j], [i + 1, j + 1], [i, j + 1]].iter().filter_map(|ij| g.index(*ij)).collect();
            match ks.len() {
                4 => covered += cell,
                3 => covered += 0.5 * cell,
                _ => continue,
            }
            area += shoelace(&ks);
        }
    }
    ((covered - vol).abs() <= 1e-9 * vol).then_some(area)
}

/// Node-wise residuals of the coupled system.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    /// `Lambda F - z`.
    pub hym: Vec<f64>,
    /// `alpha0 S + alpha1 Lambda^2(F ^ F) - c`.
    pub scalar: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub hym_l2: f64,
    pub hym_linf: f64,
    pub scalar_l2: f64,
    pub scalar_linf: f64,
}

impl ResidualNorms {
    pub fn linf(&self) -> f64 {
        self.hym_linf.max(self.scalar_linf)
    }
    pub fn l2(&self) -> f64 {
        (self.hym_l2.powi(2) + self.scalar_l2.powi(2)).sqrt()
    }
}

/// Quadrature L2 norm.
pub fn l2_norm(f: &[f64], g: &Grid) -> f64 {
    compensated_sum(f.iter().zip(&g.weights).map(|(v, w)| v * v * w)).sqrt()
}

impl Residual {
    pub fn norms(&self, g: &Grid) -> ResidualNorms {
        ResidualNorms {
            hym_l2: l2_norm(&self.hym, g),
            hym_linf: max_abs(&self.hym),
            scalar_l2: l2_norm(&self.scalar, g),
            scalar_linf: max_abs(&self.scalar),
        }
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.scalar.clone();
        v.extend_from_slice(&self.hym);
        v
    }
}

pub fn residual(state: &PairState, a: Coupling, tc: &TopoConstants) -> Result<Residual> {
    let ev = evaluate(state)?;
    Ok(residual_from(&ev, a, tc))
}

pub fn residual_from(ev: &Evaluation, a: Coupling, tc: &TopoConstants) -> Residual {
    let hym = ev.b.iter().map(|b| b.trace() - tc.z).collect();
    let scalar = ev
        .metric
        .scalar
        .iter()
        .zip(&ev.b)
        .map(|(s, b)| a.alpha0 * s + a.alpha1 * 4.0 * b.det() - tc.c)
        .collect();
    Residual { hym, scalar }
}

/// Maximum node-wise violation of
/// `Lambda^2((F - z w) ^ (F - z w)) = 2 (Lambda F - 2 z)^2 - 2 |F - z w|^2`
/// with the norm contracted through the metric. Boundary nodes, where the metric
/// degenerates, are skipped.
pub fn identity_check(state: &PairState, tc: &TopoConstants) -> Result<f64> {
    let ev = evaluate(state)?;
    Ok(identity_check_from(&ev, tc))
}

pub fn identity_check_from(ev: &Evaluation, tc: &TopoConstants) -> f64 {
    let z = tc.z;
    let mut worst = 0.0f64;
    for (k, b) in ev.b.iter().enumerate() {
        let Some(g) = ev.metric.hess[k] else { continue };
        let shifted = b.sub_scalar(z);
        let lhs = topform_ff(&[shifted])[0];
        let lam = lambda_f(&[*b])[0];
        let norm = metric_norm_f(&shifted, &ev.metric.inv[k], &g);
        let rhs = 2.0 * (lam - 2.0 * z).powi(2) - 2.0 * norm;
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// `|F|^2` through the algebraic formula (fails on a sign bug).
pub fn curvature_norm(ev: &Evaluation) -> Result<Vec<f64>> {
    pointwise_norm_f(&ev.b)
}

/// Node-wise residual of the extremal-pair condition.
#[derive(Clone, Debug)]
pub struct ExtremalResidual {
    /// `4 alpha1 grad(tr B) + B grad(S_alpha)`.
    pub first: Vec<[f64; 2]>,
    /// Deviation of `S_alpha` from its best affine fit.
    pub second: Vec<f64>,
}

impl ExtremalResidual {
    pub fn max_first(&self) -> f64 {
        self.first.iter().fold(0.0f64, |m, v| m.max(v[0].abs()).max(v[1].abs()))
    }
    pub fn max_second(&self) -> f64 {
        max_abs(&self.second)
    }
}

pub fn extremal_residual(state: &PairState, a: Coupling, tc: &TopoConstants) -> Result<ExtremalResidual> {
    let ev = evaluate(state)?;
    let s_alpha = crate::invariants::s_alpha_from(&ev, a, tc);
    Ok(extremal_components(&state.model.grid, &ev.b, &s_alpha, a.alpha1))
}

/// Extremal-pair residual from curvature and a given `S_alpha` field.
pub fn extremal_components(g: &Grid, b: &[Mat2], s_alpha: &[f64], alpha1: f64) -> ExtremalResidual {
    let tr: Vec<f64> = b.iter().map(|m| m.trace()).collect();
    let gt = fd_gradient(g, &tr);
    let gs = fd_gradient(g, s_alpha);
    let first = (0..g.len())
        .map(|k| {
            let bg = b[k].apply(gs[k]);
            [4.0 * alpha1 * gt[k][0] + bg[0], 4.0 * alpha1 * gt[k][1] + bg[1]]
        })
        .collect();
    let fit = crate::invariants::affine_projection(g, s_alpha);
    let second = s_alpha.iter().zip(&fit).map(|(s, f)| s - f).collect();
    ExtremalResidual { first, second }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product(p: i64, q: i64, n: usize) -> PairState {
        PairState::reference(&Model::named("square(1,1)", n, &[p, q]).unwrap())
    }

    #[test]
    fn product_constants() {
        let a = Coupling::new(1.0, 0.3).unwrap();
        for (p, q) in [(1, 0), (1, 1), (1, 2)] {
            let tc = topo_constants(&product(p, q, 16), a).unwrap();
            assert!((tc.z - (p + q) as f64).abs() < 1e-12);
            assert!((tc.c_hat - 2.0 * (p * q) as f64).abs() < 1e-12);
            assert!((tc.s_hat - 4.0).abs() < 1e-12);
            assert!((tc.c - (4.0 + 4.0 * 0.3 * (p * q) as f64)).abs() < 1e-12);
            assert!((tc.vol - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rectangle_flux() {
        let st = PairState::reference(&Model::named("square(2,3)", 12, &[1, 2]).unwrap());
        let tc = topo_constants(&st, Coupling::new(1.0, 0.0).unwrap()).unwrap();
        assert!((tc.z - (1.0 * 3.0 + 2.0 * 2.0) / 6.0).abs() < 1e-12);
    }

    #[test]
    fn product_residuals_vanish() {
        let a = Coupling::new(1.0, 0.5).unwrap();
        let st = product(1, 2, 16);
        let tc = topo_constants(&st, a).unwrap();
        let r = residual(&st, a, &tc).unwrap();
        assert!(r.norms(&st.model.grid).linf() < 1e-11);
        assert!(identity_check(&st, &tc).unwrap() < 1e-10);
    }

    #[test]
    fn fubini_study_is_a_solution() {
        let st = PairState::reference(&Model::named("triangle(1)", 16, &[]).unwrap());
        let a = Coupling::new(1.0, 2.0).unwrap();
        let tc = topo_constants(&st, a).unwrap();
        assert!(tc.z.abs() < 1e-14 && tc.c_hat.abs() < 1e-14);
        assert!((tc.s_hat - 6.0).abs() < 1e-11);
        assert!(residual(&st, a, &tc).unwrap().norms(&st.model.grid).linf() < 1e-10);
        assert_eq!(identity_check(&st, &tc).unwrap(), 0.0);
    }

    #[test]
    fn coupling_scaling_covariance() {
        let m = Model::named("square(1,1)", 12, &[1, 1]).unwrap();
        let g = &m.grid;
        let st = PairState::with_fields(&m, g.sample(|x| 0.02 * (x[0] * x[1]).powi(2)), g.sample(|x| 0.1 * x[0] * x[1] * x[1])).unwrap();
        let a = Coupling::new(1.0, 0.4).unwrap();
        let b = Coupling::new(3.0, 1.2).unwrap();
        let ta = topo_constants(&st, a).unwrap();
        let tb = topo_constants(&st, b).unwrap();
        let ra = residual(&st, a, &ta).unwrap();
        let rb = residual(&st, b, &tb).unwrap();
        for k in 0..g.len() {
            assert!((rb.scalar[k] - 3.0 * ra.scalar[k]).abs() < 1e-10 * (1.0 + ra.scalar[k].abs()));
            assert_eq!(ra.hym[k], rb.hym[k]);
        }
    }

    #[test]
    fn manufactured_affine_s_alpha() {
        let m = Model::named("square(1,1)", 12, &[1, 2]).unwrap();
        let g = &m.grid;
        let b = m.bundle.b_ref.clone();
        let s = g.sample(|x| x[0]);
        let e = extremal_components(g, &b, &s, 0.5);
        assert!(e.max_second() < 1e-12);
        // B grad(x1) = first column of B: (d1 sigma_1, d2 sigma_1) = (1, 0)
        for v in &e.first {
            assert!((v[0] - 1.0).abs() < 1e-10 && v[1].abs() < 1e-10);
        }
    }
}
