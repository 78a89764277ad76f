//! Symplectic potentials, inverse Hessians and Abreu's scalar curvature.
//!
//! `u = u_ref + phi` with `u_ref = 1/2 sum l_i log l_i`. The reference inverse
//! Hessian is smooth up to the boundary and is evaluated in closed form:
//! `U_ref = 2 adj(M) / Q`, `M = sum nu_i nu_i^T prod_{j != i} l_j`,
//! `Q = sum_{i<j} det(nu_i, nu_j)^2 prod_{k != i,j} l_k`.
//! Scalar curvature uses `S = -1/2 sum_jk d_j d_k U^{jk}`, so a unit interval
//! factor contributes 2 and the average of `S` is the lattice perimeter over the
//! area.

use crate::error::{KymError, Result};
use crate::jet::Jet;
use crate::linalg::{matvec, Mat2, Sym2};
use crate::polytope::{Grid, Polytope};
use crate::system::Model;
use rayon::prelude::*;

/// Correction `phi` of the symplectic potential on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SymplecticPotential {
    pub phi: Vec<f64>,
}

impl SymplecticPotential {
    pub fn reference(n: usize) -> Self {
        SymplecticPotential { phi: vec![0.0; n] }
    }
}

/// Closed-form data of the Guillemin potential at the grid nodes.
#[derive(Clone, Debug)]
pub struct ReferenceMetric {
    pub inv: Vec<Sym2>,
    pub scalar: Vec<f64>,
    /// `Hess u_ref`, interior nodes only.
    pub hess: Vec<Option<Sym2>>,
}

pub(crate) fn facet_jets(p: &Polytope, g: &Grid, node: usize) -> Vec<Jet> {
    let x = g.nodes[node].x;
    p.facets
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let mut j = Jet::affine(f.normal_f64(), f.offset, x);
            j.v = g.l(node, k);
            j
        })
        .collect()
}

pub(crate) fn prod_except(ls: &[Jet], skip: &[usize]) -> Jet {
    ls.iter()
        .enumerate()
        .filter(|(k, _)| !skip.contains(k))
        .fold(Jet::cst(1.0), |acc, (_, l)| acc * *l)
}

pub(crate) fn q_jet(p: &Polytope, ls: &[Jet]) -> Jet {
    let mut q = Jet::cst(0.0);
    let nf = ls.len();
    for i in 0..nf {
        for j in i + 1..nf {
            let (a, b) = (p.facets[i].normal, p.facets[j].normal);
            let d = (a[0] * b[1] - a[1] * b[0]) as f64;
            if d != 0.0 {
                q = q + prod_except(ls, &[i, j]) * (d * d);
            }
        }
    }
    q
}

/// `[U11, U12, U22]` of the reference potential as jets.
pub(crate) fn reference_inverse_jets(p: &Polytope, ls: &[Jet]) -> [Jet; 3] {
    let mut m = [Jet::cst(0.0); 3];
    for (i, f) in p.facets.iter().enumerate() {
        let nu = f.normal_f64();
        let pi = prod_except(ls, &[i]);
        m[0] = m[0] + pi * (nu[0] * nu[0]);
        m[1] = m[1] + pi * (nu[0] * nu[1]);
        m[2] = m[2] + pi * (nu[1] * nu[1]);
    }
    let q2 = q_jet(p, ls).recip() * 2.0;
    [m[2] * q2, -(m[1] * q2), m[0] * q2]
}

impl ReferenceMetric {
    pub fn new(p: &Polytope, g: &Grid) -> Self {
        let data: Vec<(Sym2, f64, Option<Sym2>)> = (0..g.len())
            .into_par_iter()
            .map(|n| {
                let ls = facet_jets(p, g, n);
                let u = reference_inverse_jets(p, &ls);
                let inv = Sym2::new(u[0].v, u[1].v, u[2].v);
                let s = -0.5 * (u[0].h[0] + 2.0 * u[1].h[1] + u[2].h[2]);
                let hess = if g.nodes[n].is_boundary() {
                    None
                } else {
                    let mut h = Sym2::default();
                    for (f, l) in p.facets.iter().zip(&ls) {
                        let nu = f.normal_f64();
                        h.xx += 0.5 * nu[0] * nu[0] / l.v;
                        h.xy += 0.5 * nu[0] * nu[1] / l.v;
                        h.yy += 0.5 * nu[1] * nu[1] / l.v;
                    }
                    Some(h)
                };
                (inv, s, hess)
            })
            .collect();
        ReferenceMetric {
            inv: data.iter().map(|d| d.0).collect(),
            scalar: data.iter().map(|d| d.1).collect(),
            hess: data.iter().map(|d| d.2).collect(),
        }
    }

    /// `u_ref = 1/2 sum l log l` at a point.
    pub fn potential(p: &Polytope, x: [f64; 2]) -> f64 {
        0.5 * p
            .facets
            .iter()
            .map(|f| {
                let l = f.value(x);
                if l > 0.0 {
                    l * l.ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    }
}

/// Per-node metric data of `u = u_ref + phi`.
#[derive(Clone, Debug)]
pub struct MetricFields {
    /// `Hess u`; `None` on boundary nodes where it is infinite.
    pub hess: Vec<Option<Sym2>>,
    /// `U = (Hess u)^{-1}`, smooth up to the boundary.
    pub inv: Vec<Sym2>,
    pub scalar: Vec<f64>,
    /// `(I + U_ref Hess phi)^{-1}`.
    pub(crate) transfer: Vec<Mat2>,
}

impl MetricFields {
    /// Flat test metric `U = I` (no reference part).
    pub fn flat(n: usize) -> Self {
        MetricFields {
            hess: vec![Some(Sym2::IDENTITY); n],
            inv: vec![Sym2::IDENTITY; n],
            scalar: vec![0.0; n],
            transfer: vec![Mat2::IDENTITY; n],
        }
    }
}

/// Finite-difference Hessian of a nodal field, `[H11, H12, H22]` per node.
pub fn fd_hessian(g: &Grid, f: &[f64]) -> Vec<Sym2> {
    let a = matvec(&g.ops.d11, f);
    let b = matvec(&g.ops.d12, f);
    let c = matvec(&g.ops.d22, f);
    (0..f.len()).map(|k| Sym2::new(a[k], b[k], c[k])).collect()
}

pub fn fd_gradient(g: &Grid, f: &[f64]) -> Vec<[f64; 2]> {
    let a = matvec(&g.ops.d1, f);
    let b = matvec(&g.ops.d2, f);
    a.into_iter().zip(b).map(|(x, y)| [x, y]).collect()
}

/// Relative eigenvalue floor for metric positivity.
pub const POSITIVITY_TOL: f64 = 1e-10;

/// Hessian, inverse Hessian and scalar curvature of `u_ref + phi`.
pub fn hessian_fields(model: &Model, u: &SymplecticPotential) -> Result<MetricFields> {
    let g = &model.grid;
    if u.phi.len() != g.len() {
        return Err(KymError::ShapeMismatch { expected: g.len(), got: u.phi.len() });
    }
    let r = &model.reference;
    let h = fd_hessian(g, &u.phi);
    let n = g.len();
    let mut hess = Vec::with_capacity(n);
    let mut inv = Vec::with_capacity(n);
    let mut transfer = Vec::with_capacity(n);
    for k in 0..n {
        let ur = r.inv[k];
        let a = Mat2::IDENTITY.add(&ur.to_mat().mul(&h[k].to_mat()));
        // symmetric form I + R H R shares trace and determinant with a
        let (tr, det) = (a.trace(), a.det());
        let lmin = 0.5 * tr - (0.25 * tr * tr - det).max(0.0).sqrt();
        let hk = r.hess[k].map(|g0| Sym2::new(g0.xx + h[k].xx, g0.xy + h[k].xy, g0.yy + h[k].yy));
        let ok = match hk {
            Some(s) => s.eigenvalues()[0] > POSITIVITY_TOL * s.trace() && lmin > 0.0,
            None => lmin > POSITIVITY_TOL * tr,
        };
        if !ok || !det.is_finite() {
            return Err(KymError::NotPositiveDefinite { node: k, x: g.nodes[k].x });
        }
        let nk = a.inverse();
        inv.push(nk.mul(&ur.to_mat()).sym());
        transfer.push(nk);
        hess.push(hk);
    }
    let du: [Vec<f64>; 3] = [
        (0..n).map(|k| inv[k].xx - r.inv[k].xx).collect(),
        (0..n).map(|k| inv[k].xy - r.inv[k].xy).collect(),
        (0..n).map(|k| inv[k].yy - r.inv[k].yy).collect(),
    ];
    let s11 = matvec(&g.ops.div[0], &du[0]);
    let s12 = matvec(&g.ops.div[1], &du[1]);
    let s22 = matvec(&g.ops.div[2], &du[2]);
    let scalar = (0..n).map(|k| r.scalar[k] - 0.5 * (s11[k] + 2.0 * s12[k] + s22[k])).collect();
    Ok(MetricFields { hess, inv, scalar, transfer })
}

/// Abreu scalar curvature of `u_ref + phi`.
pub fn abreu_scalar(model: &Model, u: &SymplecticPotential) -> Result<Vec<f64>> {
    Ok(hessian_fields(model, u)?.scalar)
}

/// `div(U grad m) = sum_jk (d_j U^jk) d_k m + U^jk d_jk m` with compact
/// second-derivative stencils.
pub fn metric_laplacian(g: &Grid, mf: &MetricFields, m: &[f64]) -> Vec<f64> {
    let gm = fd_gradient(g, m);
    let hm = fd_hessian(g, m);
    let du = crate::gauge::inverse_derivatives(g, mf);
    (0..m.len())
        .map(|k| {
            let mut v = 0.0;
            for j in 0..2 {
                for l in 0..2 {
                    v += du[j][k].get(j, l) * gm[k][l] + mf.inv[k].get(j, l) * hm[k].get(j, l);
                }
            }
            v
        })
        .collect()
}
