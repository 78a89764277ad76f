//! Torus-invariant Hermitian structures on toric line bundles.
//!
//! The connection is carried by the moment section `sigma = U grad(m_ref + m)`
//! with `m_ref = -1/2 sum c_i log l_i`, so that `<sigma, nu_i> = -c_i` on facet
//! `i` for every metric. The curvature matrix is `B_kj = d_k sigma_j`; then
//! `Lambda F = tr B`, `Lambda^2 (F ^ F) = 4 det B`, and `F^{0,2} = 0` holds by
//! construction.

use crate::error::{KymError, Result};
use crate::jet::Jet;
use crate::linalg::{matvec, Mat2, Sym2};
use crate::polytope::{Grid, NamedModel, Polytope};
use crate::toric::{facet_jets, fd_gradient, fd_hessian, prod_except, q_jet, MetricFields};
use rayon::prelude::*;

/// Equivariant line bundle data and its closed-form reference section.
#[derive(Clone, Debug)]
pub struct BundleData {
    /// Facet labels `c_i`.
    pub labels: Vec<i64>,
    pub sigma_ref: Vec<[f64; 2]>,
    pub b_ref: Vec<Mat2>,
}

/// Correction `m` of the bundle potential.
#[derive(Clone, Debug, PartialEq)]
pub struct BundlePotential {
    pub m: Vec<f64>,
}

impl BundlePotential {
    pub fn reference(n: usize) -> Self {
        BundlePotential { m: vec![0.0; n] }
    }
}

/// Facet labels for a degree tuple on a named model: the degrees sit on the
/// facets not through the origin (`O(p,q)` on a rectangle, `O(k)` on a triangle).
pub fn labels_from_degrees(model: &NamedModel, degrees: &[i64]) -> Result<Vec<i64>> {
    match (model, degrees) {
        (NamedModel::Square { .. } | NamedModel::Trapezoid { .. }, [p, q]) => Ok(vec![0, 0, *p, *q]),
        (NamedModel::Triangle { .. }, [k]) => Ok(vec![0, 0, *k]),
        (_, []) => Ok(vec![0; model.facets().len()]),
        _ => Err(KymError::Config(format!(
            "degree tuple of length {} does not fit model {}",
            degrees.len(),
            model.label()
        ))),
    }
}

impl BundleData {
    pub fn new(p: &Polytope, g: &Grid, labels: &[i64]) -> Result<Self> {
        if labels.len() != p.n_facets() {
            return Err(KymError::ShapeMismatch { expected: p.n_facets(), got: labels.len() });
        }
        let data: Vec<([f64; 2], Mat2)> = (0..g.len())
            .into_par_iter()
            .map(|n| {
                let ls = facet_jets(p, g, n);
                let s = reference_section_jets(p, &ls, labels);
                let b = Mat2([[s[0].d[0], s[1].d[0]], [s[0].d[1], s[1].d[1]]]);
                ([s[0].v, s[1].v], b)
            })
            .collect();
        Ok(BundleData {
            labels: labels.to_vec(),
            sigma_ref: data.iter().map(|d| d.0).collect(),
            b_ref: data.iter().map(|d| d.1).collect(),
        })
    }

    /// No reference section (flat test harness).
    pub fn trivial(n: usize, n_facets: usize) -> Self {
        BundleData { labels: vec![0; n_facets], sigma_ref: vec![[0.0; 2]; n], b_ref: vec![Mat2::ZERO; n] }
    }

    pub fn is_trivial(&self) -> bool {
        self.labels.iter().all(|c| *c == 0)
    }

    /// Facet trace `<sigma, nu_i>` prescribed by the labels.
    pub fn trace(&self, facet: usize) -> f64 {
        -(self.labels[facet] as f64)
    }
}

/// `sigma_ref = U_ref grad m_ref` with the `1/l_i` factors cancelled:
/// `sigma_ref = sum_i c_i J [sum_{k != i} nu_k <nu_k, J nu_i> prod_{j != k,i} l_j] / Q`.
fn reference_section_jets(p: &Polytope, ls: &[Jet], labels: &[i64]) -> [Jet; 2] {
    let mut num = [Jet::cst(0.0); 2];
    for (i, &c) in labels.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let ni = p.facets[i].normal_f64();
        let perp = [-ni[1], ni[0]];
        let mut v = [Jet::cst(0.0); 2];
        for (k, f) in p.facets.iter().enumerate() {
            if k == i {
                continue;
            }
            let nk = f.normal_f64();
            let w = nk[0] * perp[0] + nk[1] * perp[1];
            if w == 0.0 {
                continue;
            }
            let pr = prod_except(ls, &[k, i]);
            v[0] = v[0] + pr * (nk[0] * w);
            v[1] = v[1] + pr * (nk[1] * w);
        }
        // rotation J(a, b) = (-b, a)
        num[0] = num[0] - v[1] * c as f64;
        num[1] = num[1] + v[0] * c as f64;
    }
    let qi = q_jet(p, ls).recip();
    [num[0] * qi, num[1] * qi]
}

/// Moment section and curvature matrix of a bundle potential.
#[derive(Clone, Debug)]
pub struct Curvature {
    pub sigma: Vec<[f64; 2]>,
    /// `b[n].0[k][j] = d_k sigma_j`.
    pub b: Vec<Mat2>,
    pub grad_m: Vec<[f64; 2]>,
    pub hess_m: Vec<Sym2>,
}

/// `sigma = N sigma_ref + U grad m` with `N = (I + U_ref Hess phi)^{-1}`.
///
/// `B = B_ref + D(N sigma_ref - sigma_ref) + (D U) grad m + U Hess m`, with the
/// compact Hessian stencil on `m`. Composing two centred first differences
/// instead would decouple the four parity sublattices of `m`.
pub fn curvature_matrix(g: &Grid, mf: &MetricFields, bundle: &BundleData, bp: &BundlePotential) -> Result<Curvature> {
    let n = g.len();
    if bp.m.len() != n {
        return Err(KymError::ShapeMismatch { expected: n, got: bp.m.len() });
    }
    let gm = fd_gradient(g, &bp.m);
    let hm = fd_hessian(g, &bp.m);
    let s0: Vec<[f64; 2]> = (0..n).map(|k| mf.transfer[k].apply(bundle.sigma_ref[k])).collect();
    let sigma: Vec<[f64; 2]> = (0..n)
        .map(|k| {
            let ug = mf.inv[k].apply(gm[k]);
            [s0[k][0] + ug[0], s0[k][1] + ug[1]]
        })
        .collect();
    let mut b = bundle.b_ref.clone();
    for j in 0..2 {
        let ds: Vec<f64> = (0..n).map(|k| s0[k][j] - bundle.sigma_ref[k][j]).collect();
        for kd in 0..2 {
            for (bn, dv) in b.iter_mut().zip(matvec(g.ops.first(kd), &ds)) {
                bn.0[kd][j] += dv;
            }
        }
    }
    let du = inverse_derivatives(g, mf);
    for k in 0..n {
        for kd in 0..2 {
            for j in 0..2 {
                let mut v = 0.0;
                for l in 0..2 {
                    v += du[kd][k].get(j, l) * gm[k][l] + mf.inv[k].get(j, l) * hm[k].get(kd, l);
                }
                b[k].0[kd][j] += v;
            }
        }
    }
    Ok(Curvature { sigma, b, grad_m: gm, hess_m: hm })
}

/// `[D_1 U, D_2 U]` per node.
pub(crate) fn inverse_derivatives(g: &Grid, mf: &MetricFields) -> [Vec<Sym2>; 2] {
    let comp = |f: fn(&Sym2) -> f64| -> Vec<f64> { mf.inv.iter().map(f).collect() };
    let c = [comp(|s| s.xx), comp(|s| s.xy), comp(|s| s.yy)];
    let d = |k: usize| -> Vec<Sym2> {
        let v: Vec<Vec<f64>> = c.iter().map(|f| matvec(g.ops.first(k), f)).collect();
        (0..g.len()).map(|n| Sym2::new(v[0][n], v[1][n], v[2][n])).collect()
    };
    [d(0), d(1)]
}

/// `Lambda F = tr B`.
pub fn lambda_f(b: &[Mat2]) -> Vec<f64> {
    b.iter().map(|m| m.trace()).collect()
}

/// `Lambda^2 (F ^ F) = 4 det B`.
pub fn topform_ff(b: &[Mat2]) -> Vec<f64> {
    b.iter().map(|m| 4.0 * m.det()).collect()
}

/// `|F|^2 = (tr B)^2 - 2 det B`.
pub fn pointwise_norm_f(b: &[Mat2]) -> Result<Vec<f64>> {
    b.iter()
        .enumerate()
        .map(|(k, m)| {
            let v = m.trace().powi(2) - 2.0 * m.det();
            if v < -1e-10 {
                Err(KymError::NegativeNorm { node: k, value: v })
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// `|F|^2_g` contracted with the metric: `tr(B^T U B G)` with `G = U^{-1}`.
/// Equals `(tr B)^2 - 2 det B` exactly when `F` is of type (1,1).
pub fn metric_norm_f(b: &Mat2, inv: &Sym2, hess: &Sym2) -> f64 {
    b.transpose().mul(&inv.to_mat()).mul(b).mul(&hess.to_mat()).trace()
}
