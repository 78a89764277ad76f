//! Jacobian of the discrete residual map, finite-difference validation and the
//! self-adjointness check at Hermitian-Yang-Mills states.
//!
//! Unknowns are stacked `(phi, m)`, residual rows `(r_scalar, r_hym)`.
//! With `N = (I + U_ref Hess phi)^{-1}` and `U = N U_ref`:
//! `dU = -U Hess(dphi) U`, `d(N sigma_ref) = -U Hess(dphi) N sigma_ref`, and the
//! curvature matrix is differentiated term by term.

use crate::error::{KymError, Result};
use crate::linalg::{compensated_sum, from_triplets, matvec, matvec_t, weighted_sum, Sparse};
use crate::polytope::Grid;
use crate::system::{evaluate, l2_norm, residual, residual_from, Coupling, Evaluation, Model, PairState, TopoConstants};
use crate::toric::fd_gradient;
use std::io::Write;

/// Direction `(phi_dot, m_dot)` in the space of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    pub phi_dot: Vec<f64>,
    pub m_dot: Vec<f64>,
}

impl TangentVector {
    pub fn zero(n: usize) -> Self {
        TangentVector { phi_dot: vec![0.0; n], m_dot: vec![0.0; n] }
    }

    pub fn from_vec(x: &[f64]) -> Self {
        let n = x.len() / 2;
        TangentVector { phi_dot: x[..n].to_vec(), m_dot: x[n..].to_vec() }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.phi_dot.clone();
        v.extend_from_slice(&self.m_dot);
        v
    }

    /// Remove the quadrature mean of `phi_dot`.
    pub fn mean_zero(mut self, g: &Grid) -> Self {
        let vol = compensated_sum(g.weights.iter().copied());
        let mean = compensated_sum(self.phi_dot.iter().zip(&g.weights).map(|(v, w)| v * w)) / vol;
        self.phi_dot.iter_mut().for_each(|v| *v -= mean);
        self
    }
}

/// Sparse operator on stacked `(phi, m)` with the quadrature masses of the
/// product pairing.
#[derive(Clone, Debug)]
pub struct LinearOperator {
    pub(crate) matrix: Sparse,
    /// Quadrature weights repeated for both blocks.
    pub weights: Vec<f64>,
    /// How the entries were obtained.
    pub method: &'static str,
}

impl LinearOperator {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.matrix, x)
    }
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        matvec_t(&self.matrix, x)
    }
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.matrix.get(r, c).copied().unwrap_or(0.0)
    }

    /// `row col value` lines, zero-based.
    pub fn write_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {} {} {}", self.matrix.rows(), self.matrix.cols(), self.matrix.nnz())?;
        for (r, row) in self.matrix.outer_iterator().enumerate() {
            for (c, v) in row.iter() {
                writeln!(w, "{r} {c} {v:e}")?;
            }
        }
        Ok(())
    }
}

/// Derivatives of `S`, `tr B` and `det B` with respect to `phi` and `m`.
pub(crate) struct Pieces {
    pub ds_phi: Sparse,
    pub dtr: [Sparse; 2],
    pub ddet: [Sparse; 2],
}

pub(crate) fn pieces(model: &Model, ev: &Evaluation) -> Pieces {
    let g = &model.grid;
    let n = g.len();
    let ops = &g.ops;
    let u = &ev.metric.inv;
    let gm = &ev.grad_m;
    let hm = &ev.hess_m;
    let s0: Vec<[f64; 2]> = (0..n).map(|k| ev.metric.transfer[k].apply(model.bundle.sigma_ref[k])).collect();
    let du = crate::gauge::inverse_derivatives(g, &ev.metric);
    let field = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..n).map(f).collect() };

    // a[jl] = sum_ab U_ja U_bl D_ab, so that dU_jl = -a[jl] dphi
    let a_of = |j: usize, l: usize| -> Sparse {
        let c11 = field(&|k| u[k].get(j, 0) * u[k].get(0, l));
        let c12 = field(&|k| u[k].get(j, 0) * u[k].get(1, l) + u[k].get(j, 1) * u[k].get(0, l));
        let c22 = field(&|k| u[k].get(j, 1) * u[k].get(1, l));
        weighted_sum(&[(&c11, &ops.d11), (&c12, &ops.d12), (&c22, &ops.d22)])
    };
    let a = [[a_of(0, 0), a_of(0, 1)], [a_of(1, 0), a_of(1, 1)]];

    // d(N sigma_ref)_j = -sum_ab U_ja s0_b D_ab dphi
    let ds0: Vec<Sparse> = (0..2)
        .map(|j| {
            let c11 = field(&|k| -u[k].get(j, 0) * s0[k][0]);
            let c12 = field(&|k| -(u[k].get(j, 0) * s0[k][1] + u[k].get(j, 1) * s0[k][0]));
            let c22 = field(&|k| -u[k].get(j, 1) * s0[k][1]);
            weighted_sum(&[(&c11, &ops.d11), (&c12, &ops.d12), (&c22, &ops.d22)])
        })
        .collect();

    let mut db_phi: Vec<Vec<Sparse>> = Vec::with_capacity(2);
    let mut db_m: Vec<Vec<Sparse>> = Vec::with_capacity(2);
    for kd in 0..2 {
        let dk = ops.first(kd);
        let mut row_phi = Vec::with_capacity(2);
        let mut row_m = Vec::with_capacity(2);
        for j in 0..2 {
            let one = vec![1.0; n];
            let t0: Sparse = &dk.view() * &ds0[j].view();
            let mut terms: Vec<(Vec<f64>, Sparse)> = vec![(one, t0)];
            for l in 0..2 {
                let dka: Sparse = &dk.view() * &a[j][l].view();
                terms.push((field(&|k| -gm[k][l]), dka));
                terms.push((field(&|k| -hm[k].get(kd, l)), a[j][l].clone()));
            }
            let refs: Vec<(&[f64], &Sparse)> = terms.iter().map(|(d, m)| (d.as_slice(), m)).collect();
            row_phi.push(weighted_sum(&refs));

            let c1 = field(&|k| du[kd][k].get(j, 0));
            let c2 = field(&|k| du[kd][k].get(j, 1));
            let e1 = field(&|k| u[k].get(j, 0));
            let e2 = field(&|k| u[k].get(j, 1));
            row_m.push(weighted_sum(&[(&c1, &ops.d1), (&c2, &ops.d2), (&e1, ops.second(kd, 0)), (&e2, ops.second(kd, 1))]));
        }
        db_phi.push(row_phi);
        db_m.push(row_m);
    }

    let b = &ev.b;
    let bij = |i: usize, j: usize| field(&|k| b[k].0[i][j]);
    let (b11, b22) = (bij(0, 0), bij(1, 1));
    let (nb12, nb21) = (field(&|k| -b[k].0[0][1]), field(&|k| -b[k].0[1][0]));
    let ones = vec![1.0; n];
    let det_of = |d: &Vec<Vec<Sparse>>| {
        weighted_sum(&[(&b22, &d[0][0]), (&b11, &d[1][1]), (&nb12, &d[1][0]), (&nb21, &d[0][1])])
    };
    let tr_of = |d: &Vec<Vec<Sparse>>| weighted_sum(&[(&ones, &d[0][0]), (&ones, &d[1][1])]);

    // dS = 1/2 (D11 a11 + 2 D12 a12 + D22 a22)
    let half = vec![0.5; n];
    let t11: Sparse = &ops.div[0].view() * &a[0][0].view();
    let t12: Sparse = &ops.div[1].view() * &a[0][1].view();
    let t22: Sparse = &ops.div[2].view() * &a[1][1].view();
    let ds_phi = weighted_sum(&[(&half, &t11), (&ones, &t12), (&half, &t22)]);

    Pieces { ds_phi, dtr: [tr_of(&db_phi), tr_of(&db_m)], ddet: [det_of(&db_phi), det_of(&db_m)] }
}

fn stack(blocks: [[&Sparse; 2]; 2]) -> Sparse {
    let b = [[Some(blocks[0][0].view()), Some(blocks[0][1].view())], [Some(blocks[1][0].view()), Some(blocks[1][1].view())]];
    let rows: Vec<&[Option<sprs::CsMatView<f64>>]> = b.iter().map(|r| r.as_slice()).collect();
    sprs::bmat(&rows).to_csr()
}

/// Analytic Jacobian of `(r_scalar, r_hym)` with the constants held fixed.
pub fn assemble_jacobian(state: &PairState, a: Coupling, _tc: &TopoConstants) -> Result<LinearOperator> {
    let ev = evaluate(state)?;
    Ok(jacobian_from(&state.model, &ev, a))
}

pub fn jacobian_from(model: &Model, ev: &Evaluation, a: Coupling) -> LinearOperator {
    let p = pieces(model, ev);
    let n = model.n();
    let a0 = vec![a.alpha0; n];
    let a1 = vec![4.0 * a.alpha1; n];
    let s_phi = weighted_sum(&[(&a0, &p.ds_phi), (&a1, &p.ddet[0])]);
    let s_m = weighted_sum(&[(&a1, &p.ddet[1])]);
    let matrix = stack([[&s_phi, &s_m], [&p.dtr[0], &p.dtr[1]]]);
    let mut weights = model.grid.weights.clone();
    weights.extend_from_slice(&model.grid.weights);
    LinearOperator { matrix, weights, method: "analytic" }
}

fn weighted_norm(v: &[f64], w: &[f64]) -> f64 {
    compensated_sum(v.iter().zip(w).map(|(x, w)| x * x * w)).sqrt()
}

/// Relative forward-difference errors of the Jacobian for each step size.
#[derive(Clone, Debug, PartialEq)]
pub struct FdConsistency {
    pub eps: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl FdConsistency {
    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().fold(0.0f64, |m, r| m.max(*r))
    }

    /// Each ratio is within `slack` times its step size, or below `floor`.
    pub fn is_linear(&self, slack: f64, floor: f64) -> bool {
        self.eps.iter().zip(&self.ratios).all(|(e, r)| *r <= slack * e || *r <= floor)
    }

    /// Observed order between consecutive step sizes.
    pub fn orders(&self) -> Vec<f64> {
        self.ratios
            .windows(2)
            .zip(self.eps.windows(2))
            .map(|(r, e)| (r[0] / r[1]).ln() / (e[0] / e[1]).ln())
            .collect()
    }
}

pub const FD_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// `||(R(x + eps v) - R(x))/eps - J v|| / ||J v||` for each `eps`.
pub fn fd_consistency(state: &PairState, a: Coupling, tc: &TopoConstants, v: &TangentVector) -> Result<FdConsistency> {
    fd_consistency_with(state, a, tc, v, &FD_STEPS)
}

pub fn fd_consistency_with(
    state: &PairState,
    a: Coupling,
    tc: &TopoConstants,
    v: &TangentVector,
    eps: &[f64],
) -> Result<FdConsistency> {
    let n = state.model.n();
    if v.phi_dot.len() != n || v.m_dot.len() != n {
        return Err(KymError::ShapeMismatch { expected: n, got: v.phi_dot.len().min(v.m_dot.len()) });
    }
    let jac = assemble_jacobian(state, a, tc)?;
    let dv = v.to_vec();
    let jv = jac.apply(&dv);
    let base = residual(state, a, tc)?.stacked();
    let x = state.to_vec();
    let w = &jac.weights;
    let njv = weighted_norm(&jv, w);
    let mut ratios = Vec::with_capacity(eps.len());
    for &e in eps {
        if njv == 0.0 {
            ratios.push(0.0);
            continue;
        }
        let xe: Vec<f64> = x.iter().zip(&dv).map(|(a, b)| a + e * b).collect();
        let r = residual(&PairState::from_vec(&state.model, &xe), a, tc)?.stacked();
        let diff: Vec<f64> = (0..r.len()).map(|k| (r[k] - base[k]) / e - jv[k]).collect();
        ratios.push(weighted_norm(&diff, w) / njv);
    }
    Ok(FdConsistency { eps: eps.to_vec(), ratios })
}

/// Affine `phi` and constant `m`: the toric holomorphy directions.
pub fn kernel_basis(model: &Model) -> Vec<Vec<f64>> {
    let g = &model.grid;
    let n = g.len();
    let mut out = Vec::with_capacity(4);
    for f in [|_: [f64; 2]| 1.0, |x: [f64; 2]| x[0], |x: [f64; 2]| x[1]] {
        let mut v = g.sample(f);
        v.extend(std::iter::repeat_n(0.0, n));
        out.push(v);
    }
    let mut c = vec![0.0; n];
    c.extend(std::iter::repeat_n(1.0, n));
    out.push(c);
    out
}

/// Residual directions paired against the Futaki character: constants in each
/// slot and `(x_j, -4 alpha1 (z x_j - sigma_j))`.
pub fn cokernel_basis(model: &Model, ev: &Evaluation, a: Coupling, tc: &TopoConstants) -> Vec<Vec<f64>> {
    let g = &model.grid;
    let n = g.len();
    let mut out = Vec::with_capacity(4);
    let mut e0 = vec![1.0; n];
    e0.extend(std::iter::repeat_n(0.0, n));
    out.push(e0);
    let mut e1 = vec![0.0; n];
    e1.extend(std::iter::repeat_n(1.0, n));
    out.push(e1);
    for j in 0..2 {
        let mut v: Vec<f64> = g.nodes.iter().map(|nd| nd.x[j]).collect();
        v.extend((0..n).map(|k| -4.0 * a.alpha1 * (tc.z * g.nodes[k].x[j] - ev.sigma[k][j])));
        out.push(v);
    }
    out
}

/// Gram-Schmidt in the weighted inner product.
pub fn orthonormalize(vs: &[Vec<f64>], w: &[f64]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for v in vs {
        let mut u = v.clone();
        for _ in 0..2 {
            for q in &out {
                let d = compensated_sum(u.iter().zip(q).zip(w).map(|((a, b), w)| a * b * w));
                u.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let nrm = weighted_norm(&u, w);
        if nrm > 1e-12 * weighted_norm(v, w).max(1e-300) {
            u.iter_mut().for_each(|a| *a /= nrm);
            out.push(u);
        }
    }
    out
}

/// Weighted-orthogonal projection of `x` off the span of `basis`.
pub fn project_out(x: &[f64], basis: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let q = orthonormalize(basis, w);
    let mut y = x.to_vec();
    for b in &q {
        let d = compensated_sum(y.iter().zip(b).zip(w).map(|((a, b), w)| a * b * w));
        y.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
    }
    y
}

/// Restriction of `M = A J T` to polynomial test pairs, where
/// `T(phi, xi) = (-phi, -xi - <sigma, grad phi>)` maps gauge directions to
/// unknowns and `A` recombines residual rows into `(-S_alpha', 4 alpha1 r_hym')`.
pub fn galerkin_matrix(state: &PairState, a: Coupling, tc: &TopoConstants) -> Result<faer::Mat<f64>> {
    let ev = evaluate(state)?;
    Ok(galerkin_from(&state.model, &ev, a, tc))
}

const TEST_DEGREE: usize = 4;

fn galerkin_from(model: &Model, ev: &Evaluation, a: Coupling, tc: &TopoConstants) -> faer::Mat<f64> {
    let g = &model.grid;
    let n = g.len();
    let jac = jacobian_from(model, ev, a);
    let c = model.polytope.centroid();
    let (lo, hi) = model.polytope.bounding_box();
    let sc = 0.5 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let mut polys: Vec<Vec<f64>> = Vec::new();
    for d in 0..=TEST_DEGREE {
        for i in 0..=d {
            let j = d - i;
            polys.push(g.sample(|x| ((x[0] - c[0]) / sc).powi(i as i32) * ((x[1] - c[1]) / sc).powi(j as i32)));
        }
    }
    let np = polys.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(2 * np);
    for p in &polys {
        let mut v = p.clone();
        v.extend(std::iter::repeat_n(0.0, n));
        basis.push(v);
    }
    for p in &polys {
        let mut v = vec![0.0; n];
        v.extend_from_slice(p);
        basis.push(v);
    }
    let z = tc.z;
    let a1 = 4.0 * a.alpha1;
    let image: Vec<Vec<f64>> = basis
        .iter()
        .map(|v| {
            // T
            let gp = fd_gradient(g, &v[..n]);
            let mut t = vec![0.0; 2 * n];
            for k in 0..n {
                t[k] = -v[k];
                t[n + k] = -v[n + k] - (ev.sigma[k][0] * gp[k][0] + ev.sigma[k][1] * gp[k][1]);
            }
            let r = jac.apply(&t);
            // A
            let mut out = vec![0.0; 2 * n];
            for k in 0..n {
                out[k] = -r[k] + a1 * z * r[n + k];
                out[n + k] = a1 * r[n + k];
            }
            out
        })
        .collect();
    let w = &jac.weights;
    let m = basis.len();
    faer::Mat::<f64>::from_fn(m, m, |i, j| compensated_sum((0..2 * n).map(|k| basis[i][k] * w[k] * image[j][k])))
}

/// `||K - K^T||_F / ||K||_F` for the Galerkin restriction, no precondition.
pub fn operator_asymmetry(state: &PairState, a: Coupling, tc: &TopoConstants) -> Result<f64> {
    let k = galerkin_matrix(state, a, tc)?;
    Ok(asymmetry_of(&k))
}

fn asymmetry_of(k: &faer::Mat<f64>) -> f64 {
    let d = k - k.transpose();
    let nk = k.norm_l2();
    if nk == 0.0 {
        0.0
    } else {
        d.norm_l2() / nk
    }
}

/// Self-adjointness defect of the linearization at a Hermitian-Yang-Mills state.
pub fn adjoint_check(state: &PairState, a: Coupling, tc: &TopoConstants) -> Result<f64> {
    let ev = evaluate(state)?;
    let r = residual_from(&ev, a, tc);
    let g = &state.model.grid;
    let nh = l2_norm(&r.hym, g);
    if nh > HYM_TOL * tc.z.abs().max(1.0) {
        return Err(KymError::NotAtHym(nh));
    }
    Ok(asymmetry_of(&galerkin_from(&state.model, &ev, a, tc)))
}

/// Threshold on `||r_hym||_L2` (relative to `max(1, |z|)`) for [`adjoint_check`].
pub const HYM_TOL: f64 = 1e-6;

/// Smallest eigenvalue of the symmetric part of the Galerkin matrix after
/// removing the kernel, relative to the largest.
pub fn galerkin_min_eigenvalue(state: &PairState, a: Coupling, tc: &TopoConstants) -> Result<f64> {
    let k = galerkin_matrix(state, a, tc)?;
    let s = (&k + k.transpose()) * faer::Scale(0.5);
    let ev = s.self_adjoint_eigenvalues(faer::Side::Lower).map_err(|e| KymError::SingularJacobian(format!("{e:?}")))?;
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // ascending; the lowest four belong to the kernel directions
    Ok(ev.get(4).copied().unwrap_or(0.0) / max)
}

/// Solver for the bordered system `[[J, C], [E^T W, 0]]`.
///
/// Only the sparse matrix `K = J + s P P^T` is factored, where `P` selects one
/// node per kernel direction; the rank-`nb` correction and the borders are
/// handled through a small dense system. Factoring the bordered matrix
/// directly puts dense rows and columns in the ordering.
pub struct BorderedSystem {
    lu: crate::linalg::SparseLu,
    n2: usize,
    nb: usize,
    shift: f64,
    picks: Vec<usize>,
    /// Scaled cokernel columns `C` and kernel rows `E^T W`.
    cok: Vec<Vec<f64>>,
    ker_w: Vec<Vec<f64>>,
    /// `K^-1 P`, `K^-1 C` and the dense system for `(y, mu)`.
    kp: Vec<Vec<f64>>,
    kc: Vec<Vec<f64>>,
    small: faer::linalg::solvers::PartialPivLu<f64>,
    /// `K^-T P`, `K^-T (E^T W)^T` and the transposed dense system.
    tp: Vec<Vec<f64>>,
    tb: Vec<Vec<f64>>,
    small_t: faer::linalg::solvers::PartialPivLu<f64>,
    jac: Sparse,
}

/// One node per kernel direction, spread out so that `P^T E` is well
/// conditioned.
fn pick_nodes(ker: &[Vec<f64>]) -> Vec<usize> {
    let mut picks: Vec<usize> = Vec::new();
    let mut rest: Vec<Vec<f64>> = ker.to_vec();
    for b in 0..ker.len() {
        // pivoted elimination on the kernel matrix rows
        let (k, _) = rest[b].iter().enumerate().fold((0, 0.0f64), |m, (k, v)| if v.abs() > m.1 { (k, v.abs()) } else { m });
        picks.push(k);
        let piv = rest[b][k];
        for c in b + 1..ker.len() {
            let f = rest[c][k] / piv;
            let (head, tail) = rest.split_at_mut(c);
            tail[0].iter_mut().zip(&head[b]).for_each(|(x, y)| *x -= f * y);
        }
    }
    picks
}

impl BorderedSystem {
    pub fn new(jac: &LinearOperator, kernel: &[Vec<f64>], cokernel: &[Vec<f64>]) -> Result<Self> {
        use faer::prelude::*;
        let n2 = jac.dim();
        let w = &jac.weights;
        let ker = orthonormalize(kernel, w);
        let cok = orthonormalize(cokernel, w);
        if ker.len() != cok.len() {
            return Err(KymError::SingularJacobian(format!("kernel {} vs cokernel {}", ker.len(), cok.len())));
        }
        let nb = ker.len();
        // scale borders to the magnitude of the Jacobian entries
        let scale = jac.matrix.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let cok: Vec<Vec<f64>> = cok.iter().map(|c| c.iter().map(|v| scale * v).collect()).collect();
        let ker_w: Vec<Vec<f64>> = ker.iter().map(|e| e.iter().zip(w).map(|(e, w)| scale * w * e).collect()).collect();
        let picks = pick_nodes(&ker);
        let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(jac.nnz() + nb);
        for (r, row) in jac.matrix.outer_iterator().enumerate() {
            for (c, v) in row.iter() {
                t.push((r, c, *v));
            }
        }
        for &k in &picks {
            t.push((k, k, scale));
        }
        let k = from_triplets(n2, n2, &t);
        let lu = crate::linalg::SparseLu::new(&k).map_err(KymError::SingularJacobian)?;
        let unit = |k: usize| {
            let mut v = vec![0.0; n2];
            v[k] = 1.0;
            v
        };
        let kp: Vec<Vec<f64>> = picks.iter().map(|&k| lu.solve(&unit(k))).collect();
        let kc: Vec<Vec<f64>> = cok.iter().map(|c| lu.solve(c)).collect();
        let tp: Vec<Vec<f64>> = picks.iter().map(|&k| lu.solve_transpose(&unit(k))).collect();
        let tb: Vec<Vec<f64>> = ker_w.iter().map(|b| lu.solve_transpose(b)).collect();
        let dot = |a: &[f64], b: &[f64]| compensated_sum(a.iter().zip(b).map(|(x, y)| x * y));
        // unknowns (y, mu) with y = P^T dx:
        //   P^T K^-1 (r + s P y - C mu) - y = 0,  E^T W K^-1 (r + s P y - C mu) = 0
        let small = Mat::<f64>::from_fn(2 * nb, 2 * nb, |i, j| {
            let (ri, cj) = (i % nb, j % nb);
            let col = if j < nb { &kp[cj] } else { &kc[cj] };
            let f = if j < nb { scale } else { -1.0 };
            let v = if i < nb { f * col[picks[ri]] } else { f * dot(&ker_w[ri], col) };
            v - if i == j && i < nb { 1.0 } else { 0.0 }
        });
        //   transposed: z = K^-T (r + s P w - B nu), P^T z - w = 0, C^T z = 0
        let small_t = Mat::<f64>::from_fn(2 * nb, 2 * nb, |i, j| {
            let (ri, cj) = (i % nb, j % nb);
            let col = if j < nb { &tp[cj] } else { &tb[cj] };
            let f = if j < nb { scale } else { -1.0 };
            let v = if i < nb { f * col[picks[ri]] } else { f * dot(&cok[ri], col) };
            v - if i == j && i < nb { 1.0 } else { 0.0 }
        });
        Ok(BorderedSystem {
            lu,
            n2,
            nb,
            shift: scale,
            picks,
            cok,
            ker_w,
            kp,
            kc,
            small: small.partial_piv_lu(),
            tp,
            tb,
            small_t: small_t.partial_piv_lu(),
            jac: jac.matrix.clone(),
        })
    }

    fn combine(&self, base: Vec<f64>, a: &[Vec<f64>], b: &[Vec<f64>], coef: &faer::Mat<f64>) -> Vec<f64> {
        let nb = self.nb;
        let mut x = base;
        for i in 0..nb {
            let (cy, cm) = (self.shift * coef[(i, 0)], -coef[(nb + i, 0)]);
            x.iter_mut().zip(&a[i]).zip(&b[i]).for_each(|((x, p), q)| *x += cy * p + cm * q);
        }
        x
    }

    /// Solve `J dx + C mu = rhs`, `E^T W dx = 0`; returns `dx` and `mu`.
    pub fn solve(&self, rhs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        use faer::prelude::*;
        let nb = self.nb;
        let a = self.lu.solve(rhs);
        let dot = |u: &[f64], v: &[f64]| compensated_sum(u.iter().zip(v).map(|(x, y)| x * y));
        let r = faer::Mat::<f64>::from_fn(2 * nb, 1, |i, _| if i < nb { -a[self.picks[i]] } else { -dot(&self.ker_w[i - nb], &a) });
        let coef = self.small.solve(&r);
        let mu = (0..nb).map(|i| coef[(nb + i, 0)]).collect();
        (self.combine(a, &self.kp, &self.kc, &coef), mu)
    }

    /// Transposed bordered solve with a right-hand side `(rhs, 0)`; returns
    /// the `J`-block part followed by the multipliers.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        use faer::prelude::*;
        let nb = self.nb;
        let a = self.lu.solve_transpose(rhs);
        let dot = |u: &[f64], v: &[f64]| compensated_sum(u.iter().zip(v).map(|(x, y)| x * y));
        let r = faer::Mat::<f64>::from_fn(2 * nb, 1, |i, _| if i < nb { -a[self.picks[i]] } else { -dot(&self.cok[i - nb], &a) });
        let coef = self.small_t.solve(&r);
        let mut z = self.combine(a, &self.tp, &self.tb, &coef);
        z.extend((0..nb).map(|i| coef[(nb + i, 0)]));
        z
    }

    /// Dense copy of the bordered matrix, for spectral diagnostics on small grids.
    pub fn to_dense(&self) -> faer::Mat<f64> {
        let (n2, nb) = (self.n2, self.nb);
        let mut d = faer::Mat::<f64>::zeros(n2 + nb, n2 + nb);
        for (r, row) in self.jac.outer_iterator().enumerate() {
            for (c, v) in row.iter() {
                d[(r, c)] = *v;
            }
        }
        for b in 0..nb {
            for k in 0..n2 {
                d[(k, n2 + b)] = self.cok[b][k];
                d[(n2 + b, k)] = self.ker_w[b][k];
            }
        }
        d
    }
}

/// Column-by-column forward differences of the residual; slow, for validation.
pub fn fd_jacobian(state: &PairState, a: Coupling, tc: &TopoConstants, eps: f64) -> Result<LinearOperator> {
    let base = residual(state, a, tc)?.stacked();
    let x = state.to_vec();
    let mut t = Vec::new();
    for c in 0..x.len() {
        let mut xe = x.clone();
        xe[c] += eps;
        let r = residual(&PairState::from_vec(&state.model, &xe), a, tc)?.stacked();
        for (k, (rv, bv)) in r.iter().zip(&base).enumerate() {
            let d = (rv - bv) / eps;
            if d != 0.0 {
                t.push((k, c, d));
            }
        }
    }
    let mut weights = state.model.grid.weights.clone();
    weights.extend_from_slice(&state.model.grid.weights);
    Ok(LinearOperator { matrix: from_triplets(x.len(), x.len(), &t), weights, method: "forward-difference" })
}
