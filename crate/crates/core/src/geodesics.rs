//! Geodesics of the space of pairs and convexity of the K-energy along them.
//!
//! In symplectic coordinates a Mabuchi geodesic is the straight line
//! `u_t = (1 - t) u_0 + t u_1`. With the bundle written through the potential
//! `m` (`sigma = U grad(m_ref + m)`), the torus-invariant bundle geodesic
//! equation reduces to `m'' = 0`, so coupled geodesics are straight lines in
//! `(phi, m)`. Both facts are checked numerically here: the first on the
//! Legendre side, the second through the reduced transport residual.

use crate::error::{KymError, Result};
use crate::invariants::{k_energy_derivative, k_energy_path, KEnergyPath};
use crate::system::{evaluate, Coupling, Model, PairState, TopoConstants};
use crate::toric::{fd_gradient, hessian_fields, ReferenceMetric, SymplecticPotential};
use crate::gauge::BundlePotential;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Uniformly sampled path `t_k = k / (N - 1)`.
#[derive(Clone, Debug)]
pub struct GeodesicPath {
    pub t: Vec<f64>,
    pub states: Vec<PairState>,
}

impl GeodesicPath {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.states[0].model
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.len() - 1) as f64
    }
}

fn sample_times(n: usize) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(KymError::PathTooCoarse(format!("{n} samples; need at least 3")));
    }
    Ok((0..n).map(|k| k as f64 / (n - 1) as f64).collect())
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
}

/// Straight line between two symplectic potentials, checked for positivity
/// at every sample.
pub fn metric_geodesic(
    model: &Arc<Model>,
    u0: &SymplecticPotential,
    u1: &SymplecticPotential,
    n: usize,
) -> Result<Vec<SymplecticPotential>> {
    let t = sample_times(n)?;
    for u in [u0, u1] {
        if u.phi.len() != model.n() {
            return Err(KymError::ShapeMismatch { expected: model.n(), got: u.phi.len() });
        }
    }
    t.par_iter()
        .map(|&s| {
            let u = SymplecticPotential { phi: lerp(&u0.phi, &u1.phi, s) };
            match hessian_fields(model, &u) {
                Ok(_) => Ok(u),
                Err(KymError::NotPositiveDefinite { .. }) => Err(KymError::LeavesCone(s)),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Bundle potentials along a metric path: the reduced equation is `m'' = 0`
/// whatever the metric path, so this is the straight line.
pub fn bundle_geodesic(metric: &[SymplecticPotential], m0: &BundlePotential, m1: &BundlePotential) -> Result<Vec<BundlePotential>> {
    let t = sample_times(metric.len())?;
    if m0.m.len() != m1.m.len() {
        return Err(KymError::ShapeMismatch { expected: m0.m.len(), got: m1.m.len() });
    }
    Ok(t.iter().map(|&s| BundlePotential { m: lerp(&m0.m, &m1.m, s) }).collect())
}

/// Coupled geodesic between two states of the same class.
pub fn coupled_geodesic(b0: &PairState, b1: &PairState, n: usize) -> Result<GeodesicPath> {
    b0.check_class(b1)?;
    let model = &b0.model;
    let us = metric_geodesic(model, &b0.u, &b1.u, n)?;
    let ms = bundle_geodesic(&us, &b0.bp, &b1.bp)?;
    let states = us.into_iter().zip(ms).map(|(u, bp)| PairState { model: model.clone(), u, bp }).collect();
    Ok(GeodesicPath { t: sample_times(n)?, states })
}

fn time_derivative(path: &GeodesicPath, k: usize, pick: fn(&PairState) -> &Vec<f64>) -> Vec<f64> {
    let dt = path.dt();
    let (a, b) = (pick(&path.states[k - 1]), pick(&path.states[k + 1]));
    a.iter().zip(b).map(|(x, y)| (y - x) / (2.0 * dt)).collect()
}

/// Residual of the Kahler-potential geodesic equation
/// `f'' - <grad f', (Hess f)^{-1} grad f'> = 0`, with `f_t` the Legendre
/// transform of `u_t`, at interior nodes and interior times.
///
/// At time `t_k` and node `x` the dual point is `xi = grad u_{t_k}(x)`; nearby
/// times are transformed through the local quadratic model of `u_t` at `x`.
pub fn legendre_geodesic_residual(path: &GeodesicPath) -> Result<f64> {
    let model = path.model();
    let g = &model.grid;
    let p = &model.polytope;
    let dt = path.dt();
    let interior: Vec<usize> = g.interior().collect();
    let grad_ref: Vec<[f64; 2]> = g
        .nodes
        .iter()
        .map(|nd| {
            let mut v = [0.0; 2];
            for f in &p.facets {
                let l = f.value(nd.x);
                if l > 0.0 {
                    let c = 0.5 * (l.ln() + 1.0);
                    v[0] += c * f.normal[0] as f64;
                    v[1] += c * f.normal[1] as f64;
                }
            }
            v
        })
        .collect();
    let data: Vec<_> = path
        .states
        .par_iter()
        .map(|s| -> Result<(Vec<[f64; 2]>, Vec<crate::linalg::Sym2>, Vec<f64>)> {
            let mf = hessian_fields(model, &s.u)?;
            let gp = fd_gradient(g, &s.u.phi);
            let grad = (0..g.len()).map(|k| [grad_ref[k][0] + gp[k][0], grad_ref[k][1] + gp[k][1]]).collect();
            let val = (0..g.len()).map(|k| ReferenceMetric::potential(p, g.nodes[k].x) + s.u.phi[k]).collect();
            Ok((grad, mf.inv, val))
        })
        .collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    for k in 1..path.len() - 1 {
        for &i in &interior {
            let x = g.nodes[i].x;
            let xi = data[k].0[i];
            // f_t(xi) and grad f_t(xi) from the quadratic model at x
            let dual = |j: usize| -> (f64, [f64; 2]) {
                let (grad, inv, val) = (&data[j].0[i], &data[j].1[i], data[j].2[i]);
                let d = [xi[0] - grad[0], xi[1] - grad[1]];
                let ud = inv.apply(d);
                let f = x[0] * xi[0] + x[1] * xi[1] - val + 0.5 * (d[0] * ud[0] + d[1] * ud[1]);
                (f, [x[0] + ud[0], x[1] + ud[1]])
            };
            let (fm, xm) = dual(k - 1);
            let (f0, _) = dual(k);
            let (fp, xp) = dual(k + 1);
            let fdd = (fp - 2.0 * f0 + fm) / (dt * dt);
            let gfd = [(xp[0] - xm[0]) / (2.0 * dt), (xp[1] - xm[1]) / (2.0 * dt)];
            let hess = data[k].1[i].inverse().apply(gfd);
            worst = worst.max((fdd - gfd[0] * hess[0] - gfd[1] * hess[1]).abs());
        }
    }
    Ok(worst)
}

/// Residual of the reduced bundle geodesic equation
/// `d_t P + <U grad u', grad P> + <U grad u', B grad u'> = 0`,
/// `P = m' - <sigma, grad u'>`, at interior nodes and interior times.
pub fn bundle_geodesic_residual(path: &GeodesicPath) -> Result<f64> {
    let model = path.model();
    let g = &model.grid;
    let nt = path.len();
    let dt = path.dt();
    let evs = path.states.par_iter().map(evaluate).collect::<Result<Vec<_>>>()?;
    // velocities at every sample; the path is sampled uniformly so one-sided
    // second-order differences close the ends
    let vel = |k: usize, pick: fn(&PairState) -> &Vec<f64>| -> Vec<f64> {
        if k > 0 && k < nt - 1 {
            return time_derivative(path, k, pick);
        }
        let s = |j: usize| pick(&path.states[j]);
        let (a, b, c, sg) = if k == 0 { (s(0), s(1), s(2), 1.0) } else { (s(nt - 1), s(nt - 2), s(nt - 3), -1.0) };
        (0..a.len()).map(|i| sg * (-3.0 * a[i] + 4.0 * b[i] - c[i]) / (2.0 * dt)).collect()
    };
    let pfield: Vec<Vec<f64>> = (0..nt)
        .map(|k| {
            let ud = vel(k, |s| &s.u.phi);
            let md = vel(k, |s| &s.bp.m);
            let gu = fd_gradient(g, &ud);
            (0..g.len()).map(|i| md[i] - evs[k].sigma[i][0] * gu[i][0] - evs[k].sigma[i][1] * gu[i][1]).collect()
        })
        .collect();
    let mut worst = 0.0f64;
    for k in 1..nt - 1 {
        let ud = vel(k, |s| &s.u.phi);
        let gu = fd_gradient(g, &ud);
        let gp = fd_gradient(g, &pfield[k]);
        for i in g.interior() {
            let w = evs[k].metric.inv[i].apply(gu[i]);
            let b = &evs[k].b[i].0;
            let bg = [b[0][0] * gu[i][0] + b[0][1] * gu[i][1], b[1][0] * gu[i][0] + b[1][1] * gu[i][1]];
            let pt = (pfield[k + 1][i] - pfield[k - 1][i]) / (2.0 * dt);
            let r = pt + w[0] * gp[i][0] + w[1] * gp[i][1] + w[0] * bg[0] + w[1] * bg[1];
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// Convexity verdict for the K-energy along a path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub energy: KEnergyPath,
    /// `E_{k+1} - 2 E_k + E_{k-1}` at interior samples.
    pub second_differences: Vec<f64>,
    pub min_second_difference: f64,
    pub range: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn convexity_report(path: &GeodesicPath, a: Coupling, tc: &TopoConstants) -> Result<ConvexityReport> {
    let energy = k_energy_path(&path.states, a, tc)?;
    let e = &energy.energy;
    let second_differences: Vec<f64> = (1..e.len() - 1).map(|k| e[k + 1] - 2.0 * e[k] + e[k - 1]).collect();
    let min_second_difference = second_differences.iter().copied().fold(f64::INFINITY, f64::min);
    let (lo, hi) = e.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let range = hi - lo;
    let tolerance = 1e-6 * (range + 1.0);
    Ok(ConvexityReport {
        pass: min_second_difference >= -tolerance,
        energy,
        second_differences,
        min_second_difference,
        range,
        tolerance,
    })
}

/// Slope of the K-energy at the start of a path: from the sampled values and
/// from the derivative formula with the exact velocity.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FirstVariation {
    pub sampled: f64,
    pub direct: f64,
    /// `|sampled - direct| / max(1, |direct|)`.
    pub error: f64,
}

pub fn first_variation(path: &GeodesicPath, a: Coupling, tc: &TopoConstants) -> Result<FirstVariation> {
    let energy = k_energy_path(&path.states, a, tc)?;
    let e = &energy.energy;
    let sampled = (-3.0 * e[0] + 4.0 * e[1] - e[2]) / (2.0 * path.dt());
    let s0 = &path.states[0];
    let s1 = &path.states[path.len() - 1];
    let pd: Vec<f64> = s1.u.phi.iter().zip(&s0.u.phi).map(|(x, y)| x - y).collect();
    let md: Vec<f64> = s1.bp.m.iter().zip(&s0.bp.m).map(|(x, y)| x - y).collect();
    let ev = evaluate(s0)?;
    let direct = k_energy_derivative(&s0.model, &ev, a, tc, &pd, &md);
    Ok(FirstVariation { sampled, direct, error: (sampled - direct).abs() / direct.abs().max(1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::class_constants;

    fn bumped(name: &str, n: usize, deg: &[i64], amp: f64, m_amp: f64) -> (PairState, PairState) {
        let m = Model::named(name, n, deg).unwrap();
        let g = &m.grid;
        let b0 = PairState::reference(&m);
        let b1 = PairState::with_fields(
            &m,
            g.sample(|x| amp * (x[0] * x[0] * x[1] + (x[0] - 0.3).powi(2) * x[1] * x[1])),
            g.sample(|x| m_amp * (x[0] * x[1] - 0.4 * x[1].powi(3))),
        )
        .unwrap();
        (b0, b1)
    }

    #[test]
    fn constant_path_is_flat() {
        let (b0, _) = bumped("square(1,1)", 8, &[1, 1], 0.0, 0.0);
        let path = coupled_geodesic(&b0, &b0, 5).unwrap();
        let a = Coupling::new(1.0, 1.0).unwrap();
        let tc = class_constants(&b0.model, a).unwrap();
        let rep = convexity_report(&path, a, &tc).unwrap();
        assert!(rep.energy.energy.iter().all(|e| *e == 0.0));
        assert_eq!(rep.min_second_difference, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn endpoints_are_exact() {
        let (b0, b1) = bumped("square(1,1)", 8, &[1, 2], 0.05, 0.1);
        let path = coupled_geodesic(&b0, &b1, 7).unwrap();
        assert_eq!(path.states[0].to_vec(), b0.to_vec());
        let last = path.states[6].to_vec();
        assert!(last.iter().zip(b1.to_vec()).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    #[test]
    fn legendre_side_residual_is_small() {
        let (b0, b1) = bumped("square(1,1)", 16, &[], 0.2, 0.0);
        let coarse = legendre_geodesic_residual(&coupled_geodesic(&b0, &b1, 5).unwrap()).unwrap();
        let fine = legendre_geodesic_residual(&coupled_geodesic(&b0, &b1, 9).unwrap()).unwrap();
        assert!(fine < 1e-3, "{fine}");
        // second order in the time step
        assert!(fine < 0.35 * coarse || fine < 1e-10, "{coarse} -> {fine}");
    }

    #[test]
    fn bundle_residual_vanishes_on_straight_lines() {
        let (b0, b1) = bumped("square(1,1)", 16, &[1, 1], 0.1, 0.2);
        let r16 = bundle_geodesic_residual(&coupled_geodesic(&b0, &b1, 9).unwrap()).unwrap();
        let (c0, c1) = bumped("square(1,1)", 32, &[1, 1], 0.1, 0.2);
        let r32 = bundle_geodesic_residual(&coupled_geodesic(&c0, &c1, 17).unwrap()).unwrap();
        assert!(r32 < 0.35 * r16, "{r16} -> {r32}");
    }

    #[test]
    fn affine_shift_changes_nothing() {
        let m = Model::named("square(1,1)", 8, &[1, 0]).unwrap();
        let b0 = PairState::reference(&m);
        let b1 = PairState::with_fields(&m, m.grid.sample(|x| 0.3 * x[0] - 0.2 * x[1] + 1.0), vec![0.0; m.n()]).unwrap();
        let path = coupled_geodesic(&b0, &b1, 5).unwrap();
        let s0 = evaluate(&b0).unwrap();
        for s in &path.states {
            let ev = evaluate(s).unwrap();
            for k in 0..m.n() {
                assert!((ev.metric.scalar[k] - s0.metric.scalar[k]).abs() < 1e-9);
                assert!((ev.b[k].trace() - s0.b[k].trace()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn coupled_energy_is_convex_and_matches_first_variation() {
        let (b0, b1) = bumped("square(1,1)", 16, &[1, 1], 0.1, 0.2);
        let a = Coupling::new(1.0, 1.0).unwrap();
        let tc = class_constants(&b0.model, a).unwrap();
        let path = coupled_geodesic(&b0, &b1, 17).unwrap();
        let rep = convexity_report(&path, a, &tc).unwrap();
        assert!(rep.pass, "{} vs {}", rep.min_second_difference, rep.tolerance);
        let fv = first_variation(&path, a, &tc).unwrap();
        assert!(fv.error < 1e-3, "{fv:?}");
    }

    #[test]
    fn reversed_path_negates_energy() {
        let (b0, b1) = bumped("square(1,1)", 12, &[1, 2], 0.1, 0.1);
        let a = Coupling::new(1.0, 0.5).unwrap();
        let tc = class_constants(&b0.model, a).unwrap();
        let fwd = convexity_report(&coupled_geodesic(&b0, &b1, 9).unwrap(), a, &tc).unwrap();
        let bwd = convexity_report(&coupled_geodesic(&b1, &b0, 9).unwrap(), a, &tc).unwrap();
        let (ef, eb) = (fwd.energy.energy.last().unwrap(), bwd.energy.energy.last().unwrap());
        assert!((ef + eb).abs() < 1e-10 * (1.0 + ef.abs()), "{ef} {eb}");
    }

    #[test]
    fn concave_endpoint_leaves_the_cone() {
        let m = Model::named("square(1,1)", 8, &[]).unwrap();
        let b0 = PairState::reference(&m);
        let b1 = PairState::with_fields(&m, m.grid.sample(|x| -4.0 * (x[0] * x[0] + x[1] * x[1])), vec![0.0; m.n()]).unwrap();
        let e = coupled_geodesic(&b0, &b1, 5).unwrap_err();
        assert_eq!(e.kind(), "LeavesCone");
    }
}
