//! Futaki character, Calabi-Yang-Mills functional, `S_alpha` and the K-energy.

use crate::error::{KymError, Result};
use crate::linalg::compensated_sum;
use crate::polytope::{integrate, Grid};
use crate::system::{evaluate, Coupling, Evaluation, Model, PairState, TopoConstants};
use crate::toric::fd_gradient;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Torus generator with affine Hamiltonian `<a, x> + b` and lift constant
/// `kappa`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToricVectorField {
    pub a: [f64; 2],
    pub b: f64,
    pub kappa: f64,
}

impl ToricVectorField {
    /// Mean-zero Hamiltonian; `kappa` defaults to `-mean <sigma_ref, a>` so the
    /// lift pairs to zero against the reference section.
    pub fn normalized(model: &Model, a: [f64; 2]) -> Self {
        let g = &model.grid;
        let vol = model.volume();
        let mx = integrate(&g.sample(|x| a[0] * x[0] + a[1] * x[1]), g).unwrap();
        let sr: Vec<f64> = model.bundle.sigma_ref.iter().map(|s| s[0] * a[0] + s[1] * a[1]).collect();
        let ms = integrate(&sr, g).unwrap();
        ToricVectorField { a, b: -mx / vol, kappa: -ms / vol }
    }

    pub fn with_kappa(self, kappa: f64) -> Self {
        ToricVectorField { kappa, ..self }
    }

    #[inline]
    pub fn hamiltonian(&self, x: [f64; 2]) -> f64 {
        self.a[0] * x[0] + self.a[1] * x[1] + self.b
    }
}

/// The two coordinate generators.
pub fn toric_generators(model: &Model) -> [ToricVectorField; 2] {
    [ToricVectorField::normalized(model, [1.0, 0.0]), ToricVectorField::normalized(model, [0.0, 1.0])]
}

/// `S_alpha = -alpha0 S - alpha1 Lambda^2((F - z w) ^ (F - z w))`.
pub fn s_alpha_field(state: &PairState, a: Coupling, tc: &TopoConstants) -> Result<Vec<f64>> {
    Ok(s_alpha_from(&evaluate(state)?, a, tc))
}

pub fn s_alpha_from(ev: &Evaluation, a: Coupling, tc: &TopoConstants) -> Vec<f64> {
    ev.metric
        .scalar
        .iter()
        .zip(&ev.b)
        .map(|(s, b)| -a.alpha0 * s - a.alpha1 * 4.0 * b.sub_scalar(tc.z).det())
        .collect()
}

/// Character on `zeta`:
/// `-int phi_zeta S_alpha + 4 alpha1 int (<sigma, a> + kappa)(Lambda F - z)`.
///
/// The lift of `zeta` to the bundle is taken with `theta = -(<sigma, a> + kappa)`;
/// with this sign the value is independent of the state within a class.
pub fn futaki(state: &PairState, a: Coupling, tc: &TopoConstants, zeta: &ToricVectorField) -> Result<f64> {
    let ev = evaluate(state)?;
    Ok(futaki_from(&state.model, &ev, a, tc, zeta))
}

pub fn futaki_from(model: &Model, ev: &Evaluation, a: Coupling, tc: &TopoConstants, zeta: &ToricVectorField) -> f64 {
    let g = &model.grid;
    let sa = s_alpha_from(ev, a, tc);
    let terms = (0..g.len()).map(|k| {
        let x = g.nodes[k].x;
        let s = ev.sigma[k];
        let lift = s[0] * zeta.a[0] + s[1] * zeta.a[1] + zeta.kappa;
        let rh = ev.b[k].trace() - tc.z;
        g.weights[k] * (-zeta.hamiltonian(x) * sa[k] + 4.0 * a.alpha1 * lift * rh)
    });
    compensated_sum(terms)
}

/// `|futaki(state1) - futaki(state2)|`.
pub fn base_point_independence(
    s1: &PairState,
    s2: &PairState,
    a: Coupling,
    tc: &TopoConstants,
    zeta: &ToricVectorField,
) -> Result<f64> {
    s1.check_class(s2)?;
    Ok((futaki(s1, a, tc, zeta)? - futaki(s2, a, tc, zeta)?).abs())
}

/// Calabi-Yang-Mills functional
/// `(1/V) int (S - alpha |F|^2)^2 + (alpha1/V) int |F|^2`, `alpha = 2 alpha1/alpha0`.
pub fn cym_functional(state: &PairState, a: Coupling, tc: &TopoConstants) -> Result<f64> {
    let ev = evaluate(state)?;
    cym_from(&state.model, &ev, a, tc)
}

pub fn cym_from(model: &Model, ev: &Evaluation, a: Coupling, tc: &TopoConstants) -> Result<f64> {
    if a.alpha0 == 0.0 {
        return Err(KymError::Config("the CYM functional needs alpha0 != 0".into()));
    }
    let al = a.ratio();
    let f2 = crate::system::curvature_norm(ev)?;
    let g = &model.grid;
    let vals = (0..g.len()).map(|k| {
        let e = ev.metric.scalar[k] - al * f2[k];
        g.weights[k] * (e * e + a.alpha1 * f2[k])
    });
    Ok(compensated_sum(vals) / tc.vol)
}

/// Both couplings positive: the Kaluza-Klein reading of the functional applies.
pub fn kaluza_klein_admissible(a: Coupling) -> bool {
    a.alpha0 > 0.0 && a.alpha1 > 0.0
}

/// `alpha1 - (2 alpha S_hat + alpha^2 (c_hat - z^2))`; positive when the
/// minimality inequality holds.
pub fn minimality_margin(a: Coupling, tc: &TopoConstants) -> f64 {
    let al = a.ratio();
    a.alpha1 - (2.0 * al * tc.s_hat + al * al * (tc.c_hat - tc.z * tc.z))
}

/// Same margin with the quadratic term doubled; see the README for the two forms.
pub fn minimality_margin_strict(a: Coupling, tc: &TopoConstants) -> f64 {
    let al = a.ratio();
    a.alpha1 - (2.0 * al * tc.s_hat + 2.0 * al * al * (tc.c_hat - tc.z * tc.z))
}

/// Quadrature least-squares fit of `f` by an affine function, sampled at nodes.
pub fn affine_projection(g: &Grid, f: &[f64]) -> Vec<f64> {
    let c = affine_coefficients(g, f);
    g.nodes.iter().map(|n| c[0] + c[1] * n.x[0] + c[2] * n.x[1]).collect()
}

/// Coefficients `(c0, c1, c2)` of the fit `c0 + c1 x1 + c2 x2`.
pub fn affine_coefficients(g: &Grid, f: &[f64]) -> [f64; 3] {
    use faer::prelude::*;
    let basis = |k: usize, x: [f64; 2]| match k {
        0 => 1.0,
        1 => x[0],
        _ => x[1],
    };
    let gram = faer::Mat::<f64>::from_fn(3, 3, |i, j| {
        compensated_sum(g.nodes.iter().zip(&g.weights).map(|(n, w)| w * basis(i, n.x) * basis(j, n.x)))
    });
    let rhs = faer::Mat::<f64>::from_fn(3, 1, |i, _| {
        compensated_sum(g.nodes.iter().zip(&g.weights).zip(f).map(|((n, w), v)| w * basis(i, n.x) * v))
    });
    let sol = gram.partial_piv_lu().solve(&rhs);
    [sol[(0, 0)], sol[(1, 0)], sol[(2, 0)]]
}

/// Extremal generator: the affine part of the scalar curvature of the reference
/// state (metric-independent), as a mean-zero toric field.
pub fn extremal_field(state: &PairState) -> Result<ToricVectorField> {
    let ev = evaluate(state)?;
    let c = affine_coefficients(&state.model.grid, &ev.metric.scalar);
    Ok(ToricVectorField::normalized(&state.model, [c[1], c[2]]))
}

/// Derivative of the K-energy along a velocity `(phi_dot, m_dot)`:
/// `-int (phi_dot - mean) S_alpha + 4 alpha1 int (<sigma, grad phi_dot> - m_dot)(Lambda F - z)`.
pub fn k_energy_derivative(
    model: &Model,
    ev: &Evaluation,
    a: Coupling,
    tc: &TopoConstants,
    phi_dot: &[f64],
    m_dot: &[f64],
) -> f64 {
    let g = &model.grid;
    let sa = s_alpha_from(ev, a, tc);
    let mean = integrate(phi_dot, g).unwrap() / tc.vol;
    let gp = fd_gradient(g, phi_dot);
    compensated_sum((0..g.len()).map(|k| {
        let s = ev.sigma[k];
        let rh = ev.b[k].trace() - tc.z;
        let bundle = s[0] * gp[k][0] + s[1] * gp[k][1] - m_dot[k];
        g.weights[k] * (-(phi_dot[k] - mean) * sa[k] + 4.0 * a.alpha1 * bundle * rh)
    }))
}

/// K-energy along a uniformly sampled path on `t in [0, 1]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KEnergyPath {
    pub t: Vec<f64>,
    /// Cumulative values, starting at 0.
    pub energy: Vec<f64>,
    /// Derivative at the samples.
    pub slope: Vec<f64>,
}

/// Trapezoid-in-time integral of the K-energy derivative, with second-order
/// finite-difference velocities.
pub fn k_energy_path(states: &[PairState], a: Coupling, tc: &TopoConstants) -> Result<KEnergyPath> {
    let nt = states.len();
    if nt < 3 {
        return Err(KymError::PathTooCoarse(format!("{nt} samples; need at least 3")));
    }
    for s in &states[1..] {
        states[0].check_class(s)?;
    }
    let dt = 1.0 / (nt - 1) as f64;
    let model = &states[0].model;
    let n = model.n();
    let vel = |k: usize, pick: &dyn Fn(&PairState) -> &Vec<f64>| -> Vec<f64> {
        let f = |j: usize| pick(&states[j]);
        (0..n)
            .map(|i| {
                if k == 0 {
                    (-3.0 * f(0)[i] + 4.0 * f(1)[i] - f(2)[i]) / (2.0 * dt)
                } else if k == nt - 1 {
                    (3.0 * f(nt - 1)[i] - 4.0 * f(nt - 2)[i] + f(nt - 3)[i]) / (2.0 * dt)
                } else {
                    (f(k + 1)[i] - f(k - 1)[i]) / (2.0 * dt)
                }
            })
            .collect()
    };
    let slope: Vec<f64> = (0..nt)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let ev = evaluate(&states[k])?;
            let pd = vel(k, &|s: &PairState| &s.u.phi);
            let md = vel(k, &|s: &PairState| &s.bp.m);
            Ok(k_energy_derivative(model, &ev, a, tc, &pd, &md))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut energy = vec![0.0; nt];
    for k in 1..nt {
        energy[k] = energy[k - 1] + 0.5 * dt * (slope[k] + slope[k - 1]);
    }
    Ok(KEnergyPath { t: (0..nt).map(|k| k as f64 * dt).collect(), energy, slope })
}
