//! Damped Newton on the bordered system, continuation in coupling and class,
//! and a descent flow for the Calabi-Yang-Mills functional.

use crate::error::{KymError, Result};
use crate::invariants::{futaki_from, minimality_margin, toric_generators, ToricVectorField};
use crate::linalg::{compensated_sum, max_abs};
use crate::linearization::{cokernel_basis, jacobian_from, kernel_basis, orthonormalize, pieces, BorderedSystem};
use crate::polytope::{Facet, Polytope, PolytopeSpec};
use crate::system::{
    class_constants, evaluate, residual_from, Coupling, Evaluation, Model, PairState, ResidualNorms,
    TopoConstants,
};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonOptions {
    /// Converged when the residual L-infinity norm is at most this.
    pub tol: f64,
    pub max_iterations: usize,
    /// Smallest line-search factor before giving up on a step.
    pub min_damping: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-8, max_iterations: 30, min_damping: 1.0 / 1024.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    /// The residual cannot be reduced off the Futaki directions: the projected
    /// residual vanishes while the full residual does not.
    Obstructed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub iteration: usize,
    pub residual_linf: f64,
    pub residual_l2: f64,
    /// Residual after removing the Futaki directions, L-infinity.
    pub projected_linf: f64,
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub status: SolveStatus,
    pub iterations: usize,
    pub norms: ResidualNorms,
    pub coupling: Coupling,
    pub constants: TopoConstants,
    /// Character on the normalized coordinate generators.
    pub futaki: [f64; 2],
    /// Bordering multipliers of the last linear solve.
    pub multipliers: Vec<f64>,
    pub history: Vec<IterateRecord>,
}

struct Snapshot {
    ev: Evaluation,
    r: Vec<f64>,
    norms: ResidualNorms,
    projected: Vec<f64>,
    merit: f64,
}

fn weights2(model: &Model) -> Vec<f64> {
    let mut w = model.grid.weights.clone();
    w.extend_from_slice(&model.grid.weights);
    w
}

fn snapshot(state: &PairState, a: Coupling, tc: &TopoConstants, w: &[f64]) -> Result<Snapshot> {
    let ev = evaluate(state)?;
    let res = residual_from(&ev, a, tc);
    let norms = res.norms(&state.model.grid);
    let r = res.stacked();
    let q = orthonormalize(&cokernel_basis(&state.model, &ev, a, tc), w);
    let mut projected = r.clone();
    for b in &q {
        let d = compensated_sum(projected.iter().zip(b).zip(w).map(|((x, y), w)| x * y * w));
        projected.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
    let merit = compensated_sum(projected.iter().zip(w).map(|(x, w)| x * x * w)).sqrt();
    Ok(Snapshot { ev, r, norms, projected, merit })
}

fn futaki_pair(model: &Model, ev: &Evaluation, a: Coupling, tc: &TopoConstants) -> [f64; 2] {
    let gens = toric_generators(model);
    [futaki_from(model, ev, a, tc, &gens[0]), futaki_from(model, ev, a, tc, &gens[1])]
}

fn not_pd(e: &KymError) -> bool {
    matches!(e, KymError::NotPositiveDefinite { .. })
}

/// Damped Newton with the kernel fixed by `E^T W dx = 0` and the Futaki
/// directions absorbed by bordering multipliers.
pub fn newton_solve(
    initial: &PairState,
    a: Coupling,
    tc: &TopoConstants,
    opts: &NewtonOptions,
) -> Result<(SolveReport, PairState)> {
    let mut trace = NewtonTrace { history: Vec::new(), last: initial.clone(), futaki: [f64::NAN; 2] };
    newton_inner(initial, a, tc, opts, &mut trace)
}

/// What a Newton run leaves behind whether or not it succeeds.
#[derive(Clone, Debug)]
pub struct NewtonTrace {
    pub history: Vec<IterateRecord>,
    /// Last accepted iterate.
    pub last: PairState,
    /// Character at the last accepted iterate.
    pub futaki: [f64; 2],
}

/// [`newton_solve`] that also returns the trace on failure.
pub fn newton_traced(
    initial: &PairState,
    a: Coupling,
    tc: &TopoConstants,
    opts: &NewtonOptions,
) -> (Result<(SolveReport, PairState)>, NewtonTrace) {
    let mut trace = NewtonTrace { history: Vec::new(), last: initial.clone(), futaki: [f64::NAN; 2] };
    let r = newton_inner(initial, a, tc, opts, &mut trace);
    (r, trace)
}

fn newton_inner(
    initial: &PairState,
    a: Coupling,
    tc: &TopoConstants,
    opts: &NewtonOptions,
    trace: &mut NewtonTrace,
) -> Result<(SolveReport, PairState)> {
    let model = initial.model.clone();
    let w = weights2(&model);
    let mut x = initial.clone();
    let mut snap = snapshot(&x, a, tc, &w).map_err(|e| {
        if let KymError::NotPositiveDefinite { node, x } = e {
            KymError::LeftKaehlerCone(format!("initial state not convex at node {node} ({:.4}, {:.4})", x[0], x[1]))
        } else {
            e
        }
    })?;
    let mut history = Vec::new();
    let mut multipliers = Vec::new();
    let mut damping = 1.0;
    let kernel = kernel_basis(&model);
    for it in 0..=opts.max_iterations {
        let projected_linf = max_abs(&snap.projected);
        history.push(IterateRecord {
            iteration: it,
            residual_linf: snap.norms.linf(),
            residual_l2: snap.norms.l2(),
            projected_linf,
            damping,
        });
        trace.history.clone_from(&history);
        trace.last.clone_from(&x);
        trace.futaki = futaki_pair(&model, &snap.ev, a, tc);
        let finish = |status: SolveStatus, snap: &Snapshot, mult: Vec<f64>, history: Vec<IterateRecord>| SolveReport {
            converged: status == SolveStatus::Converged,
            status,
            iterations: it,
            norms: snap.norms,
            coupling: a,
            constants: *tc,
            futaki: futaki_pair(&model, &snap.ev, a, tc),
            multipliers: mult,
            history,
        };
        if snap.norms.linf() <= opts.tol {
            return Ok((finish(SolveStatus::Converged, &snap, multipliers, history), x));
        }
        if projected_linf <= opts.tol {
            return Ok((finish(SolveStatus::Obstructed, &snap, multipliers, history), x));
        }
        if it == opts.max_iterations {
            break;
        }
        let jac = jacobian_from(&model, &snap.ev, a);
        let cok = cokernel_basis(&model, &snap.ev, a, tc);
        let sys = BorderedSystem::new(&jac, &kernel, &cok)?;
        let rhs: Vec<f64> = snap.r.iter().map(|v| -v).collect();
        let (dx, mu) = sys.solve(&rhs);
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(KymError::SingularJacobian("non-finite Newton step".into()));
        }
        multipliers = mu;
        let x0 = x.to_vec();
        let mut t = 1.0;
        let mut all_pd_failures = true;
        let accepted = loop {
            let xt: Vec<f64> = x0.iter().zip(&dx).map(|(a, b)| a + t * b).collect();
            let trial = PairState::from_vec(&model, &xt);
            match snapshot(&trial, a, tc, &w) {
                Ok(s) if s.merit <= (1.0 - 1e-4 * t) * snap.merit || s.norms.linf() <= opts.tol => {
                    break Some((trial, s));
                }
                Ok(_) => all_pd_failures = false,
                Err(e) if not_pd(&e) => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
            if t < opts.min_damping {
                break None;
            }
        };
        match accepted {
            Some((trial, s)) => {
                x = trial;
                snap = s;
                damping = t;
            }
            None if all_pd_failures => {
                return Err(KymError::LeftKaehlerCone(format!(
                    "every damped step left the cone at iteration {it} (residual {:.3e})",
                    snap.norms.linf()
                )))
            }
            None => {
                return Err(KymError::MaxIterations { iterations: it, residual: snap.norms.linf() });
            }
        }
    }
    Err(KymError::MaxIterations { iterations: opts.max_iterations, residual: snap.norms.linf() })
}

/// Newton at the constants of the class of the initial state.
pub fn solve_from(initial: &PairState, a: Coupling, opts: &NewtonOptions) -> Result<(SolveReport, PairState)> {
    let tc = class_constants(&initial.model, a)?;
    newton_solve(initial, a, &tc, opts)
}

/// One point on a continuation path: coupling and class scale factors
/// relative to the seed polytope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationTarget {
    pub coupling: Coupling,
    pub scale: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationPath {
    pub targets: Vec<ContinuationTarget>,
    /// Largest sub-step as a fraction of a leg.
    pub max_step: f64,
    pub min_step: f64,
    pub shrink: f64,
    pub grow: f64,
    pub newton: NewtonOptions,
    /// Legs start only when the character at the warm start is below
    /// `futaki_threshold * max(1, |c| vol)`.
    pub futaki_threshold: f64,
}

impl ContinuationPath {
    pub fn new(targets: Vec<ContinuationTarget>) -> Self {
        ContinuationPath {
            targets,
            max_step: 1.0,
            min_step: 1.0 / 64.0,
            shrink: 0.5,
            grow: 1.5,
            newton: NewtonOptions::default(),
            futaki_threshold: 1e-3,
        }
    }

    /// Coupling targets `(alpha0, alpha1_k)` on a fixed class.
    pub fn coupling_sweep(alpha0: f64, alpha1: &[f64]) -> Result<Self> {
        let t = alpha1
            .iter()
            .map(|&a1| Ok(ContinuationTarget { coupling: Coupling::new(alpha0, a1)?, scale: [1.0, 1.0] }))
            .collect::<Result<Vec<_>>>()?;
        Ok(ContinuationPath::new(t))
    }
}

#[derive(Clone, Debug)]
pub struct ContinuationOutcome {
    /// One report per target reached, in order.
    pub reports: Vec<SolveReport>,
    /// Last good state.
    pub state: PairState,
    pub error: Option<KymError>,
}

impl ContinuationOutcome {
    pub fn all_converged(&self, n_targets: usize) -> bool {
        self.error.is_none() && self.reports.len() == n_targets && self.reports.iter().all(|r| r.converged)
    }
}

/// Polytope of the seed class rescaled by `s`.
pub fn rescaled_polytope(base: &Polytope, s: [f64; 2]) -> Result<Polytope> {
    match &base.model {
        Some(m) => crate::polytope::build_polytope(&PolytopeSpec::Named(m.rescaled(s))),
        None => {
            if s[0] != s[1] {
                return Err(KymError::Config("anisotropic scaling needs a named model".into()));
            }
            let f: Vec<Facet> = base.facets.iter().map(|f| Facet::new(f.normal, f.offset * s[0])).collect();
            crate::polytope::build_polytope(&PolytopeSpec::Facets(f))
        }
    }
}

/// Move `(phi, m)` to `target` by rescaling coordinates: copy by lattice index
/// when the layouts agree, bilinear interpolation otherwise.
pub fn transport(state: &PairState, target: &Arc<Model>) -> Result<PairState> {
    let src = &state.model.grid;
    let dst = &target.grid;
    if src.cells == dst.cells && src.len() == dst.len() && src.nodes.iter().zip(&dst.nodes).all(|(a, b)| a.ij == b.ij) {
        return PairState::with_fields(target, state.u.phi.clone(), state.bp.m.clone());
    }
    let (slo, shi) = state.model.polytope.bounding_box();
    let (dlo, dhi) = target.polytope.bounding_box();
    let interp = |f: &[f64], x: [f64; 2]| -> f64 {
        let mut q = [0.0; 2];
        for k in 0..2 {
            let u = (x[k] - dlo[k]) / (dhi[k] - dlo[k]);
            q[k] = (slo[k] + u * (shi[k] - slo[k]) - src.origin[k]) / src.spacing[k];
        }
        let i0 = [q[0].floor() as i64, q[1].floor() as i64];
        let fr = [q[0] - i0[0] as f64, q[1] - i0[1] as f64];
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            if let Some(k) = src.index([i0[0] + di, i0[1] + dj]) {
                let wgt = (if di == 0 { 1.0 - fr[0] } else { fr[0] }) * (if dj == 0 { 1.0 - fr[1] } else { fr[1] });
                acc += wgt * f[k];
                wsum += wgt;
            }
        }
        if wsum > 1e-12 {
            acc / wsum
        } else {
            // nearest node
            let mut best = (f64::INFINITY, 0.0);
            for (k, n) in src.nodes.iter().enumerate() {
                let d = (n.ij[0] as f64 - q[0]).powi(2) + (n.ij[1] as f64 - q[1]).powi(2);
                if d < best.0 {
                    best = (d, f[k]);
                }
            }
            best.1
        }
    };
    let phi = dst.nodes.iter().map(|n| interp(&state.u.phi, n.x)).collect();
    let m = dst.nodes.iter().map(|n| interp(&state.bp.m, n.x)).collect();
    PairState::with_fields(target, phi, m)
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + s * (b - a)
}

/// Warm-started Newton along the targets with adaptive sub-steps.
pub fn continuation_run(path: &ContinuationPath, seed: &PairState) -> ContinuationOutcome {
    let mut reports = Vec::new();
    let mut state = seed.clone();
    let Some(first) = path.targets.first() else {
        return ContinuationOutcome { reports, state, error: Some(KymError::Config("empty continuation path".into())) };
    };
    let base_polytope = seed.model.polytope.clone();
    let labels = seed.model.bundle.labels.clone();
    let res = seed.model.resolution;
    let model_for = |s: [f64; 2], cur: &Arc<Model>, cur_s: [f64; 2]| -> Result<Arc<Model>> {
        if s == cur_s {
            return Ok(cur.clone());
        }
        Model::new(rescaled_polytope(&base_polytope, s)?, res, &labels)
    };

    let mut cur_scale = first.scale;
    match model_for(first.scale, &seed.model, [1.0, 1.0]).and_then(|m| transport(seed, &m)) {
        Ok(s) => state = s,
        Err(e) => return ContinuationOutcome { reports, state, error: Some(e) },
    }
    match guarded_solve(&state, first.coupling, path) {
        Ok((rep, st)) => {
            let stop = rep.status != SolveStatus::Converged;
            reports.push(rep);
            state = st;
            if stop {
                return ContinuationOutcome { reports, state, error: None };
            }
        }
        Err(e) => return ContinuationOutcome { reports, state, error: Some(e) },
    }

    for (k, pair) in path.targets.windows(2).enumerate() {
        let (from, to) = (pair[0], pair[1]);
        let mut s = 0.0;
        let mut step = path.max_step.min(1.0);
        let mut last: Option<SolveReport> = None;
        while s < 1.0 {
            let sn = (s + step).min(1.0);
            let coupling = Coupling {
                alpha0: lerp(from.coupling.alpha0, to.coupling.alpha0, sn),
                alpha1: lerp(from.coupling.alpha1, to.coupling.alpha1, sn),
            };
            let sc = [lerp(from.scale[0], to.scale[0], sn), lerp(from.scale[1], to.scale[1], sn)];
            let attempt = model_for(sc, &state.model, cur_scale)
                .and_then(|m| transport(&state, &m))
                .and_then(|warm| guarded_solve(&warm, coupling, path));
            match attempt {
                Ok((rep, st)) if rep.status == SolveStatus::Obstructed => {
                    reports.push(rep);
                    return ContinuationOutcome { reports, state: st, error: None };
                }
                Ok((rep, st)) => {
                    state = st;
                    cur_scale = sc;
                    s = sn;
                    step = (step * path.grow).min(path.max_step);
                    last = Some(rep);
                }
                Err(e @ KymError::Config(_)) | Err(e @ KymError::GridAlignment(_)) => {
                    return ContinuationOutcome { reports, state, error: Some(e) };
                }
                Err(e @ KymError::ClassMismatch(_)) => {
                    return ContinuationOutcome { reports, state, error: Some(e) };
                }
                Err(_) => {
                    step *= path.shrink;
                    if step < path.min_step {
                        return ContinuationOutcome {
                            reports,
                            state,
                            error: Some(KymError::StepUnderflow { target: k + 1, step }),
                        };
                    }
                }
            }
        }
        reports.push(last.expect("a completed leg has a report"));
    }
    ContinuationOutcome { reports, state, error: None }
}

/// Newton preceded by the Futaki screen at the warm start.
fn guarded_solve(warm: &PairState, a: Coupling, path: &ContinuationPath) -> Result<(SolveReport, PairState)> {
    let ev = evaluate(warm)?;
    let tc = class_constants(&warm.model, a)?;
    let fut = futaki_pair(&warm.model, &ev, a, &tc);
    let scale = (tc.c.abs() * tc.vol).max(1.0);
    if fut.iter().any(|f| f.abs() > path.futaki_threshold * scale) {
        let res = residual_from(&ev, a, &tc);
        return Ok((
            SolveReport {
                converged: false,
                status: SolveStatus::Obstructed,
                iterations: 0,
                norms: res.norms(&warm.model.grid),
                coupling: a,
                constants: tc,
                futaki: fut,
                multipliers: Vec::new(),
                history: Vec::new(),
            },
            warm.clone(),
        ));
    }
    newton_solve(warm, a, &tc, &path.newton)
}

/// Descent direction used by [`gradient_flow`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowMetric {
    /// Gradient measured through the linearized residual map.
    GaussNewton,
    /// Plain quadrature metric.
    Quadrature,
    /// Newton steps restricted to trigonometric modes up to
    /// [`FlowOptions::modes`] per axis; grid-scale directions are frozen.
    Spectral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowOptions {
    pub steps: usize,
    pub dt: f64,
    pub min_dt: f64,
    /// Stop when the gradient norm falls below this.
    pub gtol: f64,
    /// Stop when an accepted step lowers the functional by less than this
    /// (relative).
    pub ftol: f64,
    pub metric: FlowMetric,
    /// Highest mode per axis for [`FlowMetric::Spectral`].
    pub modes: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { steps: 200, dt: 1.0, min_dt: 1e-10, gtol: 1e-9, ftol: 1e-13, metric: FlowMetric::Spectral, modes: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowTermination {
    Stationary,
    StepBudget,
    StepUnderflow,
}

#[derive(Clone, Debug)]
pub struct FlowTrajectory {
    /// Accepted states, starting with the initial one.
    pub states: Vec<PairState>,
    pub values: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub dts: Vec<f64>,
    /// Step sizes rejected because the functional would have increased.
    pub rejected: usize,
    pub termination: FlowTermination,
    pub warnings: Vec<String>,
}

impl FlowTrajectory {
    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("trajectory has the initial value")
    }
    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0])
    }
    pub fn into_result(self) -> Result<Self> {
        match self.termination {
            FlowTermination::StepBudget => Err(KymError::StepBudgetExhausted(self.states.len() - 1)),
            _ => Ok(self),
        }
    }
}

/// Value and gradient (with respect to stacked `(phi, m)`) of the CYM functional.
pub(crate) fn cym_value_gradient(model: &Model, ev: &Evaluation, a: Coupling, tc: &TopoConstants) -> Result<(f64, Vec<f64>)> {
    let al = a.ratio();
    let f2 = crate::system::curvature_norm(ev)?;
    let g = &model.grid;
    let n = g.len();
    let e: Vec<f64> = (0..n).map(|k| ev.metric.scalar[k] - al * f2[k]).collect();
    let val = compensated_sum((0..n).map(|k| g.weights[k] * (e[k] * e[k] + a.alpha1 * f2[k]))) / tc.vol;
    let p = pieces(model, ev);
    let ws: Vec<f64> = (0..n).map(|k| 2.0 * g.weights[k] * e[k] / tc.vol).collect();
    let wf: Vec<f64> = (0..n).map(|k| g.weights[k] * (-2.0 * al * e[k] + a.alpha1) / tc.vol).collect();
    // d|F|^2 = 2 tr B dtr - 2 ddet
    let tr2: Vec<f64> = (0..n).map(|k| 2.0 * ev.b[k].trace() * wf[k]).collect();
    let m2: Vec<f64> = wf.iter().map(|v| -2.0 * v).collect();
    let mut grad = crate::linalg::matvec_t(&p.ds_phi, &ws);
    for (blk, off) in [(0usize, 0usize), (1, n)] {
        let a_ = crate::linalg::matvec_t(&p.dtr[blk], &tr2);
        let b_ = crate::linalg::matvec_t(&p.ddet[blk], &m2);
        if off == 0 {
            for k in 0..n {
                grad[k] += a_[k] + b_[k];
            }
        } else {
            grad.extend((0..n).map(|k| a_[k] + b_[k]));
        }
    }
    Ok((val, grad))
}

/// Explicit-Euler descent of the CYM functional with adaptive step size; the
/// functional never increases between accepted steps.
pub fn gradient_flow(initial: &PairState, a: Coupling, tc: &TopoConstants, opts: &FlowOptions) -> Result<FlowTrajectory> {
    let model = initial.model.clone();
    let mut warnings = Vec::new();
    if a.alpha0 <= 0.0 || a.alpha1 <= 0.0 {
        warnings.push(format!("couplings ({}, {}) outside the positive quadrant", a.alpha0, a.alpha1));
    }
    if a.alpha0 != 0.0 && minimality_margin(a, tc) <= 0.0 {
        warnings.push(format!("minimality inequality fails (margin {:.3e})", minimality_margin(a, tc)));
    }
    let n = model.n();
    let w = weights2(&model);
    let kernel = kernel_basis(&model);
    let mut x = initial.clone();
    let mut ev = evaluate(&x)?;
    let (mut val, mut grad) = cym_value_gradient(&model, &ev, a, tc)?;
    let mut traj = FlowTrajectory {
        states: vec![x.clone()],
        values: vec![val],
        grad_norms: Vec::new(),
        dts: Vec::new(),
        rejected: 0,
        termination: FlowTermination::StepBudget,
        warnings: Vec::new(),
    };
    if opts.metric == FlowMetric::Spectral {
        spectral_descent(&mut traj, x, val, grad, a, tc, opts)?;
        traj.warnings = warnings;
        return Ok(traj);
    }
    let mut dt = opts.dt;
    for _ in 0..opts.steps {
        let (dir, gnorm) = match opts.metric {
            FlowMetric::Spectral => unreachable!(),
            FlowMetric::Quadrature => {
                let d: Vec<f64> = grad.iter().zip(&w).map(|(g, w)| -g / w).collect();
                let d = crate::linearization::project_out(&d, &kernel, &w);
                let gn = compensated_sum(d.iter().zip(&w).map(|(v, w)| v * v * w)).sqrt();
                (d, gn)
            }
            FlowMetric::GaussNewton => {
                let jac = jacobian_from(&model, &ev, a);
                let cok = cokernel_basis(&model, &ev, a, tc);
                let sys = BorderedSystem::new(&jac, &kernel, &cok)?;
                let y = sys.solve_transpose(&grad);
                let y = &y[..2 * n];
                let winv: Vec<f64> = y.iter().zip(&w).map(|(v, w)| v / w).collect();
                let (d, _) = sys.solve(&winv);
                let gn = compensated_sum(y.iter().zip(&winv).map(|(a, b)| a * b)).max(0.0).sqrt();
                (d.iter().map(|v| -v).collect(), gn)
            }
        };
        traj.grad_norms.push(gnorm);
        if gnorm <= opts.gtol {
            traj.termination = FlowTermination::Stationary;
            break;
        }
        let x0 = x.to_vec();
        let accepted = loop {
            let xt: Vec<f64> = x0.iter().zip(&dir).map(|(a, b)| a + dt * b).collect();
            let trial = PairState::from_vec(&model, &xt);
            if let Ok(evt) = evaluate(&trial) {
                if let Ok((vt, gt)) = cym_value_gradient(&model, &evt, a, tc) {
                    if vt <= val {
                        break Some((trial, evt, vt, gt));
                    }
                }
            }
            traj.rejected += 1;
            dt *= 0.5;
            if dt < opts.min_dt {
                break None;
            }
        };
        let Some((trial, evt, vt, gt)) = accepted else {
            traj.termination = FlowTermination::StepUnderflow;
            break;
        };
        let drop = val - vt;
        x = trial;
        ev = evt;
        val = vt;
        grad = gt;
        traj.states.push(x.clone());
        traj.values.push(val);
        traj.dts.push(dt);
        dt = (dt * 1.5).min(opts.dt);
        if drop <= opts.ftol * val.abs().max(1.0) {
            traj.termination = FlowTermination::Stationary;
            break;
        }
    }
    traj.warnings = warnings;
    Ok(traj)
}

/// `(2K+1)^2` products of `1, cos(k pi y), sin(k pi y)` per field, with `y`
/// the bounding-box coordinate, moved off the kernel and orthonormalized.
fn trig_basis(model: &Model, modes: usize) -> Vec<Vec<f64>> {
    let g = &model.grid;
    let n = g.len();
    let ext = [g.cells[0] as f64 * g.spacing[0], g.cells[1] as f64 * g.spacing[1]];
    let t = |j: usize, y: f64| {
        let k = ((j + 1) / 2) as f64 * std::f64::consts::PI;
        match j {
            0 => 1.0,
            _ if j % 2 == 1 => (k * y).cos(),
            _ => (k * y).sin(),
        }
    };
    let w = weights2(model);
    let kernel = orthonormalize(&kernel_basis(model), &w);
    let mut cols = Vec::new();
    for field in 0..2 {
        for a in 0..=2 * modes {
            for b in 0..=2 * modes {
                let mut v = vec![0.0; 2 * n];
                for (k, nd) in g.nodes.iter().enumerate() {
                    let y = [(nd.x[0] - g.origin[0]) / ext[0], (nd.x[1] - g.origin[1]) / ext[1]];
                    v[field * n + k] = t(a, y[0]) * t(b, y[1]);
                }
                cols.push(crate::linearization::project_out(&v, &kernel, &w));
            }
        }
    }
    orthonormalize(&cols, &w)
}

fn spectral_descent(
    traj: &mut FlowTrajectory,
    mut x: PairState,
    mut val: f64,
    mut grad: Vec<f64>,
    a: Coupling,
    tc: &TopoConstants,
    opts: &FlowOptions,
) -> Result<()> {
    use rayon::prelude::*;
    let model = x.model.clone();
    let basis = trig_basis(&model, opts.modes);
    let m = basis.len();
    let dot = |u: &[f64], v: &[f64]| compensated_sum(u.iter().zip(v).map(|(a, b)| a * b));
    let gradient_at = |x: &[f64]| -> Result<Vec<f64>> {
        let s = PairState::from_vec(&model, x);
        let ev = evaluate(&s)?;
        Ok(cym_value_gradient(&model, &ev, a, tc)?.1)
    };
    const EPS: f64 = 1e-6;
    for _ in 0..opts.steps {
        let gs: Vec<f64> = basis.iter().map(|b| dot(b, &grad)).collect();
        let gnorm = gs.iter().map(|v| v * v).sum::<f64>().sqrt();
        traj.grad_norms.push(gnorm);
        if gnorm <= opts.gtol {
            traj.termination = FlowTermination::Stationary;
            return Ok(());
        }
        let x0 = x.to_vec();
        // Hessian columns by central differences of the gradient
        let cols: Vec<Vec<f64>> = basis
            .par_iter()
            .map(|b| {
                let shift = |s: f64| x0.iter().zip(b).map(|(x, b)| x + s * b).collect::<Vec<_>>();
                let gp = gradient_at(&shift(EPS))?;
                let gm = gradient_at(&shift(-EPS))?;
                let d: Vec<f64> = gp.iter().zip(&gm).map(|(p, q)| (p - q) / (2.0 * EPS)).collect();
                Ok(basis.iter().map(|c| dot(c, &d)).collect())
            })
            .collect::<Result<_>>()?;
        let h = faer::Mat::<f64>::from_fn(m, m, |i, j| 0.5 * (cols[i][j] + cols[j][i]));
        let eig = h.self_adjoint_eigen(faer::Side::Lower).map_err(|e| KymError::SingularJacobian(format!("{e:?}")))?;
        let (u, lam) = (eig.U(), eig.S().column_vector());
        let top = (0..m).fold(0.0f64, |t, i| t.max(lam[i].abs()));
        // saddle-free Newton: negative curvature is followed downhill
        let mut c = vec![0.0; m];
        for i in 0..m {
            let p: f64 = (0..m).map(|r| u[(r, i)] * gs[r]).sum();
            let l = lam[i].abs().max(1e-10 * top);
            for (r, cr) in c.iter_mut().enumerate() {
                *cr -= u[(r, i)] * p / l;
            }
        }
        let dir: Vec<f64> = (0..2 * model.n()).map(|k| basis.iter().zip(&c).map(|(b, c)| b[k] * c).sum()).collect();
        let mut dt = opts.dt;
        let accepted = loop {
            let xt: Vec<f64> = x0.iter().zip(&dir).map(|(a, b)| a + dt * b).collect();
            let trial = PairState::from_vec(&model, &xt);
            if let Ok(evt) = evaluate(&trial) {
                if let Ok((vt, gt)) = cym_value_gradient(&model, &evt, a, tc) {
                    if vt <= val {
                        break Some((trial, vt, gt));
                    }
                }
            }
            traj.rejected += 1;
            dt *= 0.5;
            if dt < opts.min_dt {
                break None;
            }
        };
        let Some((trial, vt, gt)) = accepted else {
            traj.termination = FlowTermination::StepUnderflow;
            return Ok(());
        };
        let drop = val - vt;
        x = trial;
        val = vt;
        grad = gt;
        traj.states.push(x.clone());
        traj.values.push(val);
        traj.dts.push(dt);
        if drop <= opts.ftol * val.abs().max(1.0) {
            traj.termination = FlowTermination::Stationary;
            return Ok(());
        }
    }
    Ok(())
}

/// Character on an arbitrary generator at a state.
pub fn futaki_at(state: &PairState, a: Coupling, tc: &TopoConstants, zeta: &ToricVectorField) -> Result<f64> {
    let ev = evaluate(state)?;
    Ok(futaki_from(&state.model, &ev, a, tc, zeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::topo_constants;

    fn product(n: usize, deg: &[i64]) -> PairState {
        PairState::reference(&Model::named("square(1,1)", n, deg).unwrap())
    }

    #[test]
    fn product_is_a_fixed_point() {
        let st = product(16, &[1, 2]);
        let a = Coupling::new(1.0, 0.1).unwrap();
        let (rep, out) = solve_from(&st, a, &NewtonOptions::default()).unwrap();
        assert!(rep.converged && rep.iterations <= 2);
        assert!(out.to_vec().iter().zip(st.to_vec()).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn perturbed_product_reconverges() {
        let st = product(16, &[1, 1]);
        let m = &st.model;
        let g = &m.grid;
        let p = PairState::with_fields(
            m,
            g.sample(|x| 0.1 * (x[0] * x[1] * (1.0 - x[0]) * (1.0 - x[1]))),
            g.sample(|x| 0.1 * (3.0 * x[0]).sin() * x[1] * x[1]),
        )
        .unwrap();
        let a = Coupling::new(1.0, 0.3).unwrap();
        let (rep, out) = solve_from(&p, a, &NewtonOptions::default()).unwrap();
        assert!(rep.converged, "{:?}", rep.history);
        let w = weights2(m);
        let ker = orthonormalize(&kernel_basis(m), &w);
        let diff: Vec<f64> = out.to_vec().iter().zip(st.to_vec()).map(|(x, y)| x - y).collect();
        assert!(max_abs(&crate::linearization::project_out(&diff, &ker, &w)) < 1e-8);
    }

    #[test]
    fn reversed_convexity_left_the_cone() {
        let st = product(8, &[1, 0]);
        let g = &st.model.grid;
        let bad = PairState::with_fields(&st.model, g.sample(|x| -3.0 * (x[0] * x[0] + x[1] * x[1])), vec![0.0; g.len()]).unwrap();
        let e = solve_from(&bad, Coupling::new(1.0, 0.1).unwrap(), &NewtonOptions::default()).unwrap_err();
        assert_eq!(e.kind(), "LeftKaehlerCone");
    }

    #[test]
    fn gradient_matches_differences() {
        let st = product(8, &[1, 2]);
        let g = &st.model.grid;
        let p = PairState::with_fields(&st.model, g.sample(|x| 0.02 * x[0] * x[0] * x[1]), g.sample(|x| 0.05 * x[0] * x[1] * x[1])).unwrap();
        let a = Coupling::new(1.0, 0.2).unwrap();
        let tc = topo_constants(&p, a).unwrap();
        let ev = evaluate(&p).unwrap();
        let (_, gr) = cym_value_gradient(&p.model, &ev, a, &tc).unwrap();
        let x = p.to_vec();
        for &c in &[3usize, 20, 40, g.len() + 7, g.len() + 33] {
            let h = 1e-6;
            let val = |s: f64| {
                let mut xe = x.clone();
                xe[c] += s;
                let e = evaluate(&PairState::from_vec(&p.model, &xe)).unwrap();
                cym_value_gradient(&p.model, &e, a, &tc).unwrap().0
            };
            let fd = (val(h) - val(-h)) / (2.0 * h);
            assert!((fd - gr[c]).abs() < 1e-4 * (1.0 + gr[c].abs()), "{c}: {fd} vs {}", gr[c]);
        }
    }

    #[test]
    fn transport_copies_matching_layouts() {
        let m1 = Model::named("square(1,1)", 8, &[1, 0]).unwrap();
        let m2 = Model::new(rescaled_polytope(&m1.polytope, [1.0, 1.3]).unwrap(), 8, &m1.bundle.labels).unwrap();
        let st = PairState::with_fields(&m1, m1.grid.sample(|x| x[0] * x[1]), m1.grid.sample(|x| x[1])).unwrap();
        let t = transport(&st, &m2).unwrap();
        assert_eq!(t.u.phi, st.u.phi);
        let m3 = Model::named("square(1,1)", 12, &[1, 0]).unwrap();
        let t = transport(&st, &m3).unwrap();
        for (k, n) in m3.grid.nodes.iter().enumerate() {
            assert!((t.u.phi[k] - n.x[0] * n.x[1]).abs() < 0.02);
        }
    }
}
