//! One function per subcommand; each returns the process exit code.

use crate::config::{Overrides, RunConfig};
use crate::output::{
    dump_fields, exit_code, history_rows, out_dir, save_state, timestamp, write_csv, write_json, ClassInfo, ErrorRecord,
};
use kym::geodesics::{convexity_report, coupled_geodesic, first_variation, FirstVariation};
use kym::invariants::{
    cym_functional, futaki_from, kaluza_klein_admissible, minimality_margin, minimality_margin_strict, toric_generators,
};
use kym::perturb::perturbed;
use kym::solver::{
    continuation_run, gradient_flow, newton_traced, transport, FlowTermination, SolveReport,
};
use kym::state_io::read_state_file;
use kym::system::{residual_from, topo_constants_from};
use kym::{
    class_constants, evaluate, identity_check, Coupling, KymError, PairState, Result, ResidualNorms, TopoConstants,
};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Options common to every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Overrides,
    pub alpha0: Option<f64>,
    pub alpha1: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<Option<RunConfig>> {
        let Some(p) = &self.config else { return Ok(None) };
        let mut c = RunConfig::load(p)?;
        c.apply(&self.overrides);
        c.validate()?;
        Ok(Some(c))
    }

    fn require_config(&self, cmd: &str) -> Result<RunConfig> {
        self.config()?.ok_or_else(|| KymError::Config(format!("{cmd} needs --config PATH")))
    }

    fn out(&self, cfg: Option<&RunConfig>) -> PathBuf {
        self.out.clone().or_else(|| cfg.and_then(|c| c.run.out.clone())).unwrap_or_else(|| PathBuf::from("kym-out"))
    }

    /// Coupling from flags, then the config, then `(1, 1)`.
    fn coupling(&self, cfg: Option<&RunConfig>) -> Result<Coupling> {
        let (d0, d1) = cfg.map(|c| (c.coupling.alpha0, c.coupling.alpha1)).unwrap_or((1.0, 1.0));
        Coupling::new(self.alpha0.unwrap_or(d0), self.alpha1.unwrap_or(d1))
    }
}

fn fail(e: &KymError, out: Option<&Path>, command: &str) -> u8 {
    let rec = ErrorRecord::from(e);
    #[derive(Serialize)]
    struct Failure<'a> {
        command: &'a str,
        timestamp: u64,
        error: &'a ErrorRecord,
    }
    let f = Failure { command, timestamp: timestamp(), error: &rec };
    eprintln!("{}", serde_json::to_string(&f).unwrap_or_else(|_| rec.message.clone()));
    if let Some(dir) = out {
        if out_dir(dir).is_ok() {
            let _ = write_json(&dir.join("error.json"), &f);
        }
    }
    exit_code(e)
}

/// Runs a subcommand body, turning errors into records and exit codes.
pub fn run(command: &str, common: &Common, body: impl FnOnce(&Common) -> Result<u8>) -> u8 {
    match body(common) {
        Ok(code) => code,
        Err(e) => fail(&e, common.out.as_deref(), command),
    }
}

/// Start state: `[solver].start` brought onto the configured grid, or the
/// reference state; then the seeded perturbation if one is configured.
fn initial_state(cfg: &RunConfig) -> Result<PairState> {
    let model = cfg.model()?;
    let st = match &cfg.solver.start {
        Some(p) => {
            let s = read_state_file(p)?;
            if s.model.same_class(&model) {
                PairState::with_fields(&model, s.u.phi, s.bp.m)?
            } else if s.model.polytope.same_class(&model.polytope) && s.model.bundle.labels == model.bundle.labels {
                transport(&s, &model)?
            } else {
                return Err(KymError::ClassMismatch(format!("start state {} does not match [polytope]/[bundle]", p.display())));
            }
        }
        None => PairState::reference(&model),
    };
    match &cfg.perturbation {
        Some(p) => perturbed(&st, cfg.run.seed.unwrap_or(0), p),
        None => Ok(st),
    }
}

fn load_state(p: &Path) -> Result<PairState> {
    read_state_file(p)
}

/// Character tolerance: discretization level, scaled like the residual.
fn futaki_tolerance(state: &PairState, tc: &TopoConstants) -> f64 {
    let h = state.model.grid.spacing[0].max(state.model.grid.spacing[1]);
    h * h * tc.c.abs().max(1.0) * tc.vol
}

#[derive(Serialize)]
struct LegReport {
    status: String,
    converged: bool,
    iterations: usize,
    coupling: Coupling,
    constants: TopoConstants,
    norms: Option<ResidualNorms>,
    futaki: [f64; 2],
    futaki_tolerance: f64,
    multipliers: Vec<f64>,
    minimality_margin: f64,
    diagnostic: Option<String>,
    error: Option<ErrorRecord>,
}

fn diagnostic(futaki: [f64; 2], ftol: f64, converged: bool) -> Option<String> {
    if converged {
        return None;
    }
    let big = futaki[0].abs().max(futaki[1].abs());
    Some(if big > ftol {
        format!(
            "Futaki character ({:.3e}, {:.3e}) exceeds {:.1e}: the class is obstructed at this coupling",
            futaki[0], futaki[1], ftol
        )
    } else {
        format!("Newton did not converge; the Futaki character ({:.3e}, {:.3e}) vanishes to {:.1e}", futaki[0], futaki[1], ftol)
    })
}

fn leg_from_report(r: &SolveReport, ftol: f64) -> LegReport {
    LegReport {
        status: format!("{:?}", r.status),
        converged: r.converged,
        iterations: r.iterations,
        coupling: r.coupling,
        constants: r.constants,
        norms: Some(r.norms),
        futaki: r.futaki,
        futaki_tolerance: ftol,
        multipliers: r.multipliers.clone(),
        minimality_margin: minimality_margin(r.coupling, &r.constants),
        diagnostic: diagnostic(r.futaki, ftol, r.converged),
        error: None,
    }
}

#[derive(Serialize)]
struct RunHeader {
    command: &'static str,
    version: &'static str,
    timestamp: u64,
    class: ClassInfo,
    seed: Option<u64>,
}

fn header(command: &'static str, state: &PairState, seed: Option<u64>) -> RunHeader {
    RunHeader { command, version: env!("CARGO_PKG_VERSION"), timestamp: timestamp(), class: ClassInfo::of(state), seed }
}

pub fn solve(common: &Common) -> Result<u8> {
    let cfg = common.require_config("solve")?;
    let dir = out_dir(&common.out(Some(&cfg)))?;
    let a = cfg.coupling()?;
    let init = initial_state(&cfg)?;
    let tc = class_constants(&init.model, a)?;
    let ftol = futaki_tolerance(&init, &tc);
    let (res, trace) = newton_traced(&init, a, &tc, &cfg.newton());
    let (leg, state) = match &res {
        Ok((r, st)) => (leg_from_report(r, ftol), st),
        Err(e) => (
            LegReport {
                status: "Failed".into(),
                converged: false,
                iterations: trace.history.len().saturating_sub(1),
                coupling: a,
                constants: tc,
                norms: None,
                futaki: trace.futaki,
                futaki_tolerance: ftol,
                multipliers: Vec::new(),
                minimality_margin: minimality_margin(a, &tc),
                diagnostic: diagnostic(trace.futaki, ftol, false),
                error: Some(e.into()),
            },
            &trace.last,
        ),
    };
    let history = match &res {
        Ok((r, _)) => &r.history,
        Err(_) => &trace.history,
    };
    #[derive(Serialize)]
    struct SolveJson {
        #[serde(flatten)]
        header: RunHeader,
        #[serde(flatten)]
        leg: LegReport,
    }
    let converged = leg.converged;
    let summary = format!(
        "{}: {} after {} iterations; futaki ({:.3e}, {:.3e})",
        "solve", leg.status, leg.iterations, leg.futaki[0], leg.futaki[1]
    );
    let diag = leg.diagnostic.clone();
    write_json(&dir.join("report.json"), &SolveJson { header: header("solve", &init, cfg.run.seed), leg })?;
    write_csv(&dir.join("history.csv"), &history_rows(0, history))?;
    save_state(state, &dir.join(if converged { "state.kym" } else { "last_state.kym" }))?;
    dump_fields(&dir, state, a, &tc)?;
    println!("{summary}");
    if let Some(d) = diag {
        println!("{d}");
    }
    Ok(if converged { 0 } else { 1 })
}

pub fn continue_path(common: &Common) -> Result<u8> {
    let cfg = common.require_config("continue")?;
    let dir = out_dir(&common.out(Some(&cfg)))?;
    let path = cfg.continuation()?;
    let seed = initial_state(&cfg)?;
    let out = continuation_run(&path, &seed);
    let mut rows = Vec::new();
    let mut legs = Vec::new();
    for (k, r) in out.reports.iter().enumerate() {
        let tc = r.constants;
        let leg = leg_from_report(r, futaki_tolerance(&out.state, &tc));
        write_json(&dir.join(format!("leg_{k:03}.json")), &leg)?;
        rows.extend(history_rows(k, &r.history));
        legs.push(leg);
    }
    let all = out.all_converged(path.targets.len());
    #[derive(Serialize)]
    struct ContinueJson<'a> {
        #[serde(flatten)]
        header: RunHeader,
        targets: usize,
        reached: usize,
        all_converged: bool,
        legs: &'a [LegReport],
        error: Option<ErrorRecord>,
    }
    let error = out.error.as_ref().map(ErrorRecord::from);
    write_json(
        &dir.join("report.json"),
        &ContinueJson {
            header: header("continue", &seed, cfg.run.seed),
            targets: path.targets.len(),
            reached: out.reports.len(),
            all_converged: all,
            legs: &legs,
            error: error.clone(),
        },
    )?;
    write_csv(&dir.join("history.csv"), &rows)?;
    save_state(&out.state, &dir.join(if all { "state.kym" } else { "last_state.kym" }))?;
    if let Some(last) = out.reports.last() {
        dump_fields(&dir, &out.state, last.coupling, &last.constants)?;
    }
    println!("continue: {} of {} legs, all converged: {all}", out.reports.len(), path.targets.len());
    for l in legs.iter().filter_map(|l| l.diagnostic.as_ref()) {
        println!("{l}");
    }
    Ok(match &out.error {
        Some(e) => {
            eprintln!("{}", serde_json::to_string(&ErrorRecord::from(e)).unwrap_or_default());
            exit_code(e).max(1)
        }
        None if all => 0,
        None => 1,
    })
}

pub fn flow(common: &Common) -> Result<u8> {
    let cfg = common.require_config("flow")?;
    let dir = out_dir(&common.out(Some(&cfg)))?;
    let a = cfg.coupling()?;
    let init = initial_state(&cfg)?;
    let tc = class_constants(&init.model, a)?;
    let traj = gradient_flow(&init, a, &tc, &cfg.flow)?;
    #[derive(Serialize)]
    struct Row {
        step: usize,
        value: f64,
        grad_norm: f64,
        dt: f64,
    }
    let rows: Vec<Row> = (0..traj.values.len())
        .map(|k| Row {
            step: k,
            value: traj.values[k],
            grad_norm: traj.grad_norms.get(k).copied().unwrap_or(f64::NAN),
            dt: if k == 0 { 0.0 } else { traj.dts.get(k - 1).copied().unwrap_or(f64::NAN) },
        })
        .collect();
    write_csv(&dir.join("history.csv"), &rows)?;
    let last = traj.states.last().expect("initial state");
    let reference_value = cym_functional(&PairState::reference(&init.model), a, &tc).ok();
    #[derive(Serialize)]
    struct FlowJson<'a> {
        #[serde(flatten)]
        header: RunHeader,
        coupling: Coupling,
        constants: TopoConstants,
        termination: FlowTermination,
        steps: usize,
        rejected: usize,
        monotone: bool,
        initial_value: f64,
        final_value: f64,
        reference_value: Option<f64>,
        warnings: &'a [String],
    }
    write_json(
        &dir.join("report.json"),
        &FlowJson {
            header: header("flow", &init, cfg.run.seed),
            coupling: a,
            constants: tc,
            termination: traj.termination,
            steps: traj.values.len() - 1,
            rejected: traj.rejected,
            monotone: traj.is_monotone(),
            initial_value: traj.values[0],
            final_value: traj.final_value(),
            reference_value,
            warnings: &traj.warnings,
        },
    )?;
    save_state(last, &dir.join("state.kym"))?;
    dump_fields(&dir, last, a, &tc)?;
    println!(
        "flow: {:?} after {} steps, value {:.6e} -> {:.6e}",
        traj.termination,
        traj.values.len() - 1,
        traj.values[0],
        traj.final_value()
    );
    for w in &traj.warnings {
        println!("warning: {w}");
    }
    Ok(if traj.termination == FlowTermination::StepBudget { 1 } else { 0 })
}

fn state_argument(arg: Option<&Path>, cfg: Option<&RunConfig>) -> Result<PairState> {
    match (arg, cfg) {
        (Some(p), _) => load_state(p),
        (None, Some(c)) => initial_state(c),
        (None, None) => Err(KymError::Config("need a state file or --config".into())),
    }
}

pub fn invariants(common: &Common, state: Option<&Path>) -> Result<u8> {
    let cfg = common.config()?;
    let a = common.coupling(cfg.as_ref())?;
    let st = state_argument(state, cfg.as_ref())?;
    let class = class_constants(&st.model, a)?;
    let ev = evaluate(&st)?;
    let at_state = topo_constants_from(&st, &ev, a)?;
    let gens = toric_generators(&st.model);
    let futaki = [
        futaki_from(&st.model, &ev, a, &class, &gens[0]),
        futaki_from(&st.model, &ev, a, &class, &gens[1]),
    ];
    #[derive(Serialize)]
    struct InvariantsJson {
        #[serde(flatten)]
        header: RunHeader,
        coupling: Coupling,
        z: f64,
        s_hat: f64,
        c_hat: f64,
        c: f64,
        volume: f64,
        class_constants: TopoConstants,
        futaki: [f64; 2],
        cym: f64,
        identity_check: f64,
        residual: ResidualNorms,
        kaluza_klein_admissible: bool,
        minimality_margin: f64,
        minimality_margin_strict: f64,
    }
    let report = InvariantsJson {
        header: header("invariants", &st, cfg.as_ref().and_then(|c| c.run.seed)),
        coupling: a,
        z: at_state.z,
        s_hat: at_state.s_hat,
        c_hat: at_state.c_hat,
        c: at_state.c,
        volume: at_state.vol,
        class_constants: class,
        futaki,
        cym: kym::invariants::cym_from(&st.model, &ev, a, &class)?,
        identity_check: identity_check(&st, &class)?,
        residual: residual_from(&ev, a, &class).norms(&st.model.grid),
        kaluza_klein_admissible: kaluza_klein_admissible(a),
        minimality_margin: minimality_margin(a, &class),
        minimality_margin_strict: minimality_margin_strict(a, &class),
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| KymError::Io(e.to_string()))?;
    println!("{text}");
    if let Some(d) = &common.out {
        write_json(&out_dir(d)?.join("invariants.json"), &report)?;
    }
    Ok(0)
}

pub fn geodesic(common: &Common, start: Option<&Path>, end: Option<&Path>, samples: Option<usize>) -> Result<u8> {
    let cfg = common.config()?;
    let g = cfg.as_ref().map(|c| c.geodesic.clone()).unwrap_or_default();
    let pick = |arg: Option<&Path>, conf: Option<PathBuf>, which: &str| -> Result<PathBuf> {
        arg.map(Path::to_path_buf)
            .or(conf)
            .ok_or_else(|| KymError::Config(format!("geodesic needs a {which} state file")))
    };
    let b0 = load_state(&pick(start, g.start.clone(), "start")?)?;
    let b1 = load_state(&pick(end, g.end.clone(), "end")?)?;
    let n = samples.unwrap_or(g.samples);
    let a = common.coupling(cfg.as_ref())?;
    let tc = class_constants(&b0.model, a)?;
    let path = coupled_geodesic(&b0, &b1, n)?;
    let rep = convexity_report(&path, a, &tc)?;
    let fv = first_variation(&path, a, &tc)?;
    let dt = path.dt();
    #[derive(Serialize)]
    struct Row {
        t: f64,
        energy: f64,
        slope: f64,
        second: Option<f64>,
    }
    let e = &rep.energy;
    let rows: Vec<Row> = (0..e.t.len())
        .map(|k| Row {
            t: e.t[k],
            energy: e.energy[k],
            slope: e.slope[k],
            second: (k > 0 && k + 1 < e.t.len()).then(|| rep.second_differences[k - 1] / (dt * dt)),
        })
        .collect();
    let dir = out_dir(&common.out(cfg.as_ref()))?;
    write_csv(&dir.join("geodesic.csv"), &rows)?;
    #[derive(Serialize)]
    struct GeodesicJson {
        #[serde(flatten)]
        header: RunHeader,
        coupling: Coupling,
        samples: usize,
        verdict: &'static str,
        min_second_difference: f64,
        tolerance: f64,
        range: f64,
        first_variation: FirstVariation,
    }
    let verdict = if rep.pass { "PASS" } else { "FAIL" };
    write_json(
        &dir.join("report.json"),
        &GeodesicJson {
            header: header("geodesic", &b0, cfg.as_ref().and_then(|c| c.run.seed)),
            coupling: a,
            samples: n,
            verdict,
            min_second_difference: rep.min_second_difference,
            tolerance: rep.tolerance,
            range: rep.range,
            first_variation: fv,
        },
    )?;
    println!(
        "convexity {verdict}: min second difference {:.3e} (floor {:.3e}), K-energy range {:.3e}",
        rep.min_second_difference, -rep.tolerance, rep.range
    );
    Ok(if rep.pass { 0 } else { 1 })
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub pass: bool,
    pub vacuous: bool,
    pub value: Option<f64>,
    pub tolerance: Option<f64>,
    pub note: String,
}

impl CheckRow {
    fn measured(name: &'static str, value: f64, tolerance: f64) -> Self {
        CheckRow { name, pass: value <= tolerance, vacuous: false, value: Some(value), tolerance: Some(tolerance), note: String::new() }
    }
    fn vacuous(name: &'static str, note: &str) -> Self {
        CheckRow { name, pass: true, vacuous: true, value: None, tolerance: None, note: note.into() }
    }
    fn failed(name: &'static str, note: String) -> Self {
        CheckRow { name, pass: false, vacuous: false, value: None, tolerance: None, note }
    }
}

/// The PASS/FAIL table for a stored state.
pub fn check_rows(st: &PairState, a: Coupling, tol: f64) -> Result<Vec<CheckRow>> {
    let trivial = st.model.bundle.is_trivial();
    let finite = st.u.phi.iter().chain(&st.bp.m).all(|v| v.is_finite());
    let class = class_constants(&st.model, a)?;
    let mut rows = Vec::new();
    let ev = match (finite, evaluate(st)) {
        (false, _) => {
            rows.push(CheckRow::failed("identity", "state has non-finite values".into()));
            None
        }
        (true, Err(e)) => {
            rows.push(CheckRow::failed("identity", format!("cannot evaluate: {e}")));
            None
        }
        (true, Ok(ev)) => Some(ev),
    };
    let Some(ev) = ev else {
        for name in ["constants", "residual_hym", "residual_scalar", "futaki", "base_point"] {
            rows.push(CheckRow::failed(name, "state could not be evaluated".into()));
        }
        return Ok(rows);
    };
    if trivial {
        rows.push(CheckRow::vacuous("identity", "trivial bundle"));
    } else {
        let scale = ev.b.iter().map(|b| b.frobenius().powi(2)).fold(1.0, f64::max);
        rows.push(CheckRow::measured("identity", kym::system::identity_check_from(&ev, &class), 1e-8 * scale));
    }
    let here = topo_constants_from(st, &ev, a)?;
    let h = st.model.grid.spacing[0].max(st.model.grid.spacing[1]);
    let exact = |x: f64, y: f64| (x - y).abs() / (1.0 + y.abs()) / 1e-9;
    let drift = [exact(here.z, class.z), exact(here.c_hat, class.c_hat), (here.s_hat - class.s_hat).abs() / (1.0 + class.s_hat.abs()) / (10.0 * h * h)];
    let worst = drift.iter().copied().fold(0.0, f64::max);
    let mut row = CheckRow::measured("constants", worst, 1.0);
    row.note = format!("z {:.3e}, c_hat {:.3e}, S_hat {:.3e} (drift / tolerance)", drift[0], drift[1], drift[2]);
    rows.push(row);
    let norms = residual_from(&ev, a, &class).norms(&st.model.grid);
    if trivial {
        rows.push(CheckRow::vacuous("residual_hym", "trivial bundle"));
    } else {
        rows.push(CheckRow::measured("residual_hym", norms.hym_linf, tol));
    }
    rows.push(CheckRow::measured("residual_scalar", norms.scalar_linf, tol));
    let ftol = futaki_tolerance(st, &class);
    let gens = toric_generators(&st.model);
    let f: Vec<f64> = gens.iter().map(|g| futaki_from(&st.model, &ev, a, &class, g)).collect();
    let mut row = CheckRow::measured("futaki", f[0].abs().max(f[1].abs()), ftol);
    row.note = format!("({:.3e}, {:.3e})", f[0], f[1]);
    rows.push(row);
    let reference = PairState::reference(&st.model);
    let ev0 = evaluate(&reference)?;
    let base = gens
        .iter()
        .zip(&f)
        .map(|(g, v)| (futaki_from(&st.model, &ev0, a, &class, g) - v).abs())
        .fold(0.0, f64::max);
    rows.push(CheckRow::measured("base_point", base, ftol));
    Ok(rows)
}

pub fn check(common: &Common, state: &Path) -> Result<u8> {
    let cfg = common.config()?;
    let a = common.coupling(cfg.as_ref())?;
    let st = load_state(state)?;
    let tol = common.overrides.tol.unwrap_or(1e-6);
    let rows = check_rows(&st, a, tol)?;
    for r in &rows {
        let verdict = match (r.pass, r.vacuous) {
            (true, true) => "PASS (vacuous)",
            (true, false) => "PASS",
            _ => "FAIL",
        };
        let val = match (r.value, r.tolerance) {
            (Some(v), Some(t)) => format!("{v:.3e} <= {t:.3e}"),
            _ => String::new(),
        };
        println!("{:<16} {:<15} {:<26} {}", r.name, verdict, val, r.note);
    }
    let ok = rows.iter().all(|r| r.pass);
    if let Some(d) = &common.out {
        #[derive(Serialize)]
        struct CheckJson<'a> {
            #[serde(flatten)]
            header: RunHeader,
            coupling: Coupling,
            pass: bool,
            rows: &'a [CheckRow],
        }
        write_json(
            &out_dir(d)?.join("check.json"),
            &CheckJson { header: header("check", &st, None), coupling: a, pass: ok, rows: &rows },
        )?;
    }
    Ok(if ok { 0 } else { 1 })
}
