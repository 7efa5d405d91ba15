//! Command-line interface: configuration, presets, command orchestration and
//! artifact emission.

pub mod artifacts;
pub mod config;
pub mod presets;

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::adjoint::{
    compute_frozen, hamiltonian_bundle, solve_first_adjoint, solve_second_adjoint, summarize,
    Bundle, FirstAdjoint, FrozenCoefficients, HamiltonianPath, SecondAdjoint,
};
use crate::error::Error;
use crate::maxprin::{
    check_expansion_orders, check_mp_conditions, duality_first, duality_second, perturb_control,
    simulate_variational, variational_inequality, Direction, OrderConfig, Perturbation,
};
use crate::model::{cone_grid, validate_problem, ImpulseControl};
use crate::qvi::{
    check_dpp, check_no_double_impulse, check_regularity, check_semiconvexity, default_tau_values,
    extract_control, qvi_residual, sample_continuation_points, solve_qvi, PolicyMap, SolveGrid,
    SolverConfig, ValueFunction,
};
use crate::simulate::{
    estimate_cost, evaluate_policy, make_time_grid, simulate_state, BrownianGrid,
};
use crate::stats::with_threads;
use artifacts::{aggregate, emit_plot_data, num, unix_now, write_csv, write_json, PlotKind};
use config::{ConfigError, ControlSource, Overrides, Resolved, RunConfig};

/// A check ran and failed.
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_UNKNOWN_PRESET: i32 = 2;
pub const EXIT_MALFORMED_CONFIG: i32 = 3;
pub const EXIT_MISSING_ARTIFACT: i32 = 4;
/// Any other error raised while running a command.
pub const EXIT_RUNTIME: i32 = 5;

/// Residual percentile bound at the base grid.
const RESIDUAL_P99_TOL: f64 = 5e-2;
/// Closed-form error bound at the base grid.
const CLOSED_FORM_TOL: f64 = 2e-2;
/// Required error reduction under one refinement.
const REFINE_GAIN: f64 = 1.5;
/// Allowed ratio of semiconvexity constants across refinements.
const SEMICONVEXITY_RATIO: f64 = 2.0;
/// Slack factor of the τ-variation bound.
const REGULARITY_FACTOR: f64 = 10.0;
/// Margin of the no-double-impulse test.
const DOUBLE_IMPULSE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Simulate,
    SolveQvi,
    CheckDpp,
    Adjoint,
    CheckMp,
    ExpansionOrder,
    Report,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Validate,
        Command::Simulate,
        Command::SolveQvi,
        Command::CheckDpp,
        Command::Adjoint,
        Command::CheckMp,
        Command::ExpansionOrder,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::SolveQvi => "solve-qvi",
            Command::CheckDpp => "check-dpp",
            Command::Adjoint => "adjoint",
            Command::CheckMp => "check-mp",
            Command::ExpansionOrder => "expansion-order",
            Command::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// One command invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub out: PathBuf,
    /// Worker cap; `None` uses the global pool.
    pub threads: Option<usize>,
}

/// Exit status, written files and the error message when one was raised.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub outputs: Vec<PathBuf>,
    pub message: Option<String>,
}

enum Failure {
    Preset(String),
    Malformed(String),
    Missing(String),
    Runtime(Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Preset(_) => EXIT_UNKNOWN_PRESET,
            Failure::Malformed(_) => EXIT_MALFORMED_CONFIG,
            Failure::Missing(_) => EXIT_MISSING_ARTIFACT,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Preset(name) => format!("unknown preset `{name}`"),
            Failure::Malformed(m) => format!("malformed config: {m}"),
            Failure::Missing(m) => format!("missing upstream artifact: {m}"),
            Failure::Runtime(e) => e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::UnknownPreset(name) => Failure::Preset(name),
            ConfigError::Malformed(m) => Failure::Malformed(m),
        }
    }
}

type Run<T> = std::result::Result<T, Failure>;

/// Runs one command and writes its artifacts plus `manifest_<command>.json`
/// into the output directory.
pub fn run(inv: &Invocation) -> Outcome {
    let started = unix_now();
    let mut echo = Value::Null;
    let mut seed = 0;
    let mut outputs = Vec::new();
    let result = with_threads(inv.threads.unwrap_or(0), || {
        execute(inv, &mut echo, &mut seed, &mut outputs)
    });
    let (mut exit_code, mut message) = match result {
        Ok(true) => (0, None),
        Ok(false) => (EXIT_CHECK_FAILED, None),
        Err(f) => (f.code(), Some(f.message())),
    };
    let manifest = fs::create_dir_all(&inv.out)
        .map_err(Error::from)
        .and_then(|_| {
            let names: Vec<String> = outputs
                .iter()
                .filter_map(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .collect();
            artifacts::write_manifest(
                &inv.out,
                inv.command.name(),
                &echo,
                seed,
                &names,
                exit_code,
                started,
            )
        });
    match manifest {
        Ok(path) => outputs.push(path),
        Err(e) => {
            if exit_code == 0 {
                exit_code = EXIT_RUNTIME;
            }
            message.get_or_insert_with(|| e.to_string());
        }
    }
    Outcome {
        exit_code,
        outputs,
        message,
    }
}

fn load_config(inv: &Invocation) -> Run<RunConfig> {
    let mut cfg = match &inv.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Malformed(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply(&inv.overrides);
    Ok(cfg)
}

fn execute(
    inv: &Invocation,
    echo: &mut Value,
    seed: &mut u64,
    outputs: &mut Vec<PathBuf>,
) -> Run<bool> {
    let cfg = load_config(inv)?;
    *seed = cfg.simulation.seed;
    *echo = json!({ "config": cfg, "threads": inv.threads });
    if inv.command == Command::Report {
        let (_, pass) = aggregate(&inv.out)?
            .ok_or_else(|| Failure::Missing(format!("no artifacts in {}", inv.out.display())))?;
        outputs.push(inv.out.join("summary.json"));
        outputs.push(inv.out.join("summary.txt"));
        return Ok(pass);
    }
    let res = cfg.resolve()?;
    *echo = json!({
        "config": cfg,
        "resolved": {
            "spec": res.spec,
            "x0": res.x0,
            "x_min": res.x_min,
            "x_max": res.x_max,
            "closed_form": res.closed_form.is_some(),
        },
        "threads": inv.threads,
    });
    fs::create_dir_all(&inv.out).map_err(Error::from)?;
    let ctx = Ctx {
        cfg: &cfg,
        res: &res,
        out: &inv.out,
        outputs,
    };
    match inv.command {
        Command::Validate => ctx.validate(),
        Command::Simulate => ctx.simulate(),
        Command::SolveQvi => ctx.solve_qvi(),
        Command::CheckDpp => ctx.check_dpp(),
        Command::Adjoint => ctx.adjoint(),
        Command::CheckMp => ctx.check_mp(),
        Command::ExpansionOrder => ctx.expansion_order(),
        Command::Report => unreachable!("handled above"),
    }
}

/// Largest |V − V_exact| over every node of every slice.
pub fn closed_form_error(v: &ValueFunction, exact: fn(f64, f64, f64) -> f64) -> f64 {
    let grid = &v.grid;
    let xs = grid.xs();
    let mut err = 0.0_f64;
    for (s, tau) in grid.tau_values.iter().enumerate() {
        for (k, t) in grid.ts(*tau).iter().enumerate() {
            for (i, x) in xs.iter().enumerate() {
                err = err.max((v.values[s][k][i] - exact(grid.horizon, *t, *x)).abs());
            }
        }
    }
    err
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    res: &'a Resolved,
    out: &'a Path,
    outputs: &'a mut Vec<PathBuf>,
}

/// Adjoint solution on one bundle.
struct AdjointSet {
    bundle: Bundle,
    frozen: FrozenCoefficients,
    first: FirstAdjoint,
    second: SecondAdjoint,
}

impl Ctx<'_> {
    fn file(&mut self, name: &str) -> PathBuf {
        let path = self.out.join(name);
        self.outputs.push(path.clone());
        path
    }

    fn solver(&self) -> SolverConfig {
        let s = &self.cfg.solver;
        SolverConfig {
            tol: s.tol,
            max_iter: s.max_iter,
            cfl: s.cfl,
        }
    }

    fn grid(&self, x_nodes: usize, t_nodes: usize) -> SolveGrid {
        let spec = &self.res.spec;
        let mut g = SolveGrid::new(spec, self.res.x_min, self.res.x_max, x_nodes, t_nodes);
        g.tau_values = default_tau_values(spec.tau0, spec.horizon, self.cfg.solver.tau_count);
        if let Some(r) = self.cfg.solver.per_ray {
            g.per_ray = r;
        }
        g
    }

    fn solve(&self, grid: &SolveGrid) -> Run<(ValueFunction, PolicyMap)> {
        Ok(solve_qvi(&self.res.spec, grid, &self.solver())?)
    }

    /// Realizes the feedback policy with deterministic impulse times.
    fn extract(&self, policy: PolicyMap) -> Run<ImpulseControl> {
        let spec = &self.res.spec;
        let sim = &self.cfg.simulation;
        let policy = policy.with_feedback_tau(spec.tau0);
        let eval = evaluate_policy(
            spec,
            &policy,
            &[self.res.x0],
            self.cfg.control.paths,
            sim.steps,
            sim.seed,
        )?;
        Ok(extract_control(
            &eval,
            spec.tau0,
            self.cfg.control.min_fraction,
        ))
    }

    fn control(&self) -> Run<(ImpulseControl, &'static str)> {
        let c = &self.cfg.control;
        let from_qvi = || -> Run<ImpulseControl> {
            let (_, policy) = self.solve(&self.grid(c.x_nodes, c.t_nodes))?;
            self.extract(policy)
        };
        let control = match c.source {
            ControlSource::Auto => match &self.res.preset_control {
                Some(ctl) => (ctl.clone(), "preset"),
                None => (from_qvi()?, "qvi"),
            },
            ControlSource::Preset => (
                self.res.preset_control.clone().ok_or_else(|| {
                    Failure::Malformed(
                        "control.source = \"preset\" but no preset control applies".into(),
                    )
                })?,
                "preset",
            ),
            ControlSource::Qvi => (from_qvi()?, "qvi"),
            ControlSource::Explicit => (self.res.explicit.clone(), "explicit"),
            ControlSource::None => (ImpulseControl::empty(self.res.spec.tau0), "none"),
        };
        Ok(control)
    }

    fn validate(mut self) -> Run<bool> {
        let report = validate_problem(
            &self.res.spec,
            self.cfg.validate.samples,
            self.cfg.simulation.seed,
        )?;
        let pass = report.all_pass;
        let path = self.file("validate.json");
        write_json(&path, &json!({ "report": report, "pass": pass }))?;
        Ok(pass)
    }

    fn simulate(mut self) -> Run<bool> {
        let (control, source) = self.control()?;
        let spec = &self.res.spec;
        let sim = &self.cfg.simulation;
        let x0 = [self.res.x0];
        let cost = estimate_cost(spec, &control, &x0, sim.paths, sim.steps, sim.seed)?;
        let grid = make_time_grid(control.start_time, spec.horizon, &control, sim.steps)?;
        let mut rows = Vec::new();
        for p in 0..sim.dump_paths.min(sim.paths) as u64 {
            let noise = BrownianGrid::sample(&grid, sim.seed, p);
            let traj = simulate_state(spec, &control, &x0, &grid, &noise)?;
            for (k, t) in grid.nodes.iter().enumerate() {
                rows.push(vec![
                    p.to_string(),
                    k.to_string(),
                    num(*t),
                    num(traj.pre_at(k)[0]),
                    num(traj.post_at(k)[0]),
                    traj.active_count[k].to_string(),
                ]);
            }
        }
        let path = self.file("trajectories.csv");
        write_csv(
            &path,
            &["path", "node", "time", "pre", "post", "active_count"],
            &rows,
        )?;
        let path = self.file("cost.json");
        write_json(
            &path,
            &json!({
                "control": control,
                "control_source": source,
                "x0": self.res.x0,
                "paths": sim.paths,
                "steps": sim.steps,
                "seed": sim.seed,
                "cost": cost,
            }),
        )?;
        Ok(true)
    }

    fn solve_qvi(mut self) -> Run<bool> {
        let spec = self.res.spec.clone();
        let s = &self.cfg.solver;
        let grid = self.grid(s.x_nodes, s.t_nodes);
        let (v, policy) = self.solve(&grid)?;
        let residual = qvi_residual(&v, &spec);
        let assumptions =
            validate_problem(&spec, self.cfg.validate.samples, self.cfg.simulation.seed)?;
        let regularity = check_regularity(&v, &spec, &assumptions, REGULARITY_FACTOR);
        let semiconvexity = check_semiconvexity(&v, f64::INFINITY);
        let no_double = check_no_double_impulse(&policy, &v, DOUBLE_IMPULSE_TOL);
        let region = policy.region_size();
        let closed = self.res.closed_form.map(|f| closed_form_error(&v, f));

        let mut pass = residual.p99_abs <= RESIDUAL_P99_TOL
            && regularity.pass
            && no_double.pass
            && closed.is_none_or(|e| e <= CLOSED_FORM_TOL && region == 0);
        let refinement = if s.refine {
            let (vr, pr) = self.solve(&grid.refined())?;
            let res_r = qvi_residual(&vr, &spec);
            let sc_r = check_semiconvexity(&vr, f64::INFINITY);
            let closed_r = self.res.closed_form.map(|f| closed_form_error(&vr, f));
            let ratio = (sc_r.k_sc.max(semiconvexity.k_sc) + f64::MIN_POSITIVE)
                / (sc_r.k_sc.min(semiconvexity.k_sc) + f64::MIN_POSITIVE);
            let residual_decreases = res_r.p99_abs <= residual.p99_abs;
            let gain = closed.zip(closed_r).map(|(a, b)| a / b);
            let sc_stable = !assumptions.flags.h3_curvature
                || (sc_r.k_sc.is_finite() && (ratio <= SEMICONVEXITY_RATIO || sc_r.k_sc < 1e-9));
            let nd_r = check_no_double_impulse(&pr, &vr, DOUBLE_IMPULSE_TOL);
            pass &= residual_decreases
                && gain.is_none_or(|g| g >= REFINE_GAIN)
                && sc_stable
                && nd_r.pass;
            Some(json!({
                "x_nodes": vr.grid.x_nodes,
                "t_nodes": vr.grid.t_nodes,
                "residual": res_r,
                "residual_decreases": residual_decreases,
                "closed_form_error": closed_r,
                "error_gain": gain,
                "k_sc": sc_r.k_sc,
                "k_sc_ratio": ratio,
                "semiconvexity_stable": sc_stable,
                "no_double_impulse": nd_r.pass,
                "region_size": pr.region_size(),
            }))
        } else {
            None
        };

        let xs = grid.xs();
        let mut rows = Vec::new();
        for (si, tau) in grid.tau_values.iter().enumerate() {
            for (k, t) in grid.ts(*tau).iter().enumerate() {
                for (i, x) in xs.iter().enumerate() {
                    rows.push(vec![
                        num(*tau),
                        num(*t),
                        num(*x),
                        num(v.values[si][k][i]),
                        num(v.obstacle[si][k][i]),
                        u8::from(policy.intervene[si][k][i]).to_string(),
                        num(policy.impulse_size[si][k][i]),
                    ]);
                }
            }
        }
        let value_csv = self.file("value.csv");
        write_csv(
            &value_csv,
            &["tau", "t", "x", "V", "obstacle", "intervene", "xi_hat"],
            &rows,
        )?;
        for kind in [PlotKind::Profile, PlotKind::Region] {
            let files = emit_plot_data(&value_csv, kind, self.out)?;
            self.outputs.extend(files);
        }

        let extracted = if region > 0 {
            Some(self.extract(policy.clone())?)
        } else {
            None
        };
        let path = self.file("qvi.json");
        write_json(
            &path,
            &json!({
                "x_nodes": grid.x_nodes,
                "t_nodes": grid.t_nodes,
                "tau_values": grid.tau_values,
                "per_ray": grid.per_ray,
                "substeps": v.substeps,
                "residual": residual,
                "regularity": regularity,
                "k_sc": semiconvexity.k_sc,
                "h3": assumptions.flags.h3_curvature,
                "no_double_impulse": no_double,
                "region_size": region,
                "closed_form_error": closed,
                "refinement": refinement,
                "extracted_control": extracted,
                "pass": pass,
            }),
        )?;
        Ok(pass)
    }

    fn check_dpp(mut self) -> Run<bool> {
        let s = &self.cfg.solver;
        let (v, _) = self.solve(&self.grid(s.x_nodes, s.t_nodes))?;
        let d = &self.cfg.dpp;
        let sim = &self.cfg.simulation;
        let points = sample_continuation_points(&v, &self.res.spec, d.points, d.delta, sim.seed);
        let report = check_dpp(&self.res.spec, &v, &points, d.delta, sim.paths, sim.seed)?;
        let path = self.file("dpp.json");
        write_json(&path, &report)?;
        Ok(report.pass)
    }

    fn configured_perturbation(&self) -> Perturbation {
        let p = &self.cfg.perturbation;
        Perturbation {
            index: p.index,
            size_weight: p.eps,
            time_shift: p.eps_bar,
            direction: p.direction,
            target: p.target,
        }
    }

    fn eta_grid(&self) -> Run<Vec<f64>> {
        let mut eta: Vec<f64> = cone_grid(&self.res.spec.cone, self.cfg.mp.eta_points)?
            .into_iter()
            .map(|v| v[0])
            .collect();
        eta.sort_by(f64::total_cmp);
        eta.dedup();
        Ok(eta)
    }

    /// Size spikes over the η grid and pure time shifts in both directions,
    /// for every impulse, keeping the admissible ones.
    fn tested_perturbations(&self, control: &ImpulseControl) -> Run<Vec<Perturbation>> {
        let eta = self.eta_grid()?;
        let mp = &self.cfg.mp;
        let mut out = Vec::new();
        for (i, imp) in control.impulses.iter().enumerate() {
            let index = i + 1;
            for &w in &mp.size_weights {
                for &t in &eta {
                    out.push(Perturbation::forward(index, w, 0.0, t));
                }
            }
            for &shift in &mp.shifts {
                out.push(Perturbation::forward(index, 0.0, shift, imp.size[0]));
                out.push(Perturbation::backward(index, 0.0, shift, imp.size[0]));
            }
        }
        out.retain(|p| perturb_control(&self.res.spec, control, p).is_ok());
        Ok(out)
    }

    /// The configured perturbation when the control has impulses; an
    /// inadmissible one is a configuration error.
    fn checked_configured(&self, control: &ImpulseControl) -> Run<Option<Perturbation>> {
        if control.count() == 0 {
            return Ok(None);
        }
        let p = self.configured_perturbation();
        perturb_control(&self.res.spec, control, &p)
            .map_err(|e| Failure::Malformed(format!("perturbation: {e}")))?;
        Ok(Some(p))
    }

    /// Bundle nodes needed by every perturbation and MP window of `control`.
    fn extra_nodes(&self, control: &ImpulseControl) -> Run<Vec<f64>> {
        let horizon = self.res.spec.horizon;
        let mut nodes = Vec::new();
        let configured = self.checked_configured(control)?;
        for p in configured
            .iter()
            .chain(&self.tested_perturbations(control)?)
        {
            nodes.extend(p.extra_nodes(control, horizon)?);
        }
        if self.cfg.mp.window > 0.0 {
            for imp in &control.impulses {
                nodes.push((imp.time + self.cfg.mp.window).min(horizon));
            }
        }
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();
        Ok(nodes)
    }

    fn adjoints(&self, control: &ImpulseControl, extra: &[f64]) -> Run<AdjointSet> {
        let spec = &self.res.spec;
        let sim = &self.cfg.simulation;
        let bundle = Bundle::build(
            spec,
            control,
            &[self.res.x0],
            sim.paths,
            sim.steps,
            sim.seed,
            extra,
        )?;
        let frozen = compute_frozen(spec, &bundle)?;
        let first = solve_first_adjoint(&frozen, &bundle, sim.degree)?;
        let second = solve_second_adjoint(&frozen, &first, &bundle, sim.degree)?;
        Ok(AdjointSet {
            bundle,
            frozen,
            first,
            second,
        })
    }

    fn adjoint(mut self) -> Run<bool> {
        let (control, source) = self.control()?;
        let extra = self.extra_nodes(&control)?;
        let set = self.adjoints(&control, &extra)?;
        let rows = summarize(&set.bundle, &set.first, &set.second);
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.node.to_string(),
                    num(r.time),
                    num(r.y.mean),
                    num(r.y.stderr),
                    num(r.z.mean),
                    num(r.z.stderr),
                    num(r.p.mean),
                    num(r.p.stderr),
                    num(r.q.mean),
                    num(r.q.stderr),
                ]
            })
            .collect();
        let path = self.file("adjoint.csv");
        write_csv(
            &path,
            &[
                "node", "time", "y_mean", "y_stderr", "z_mean", "z_stderr", "p_mean", "p_stderr",
                "q_mean", "q_stderr",
            ],
            &table,
        )?;
        let path = self.file("adjoint_regression.json");
        write_json(
            &path,
            &json!({
                "first": set.first.diagnostics,
                "second": set.second.diagnostics,
            }),
        )?;
        let sim = &self.cfg.simulation;
        let path = self.file("adjoint.json");
        write_json(
            &path,
            &json!({
                "control": control,
                "control_source": source,
                "x0": self.res.x0,
                "paths": sim.paths,
                "steps": sim.steps,
                "seed": sim.seed,
                "degree": sim.degree,
                "extra_nodes": extra,
                "y0": rows.first().map(|r| r.y),
                "p0": rows.first().map(|r| r.p),
            }),
        )?;
        Ok(true)
    }

    fn upstream_control(&self) -> Run<ImpulseControl> {
        let path = self.out.join("adjoint.json");
        if !path.is_file() {
            return Err(Failure::Missing(format!(
                "{} (run `adjoint` first)",
                path.display()
            )));
        }
        let v = artifacts::read_json(&path)
            .map_err(|e| Failure::Missing(format!("unreadable {}: {e}", path.display())))?;
        serde_json::from_value(v["control"].clone())
            .map_err(|e| Failure::Missing(format!("{}: control: {e}", path.display())))
    }

    fn check_mp(mut self) -> Run<bool> {
        let control = self.upstream_control()?;
        let spec = self.res.spec.clone();
        let extra = self.extra_nodes(&control)?;
        let set = self.adjoints(&control, &extra)?;
        let ham = hamiltonian_bundle(&spec, &set.frozen, &set.first, &set.bundle)?;
        let eta = self.eta_grid()?;
        let window = (self.cfg.mp.window > 0.0).then_some(self.cfg.mp.window);
        let mp = check_mp_conditions(
            &spec,
            &set.bundle,
            &set.frozen,
            &set.first,
            &set.second,
            &ham,
            &eta,
            window,
        )?;
        let mut pass = mp.pass;

        let configured = match self.checked_configured(&control)? {
            Some(p) => {
                let var = simulate_variational(&spec, &set.bundle, &set.frozen, &p)?;
                let first = duality_first(&set.frozen, &set.first, &var, &set.bundle.grid.dts())?;
                let second =
                    duality_second(&spec, &set.bundle, &set.frozen, &set.second, &ham, &var)?;
                let variation = vi(&spec, &set, &ham, &p)?;
                pass &= first.pass && second.pass && variation.direct_nonnegative;
                Some(json!({
                    "duality_first": first,
                    "duality_second": second,
                    "variation": variation,
                }))
            }
            None => None,
        };

        let mut rows = Vec::new();
        let mut tested_pass = true;
        for p in self.tested_perturbations(&control)? {
            let r = vi(&spec, &set, &ham, &p)?;
            tested_pass &= r.direct_nonnegative;
            rows.push(vec![
                p.index.to_string(),
                match p.direction {
                    Direction::Forward => "forward",
                    Direction::Backward => "backward",
                }
                .to_string(),
                num(p.size_weight),
                num(p.time_shift),
                num(p.target),
                num(r.formula.mean),
                num(r.expansion.mean),
                num(r.direct.mean),
                num(r.direct.stderr),
                u8::from(r.direct_nonnegative).to_string(),
            ]);
        }
        pass &= tested_pass;
        let path = self.file("mp_tested.csv");
        write_csv(
            &path,
            &[
                "index",
                "direction",
                "eps",
                "eps_bar",
                "target",
                "formula",
                "expansion",
                "direct",
                "direct_stderr",
                "nonnegative",
            ],
            &rows,
        )?;
        let path = self.file("mp.json");
        write_json(
            &path,
            &json!({
                "control": control,
                "eta_grid": eta,
                "mp": mp,
                "perturbation": configured,
                "tested": rows.len(),
                "tested_pass": tested_pass,
                "pass": pass,
            }),
        )?;
        Ok(pass)
    }

    fn expansion_order(mut self) -> Run<bool> {
        let (control, source) = self.control()?;
        let e = &self.cfg.expansion;
        let sim = &self.cfg.simulation;
        let mut rows = Vec::new();
        let mut reports = Vec::new();
        let mut pass = true;
        for &m in &e.m {
            let cfg = OrderConfig {
                index: e.index,
                direction: e.direction,
                target: e.target,
                eps_grid: e.eps_grid.clone(),
                coupling: e.coupling,
                m,
                paths: sim.paths,
                base_steps: sim.steps,
                seed: sim.seed,
            };
            match check_expansion_orders(&self.res.spec, &control, self.res.x0, &cfg) {
                Ok(r) => {
                    pass &= r.pass;
                    for c in &r.claims {
                        for (j, est) in c.estimates.iter().enumerate() {
                            rows.push(vec![
                                format!("{}_m{m}", c.name),
                                num(r.eps[j]),
                                num(r.eps_bar[j]),
                                num(c.abscissa[j]),
                                num(est.mean),
                                num(est.stderr),
                            ]);
                        }
                    }
                    reports.push(json!({ "m": m, "report": r }));
                }
                Err(Error::OrderInconclusive(msg)) => {
                    pass = false;
                    reports.push(json!({ "m": m, "inconclusive": msg }));
                }
                Err(err) => return Err(err.into()),
            }
        }
        let csv_path = self.file("expansion.csv");
        write_csv(
            &csv_path,
            &[
                "claim", "epsilon", "eps_bar", "abscissa", "estimate", "stderr",
            ],
            &rows,
        )?;
        let files = emit_plot_data(&csv_path, PlotKind::Slope, self.out)?;
        self.outputs.extend(files);
        let path = self.file("expansion.json");
        write_json(
            &path,
            &json!({
                "control": control,
                "control_source": source,
                "reports": reports,
                "pass": pass,
            }),
        )?;
        Ok(pass)
    }
}

fn vi(
    spec: &crate::model::ProblemSpec,
    set: &AdjointSet,
    ham: &HamiltonianPath,
    p: &Perturbation,
) -> Run<crate::maxprin::VariationReport> {
    let var = simulate_variational(spec, &set.bundle, &set.frozen, p)?;
    Ok(variational_inequality(
        spec,
        &set.bundle,
        &set.frozen,
        &set.second,
        ham,
        &var,
    )?)
}
