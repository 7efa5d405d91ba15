//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test --test acceptance`; the process exits nonzero when
//! any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::Value;

use impctl::adjoint::{
    compute_frozen, node_estimate, solve_first_adjoint, solve_second_adjoint, Bundle,
};
use impctl::cli::config::Overrides;
use impctl::cli::presets::{preset, Preset, PRESET_NAMES};
use impctl::cli::{closed_form_error, run, Command, Invocation};
use impctl::maxprin::{check_expansion_orders, Direction, OrderConfig};
use impctl::model::{validate_problem, CoefficientFamily, ImpulseControl, ProblemSpec};
use impctl::qvi::{
    check_dpp, check_no_double_impulse, check_semiconvexity, qvi_residual,
    sample_continuation_points, solve_qvi, trivial_bound, PolicyMap, SolverConfig, ValueFunction,
};
use impctl::stats::Estimate;

const SEED: u64 = 0;
const PATHS: usize = 10_000;
const STEPS: usize = 200;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn solve(p: &Preset, n: usize) -> (ValueFunction, PolicyMap) {
    solve_qvi(&p.spec, &p.solve_grid(n, n), &SolverConfig::default()).expect("QVI solve")
}

fn values(v: &ValueFunction) -> impl Iterator<Item = f64> + '_ {
    v.values.iter().flatten().flatten().copied()
}

/// Base and once-refined solutions of every preset.
struct Solutions {
    base: Vec<(Preset, ValueFunction, PolicyMap)>,
    refined: Vec<(ValueFunction, PolicyMap)>,
}

fn solutions() -> Solutions {
    let mut base = Vec::new();
    let mut refined = Vec::new();
    for name in PRESET_NAMES {
        let p = preset(name).expect("preset");
        let (v, pol) = solve(&p, 200);
        let (vr, pr) = solve(&p, 399);
        base.push((p, v, pol));
        refined.push((vr, pr));
    }
    Solutions { base, refined }
}

fn heat_kernel_oracle(s: &Solutions) -> Verdict {
    let (p, v, pol) = &s.base[0];
    let exact = p.closed_form.expect("closed form");
    let err = closed_form_error(v, exact);
    let err_r = closed_form_error(&s.refined[0].0, exact);
    let region = pol.region_size();
    verdict(
        err <= 2e-2 && region == 0 && err / err_r >= 1.5,
        format!(
            "max error {err:.3e} (<= 2e-2), region {region} nodes, refined error {err_r:.3e}, gain {:.2} (>= 1.5)",
            err / err_r
        ),
    )
}

fn qvi_residuals(s: &Solutions) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for ((p, v, _), (vr, _)) in s.base.iter().zip(&s.refined) {
        let a = qvi_residual(v, &p.spec).p99_abs;
        let b = qvi_residual(vr, &p.spec).p99_abs;
        pass &= a <= 5e-2 && b < a;
        parts.push(format!("{} p99 {a:.2e} -> {b:.2e}", p.name));
    }
    verdict(pass, parts.join("; "))
}

fn bounds_and_monotonicity(s: &Solutions) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (p, v, pol) in &s.base {
        let grid = &v.grid;
        let bound = trivial_bound(&p.spec, grid);
        let (lo, hi) = values(v).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
        let in_bounds = lo >= 0.0 && hi <= bound;

        let half = p.spec.with_impulse_cost_scaled(0.5);
        let (vh, _) = solve_qvi(&half, grid, &SolverConfig::default()).expect("solve");
        let rise = values(&vh)
            .zip(values(v))
            .map(|(a, b)| a - b)
            .fold(f64::NEG_INFINITY, f64::max);

        let double = p.spec.with_costs_scaled(2.0);
        let (v2, pol2) = solve_qvi(&double, grid, &SolverConfig::default()).expect("solve");
        let scale_err = values(&v2)
            .zip(values(v))
            .map(|(a, b)| (a - 2.0 * b).abs())
            .fold(0.0_f64, f64::max);
        let same_policy = pol2.intervene == pol.intervene && pol2.impulse_size == pol.impulse_size;

        let ok = in_bounds && rise <= 1e-6 && scale_err <= 1e-9 * (1.0 + hi) && same_policy;
        pass &= ok;
        parts.push(format!(
            "{} V in [{lo:.3}, {hi:.3}] <= {bound:.3}, max rise {rise:.1e}, |V2-2V| {scale_err:.1e}, policy {}",
            p.name,
            if same_policy { "same" } else { "CHANGED" }
        ));
    }
    verdict(pass, parts.join("; "))
}

fn dpp(s: &Solutions) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (p, v, _) in s
        .base
        .iter()
        .filter(|(p, ..)| p.name == "heat-kernel" || p.name == "impulse-active")
    {
        let pts = sample_continuation_points(v, &p.spec, 20, 0.05, SEED);
        let r = check_dpp(&p.spec, v, &pts, 0.05, PATHS, SEED).expect("dpp");
        let worst = r
            .points
            .iter()
            .map(|q| q.margin / q.continuation.stderr.max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min);
        let eq = r.points.iter().filter(|q| q.equality_checked).count();
        pass &= r.pass && r.points.len() == 20;
        parts.push(format!(
            "{} {} points, worst margin {worst:.2} se (band {:.2} se), {eq} equality checks, {}",
            p.name,
            r.points.len(),
            r.z,
            if r.pass { "ok" } else { "FAILED" }
        ));
    }
    verdict(pass, parts.join("; "))
}

fn no_double_impulse(s: &Solutions) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for ((p, v, pol), (vr, pr)) in s.base.iter().zip(&s.refined) {
        let a = check_no_double_impulse(pol, v, 1e-8);
        let b = check_no_double_impulse(pr, vr, 1e-8);
        pass &= a.pass && b.pass;
        parts.push(format!(
            "{} {}+{} intervention nodes checked, {} violations",
            p.name,
            a.checked,
            b.checked,
            a.violations.len() + b.violations.len()
        ));
    }
    verdict(pass, parts.join("; "))
}

fn semiconvexity() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in PRESET_NAMES {
        let p = preset(name).expect("preset");
        let rep = validate_problem(&p.spec, 400, SEED).expect("validate");
        if !rep.flags.h3_curvature {
            parts.push(format!("{name} skipped (H3 not met)"));
            continue;
        }
        let ks: Vec<f64> = [100, 199, 397]
            .iter()
            .map(|n| check_semiconvexity(&solve(&p, *n).0, f64::INFINITY).k_sc)
            .collect();
        let hi = ks.iter().copied().fold(0.0_f64, f64::max);
        let lo = ks.iter().copied().fold(f64::INFINITY, f64::min);
        let ok = ks.iter().all(|k| k.is_finite()) && (hi <= 2.0 * lo || hi < 1e-9);
        pass &= ok;
        parts.push(format!(
            "{name} K_sc {:.3}/{:.3}/{:.3}",
            ks[0], ks[1], ks[2]
        ));
    }
    verdict(pass, parts.join("; "))
}

fn base_spec() -> ProblemSpec {
    let mut s = preset("heat-kernel").expect("preset").spec;
    s.drift = CoefficientFamily::constant(0.0);
    s.diffusion = CoefficientFamily::constant(0.5);
    s.running_cost = CoefficientFamily::constant(0.0);
    s.terminal_cost = CoefficientFamily::trig(0.0, 1.0, 1.0, 0.0);
    s
}

/// Largest |mean gap| / combined stderr over quarter nodes of one adjoint field.
fn oracle_gap(
    field: &[f64],
    paths: usize,
    nodes: usize,
    oracle: impl Fn(usize) -> Estimate,
) -> f64 {
    [0, nodes / 4, nodes / 2, 3 * nodes / 4]
        .iter()
        .map(|&k| {
            let est = node_estimate(field, paths, nodes, k);
            let ora = oracle(k);
            let comb = (est.stderr.powi(2) + ora.stderr.powi(2)).sqrt();
            (est.mean - ora.mean).abs() / comb.max(1e-300)
        })
        .fold(0.0_f64, f64::max)
}

fn adjoint_oracles() -> Verdict {
    let empty = ImpulseControl::empty(0.0);
    let build = |spec: &ProblemSpec| {
        Bundle::build(spec, &empty, &[0.0], PATHS, STEPS, SEED, &[]).expect("bundle")
    };
    let horizon = 1.0;

    // Constant G_x = c: Y(s) = E[H_x | F_s] + c(T − s).
    let c = 0.7;
    let mut spec = base_spec();
    spec.running_cost = CoefficientFamily::affine(0.0, c);
    let bundle = build(&spec);
    let frozen = compute_frozen(&spec, &bundle).expect("frozen");
    let first = solve_first_adjoint(&frozen, &bundle, 3).expect("first");
    let n = bundle.len();
    let times = bundle.grid.nodes.clone();
    let hx = frozen.h_x.clone();
    let gap_a = oracle_gap(&first.y, PATHS, n, |k| {
        let s: Vec<f64> = hx.iter().map(|h| h + c * (horizon - times[k])).collect();
        Estimate::from_samples(&s)
    });

    // Constant B_x = a: P(s) = e^{2a(T − s)} E[H_xx | F_s].
    let a = -0.5;
    let mut spec = base_spec();
    spec.drift = CoefficientFamily::affine(0.0, a);
    let bundle = build(&spec);
    let frozen = compute_frozen(&spec, &bundle).expect("frozen");
    let first = solve_first_adjoint(&frozen, &bundle, 3).expect("first");
    let second = solve_second_adjoint(&frozen, &first, &bundle, 3).expect("second");
    let hxx = frozen.h_xx.clone();
    let gap_b = oracle_gap(&second.p, PATHS, n, |k| {
        let f = (2.0 * a * (horizon - times[k])).exp();
        let s: Vec<f64> = hxx.iter().map(|h| f * h).collect();
        Estimate::from_samples(&s)
    });

    // Constant 𝐇_xx = c: P(s) = E[H_xx | F_s] + c(T − s).
    let spec = base_spec();
    let bundle = build(&spec);
    let mut frozen = compute_frozen(&spec, &bundle).expect("frozen");
    frozen.g_xx.iter_mut().for_each(|g| *g = c);
    let first = solve_first_adjoint(&frozen, &bundle, 3).expect("first");
    let second = solve_second_adjoint(&frozen, &first, &bundle, 3).expect("second");
    let hxx = frozen.h_xx.clone();
    let gap_c = oracle_gap(&second.p, PATHS, n, |k| {
        let s: Vec<f64> = hxx.iter().map(|h| h + c * (horizon - times[k])).collect();
        Estimate::from_samples(&s)
    });

    verdict(
        gap_a <= 3.0 && gap_b <= 3.0 && gap_c <= 3.0,
        format!(
            "max gap / combined se: Y with constant G_x {gap_a:.2}, P with constant B_x {gap_b:.2}, P with constant H_xx {gap_c:.2} (<= 3)"
        ),
    )
}

struct CliRun {
    dir: tempfile::TempDir,
}

impl CliRun {
    fn new() -> Self {
        CliRun {
            dir: tempfile::tempdir().expect("tempdir"),
        }
    }

    fn config(&self, text: &str) -> PathBuf {
        let path = self.dir.path().join("run.toml");
        fs::write(&path, text).expect("config");
        path
    }

    fn run(&self, command: Command, preset: &str, config: Option<&Path>) -> i32 {
        run(&Invocation {
            command,
            config: config.map(Path::to_path_buf),
            overrides: Overrides {
                preset: Some(preset.into()),
                ..Overrides::default()
            },
            out: self.dir.path().join("out"),
            threads: None,
        })
        .exit_code
    }

    fn json(&self, name: &str) -> Value {
        let text = fs::read_to_string(self.dir.path().join("out").join(name)).expect(name);
        serde_json::from_str(&text).expect("json")
    }
}

fn duality_line(name: &str, mp: &Value) -> (bool, String) {
    let p = &mp["perturbation"];
    let f = |k: &str| -> (bool, f64, f64) {
        let d = &p[k];
        (
            d["pass"].as_bool().unwrap_or(false),
            d["gap"].as_f64().unwrap_or(f64::NAN),
            d["combined_stderr"].as_f64().unwrap_or(f64::NAN),
        )
    };
    let (p1, g1, s1) = f("duality_first");
    let (p2, g2, s2) = f("duality_second");
    (
        p1 && p2,
        format!(
            "{name} first gap {g1:.2e} (3se {:.2e}), second gap {g2:.2e} (3se {:.2e})",
            3.0 * s1,
            3.0 * s2
        ),
    )
}

/// Runs `adjoint` then `check-mp`; returns `mp.json`.
fn mp_run(preset: &str, config: &str) -> Value {
    let r = CliRun::new();
    let cfg = r.config(config);
    assert_eq!(
        r.run(Command::Adjoint, preset, Some(&cfg)),
        0,
        "adjoint on {preset}"
    );
    let code = r.run(Command::CheckMp, preset, Some(&cfg));
    assert!(code == 0 || code == 1, "check-mp on {preset} exited {code}");
    r.json("mp.json")
}

const NO_FAMILY: &str = "[mp]\nsize_weights = []\nshifts = []\n";

fn duality(impulse_active: &Value) -> Verdict {
    let lin = mp_run("linear-adjoint", NO_FAMILY);
    let (pa, da) = duality_line("linear-adjoint", &lin);
    let (pb, db) = duality_line("impulse-active", impulse_active);
    verdict(pa && pb, format!("{da}; {db}"))
}

fn expansion_orders() -> Verdict {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["linear-adjoint", "loan"] {
        let p = preset(name).expect("preset");
        let control = p.control.clone().expect("control");
        for m in [1, 2] {
            let cfg = OrderConfig {
                index: 1,
                direction: Direction::Forward,
                target: 0.0,
                eps_grid: vec![0.2, 0.1, 0.05, 0.025],
                coupling: 1.0,
                m,
                paths: PATHS,
                base_steps: STEPS,
                seed: SEED,
            };
            match check_expansion_orders(&p.spec, &control, p.x0[0], &cfg) {
                Ok(r) => {
                    pass &= r.pass;
                    let slopes: Vec<String> = r
                        .claims
                        .iter()
                        .map(|c| format!("{} {:.2} (>= {:.1})", c.name, c.slope, c.threshold))
                        .collect();
                    parts.push(format!("{name} m={m}: {}", slopes.join(", ")));
                }
                Err(e) => {
                    pass = false;
                    parts.push(format!("{name} m={m}: {e}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs <= 300.0;
    parts.push(format!("{secs:.0} s"));
    verdict(pass, parts.join("; "))
}

fn max_principle(mp: &Value) -> Verdict {
    let idx = &mp["mp"]["indices"];
    let mut pass = true;
    let mut parts = Vec::new();
    for r in idx.as_array().into_iter().flatten() {
        let pairs = r["mp2"].as_array().cloned().unwrap_or_default();
        let ok = pairs.len() == 9
            && pairs.iter().all(|v| {
                v["pairing"].as_f64().unwrap_or(f64::NAN)
                    >= -3.0 * v["stderr"].as_f64().unwrap_or(f64::NAN)
            });
        pass &= ok;
        parts.push(format!(
            "impulse {} at t={} size {:.3}: MP2 min over {} targets {:.3e} {} (tangent form min {:.3e} {})",
            r["index"],
            r["time"],
            r["size"].as_f64().unwrap_or(f64::NAN),
            pairs.len(),
            r["mp2_min"].as_f64().unwrap_or(f64::NAN),
            if ok { "ok" } else { "FAILED" },
            r["mp2_tangent_min"].as_f64().unwrap_or(f64::NAN),
            if r["mp2_tangent_pass"].as_bool() == Some(true) { "ok" } else { "FAILED" },
        ));
    }
    let tested = mp["tested"].as_u64().unwrap_or(0);
    let direct = mp["tested_pass"].as_bool() == Some(true) && tested > 0;
    pass &= direct;
    parts.push(format!(
        "direct differences >= -3se on {tested} perturbations: {}",
        if direct { "ok" } else { "FAILED" }
    ));

    let free = mp_run(
        "impulse-active",
        &format!(
            "{NO_FAMILY}[problem]\nell0 = 0.1\n[costs.impulse]\nkind = \"affine\"\nparams = [0.1, 0.1]\n"
        ),
    );
    let stat: Vec<(f64, f64)> = free["mp"]["indices"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|r| {
            let v = &r["stationarity"]["value"];
            (
                v["mean"].as_f64().unwrap_or(f64::NAN),
                v["stderr"].as_f64().unwrap_or(f64::NAN),
            )
        })
        .collect();
    let exact_zero = !stat.is_empty() && stat.iter().all(|(m, s)| *m == 0.0 && *s == 0.0);
    pass &= exact_zero;
    parts.push(format!("tau-free stationarity {stat:?}"));
    verdict(pass, parts.join("; "))
}

fn determinism() -> Verdict {
    let config = "\
[solver]
x_nodes = 41
t_nodes = 41
refine = false
[simulation]
paths = 1000
steps = 50
seed = 7
[control]
paths = 500
[dpp]
points = 4
[mp]
size_weights = [0.1]
shifts = [0.05]
eta_points = 3
[expansion]
m = [1]
";
    let runs: Vec<CliRun> = (0..3).map(|_| CliRun::new()).collect();
    let mut codes = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let cfg = r.config(config);
        for command in impctl::cli::Command::ALL {
            let code = impctl::cli::run(&Invocation {
                command,
                config: Some(cfg.clone()),
                overrides: Overrides {
                    preset: Some("linear-adjoint".into()),
                    ..Overrides::default()
                },
                out: r.dir.path().join("out"),
                threads: Some(if i == 2 { 4 } else { 1 }),
            })
            .exit_code;
            if i == 0 {
                codes.push(format!("{}={code}", command.name()));
            }
        }
    }
    let listing = |r: &CliRun| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(r.dir.path().join("out"))
            .expect("out")
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with("manifest_"))
            .map(|n| {
                let bytes = fs::read(r.dir.path().join("out").join(&n)).expect("read");
                (n, bytes)
            })
            .collect();
        files.sort();
        files
    };
    let a = listing(&runs[0]);
    let same_seed = a == listing(&runs[1]);
    let threads = a == listing(&runs[2]);
    verdict(
        same_seed && threads && a.len() > 10,
        format!(
            "{} artifacts; repeat identical: {same_seed}; 1 vs 4 threads identical: {threads}; exits {}",
            a.len(),
            codes.join(" ")
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, title: &'static str, v: Verdict| {
        println!(
            "criterion {n:>2} {}: {title}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, title, v));
    };

    let s = solutions();
    report(1, "heat-kernel oracle", heat_kernel_oracle(&s));
    report(2, "QVI residual", qvi_residuals(&s));
    report(
        3,
        "value bounds and monotonicity",
        bounds_and_monotonicity(&s),
    );
    report(4, "DPP Monte Carlo", dpp(&s));
    report(5, "no double impulse", no_double_impulse(&s));
    drop(s);
    report(6, "semiconvexity", semiconvexity());
    report(7, "adjoint oracles", adjoint_oracles());
    let ia = mp_run("impulse-active", "");
    report(8, "duality identities", duality(&ia));
    report(9, "expansion orders", expansion_orders());
    report(10, "maximum principle", max_principle(&ia));
    report(11, "determinism", determinism());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria pass ({:.0} s)",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
