//! Finite-difference solver for the τ-parameterized quasi-variational
//! inequality in one state dimension, with policy extraction and the DPP,
//! regularity, semi-convexity and no-double-impulse checks.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::model::{cone_grid, AssumptionReport, Impulse, ImpulseControl, ProblemSpec};
use crate::simulate::{FeedbackPolicy, PolicyEvaluation};
use crate::stats::{path_rng, quantile, Estimate};

/// Space-time grid shared by all τ slices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveGrid {
    pub tau_values: Vec<f64>,
    /// Time nodes per slice, uniform on `[τ, T]`.
    pub t_nodes: usize,
    pub x_nodes: usize,
    pub x_min: f64,
    pub x_max: f64,
    /// Width of the band at each end excluded from residual and policy checks.
    pub boundary_margin: f64,
    /// Lattice points per cone ray for the intervention operator.
    pub per_ray: usize,
    pub horizon: f64,
}

/// Default parameter values: `count` points from τ₀ to τ₀ + 0.8(T − τ₀).
pub fn default_tau_values(tau0: f64, horizon: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![tau0];
    }
    (0..count)
        .map(|j| tau0 + 0.8 * (horizon - tau0) * j as f64 / (count - 1) as f64)
        .collect()
}

impl SolveGrid {
    /// Grid with five τ slices, a 10% boundary band and a ray lattice of
    /// spacing 0.05.
    pub fn new(spec: &ProblemSpec, x_min: f64, x_max: f64, x_nodes: usize, t_nodes: usize) -> Self {
        SolveGrid {
            tau_values: default_tau_values(spec.tau0, spec.horizon, 5),
            t_nodes,
            x_nodes,
            x_min,
            x_max,
            boundary_margin: 0.1 * (x_max - x_min),
            per_ray: (spec.cone.size_cap / 0.05).round() as usize + 1,
            horizon: spec.horizon,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.t_nodes < 32 || self.x_nodes < 32 {
            return Err(invalid("grid", "t and x node counts must be at least 32"));
        }
        if !(self.x_min < self.x_max) {
            return Err(invalid("grid", "x_min must be below x_max"));
        }
        if self.tau_values.is_empty()
            || self
                .tau_values
                .iter()
                .any(|t| !(*t >= 0.0 && *t < self.horizon))
        {
            return Err(invalid("grid.tau_values", "values must lie in [0, T)"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.x_nodes - 1) as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.x_nodes)
            .map(|i| self.x_min + self.dx() * i as f64)
            .collect()
    }

    /// Time nodes of the slice with parameter `tau`.
    pub fn ts(&self, tau: f64) -> Vec<f64> {
        let n = self.t_nodes - 1;
        (0..=n)
            .map(|k| {
                if k == n {
                    self.horizon
                } else {
                    tau + (self.horizon - tau) * k as f64 / n as f64
                }
            })
            .collect()
    }

    /// Indices of nodes outside the boundary band.
    pub fn interior(&self) -> std::ops::Range<usize> {
        let band = (self.boundary_margin / self.dx()).ceil() as usize;
        let lo = band.max(1);
        let hi = self.x_nodes.saturating_sub(band.max(1));
        lo..hi.max(lo)
    }

    /// Same grid with both resolutions doubled (node spacing halved).
    pub fn refined(&self) -> Self {
        let mut g = self.clone();
        g.x_nodes = 2 * (self.x_nodes - 1) + 1;
        g.t_nodes = 2 * (self.t_nodes - 1) + 1;
        g
    }

    /// Catmull-Rom cubic interpolation in x; linear in the end cells and
    /// clamped outside the grid.
    pub fn interp_cubic(&self, v: &[f64], x: f64) -> f64 {
        let p = (x - self.x_min) / self.dx();
        let last = self.x_nodes - 1;
        if p < 1.0 || p >= (last - 1) as f64 {
            return self.interp(v, x);
        }
        let j = p.floor() as usize;
        let w = p - j as f64;
        let (a, b, c, d) = (v[j - 1], v[j], v[j + 1], v[j + 2]);
        b + 0.5 * w * (c - a + w * (2.0 * a - 5.0 * b + 4.0 * c - d + w * (3.0 * (b - c) + d - a)))
    }

    /// Linear interpolation in x, clamped to the end values.
    pub fn interp(&self, v: &[f64], x: f64) -> f64 {
        let p = (x - self.x_min) / self.dx();
        if p <= 0.0 {
            return v[0];
        }
        let last = self.x_nodes - 1;
        if p >= last as f64 {
            return v[last];
        }
        let j = p.floor() as usize;
        let w = p - j as f64;
        v[j] * (1.0 - w) + v[j + 1] * w
    }

    fn nearest_x(&self, x: f64) -> (usize, bool) {
        let p = ((x - self.x_min) / self.dx()).round();
        let clamped = p < 0.0 || p > (self.x_nodes - 1) as f64;
        (p.clamp(0.0, (self.x_nodes - 1) as f64) as usize, clamped)
    }
}

/// Solver tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    /// Relative sup-change below which a time level is a fixed point.
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of the monotonicity limit used for substeps.
    pub cfl: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-8,
            max_iter: 50,
            cfl: 0.9,
        }
    }
}

/// Grid values `V[τ][t][x]` with the obstacle `N[V]` on the same nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueFunction {
    pub grid: SolveGrid,
    pub values: Vec<Vec<Vec<f64>>>,
    pub obstacle: Vec<Vec<Vec<f64>>>,
    /// Time substeps used per level in each slice.
    pub substeps: Vec<usize>,
}

impl ValueFunction {
    /// Interpolation within slice `s`: cubic in x, linear in t.
    pub fn value_at(&self, s: usize, t: f64, x: f64) -> f64 {
        let ts = self.grid.ts(self.grid.tau_values[s]);
        let dt = ts[1] - ts[0];
        let p = ((t - ts[0]) / dt).clamp(0.0, (ts.len() - 1) as f64);
        let k = (p.floor() as usize).min(ts.len() - 2);
        let w = p - k as f64;
        let a = self.grid.interp_cubic(&self.values[s][k], x);
        let b = self.grid.interp_cubic(&self.values[s][k + 1], x);
        a * (1.0 - w) + b * w
    }

    /// Largest |V| over the grid.
    pub fn sup_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Intervention flags and optimal impulse sizes on the value grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyMap {
    pub grid: SolveGrid,
    pub intervene: Vec<Vec<Vec<bool>>>,
    pub impulse_size: Vec<Vec<Vec<f64>>>,
    /// Slice used when the map acts as a feedback rule.
    pub feedback_slice: usize,
}

impl PolicyMap {
    /// Number of intervention nodes.
    pub fn region_size(&self) -> usize {
        self.intervene
            .iter()
            .flatten()
            .flatten()
            .filter(|b| **b)
            .count()
    }

    /// Uses the slice whose parameter is nearest to `tau` for feedback.
    pub fn with_feedback_tau(mut self, tau: f64) -> Self {
        self.feedback_slice = nearest_index(&self.grid.tau_values, tau);
        self
    }
}

fn nearest_index(values: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, w) in values.iter().enumerate() {
        if (w - v).abs() < (values[best] - v).abs() {
            best = i;
        }
    }
    best
}

static CLAMP_WARNED: std::sync::Once = std::sync::Once::new();

impl FeedbackPolicy for PolicyMap {
    fn decide(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        let s = self.feedback_slice;
        let ts = self.grid.ts(self.grid.tau_values[s]);
        let dt = ts[1] - ts[0];
        let k = ((t - ts[0]) / dt).round().clamp(0.0, (ts.len() - 1) as f64) as usize;
        let (i, clamped) = self.grid.nearest_x(x[0]);
        if clamped {
            CLAMP_WARNED.call_once(|| {
                log::warn!("policy lookup clamped at the grid boundary (x = {})", x[0])
            });
        }
        self.intervene[s][k][i].then(|| vec![self.impulse_size[s][k][i]])
    }
}

/// Impulse lattice sorted by magnitude, then value, with ℓ at time `t`.
fn lattice(spec: &ProblemSpec, per_ray: usize) -> Result<Vec<f64>> {
    let mut xi: Vec<f64> = cone_grid(&spec.cone, per_ray)?
        .into_iter()
        .map(|v| v[0])
        .collect();
    xi.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    xi.dedup();
    Ok(xi)
}

/// `N[V](x) = min_ξ V(x + ξ) + ℓ(t, ξ)` over the lattice, with the argmin.
pub fn intervention_operator(
    v: &[f64],
    t: f64,
    spec: &ProblemSpec,
    grid: &SolveGrid,
    lattice: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let costs: Vec<f64> = lattice.iter().map(|xi| spec.impulse(t, &[*xi])).collect();
    let xs = grid.xs();
    let mut nv = vec![f64::INFINITY; v.len()];
    let mut arg = vec![0.0; v.len()];
    for (i, x) in xs.iter().enumerate() {
        for (xi, c) in lattice.iter().zip(&costs) {
            let cand = grid.interp(v, x + xi) + c;
            if cand < nv[i] {
                nv[i] = cand;
                arg[i] = *xi;
            }
        }
    }
    (nv, arg)
}

struct SliceCoefficients {
    b: Vec<f64>,
    half_s2: Vec<f64>,
    g: Vec<f64>,
}

fn slice_coefficients(spec: &ProblemSpec, tau: f64, xs: &[f64]) -> SliceCoefficients {
    SliceCoefficients {
        b: xs.iter().map(|x| spec.drift.value(tau, *x)).collect(),
        half_s2: xs
            .iter()
            .map(|x| 0.5 * spec.diffusion.value(tau, *x).powi(2))
            .collect(),
        g: xs
            .iter()
            .map(|x| spec.running_cost.value(tau, *x))
            .collect(),
    }
}

/// Diffusion used by the scheme: `½σ²`, raised to `|b|Δx/2` where central
/// drift differences would break monotonicity.
fn scheme_diffusion(b: f64, half_s2: f64, dx: f64) -> f64 {
    half_s2.max(0.5 * b.abs() * dx)
}

/// Hamiltonian `b D V + ½σ² D²V + g` with central differences, minimal added
/// viscosity and mirrored ghost nodes.
fn hamiltonian(c: &SliceCoefficients, v: &[f64], dx: f64, out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        let left = if i == 0 { v[1] } else { v[i - 1] };
        let right = if i == n - 1 { v[n - 2] } else { v[i + 1] };
        let d1 = (right - left) / (2.0 * dx);
        let d2 = (right - 2.0 * v[i] + left) / (dx * dx);
        out[i] = c.b[i] * d1 + scheme_diffusion(c.b[i], c.half_s2[i], dx) * d2 + c.g[i];
    }
}

/// Solves every τ slice backward in time.
pub fn solve_qvi(
    spec: &ProblemSpec,
    grid: &SolveGrid,
    cfg: &SolverConfig,
) -> Result<(ValueFunction, PolicyMap)> {
    if spec.dim != 1 {
        return Err(Error::Unsupported(
            "the QVI solver handles one state dimension".into(),
        ));
    }
    spec.check()?;
    grid.check()?;
    let lat = lattice(spec, grid.per_ray)?;
    let slices = grid
        .tau_values
        .par_iter()
        .enumerate()
        .map(|(s, &tau)| solve_slice(spec, grid, cfg, &lat, s, tau))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::new();
    let mut obstacle = Vec::new();
    let mut intervene = Vec::new();
    let mut sizes = Vec::new();
    let mut substeps = Vec::new();
    for sl in slices {
        values.push(sl.values);
        obstacle.push(sl.obstacle);
        intervene.push(sl.intervene);
        sizes.push(sl.sizes);
        substeps.push(sl.substeps);
    }
    let feedback_slice = nearest_index(&grid.tau_values, spec.tau0);
    Ok((
        ValueFunction {
            grid: grid.clone(),
            values,
            obstacle,
            substeps,
        },
        PolicyMap {
            grid: grid.clone(),
            intervene,
            impulse_size: sizes,
            feedback_slice,
        },
    ))
}

struct SliceSolution {
    values: Vec<Vec<f64>>,
    obstacle: Vec<Vec<f64>>,
    intervene: Vec<Vec<bool>>,
    sizes: Vec<Vec<f64>>,
    substeps: usize,
}

fn solve_slice(
    spec: &ProblemSpec,
    grid: &SolveGrid,
    cfg: &SolverConfig,
    lat: &[f64],
    s: usize,
    tau: f64,
) -> Result<SliceSolution> {
    let xs = grid.xs();
    let dx = grid.dx();
    let ts = grid.ts(tau);
    let nt = ts.len();
    let coef = slice_coefficients(spec, tau, &xs);
    let rate = coef
        .b
        .iter()
        .zip(&coef.half_s2)
        .map(|(b, h)| 2.0 * scheme_diffusion(*b, *h, dx) / (dx * dx))
        .fold(0.0_f64, f64::max);
    let dt_level = ts[1] - ts[0];
    let substeps = if rate > 0.0 {
        (dt_level * rate / cfg.cfl).ceil().max(1.0) as usize
    } else {
        1
    };
    if substeps > 1 {
        log::debug!("slice {s}: CFL limit requires {substeps} substeps per level");
    }

    let mut values = vec![Vec::new(); nt];
    let mut obstacle = vec![Vec::new(); nt];
    let mut intervene = vec![Vec::new(); nt];
    let mut sizes = vec![Vec::new(); nt];

    let h: Vec<f64> = xs.iter().map(|x| spec.terminal(&[*x])).collect();
    let (nh, arg) = intervention_operator(&h, ts[nt - 1], spec, grid, lat);
    values[nt - 1] = h.iter().zip(&nh).map(|(a, b)| a.min(*b)).collect();
    intervene[nt - 1] = h.iter().zip(&nh).map(|(a, b)| b < a).collect();
    sizes[nt - 1] = arg;
    obstacle[nt - 1] = intervention_operator(&values[nt - 1], ts[nt - 1], spec, grid, lat).0;

    let mut ham = vec![0.0; xs.len()];
    for k in (0..nt - 1).rev() {
        let dt = (ts[k + 1] - ts[k]) / substeps as f64;
        let mut lin = values[k + 1].clone();
        for _ in 0..substeps {
            hamiltonian(&coef, &lin, dx, &mut ham);
            lin.iter_mut().zip(&ham).for_each(|(v, hv)| *v += dt * hv);
        }
        let mut v = lin.clone();
        let mut converged = false;
        for _ in 0..cfg.max_iter {
            let (nv, _) = intervention_operator(&v, ts[k], spec, grid, lat);
            let next: Vec<f64> = lin.iter().zip(&nv).map(|(a, b)| a.min(*b)).collect();
            let change = next
                .iter()
                .zip(&v)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = next.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
            v = next;
            if change <= cfg.tol * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence { slice: s, level: k });
        }
        let (n_final, arg_final) = intervention_operator(&v, ts[k], spec, grid, lat);
        intervene[k] = lin.iter().zip(&n_final).map(|(a, b)| b < a).collect();
        sizes[k] = arg_final;
        obstacle[k] = n_final;
        values[k] = v;
    }
    Ok(SliceSolution {
        values,
        obstacle,
        intervene,
        sizes,
        substeps,
    })
}

/// Summary of the discrete QVI residual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub max_abs: f64,
    pub p99_abs: f64,
    pub nodes: usize,
    #[serde(skip)]
    pub field: Vec<Vec<Vec<f64>>>,
}

/// `r = min{D_t V + H(τ,t,x,D_x V,D_xx V), N[V] − V}` at interior nodes.
pub fn qvi_residual(v: &ValueFunction, spec: &ProblemSpec) -> ResidualReport {
    let grid = &v.grid;
    let xs = grid.xs();
    let dx = grid.dx();
    let interior = grid.interior();
    let mut all = Vec::new();
    let mut field = Vec::new();
    let mut ham = vec![0.0; xs.len()];
    for (s, &tau) in grid.tau_values.iter().enumerate() {
        let coef = slice_coefficients(spec, tau, &xs);
        let ts = grid.ts(tau);
        let mut slice = Vec::new();
        for k in 0..ts.len() - 1 {
            let dt = ts[k + 1] - ts[k];
            let vk = &v.values[s][k];
            hamiltonian(&coef, vk, dx, &mut ham);
            let mut row = vec![0.0; xs.len()];
            for i in interior.clone() {
                let dtv = (v.values[s][k + 1][i] - vk[i]) / dt;
                let r = (dtv + ham[i]).min(v.obstacle[s][k][i] - vk[i]);
                row[i] = r;
                all.push(r.abs());
            }
            slice.push(row);
        }
        field.push(slice);
    }
    ResidualReport {
        max_abs: all.iter().fold(0.0_f64, |m, r| m.max(*r)),
        p99_abs: quantile(&all, 0.99),
        nodes: all.len(),
        field,
    }
}

/// One Monte Carlo DPP probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppPoint {
    pub tau: f64,
    pub t: f64,
    pub x: f64,
    pub value: f64,
    pub continuation: Estimate,
    /// `E[...] − V`; nonnegative up to noise when the inequality holds.
    pub margin: f64,
    pub inequality_ok: bool,
    pub obstacle_ok: bool,
    pub equality_checked: bool,
    pub equality_ok: bool,
}

/// Outcome of [`check_dpp`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppReport {
    pub delta: f64,
    pub paths: usize,
    /// Band half-width in standard errors used for the inequality.
    pub z: f64,
    pub points: Vec<DppPoint>,
    pub pass: bool,
}

/// Continuation points whose δ-neighbourhood stays strictly outside the
/// intervention region, sampled deterministically.
pub fn sample_continuation_points(
    v: &ValueFunction,
    spec: &ProblemSpec,
    count: usize,
    delta: f64,
    seed: u64,
) -> Vec<(usize, f64, f64)> {
    let grid = &v.grid;
    let xs = grid.xs();
    let dx = grid.dx();
    let interior = grid.interior();
    let mut candidates = Vec::new();
    for (s, &tau) in grid.tau_values.iter().enumerate() {
        let ts = grid.ts(tau);
        let dt = ts[1] - ts[0];
        let steps = (delta / dt).round() as usize;
        if steps == 0 || steps >= ts.len() {
            continue;
        }
        let bmax = xs
            .iter()
            .map(|x| spec.drift.value(tau, *x).abs())
            .fold(0.0, f64::max);
        let smax = xs
            .iter()
            .map(|x| spec.diffusion.value(tau, *x).abs())
            .fold(0.0, f64::max);
        let reach = 6.0 * smax * (steps as f64 * dt).sqrt() + bmax * steps as f64 * dt;
        let band = (reach / dx).ceil() as usize + 1;
        for k in 0..ts.len() - 1 - steps {
            for i in interior.clone() {
                if i < band || i + band >= xs.len() {
                    continue;
                }
                let clear = (k..=k + steps).all(|kk| {
                    (i - band..=i + band).all(|ii| {
                        v.values[s][kk][ii]
                            < v.obstacle[s][kk][ii] - 1e-6 * (1.0 + v.values[s][kk][ii].abs())
                    })
                });
                if clear {
                    candidates.push((s, ts[k], xs[i]));
                }
            }
        }
    }
    let mut rng = path_rng(seed, u64::MAX);
    candidates.shuffle(&mut rng);
    candidates.truncate(count);
    candidates
}

/// Monte Carlo check of `V ≤ E[V(t+δ, X) + ∫g]` and of equality at strict
/// continuation points, under the τ-frozen flow without impulses.
pub fn check_dpp(
    spec: &ProblemSpec,
    v: &ValueFunction,
    points: &[(usize, f64, f64)],
    delta: f64,
    paths: usize,
    seed: u64,
) -> Result<DppReport> {
    let grid = &v.grid;
    let z = simultaneous_z(points.len());
    let substeps = 50usize;
    let h = delta / substeps as f64;
    let mut out = Vec::new();
    for (pi, &(s, t, x)) in points.iter().enumerate() {
        let tau = grid.tau_values[s];
        if t + delta > grid.horizon + 1e-12 {
            return Err(invalid("delta", "t + delta exceeds the horizon"));
        }
        let samples: Vec<f64> = (0..paths as u64)
            .into_par_iter()
            .map(|p| {
                let mut rng = path_rng(seed ^ (pi as u64).wrapping_mul(0x9E37_79B9), p);
                let dw = crate::stats::brownian_increments(&mut rng, &vec![h; substeps]);
                let mut y = x;
                let mut run = 0.0;
                for w in dw {
                    run += spec.running_cost.value(tau, y) * h;
                    y += spec.drift.value(tau, y) * h + spec.diffusion.value(tau, y) * w;
                }
                run + v.value_at(s, t + delta, y)
            })
            .collect();
        let est = Estimate::from_samples(&samples);
        let value = v.value_at(s, t, x);
        let obstacle = {
            let ts = grid.ts(tau);
            let k = ((t - ts[0]) / (ts[1] - ts[0])).round() as usize;
            grid.interp(&v.obstacle[s][k], x)
        };
        let tol = 1e-8 * (1.0 + value.abs());
        let strict = value < obstacle - 1e-6 * (1.0 + value.abs());
        let equality_ok = (value - est.mean).abs() <= 3.0 * est.stderr + tol;
        out.push(DppPoint {
            tau,
            t,
            x,
            value,
            continuation: est,
            margin: est.mean - value,
            inequality_ok: value <= est.mean + z * est.stderr + tol,
            obstacle_ok: value <= obstacle + tol,
            equality_checked: strict,
            equality_ok: !strict || equality_ok,
        });
    }
    let pass = out
        .iter()
        .all(|p| p.inequality_ok && p.obstacle_ok && p.equality_ok);
    Ok(DppReport {
        delta,
        paths,
        z,
        points: out,
        pass,
    })
}

/// Two-sided normal quantile of a simultaneous 95% band over `n` estimates
/// (Bonferroni); 1.96 for a single estimate.
pub fn simultaneous_z(n: usize) -> f64 {
    let alpha = 0.05 / n.max(1) as f64;
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

/// Outcome of [`check_regularity`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    pub min_value: f64,
    pub max_value: f64,
    /// `T·sup g + sup h` on the grid.
    pub upper_bound: f64,
    pub bounds_ok: bool,
    /// `max |ΔV| / Δt^{1/2}` along time.
    pub holder_t: f64,
    /// `max |ΔV| / Δx` along space.
    pub lipschitz_x: f64,
    /// Largest change of V between neighbouring τ slices at common (t, x).
    pub tau_variation: f64,
    /// Smallest allowed τ-variation, factor · (1 + T) · ω̂(Δτ), over slice pairs.
    pub tau_bound: f64,
    /// Interpolation allowance `holder_t·√Δt_max + lipschitz_x·Δx` added to the τ bound.
    pub tau_slack: f64,
    pub tau_ok: bool,
    pub pass: bool,
}

/// `T·sup g + sup h` over the grid nodes and τ slices.
pub fn trivial_bound(spec: &ProblemSpec, grid: &SolveGrid) -> f64 {
    let xs = grid.xs();
    let sup_g = grid
        .tau_values
        .iter()
        .flat_map(|tau| {
            xs.iter()
                .map(move |x| spec.running_cost.value(*tau, *x).abs())
        })
        .fold(0.0_f64, f64::max);
    let sup_h = xs
        .iter()
        .map(|x| spec.terminal(&[*x]).abs())
        .fold(0.0_f64, f64::max);
    grid.horizon * sup_g + sup_h
}

/// Bounds, time-Hölder and space-Lipschitz estimates and τ-variation.
pub fn check_regularity(
    v: &ValueFunction,
    spec: &ProblemSpec,
    report: &AssumptionReport,
    factor: f64,
) -> RegularityReport {
    let grid = &v.grid;
    let dx = grid.dx();
    let bound = trivial_bound(spec, grid);
    let mut min_value = f64::INFINITY;
    let mut max_value = f64::NEG_INFINITY;
    let mut holder_t = 0.0_f64;
    let mut lipschitz_x = 0.0_f64;
    for (s, &tau) in grid.tau_values.iter().enumerate() {
        let ts = grid.ts(tau);
        let dt = ts[1] - ts[0];
        for k in 0..ts.len() {
            let row = &v.values[s][k];
            for i in 0..row.len() {
                min_value = min_value.min(row[i]);
                max_value = max_value.max(row[i]);
                if i + 1 < row.len() {
                    lipschitz_x = lipschitz_x.max((row[i + 1] - row[i]).abs() / dx);
                }
                if k + 1 < ts.len() {
                    holder_t = holder_t.max((v.values[s][k + 1][i] - row[i]).abs() / dt.sqrt());
                }
            }
        }
    }
    let xs = grid.xs();
    let dt_max = grid
        .tau_values
        .iter()
        .map(|tau| {
            let ts = grid.ts(*tau);
            ts[1] - ts[0]
        })
        .fold(0.0_f64, f64::max);
    let tau_slack = holder_t * dt_max.sqrt() + lipschitz_x * dx;
    let mut tau_variation = 0.0_f64;
    let mut tau_bound = f64::INFINITY;
    let mut tau_ok = true;
    for s in 1..grid.tau_values.len() {
        let gap = grid.tau_values[s] - grid.tau_values[s - 1];
        let allowed = factor * (1.0 + grid.horizon) * report.modulus_at(gap);
        let ts = grid.ts(grid.tau_values[s]);
        let mut var = 0.0_f64;
        for &t in ts.iter().step_by(4) {
            for &x in xs.iter().step_by(4) {
                var = var.max((v.value_at(s, t, x) - v.value_at(s - 1, t, x)).abs());
            }
        }
        tau_variation = tau_variation.max(var);
        tau_bound = tau_bound.min(allowed);
        tau_ok &= var <= allowed + tau_slack;
    }
    let tol = 1e-9 * (1.0 + bound);
    let bounds_ok = min_value >= -tol && max_value <= bound + tol;
    RegularityReport {
        min_value,
        max_value,
        upper_bound: bound,
        bounds_ok,
        holder_t,
        lipschitz_x,
        tau_variation,
        tau_bound,
        tau_slack,
        tau_ok,
        pass: bounds_ok && tau_ok && holder_t.is_finite() && lipschitz_x.is_finite(),
    }
}

/// Smallest `K` with `λV(x)+(1−λ)V(x')−V(x_λ) ≤ Kλ(1−λ)|x−x'|²` over on-grid
/// triples in the interior band, λ ∈ {¼, ½, ¾}, for one x-profile.
pub fn semiconvexity_constant(profile: &[f64], dx: f64, range: std::ops::Range<usize>) -> f64 {
    let mut k = 0.0_f64;
    let lo = range.start;
    let hi = range.end;
    for i in lo..hi {
        for j in (i + 2..hi).step_by(2) {
            let d = j - i;
            let span2 = (d as f64 * dx).powi(2);
            let mid = (i + j) / 2;
            let q = 0.5 * profile[i] + 0.5 * profile[j] - profile[mid];
            k = k.max(q / (0.25 * span2));
            if d % 4 == 0 {
                let quarter = d / 4;
                for (lam, m) in [(0.25, j - quarter), (0.75, i + quarter)] {
                    let q = lam * profile[i] + (1.0 - lam) * profile[j] - profile[m];
                    k = k.max(q / (lam * (1.0 - lam) * span2));
                }
            }
        }
    }
    k
}

/// Outcome of [`check_semiconvexity`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemiconvexityReport {
    /// Smallest feasible constant over all slices and time levels.
    pub k_sc: f64,
    pub candidate: f64,
    pub feasible: bool,
}

/// Computes the smallest feasible constant and tests `candidate` against it.
pub fn check_semiconvexity(v: &ValueFunction, candidate: f64) -> SemiconvexityReport {
    let grid = &v.grid;
    let dx = grid.dx();
    let range = grid.interior();
    let k_sc = v
        .values
        .par_iter()
        .map(|slice| {
            slice
                .iter()
                .map(|row| semiconvexity_constant(row, dx, range.clone()))
                .fold(0.0_f64, f64::max)
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0_f64, f64::max);
    SemiconvexityReport {
        k_sc,
        candidate,
        feasible: k_sc <= candidate + 1e-12,
    }
}

/// One intervention node whose landing point is itself an intervention point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DoubleImpulse {
    pub tau: f64,
    pub t: f64,
    pub x: f64,
    pub landing: f64,
    pub gap: f64,
}

/// Outcome of [`check_no_double_impulse`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoDoubleImpulseReport {
    pub pass: bool,
    pub checked: usize,
    pub violations: Vec<DoubleImpulse>,
}

/// Verifies `V < N[V] − tol` at the landing point of every interior
/// intervention node.
pub fn check_no_double_impulse(
    policy: &PolicyMap,
    v: &ValueFunction,
    tol: f64,
) -> NoDoubleImpulseReport {
    let grid = &policy.grid;
    let xs = grid.xs();
    let interior = grid.interior();
    let scale = tol * v.sup_abs().max(1e-300);
    let mut violations = Vec::new();
    let mut checked = 0;
    for (s, &tau) in grid.tau_values.iter().enumerate() {
        let ts = grid.ts(tau);
        for (k, &t) in ts.iter().enumerate() {
            for i in interior.clone() {
                if !policy.intervene[s][k][i] {
                    continue;
                }
                checked += 1;
                let landing = xs[i] + policy.impulse_size[s][k][i];
                let vl = grid.interp(&v.values[s][k], landing);
                let nl = grid.interp(&v.obstacle[s][k], landing);
                if !(vl < nl - scale) {
                    violations.push(DoubleImpulse {
                        tau,
                        t,
                        x: xs[i],
                        landing,
                        gap: nl - vl,
                    });
                }
            }
        }
    }
    NoDoubleImpulseReport {
        pass: violations.is_empty(),
        checked,
        violations,
    }
}

/// Deterministic control from realized feedback impulses: the j-th impulse is
/// kept while at least `min_fraction` of paths have one; its time is the most
/// frequent node and its size the median size at that node.
pub fn extract_control(
    eval: &PolicyEvaluation,
    start_time: f64,
    min_fraction: f64,
) -> ImpulseControl {
    let paths = eval.events.len();
    let mut impulses = Vec::new();
    let mut j = 0;
    loop {
        let jth: Vec<_> = eval.events.iter().filter_map(|ev| ev.get(j)).collect();
        if jth.is_empty() || (jth.len() as f64) < min_fraction * paths as f64 {
            break;
        }
        let mut counts = std::collections::BTreeMap::new();
        for e in &jth {
            *counts.entry(e.node).or_insert(0usize) += 1;
        }
        let (&node, _) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .unwrap();
        let mut sizes: Vec<f64> = jth
            .iter()
            .filter(|e| e.node == node)
            .map(|e| e.size[0])
            .collect();
        sizes.sort_by(|a, b| a.total_cmp(b));
        let time = jth.iter().find(|e| e.node == node).unwrap().time;
        if impulses
            .last()
            .is_some_and(|prev: &Impulse| prev.time >= time)
        {
            break;
        }
        impulses.push(Impulse {
            time,
            size: vec![sizes[sizes.len() / 2]],
        });
        j += 1;
    }
    ImpulseControl {
        start_time,
        impulses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::presets::{heat_kernel, impulse_active};
    use crate::model::{validate_problem, CoefficientFamily};

    fn zero_cost_spec() -> ProblemSpec {
        let mut s = heat_kernel().spec;
        s.terminal_cost = CoefficientFamily::constant(0.0);
        s
    }

    fn small_grid(spec: &ProblemSpec) -> SolveGrid {
        let mut g = SolveGrid::new(spec, -std::f64::consts::PI, std::f64::consts::PI, 64, 64);
        g.per_ray = 41;
        g
    }

    #[test]
    fn operator_on_constant_profile_adds_fixed_cost() {
        let s = heat_kernel().spec;
        let g = small_grid(&s);
        let lat = lattice(&s, g.per_ray).unwrap();
        let (nv, arg) = intervention_operator(&vec![2.0; g.x_nodes], 0.3, &s, &g, &lat);
        assert!(nv.iter().all(|v| *v == 5.0));
        assert!(arg.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn operator_on_cosine_profile_exceeds_profile() {
        let s = heat_kernel().spec;
        let g = small_grid(&s);
        let lat = lattice(&s, g.per_ray).unwrap();
        let v: Vec<f64> = g.xs().iter().map(|x| 1.0 + x.cos()).collect();
        let (nv, _) = intervention_operator(&v, 0.0, &s, &g, &lat);
        assert!(nv.iter().zip(&v).all(|(n, v)| *n >= 3.0 && n > v));
    }

    #[test]
    fn cheap_impulses_on_decreasing_profile_move_the_state() {
        let mut s = heat_kernel().spec;
        s.impulse_cost = CoefficientFamily::affine(0.01, 0.01);
        s.ell0 = 0.01;
        let g = small_grid(&s);
        let lat = lattice(&s, g.per_ray).unwrap();
        let v: Vec<f64> = g.xs().iter().map(|x| 2.0 - x).collect();
        let (_, arg) = intervention_operator(&v, 0.0, &s, &g, &lat);
        assert!(arg.iter().any(|a| *a > 0.0));
    }

    #[test]
    fn zero_costs_give_zero_value_and_residual() {
        let s = zero_cost_spec();
        let g = small_grid(&s);
        let (v, p) = solve_qvi(&s, &g, &SolverConfig::default()).unwrap();
        assert!(v.values.iter().flatten().flatten().all(|x| *x == 0.0));
        assert_eq!(p.region_size(), 0);
        assert_eq!(qvi_residual(&v, &s).max_abs, 0.0);
        let rep = validate_problem(&s, 200, 1).unwrap();
        let r = check_regularity(&v, &s, &rep, 10.0);
        assert_eq!(
            (r.holder_t, r.lipschitz_x, r.tau_variation),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn heat_kernel_small_grid_tracks_closed_form() {
        let p = heat_kernel();
        let g = small_grid(&p.spec);
        let (v, pol) = solve_qvi(&p.spec, &g, &SolverConfig::default()).unwrap();
        let f = p.closed_form.unwrap();
        for (s, tau) in g.tau_values.iter().enumerate() {
            for (k, t) in g.ts(*tau).iter().enumerate() {
                for (i, x) in g.xs().iter().enumerate() {
                    assert!((v.values[s][k][i] - f(1.0, *t, *x)).abs() < 2e-2);
                }
            }
        }
        assert_eq!(pol.region_size(), 0);
        let rep = validate_problem(&p.spec, 200, 1).unwrap();
        let r = check_regularity(&v, &p.spec, &rep, 10.0);
        assert!(r.pass && r.tau_variation < 1e-3, "{r:?}");
    }

    #[test]
    fn terminal_slice_and_obstacle_consistency() {
        let p = impulse_active();
        let mut g = SolveGrid::new(&p.spec, p.x_min, p.x_max, 64, 64);
        g.per_ray = 51;
        let (v, _) = solve_qvi(&p.spec, &g, &SolverConfig::default()).unwrap();
        let lat = lattice(&p.spec, g.per_ray).unwrap();
        let h: Vec<f64> = g.xs().iter().map(|x| p.spec.terminal(&[*x])).collect();
        let (nh, _) = intervention_operator(&h, 1.0, &p.spec, &g, &lat);
        for s in 0..g.tau_values.len() {
            let last = v.values[s].last().unwrap();
            for i in 0..g.x_nodes {
                assert_eq!(last[i], h[i].min(nh[i]));
            }
            for k in 0..g.t_nodes {
                for i in 0..g.x_nodes {
                    assert!(v.values[s][k][i] <= v.obstacle[s][k][i] + 1e-8 * v.sup_abs());
                }
            }
        }
    }

    #[test]
    fn perturbed_node_inflates_residual() {
        let p = heat_kernel();
        let g = small_grid(&p.spec);
        let (mut v, _) = solve_qvi(&p.spec, &g, &SolverConfig::default()).unwrap();
        let base = qvi_residual(&v, &p.spec).max_abs;
        v.values[0][10][32] += 0.1;
        let dt = g.ts(g.tau_values[0])[1];
        assert!(qvi_residual(&v, &p.spec).max_abs - base >= 0.1 / dt - 1e-9);
    }

    #[test]
    fn semiconvexity_examples() {
        let dx = 0.05;
        let xs: Vec<f64> = (0..121).map(|i| -3.0 + dx * i as f64).collect();
        let concave: Vec<f64> = xs.iter().map(|x| -x * x).collect();
        assert_eq!(semiconvexity_constant(&concave, dx, 0..121), 0.0);
        let cosine: Vec<f64> = xs.iter().map(|x| 1.0 + x.cos()).collect();
        let k = semiconvexity_constant(&cosine, dx, 0..121);
        assert!(k <= 0.5 + 1e-12 && k > 0.49);
        let s = 0.4;
        let kink: Vec<f64> = xs.iter().map(|x| 0.5 * s * x.abs()).collect();
        let k = semiconvexity_constant(&kink, dx, 0..121);
        assert!((k - s / (2.0 * dx)).abs() < 1e-9 * k, "{k}");
    }

    #[test]
    fn hand_built_double_impulse_is_reported() {
        let p = impulse_active();
        let mut g = SolveGrid::new(&p.spec, p.x_min, p.x_max, 64, 64);
        g.per_ray = 51;
        let (v, pol) = solve_qvi(&p.spec, &g, &SolverConfig::default()).unwrap();
        let mut empty = pol.clone();
        empty
            .intervene
            .iter_mut()
            .flatten()
            .flatten()
            .for_each(|b| *b = false);
        assert!(check_no_double_impulse(&empty, &v, 1e-8).pass);
        let mut bad = pol.clone();
        let (s, k) = (0, 0);
        let i = (0..g.x_nodes)
            .find(|&i| pol.intervene[s][k][i] && g.interior().contains(&i))
            .unwrap();
        let j = (0..g.x_nodes)
            .rev()
            .find(|&j| pol.intervene[s][k][j] && j != i)
            .unwrap();
        bad.impulse_size[s][k][i] = g.xs()[j] - g.xs()[i];
        assert!(!check_no_double_impulse(&bad, &v, 1e-8).pass);
    }
}
