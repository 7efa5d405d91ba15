//! Spike perturbations of impulse size and moment, variational processes,
//! Taylor-expansion order checks, duality identities, the variational
//! inequality and the maximum-principle conditions MP1–MP5.
//!
//! Scalar state only (n = 1).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    compute_frozen, Bundle, FirstAdjoint, FrozenCoefficients, HamiltonianPath, SecondAdjoint,
};
use crate::error::{invalid, Error, Result};
use crate::model::{cone_contains, Impulse, ImpulseControl, ProblemSpec, Semantics};
use crate::simulate::{path_cost, simulate_state, NODE_TOL};
use crate::stats::{loglog_slope, Estimate};

/// Relative slack applied to every maximum-principle threshold.
pub const SCALE_TOL: f64 = 1e-3;
/// Default geometric ε grid of the expansion-order check.
pub const DEFAULT_EPS_GRID: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Direction of the moment shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Impulse `i` is delayed to `τ̄_i + ε̄`.
    Forward,
    /// Impulse `i` is advanced to `τ̄_i − ε̄`.
    Backward,
}

/// Spike perturbation of impulse `index` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Perturbation {
    pub index: usize,
    pub size_weight: f64,
    pub time_shift: f64,
    pub direction: Direction,
    pub target: f64,
}

impl Perturbation {
    pub fn forward(index: usize, eps: f64, eps_bar: f64, target: f64) -> Self {
        Perturbation {
            index,
            size_weight: eps,
            time_shift: eps_bar,
            direction: Direction::Forward,
            target,
        }
    }

    pub fn backward(index: usize, eps: f64, eps_bar: f64, target: f64) -> Self {
        Perturbation {
            direction: Direction::Backward,
            ..Perturbation::forward(index, eps, eps_bar, target)
        }
    }

    /// `+1` forward, `−1` backward.
    pub fn sign(&self) -> f64 {
        match self.direction {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }

    fn impulse<'a>(&self, control: &'a ImpulseControl) -> Result<&'a Impulse> {
        if self.index == 0 || self.index > control.count() {
            return Err(invalid(
                "index",
                format!(
                    "impulse index {} outside 1..={}",
                    self.index,
                    control.count()
                ),
            ));
        }
        Ok(&control.impulses[self.index - 1])
    }

    /// `ξ_i = η − ξ̄_i`.
    pub fn direction_size(&self, control: &ImpulseControl) -> Result<f64> {
        Ok(self.target - self.impulse(control)?.size[0])
    }

    /// Moment of the perturbed impulse.
    pub fn new_time(&self, control: &ImpulseControl) -> Result<f64> {
        Ok(self.impulse(control)?.time + self.sign() * self.time_shift)
    }

    /// Window on which the optimal and perturbed impulse sets differ.
    pub fn window(&self, control: &ImpulseControl) -> Result<(f64, f64)> {
        let tau = self.impulse(control)?.time;
        Ok(match self.direction {
            Direction::Forward => (tau, tau + self.time_shift),
            Direction::Backward => (tau - self.time_shift, tau),
        })
    }

    /// Grid nodes a bundle must contain for this perturbation.
    pub fn extra_nodes(&self, control: &ImpulseControl, horizon: f64) -> Result<Vec<f64>> {
        let tau = self.impulse(control)?.time;
        let (a, b) = self.window(control)?;
        Ok([a, b, (tau + self.time_shift).min(horizon)]
            .into_iter()
            .filter(|t| *t >= control.start_time - NODE_TOL && *t <= horizon + NODE_TOL)
            .collect())
    }

    fn check(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.size_weight) {
            return Err(invalid("size_weight", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.time_shift) {
            return Err(invalid("time_shift", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// The `index`-th perturbation of `optimal`; ordering violations are errors.
pub fn perturb_control(
    spec: &ProblemSpec,
    optimal: &ImpulseControl,
    p: &Perturbation,
) -> Result<ImpulseControl> {
    p.check()?;
    let imp = p.impulse(optimal)?;
    let i = p.index - 1;
    let new_time = p.new_time(optimal)?;
    let ordering = |msg: String| Err(Error::Ordering(msg));
    match p.direction {
        Direction::Forward => {
            let next = optimal.impulses.get(i + 1).map_or(spec.horizon, |n| n.time);
            let bound_ok = if i + 1 < optimal.count() {
                new_time < next
            } else {
                new_time < spec.horizon || p.time_shift == 0.0 && new_time <= spec.horizon
            };
            if !bound_ok {
                return ordering(format!(
                    "forward shift moves impulse {} to {new_time}, not before {next}",
                    p.index
                ));
            }
        }
        Direction::Backward => {
            let prev = if i == 0 {
                optimal.start_time
            } else {
                optimal.impulses[i - 1].time
            };
            let bound_ok = new_time > prev || p.time_shift == 0.0 && i == 0 && new_time >= prev;
            if !bound_ok {
                return ordering(format!(
                    "backward shift moves impulse {} to {new_time}, not after {prev}",
                    p.index
                ));
            }
        }
    }
    let size = (1.0 - p.size_weight) * imp.size[0] + p.size_weight * p.target;
    if !cone_contains(&spec.cone, &[p.target])? || !cone_contains(&spec.cone, &[size])? {
        return Err(Error::ConeViolation { index: p.index });
    }
    let mut out = optimal.clone();
    out.impulses[i] = Impulse {
        time: new_time,
        size: vec![size],
    };
    Ok(out)
}

/// Variational processes of one perturbation; per-node fields are
/// path-major (`p * nodes + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalProcesses {
    pub perturbation: Perturbation,
    pub control: ImpulseControl,
    pub paths: usize,
    pub nodes: usize,
    /// Node range `[start, end)` of the perturbation window.
    pub window: (usize, usize),
    /// Node of the perturbed impulse.
    pub new_node: usize,
    pub x: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x1_hat: Vec<f64>,
    pub x2_hat: Vec<f64>,
    pub phi: Vec<f64>,
    pub b1: Vec<f64>,
    pub s1: Vec<f64>,
    pub b2: Vec<f64>,
    pub s2: Vec<f64>,
    /// Pathwise cost difference `J(perturbed) − J(optimal)`.
    pub cost_diff: Vec<f64>,
    /// Pathwise second-order cost expansion along `X₁ + X₂`.
    pub expansion: Vec<f64>,
}

impl VariationalProcesses {
    fn in_window(&self, k: usize) -> bool {
        (self.window.0..self.window.1).contains(&k)
    }

    /// Re-derives `X₁` and `X₂` from the continuous processes and compares
    /// bitwise.
    pub fn reconstruction_holds(&self, bundle_zeta: Option<&[f64]>, xi_bar: f64) -> bool {
        let sg = self.perturbation.sign();
        let eb = self.perturbation.time_shift;
        let eps_xi = self.perturbation.size_weight * (self.perturbation.target - xi_bar);
        (0..self.paths).all(|p| {
            (0..self.nodes).all(|k| {
                let i = p * self.nodes + k;
                let w = if self.in_window(k) { 1.0 } else { 0.0 };
                let after = if k >= self.new_node { 1.0 } else { 0.0 };
                let z = bundle_zeta.map_or(0.0, |z| z[i]);
                self.x1[i] == self.x1_hat[i] - sg * xi_bar * w
                    && self.x2[i] == self.x2_hat[i] + sg * eb * z + eps_xi * after
            })
        })
    }
}

fn node_of(bundle: &Bundle, t: f64, what: &str) -> Result<usize> {
    bundle.grid.index_of(t).ok_or_else(|| {
        Error::Mismatch(format!(
            "{what} {t} is not a bundle node; build the bundle with the perturbation's extra nodes"
        ))
    })
}

/// Integrates `X₁, X₂, X̂₁, X̂₂` and the perturbed state on the bundle noise.
pub fn simulate_variational(
    spec: &ProblemSpec,
    bundle: &Bundle,
    frozen: &FrozenCoefficients,
    p: &Perturbation,
) -> Result<VariationalProcesses> {
    if frozen.paths != bundle.paths() || frozen.nodes != bundle.len() {
        return Err(Error::Mismatch(
            "frozen coefficients do not match the bundle".into(),
        ));
    }
    let control = perturb_control(spec, &bundle.control, p)?;
    let imp = &bundle.control.impulses[p.index - 1];
    let xi_bar = imp.size[0];
    let xi = p.direction_size(&bundle.control)?;
    let (a, b) = p.window(&bundle.control)?;
    let window = (
        node_of(bundle, a, "window start")?,
        node_of(bundle, b, "window end")?,
    );
    let new_node = node_of(
        bundle,
        control.impulses[p.index - 1].time,
        "perturbed moment",
    )?;
    let len = bundle.len();
    let dts = bundle.grid.dts();
    let sg = p.sign();
    let eb = p.time_shift;
    let eps_xi = p.size_weight * xi;
    let stacking = spec.semantics == Semantics::Stacking;
    let copy = &frozen.copies[p.index - 1];
    let zeta = &copy.zeta;
    let new_size = control.impulses[p.index - 1].size.clone();
    let d_ell = spec.impulse(control.impulses[p.index - 1].time, &new_size)
        - spec.impulse(imp.time, &imp.size);
    let tau_from = new_node.max(copy.node);
    let rows: Vec<[Vec<f64>; 12]> = (0..bundle.paths())
        .into_par_iter()
        .map(|path| -> Result<[Vec<f64>; 12]> {
            let traj = simulate_state(
                spec,
                &control,
                &bundle.x0,
                &bundle.grid,
                &bundle.noise[path],
            )?;
            let base = path_cost(spec, &bundle.control, &bundle.grid, &bundle.states[path])?;
            let pert = path_cost(spec, &control, &bundle.grid, &traj)?;
            let mut r: [Vec<f64>; 12] = Default::default();
            for v in r.iter_mut().take(11) {
                v.resize(len, 0.0);
            }
            let (mut h1, mut h2) = (0.0, 0.0);
            let mut exp = d_ell;
            for k in 0..len {
                let i = path * len + k;
                let in_w = (window.0..window.1).contains(&k);
                let w = if in_w { 1.0 } else { 0.0 };
                let after = if k >= new_node { 1.0 } else { 0.0 };
                let x1 = h1 - sg * xi_bar * w;
                let x2 = h2 + sg * eb * zeta[i] + eps_xi * after;
                let xbar = bundle.x(path, k);
                let copy_w = stacking && in_w;
                let (bi, si, bix, six) = if copy_w {
                    (
                        spec.drift.value(imp.time, xbar),
                        spec.diffusion.value(imp.time, xbar),
                        spec.drift.d_x(imp.time, xbar),
                        spec.diffusion.d_x(imp.time, xbar),
                    )
                } else {
                    (0.0, 0.0, 0.0, 0.0)
                };
                let (bx, sx) = (frozen.b_x[i], frozen.sigma_x[i]);
                let b1 = bx * (x1 - h1);
                let s1 = sx * (x1 - h1) - sg * si * w;
                let b2 = bx * (x2 - h2) + frozen.b_xx[i] * x1 * x1 - sg * (bi + bix * x1) * w;
                let s2 = sx * (x2 - h2) + frozen.sigma_xx[i] * x1 * x1 - sg * six * x1 * w;
                r[0][k] = traj.post[k];
                r[1][k] = x1;
                r[2][k] = x2;
                r[3][k] = h1;
                r[4][k] = h2;
                r[5][k] = h1 * h1;
                if k + 1 == len {
                    exp += frozen.h_x[path] * (x1 + x2) + frozen.h_xx[path] * (x1 + x2).powi(2);
                } else {
                    let dt = dts[k];
                    if in_w {
                        let x = xbar + x1 + x2;
                        let taus = bundle.active(spec, k);
                        let stacked = |x: f64| -> f64 {
                            taus.iter().map(|t| spec.running_cost.value(*t, x)).sum()
                        };
                        exp += (stacked(x) - stacked(xbar)) * dt;
                        if copy_w {
                            exp -= sg * spec.running_cost.value(imp.time, x) * dt;
                        }
                    } else {
                        exp +=
                            (frozen.g_x[i] * (x1 + x2) + frozen.g_xx[i] * (x1 + x2).powi(2)) * dt;
                    }
                    if k >= tau_from {
                        exp += sg * eb * copy.g_tau[i] * dt;
                    }
                    r[6][k] = b1;
                    r[7][k] = s1;
                    r[8][k] = b2;
                    r[9][k] = s2;
                    let dw = bundle.dw(path, k);
                    let n1 = h1 + (bx * h1 + b1) * dt + (sx * h1 + s1) * dw;
                    let n2 = h2 + (bx * h2 + b2) * dt + (sx * h2 + s2) * dw;
                    if !n1.is_finite() || !n2.is_finite() {
                        return Err(Error::Divergence { node: k, path });
                    }
                    h1 = n1;
                    h2 = n2;
                }
            }
            r[11] = vec![pert.total() - base.total(), exp];
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fields: [Vec<f64>; 11] = Default::default();
    for f in fields.iter_mut() {
        f.reserve(bundle.paths() * len);
    }
    let mut cost_diff = Vec::with_capacity(bundle.paths());
    let mut expansion = Vec::with_capacity(bundle.paths());
    for r in rows {
        let [x, x1, x2, h1, h2, phi, b1, s1, b2, s2, _, cd] = r;
        for (f, v) in fields
            .iter_mut()
            .zip([x, x1, x2, h1, h2, phi, b1, s1, b2, s2])
        {
            f.extend(v);
        }
        cost_diff.push(cd[0]);
        expansion.push(cd[1]);
    }
    let [x, x1, x2, x1_hat, x2_hat, phi, b1, s1, b2, s2, _] = fields;
    Ok(VariationalProcesses {
        perturbation: p.clone(),
        control,
        paths: bundle.paths(),
        nodes: len,
        window,
        new_node,
        x,
        x1,
        x2,
        x1_hat,
        x2_hat,
        phi,
        b1,
        s1,
        b2,
        s2,
        cost_diff,
        expansion,
    })
}

/// One side-by-side comparison of two Monte Carlo estimates on common paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub gap: f64,
    /// `sqrt(se_lhs² + se_rhs²)`.
    pub combined_stderr: f64,
    /// Standard error of the pathwise difference.
    pub paired_stderr: f64,
    /// Closed-form right-hand side, when one is defined.
    pub closed_form: Option<Estimate>,
    pub pass: bool,
}

impl DualityReport {
    fn new(lhs: &[f64], rhs: &[f64], closed_form: Option<&[f64]>) -> Self {
        let l = Estimate::from_samples(lhs);
        let r = Estimate::from_samples(rhs);
        let diff: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let d = Estimate::from_samples(&diff);
        let combined = l.stderr.hypot(r.stderr);
        let gap = l.mean - r.mean;
        DualityReport {
            lhs: l,
            rhs: r,
            gap,
            combined_stderr: combined,
            paired_stderr: d.stderr,
            closed_form: closed_form.map(Estimate::from_samples),
            pass: gap.abs() <= 3.0 * combined,
        }
    }
}

fn check_var(frozen: &FrozenCoefficients, var: &VariationalProcesses) -> Result<()> {
    if frozen.paths != var.paths || frozen.nodes != var.nodes {
        return Err(Error::Mismatch(
            "variational processes and frozen coefficients differ in size".into(),
        ));
    }
    Ok(())
}

/// `E[H_x(X̂₁+X̂₂)(T) + ∫G_x(X̂₁+X̂₂)]` against `E∫⟨Y, b̂₁+b̂₂⟩ + ⟨Z, σ̂₁+σ̂₂⟩`.
pub fn duality_first(
    frozen: &FrozenCoefficients,
    first: &FirstAdjoint,
    var: &VariationalProcesses,
    dts: &[f64],
) -> Result<DualityReport> {
    check_var(frozen, var)?;
    let len = var.nodes;
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = (0..var.paths)
        .map(|p| {
            let last = p * len + len - 1;
            let mut l = frozen.h_x[p] * (var.x1_hat[last] + var.x2_hat[last]);
            let mut r = 0.0;
            for (k, dt) in dts.iter().enumerate() {
                let i = p * len + k;
                l += frozen.g_x[i] * (var.x1_hat[i] + var.x2_hat[i]) * dt;
                r += (first.y[i] * (var.b1[i] + var.b2[i]) + first.z[i] * (var.s1[i] + var.s2[i]))
                    * dt;
            }
            (l, r)
        })
        .unzip();
    Ok(DualityReport::new(&lhs, &rhs, None))
}

fn copy_diffusion(spec: &ProblemSpec, tau: f64, x: f64) -> f64 {
    if spec.semantics == Semantics::Stacking {
        spec.diffusion.value(tau, x)
    } else {
        0.0
    }
}

/// `E[X̂₁(T)H_xxX̂₁(T) + ∫X̂₁𝐇_xxX̂₁]` against the Itô expansion of `P·X̂₁²`
/// on the Euler grid (including the `P·(drift·Δt)²` increment term);
/// the window quadratic form of the closed-form statement is reported as well.
pub fn duality_second(
    spec: &ProblemSpec,
    bundle: &Bundle,
    frozen: &FrozenCoefficients,
    second: &SecondAdjoint,
    ham: &HamiltonianPath,
    var: &VariationalProcesses,
) -> Result<DualityReport> {
    check_var(frozen, var)?;
    let len = var.nodes;
    let dts = bundle.grid.dts();
    let imp = &bundle.control.impulses[var.perturbation.index - 1];
    let xi_bar = imp.size[0];
    let mut lhs = Vec::with_capacity(var.paths);
    let mut rhs = Vec::with_capacity(var.paths);
    let mut closed = Vec::with_capacity(var.paths);
    for p in 0..var.paths {
        let last = p * len + len - 1;
        let mut l = frozen.h_xx[p] * var.phi[last];
        let (mut r, mut c) = (0.0, 0.0);
        for (k, dt) in dts.iter().enumerate() {
            let i = p * len + k;
            let (x, pk, qk, sx) = (var.x1_hat[i], second.p[i], second.q[i], frozen.sigma_x[i]);
            l += ham.h_xx[i] * var.phi[i] * dt;
            let drift = frozen.b_x[i] * x + var.b1[i];
            r += (2.0 * x * pk * var.b1[i]
                + 2.0 * x * sx * pk * var.s1[i]
                + var.s1[i] * pk * var.s1[i]
                + 2.0 * x * qk * var.s1[i]
                + pk * drift * drift * dt)
                * dt;
            if var.in_window(k) {
                let s = copy_diffusion(spec, imp.time, bundle.x(p, k));
                let bx = frozen.b_x[i];
                c += (xi_bar * xi_bar * (2.0 * pk * bx - sx * pk * sx - 2.0 * qk * sx)
                    + s * pk * s
                    + 2.0 * xi_bar * qk * sx * s)
                    * dt;
            }
        }
        lhs.push(l);
        rhs.push(r);
        closed.push(c);
    }
    Ok(DualityReport::new(&lhs, &rhs, Some(&closed)))
}

/// Formula and direct estimates of `J(perturbed) − J(optimal)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationReport {
    pub perturbation: Perturbation,
    /// Closed-form right-hand side of the variational inequality.
    pub formula: Estimate,
    /// Second-order cost expansion along the variational processes.
    pub expansion: Estimate,
    /// Common-noise difference `J(perturbed) − J(optimal)`.
    pub direct: Estimate,
    /// Standard error of the pathwise formula − direct difference.
    pub paired_stderr: f64,
    /// Standard error of the pathwise expansion − direct difference.
    pub expansion_paired_stderr: f64,
    pub direct_nonnegative: bool,
}

/// Pathwise integrands shared by the variational inequality and MP3–MP5.
fn stationarity_values(
    frozen: &FrozenCoefficients,
    ham: &HamiltonianPath,
    index: usize,
    dts: &[f64],
) -> Vec<f64> {
    let c = &frozen.copies[index - 1];
    let len = frozen.nodes;
    (0..frozen.paths)
        .map(|p| {
            let mut v = c.ell_tau + frozen.h_x[p] * c.zeta[p * len + len - 1];
            for (k, dt) in dts.iter().enumerate() {
                let i = p * len + k;
                v += (ham.h_x[i] * c.zeta[i] + c.g_tau[i]) * dt;
            }
            v
        })
        .collect()
}

fn size_values(frozen: &FrozenCoefficients, index: usize, dts: &[f64]) -> Vec<f64> {
    let c = &frozen.copies[index - 1];
    let len = frozen.nodes;
    (0..frozen.paths)
        .map(|p| {
            let mut v = frozen.h_x[p] + c.ell_xi;
            for (k, dt) in dts.iter().enumerate().skip(c.node) {
                v += frozen.g_x[p * len + k] * dt;
            }
            v
        })
        .collect()
}

/// Pathwise MP1 integrand at node `k` of path `p`.
#[allow(clippy::too_many_arguments)]
fn mp1_integrand(
    spec: &ProblemSpec,
    bundle: &Bundle,
    frozen: &FrozenCoefficients,
    second: &SecondAdjoint,
    ham: &HamiltonianPath,
    tau: f64,
    xi_bar: f64,
    p: usize,
    k: usize,
) -> f64 {
    let i = p * frozen.nodes + k;
    let (pk, qk, bx, sx) = (second.p[i], second.q[i], frozen.b_x[i], frozen.sigma_x[i]);
    let s = copy_diffusion(spec, tau, bundle.x(p, k));
    xi_bar * xi_bar * (2.0 * pk * bx - sx * pk * sx - 2.0 * qk * sx)
        + 2.0 * xi_bar * qk * sx * s
        + s * pk * s
        - ham.h_x[i] * xi_bar
        - ham.h[i]
}

/// Right-hand side of the variational inequality (forward or backward form)
/// and the direct common-noise cost difference.
#[allow(clippy::too_many_arguments)]
pub fn variational_inequality(
    spec: &ProblemSpec,
    bundle: &Bundle,
    frozen: &FrozenCoefficients,
    second: &SecondAdjoint,
    ham: &HamiltonianPath,
    var: &VariationalProcesses,
) -> Result<VariationReport> {
    check_var(frozen, var)?;
    let p = &var.perturbation;
    let imp = &bundle.control.impulses[p.index - 1];
    let xi_bar = imp.size[0];
    let xi = p.direction_size(&bundle.control)?;
    let dts = bundle.grid.dts();
    let w_start = node_of(bundle, imp.time, "impulse moment")?;
    let w_end = if p.time_shift == 0.0 {
        w_start
    } else {
        node_of(
            bundle,
            (imp.time + p.time_shift).min(spec.horizon),
            "window end",
        )?
    };
    let stat = stationarity_values(frozen, ham, p.index, &dts);
    let size = size_values(frozen, p.index, &dts);
    let formula: Vec<f64> = (0..var.paths)
        .map(|path| {
            let mut v = p.sign() * p.time_shift * stat[path] + p.size_weight * size[path] * xi;
            for (k, dt) in dts.iter().enumerate().take(w_end).skip(w_start) {
                v += mp1_integrand(spec, bundle, frozen, second, ham, imp.time, xi_bar, path, k)
                    * dt;
            }
            v
        })
        .collect();
    let f = Estimate::from_samples(&formula);
    let d = Estimate::from_samples(&var.cost_diff);
    let paired = |v: &[f64]| {
        let diff: Vec<f64> = v.iter().zip(&var.cost_diff).map(|(a, b)| a - b).collect();
        Estimate::from_samples(&diff).stderr
    };
    Ok(VariationReport {
        perturbation: p.clone(),
        direct_nonnegative: d.mean >= -3.0 * d.stderr,
        formula: f,
        expansion: Estimate::from_samples(&var.expansion),
        direct: d,
        paired_stderr: paired(&formula),
        expansion_paired_stderr: paired(&var.expansion),
    })
}

/// Which stationarity condition applies to an impulse index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpCase {
    /// Interior moment: two-sided MP3.
    Interior,
    /// First impulse at the initial time: one-sided MP4 (≥ 0).
    Initial,
    /// Last impulse at the horizon: one-sided MP5 (≤ 0).
    Terminal,
}

/// Boundary-case designation for impulse `index` (1-based).
pub fn mp_case(control: &ImpulseControl, horizon: f64, index: usize) -> MpCase {
    let imp = &control.impulses[index - 1];
    if index == 1 && (imp.time - control.start_time).abs() <= NODE_TOL {
        MpCase::Initial
    } else if index == control.count() && (imp.time - horizon).abs() <= NODE_TOL {
        MpCase::Terminal
    } else {
        MpCase::Interior
    }
}

/// A scalar condition value with its Monte Carlo error and verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionValue {
    pub value: Estimate,
    /// Magnitude used for the relative slack.
    pub scale: f64,
    pub pass: bool,
}

/// MP2 pairing at one target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairingValue {
    pub target: f64,
    pub pairing: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// Conditions for one impulse index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpIndexReport {
    pub index: usize,
    pub time: f64,
    pub size: f64,
    pub case: MpCase,
    pub mp1: Option<ConditionValue>,
    /// `H_x + ℓ_ξ + ∫_{τ̄_i}^T G_x`.
    pub mp2_coefficient: Estimate,
    pub mp2: Vec<PairingValue>,
    pub mp2_min: f64,
    pub mp2_pass: bool,
    /// `Y(τ̄_i) + ℓ_ξ`, the first-order size derivative through the adjoint.
    pub mp2_adjoint_coefficient: Estimate,
    /// `H_xΓ(T) + ∫G_xΓ + ℓ_ξ` with the tangent process `Γ(τ̄_i) = 1`; the
    /// pathwise counterpart of the adjoint form.
    pub mp2_tangent_coefficient: Estimate,
    pub mp2_tangent_min: f64,
    pub mp2_tangent_pass: bool,
    pub stationarity: Option<ConditionValue>,
}

/// Maximum-principle conditions for every impulse of the optimal control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpReport {
    pub indices: Vec<MpIndexReport>,
    pub size_only: bool,
    pub pass: bool,
}

fn pairing(coef: &Estimate, d: f64, target: f64, scale: f64) -> PairingValue {
    let pairing = coef.mean * d;
    let stderr = coef.stderr * d.abs();
    PairingValue {
        target,
        pairing,
        stderr,
        pass: pairing >= -3.0 * stderr - SCALE_TOL * scale * d.abs(),
    }
}

fn one_sided(value: Estimate, scale: f64, lower: bool) -> ConditionValue {
    let slack = 3.0 * value.stderr + SCALE_TOL * scale;
    let pass = if lower {
        value.mean >= -slack
    } else {
        value.mean <= slack
    };
    ConditionValue { value, scale, pass }
}

/// Evaluates MP1–MP5 for each impulse. With `window_shift = None` only MP2
/// is evaluated (size-only perturbations); otherwise the MP1 Hamiltonian
/// term is averaged over `[τ̄_i, τ̄_i + ε̄)`.
#[allow(clippy::too_many_arguments)]
pub fn check_mp_conditions(
    spec: &ProblemSpec,
    bundle: &Bundle,
    frozen: &FrozenCoefficients,
    first: &FirstAdjoint,
    second: &SecondAdjoint,
    ham: &HamiltonianPath,
    eta_grid: &[f64],
    window_shift: Option<f64>,
) -> Result<MpReport> {
    let len = bundle.len();
    for (name, n, k) in [
        ("frozen coefficients", frozen.paths, frozen.nodes),
        ("first adjoint", first.paths, first.nodes),
        ("second adjoint", second.paths, second.nodes),
        ("hamiltonian", ham.h.len() / ham.nodes.max(1), ham.nodes),
    ] {
        if n != bundle.paths() || k != len {
            return Err(Error::Mismatch(format!("{name} does not match the bundle")));
        }
    }
    for eta in eta_grid {
        if !cone_contains(&spec.cone, &[*eta])? {
            return Err(Error::ConeViolation { index: 0 });
        }
    }
    let dts = bundle.grid.dts();
    let mut indices = Vec::new();
    for (j, imp) in bundle.control.impulses.iter().enumerate() {
        let index = j + 1;
        let node = bundle.impulse_nodes[j];
        let xi_bar = imp.size[0];
        let case = mp_case(&bundle.control, spec.horizon, index);
        let c = &frozen.copies[j];
        let mp1 = match window_shift {
            None => None,
            Some(eb) => {
                let end = bundle
                    .grid
                    .index_of((imp.time + eb).min(spec.horizon))
                    .unwrap_or(node)
                    .max(node);
                let vals: Vec<f64> = (0..bundle.paths())
                    .map(|p| {
                        if end == node {
                            return mp1_integrand(
                                spec, bundle, frozen, second, ham, imp.time, xi_bar, p, node,
                            );
                        }
                        let i = p * len + node;
                        let (pk, qk, bx, sx) =
                            (second.p[i], second.q[i], frozen.b_x[i], frozen.sigma_x[i]);
                        let s = copy_diffusion(spec, imp.time, bundle.x(p, node));
                        let quad = xi_bar * xi_bar * (2.0 * pk * bx - sx * pk * sx - 2.0 * qk * sx)
                            + 2.0 * xi_bar * qk * sx * s
                            + s * pk * s;
                        let width: f64 = dts[node..end].iter().sum();
                        let avg: f64 = (node..end)
                            .map(|k| {
                                let i = p * len + k;
                                (ham.h_x[i] * xi_bar + ham.h[i]) * dts[k]
                            })
                            .sum::<f64>()
                            / width;
                        quad - avg
                    })
                    .collect();
                let est = Estimate::from_samples(&vals);
                let scale = vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64;
                Some(one_sided(est, scale, true))
            }
        };
        let size = size_values(frozen, index, &dts);
        let coef = Estimate::from_samples(&size);
        let coef_scale = frozen.h_x.iter().map(|v| v.abs()).sum::<f64>() / frozen.paths as f64
            + c.ell_xi.abs()
            + (size.iter().map(|v| v.abs()).sum::<f64>() / size.len() as f64);
        let mp2: Vec<PairingValue> = eta_grid
            .iter()
            .map(|eta| pairing(&coef, *eta - xi_bar, *eta, coef_scale))
            .collect();
        let mp2_min = mp2.iter().map(|v| v.pairing).fold(f64::INFINITY, f64::min);
        let mp2_pass = mp2.iter().all(|v| v.pass);
        let tangent: Vec<f64> = (0..bundle.paths())
            .map(|p| {
                let mut g = 1.0;
                let mut v = c.ell_xi;
                for (k, dt) in dts.iter().enumerate().skip(node) {
                    let i = p * len + k;
                    v += frozen.g_x[i] * g * dt;
                    g *= 1.0 + frozen.b_x[i] * dt + frozen.sigma_x[i] * bundle.dw(p, k);
                }
                v + frozen.h_x[p] * g
            })
            .collect();
        let tan = Estimate::from_samples(&tangent);
        let tan_pairs: Vec<PairingValue> = eta_grid
            .iter()
            .map(|eta| pairing(&tan, *eta - xi_bar, *eta, coef_scale))
            .collect();
        let adj: Vec<f64> = (0..bundle.paths())
            .map(|p| first.y[p * len + node] + c.ell_xi)
            .collect();
        let stationarity = window_shift.map(|_| {
            let vals = stationarity_values(frozen, ham, index, &dts);
            let est = Estimate::from_samples(&vals);
            let scale = vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64;
            match case {
                MpCase::Interior => {
                    let slack = 3.0 * est.stderr + SCALE_TOL * scale;
                    ConditionValue {
                        pass: est.mean.abs() <= slack,
                        value: est,
                        scale,
                    }
                }
                MpCase::Initial => one_sided(est, scale, true),
                MpCase::Terminal => one_sided(est, scale, false),
            }
        });
        indices.push(MpIndexReport {
            index,
            time: imp.time,
            size: xi_bar,
            case,
            mp1,
            mp2_coefficient: coef,
            mp2,
            mp2_min,
            mp2_pass,
            mp2_adjoint_coefficient: Estimate::from_samples(&adj),
            mp2_tangent_coefficient: tan,
            mp2_tangent_min: tan_pairs
                .iter()
                .map(|v| v.pairing)
                .fold(f64::INFINITY, f64::min),
            mp2_tangent_pass: tan_pairs.iter().all(|v| v.pass),
            stationarity,
        });
    }
    let pass = indices.iter().all(|r| {
        r.mp2_pass
            && r.mp1.as_ref().is_none_or(|c| c.pass)
            && r.stationarity.as_ref().is_none_or(|c| c.pass)
    });
    Ok(MpReport {
        indices,
        size_only: window_shift.is_none(),
        pass,
    })
}

/// One claim of the expansion-order check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderClaim {
    pub name: String,
    /// Abscissa used for the fit (`ε̄` or `ε`).
    pub abscissa: Vec<f64>,
    pub estimates: Vec<Estimate>,
    pub slope: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Slopes of the three Taylor-expansion claims over an ε grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub power: u32,
    pub eps: Vec<f64>,
    pub eps_bar: Vec<f64>,
    pub claims: Vec<OrderClaim>,
    pub pass: bool,
}

/// Settings of an expansion-order run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderConfig {
    pub index: usize,
    pub direction: Direction,
    pub target: f64,
    pub eps_grid: Vec<f64>,
    /// `ε̄ = coupling · ε`.
    pub coupling: f64,
    /// Moment order `m` of `E∫|·|^{2m}`.
    pub m: u32,
    pub paths: usize,
    pub base_steps: usize,
    pub seed: u64,
}

/// Fits log-log slopes of `E∫|X₁|^{2m}` against `ε̄` and of the first- and
/// second-order remainders against `ε`, on common noise across the grid.
pub fn check_expansion_orders(
    spec: &ProblemSpec,
    control: &ImpulseControl,
    x0: f64,
    cfg: &OrderConfig,
) -> Result<OrderReport> {
    if cfg.eps_grid.len() < 4 {
        return Err(invalid("eps_grid", "needs at least 4 values"));
    }
    if !(cfg.m == 1 || cfg.m == 2) {
        return Err(invalid("m", "must be 1 or 2"));
    }
    let perts: Vec<Perturbation> = cfg
        .eps_grid
        .iter()
        .map(|e| Perturbation {
            index: cfg.index,
            size_weight: *e,
            time_shift: cfg.coupling * e,
            direction: cfg.direction,
            target: cfg.target,
        })
        .collect();
    let mut extra = Vec::new();
    for p in &perts {
        extra.extend(p.extra_nodes(control, spec.horizon)?);
    }
    let bundle = Bundle::build(
        spec,
        control,
        &[x0],
        cfg.paths,
        cfg.base_steps,
        cfg.seed,
        &extra,
    )?;
    let frozen = compute_frozen(spec, &bundle)?;
    let dts = bundle.grid.dts();
    let len = bundle.len();
    let pow = 2 * cfg.m as i32;
    let mut series: [Vec<Estimate>; 3] = Default::default();
    for p in &perts {
        let var = simulate_variational(spec, &bundle, &frozen, p)?;
        let mut vals: [Vec<f64>; 3] = Default::default();
        for path in 0..var.paths {
            let mut acc = [0.0; 3];
            for (k, dt) in dts.iter().enumerate() {
                let i = path * len + k;
                let delta = var.x[i] - bundle.x(path, k);
                acc[0] += var.x1[i].abs().powi(pow) * dt;
                acc[1] += (delta - var.x1[i]).abs().powi(pow) * dt;
                acc[2] += (delta - var.x1[i] - var.x2[i]).abs().powi(pow) * dt;
            }
            for (v, a) in vals.iter_mut().zip(acc) {
                v.push(a);
            }
        }
        for (s, v) in series.iter_mut().zip(&vals) {
            s.push(Estimate::from_samples(v));
        }
    }
    let eps = cfg.eps_grid.clone();
    let eps_bar: Vec<f64> = eps.iter().map(|e| cfg.coupling * e).collect();
    let m = cfg.m as f64;
    let specs = [
        ("x1_vs_eps_bar", &eps_bar, 0.8),
        ("first_remainder", &eps, 2.0 * m - 0.2),
        ("second_remainder", &eps, 2.0 * m + 0.2),
    ];
    let mut claims = Vec::new();
    for ((name, xs, threshold), est) in specs.into_iter().zip(series) {
        for w in est.windows(2) {
            let (big, small) = (&w[0], &w[1]);
            let noise = 3.0 * big.stderr.hypot(small.stderr);
            if small.mean > big.mean + noise || !(small.mean > 0.0) {
                return Err(Error::OrderInconclusive(format!(
                    "{name}: estimates {:?} are not decreasing along eps {:?}",
                    est.iter().map(|e| e.mean).collect::<Vec<_>>(),
                    xs
                )));
            }
        }
        let means: Vec<f64> = est.iter().map(|e| e.mean).collect();
        let slope = loglog_slope(xs, &means);
        claims.push(OrderClaim {
            name: name.to_string(),
            abscissa: xs.clone(),
            estimates: est,
            slope,
            threshold,
            pass: slope >= threshold,
        });
    }
    Ok(OrderReport {
        power: cfg.m,
        pass: claims.iter().all(|c| c.pass),
        eps,
        eps_bar,
        claims,
    })
}
