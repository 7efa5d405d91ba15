//! Frozen coefficient processes along an optimal pair, the first and second
//! adjoint BSDEs by regression Monte Carlo, and the Hamiltonian bundle.
//!
//! Everything here is scalar (n = 1, d = 1); multidimensional requests are
//! rejected with [`Error::Unsupported`].

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{validate_problem, ImpulseControl, ProblemSpec, Semantics};
use crate::simulate::{
    active_taus, check_steps, impulse_nodes, make_time_grid_with, simulate_state, BrownianGrid,
    TimeGrid, Trajectory,
};
use crate::stats::Estimate;

/// Smallest bundle accepted by the adjoint solvers.
pub const MIN_BUNDLE_PATHS: usize = 1000;
/// Default polynomial degree of the regression basis.
pub const DEFAULT_DEGREE: usize = 3;
/// Largest accepted condition number of a regression design.
pub const MAX_CONDITION: f64 = 1e12;
const FIXED_POINT_ITERS: usize = 10;
const FIXED_POINT_TOL: f64 = 1e-10;
/// Points per path sampled for the finite-difference derivative check.
const FD_POINTS_PER_PATH: usize = 8;
const FD_PATHS: usize = 4;

/// Common-noise bundle of optimal state paths.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub grid: TimeGrid,
    pub control: ImpulseControl,
    pub x0: Vec<f64>,
    pub seed: u64,
    pub noise: Vec<BrownianGrid>,
    pub states: Vec<Trajectory>,
    pub impulse_nodes: Vec<usize>,
}

impl Bundle {
    /// Simulates `paths` trajectories on a grid containing the impulse times
    /// and the `extra` nodes.
    pub fn build(
        spec: &ProblemSpec,
        control: &ImpulseControl,
        x0: &[f64],
        paths: usize,
        base_steps: usize,
        seed: u64,
        extra: &[f64],
    ) -> Result<Bundle> {
        check_steps(base_steps)?;
        if paths == 0 {
            return Err(invalid("paths", "must be positive"));
        }
        control.check_bound(spec.max_impulses)?;
        let grid =
            make_time_grid_with(control.start_time, spec.horizon, control, base_steps, extra)?;
        let impulse_nodes = impulse_nodes(&grid, control)?;
        let noise: Vec<BrownianGrid> = (0..paths as u64)
            .into_par_iter()
            .map(|p| BrownianGrid::sample(&grid, seed, p))
            .collect();
        let states = noise
            .par_iter()
            .map(|w| simulate_state(spec, control, x0, &grid, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bundle {
            grid,
            control: control.clone(),
            x0: x0.to_vec(),
            seed,
            noise,
            states,
            impulse_nodes,
        })
    }

    pub fn paths(&self) -> usize {
        self.states.len()
    }

    pub fn len(&self) -> usize {
        self.grid.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Post-jump scalar state of path `p` at node `k`.
    pub fn x(&self, p: usize, k: usize) -> f64 {
        self.states[p].post[k]
    }

    /// Brownian increment of path `p` over `[t_k, t_{k+1})`.
    pub fn dw(&self, p: usize, k: usize) -> f64 {
        self.noise[p].increments[k]
    }

    /// Parameter times active on the interval starting at node `k`.
    pub fn active(&self, spec: &ProblemSpec, k: usize) -> Vec<f64> {
        active_taus(spec, &self.control, &self.impulse_nodes, k)
    }
}

/// τ-derivative processes and cost derivatives attached to impulse `index`.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyTerms {
    /// 1-based impulse index.
    pub index: usize,
    pub tau: f64,
    pub node: usize,
    pub size: f64,
    /// `b_τ(τ̄_i, r, X̄(r))` after activation, zero before (path-major).
    pub b_tau: Vec<f64>,
    pub sigma_tau: Vec<f64>,
    pub g_tau: Vec<f64>,
    pub zeta: Vec<f64>,
    pub ell_tau: f64,
    pub ell_xi: f64,
}

/// Derivative processes along the bundle; per-node fields are path-major
/// (`p * nodes + k`). Second-order fields carry the factor ½.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenCoefficients {
    pub paths: usize,
    pub nodes: usize,
    pub b_x: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub b_xx: Vec<f64>,
    pub sigma_xx: Vec<f64>,
    pub g_x: Vec<f64>,
    pub g_xx: Vec<f64>,
    pub h_x: Vec<f64>,
    pub h_xx: Vec<f64>,
    pub copies: Vec<CopyTerms>,
    /// Number of closed-form derivative evaluations cross-checked by
    /// finite differences.
    pub fd_checks: usize,
}

impl FrozenCoefficients {
    pub fn at(&self, field: &[f64], p: usize, k: usize) -> f64 {
        field[p * self.nodes + k]
    }
}

fn require_scalar(spec: &ProblemSpec) -> Result<()> {
    if spec.dim != 1 {
        return Err(Error::Unsupported(format!(
            "adjoint and maximum-principle checks need n = 1, got n = {}",
            spec.dim
        )));
    }
    Ok(())
}

/// Derivative processes of the optimal pair, cross-checked by finite differences.
pub fn compute_frozen(spec: &ProblemSpec, bundle: &Bundle) -> Result<FrozenCoefficients> {
    require_scalar(spec)?;
    let report = validate_problem(spec, 100, bundle.seed)?;
    if !report.flags.h4_differentiable {
        return Err(Error::DerivativeInconsistency {
            family: "problem".into(),
            detail: "differentiability validation failed".into(),
        });
    }
    let paths = bundle.paths();
    let len = bundle.len();
    let fd_checks = fd_cross_check(spec, bundle)?;
    let actives: Vec<Vec<f64>> = (0..len).map(|k| bundle.active(spec, k)).collect();
    let rows: Vec<[Vec<f64>; 6]> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut row: [Vec<f64>; 6] = Default::default();
            for r in row.iter_mut() {
                r.reserve(len);
            }
            for (k, taus) in actives.iter().enumerate() {
                let x = bundle.x(p, k);
                let mut acc = [0.0; 6];
                for &tau in taus {
                    acc[0] += spec.drift.d_x(tau, x);
                    acc[1] += spec.diffusion.d_x(tau, x);
                    acc[2] += 0.5 * spec.drift.d_xx(tau, x);
                    acc[3] += 0.5 * spec.diffusion.d_xx(tau, x);
                    acc[4] += spec.running_cost.d_x(tau, x);
                    acc[5] += 0.5 * spec.running_cost.d_xx(tau, x);
                }
                for (r, v) in row.iter_mut().zip(acc) {
                    r.push(v);
                }
            }
            row
        })
        .collect();
    let mut fields: [Vec<f64>; 6] = Default::default();
    for f in fields.iter_mut() {
        f.reserve(paths * len);
    }
    for row in rows {
        for (f, r) in fields.iter_mut().zip(row) {
            f.extend(r);
        }
    }
    let last = len - 1;
    let h_x = (0..paths)
        .map(|p| spec.terminal_cost.d_x(0.0, bundle.x(p, last)))
        .collect();
    let h_xx = (0..paths)
        .map(|p| 0.5 * spec.terminal_cost.d_xx(0.0, bundle.x(p, last)))
        .collect();
    let stacking = spec.semantics == Semantics::Stacking;
    let mut copies = Vec::with_capacity(bundle.control.count());
    for (i, (imp, &node)) in bundle
        .control
        .impulses
        .iter()
        .zip(&bundle.impulse_nodes)
        .enumerate()
    {
        let mut b_tau = vec![0.0; paths * len];
        let mut sigma_tau = vec![0.0; paths * len];
        let mut g_tau = vec![0.0; paths * len];
        if stacking {
            for p in 0..paths {
                for k in node..len {
                    let x = bundle.x(p, k);
                    b_tau[p * len + k] = spec.drift.d_tau(imp.time, x);
                    sigma_tau[p * len + k] = spec.diffusion.d_tau(imp.time, x);
                    g_tau[p * len + k] = spec.running_cost.d_tau(imp.time, x);
                }
            }
        }
        copies.push(CopyTerms {
            index: i + 1,
            tau: imp.time,
            node,
            size: imp.size[0],
            b_tau,
            sigma_tau,
            g_tau,
            zeta: Vec::new(),
            ell_tau: spec.impulse_tau(imp.time, &imp.size),
            ell_xi: spec.impulse_grad(imp.time, &imp.size)[0],
        });
    }
    let [b_x, sigma_x, b_xx, sigma_xx, g_x, g_xx] = fields;
    let mut frozen = FrozenCoefficients {
        paths,
        nodes: len,
        b_x,
        sigma_x,
        b_xx,
        sigma_xx,
        g_x,
        g_xx,
        h_x,
        h_xx,
        copies,
        fd_checks,
    };
    let zetas = compute_zeta(&frozen, bundle)?;
    for (c, z) in frozen.copies.iter_mut().zip(zetas) {
        c.zeta = z;
    }
    Ok(frozen)
}

fn fd_cross_check(spec: &ProblemSpec, bundle: &Bundle) -> Result<usize> {
    let len = bundle.len();
    let mut count = 0;
    for p in 0..bundle.paths().min(FD_PATHS) {
        for j in 0..FD_POINTS_PER_PATH {
            let k = j * (len - 1) / (FD_POINTS_PER_PATH - 1);
            let x = bundle.x(p, k);
            for tau in bundle.active(spec, k) {
                spec.drift.check_derivatives("drift", tau, x)?;
                spec.diffusion.check_derivatives("diffusion", tau, x)?;
                spec.running_cost
                    .check_derivatives("running_cost", tau, x)?;
                count += 3;
            }
        }
        spec.terminal_cost
            .check_derivatives("terminal_cost", 0.0, bundle.x(p, len - 1))?;
        count += 1;
    }
    for imp in &bundle.control.impulses {
        let r = imp.size[0].abs();
        if r > 0.0 {
            spec.impulse_cost
                .check_derivatives("impulse_cost", imp.time, r)?;
            count += 1;
        }
    }
    Ok(count)
}

/// `ζ^i(s) = ∫ b^i_τ dθ + ∫ σ^i_τ dW` by pathwise Euler sums on the bundle noise.
pub fn compute_zeta(frozen: &FrozenCoefficients, bundle: &Bundle) -> Result<Vec<Vec<f64>>> {
    if frozen.paths != bundle.paths() || frozen.nodes != bundle.len() {
        return Err(Error::Mismatch(
            "frozen coefficients and bundle differ in size".into(),
        ));
    }
    let len = frozen.nodes;
    let dts = bundle.grid.dts();
    Ok(frozen
        .copies
        .iter()
        .map(|c| {
            let mut zeta = vec![0.0; frozen.paths * len];
            for p in 0..frozen.paths {
                let base = p * len;
                for k in c.node..len - 1 {
                    zeta[base + k + 1] = zeta[base + k]
                        + c.b_tau[base + k] * dts[k]
                        + c.sigma_tau[base + k] * bundle.dw(p, k);
                }
            }
            zeta
        })
        .collect())
}

/// Regression diagnostics of one time node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionInfo {
    pub node: usize,
    pub degree: usize,
    pub condition: f64,
    /// Mean squared in-sample residual of the value regression.
    pub residual_var: f64,
}

/// Least-squares projection onto `1, u, …, u^d` with standardized `u`.
#[derive(Debug, Clone)]
struct Regressor {
    degree: usize,
    center: f64,
    scale: f64,
    condition: f64,
    design: Vec<f64>,
    gram_inv: DMatrix<f64>,
    rows: usize,
}

impl Regressor {
    fn fit(xs: &[f64], degree: usize, node: usize) -> Regressor {
        let n = xs.len() as f64;
        let center = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - center).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt();
        let mut degree = if scale <= 1e-12 * (1.0 + center.abs()) {
            0
        } else {
            degree
        };
        loop {
            let cols = degree + 1;
            let mut design = Vec::with_capacity(xs.len() * cols);
            for x in xs {
                let u = if degree == 0 {
                    0.0
                } else {
                    (x - center) / scale
                };
                let mut v = 1.0;
                for _ in 0..cols {
                    design.push(v);
                    v *= u;
                }
            }
            let mut gram = DMatrix::<f64>::zeros(cols, cols);
            for row in design.chunks(cols) {
                for a in 0..cols {
                    for b in a..cols {
                        gram[(a, b)] += row[a] * row[b];
                    }
                }
            }
            for a in 0..cols {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
            }
            let eig = gram.clone().symmetric_eigen().eigenvalues;
            let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            let condition = if min > 0.0 {
                (max / min).sqrt()
            } else {
                f64::INFINITY
            };
            let inverse = gram.clone().cholesky().map(|c| c.inverse());
            match inverse {
                Some(gram_inv) if condition <= MAX_CONDITION => {
                    return Regressor {
                        degree,
                        center,
                        scale,
                        condition,
                        design,
                        gram_inv,
                        rows: xs.len(),
                    }
                }
                _ if degree > 0 => {
                    warn!(
                        "regression at node {node} ill-conditioned (condition {condition:e}); \
                         reducing degree to {}",
                        degree - 1
                    );
                    degree -= 1;
                }
                _ => {
                    return Regressor {
                        degree: 0,
                        center,
                        scale,
                        condition: 1.0,
                        design: vec![1.0; xs.len()],
                        gram_inv: DMatrix::from_element(1, 1, 1.0 / n),
                        rows: xs.len(),
                    }
                }
            }
        }
    }

    fn basis(&self) -> BasisNode {
        BasisNode {
            degree: self.degree,
            center: self.center,
            scale: self.scale,
        }
    }

    fn coefficients(&self, ys: &[f64]) -> Vec<f64> {
        let cols = self.degree + 1;
        let mut rhs = DVector::<f64>::zeros(cols);
        for (row, y) in self.design.chunks(cols).zip(ys) {
            for a in 0..cols {
                rhs[a] += row[a] * y;
            }
        }
        (&self.gram_inv * rhs).iter().copied().collect()
    }

    fn fitted(&self, coef: &[f64]) -> Vec<f64> {
        let cols = self.degree + 1;
        self.design
            .chunks(cols)
            .map(|row| row.iter().zip(coef).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn info(&self, node: usize, ys: &[f64], fitted: &[f64]) -> RegressionInfo {
        let residual_var = ys
            .iter()
            .zip(fitted)
            .map(|(y, f)| (y - f).powi(2))
            .sum::<f64>()
            / self.rows as f64;
        RegressionInfo {
            node,
            degree: self.degree,
            condition: self.condition,
            residual_var,
        }
    }
}

/// Basis standardization of one node, kept for evaluation off the bundle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisNode {
    pub degree: usize,
    pub center: f64,
    pub scale: f64,
}

impl BasisNode {
    pub fn eval(&self, coef: &[f64], x: f64) -> f64 {
        let u = if self.degree == 0 {
            0.0
        } else {
            (x - self.center) / self.scale
        };
        coef.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }
}

/// Solution of the first adjoint equation.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstAdjoint {
    pub paths: usize,
    pub nodes: usize,
    pub basis: Vec<BasisNode>,
    pub y_coef: Vec<Vec<f64>>,
    pub z_coef: Vec<Vec<f64>>,
    /// Pathwise values, path-major.
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub diagnostics: Vec<RegressionInfo>,
}

impl FirstAdjoint {
    pub fn y_at(&self, p: usize, k: usize) -> f64 {
        self.y[p * self.nodes + k]
    }

    pub fn z_at(&self, p: usize, k: usize) -> f64 {
        self.z[p * self.nodes + k]
    }
}

/// Solution of the second adjoint equation.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondAdjoint {
    pub paths: usize,
    pub nodes: usize,
    pub basis: Vec<BasisNode>,
    pub p_coef: Vec<Vec<f64>>,
    pub q_coef: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub diagnostics: Vec<RegressionInfo>,
}

impl SecondAdjoint {
    pub fn p_at(&self, p: usize, k: usize) -> f64 {
        self.p[p * self.nodes + k]
    }

    pub fn q_at(&self, p: usize, k: usize) -> f64 {
        self.q[p * self.nodes + k]
    }
}

fn check_shapes(frozen: &FrozenCoefficients, bundle: &Bundle) -> Result<()> {
    if frozen.paths != bundle.paths() || frozen.nodes != bundle.len() {
        return Err(Error::Mismatch(format!(
            "frozen coefficients hold {}x{} values, bundle has {}x{}",
            frozen.paths,
            frozen.nodes,
            bundle.paths(),
            bundle.len()
        )));
    }
    Ok(())
}

fn check_paths(bundle: &Bundle) -> Result<()> {
    if bundle.paths() < MIN_BUNDLE_PATHS {
        return Err(invalid(
            "paths",
            format!("adjoint regression needs at least {MIN_BUNDLE_PATHS} paths"),
        ));
    }
    Ok(())
}

/// Output of a scalar linear BSDE solve `dU = -(a U + c V + f) ds + V dW`.
struct ScalarBsde {
    basis: Vec<BasisNode>,
    u_coef: Vec<Vec<f64>>,
    v_coef: Vec<Vec<f64>>,
    u: Vec<f64>,
    v: Vec<f64>,
    diagnostics: Vec<RegressionInfo>,
}

/// Backward regression for a scalar BSDE whose driver is `a·U + c·V + f`;
/// `f` may depend on the freshly regressed `V` through `forcing`.
fn solve_scalar_bsde(
    bundle: &Bundle,
    degree: usize,
    terminal: &[f64],
    a: &[f64],
    c: &[f64],
    forcing: &dyn Fn(usize, usize, f64) -> f64,
) -> ScalarBsde {
    let paths = bundle.paths();
    let len = bundle.len();
    let dts = bundle.grid.dts();
    let mut u = vec![0.0; paths * len];
    let mut v = vec![0.0; paths * len];
    let mut basis = vec![
        BasisNode {
            degree: 0,
            center: 0.0,
            scale: 1.0
        };
        len
    ];
    let mut u_coef = vec![Vec::new(); len];
    let mut v_coef = vec![Vec::new(); len];
    let mut diagnostics = vec![
        RegressionInfo {
            node: len - 1,
            degree: 0,
            condition: 1.0,
            residual_var: 0.0
        };
        len
    ];
    for p in 0..paths {
        u[p * len + len - 1] = terminal[p];
    }
    let mut xs = vec![0.0; paths];
    let mut target = vec![0.0; paths];
    for k in (0..len - 1).rev() {
        let dt = dts[k];
        for (p, x) in xs.iter_mut().enumerate() {
            *x = bundle.x(p, k);
        }
        let reg = Regressor::fit(&xs, degree, k);
        for (p, t) in target.iter_mut().enumerate() {
            *t = u[p * len + k + 1] * bundle.dw(p, k) / dt;
        }
        let vc = reg.coefficients(&target);
        let vk = reg.fitted(&vc);
        let next: Vec<f64> = (0..paths).map(|p| u[p * len + k + 1]).collect();
        let mut uc = reg.coefficients(&next);
        let mut uk = reg.fitted(&uc);
        for _ in 0..FIXED_POINT_ITERS {
            for p in 0..paths {
                let i = p * len + k;
                target[p] = next[p] + dt * (a[i] * uk[p] + c[i] * vk[p] + forcing(p, k, vk[p]));
            }
            let nc = reg.coefficients(&target);
            let nu = reg.fitted(&nc);
            let change = nu
                .iter()
                .zip(&uk)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0_f64, f64::max);
            let scale = nu.iter().map(|x| x.abs()).fold(0.0_f64, f64::max);
            uc = nc;
            uk = nu;
            if change <= FIXED_POINT_TOL * (1.0 + scale) {
                break;
            }
        }
        diagnostics[k] = reg.info(k, &target, &uk);
        for p in 0..paths {
            u[p * len + k] = uk[p];
            v[p * len + k] = vk[p];
        }
        basis[k] = reg.basis();
        u_coef[k] = uc;
        v_coef[k] = vc;
    }
    ScalarBsde {
        basis,
        u_coef,
        v_coef,
        u,
        v,
        diagnostics,
    }
}

/// `dY = -(B_x Y + Σ_x Z + G_x) ds + Z dW`, `Y(T) = H_x`.
pub fn solve_first_adjoint(
    frozen: &FrozenCoefficients,
    bundle: &Bundle,
    degree: usize,
) -> Result<FirstAdjoint> {
    check_shapes(frozen, bundle)?;
    check_paths(bundle)?;
    let len = frozen.nodes;
    let g_x = &frozen.g_x;
    let sol = solve_scalar_bsde(
        bundle,
        degree,
        &frozen.h_x,
        &frozen.b_x,
        &frozen.sigma_x,
        &|p, k, _| g_x[p * len + k],
    );
    Ok(FirstAdjoint {
        paths: frozen.paths,
        nodes: len,
        basis: sol.basis,
        y_coef: sol.u_coef,
        z_coef: sol.v_coef,
        y: sol.u,
        z: sol.v,
        diagnostics: sol.diagnostics,
    })
}

/// `dP = -(2B_x P + Σ_x² P + 2Σ_x Q + 𝐇_xx) ds + Q dW`, `P(T) = H_xx`.
pub fn solve_second_adjoint(
    frozen: &FrozenCoefficients,
    first: &FirstAdjoint,
    bundle: &Bundle,
    degree: usize,
) -> Result<SecondAdjoint> {
    check_shapes(frozen, bundle)?;
    check_paths(bundle)?;
    if first.paths != frozen.paths || first.nodes != frozen.nodes {
        return Err(Error::Mismatch(
            "first adjoint and frozen coefficients differ in size".into(),
        ));
    }
    let len = frozen.nodes;
    let a: Vec<f64> = frozen
        .b_x
        .iter()
        .zip(&frozen.sigma_x)
        .map(|(b, s)| 2.0 * b + s * s)
        .collect();
    let c: Vec<f64> = frozen.sigma_x.iter().map(|s| 2.0 * s).collect();
    let hxx = hamiltonian_xx(frozen, first);
    let sol = solve_scalar_bsde(bundle, degree, &frozen.h_xx, &a, &c, &|p, k, _| {
        hxx[p * len + k]
    });
    Ok(SecondAdjoint {
        paths: frozen.paths,
        nodes: len,
        basis: sol.basis,
        p_coef: sol.u_coef,
        q_coef: sol.v_coef,
        p: sol.u,
        q: sol.v,
        diagnostics: sol.diagnostics,
    })
}

fn hamiltonian_xx(frozen: &FrozenCoefficients, first: &FirstAdjoint) -> Vec<f64> {
    (0..frozen.b_xx.len())
        .map(|i| first.y[i] * frozen.b_xx[i] + first.z[i] * frozen.sigma_xx[i] + frozen.g_xx[i])
        .collect()
}

/// 𝐇, 𝐇_x and 𝐇_xx along the bundle (path-major); 𝐇_xx carries the factor ½.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPath {
    pub nodes: usize,
    pub h: Vec<f64>,
    pub h_x: Vec<f64>,
    pub h_xx: Vec<f64>,
}

impl HamiltonianPath {
    pub fn at(&self, field: &[f64], p: usize, k: usize) -> f64 {
        field[p * self.nodes + k]
    }
}

/// Pointwise Hamiltonian over the activated parameter times.
pub fn hamiltonian_bundle(
    spec: &ProblemSpec,
    frozen: &FrozenCoefficients,
    first: &FirstAdjoint,
    bundle: &Bundle,
) -> Result<HamiltonianPath> {
    check_shapes(frozen, bundle)?;
    let len = frozen.nodes;
    let mut h = vec![0.0; frozen.paths * len];
    for k in 0..len {
        let taus = bundle.active(spec, k);
        for p in 0..frozen.paths {
            let i = p * len + k;
            let x = bundle.x(p, k);
            h[i] = taus
                .iter()
                .map(|&tau| {
                    first.y[i] * spec.drift.value(tau, x)
                        + first.z[i] * spec.diffusion.value(tau, x)
                        + spec.running_cost.value(tau, x)
                })
                .sum();
        }
    }
    let h_x = (0..h.len())
        .map(|i| first.y[i] * frozen.b_x[i] + first.z[i] * frozen.sigma_x[i] + frozen.g_x[i])
        .collect();
    Ok(HamiltonianPath {
        nodes: len,
        h,
        h_x,
        h_xx: hamiltonian_xx(frozen, first),
    })
}

/// Per-node cross-sectional statistics of the adjoint processes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointRow {
    pub node: usize,
    pub time: f64,
    pub y: Estimate,
    pub z: Estimate,
    pub p: Estimate,
    pub q: Estimate,
}

/// Mean and standard error of `field` across paths at node `k`.
pub fn node_estimate(field: &[f64], paths: usize, nodes: usize, k: usize) -> Estimate {
    let xs: Vec<f64> = (0..paths).map(|p| field[p * nodes + k]).collect();
    Estimate::from_samples(&xs)
}

/// One row per node for the adjoint dump.
pub fn summarize(bundle: &Bundle, first: &FirstAdjoint, second: &SecondAdjoint) -> Vec<AdjointRow> {
    let (paths, len) = (first.paths, first.nodes);
    (0..len)
        .map(|k| AdjointRow {
            node: k,
            time: bundle.grid.nodes[k],
            y: node_estimate(&first.y, paths, len, k),
            z: node_estimate(&first.z, paths, len, k),
            p: node_estimate(&second.p, paths, len, k),
            q: node_estimate(&second.q, paths, len, k),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::presets::{impulse_active, linear_adjoint};
    use crate::model::{CoefficientFamily, Impulse};

    fn small_bundle(spec: &ProblemSpec, control: &ImpulseControl, paths: usize) -> Bundle {
        Bundle::build(spec, control, &[0.0], paths, 40, 7, &[]).unwrap()
    }

    #[test]
    fn constant_coefficients_have_zero_state_derivatives() {
        let p = linear_adjoint();
        let b = small_bundle(&p.spec, p.control.as_ref().unwrap(), 50);
        let f = compute_frozen(&p.spec, &b).unwrap();
        assert!(f.b_x.iter().chain(&f.sigma_x).all(|v| *v == 0.0));
        assert!(f.b_xx.iter().chain(&f.sigma_xx).all(|v| *v == 0.0));
        assert!(f.fd_checks > 0);
    }

    #[test]
    fn tau_free_coefficients_give_zero_zeta() {
        let mut spec = linear_adjoint().spec;
        spec.drift = CoefficientFamily::constant(0.2);
        spec.diffusion = CoefficientFamily::constant(0.3);
        let control = linear_adjoint().control.unwrap();
        let b = small_bundle(&spec, &control, 50);
        let f = compute_frozen(&spec, &b).unwrap();
        for c in &f.copies {
            assert!(c
                .b_tau
                .iter()
                .chain(&c.sigma_tau)
                .chain(&c.zeta)
                .all(|v| *v == 0.0));
        }
    }

    #[test]
    fn stacked_mean_reversion_doubles_after_the_impulse() {
        let mut spec = impulse_active().spec;
        spec.semantics = Semantics::Stacking;
        let control = ImpulseControl {
            start_time: 0.0,
            impulses: vec![Impulse {
                time: 0.5,
                size: vec![1.0],
            }],
        };
        let b = small_bundle(&spec, &control, 20);
        let f = compute_frozen(&spec, &b).unwrap();
        let node = b.impulse_nodes[0];
        for p in 0..20 {
            for k in 0..b.len() {
                let want = if k >= node { -1.0 } else { -0.5 };
                assert_eq!(f.at(&f.b_x, p, k), want);
            }
        }
    }

    #[test]
    fn copy_terms_vanish_before_activation() {
        let p = linear_adjoint();
        let b = small_bundle(&p.spec, p.control.as_ref().unwrap(), 50);
        let f = compute_frozen(&p.spec, &b).unwrap();
        for c in &f.copies {
            for path in 0..50 {
                for k in 0..=c.node {
                    let i = path * f.nodes + k;
                    assert_eq!(c.zeta[i], 0.0);
                    if k < c.node {
                        assert_eq!((c.b_tau[i], c.sigma_tau[i], c.g_tau[i]), (0.0, 0.0, 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn zeta_of_constant_drift_derivative_is_linear_in_time() {
        let mut spec = linear_adjoint().spec;
        spec.diffusion = CoefficientFamily::constant(0.3);
        let control = linear_adjoint().control.unwrap();
        let b = small_bundle(&spec, &control, 10);
        let f = compute_frozen(&spec, &b).unwrap();
        let c = &f.copies[0];
        let slope = spec.drift.d_tau(c.tau, 0.0);
        for k in 0..b.len() {
            let want = slope * (b.grid.nodes[k] - c.tau).max(0.0);
            assert!((c.zeta[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn terminal_conditions_are_exact() {
        let p = linear_adjoint();
        let b = Bundle::build(
            &p.spec,
            p.control.as_ref().unwrap(),
            &[0.0],
            1000,
            20,
            3,
            &[],
        )
        .unwrap();
        let f = compute_frozen(&p.spec, &b).unwrap();
        let y = solve_first_adjoint(&f, &b, DEFAULT_DEGREE).unwrap();
        let s = solve_second_adjoint(&f, &y, &b, DEFAULT_DEGREE).unwrap();
        let last = b.len() - 1;
        for path in 0..1000 {
            assert_eq!(y.y_at(path, last), f.h_x[path]);
            assert_eq!(s.p_at(path, last), f.h_xx[path]);
        }
    }

    #[test]
    fn small_bundles_are_rejected() {
        let p = linear_adjoint();
        let b = small_bundle(&p.spec, p.control.as_ref().unwrap(), 50);
        let f = compute_frozen(&p.spec, &b).unwrap();
        assert!(solve_first_adjoint(&f, &b, 3).is_err());
    }

    #[test]
    fn hamiltonian_with_zero_adjoints_is_stacked_running_cost() {
        let p = linear_adjoint();
        let b = small_bundle(&p.spec, p.control.as_ref().unwrap(), 30);
        let f = compute_frozen(&p.spec, &b).unwrap();
        let zero = FirstAdjoint {
            paths: 30,
            nodes: b.len(),
            basis: Vec::new(),
            y_coef: Vec::new(),
            z_coef: Vec::new(),
            y: vec![0.0; 30 * b.len()],
            z: vec![0.0; 30 * b.len()],
            diagnostics: Vec::new(),
        };
        let ham = hamiltonian_bundle(&p.spec, &f, &zero, &b).unwrap();
        let len = b.len();
        for k in 0..len {
            for path in 0..30 {
                let want: f64 = b
                    .active(&p.spec, k)
                    .iter()
                    .map(|&tau| p.spec.running_cost.value(tau, b.x(path, k)))
                    .sum();
                assert_eq!(ham.at(&ham.h, path, k), want);
            }
        }
        assert_eq!(b.active(&p.spec, b.impulse_nodes[0] - 1).len(), 1);
    }

    #[test]
    fn regression_reduces_degree_on_constant_states() {
        let xs = vec![1.5; 100];
        let r = Regressor::fit(&xs, 3, 0);
        assert_eq!(r.degree, 0);
        let ys: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let c = r.coefficients(&ys);
        assert!((r.basis().eval(&c, 1.5) - 49.5).abs() < 1e-12);
    }

    #[test]
    fn regression_reproduces_cubics() {
        let xs: Vec<f64> = (0..200).map(|i| -2.0 + 0.02 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - x + 0.5 * x * x * x).collect();
        let r = Regressor::fit(&xs, 3, 0);
        let c = r.coefficients(&ys);
        for (x, y) in xs.iter().zip(&ys) {
            assert!((r.basis().eval(&c, *x) - y).abs() < 1e-9);
        }
    }
}
