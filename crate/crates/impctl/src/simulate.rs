//! Time grids, Brownian drivers, Euler–Maruyama integration of the
//! impulse-driven state and Monte Carlo cost estimation.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{ImpulseControl, ProblemSpec, Semantics};
use crate::stats::{brownian_increments, path_rng, Estimate};

/// Smallest base step count accepted by the Monte Carlo estimators.
pub const MIN_BASE_STEPS: usize = 16;
/// Node tolerance used when merging impulse times into the base grid.
pub const NODE_TOL: f64 = 1e-12;
/// States beyond this magnitude count as blow-up.
const BLOWUP: f64 = 1e12;

/// Strictly increasing nodes from `start` to `end`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub nodes: Vec<f64>,
    pub base_steps: usize,
}

impl TimeGrid {
    /// Number of intervals.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Interval lengths.
    pub fn dts(&self) -> Vec<f64> {
        self.nodes.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index of the node equal to `t` within the merge tolerance.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.nodes.partition_point(|v| *v < t - NODE_TOL);
        (i < self.nodes.len() && (self.nodes[i] - t).abs() <= NODE_TOL).then_some(i)
    }

    /// Index of the last node not after `t`.
    pub fn floor_index(&self, t: f64) -> usize {
        self.nodes
            .partition_point(|v| *v <= t + NODE_TOL)
            .saturating_sub(1)
    }
}

/// Uniform grid merged with the impulse times of `control`.
pub fn make_time_grid(
    t: f64,
    horizon: f64,
    control: &ImpulseControl,
    base_steps: usize,
) -> Result<TimeGrid> {
    make_time_grid_with(t, horizon, control, base_steps, &[])
}

/// Uniform grid merged with impulse times and additional required nodes.
pub fn make_time_grid_with(
    t: f64,
    horizon: f64,
    control: &ImpulseControl,
    base_steps: usize,
    extra: &[f64],
) -> Result<TimeGrid> {
    if base_steps == 0 {
        return Err(invalid("base_steps", "must be positive"));
    }
    if !(t < horizon) {
        return Err(invalid("horizon", "start must precede end"));
    }
    let mut nodes: Vec<f64> = (0..=base_steps)
        .map(|k| {
            if k == base_steps {
                horizon
            } else {
                t + (horizon - t) * k as f64 / base_steps as f64
            }
        })
        .collect();
    let required = control
        .impulses
        .iter()
        .map(|imp| imp.time)
        .chain(extra.iter().copied());
    for time in required {
        if !(time >= t - NODE_TOL && time <= horizon + NODE_TOL) {
            return Err(Error::TimeOutOfRange {
                time,
                start: t,
                end: horizon,
            });
        }
        let i = nodes.partition_point(|v| *v < time - NODE_TOL);
        if i < nodes.len() && (nodes[i] - time).abs() <= NODE_TOL {
            continue;
        }
        nodes.insert(i, time);
    }
    Ok(TimeGrid {
        start: t,
        end: horizon,
        nodes,
        base_steps,
    })
}

/// Brownian increments of one path over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianGrid {
    pub seed: u64,
    pub path_id: u64,
    pub increments: Vec<f64>,
}

impl BrownianGrid {
    /// Increments drawn from the per-path generator `hash(seed, path_id)`.
    pub fn sample(grid: &TimeGrid, seed: u64, path_id: u64) -> Self {
        let mut rng = path_rng(seed, path_id);
        BrownianGrid {
            seed,
            path_id,
            increments: brownian_increments(&mut rng, &grid.dts()),
        }
    }
}

/// Discretized state path; values are stored row-major as `node * dim + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    /// Number of activated parameter times at each node, τ₀ included.
    pub active_count: Vec<usize>,
    pub path_id: u64,
}

impl Trajectory {
    pub fn pre_at(&self, k: usize) -> &[f64] {
        &self.pre[k * self.dim..(k + 1) * self.dim]
    }

    pub fn post_at(&self, k: usize) -> &[f64] {
        &self.post[k * self.dim..(k + 1) * self.dim]
    }

    /// Activated parameter times at node `k`.
    pub fn active_set(&self, k: usize, spec: &ProblemSpec, control: &ImpulseControl) -> Vec<f64> {
        let mut out = vec![spec.tau0];
        out.extend(
            control
                .impulses
                .iter()
                .take(self.active_count[k] - 1)
                .map(|imp| imp.time),
        );
        out
    }
}

/// Node index of every impulse of `control` on `grid`.
pub fn impulse_nodes(grid: &TimeGrid, control: &ImpulseControl) -> Result<Vec<usize>> {
    control
        .impulses
        .iter()
        .map(|imp| {
            grid.index_of(imp.time).ok_or_else(|| {
                invalid(
                    "grid",
                    format!("impulse time {} is not a grid node", imp.time),
                )
            })
        })
        .collect()
}

/// Parameter times active on the interval starting at each node.
pub(crate) fn active_taus(
    spec: &ProblemSpec,
    control: &ImpulseControl,
    nodes: &[usize],
    k: usize,
) -> Vec<f64> {
    let mut taus = vec![spec.tau0];
    if spec.semantics == Semantics::Stacking {
        for (imp, &node) in control.impulses.iter().zip(nodes) {
            if node <= k {
                taus.push(imp.time);
            }
        }
    }
    taus
}

fn step_state(spec: &ProblemSpec, taus: &[f64], x: &[f64], dt: f64, dw: f64, out: &mut [f64]) {
    for c in 0..x.len() {
        let mut b = 0.0;
        let mut s = 0.0;
        for &tau in taus {
            b += spec.drift.value(tau, x[c]);
            s += spec.diffusion.value(tau, x[c]);
        }
        out[c] = x[c] + b * dt + s * dw;
    }
}

/// Euler–Maruyama path with jumps applied after the diffusion step.
pub fn simulate_state(
    spec: &ProblemSpec,
    control: &ImpulseControl,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &BrownianGrid,
) -> Result<Trajectory> {
    let n = spec.dim;
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x0.len(),
        });
    }
    if noise.increments.len() != grid.steps() {
        return Err(Error::DimensionMismatch {
            expected: grid.steps(),
            found: noise.increments.len(),
        });
    }
    let nodes = impulse_nodes(grid, control)?;
    let len = grid.nodes.len();
    let mut pre = vec![0.0; len * n];
    let mut post = vec![0.0; len * n];
    let mut active_count = vec![1usize; len];
    let dts = grid.dts();
    pre[..n].copy_from_slice(x0);
    let mut buf = vec![0.0; n];
    for k in 0..len {
        if k > 0 {
            let taus = active_taus(spec, control, &nodes, k - 1);
            step_state(
                spec,
                &taus,
                &post[(k - 1) * n..k * n],
                dts[k - 1],
                noise.increments[k - 1],
                &mut buf,
            );
            pre[k * n..(k + 1) * n].copy_from_slice(&buf);
        }
        for c in 0..n {
            post[k * n + c] = pre[k * n + c];
        }
        for (imp, &node) in control.impulses.iter().zip(&nodes) {
            if node == k {
                for c in 0..n {
                    post[k * n + c] = pre[k * n + c] + imp.size[c];
                }
            }
        }
        if spec.semantics == Semantics::Stacking {
            active_count[k] = 1 + nodes.iter().filter(|&&node| node <= k).count();
        }
        if post[k * n..(k + 1) * n]
            .iter()
            .any(|v| !v.is_finite() || v.abs() > BLOWUP)
        {
            return Err(Error::Divergence {
                node: k,
                path: noise.path_id as usize,
            });
        }
    }
    Ok(Trajectory {
        dim: n,
        pre,
        post,
        active_count,
        path_id: noise.path_id,
    })
}

/// Cost components of one path.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathCost {
    pub running: f64,
    pub impulse: f64,
    pub terminal: f64,
}

impl PathCost {
    pub fn total(&self) -> f64 {
        self.running + self.impulse + self.terminal
    }
}

/// Left-endpoint running cost, impulse costs and terminal cost of a path.
pub fn path_cost(
    spec: &ProblemSpec,
    control: &ImpulseControl,
    grid: &TimeGrid,
    traj: &Trajectory,
) -> Result<PathCost> {
    let nodes = impulse_nodes(grid, control)?;
    let dts = grid.dts();
    let mut running = 0.0;
    for (k, dt) in dts.iter().enumerate() {
        let taus = active_taus(spec, control, &nodes, k);
        let x = traj.post_at(k);
        for &tau in &taus {
            running += spec.running(tau, x) * dt;
        }
    }
    let impulse = control
        .impulses
        .iter()
        .map(|imp| spec.impulse(imp.time, &imp.size))
        .sum();
    let terminal = spec.terminal(traj.post_at(grid.steps()));
    Ok(PathCost {
        running,
        impulse,
        terminal,
    })
}

/// Monte Carlo estimate of the cost functional.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub paths: usize,
    pub running: f64,
    pub impulse: f64,
    pub terminal: f64,
    pub seed: u64,
}

impl CostEstimate {
    pub(crate) fn from_costs(costs: &[PathCost], seed: u64) -> Self {
        let totals: Vec<f64> = costs.iter().map(PathCost::total).collect();
        let running =
            Estimate::from_samples(&costs.iter().map(|c| c.running).collect::<Vec<_>>()).mean;
        let impulse =
            Estimate::from_samples(&costs.iter().map(|c| c.impulse).collect::<Vec<_>>()).mean;
        let terminal =
            Estimate::from_samples(&costs.iter().map(|c| c.terminal).collect::<Vec<_>>()).mean;
        let est = Estimate::from_samples(&totals);
        CostEstimate {
            mean: running + impulse + terminal,
            stderr: est.stderr,
            paths: costs.len(),
            running,
            impulse,
            terminal,
            seed,
        }
    }
}

/// Simulates `paths` paths of `control` and averages the cost.
pub fn estimate_cost(
    spec: &ProblemSpec,
    control: &ImpulseControl,
    x0: &[f64],
    paths: usize,
    base_steps: usize,
    seed: u64,
) -> Result<CostEstimate> {
    if paths < 100 {
        return Err(invalid("paths", "must be at least 100"));
    }
    check_steps(base_steps)?;
    let grid = make_time_grid(control.start_time, spec.horizon, control, base_steps)?;
    let costs = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let noise = BrownianGrid::sample(&grid, seed, p);
            let traj = simulate_state(spec, control, x0, &grid, &noise)?;
            path_cost(spec, control, &grid, &traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostEstimate::from_costs(&costs, seed))
}

pub(crate) fn check_steps(base_steps: usize) -> Result<()> {
    if base_steps < MIN_BASE_STEPS {
        return Err(invalid(
            "base_steps",
            format!("must be at least {MIN_BASE_STEPS}"),
        ));
    }
    Ok(())
}

/// State-feedback impulse rule: returns the impulse to apply at `(t, x)`.
pub trait FeedbackPolicy: Sync {
    fn decide(&self, t: f64, x: &[f64]) -> Option<Vec<f64>>;
}

/// Feedback rule that never intervenes.
pub struct NoIntervention;

impl FeedbackPolicy for NoIntervention {
    fn decide(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// One realized impulse of a feedback simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealizedImpulse {
    pub node: usize,
    pub time: f64,
    pub size: Vec<f64>,
}

/// Outcome of [`evaluate_policy`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEvaluation {
    pub cost: CostEstimate,
    /// `kappa_histogram[k]` counts paths with exactly k impulses.
    pub kappa_histogram: Vec<usize>,
    /// Paths on which the impulse cap stopped further interventions.
    pub cap_reached: usize,
    #[serde(skip)]
    pub events: Vec<Vec<RealizedImpulse>>,
}

/// Simulates a feedback policy, applying at most one impulse per node.
pub fn evaluate_policy(
    spec: &ProblemSpec,
    policy: &dyn FeedbackPolicy,
    x0: &[f64],
    paths: usize,
    base_steps: usize,
    seed: u64,
) -> Result<PolicyEvaluation> {
    if paths < 100 {
        return Err(invalid("paths", "must be at least 100"));
    }
    check_steps(base_steps)?;
    let n = spec.dim;
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x0.len(),
        });
    }
    let start = spec.tau0;
    let grid = make_time_grid(
        start,
        spec.horizon,
        &ImpulseControl::empty(start),
        base_steps,
    )?;
    let dts = grid.dts();
    let results = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let noise = BrownianGrid::sample(&grid, seed, p);
            let mut x = x0.to_vec();
            let mut buf = vec![0.0; n];
            let mut taus = vec![spec.tau0];
            let mut events = Vec::new();
            let mut cost = PathCost::default();
            let mut capped = false;
            for k in 0..grid.nodes.len() {
                let t = grid.nodes[k];
                if k > 0 {
                    step_state(
                        spec,
                        &taus,
                        &x,
                        dts[k - 1],
                        noise.increments[k - 1],
                        &mut buf,
                    );
                    x.copy_from_slice(&buf);
                }
                if let Some(xi) = policy.decide(t, &x) {
                    if events.len() >= spec.max_impulses {
                        capped = true;
                    } else {
                        x.iter_mut().zip(&xi).for_each(|(a, b)| *a += b);
                        cost.impulse += spec.impulse(t, &xi);
                        if spec.semantics == Semantics::Stacking {
                            taus.push(t);
                        }
                        events.push(RealizedImpulse {
                            node: k,
                            time: t,
                            size: xi,
                        });
                    }
                }
                if x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
                    return Err(Error::Divergence {
                        node: k,
                        path: p as usize,
                    });
                }
                if k < dts.len() {
                    for &tau in &taus {
                        cost.running += spec.running(tau, &x) * dts[k];
                    }
                }
            }
            cost.terminal = spec.terminal(&x);
            Ok((cost, events, capped))
        })
        .collect::<Result<Vec<_>>>()?;
    let costs: Vec<PathCost> = results.iter().map(|r| r.0).collect();
    let max_k = results.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let mut kappa_histogram = vec![0usize; max_k + 1];
    for r in &results {
        kappa_histogram[r.1.len()] += 1;
    }
    let cap_reached = results.iter().filter(|r| r.2).count();
    if cap_reached > 0 {
        log::warn!("impulse cap reached on {cap_reached} paths");
    }
    Ok(PolicyEvaluation {
        cost: CostEstimate::from_costs(&costs, seed),
        kappa_histogram,
        cap_reached,
        events: results.into_iter().map(|r| r.1).collect(),
    })
}

/// Sup-moment estimates of the distance between two paths on common noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityEstimate {
    pub p2: Estimate,
    pub p4: Estimate,
}

/// Estimates `E sup_k |X_k − X'_k|^p` for p ∈ {2, 4} with common noise.
#[allow(clippy::too_many_arguments)]
pub fn continuity_probe(
    spec: &ProblemSpec,
    control: &ImpulseControl,
    x0: &[f64],
    x0p: &[f64],
    tau0: f64,
    tau0p: f64,
    paths: usize,
    base_steps: usize,
    seed: u64,
) -> Result<ContinuityEstimate> {
    let grid = make_time_grid(control.start_time, spec.horizon, control, base_steps)?;
    let mut spec_a = spec.clone();
    spec_a.tau0 = tau0;
    let mut spec_b = spec.clone();
    spec_b.tau0 = tau0p;
    let sups = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let noise = BrownianGrid::sample(&grid, seed, p);
            let a = simulate_state(&spec_a, control, x0, &grid, &noise)?;
            let b = simulate_state(&spec_b, control, x0p, &grid, &noise)?;
            let mut sup = 0.0_f64;
            for k in 0..grid.nodes.len() {
                for (pa, pb) in [(a.pre_at(k), b.pre_at(k)), (a.post_at(k), b.post_at(k))] {
                    let d = pa
                        .iter()
                        .zip(pb)
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum::<f64>()
                        .sqrt();
                    sup = sup.max(d);
                }
            }
            Ok(sup)
        })
        .collect::<Result<Vec<f64>>>()?;
    let p2: Vec<f64> = sups.iter().map(|s| s.powi(2)).collect();
    let p4: Vec<f64> = sups.iter().map(|s| s.powi(4)).collect();
    Ok(ContinuityEstimate {
        p2: Estimate::from_samples(&p2),
        p4: Estimate::from_samples(&p4),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{normalize_control, CoefficientFamily, ConeSpec};
    use proptest::prelude::*;

    fn spec(b: f64, s: f64, semantics: Semantics) -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            horizon: 1.0,
            tau0: 0.0,
            drift: CoefficientFamily::constant(b),
            diffusion: CoefficientFamily::constant(s),
            running_cost: CoefficientFamily::constant(0.0),
            terminal_cost: CoefficientFamily::trig(1.0, 1.0, 1.0, 0.0),
            impulse_cost: CoefficientFamily::affine(3.0, 3.0),
            ell0: 3.0,
            mu: 1.0,
            cone: ConeSpec::half_line(),
            semantics,
            max_impulses: 20,
        }
    }

    fn control(raw: &[(f64, f64)]) -> ImpulseControl {
        let raw: Vec<(f64, Vec<f64>)> = raw.iter().map(|(t, x)| (*t, vec![*x])).collect();
        normalize_control(&raw, 0.0, 1.0, &ConeSpec::half_line()).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = make_time_grid(0.0, 1.0, &control(&[]), 4).unwrap();
        assert_eq!(g.nodes, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = make_time_grid(0.0, 1.0, &control(&[(0.3, 1.0)]), 4).unwrap();
        assert_eq!(g.nodes, vec![0.0, 0.25, 0.3, 0.5, 0.75, 1.0]);
        let g = make_time_grid(0.0, 1.0, &control(&[(0.25, 1.0)]), 4).unwrap();
        assert_eq!(g.nodes, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let bad = ImpulseControl {
            start_time: 0.0,
            impulses: vec![crate::model::Impulse {
                time: 1.5,
                size: vec![1.0],
            }],
        };
        assert!(make_time_grid(0.0, 1.0, &bad, 4).is_err());
    }

    #[test]
    fn constant_path_without_noise() {
        let s = spec(0.0, 0.0, Semantics::Stacking);
        let u = control(&[]);
        let g = make_time_grid(0.0, 1.0, &u, 16).unwrap();
        let tr = simulate_state(&s, &u, &[0.7], &g, &BrownianGrid::sample(&g, 1, 0)).unwrap();
        assert!(tr.post.iter().all(|v| *v == 0.7));
    }

    #[test]
    fn pure_jump_path() {
        let s = spec(0.0, 0.0, Semantics::Stacking);
        let u = control(&[(0.5, 2.0)]);
        let g = make_time_grid(0.0, 1.0, &u, 16).unwrap();
        let tr = simulate_state(&s, &u, &[1.0], &g, &BrownianGrid::sample(&g, 1, 0)).unwrap();
        for (k, t) in g.nodes.iter().enumerate() {
            let want = if *t < 0.5 { 1.0 } else { 3.0 };
            assert_eq!(tr.post_at(k)[0], want);
        }
        let k = g.index_of(0.5).unwrap();
        assert_eq!(tr.pre_at(k)[0], 1.0);
    }

    #[test]
    fn stacked_drift_adds_second_copy() {
        let s = spec(1.0, 0.0, Semantics::Stacking);
        let u = control(&[(0.5, 0.0)]);
        let g = make_time_grid(0.0, 1.0, &u, 16).unwrap();
        let tr = simulate_state(&s, &u, &[0.0], &g, &BrownianGrid::sample(&g, 1, 0)).unwrap();
        assert!((tr.post_at(g.steps())[0] - 1.5).abs() < 1e-12);
        assert_eq!(tr.active_set(g.steps(), &s, &u), vec![0.0, 0.5]);
        let f = spec(1.0, 0.0, Semantics::Frozen);
        let tr = simulate_state(&f, &u, &[0.0], &g, &BrownianGrid::sample(&g, 1, 0)).unwrap();
        assert!((tr.post_at(g.steps())[0] - 1.0).abs() < 1e-12);
        assert!(tr.active_count.iter().all(|c| *c == 1));
    }

    #[test]
    fn deterministic_cost_is_exact() {
        let s = spec(0.0, 0.0, Semantics::Stacking);
        let e = estimate_cost(&s, &control(&[]), &[0.0], 100, 16, 3).unwrap();
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.stderr, 0.0);
        let e = estimate_cost(
            &s,
            &control(&[(0.5, std::f64::consts::PI)]),
            &[0.0],
            100,
            16,
            3,
        )
        .unwrap();
        assert!((e.mean - 3.0 * (1.0 + std::f64::consts::PI)).abs() < 1e-12);
        assert!((e.mean - 12.4248).abs() < 1e-4);
    }

    #[test]
    fn brownian_terminal_cost_matches_gaussian_expectation() {
        let s = spec(0.0, 1.0, Semantics::Stacking);
        let e = estimate_cost(&s, &control(&[]), &[0.0], 100_000, 16, 5).unwrap();
        let want = 1.0 + (-0.5f64).exp();
        assert!((e.mean - want).abs() <= 3.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn empty_policy_matches_empty_control() {
        let s = spec(0.2, 0.5, Semantics::Stacking);
        let a = estimate_cost(&s, &control(&[]), &[0.1], 200, 32, 8).unwrap();
        let b = evaluate_policy(&s, &NoIntervention, &[0.1], 200, 32, 8).unwrap();
        assert_eq!(a, b.cost);
        assert_eq!(b.kappa_histogram, vec![200]);
    }

    #[test]
    fn continuity_probe_trivial_cases() {
        let mut s = spec(0.2, 0.5, Semantics::Stacking);
        s.drift = CoefficientFamily::affine(0.1, -0.5);
        let u = control(&[(0.4, 1.0)]);
        let same = continuity_probe(&s, &u, &[0.0], &[0.0], 0.0, 0.0, 200, 32, 2).unwrap();
        assert_eq!(same.p2.mean, 0.0);
        let tau = continuity_probe(&s, &u, &[0.0], &[0.0], 0.0, 0.3, 200, 32, 2).unwrap();
        assert_eq!(tau.p4.mean, 0.0);
        let mut prev = 0.0;
        for d in [0.0, 0.05, 0.1, 0.2] {
            let e = continuity_probe(&s, &u, &[0.0], &[d], 0.0, 0.0, 500, 32, 2).unwrap();
            assert!(e.p2.mean >= prev);
            prev = e.p2.mean;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut s = spec(0.0, 0.0, Semantics::Stacking);
        s.drift = CoefficientFamily::affine(0.0, 1e4);
        let u = control(&[]);
        let g = make_time_grid(0.0, 1.0, &u, 16).unwrap();
        let e = simulate_state(&s, &u, &[1.0], &g, &BrownianGrid::sample(&g, 1, 0)).unwrap_err();
        assert!(e.to_string().contains("divergence"));
    }

    proptest! {
        #[test]
        fn jumps_are_exact_and_semantics_agree_without_impulses(
            t1 in 0.05f64..0.45, t2 in 0.55f64..0.95, a in 0.0f64..3.0, b in 0.0f64..3.0, seed in 0u64..1000,
        ) {
            let mut s = spec(0.3, 0.4, Semantics::Stacking);
            s.drift = CoefficientFamily::affine(0.3, -0.2);
            let u = control(&[(t1, a), (t2, b)]);
            let g = make_time_grid(0.0, 1.0, &u, 32).unwrap();
            let noise = BrownianGrid::sample(&g, seed, 0);
            let tr = simulate_state(&s, &u, &[0.5], &g, &noise).unwrap();
            for (imp, k) in u.impulses.iter().zip(impulse_nodes(&g, &u).unwrap()) {
                prop_assert_eq!(tr.post_at(k)[0], tr.pre_at(k)[0] + imp.size[0]);
            }
            for w in tr.active_count.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            let empty = control(&[]);
            let g0 = make_time_grid(0.0, 1.0, &empty, 32).unwrap();
            let n0 = BrownianGrid::sample(&g0, seed, 0);
            let stack = simulate_state(&s, &empty, &[0.5], &g0, &n0).unwrap();
            let mut f = s.clone();
            f.semantics = Semantics::Frozen;
            let frozen = simulate_state(&f, &empty, &[0.5], &g0, &n0).unwrap();
            prop_assert_eq!(stack.post, frozen.post);
        }
    }
}
