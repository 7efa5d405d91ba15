//! Problem data: coefficient registry, impulse cone, problem spec, impulse
//! controls and sampled assumption checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::path_rng;

/// Tolerance for exact inequalities in sampled checks.
pub const CHECK_TOL: f64 = 1e-9;
/// Finite-difference step for derivative cross-checks.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for derivative cross-checks.
pub const FD_REL_TOL: f64 = 1e-4;

/// Functional form of the state dependence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    /// `p0`
    Constant,
    /// `p0 + p1 x`
    Affine,
    /// `(p0 + p1 x + p2 x^2) / (1 + x^2)`
    BoundedRational,
    /// `p0 + p1 cos(p2 x) + p3 sin(p2 x)`
    BoundedTrig,
}

/// Multiplicative dependence on the activation parameter τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TauForm {
    /// `1`
    #[default]
    None,
    /// `a + c τ`
    Affine,
    /// `a + c cos(w τ)`
    BoundedTrig,
}

/// Separable coefficient `m(τ) k(x)`, independent of t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFamily {
    pub kind: FamilyKind,
    pub params: Vec<f64>,
    #[serde(default)]
    pub tau: TauForm,
    #[serde(default)]
    pub tau_params: Vec<f64>,
}

impl CoefficientFamily {
    pub fn constant(c: f64) -> Self {
        Self::new(FamilyKind::Constant, vec![c])
    }

    pub fn affine(a: f64, b: f64) -> Self {
        Self::new(FamilyKind::Affine, vec![a, b])
    }

    pub fn rational(p0: f64, p1: f64, p2: f64) -> Self {
        Self::new(FamilyKind::BoundedRational, vec![p0, p1, p2])
    }

    pub fn trig(a: f64, b: f64, w: f64, c: f64) -> Self {
        Self::new(FamilyKind::BoundedTrig, vec![a, b, w, c])
    }

    fn new(kind: FamilyKind, params: Vec<f64>) -> Self {
        CoefficientFamily {
            kind,
            params,
            tau: TauForm::None,
            tau_params: vec![],
        }
    }

    pub fn with_tau_affine(mut self, a: f64, c: f64) -> Self {
        self.tau = TauForm::Affine;
        self.tau_params = vec![a, c];
        self
    }

    pub fn with_tau_trig(mut self, a: f64, c: f64, w: f64) -> Self {
        self.tau = TauForm::BoundedTrig;
        self.tau_params = vec![a, c, w];
        self
    }

    /// Multiplies the state part by `k`; exact for powers of two.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        match self.kind {
            FamilyKind::BoundedTrig => {
                out.params[0] *= k;
                out.params[1] *= k;
                out.params[3] *= k;
            }
            _ => out.params.iter_mut().for_each(|p| *p *= k),
        }
        out
    }

    /// Checks parameter counts and finiteness.
    pub fn check(&self, name: &str) -> Result<()> {
        let want = match self.kind {
            FamilyKind::Constant => 1,
            FamilyKind::Affine => 2,
            FamilyKind::BoundedRational => 3,
            FamilyKind::BoundedTrig => 4,
        };
        if self.params.len() != want {
            return Err(invalid(
                name,
                format!("{:?} needs {want} params", self.kind),
            ));
        }
        let want_tau = match self.tau {
            TauForm::None => 0,
            TauForm::Affine => 2,
            TauForm::BoundedTrig => 3,
        };
        if self.tau_params.len() != want_tau {
            return Err(invalid(
                name,
                format!("tau form {:?} needs {want_tau} params", self.tau),
            ));
        }
        if self
            .params
            .iter()
            .chain(&self.tau_params)
            .any(|p| !p.is_finite())
        {
            return Err(invalid(name, "non-finite parameter"));
        }
        Ok(())
    }

    /// True when the τ factor is identically one.
    pub fn tau_independent(&self) -> bool {
        self.tau == TauForm::None
    }

    fn m(&self, tau: f64) -> f64 {
        let q = &self.tau_params;
        match self.tau {
            TauForm::None => 1.0,
            TauForm::Affine => q[0] + q[1] * tau,
            TauForm::BoundedTrig => q[0] + q[1] * (q[2] * tau).cos(),
        }
    }

    fn m_tau(&self, tau: f64) -> f64 {
        let q = &self.tau_params;
        match self.tau {
            TauForm::None => 0.0,
            TauForm::Affine => q[1],
            TauForm::BoundedTrig => -q[1] * q[2] * (q[2] * tau).sin(),
        }
    }

    fn k(&self, x: f64) -> f64 {
        let p = &self.params;
        match self.kind {
            FamilyKind::Constant => p[0],
            FamilyKind::Affine => p[0] + p[1] * x,
            FamilyKind::BoundedRational => (p[0] + p[1] * x + p[2] * x * x) / (1.0 + x * x),
            FamilyKind::BoundedTrig => p[0] + p[1] * (p[2] * x).cos() + p[3] * (p[2] * x).sin(),
        }
    }

    fn k_x(&self, x: f64) -> f64 {
        let p = &self.params;
        match self.kind {
            FamilyKind::Constant => 0.0,
            FamilyKind::Affine => p[1],
            FamilyKind::BoundedRational => {
                let n = p[0] + p[1] * x + p[2] * x * x;
                let d = 1.0 + x * x;
                ((p[1] + 2.0 * p[2] * x) * d - n * 2.0 * x) / (d * d)
            }
            FamilyKind::BoundedTrig => p[2] * (-p[1] * (p[2] * x).sin() + p[3] * (p[2] * x).cos()),
        }
    }

    fn k_xx(&self, x: f64) -> f64 {
        let p = &self.params;
        match self.kind {
            FamilyKind::Constant | FamilyKind::Affine => 0.0,
            FamilyKind::BoundedRational => {
                let n = p[0] + p[1] * x + p[2] * x * x;
                let n1 = p[1] + 2.0 * p[2] * x;
                let n2 = 2.0 * p[2];
                let d = 1.0 + x * x;
                let d1 = 2.0 * x;
                (n2 * d - n * 2.0) / (d * d) - 2.0 * d1 * (n1 * d - n * d1) / (d * d * d)
            }
            FamilyKind::BoundedTrig => {
                -p[2] * p[2] * (p[1] * (p[2] * x).cos() + p[3] * (p[2] * x).sin())
            }
        }
    }

    /// Value at `(τ, x)`.
    pub fn value(&self, tau: f64, x: f64) -> f64 {
        self.m(tau) * self.k(x)
    }

    /// First derivative in x.
    pub fn d_x(&self, tau: f64, x: f64) -> f64 {
        self.m(tau) * self.k_x(x)
    }

    /// Second derivative in x.
    pub fn d_xx(&self, tau: f64, x: f64) -> f64 {
        self.m(tau) * self.k_xx(x)
    }

    /// Derivative in τ.
    pub fn d_tau(&self, tau: f64, x: f64) -> f64 {
        self.m_tau(tau) * self.k(x)
    }

    /// Mixed derivative in τ and x.
    pub fn d_tau_x(&self, tau: f64, x: f64) -> f64 {
        self.m_tau(tau) * self.k_x(x)
    }

    /// Central finite-difference check of the closed-form derivatives.
    pub fn check_derivatives(&self, name: &str, tau: f64, x: f64) -> Result<()> {
        let h = FD_STEP;
        let fd_x = (self.value(tau, x + h) - self.value(tau, x - h)) / (2.0 * h);
        let fd_xx =
            (self.value(tau, x + h) - 2.0 * self.value(tau, x) + self.value(tau, x - h)) / (h * h);
        let fd_tau = (self.value(tau + h, x) - self.value(tau - h, x)) / (2.0 * h);
        let checks = [
            ("d_x", self.d_x(tau, x), fd_x),
            ("d_xx", self.d_xx(tau, x), fd_xx),
            ("d_tau", self.d_tau(tau, x), fd_tau),
        ];
        for (label, cf, fd) in checks {
            if !cf.is_finite() || !fd.is_finite() || (cf - fd).abs() > FD_REL_TOL * (1.0 + cf.abs())
            {
                return Err(Error::DerivativeInconsistency {
                    family: name.to_string(),
                    detail: format!(
                        "{label} closed form {cf} vs finite difference {fd} at tau={tau}, x={x}"
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Closed convex cone given by unit generator rays, truncated at `size_cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub generators: Vec<Vec<f64>>,
    #[serde(default = "default_size_cap")]
    pub size_cap: f64,
}

fn default_size_cap() -> f64 {
    5.0
}

impl ConeSpec {
    /// The half-line `[0, ∞)` in one dimension.
    pub fn half_line() -> Self {
        ConeSpec {
            generators: vec![vec![1.0]],
            size_cap: default_size_cap(),
        }
    }

    /// The nonnegative orthant of ℝⁿ.
    pub fn orthant(n: usize) -> Self {
        let generators = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        ConeSpec {
            generators,
            size_cap: default_size_cap(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.generators.first().map_or(0, |g| g.len())
    }

    /// Checks unit norms, consistent dimensions and that no line is contained.
    pub fn check(&self) -> Result<()> {
        let n = self.dimension();
        if self.generators.is_empty() || n == 0 {
            return Err(invalid("cone.generators", "must be nonempty"));
        }
        if !(self.size_cap > 0.0 && self.size_cap.is_finite()) {
            return Err(invalid("cone.size_cap", "must be positive and finite"));
        }
        for g in &self.generators {
            if g.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: g.len(),
                });
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > CHECK_TOL {
                return Err(invalid(
                    "cone.generators",
                    "each generator must have unit norm",
                ));
            }
        }
        for g in &self.generators {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            if cone_contains(self, &neg)? {
                return Err(invalid(
                    "cone.generators",
                    "the cone contains a line; a proper cone is required",
                ));
            }
        }
        Ok(())
    }
}

/// Membership test by nonnegative least squares over generator subsets.
pub fn cone_contains(cone: &ConeSpec, v: &[f64]) -> Result<bool> {
    let n = cone.dimension();
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: v.len(),
        });
    }
    let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vnorm <= CHECK_TOL {
        return Ok(true);
    }
    let m = cone.generators.len();
    let target = DVector::from_column_slice(v);
    let mut best = vnorm;
    for mask in 1u32..(1u32 << m) {
        let cols: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
        let a = DMatrix::from_fn(n, cols.len(), |r, c| cone.generators[cols[c]][r]);
        let svd = a.clone().svd(true, true);
        let Ok(coef) = svd.solve(&target, 1e-12) else {
            continue;
        };
        if coef.iter().any(|c| *c < -CHECK_TOL) {
            continue;
        }
        let resid = (&a * coef - &target).norm();
        best = best.min(resid);
    }
    Ok(best <= CHECK_TOL * (1.0 + vnorm))
}

/// Lattice of nonnegative generator combinations with per-ray magnitudes
/// `{0, R/(per_ray-1), ..., R}`; the first generator varies fastest.
pub fn cone_grid(cone: &ConeSpec, per_ray: usize) -> Result<Vec<Vec<f64>>> {
    if per_ray < 2 {
        return Err(invalid("per_ray", "must be at least 2"));
    }
    let n = cone.dimension();
    let m = cone.generators.len();
    let step = cone.size_cap / (per_ray - 1) as f64;
    let total = per_ray.pow(m as u32);
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut v = vec![0.0; n];
        for g in &cone.generators {
            let k = rem % per_ray;
            rem /= per_ray;
            let mag = if k == per_ray - 1 {
                cone.size_cap
            } else {
                k as f64 * step
            };
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi += mag * gi;
            }
        }
        out.push(v);
    }
    Ok(out)
}

/// Coefficient activation semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Semantics {
    /// Every impulse activates new drift, diffusion and running-cost copies.
    #[default]
    Stacking,
    /// Coefficients stay at τ₀; impulses only shift the state.
    Frozen,
}

/// Full problem data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub dim: usize,
    pub horizon: f64,
    pub tau0: f64,
    pub drift: CoefficientFamily,
    pub diffusion: CoefficientFamily,
    pub running_cost: CoefficientFamily,
    pub terminal_cost: CoefficientFamily,
    pub impulse_cost: CoefficientFamily,
    pub ell0: f64,
    pub mu: f64,
    pub cone: ConeSpec,
    #[serde(default)]
    pub semantics: Semantics,
    #[serde(default = "default_max_impulses")]
    pub max_impulses: usize,
}

fn default_max_impulses() -> usize {
    20
}

impl ProblemSpec {
    /// Structural checks that do not require sampling.
    pub fn check(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(invalid("dim", "state dimension must be 1, 2 or 3"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon", "must be positive"));
        }
        if !(0.0..=self.horizon).contains(&self.tau0) {
            return Err(invalid("tau0", "must lie in [0, T]"));
        }
        if !(self.ell0 > 0.0) {
            return Err(invalid("ell0", "must be positive"));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(invalid("mu", "must lie in (0, 1]"));
        }
        for (name, f) in self.families() {
            f.check(name)?;
        }
        if !self.terminal_cost.tau_independent() {
            return Err(invalid(
                "terminal_cost",
                "the terminal cost cannot depend on tau",
            ));
        }
        self.cone.check()?;
        if self.cone.dimension() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: self.cone.dimension(),
            });
        }
        Ok(())
    }

    /// Named coefficient families.
    pub fn families(&self) -> [(&'static str, &CoefficientFamily); 5] {
        [
            ("drift", &self.drift),
            ("diffusion", &self.diffusion),
            ("running_cost", &self.running_cost),
            ("terminal_cost", &self.terminal_cost),
            ("impulse_cost", &self.impulse_cost),
        ]
    }

    /// True when no family depends on τ.
    pub fn tau_independent(&self) -> bool {
        self.families().iter().all(|(_, f)| f.tau_independent())
    }

    /// Running cost summed over state components.
    pub fn running(&self, tau: f64, x: &[f64]) -> f64 {
        x.iter().map(|xi| self.running_cost.value(tau, *xi)).sum()
    }

    /// Terminal cost summed over state components.
    pub fn terminal(&self, x: &[f64]) -> f64 {
        x.iter().map(|xi| self.terminal_cost.value(0.0, *xi)).sum()
    }

    /// Impulse cost evaluated on the Euclidean size.
    pub fn impulse(&self, tau: f64, xi: &[f64]) -> f64 {
        self.impulse_cost.value(tau, norm(xi))
    }

    /// Lower bound ℓ₀ + ℓ₀|ξ|^μ required of the impulse cost.
    pub fn impulse_floor(&self, xi: &[f64]) -> f64 {
        self.ell0 + self.ell0 * norm(xi).powf(self.mu)
    }

    /// Derivative of ℓ in τ.
    pub fn impulse_tau(&self, tau: f64, xi: &[f64]) -> f64 {
        self.impulse_cost.d_tau(tau, norm(xi))
    }

    /// Gradient of ℓ in ξ (zero direction at the origin).
    pub fn impulse_grad(&self, tau: f64, xi: &[f64]) -> Vec<f64> {
        let r = norm(xi);
        if r == 0.0 {
            return vec![0.0; xi.len()];
        }
        let d = self.impulse_cost.d_x(tau, r);
        xi.iter().map(|v| d * v / r).collect()
    }

    /// Spec with running, terminal and impulse costs multiplied by `k`.
    pub fn with_costs_scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.running_cost = self.running_cost.scaled(k);
        out.terminal_cost = self.terminal_cost.scaled(k);
        out.impulse_cost = self.impulse_cost.scaled(k);
        out.ell0 *= k;
        out
    }

    /// Spec with the impulse cost multiplied by `k`.
    pub fn with_impulse_cost_scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.impulse_cost = self.impulse_cost.scaled(k);
        out.ell0 *= k;
        out
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One impulse `(τ_j, ξ_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impulse {
    pub time: f64,
    pub size: Vec<f64>,
}

/// Ordered impulse sequence started at `start_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseControl {
    pub start_time: f64,
    pub impulses: Vec<Impulse>,
}

impl ImpulseControl {
    pub fn empty(start_time: f64) -> Self {
        ImpulseControl {
            start_time,
            impulses: vec![],
        }
    }

    /// Number of impulses κ.
    pub fn count(&self) -> usize {
        self.impulses.len()
    }

    /// Checks κ against the configured bound.
    pub fn check_bound(&self, bound: usize) -> Result<()> {
        if self.count() > bound {
            return Err(Error::TooManyImpulses {
                count: self.count(),
                bound,
            });
        }
        Ok(())
    }
}

/// Sorts impulses and rejects duplicates, out-of-range times and sizes
/// outside the cone.
pub fn normalize_control(
    raw: &[(f64, Vec<f64>)],
    t: f64,
    horizon: f64,
    cone: &ConeSpec,
) -> Result<ImpulseControl> {
    let mut items: Vec<(f64, Vec<f64>)> = raw.to_vec();
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    for pair in items.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::SimultaneousImpulses { time: pair[0].0 });
        }
    }
    let mut impulses = Vec::with_capacity(items.len());
    for (index, (time, size)) in items.into_iter().enumerate() {
        if !(time >= t && time <= horizon) {
            return Err(Error::TimeOutOfRange {
                time,
                start: t,
                end: horizon,
            });
        }
        if !cone_contains(cone, &size)? {
            return Err(Error::ConeViolation { index });
        }
        impulses.push(Impulse { time, size });
    }
    Ok(ImpulseControl {
        start_time: t,
        impulses,
    })
}

/// Pass/fail flag per sampled assumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AssumptionFlags {
    /// Drift and diffusion are Lipschitz with linear growth.
    pub h1_lipschitz: bool,
    /// τ-variations shrink with the probe gap.
    pub h1_tau_modulus: bool,
    /// g, h, ℓ nonnegative and g, h bounded.
    pub h2_range: bool,
    /// ℓ(τ, ξ) ≥ ℓ₀(1 + |ξ|^μ).
    pub h2_lower_bound: bool,
    /// τ ↦ ℓ(τ, ξ) non-increasing.
    pub h2_monotone: bool,
    /// Strict subadditivity of ℓ in ξ.
    pub h2_subadditive: bool,
    /// Bounded second derivatives of b, σ and lower curvature bounds of g, h.
    pub h3_curvature: bool,
    /// Closed-form derivatives agree with finite differences.
    pub h4_differentiable: bool,
}

impl AssumptionFlags {
    pub fn all(&self) -> bool {
        self.h1_lipschitz
            && self.h1_tau_modulus
            && self.h2_range
            && self.h2_lower_bound
            && self.h2_monotone
            && self.h2_subadditive
            && self.h3_curvature
            && self.h4_differentiable
    }
}

/// Outcome of [`validate_problem`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub flags: AssumptionFlags,
    pub all_pass: bool,
    /// Empirical Lipschitz constant of b and σ in x.
    pub lipschitz_estimate: f64,
    /// Empirical τ-modulus `(δ, ω̂(δ))`.
    pub tau_modulus: Vec<(f64, f64)>,
    /// Minimum of ℓ(τ,ξ) + ℓ(τ,ξ') − ℓ(τ,ξ+ξ') over sampled pairs.
    pub subadditivity_margin: f64,
    /// Largest sampled |b_xx|, |σ_xx|.
    pub curvature_bound: f64,
    /// Curvature constant max(0, ½ sup g_xx, ½ sup h_xx) over samples, the
    /// smallest K with λf(x)+(1−λ)f(x')−f(x_λ) ≤ Kλ(1−λ)|x−x'|².
    pub semiconvexity_constant: f64,
    pub sample_count: usize,
    pub seed: u64,
    /// Descriptions of failed checks.
    pub violations: Vec<String>,
}

impl AssumptionReport {
    /// Empirical modulus at gap `delta`, linearly interpolated between probes.
    pub fn modulus_at(&self, delta: f64) -> f64 {
        let mut best = 0.0_f64;
        for (d, w) in &self.tau_modulus {
            if *d <= delta * (1.0 + 1e-12) {
                best = best.max(*w);
            } else {
                best = best.max(w * delta / d);
            }
        }
        best
    }
}

const PROBE_GAPS: [f64; 3] = [0.1, 0.01, 0.001];
const X_RANGE: f64 = 10.0;
const X_FAR: f64 = 1e6;

fn finite_or_err(v: f64, family: &str, tau: f64, x: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidCoefficient {
            family: family.to_string(),
            point: format!("(tau={tau}, x={x})"),
        })
    }
}

/// Samples (H1)–(H4) and reports empirical constants.
pub fn validate_problem(
    spec: &ProblemSpec,
    sample_count: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if sample_count < 100 {
        return Err(invalid("sample_count", "must be at least 100"));
    }
    spec.check()?;
    let big_t = spec.horizon;
    let mut rng = path_rng(seed, 0);
    let mut violations = Vec::new();
    let taus: Vec<f64> = (0..sample_count)
        .map(|_| rng.random::<f64>() * big_t)
        .collect();
    let mut xs: Vec<f64> = (0..sample_count)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * X_RANGE)
        .collect();
    xs[0] = 0.0;
    let far = [X_FAR, -X_FAR];

    for (name, f) in spec.families() {
        for (&tau, &x) in taus.iter().zip(&xs) {
            finite_or_err(f.value(tau, x), name, tau, x)?;
        }
        for &x in &far {
            finite_or_err(f.value(0.0, x), name, 0.0, x)?;
            finite_or_err(f.value(big_t, x), name, big_t, x)?;
        }
    }

    // H1: Lipschitz constant and linear growth of b and σ.
    let mut lip = 0.0_f64;
    let mut growth_ok = true;
    for (name, f) in [("drift", &spec.drift), ("diffusion", &spec.diffusion)] {
        for i in 0..sample_count {
            let j = (i * 7 + 3) % sample_count;
            let (x, y) = (xs[i], xs[j]);
            if (x - y).abs() > 1e-6 {
                let tau = taus[i];
                lip = lip.max((f.value(tau, x) - f.value(tau, y)).abs() / (x - y).abs());
            }
        }
        for &x in &far {
            for tau in [0.0, big_t] {
                let bound = lip * x.abs() + f.value(tau, 0.0).abs() + CHECK_TOL * (1.0 + x.abs());
                if f.value(tau, x).abs() > bound {
                    growth_ok = false;
                    violations.push(format!("{name}: superlinear growth at x={x}"));
                }
            }
        }
    }

    // H1: τ-modulus over all families.
    let mut tau_modulus = Vec::new();
    for &delta in &PROBE_GAPS {
        let mut w = 0.0_f64;
        for (&tau, &x) in taus.iter().zip(&xs) {
            let lo = tau.min(big_t - delta).max(0.0);
            for (_, f) in spec.families() {
                w = w.max((f.value(lo + delta, x) - f.value(lo, x)).abs());
            }
        }
        tau_modulus.push((delta, w));
    }
    let modulus_ok = tau_modulus.iter().all(|(_, w)| w.is_finite())
        && tau_modulus.last().unwrap().1 <= tau_modulus[0].1 + CHECK_TOL;
    if !modulus_ok {
        violations.push("tau modulus does not shrink with the gap".into());
    }

    // H2: range and boundedness of g, h, ℓ.
    let mut range_ok = true;
    for (name, f) in [
        ("running_cost", &spec.running_cost),
        ("terminal_cost", &spec.terminal_cost),
    ] {
        let mut sup_near = 0.0_f64;
        for (&tau, &x) in taus.iter().zip(&xs) {
            let v = f.value(tau, x);
            sup_near = sup_near.max(v.abs());
            if v < -CHECK_TOL {
                range_ok = false;
                violations.push(format!("{name} negative at (tau={tau}, x={x})"));
                break;
            }
        }
        for &x in &far {
            let v = f.value(0.0, x);
            if v < -CHECK_TOL || v.abs() > 10.0 * (1.0 + sup_near) {
                range_ok = false;
                violations.push(format!("{name} unbounded or negative at x={x}"));
            }
        }
    }

    // Impulse sizes: lattice points plus random cone members.
    let n = spec.dim;
    let mut sizes = cone_grid(&spec.cone, 5)?;
    for _ in 0..sample_count {
        let mut v = vec![0.0; n];
        for g in &spec.cone.generators {
            let a = rng.random::<f64>() * spec.cone.size_cap;
            v.iter_mut().zip(g).for_each(|(vi, gi)| *vi += a * gi);
        }
        sizes.push(v);
    }
    let mut lower_ok = true;
    let mut mono_ok = true;
    let mut margin = f64::INFINITY;
    for (k, xi) in sizes.iter().enumerate() {
        let tau = taus[k % sample_count];
        let l = spec.impulse(tau, xi);
        if l < -CHECK_TOL {
            range_ok = false;
            violations.push(format!("impulse_cost negative at tau={tau}"));
        }
        let floor = spec.impulse_floor(xi);
        if l < floor - CHECK_TOL {
            if lower_ok {
                violations.push(format!(
                    "impulse_cost below ell0 bound at |xi|={}",
                    norm(xi)
                ));
            }
            lower_ok = false;
        }
        let tau2 = taus[(k + 1) % sample_count];
        let (a, b) = if tau <= tau2 {
            (tau, tau2)
        } else {
            (tau2, tau)
        };
        if spec.impulse(b, xi) > spec.impulse(a, xi) + CHECK_TOL {
            if mono_ok {
                violations.push(format!(
                    "impulse_cost increasing in tau between {a} and {b}"
                ));
            }
            mono_ok = false;
        }
        let other = &sizes[(k * 13 + 5) % sizes.len()];
        for pair in [other, xi] {
            let sum: Vec<f64> = xi.iter().zip(pair).map(|(p, q)| p + q).collect();
            let m = spec.impulse(tau, xi) + spec.impulse(tau, pair) - spec.impulse(tau, &sum);
            margin = margin.min(m);
        }
    }
    let subadd_ok = margin > CHECK_TOL;
    if !subadd_ok {
        violations.push(format!(
            "impulse_cost not strictly subadditive (margin {margin})"
        ));
    }

    // H3: curvature bounds; H4: derivative consistency.
    let mut curvature = 0.0_f64;
    let mut semiconvex = 0.0_f64;
    let mut h3_ok = true;
    let mut h4_ok = true;
    for (&tau, &x) in taus.iter().zip(&xs) {
        curvature = curvature
            .max(spec.drift.d_xx(tau, x).abs())
            .max(spec.diffusion.d_xx(tau, x).abs());
        semiconvex = semiconvex
            .max(0.5 * spec.running_cost.d_xx(tau, x))
            .max(0.5 * spec.terminal_cost.d_xx(tau, x));
        let tau_fd = tau.clamp(2.0 * FD_STEP, (big_t - 2.0 * FD_STEP).max(2.0 * FD_STEP));
        for (name, f) in spec.families() {
            if let Err(e) = f.check_derivatives(name, tau_fd, x) {
                if h4_ok {
                    violations.push(e.to_string());
                }
                h4_ok = false;
            }
        }
    }
    if !curvature.is_finite() || !semiconvex.is_finite() {
        h3_ok = false;
        violations.push("non-finite curvature".into());
    }

    let flags = AssumptionFlags {
        h1_lipschitz: growth_ok && lip.is_finite(),
        h1_tau_modulus: modulus_ok,
        h2_range: range_ok,
        h2_lower_bound: lower_ok,
        h2_monotone: mono_ok,
        h2_subadditive: subadd_ok,
        h3_curvature: h3_ok,
        h4_differentiable: h4_ok,
    };
    Ok(AssumptionReport {
        all_pass: flags.all(),
        flags,
        lipschitz_estimate: lip,
        tau_modulus,
        subadditivity_margin: margin,
        curvature_bound: curvature,
        semiconvexity_constant: semiconvex.max(0.0),
        sample_count,
        seed,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base_spec() -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            horizon: 1.0,
            tau0: 0.0,
            drift: CoefficientFamily::constant(0.0),
            diffusion: CoefficientFamily::constant(1.0),
            running_cost: CoefficientFamily::constant(0.0),
            terminal_cost: CoefficientFamily::trig(1.0, 1.0, 1.0, 0.0),
            impulse_cost: CoefficientFamily::affine(3.0, 3.0),
            ell0: 3.0,
            mu: 1.0,
            cone: ConeSpec::half_line(),
            semantics: Semantics::Frozen,
            max_impulses: 20,
        }
    }

    #[test]
    fn heat_kernel_data_passes_with_margin_three() {
        let r = validate_problem(&base_spec(), 500, 1).unwrap();
        assert!(r.all_pass, "{:?}", r.violations);
        assert!((r.subadditivity_margin - 3.0).abs() < 1e-12);
    }

    #[test]
    fn absolute_value_cost_fails_lower_bound() {
        let mut s = base_spec();
        s.impulse_cost = CoefficientFamily::affine(0.0, 1.0);
        let r = validate_problem(&s, 200, 1).unwrap();
        assert!(!r.flags.h2_lower_bound);
    }

    #[test]
    fn increasing_cost_fails_monotonicity() {
        let mut s = base_spec();
        s.impulse_cost = CoefficientFamily::affine(1.0, 1.0).with_tau_affine(0.1, 0.02);
        s.ell0 = 0.1;
        let r = validate_problem(&s, 200, 1).unwrap();
        assert!(!r.flags.h2_monotone);
        assert!(r.flags.h2_lower_bound);
    }

    #[test]
    fn non_finite_parameter_is_rejected() {
        let mut s = base_spec();
        s.drift = CoefficientFamily::constant(f64::NAN);
        assert!(validate_problem(&s, 200, 1).is_err());
    }

    #[test]
    fn non_finite_evaluation_names_family() {
        let mut s = base_spec();
        s.running_cost = CoefficientFamily::affine(1e308, 1e308);
        let e = validate_problem(&s, 200, 1).unwrap_err().to_string();
        assert!(
            e.contains("invalid coefficient") && e.contains("running_cost"),
            "{e}"
        );
    }

    #[test]
    fn validation_is_deterministic() {
        let a = serde_json::to_string(&validate_problem(&base_spec(), 300, 9).unwrap()).unwrap();
        let b = serde_json::to_string(&validate_problem(&base_spec(), 300, 9).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cone_membership_examples() {
        let c = ConeSpec::orthant(2);
        assert!(cone_contains(&c, &[1.0, 2.0]).unwrap());
        assert!(!cone_contains(&c, &[-1.0, 0.0]).unwrap());
        assert!(cone_contains(&c, &[0.0, 0.0]).unwrap());
        assert!(cone_contains(&c, &[1.0]).is_err());
    }

    #[test]
    fn whole_line_is_not_a_proper_cone() {
        let c = ConeSpec {
            generators: vec![vec![1.0], vec![-1.0]],
            size_cap: 5.0,
        };
        assert!(c.check().is_err());
    }

    #[test]
    fn cone_grid_examples() {
        let mut c = ConeSpec::half_line();
        c.size_cap = 1.0;
        assert_eq!(
            cone_grid(&c, 3).unwrap(),
            vec![vec![0.0], vec![0.5], vec![1.0]]
        );
        let mut o = ConeSpec::orthant(2);
        o.size_cap = 1.0;
        assert_eq!(
            cone_grid(&o, 2).unwrap(),
            vec![
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0]
            ]
        );
        assert_eq!(cone_grid(&o, 4).unwrap().len(), 16);
        for v in cone_grid(&o, 4).unwrap() {
            assert!(cone_contains(&o, &v).unwrap());
        }
    }

    #[test]
    fn normalize_control_examples() {
        let c = ConeSpec::half_line();
        let u = normalize_control(&[(0.5, vec![1.0]), (0.2, vec![0.3])], 0.0, 1.0, &c).unwrap();
        assert_eq!(u.impulses[0].time, 0.2);
        assert_eq!(u.impulses[1].size, vec![1.0]);
        let e = normalize_control(&[(0.5, vec![1.0]), (0.5, vec![0.2])], 0.0, 1.0, &c).unwrap_err();
        assert!(e.to_string().contains("simultaneous impulses"));
        let e = normalize_control(&[(0.5, vec![-1.0])], 0.0, 1.0, &c).unwrap_err();
        assert!(e.to_string().contains("cone violation"));
        assert!(normalize_control(&[(1.5, vec![1.0])], 0.0, 1.0, &c).is_err());
        assert_eq!(normalize_control(&[], 0.0, 1.0, &c).unwrap().count(), 0);
    }

    #[test]
    fn derivative_closed_forms_match_finite_differences() {
        let fams = [
            CoefficientFamily::rational(4.0, 0.5, -1.0).with_tau_affine(1.0, 0.5),
            CoefficientFamily::trig(1.0, 0.7, 2.0, -0.3).with_tau_trig(1.0, 0.2, 3.0),
            CoefficientFamily::affine(1.0, -0.5),
        ];
        for f in &fams {
            for x in [-3.0, -0.4, 0.0, 1.3, 7.0] {
                f.check_derivatives("f", 0.4, x).unwrap();
            }
        }
    }

    #[test]
    fn scaling_by_two_is_exact() {
        let f = CoefficientFamily::rational(4.0, 0.3, 0.1).with_tau_affine(0.9, -0.1);
        let g = f.scaled(2.0);
        for x in [-2.0, 0.1, 3.3] {
            assert_eq!(g.value(0.3, x), 2.0 * f.value(0.3, x));
        }
    }

    proptest! {
        #[test]
        fn cone_closed_under_nonnegative_combinations(
            v in proptest::collection::vec(0.0f64..10.0, 2),
            w in proptest::collection::vec(0.0f64..10.0, 2),
            a in 0.0f64..10.0,
            b in 0.0f64..10.0,
        ) {
            let c = ConeSpec::orthant(2);
            let u: Vec<f64> = v.iter().zip(&w).map(|(p, q)| a * p + b * q).collect();
            prop_assert!(cone_contains(&c, &v).unwrap() && cone_contains(&c, &w).unwrap());
            prop_assert!(cone_contains(&c, &u).unwrap());
        }

        #[test]
        fn normalized_times_strictly_increase(times in proptest::collection::vec(0.0f64..1.0, 0..8)) {
            let raw: Vec<(f64, Vec<f64>)> = times.iter().map(|t| (*t, vec![0.5])).collect();
            if let Ok(u) = normalize_control(&raw, 0.0, 1.0, &ConeSpec::half_line()) {
                for w in u.impulses.windows(2) {
                    prop_assert!(w[0].time < w[1].time);
                }
            }
        }

        #[test]
        fn lattice_members_respect_lower_bound(per_ray in 2usize..12) {
            let s = base_spec();
            for xi in cone_grid(&s.cone, per_ray).unwrap() {
                prop_assert!(s.impulse(0.3, &xi) >= s.impulse_floor(&xi));
            }
        }
    }
}
