//! Shipped preset scenarios.

use crate::model::{CoefficientFamily, ConeSpec, Impulse, ImpulseControl, ProblemSpec, Semantics};
use crate::qvi::SolveGrid;

/// Names accepted by `--preset`.
pub const PRESET_NAMES: [&str; 4] = ["heat-kernel", "impulse-active", "loan", "linear-adjoint"];

/// A problem with its initial state, solver domain and optional reference data.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub spec: ProblemSpec,
    pub x0: Vec<f64>,
    pub x_min: f64,
    pub x_max: f64,
    /// Candidate control used by the adjoint and maximum-principle commands
    /// when no QVI extraction is requested.
    pub control: Option<ImpulseControl>,
    /// Closed-form value `V(t, x)` when one is known.
    pub closed_form: Option<fn(f64, f64, f64) -> f64>,
}

impl Preset {
    /// Solver grid with the given resolutions on the preset domain.
    pub fn solve_grid(&self, x_nodes: usize, t_nodes: usize) -> SolveGrid {
        SolveGrid::new(&self.spec, self.x_min, self.x_max, x_nodes, t_nodes)
    }
}

fn heat_kernel_value(horizon: f64, t: f64, x: f64) -> f64 {
    1.0 + x.cos() * (-(horizon - t) / 2.0).exp()
}

fn control(start: f64, items: &[(f64, f64)]) -> ImpulseControl {
    ImpulseControl {
        start_time: start,
        impulses: items
            .iter()
            .map(|(t, x)| Impulse {
                time: *t,
                size: vec![*x],
            })
            .collect(),
    }
}

/// Brownian motion with terminal cost `1 + cos x` and expensive impulses.
pub fn heat_kernel() -> Preset {
    Preset {
        name: "heat-kernel",
        spec: ProblemSpec {
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
        },
        x0: vec![0.0],
        x_min: -std::f64::consts::PI,
        x_max: std::f64::consts::PI,
        control: None,
        closed_form: Some(heat_kernel_value),
    }
}

/// Mean-reverting state penalized near the origin; cheap upward impulses.
pub fn impulse_active() -> Preset {
    Preset {
        name: "impulse-active",
        spec: ProblemSpec {
            dim: 1,
            horizon: 1.0,
            tau0: 0.0,
            drift: CoefficientFamily::affine(0.0, -0.5),
            diffusion: CoefficientFamily::constant(0.3),
            running_cost: CoefficientFamily::rational(4.0, 0.0, 0.0),
            terminal_cost: CoefficientFamily::rational(2.0, 0.0, 0.0),
            impulse_cost: CoefficientFamily::affine(1.0, 1.0).with_tau_affine(0.1, -0.02),
            ell0: 0.08,
            mu: 1.0,
            cone: ConeSpec {
                generators: vec![vec![1.0]],
                size_cap: 10.0,
            },
            semantics: Semantics::Frozen,
            max_impulses: 20,
        },
        x0: vec![0.0],
        x_min: -4.0,
        x_max: 8.0,
        control: None,
        closed_form: None,
    }
}

/// The impulse-active data with a τ-independent impulse cost.
pub fn impulse_active_tau_free() -> Preset {
    let mut p = impulse_active();
    p.spec.impulse_cost = CoefficientFamily::affine(0.1, 0.1);
    p.spec.ell0 = 0.1;
    p
}

/// Cash position with borrowing: each loan adds a repayment outflow and an
/// interest-like running cost that grow with the loan date.
pub fn loan() -> Preset {
    Preset {
        name: "loan",
        spec: ProblemSpec {
            dim: 1,
            horizon: 1.0,
            tau0: 0.0,
            drift: CoefficientFamily::constant(-0.2).with_tau_affine(1.0, 0.5),
            diffusion: CoefficientFamily::constant(0.25).with_tau_affine(1.0, 0.4),
            running_cost: CoefficientFamily::rational(1.0, 0.0, 0.0).with_tau_affine(1.0, 0.5),
            terminal_cost: CoefficientFamily::rational(1.0, 0.0, 0.0),
            impulse_cost: CoefficientFamily::affine(1.0, 1.0).with_tau_affine(0.2, -0.05),
            ell0: 0.15,
            mu: 1.0,
            cone: ConeSpec::half_line(),
            semantics: Semantics::Stacking,
            max_impulses: 20,
        },
        x0: vec![0.5],
        x_min: -4.0,
        x_max: 8.0,
        control: Some(control(0.0, &[(0.3, 1.5), (0.6, 1.0)])),
        closed_form: None,
    }
}

/// State-independent drift and diffusion with τ-dependent copies.
pub fn linear_adjoint() -> Preset {
    Preset {
        name: "linear-adjoint",
        spec: ProblemSpec {
            dim: 1,
            horizon: 1.0,
            tau0: 0.0,
            drift: CoefficientFamily::constant(0.2).with_tau_affine(1.0, -0.5),
            diffusion: CoefficientFamily::constant(0.3).with_tau_affine(1.0, 0.5),
            running_cost: CoefficientFamily::trig(1.0, 0.0, 1.0, 0.5).with_tau_affine(0.5, 0.1),
            terminal_cost: CoefficientFamily::trig(1.0, 1.0, 1.0, 0.0),
            impulse_cost: CoefficientFamily::affine(1.0, 1.0).with_tau_affine(0.5, -0.1),
            ell0: 0.4,
            mu: 1.0,
            cone: ConeSpec::half_line(),
            semantics: Semantics::Stacking,
            max_impulses: 20,
        },
        x0: vec![0.0],
        x_min: -5.0,
        x_max: 7.0,
        control: Some(control(0.0, &[(0.3, 0.8), (0.6, 0.5)])),
        closed_form: None,
    }
}

/// Looks up a preset by name.
pub fn preset(name: &str) -> Option<Preset> {
    match name {
        "heat-kernel" => Some(heat_kernel()),
        "impulse-active" => Some(impulse_active()),
        "loan" => Some(loan()),
        "linear-adjoint" => Some(linear_adjoint()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_problem;

    #[test]
    fn every_preset_passes_validation() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            let r = validate_problem(&p.spec, 400, 1).unwrap();
            assert!(r.all_pass, "{name}: {:?}", r.violations);
        }
        assert!(
            validate_problem(&impulse_active_tau_free().spec, 400, 1)
                .unwrap()
                .all_pass
        );
    }

    #[test]
    fn unknown_preset_is_none() {
        assert!(preset("nope").is_none());
    }
}
