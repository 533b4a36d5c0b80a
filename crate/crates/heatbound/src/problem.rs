//! Manufactured problem data: initial condition, source term, and (when
//! known) the exact solution with its gradient and Laplacian.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

type ScalarFn = Arc<dyn Fn([f64; 2], f64) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn([f64; 2], f64) -> [f64; 2] + Send + Sync>;
type InitialFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;

/// Analytic exact solution of the heat equation, with derivatives.
#[derive(Clone)]
pub struct ExactSolution {
    pub u: ScalarFn,
    pub grad_u: GradFn,
    pub laplacian_u: ScalarFn,
}

/// Problem data handed to the time stepper: `u0` and `f`, plus the exact
/// solution when the problem is manufactured.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub u0: InitialFn,
    pub f: ScalarFn,
    pub exact: Option<ExactSolution>,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("has_exact", &self.exact.is_some())
            .finish()
    }
}

impl ProblemSpec {
    /// Same problem with `u0` and `f` (hence `u`) scaled by `c`.
    pub fn scaled(&self, c: f64) -> ProblemSpec {
        let u0 = self.u0.clone();
        let f = self.f.clone();
        ProblemSpec {
            name: format!("{}*{c}", self.name),
            dim: self.dim,
            u0: Arc::new(move |x| c * u0(x)),
            f: Arc::new(move |x, t| c * f(x, t)),
            exact: self.exact.as_ref().map(|e| {
                let (u, g, l) = (e.u.clone(), e.grad_u.clone(), e.laplacian_u.clone());
                ExactSolution {
                    u: Arc::new(move |x, t| c * u(x, t)),
                    grad_u: Arc::new(move |x, t| {
                        let gv = g(x, t);
                        [c * gv[0], c * gv[1]]
                    }),
                    laplacian_u: Arc::new(move |x, t| c * l(x, t)),
                }
            }),
        }
    }

    /// Spot-check that (u, f, u0) are mutually consistent: at `n` seeded
    /// random space-time points, a central finite difference of ∂_t u minus
    /// the analytic Laplacian must match f, and u(·,0) must match u0.
    pub fn verify_consistency(&self, seed: u64, n: usize, t_final: f64) -> Result<()> {
        let Some(exact) = &self.exact else {
            return Ok(());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = 1e-5;
        for _ in 0..n {
            let x = [
                rng.gen_range(0.05..0.95),
                if self.dim == 2 {
                    rng.gen_range(0.05..0.95)
                } else {
                    0.0
                },
            ];
            let t = rng.gen_range(dt..t_final);
            let du_dt = ((exact.u)(x, t + dt) - (exact.u)(x, t - dt)) / (2.0 * dt);
            let residual = du_dt - (exact.laplacian_u)(x, t) - (self.f)(x, t);
            let scale = (self.f)(x, t).abs().max(du_dt.abs()).max(1.0);
            if residual.abs() > 1e-6 * scale {
                return Err(Error::integrity(format!(
                    "catalog entry {:?} inconsistent at x={x:?}, t={t}: residual {residual:.3e}",
                    self.name
                )));
            }
            let init_gap = ((exact.u)(x, 0.0) - (self.u0)(x)).abs();
            if init_gap > 1e-12 * scale {
                return Err(Error::integrity(format!(
                    "catalog entry {:?}: u(x,0) != u0(x) at x={x:?}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

const PI: f64 = std::f64::consts::PI;

/// The built-in manufactured solutions.
pub fn catalog() -> Vec<ProblemSpec> {
    vec![
        // u = sin(πx) e^{−t} on (0,1)
        ProblemSpec {
            name: "sin1d_decay".into(),
            dim: 1,
            u0: Arc::new(|x| (PI * x[0]).sin()),
            f: Arc::new(|x, t| (PI * PI - 1.0) * (PI * x[0]).sin() * (-t).exp()),
            exact: Some(ExactSolution {
                u: Arc::new(|x, t| (PI * x[0]).sin() * (-t).exp()),
                grad_u: Arc::new(|x, t| [PI * (PI * x[0]).cos() * (-t).exp(), 0.0]),
                laplacian_u: Arc::new(|x, t| -PI * PI * (PI * x[0]).sin() * (-t).exp()),
            }),
        },
        // u = sin(πx) sin(πy) e^{−t} on (0,1)²
        ProblemSpec {
            name: "sin2d_decay".into(),
            dim: 2,
            u0: Arc::new(|x| (PI * x[0]).sin() * (PI * x[1]).sin()),
            f: Arc::new(|x, t| {
                (2.0 * PI * PI - 1.0) * (PI * x[0]).sin() * (PI * x[1]).sin() * (-t).exp()
            }),
            exact: Some(ExactSolution {
                u: Arc::new(|x, t| (PI * x[0]).sin() * (PI * x[1]).sin() * (-t).exp()),
                grad_u: Arc::new(|x, t| {
                    [
                        PI * (PI * x[0]).cos() * (PI * x[1]).sin() * (-t).exp(),
                        PI * (PI * x[0]).sin() * (PI * x[1]).cos() * (-t).exp(),
                    ]
                }),
                laplacian_u: Arc::new(|x, t| {
                    -2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin() * (-t).exp()
                }),
            }),
        },
        // u = x(1−x)(1+t): smooth, quadratic in space (not in V_h at p=1)
        ProblemSpec {
            name: "poly1d".into(),
            dim: 1,
            u0: Arc::new(|x| x[0] * (1.0 - x[0])),
            f: Arc::new(|x, t| x[0] * (1.0 - x[0]) + 2.0 * (1.0 + t)),
            exact: Some(ExactSolution {
                u: Arc::new(|x, t| x[0] * (1.0 - x[0]) * (1.0 + t)),
                grad_u: Arc::new(|x, t| [(1.0 - 2.0 * x[0]) * (1.0 + t), 0.0]),
                laplacian_u: Arc::new(|_, t| -2.0 * (1.0 + t)),
            }),
        },
        // u ≡ 0
        ProblemSpec {
            name: "zero".into(),
            dim: 1,
            u0: Arc::new(|_| 0.0),
            f: Arc::new(|_, _| 0.0),
            exact: Some(ExactSolution {
                u: Arc::new(|_, _| 0.0),
                grad_u: Arc::new(|_, _| [0.0, 0.0]),
                laplacian_u: Arc::new(|_, _| 0.0),
            }),
        },
    ]
}

/// Look up a catalog entry by name.
pub fn find(name: &str) -> Result<ProblemSpec> {
    let entries = catalog();
    entries
        .iter()
        .find(|p| p.name == name)
        .cloned()
        .ok_or_else(|| Error::UnknownProblem {
            name: name.into(),
            available: entries
                .iter()
                .map(|p| p.name.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_entries_are_consistent() {
        for entry in catalog() {
            entry.verify_consistency(7, 20, 1.0).unwrap();
        }
    }

    #[test]
    fn zero_entry_is_zero() {
        let zero = find("zero").unwrap();
        assert_eq!((zero.f)([0.3, 0.0], 0.5), 0.0);
        assert_eq!((zero.u0)([0.3, 0.0]), 0.0);
    }

    #[test]
    fn sin1d_source_matches_hand_derivation() {
        let p = find("sin1d_decay").unwrap();
        let x = [0.3, 0.0];
        let expected = (PI * PI - 1.0) * (PI * 0.3).sin() * (-0.7f64).exp();
        assert!(((p.f)(x, 0.7) - expected).abs() < 1e-15);
    }

    #[test]
    fn sin2d_source_matches_hand_derivation() {
        let p = find("sin2d_decay").unwrap();
        let x = [0.3, 0.6];
        let expected =
            (2.0 * PI * PI - 1.0) * (PI * 0.3).sin() * (PI * 0.6).sin() * (-0.2f64).exp();
        assert!(((p.f)(x, 0.2) - expected).abs() < 1e-15);
    }

    #[test]
    fn unknown_name_lists_available() {
        let err = find("nope").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sin1d_decay") && msg.contains("sin2d_decay"));
    }

    #[test]
    fn scaling_scales_all_fields() {
        let p = find("sin1d_decay").unwrap().scaled(10.0);
        let base = find("sin1d_decay").unwrap();
        let x = [0.4, 0.0];
        assert!(((p.f)(x, 0.3) - 10.0 * (base.f)(x, 0.3)).abs() < 1e-13);
        assert!(((p.u0)(x) - 10.0 * (base.u0)(x)).abs() < 1e-13);
        p.verify_consistency(3, 10, 1.0).unwrap();
    }
}
