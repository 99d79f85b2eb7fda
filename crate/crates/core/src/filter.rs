//! Quadratic safe set, one-step safe control interval and the projection
//! safety filter.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{PlantParams, PlantState};

/// `h_S(x) = c0 + c_tt theta^2 + c_td theta theta_dot + c_dd theta_dot^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafeSetCbf {
    pub c0: f64,
    pub c_tt: f64,
    pub c_td: f64,
    pub c_dd: f64,
}

impl Default for SafeSetCbf {
    fn default() -> Self {
        Self {
            c0: 1.0,
            c_tt: -16.0,
            c_td: -8.0,
            c_dd: -4.0,
        }
    }
}

impl SafeSetCbf {
    /// Symmetric matrix `H` with `h_S(x) = c0 + x^T H x`.
    pub fn hessian_half(&self) -> Matrix2<f64> {
        Matrix2::new(self.c_tt, self.c_td / 2.0, self.c_td / 2.0, self.c_dd)
    }

    /// The quadratic part must be negative definite so that `S` is bounded.
    pub fn validate(&self) -> Result<()> {
        let h = self.hessian_half();
        if !(h[(0, 0)] < 0.0 && h.determinant() > 0.0) {
            return Err(Error::InvalidParameter(
                "safe-set quadratic form is not negative definite".into(),
            ));
        }
        Ok(())
    }

    pub fn value(&self, x: PlantState) -> f64 {
        let v = x.to_vector();
        self.c0 + v.dot(&(self.hessian_half() * v))
    }

    pub fn gradient(&self, x: PlantState) -> Vector2<f64> {
        self.hessian_half() * x.to_vector() * 2.0
    }

    pub fn contains(&self, x: PlantState) -> bool {
        self.value(x) >= 0.0
    }
}

/// Closed interval of admissible torques; `feasible == false` means empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeControlInterval {
    pub lo: f64,
    pub hi: f64,
    pub feasible: bool,
}

impl SafeControlInterval {
    pub const EMPTY: Self = Self {
        lo: f64::NAN,
        hi: f64::NAN,
        feasible: false,
    };

    pub fn contains(&self, u: f64) -> bool {
        self.feasible && u >= self.lo && u <= self.hi
    }

    pub fn width(&self) -> f64 {
        if self.feasible {
            self.hi - self.lo
        } else {
            0.0
        }
    }

    /// Interval containment; the empty set is a subset of everything.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        if !self.feasible {
            return true;
        }
        other.feasible && self.lo >= other.lo && self.hi <= other.hi
    }
}

/// Output of the projection filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOutput {
    pub u: f64,
    /// The safe set of controls was empty and the fallback was used.
    pub infeasible: bool,
}

/// Projection filter `argmin_{u in U_S(x)} |u - u_c|` with Euler one-step
/// prediction `x+(u) = x + dt f_c(x) + dt g_c u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyFilter {
    pub cbf: SafeSetCbf,
    pub plant: PlantParams,
}

impl SafetyFilter {
    pub fn new(cbf: SafeSetCbf, plant: PlantParams) -> Self {
        Self { cbf, plant }
    }

    /// Coefficients `(a2, a1, a0)` of `u -> h_S(x+(u)) = a2 u^2 + a1 u + a0`.
    pub fn next_margin_poly(&self, x: PlantState) -> (f64, f64, f64) {
        let dt = self.plant.dt;
        let p = x.to_vector() + self.plant.drift(x) * dt;
        let b = Vector2::new(0.0, dt * self.plant.input_gain());
        let h = self.cbf.hessian_half();
        let a2 = b.dot(&(h * b));
        let a1 = 2.0 * b.dot(&(h * p));
        let a0 = self.cbf.value(PlantState::from_vector(&p));
        (a2, a1, a0)
    }

    /// Margin of the Euler-predicted next state under input `u`.
    pub fn next_margin(&self, x: PlantState, u: f64) -> f64 {
        let (a2, a1, a0) = self.next_margin_poly(x);
        (a2 * u + a1) * u + a0
    }

    /// `U_S(x)`: solution set of the concave quadratic inequality
    /// `h_S(x+(u)) >= 0`, intersected with `[-u_max, u_max]`.
    pub fn safe_control_set(&self, x: PlantState) -> SafeControlInterval {
        let (a2, a1, a0) = self.next_margin_poly(x);
        let u_max = self.plant.u_max;
        let disc = a1 * a1 - 4.0 * a2 * a0;
        if disc < 0.0 || !disc.is_finite() {
            return SafeControlInterval::EMPTY;
        }
        // stable root pair for a2 < 0
        let s = disc.sqrt();
        let q = -0.5 * (a1 + a1.signum() * s);
        let (r1, r2) = if q != 0.0 { (q / a2, a0 / q) } else { (0.0, 0.0) };
        let (lo, hi) = (r1.min(r2).max(-u_max), r1.max(r2).min(u_max));
        if lo > hi {
            return SafeControlInterval::EMPTY;
        }
        SafeControlInterval { lo, hi, feasible: true }
    }

    /// Projects `u_c` onto `U_S(x)`. When `U_S(x)` is empty, returns the
    /// admissible input maximizing the next-step margin and flags the event.
    pub fn filter(&self, u_c: f64, x: PlantState) -> FilterOutput {
        let set = self.safe_control_set(x);
        if set.feasible {
            FilterOutput {
                u: u_c.clamp(set.lo, set.hi),
                infeasible: false,
            }
        } else {
            let (a2, a1, _) = self.next_margin_poly(x);
            let vertex = -a1 / (2.0 * a2);
            FilterOutput {
                u: vertex.clamp(-self.plant.u_max, self.plant.u_max),
                infeasible: true,
            }
        }
    }

    /// Deactivation: some control deemed safe at `xhat` is unsafe at `x`.
    pub fn is_deactivated(&self, x: PlantState, xhat: PlantState) -> bool {
        !self.safe_control_set(xhat).is_subset_of(&self.safe_control_set(x))
    }
}
