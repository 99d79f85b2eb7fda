//! Nonlinear inverted pendulum: continuous dynamics, RK4 sampling and noisy
//! angle measurements.

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants and sampling settings of the pendulum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    /// Mass [kg].
    pub m: f64,
    /// Length [m].
    pub l: f64,
    /// Gravity [m/s^2].
    pub g: f64,
    /// Torque bound [N m]; admissible inputs are `[-u_max, u_max]`.
    pub u_max: f64,
    /// Sample period [s].
    pub dt: f64,
    /// Standard deviation of the angle measurement noise [rad].
    pub noise_std: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            m: 2.0,
            l: 1.0,
            g: 10.0,
            u_max: 3.0,
            dt: 0.01,
            noise_std: 1e-3,
        }
    }
}

/// Angle and angular velocity of the pendulum, measured from upright.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl PlantState {
    pub const fn new(theta: f64, theta_dot: f64) -> Self {
        Self { theta, theta_dot }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.theta, self.theta_dot)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.theta_dot.is_finite()
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("l", self.l),
            ("g", self.g),
            ("u_max", self.u_max),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Input gain `1 / (m l^2)`.
    pub fn input_gain(&self) -> f64 {
        1.0 / (self.m * self.l * self.l)
    }

    /// Time derivative `(theta_dot, g/l sin(theta) + u / (m l^2))`.
    pub fn continuous_deriv(&self, x: PlantState, u: f64) -> PlantState {
        PlantState::new(
            x.theta_dot,
            self.g / self.l * x.theta.sin() + self.input_gain() * u,
        )
    }

    /// Drift part of the dynamics, `f_c(x)` with `u = 0`.
    pub fn drift(&self, x: PlantState) -> Vector2<f64> {
        self.continuous_deriv(x, 0.0).to_vector()
    }

    /// One sample period of the plant under zero-order-hold input.
    pub fn step(&self, x: PlantState, u: f64) -> Result<PlantState> {
        if !x.is_finite() || !u.is_finite() {
            return Err(Error::NonFinite("plant step"));
        }
        let next = rk4(|s| self.continuous_deriv(PlantState::from_vector(s), u).to_vector(), &x.to_vector(), self.dt);
        let next = PlantState::from_vector(&next);
        if !next.is_finite() {
            return Err(Error::NonFinite("plant step"));
        }
        Ok(next)
    }

    /// Noisy angle measurement `theta + e`, `e ~ N(0, noise_std^2)`.
    pub fn measure(&self, x: PlantState, noise: &mut NoiseSource) -> f64 {
        x.theta + noise.sample(self.noise_std)
    }

    /// Pendulum energy `1/2 m l^2 theta_dot^2 + m g l cos(theta)`.
    pub fn energy(&self, x: PlantState) -> f64 {
        0.5 * self.m * self.l * self.l * x.theta_dot * x.theta_dot + self.m * self.g * self.l * x.theta.cos()
    }
}

/// Classical fourth-order Runge-Kutta step for an autonomous vector field.
pub fn rk4<F>(f: F, x: &Vector2<f64>, dt: f64) -> Vector2<f64>
where
    F: Fn(&Vector2<f64>) -> Vector2<f64>,
{
    let k1 = f(x);
    let k2 = f(&(x + k1 * (dt / 2.0)));
    let k3 = f(&(x + k2 * (dt / 2.0)));
    let k4 = f(&(x + k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Seeded Gaussian noise stream. Each simulation run owns one.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Draws from `N(0, std^2)`; returns exactly 0 when `std == 0` without
    /// advancing the stream.
    pub fn sample(&mut self, std: f64) -> f64 {
        if std == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, std)
            .expect("noise std validated as finite and non-negative")
            .sample(&mut self.rng)
    }
}
