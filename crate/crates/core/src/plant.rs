//! Discrete-time plant interface and the buck-boost converter model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box, used for both state and input constraint sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::InvalidParameter("box bounds must be finite".into()));
            }
            if lo > hi {
                return Err(Error::InvalidParameter(format!(
                    "empty box interval: lower {lo} > upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// Elementwise distance outside the box; zero inside.
    pub fn violation(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (lo - v).max(0.0).max(v - hi))
            .fold(0.0, f64::max)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// Discrete-time single-input plant `x+ = f(x, u)`.
///
/// `input_gradient` is the analytic `df/du` at `(x, .)`, required by the
/// constraints-informed loss which differentiates the one-step prediction
/// with respect to the applied input only.
pub trait PlantModel: Sync {
    fn state_dim(&self) -> usize;

    fn step_into(&self, x: &[f64], u: f64, out: &mut [f64]);

    fn step(&self, x: &[f64], u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        self.step_into(x, u, &mut out);
        out
    }

    /// `df/du` at `(x, u)`; independent of `u` for control-affine plants.
    fn input_gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// Buck-boost converter parameters (averaged discrete-time model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuckBoostParams {
    /// Sampling interval [s].
    pub ts: f64,
    /// Bus voltage [V].
    pub vin: f64,
    /// Inductance [H].
    pub inductance: f64,
    /// Capacitance [F].
    pub capacitance: f64,
    /// Load resistance [Ohm].
    pub load_resistance: f64,
}

impl Default for BuckBoostParams {
    fn default() -> Self {
        Self {
            ts: 1e-4,
            vin: 15.0,
            inductance: 4.2e-3,
            capacitance: 2.2e-3,
            load_resistance: 165.0,
        }
    }
}

impl BuckBoostParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("ts", self.ts),
            ("vin", self.vin),
            ("inductance", self.inductance),
            ("capacitance", self.capacitance),
            ("load_resistance", self.load_resistance),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "buck-boost parameter {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Steady state `(x1_ss, u_ss)` for a requested capacitor voltage `x2_ss`.
    pub fn steady_state(&self, x2_ss: f64) -> Result<(f64, f64)> {
        if (x2_ss - self.vin).abs() < 1e-12 {
            return Err(Error::SingularReference(format!(
                "x2_ss = {x2_ss} coincides with the bus voltage"
            )));
        }
        let u_ss = x2_ss / (x2_ss - self.vin);
        if (u_ss - 1.0).abs() < 1e-12 {
            return Err(Error::SingularReference(
                "steady-state duty cycle of 1 is singular".into(),
            ));
        }
        let x1_ss = x2_ss / (self.load_resistance * (u_ss - 1.0));
        Ok((x1_ss, u_ss))
    }
}

impl PlantModel for BuckBoostParams {
    fn state_dim(&self) -> usize {
        2
    }

    fn step_into(&self, x: &[f64], u: f64, out: &mut [f64]) {
        let (ts, l, c, r) = (self.ts, self.inductance, self.capacitance, self.load_resistance);
        let (x1, x2) = (x[0], x[1]);
        out[0] = x1 + ts / l * x2 + ts / l * (self.vin - x2) * u;
        out[1] = -ts / c * x1 + (1.0 - ts / (r * c)) * x2 + ts / c * x1 * u;
    }

    fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![
            self.ts / self.inductance * (self.vin - x[1]),
            self.ts / self.capacitance * x[0],
        ]
    }
}

/// Reference constraint box on the state, `[0.01, 2] x [-20, 0]`.
pub fn default_state_box() -> BoxSet {
    BoxSet::new(vec![0.01, -20.0], vec![2.0, 0.0]).expect("static bounds")
}

/// Reference duty-cycle bounds `[0.1, 0.9]`.
pub const U_MIN: f64 = 0.1;
pub const U_MAX: f64 = 0.9;
