//! SIRD epidemic with temporary immunity and behavioural saturation of the
//! force of infection, controlled by non-pharmaceutical interventions.
//!
//! State `(s, i, r, d)` (population fractions), control `u ∈ [0, 1]`. The
//! intervention scales the incidence term only: `𝒫_21(u) = 𝒟_12(u) = 1 − u`,
//! every other policy entry is one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::model::{ControlBox, ControlPoint, CpdsModel, StateVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SirdParams {
    pub t0: f64,
    pub tf: f64,
    pub kappa: f64,
    pub rho: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Power q in the final cost `w3 · d^q`.
    pub terminal_exponent: f64,
}

impl Default for SirdParams {
    fn default() -> Self {
        SirdParams {
            t0: 0.0,
            tf: 90.0,
            kappa: 0.32,
            rho: 1.0,
            sigma: 0.5,
            gamma: 0.12,
            delta: 0.0294,
            epsilon: 0.0094,
            w1: 1e-3,
            w2: 1.0,
            w3: 1e4,
            terminal_exponent: 2.0,
        }
    }
}

impl SirdParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("sird parameters: {what}")));
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("need kappa > 0");
        }
        if !(self.rho >= 1.0 && self.sigma >= 0.0) {
            return bad("need rho >= 1 and sigma >= 0");
        }
        if ![self.gamma, self.delta, self.epsilon]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return bad("need gamma, delta, epsilon >= 0");
        }
        if !(0.0 <= self.t0 && self.t0 < self.tf) {
            return bad("need 0 <= t0 < tf");
        }
        if !(self.terminal_exponent >= 1.0) {
            return bad("need terminal_exponent >= 1");
        }
        if ![self.w1, self.w2, self.w3].iter().all(|v| v.is_finite()) {
            return bad("cost weights must be finite");
        }
        Ok(())
    }
}

/// `g(i) = κ i^ϱ (1 − i)^σ`.
pub fn force_of_infection(params: &SirdParams, i: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&i) {
        return Err(Error::Domain(format!(
            "infected fraction must lie in [0, 1], got {i}"
        )));
    }
    Ok(incidence_rate(params, i))
}

/// Unchecked `g`, with the argument clamped into `[0, 1]`.
#[inline]
fn incidence_rate(params: &SirdParams, i: f64) -> f64 {
    let i = i.clamp(0.0, 1.0);
    // i^ϱ with ϱ ≥ 1 is 0 at i = 0 for any real exponent.
    let growth = if params.rho == 1.0 { i } else { i.powf(params.rho) };
    let saturation = if params.sigma == 0.0 {
        1.0
    } else {
        (1.0 - i).powf(params.sigma)
    };
    params.kappa * growth * saturation
}

#[derive(Debug, Clone)]
pub struct SirdModel {
    params: SirdParams,
    controls: ControlBox,
    initial: StateVector,
}

pub const SIRD_INITIAL_STATE: [f64; 4] = [0.985, 0.007, 0.006, 0.002];

pub fn sird_model(params: SirdParams) -> Result<SirdModel> {
    sird_model_with_initial(params, SIRD_INITIAL_STATE.to_vec())
}

pub fn sird_model_with_initial(params: SirdParams, y0: Vec<f64>) -> Result<SirdModel> {
    params.validate()?;
    let initial = StateVector::new(y0)?;
    if initial.dim() != 4 {
        return Err(Error::Config(format!(
            "sird initial state needs 4 components (s, i, r, d), got {}",
            initial.dim()
        )));
    }
    Ok(SirdModel {
        params,
        controls: ControlBox::interval(0.0, 1.0)?,
        initial,
    })
}

impl SirdModel {
    pub fn params(&self) -> &SirdParams {
        &self.params
    }
}

impl CpdsModel for SirdModel {
    fn name(&self) -> &str {
        "sird"
    }

    fn dimension(&self) -> usize {
        4
    }

    fn control_box(&self) -> &ControlBox {
        &self.controls
    }

    fn time_horizon(&self) -> (f64, f64) {
        (self.params.t0, self.params.tf)
    }

    fn initial_state(&self) -> StateVector {
        self.initial.clone()
    }

    fn production(&self, x: &[f64], out: &mut SquareMatrix) {
        let (s, i, r) = (x[0], x[1], x[2]);
        let p = &self.params;
        out.reset(4);
        out[(0, 2)] = p.epsilon * r;
        out[(1, 0)] = incidence_rate(p, i) * s;
        out[(2, 1)] = p.gamma * i;
        out[(3, 1)] = p.delta * i;
    }

    fn destruction(&self, x: &[f64], out: &mut SquareMatrix) {
        let (s, i, r) = (x[0], x[1], x[2]);
        let p = &self.params;
        out.reset(4);
        out[(2, 0)] = p.epsilon * r;
        out[(0, 1)] = incidence_rate(p, i) * s;
        out[(1, 2)] = p.gamma * i;
        out[(1, 3)] = p.delta * i;
    }

    fn policy_production(&self, a: &[f64], out: &mut SquareMatrix) {
        *out = SquareMatrix::filled(4, 1.0);
        out[(1, 0)] = 1.0 - a[0];
    }

    fn policy_destruction(&self, a: &[f64], out: &mut SquareMatrix) {
        *out = SquareMatrix::filled(4, 1.0);
        out[(0, 1)] = 1.0 - a[0];
    }

    fn running_cost(&self, x: &[f64], a: &[f64], _t: f64) -> f64 {
        self.params.w1 * a[0] * a[0] + self.params.w2 * x[1]
    }

    fn final_cost(&self, x: &[f64]) -> f64 {
        let d = x[3];
        let q = self.params.terminal_exponent;
        let dq = if q == 1.0 {
            d
        } else if q == 2.0 {
            d * d
        } else {
            d.max(0.0).powf(q)
        };
        self.params.w3 * dq
    }

    fn state_labels(&self) -> Vec<String> {
        vec!["s".into(), "i".into(), "r".into(), "d".into()]
    }

    fn control_labels(&self) -> Vec<String> {
        vec!["u".into()]
    }

    fn base_control(&self) -> ControlPoint {
        ControlPoint::scalar(0.0)
    }
}
