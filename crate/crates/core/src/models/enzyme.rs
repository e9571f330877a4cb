//! Temperature-controlled single-substrate enzyme reaction
//! `E + S ⇌ C → E + P` in Michaelis-Menten form.
//!
//! The state is the reduced vector `(s, c, p)`; the free enzyme is
//! eliminated through `e = e_tot − c`. The control is the absolute
//! temperature, entering every rate through the modified Arrhenius law
//! `k √T exp(−E/(R T))`. Pre-exponential factors sit in the production
//! matrix and the temperature factors in the policy matrices, with
//! `𝒫(T) = 𝒟ᵀ(T)`, so the controlled system is conservative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::model::{ControlBox, ControlPoint, CpdsModel, StateVector};

/// Modified Arrhenius rate `k √T exp(−E_over_R / T)`.
pub fn arrhenius_rate(k: f64, e_over_r: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "absolute temperature must be positive, got {temperature}"
        )));
    }
    if !(k >= 0.0) {
        return Err(Error::Domain(format!(
            "pre-exponential factor must be nonnegative, got {k}"
        )));
    }
    Ok(k * arrhenius_factor(e_over_r, temperature))
}

#[inline]
fn arrhenius_factor(e_over_r: f64, temperature: f64) -> f64 {
    temperature.sqrt() * (-e_over_r / temperature).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnzymeParams {
    pub t0: f64,
    pub tf: f64,
    pub k1: f64,
    pub k_m1: f64,
    pub k2: f64,
    /// Activation temperatures `E/R` in Kelvin.
    pub e1_over_r: f64,
    pub e_m1_over_r: f64,
    pub e2_over_r: f64,
    pub e_tot: f64,
    pub t_min: f64,
    pub t_amb: f64,
    pub t_max: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for EnzymeParams {
    fn default() -> Self {
        EnzymeParams {
            t0: 0.0,
            tf: 30.0,
            k1: 0.04,
            k_m1: 0.03,
            k2: 0.035,
            e1_over_r: 200.0,
            e_m1_over_r: 220.0,
            e2_over_r: 190.0,
            e_tot: 0.3,
            t_min: 263.15,
            t_amb: 293.15,
            t_max: 373.15,
            w1: 0.5,
            w2: 20.0,
        }
    }
}

impl EnzymeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("enzyme parameters: {what}")));
        let nonneg = [
            self.k1,
            self.k_m1,
            self.k2,
            self.e1_over_r,
            self.e_m1_over_r,
            self.e2_over_r,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("rates and activation temperatures must be finite and >= 0");
        }
        if !(0.0 < self.t_min && self.t_min <= self.t_amb && self.t_amb <= self.t_max) {
            return bad("need 0 < t_min <= t_amb <= t_max");
        }
        if !(0.0 <= self.t0 && self.t0 < self.tf) {
            return bad("need 0 <= t0 < tf");
        }
        if !(0.0..=1.0).contains(&self.e_tot) {
            return bad("need 0 <= e_tot <= 1");
        }
        if !(self.w1.is_finite() && self.w2.is_finite()) {
            return bad("cost weights must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EnzymeModel {
    params: EnzymeParams,
    controls: ControlBox,
    initial: StateVector,
}

pub const ENZYME_INITIAL_STATE: [f64; 3] = [0.7, 0.0, 0.0];

/// Builds the enzyme CPDS with the default initial datum `(0.7, 0, 0)`.
pub fn enzyme_model(params: EnzymeParams) -> Result<EnzymeModel> {
    enzyme_model_with_initial(params, ENZYME_INITIAL_STATE.to_vec())
}

pub fn enzyme_model_with_initial(params: EnzymeParams, y0: Vec<f64>) -> Result<EnzymeModel> {
    params.validate()?;
    let controls = ControlBox::interval(params.t_min, params.t_max)?;
    let initial = StateVector::new(y0)?;
    if initial.dim() != 3 {
        return Err(Error::Config(format!(
            "enzyme initial state needs 3 components (s, c, p), got {}",
            initial.dim()
        )));
    }
    Ok(EnzymeModel {
        params,
        controls,
        initial,
    })
}

impl EnzymeModel {
    pub fn params(&self) -> &EnzymeParams {
        &self.params
    }

    /// Free enzyme `e_tot − c`, floored at zero. On the physical region
    /// `c ≤ e_tot` (itself invariant) the floor is inactive; beyond it the
    /// floor keeps every production rate nonnegative.
    #[inline]
    fn free_enzyme(&self, c: f64) -> f64 {
        (self.params.e_tot - c).max(0.0)
    }
}

impl CpdsModel for EnzymeModel {
    fn name(&self) -> &str {
        "enzyme"
    }

    fn dimension(&self) -> usize {
        3
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
        let (s, c) = (x[0], x[1]);
        out.reset(3);
        out[(0, 1)] = self.params.k_m1 * c;
        out[(1, 0)] = self.params.k1 * s * self.free_enzyme(c);
        out[(2, 1)] = self.params.k2 * c;
    }

    fn destruction(&self, x: &[f64], out: &mut SquareMatrix) {
        let (s, c) = (x[0], x[1]);
        out.reset(3);
        out[(1, 0)] = self.params.k_m1 * c;
        out[(0, 1)] = self.params.k1 * s * self.free_enzyme(c);
        out[(1, 2)] = self.params.k2 * c;
    }

    fn policy_production(&self, a: &[f64], out: &mut SquareMatrix) {
        let t = a[0];
        out.reset(3);
        out[(0, 1)] = arrhenius_factor(self.params.e_m1_over_r, t);
        out[(1, 0)] = arrhenius_factor(self.params.e1_over_r, t);
        out[(2, 1)] = arrhenius_factor(self.params.e2_over_r, t);
    }

    fn policy_destruction(&self, a: &[f64], out: &mut SquareMatrix) {
        let t = a[0];
        out.reset(3);
        out[(1, 0)] = arrhenius_factor(self.params.e_m1_over_r, t);
        out[(0, 1)] = arrhenius_factor(self.params.e1_over_r, t);
        out[(1, 2)] = arrhenius_factor(self.params.e2_over_r, t);
    }

    fn running_cost(&self, _x: &[f64], a: &[f64], _t: f64) -> f64 {
        let d = (a[0] - self.params.t_amb) / self.params.t_max;
        self.params.w1 * d * d
    }

    fn final_cost(&self, x: &[f64]) -> f64 {
        let miss = 1.0 - x[2];
        self.params.w2 * miss * miss
    }

    fn state_labels(&self) -> Vec<String> {
        vec!["s".into(), "c".into(), "p".into()]
    }

    fn control_labels(&self) -> Vec<String> {
        vec!["T".into()]
    }

    fn base_control(&self) -> ControlPoint {
        ControlPoint::scalar(self.params.t_amb)
    }

    fn derived_outputs(&self, x: &[f64]) -> Vec<(&'static str, f64)> {
        vec![("e", self.params.e_tot - x[1])]
    }
}
