//! PI servo from the demodulated error signal to pump current.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ServoError {
    #[error("acquisition failed: discriminator slope {slope_v_per_ma:e} V/mA below threshold {min_v_per_ma:e} V/mA")]
    Acquisition { slope_v_per_ma: f64, min_v_per_ma: f64 },
    #[error("invalid servo field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum Polarity {
    Positive,
    Negative,
    Auto,
}

impl Polarity {
    pub fn from_sign(s: f64) -> Self {
        if s < 0.0 {
            Polarity::Negative
        } else {
            Polarity::Positive
        }
    }

    pub fn sign(self) -> Option<f64> {
        match self {
            Polarity::Positive => Some(1.0),
            Polarity::Negative => Some(-1.0),
            Polarity::Auto => None,
        }
    }
}

impl TryFrom<serde_json::Value> for Polarity {
    type Error = String;

    fn try_from(v: serde_json::Value) -> Result<Self, String> {
        match &v {
            serde_json::Value::Number(n) if n.as_f64() == Some(1.0) => Ok(Polarity::Positive),
            serde_json::Value::Number(n) if n.as_f64() == Some(-1.0) => Ok(Polarity::Negative),
            serde_json::Value::String(s) if s == "auto" => Ok(Polarity::Auto),
            _ => Err(format!("polarity must be 1, -1 or \"auto\", got {v}")),
        }
    }
}

impl From<Polarity> for serde_json::Value {
    fn from(p: Polarity) -> Self {
        match p {
            Polarity::Positive => 1.into(),
            Polarity::Negative => (-1).into(),
            Polarity::Auto => "auto".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoConfig {
    pub kp_ma_per_v: f64,
    pub ki_ma_per_v_s: f64,
    pub output_limit_ma: f64,
    pub update_rate_hz: f64,
    pub polarity: Polarity,
}

impl Default for ServoConfig {
    /// Integral gain for a 300 Hz unity-gain frequency on the default
    /// discriminator, with the PI zero on the lock-in filter pole; see
    /// `calibration::servo_gains`.
    fn default() -> Self {
        Self {
            kp_ma_per_v: 74.79,
            ki_ma_per_v_s: 7479.0,
            output_limit_ma: 2000.0,
            update_rate_hz: 2600.0,
            polarity: Polarity::Auto,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), ServoError> {
        if !(self.output_limit_ma.is_finite() && self.output_limit_ma > 0.0) {
            return Err(ServoError::Invalid { field: "output_limit_ma", reason: "must be > 0" });
        }
        if !(self.update_rate_hz.is_finite() && self.update_rate_hz > 0.0) {
            return Err(ServoError::Invalid { field: "update_rate_hz", reason: "must be > 0" });
        }
        if !(self.ki_ma_per_v_s.is_finite() && self.ki_ma_per_v_s >= 0.0) {
            return Err(ServoError::Invalid { field: "ki_ma_per_v_s", reason: "must be >= 0" });
        }
        if !self.kp_ma_per_v.is_finite() {
            return Err(ServoError::Invalid { field: "kp_ma_per_v", reason: "must be finite" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ServoState {
    /// Integral term in output units, polarity included.
    pub integrator_ma: f64,
    pub last_output_ma: f64,
    pub engaged: bool,
    /// Resolved feedback sign; 0 until engaged.
    pub sign: f64,
}

impl ServoState {
    pub fn engage(cfg: &ServoConfig, resolved: Option<Polarity>) -> Self {
        let sign = resolved.and_then(Polarity::sign).or(cfg.polarity.sign()).unwrap_or(0.0);
        Self { integrator_ma: 0.0, last_output_ma: 0.0, engaged: sign != 0.0, sign }
    }

    /// Engage without a step in the output: the integrator absorbs the
    /// proportional term of the error present at engagement.
    pub fn engage_bumpless(cfg: &ServoConfig, resolved: Option<Polarity>, error_v: f64, output_ma: f64) -> Self {
        let mut s = Self::engage(cfg, resolved);
        if s.engaged {
            let lim = cfg.output_limit_ma;
            s.integrator_ma = (output_ma - s.sign * cfg.kp_ma_per_v * error_v).clamp(-lim, lim);
            s.last_output_ma = output_ma.clamp(-lim, lim);
        }
        s
    }
}

/// Functional form of [`servo_step_mut`].
pub fn servo_step(state: &ServoState, cfg: &ServoConfig, error_v: f64, dt: f64) -> (ServoState, f64) {
    let mut s = *state;
    let out = servo_step_mut(&mut s, cfg, error_v, dt);
    (s, out)
}

/// `out = clamp(s·kp·e + I', ±limit)`, `I' = I + s·ki·e·dt`. The integrator
/// is frozen whenever the unclamped output is saturated and the increment
/// would drive it further out. A disengaged servo holds its output.
#[inline]
pub fn servo_step_mut(state: &mut ServoState, cfg: &ServoConfig, error_v: f64, dt: f64) -> f64 {
    if !state.engaged {
        return state.last_output_ma;
    }
    let lim = cfg.output_limit_ma;
    let p = state.sign * cfg.kp_ma_per_v * error_v;
    let inc = state.sign * cfg.ki_ma_per_v_s * error_v * dt;
    let candidate = p + state.integrator_ma + inc;
    if !(candidate.abs() > lim && inc * candidate > 0.0) {
        state.integrator_ma = (state.integrator_ma + inc).clamp(-lim, lim);
    }
    let out = (p + state.integrator_ma).clamp(-lim, lim);
    state.last_output_ma = out;
    out
}

/// Something whose settled error signal can be read at a chosen current.
pub trait Plant {
    fn settled_error(&mut self, control_ma: f64) -> f64;
}

/// Dither the current by `±dither_ma` about `center_ma`, measure the error
/// slope, and return the polarity that makes the loop negative feedback.
pub fn auto_polarity<P: Plant + ?Sized>(
    plant: &mut P,
    center_ma: f64,
    dither_ma: f64,
    min_slope_v_per_ma: f64,
) -> Result<Polarity, ServoError> {
    let up = plant.settled_error(center_ma + dither_ma);
    let down = plant.settled_error(center_ma - dither_ma);
    let slope = (up - down) / (2.0 * dither_ma);
    if !(slope.abs() >= min_slope_v_per_ma) {
        return Err(ServoError::Acquisition { slope_v_per_ma: slope, min_v_per_ma: min_slope_v_per_ma });
    }
    Ok(Polarity::from_sign(-slope))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockStatus {
    pub in_lock: bool,
    /// Time of the last state change (lock acquired, or last excursion).
    pub since_s: f64,
    pub rms_error_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockTransition {
    pub t_s: f64,
    pub in_lock: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockDetector {
    pub threshold_hz: f64,
    pub dwell_s: f64,
}

impl Default for LockDetector {
    fn default() -> Self {
        Self { threshold_hz: 50e3, dwell_s: 60.0 }
    }
}

impl LockDetector {
    fn dwell_gates(&self, gate_s: f64) -> usize {
        ((self.dwell_s / gate_s) - 1e-9).ceil().max(1.0) as usize
    }

    /// Status at the end of the record. `error_v` is the trailing error
    /// signal used for the rms figure (may be empty).
    pub fn status(&self, offsets_hz: &[f64], gate_s: f64, engaged: bool, error_v: &[f64]) -> LockStatus {
        let need = self.dwell_gates(gate_s);
        let run = offsets_hz.iter().rev().take_while(|o| o.abs() < self.threshold_hz).count();
        let n = offsets_hz.len();
        let in_lock = engaged && run >= need;
        let since_s = if in_lock { (n - run + need) as f64 * gate_s } else { (n - run) as f64 * gate_s };
        let rms_error_v = if error_v.is_empty() {
            0.0
        } else {
            (error_v.iter().map(|e| e * e).sum::<f64>() / error_v.len() as f64).sqrt()
        };
        LockStatus { in_lock, since_s, rms_error_v }
    }

    /// Lock state changes, evaluated at the end of every gate.
    pub fn timeline(&self, offsets_hz: &[f64], gate_s: f64, engaged: bool) -> Vec<LockTransition> {
        let need = self.dwell_gates(gate_s);
        let mut out = Vec::new();
        let mut run = 0usize;
        let mut state = None;
        for (k, o) in offsets_hz.iter().enumerate() {
            run = if o.abs() < self.threshold_hz { run + 1 } else { 0 };
            let now = engaged && run >= need;
            if state != Some(now) {
                out.push(LockTransition { t_s: (k + 1) as f64 * gate_s, in_lock: now });
                state = Some(now);
            }
        }
        out
    }
}

/// `in_lock` over a gated record of beat offsets.
pub fn in_lock(beat_offsets_hz: &[f64], gate_s: f64, threshold_hz: f64, dwell_s: f64) -> LockStatus {
    LockDetector { threshold_hz, dwell_s }.status(beat_offsets_hz, gate_s, true, &[])
}
