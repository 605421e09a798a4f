//! Pump-current actuated Nd:YVO4 laser.
//!
//! The carrier is tracked as an offset from `nominal_freq_1064_hz` so that
//! Hz-level noise is not lost against the 2.8e14 Hz carrier.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod noise;

pub use noise::{white_fm_sample, FlickerBank, NoiseState};

#[derive(Debug, Error, PartialEq)]
pub enum LaserError {
    #[error("time step must be positive and finite (got {0})")]
    BadStep(f64),
    #[error("invalid laser field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorParams {
    pub freq_gain_hz_per_ma: f64,
    pub power_gain_w_per_ma: f64,
    pub thermal_tau_s: f64,
    pub nominal_freq_1064_hz: f64,
    pub nominal_power_w: f64,
}

impl Default for ActuatorParams {
    fn default() -> Self {
        Self {
            freq_gain_hz_per_ma: -1.0e6,
            power_gain_w_per_ma: 1.0e-7,
            thermal_tau_s: 50e-6,
            // a10 at the compact laser's cell, 50 kHz inside the capture lobe.
            nominal_freq_1064_hz: 281_614_302_178_500.0 + 50e3,
            nominal_power_w: 3e-3,
        }
    }
}

impl ActuatorParams {
    pub fn validate(&self) -> Result<(), LaserError> {
        if !self.freq_gain_hz_per_ma.is_finite() || self.freq_gain_hz_per_ma == 0.0 {
            return Err(LaserError::Invalid {
                field: "freq_gain_hz_per_ma",
                reason: "must be finite and non-zero",
            });
        }
        if !self.power_gain_w_per_ma.is_finite() {
            return Err(LaserError::Invalid { field: "power_gain_w_per_ma", reason: "must be finite" });
        }
        if !(self.thermal_tau_s.is_finite() && self.thermal_tau_s >= 0.0) {
            return Err(LaserError::Invalid { field: "thermal_tau_s", reason: "must be >= 0" });
        }
        if !(self.nominal_freq_1064_hz.is_finite() && self.nominal_freq_1064_hz > 0.0) {
            return Err(LaserError::Invalid { field: "nominal_freq_1064_hz", reason: "must be > 0" });
        }
        if !(self.nominal_power_w.is_finite() && self.nominal_power_w > 0.0) {
            return Err(LaserError::Invalid { field: "nominal_power_w", reason: "must be > 0" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationConfig {
    pub f_mod_hz: f64,
    /// Peak deviation of the 1064 nm carrier.
    pub depth_hz: f64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        // 0.25 MHz at 1064 nm is 0.5 MHz at 532 nm, the a10 half width.
        Self { f_mod_hz: 2600.0, depth_hz: 0.25e6 }
    }
}

impl ModulationConfig {
    pub fn validate(&self) -> Result<(), LaserError> {
        if !(self.f_mod_hz.is_finite() && self.f_mod_hz > 0.0) {
            return Err(LaserError::Invalid { field: "f_mod_hz", reason: "must be > 0" });
        }
        if !(self.depth_hz.is_finite() && self.depth_hz >= 0.0) {
            return Err(LaserError::Invalid { field: "depth_hz", reason: "must be >= 0" });
        }
        Ok(())
    }

    /// Modulation index of the 1064 nm carrier.
    pub fn beta(&self) -> f64 {
        self.depth_hz / self.f_mod_hz
    }
}

/// Power-law coefficients of the fractional-frequency PSD
/// `S_y(f) = h0 + h_m1/f + h_m2/f²`, plus a deterministic drift.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub h0: f64,
    pub h_m1: f64,
    pub h_m2: f64,
    pub drift_hz_per_s: f64,
}

impl NoiseSpec {
    pub const QUIET: NoiseSpec = NoiseSpec { h0: 0.0, h_m1: 0.0, h_m2: 0.0, drift_hz_per_s: 0.0 };

    pub fn validate(&self) -> Result<(), LaserError> {
        for (field, v) in [("h0", self.h0), ("h_m1", self.h_m1), ("h_m2", self.h_m2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LaserError::Invalid { field, reason: "must be finite and >= 0" });
            }
        }
        if !self.drift_hz_per_s.is_finite() {
            return Err(LaserError::Invalid { field: "drift_hz_per_s", reason: "must be finite" });
        }
        Ok(())
    }

    /// Allan variance predicted by the power-law model at the given carrier.
    pub fn allan_variance(&self, tau_s: f64, nu0_hz: f64) -> f64 {
        let drift = self.drift_hz_per_s * tau_s / (std::f64::consts::SQRT_2 * nu0_hz);
        self.h0 / (2.0 * tau_s)
            + 2.0 * std::f64::consts::LN_2 * self.h_m1
            + 2.0 * std::f64::consts::PI.powi(2) / 3.0 * self.h_m2 * tau_s
            + drift * drift
    }
}

/// Shipped free-running noise of the compact laser.
///
/// Produced by `calibration::fit_free_run_noise` against the free-run
/// Allan targets; `examples/fit_defaults.rs` regenerates these numbers.
pub fn calibrate_default_noise() -> NoiseSpec {
    NoiseSpec {
        h0: 0.0,
        h_m1: 0.0,
        h_m2: 4.997e-20,
        drift_hz_per_s: -12.126e3,
    }
}

/// Exact frequency doubling.
#[inline]
pub fn to_532(freq_1064_hz: f64) -> f64 {
    2.0 * freq_1064_hz
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaserState {
    pub t_s: f64,
    /// Carrier including noise and actuation, modulation excluded.
    pub carrier_freq_1064_hz: f64,
    /// `carrier_freq_1064_hz - nominal`, kept at full precision.
    pub carrier_offset_hz: f64,
    pub lagged_current_ma: f64,
    pub output_power_w: f64,
    pub noise: NoiseState,
}

impl LaserState {
    pub fn new(params: &ActuatorParams) -> Self {
        Self {
            t_s: 0.0,
            carrier_freq_1064_hz: params.nominal_freq_1064_hz,
            carrier_offset_hz: 0.0,
            lagged_current_ma: 0.0,
            output_power_w: params.nominal_power_w,
            noise: NoiseState::default(),
        }
    }

    /// Start with the lagged current already settled at `current_ma`.
    pub fn settled_at(params: &ActuatorParams, current_ma: f64) -> Self {
        let mut s = Self::new(params);
        s.lagged_current_ma = current_ma;
        s.carrier_offset_hz = params.freq_gain_hz_per_ma * current_ma;
        s.carrier_freq_1064_hz = params.nominal_freq_1064_hz + s.carrier_offset_hz;
        s.output_power_w = (params.nominal_power_w + params.power_gain_w_per_ma * current_ma).max(0.0);
        s
    }

    /// Functional form of [`LaserState::step`].
    pub fn advance<R: Rng + ?Sized>(
        &self,
        params: &ActuatorParams,
        noise: &NoiseSpec,
        control_ma: f64,
        dt: f64,
        rng: &mut R,
    ) -> Result<LaserState, LaserError> {
        let mut next = self.clone();
        next.step(params, noise, control_ma, dt, rng)?;
        Ok(next)
    }

    /// Advance by `dt` with the pump current commanded to `control_ma`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        params: &ActuatorParams,
        noise: &NoiseSpec,
        control_ma: f64,
        dt: f64,
        rng: &mut R,
    ) -> Result<(), LaserError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(LaserError::BadStep(dt));
        }
        if params.thermal_tau_s == 0.0 {
            self.lagged_current_ma = control_ma;
        } else {
            let a = (-dt / params.thermal_tau_s).exp();
            self.lagged_current_ma = control_ma + (self.lagged_current_ma - control_ma) * a;
        }
        self.t_s += dt;

        let nu0 = params.nominal_freq_1064_hz;
        let y = self.noise.step(noise, dt, rng);
        self.carrier_offset_hz = params.freq_gain_hz_per_ma * self.lagged_current_ma
            + noise.drift_hz_per_s * self.t_s
            + nu0 * y;
        self.carrier_freq_1064_hz = nu0 + self.carrier_offset_hz;
        self.output_power_w =
            (params.nominal_power_w + params.power_gain_w_per_ma * self.lagged_current_ma).max(0.0);
        Ok(())
    }

    pub fn freq_532_hz(&self) -> f64 {
        to_532(self.carrier_freq_1064_hz)
    }
}

/// Carrier plus the applied sinusoidal deviation at the state's time.
pub fn instantaneous_freq(state: &LaserState, modulation: &ModulationConfig) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * modulation.f_mod_hz * state.t_s;
    state.carrier_freq_1064_hz + modulation.depth_hz * phase.sin()
}

/// Output power including the intensity modulation that rides on the
/// modulation current (the physical RAM source).
pub fn instantaneous_power(
    state: &LaserState,
    params: &ActuatorParams,
    modulation: &ModulationConfig,
) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * modulation.f_mod_hz * state.t_s;
    let mod_current = modulation.depth_hz / params.freq_gain_hz_per_ma * phase.sin();
    (state.output_power_w + params.power_gain_w_per_ma * mod_current).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{allan_deviation, counter, FreqSeries};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet_params() -> ActuatorParams {
        ActuatorParams { thermal_tau_s: 0.0, ..ActuatorParams::default() }
    }

    #[test]
    fn quiescent_carrier_is_constant() {
        let p = ActuatorParams::default();
        let mut s = LaserState::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            s.step(&p, &NoiseSpec::QUIET, 0.0, 1e-3, &mut rng).unwrap();
            assert_eq!(s.carrier_freq_1064_hz, p.nominal_freq_1064_hz);
            assert_eq!(s.output_power_w, p.nominal_power_w);
        }
    }

    #[test]
    fn current_step_without_lag_is_pure_gain() {
        let p = quiet_params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s0 = LaserState::new(&p);
        let s1 = s0.advance(&p, &NoiseSpec::QUIET, 0.37, 1e-3, &mut rng).unwrap();
        assert_eq!(s1.carrier_offset_hz, p.freq_gain_hz_per_ma * 0.37);
        assert_eq!(
            s1.carrier_freq_1064_hz - s0.carrier_freq_1064_hz,
            p.nominal_freq_1064_hz + p.freq_gain_hz_per_ma * 0.37 - p.nominal_freq_1064_hz
        );
    }

    #[test]
    fn thermal_lag_is_first_order() {
        let p = ActuatorParams { thermal_tau_s: 0.01, ..ActuatorParams::default() };
        let mut s = LaserState::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            s.step(&p, &NoiseSpec::QUIET, 1.0, 1e-4, &mut rng).unwrap();
        }
        assert!((s.lagged_current_ma - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_step() {
        let p = ActuatorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = LaserState::new(&p);
        assert_eq!(
            s.advance(&p, &NoiseSpec::QUIET, 0.0, 0.0, &mut rng),
            Err(LaserError::BadStep(0.0))
        );
        assert!(s.advance(&p, &NoiseSpec::QUIET, 0.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn to_532_doubles_exactly() {
        assert_eq!(to_532(281_614_302_191_100.0), 563_228_604_382_200.0);
        assert_eq!(to_532(0.0), 0.0);
        let (a, d) = (1e14, 12_345.678);
        assert_eq!(to_532(a + d) - to_532(a), 2.0 * ((a + d) - a));
        assert_eq!(to_532(d), 2.0 * d);
    }

    #[test]
    fn modulation_zero_at_period_boundaries() {
        let p = ActuatorParams::default();
        let m = ModulationConfig::default();
        let mut s = LaserState::new(&p);
        assert_eq!(instantaneous_freq(&s, &ModulationConfig { depth_hz: 0.0, ..m }), s.carrier_freq_1064_hz);
        for k in [1.0, 7.0, 100.0] {
            s.t_s = k / m.f_mod_hz;
            let dev = instantaneous_freq(&s, &m) - s.carrier_freq_1064_hz;
            // sin(2πk) is ~1e-13 in floating point; compare the deviation.
            assert!(dev.abs() < 1e-6 * m.depth_hz, "{dev}");
        }
    }

    #[test]
    fn period_average_is_carrier() {
        let p = ActuatorParams::default();
        let m = ModulationConfig::default();
        let mut s = LaserState::new(&p);
        let n = 4096;
        let mut acc = 0.0;
        for k in 0..n {
            s.t_s = (k as f64 + 0.5) / (n as f64 * m.f_mod_hz);
            acc += instantaneous_freq(&s, &m) - s.carrier_freq_1064_hz;
        }
        let mean = s.carrier_freq_1064_hz + acc / n as f64;
        assert!(((mean - s.carrier_freq_1064_hz) / s.carrier_freq_1064_hz).abs() < 1e-9);
    }

    #[test]
    fn default_noise_is_valid_and_matches_targets() {
        let n = calibrate_default_noise();
        n.validate().unwrap();
        let nu0 = ActuatorParams::default().nominal_freq_1064_hz;
        let s1 = n.allan_variance(1.0, nu0).sqrt();
        assert!(s1 > 5.5e-10 / 2.0 && s1 < 5.5e-10 * 2.0, "{s1}");
        let s700 = n.allan_variance(700.0, nu0).sqrt();
        assert!(s700 > 1.3e-8 && s700 < 5.2e-8, "{s700}");
        assert!((n.drift_hz_per_s * 3600.0).abs() > 10e6);
    }

    fn white_series(h0: f64, seed: u64, n_gates: usize) -> FreqSeries {
        let p = quiet_params();
        let spec = NoiseSpec { h0, ..NoiseSpec::QUIET };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = LaserState::new(&p);
        let dt = 0.1;
        let mut dense = Vec::with_capacity(n_gates * 10);
        for _ in 0..n_gates * 10 {
            s.step(&p, &spec, 0.0, dt, &mut rng).unwrap();
            dense.push(s.carrier_offset_hz);
        }
        counter(&dense, dt, 1.0, p.nominal_freq_1064_hz).unwrap()
    }

    #[test]
    fn white_fm_allan_law() {
        let h0 = 2e-20;
        let taus = [1.0, 4.0, 16.0, 64.0];
        let mut acc = [0.0; 4];
        for seed in 0..20 {
            let fs = white_series(h0, seed, 8192);
            let c = allan_deviation(&fs, &taus, false).unwrap();
            for (a, s) in acc.iter_mut().zip(&c.sigma_y) {
                *a += s * s / 20.0;
            }
        }
        for (tau, var) in taus.iter().zip(acc) {
            let expect = (h0 / (2.0 * tau)).sqrt();
            assert!((var.sqrt() / expect - 1.0).abs() < 0.05, "tau {tau}: {} vs {expect}", var.sqrt());
        }
    }

    #[test]
    fn trajectories_are_deterministic() {
        let p = ActuatorParams::default();
        let spec = NoiseSpec { h0: 1e-22, h_m1: 1e-24, h_m2: 1e-20, drift_hz_per_s: 3.0 };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut s = LaserState::new(&p);
            let mut out = Vec::new();
            for k in 0..2000 {
                s.step(&p, &spec, (k as f64 * 0.01).sin(), 1e-3, &mut rng).unwrap();
                out.push(s.carrier_freq_1064_hz.to_bits());
            }
            out
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn actuator_is_affine(i0 in -50.0f64..50.0, di in -5.0f64..5.0) {
            let p = ActuatorParams { thermal_tau_s: 1e-3, ..ActuatorParams::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let settle = |target: f64, rng: &mut ChaCha8Rng| {
                let mut s = LaserState::new(&p);
                for _ in 0..200 {
                    s.step(&p, &NoiseSpec::QUIET, target, 1e-4, rng).unwrap();
                }
                s.carrier_offset_hz
            };
            let a = settle(i0, &mut rng);
            let b = settle(i0 + di, &mut rng);
            // 20 time constants: residual lag e^-20 of the step.
            let slope_err = (b - a) - p.freq_gain_hz_per_ma * di;
            prop_assert!(slope_err.abs() <= 1e-6 * p.freq_gain_hz_per_ma.abs() * (i0.abs() + di.abs() + 1.0));
        }

        #[test]
        fn power_never_negative(u in -1e6f64..1e6) {
            let p = quiet_params();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let s = LaserState::new(&p).advance(&p, &NoiseSpec::QUIET, u, 1e-3, &mut rng).unwrap();
            prop_assert!(s.output_power_w >= 0.0);
            prop_assert!(instantaneous_power(&s, &p, &ModulationConfig::default()) >= 0.0);
        }
    }
}
