//! Settled 3f discriminator on a detuning grid, and the quasi-static chain
//! built on it.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{harmonic_coefficient, DetectionError, DetectorConfig, LockInConfig, LowPass, RamBaseline, RamConfig};
use crate::iodine_reference::ReferenceLineModel;
use crate::laser::{ActuatorParams, ModulationConfig};

/// Grid spacing of the discriminator table at 532 nm.
pub const TABLE_STEP_HZ: f64 = 2.5e3;

/// Settled lock-in output versus 532 nm detuning from a target component,
/// at the nominal probe power and with static RAM excluded.
#[derive(Debug, Clone)]
pub struct DiscriminatorTable {
    model: ReferenceLineModel,
    component_offset_hz: f64,
    depth_532_hz: f64,
    power_mod_frac: f64,
    phase_rad: f64,
    /// `gain·R·P0/2`: volts per unit Fourier coefficient.
    scale_v: f64,
    start_hz: f64,
    step_hz: f64,
    values_v: Vec<f64>,
}

impl DiscriminatorTable {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        model: &ReferenceLineModel,
        component: &str,
        params: &ActuatorParams,
        modulation: &ModulationConfig,
        lockin: &LockInConfig,
        detector: &DetectorConfig,
        half_span_hz: f64,
        step_hz: f64,
    ) -> Result<Self, DetectionError> {
        let c = model
            .component(component)
            .ok_or_else(|| DetectionError::UnknownComponent(component.to_string()))?;
        let n_half = (half_span_hz / step_hz).ceil() as usize;
        let mut t = Self {
            model: model.clone(),
            component_offset_hz: c.offset_hz,
            depth_532_hz: 2.0 * modulation.depth_hz,
            power_mod_frac: params.power_gain_w_per_ma * (modulation.depth_hz / params.freq_gain_hz_per_ma)
                / params.nominal_power_w,
            phase_rad: lockin.phase_rad,
            scale_v: lockin.gain * detector.responsivity_v_per_w * params.nominal_power_w / 2.0,
            start_hz: -(n_half as f64) * step_hz,
            step_hz,
            values_v: Vec::with_capacity(2 * n_half + 1),
        };
        for i in 0..=2 * n_half {
            let x = t.start_hz + i as f64 * step_hz;
            let v = t.direct(x);
            t.values_v.push(v);
        }
        Ok(t)
    }

    /// Default grid: ±10 FWHM of the target at `TABLE_STEP_HZ`.
    pub fn for_component(
        model: &ReferenceLineModel,
        component: &str,
        params: &ActuatorParams,
        modulation: &ModulationConfig,
        lockin: &LockInConfig,
        detector: &DetectorConfig,
    ) -> Result<Self, DetectionError> {
        let fwhm = model
            .component(component)
            .ok_or_else(|| DetectionError::UnknownComponent(component.to_string()))?
            .fwhm_hz;
        let half = 10.0 * fwhm + 4.0 * modulation.depth_hz;
        Self::build(model, component, params, modulation, lockin, detector, half, TABLE_STEP_HZ)
    }

    /// Quadrature evaluation, bypassing the grid.
    pub fn direct(&self, delta_532_hz: f64) -> f64 {
        self.scale_v
            * harmonic_coefficient(
                &self.model,
                self.component_offset_hz + delta_532_hz,
                self.depth_532_hz,
                self.power_mod_frac,
                3,
                self.phase_rad,
                0.0,
            )
    }

    /// Linear interpolation on the grid; quadrature outside it.
    #[inline]
    pub fn eval(&self, delta_532_hz: f64) -> f64 {
        let u = (delta_532_hz - self.start_hz) / self.step_hz;
        if !(u >= 0.0) || u >= (self.values_v.len() - 1) as f64 {
            return self.direct(delta_532_hz);
        }
        let i = u as usize;
        let f = u - i as f64;
        self.values_v[i] + f * (self.values_v[i + 1] - self.values_v[i])
    }

    pub fn grid(&self) -> (Vec<f64>, &[f64]) {
        let x = (0..self.values_v.len()).map(|i| self.start_hz + i as f64 * self.step_hz).collect();
        (x, &self.values_v)
    }

    pub fn peak_to_peak_v(&self) -> f64 {
        let hi = self.values_v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.values_v.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn peak_abs_v(&self) -> f64 {
        self.values_v.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Slope at the component center, volts per 532 nm hertz.
    pub fn slope_v_per_hz(&self) -> f64 {
        let h = 100.0;
        (self.direct(h) - self.direct(-h)) / (2.0 * h)
    }

    /// Detuning of the extremum nearest the center on the positive side.
    pub fn lobe_hz(&self) -> f64 {
        let i0 = self.values_v.len() / 2;
        let mut best = i0;
        for i in i0..self.values_v.len() - 1 {
            if self.values_v[i + 1].abs() < self.values_v[i].abs() {
                best = i;
                break;
            }
            best = i + 1;
        }
        self.start_hz + best as f64 * self.step_hz
    }

    /// Root of `table(δ) + offset_v = 0` inside the central lobe pair.
    pub fn lock_point_hz(&self, offset_v: f64) -> Option<f64> {
        let lobe = self.lobe_hz();
        let f = |x: f64| self.direct(x) + offset_v;
        let (mut a, mut b) = (-lobe, lobe);
        let (mut fa, fb) = (f(a), f(b));
        if fa.signum() == fb.signum() {
            return None;
        }
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            let fm = f(m);
            if fm == 0.0 || (b - a) < 1e-6 {
                return Some(m);
            }
            if fm.signum() == fa.signum() {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
        }
        Some(0.5 * (a + b))
    }

    pub fn nominal_power_scale_v(&self) -> f64 {
        self.scale_v
    }
}

/// Error signal at the servo update rate: settled discriminator scaled by
/// probe power, plus demodulated white noise, low-passed, plus the RAM
/// baseline.
#[derive(Debug, Clone)]
pub struct QuasiStaticChain {
    pub table: DiscriminatorTable,
    lpf: LowPass,
    baseline: RamBaseline,
    noise_sigma_v: f64,
    nominal_power_w: f64,
    stark_hz_per_w: f64,
    dt: f64,
}

impl QuasiStaticChain {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        table: DiscriminatorTable,
        params: &ActuatorParams,
        lockin: &LockInConfig,
        detector: &DetectorConfig,
        ram: &RamConfig,
        stark_hz_per_w: f64,
        update_rate_hz: f64,
        rng: &mut R,
    ) -> Self {
        let dt = 1.0 / update_rate_hz;
        let density = lockin.demodulated_density(detector.noise_v_per_rthz);
        Self {
            table,
            lpf: LowPass::new(lockin.lpf_tau_s, dt),
            baseline: RamBaseline::new(ram, rng),
            noise_sigma_v: density * (update_rate_hz / 2.0).sqrt(),
            nominal_power_w: params.nominal_power_w,
            stark_hz_per_w,
            dt,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Current output: filter state plus baseline.
    pub fn output_v(&self) -> f64 {
        self.lpf.y + self.baseline.value()
    }

    pub fn baseline_v(&self) -> f64 {
        self.baseline.value()
    }

    /// Noise-free settled output with only the static part of the baseline.
    pub fn settled_v(&self, delta_532_hz: f64, power_w: f64, static_offset_v: f64) -> f64 {
        let shift = self.stark_hz_per_w * 2.0 * power_w;
        self.table.eval(delta_532_hz - shift) * power_w / self.nominal_power_w + static_offset_v
    }

    /// Pre-charge the filter to its settled value at `delta_532_hz`.
    pub fn settle_at(&mut self, delta_532_hz: f64, power_w: f64) {
        let shift = self.stark_hz_per_w * 2.0 * power_w;
        self.lpf.y = self.table.eval(delta_532_hz - shift) * power_w / self.nominal_power_w;
    }

    /// One update. `delta_532_hz` is the 532 nm carrier detuning from the
    /// unshifted component center; `power_w` is the probe power.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, delta_532_hz: f64, power_w: f64, det_rng: &mut R, ram_rng: &mut R) -> f64 {
        // Pump and probe both light-shift the dip.
        let shift = self.stark_hz_per_w * 2.0 * power_w;
        let mut raw = self.table.eval(delta_532_hz - shift) * power_w / self.nominal_power_w;
        if self.noise_sigma_v > 0.0 {
            let z: f64 = det_rng.sample(StandardNormal);
            raw += self.noise_sigma_v * z;
        }
        let out = self.lpf.step(raw) + self.baseline.value();
        self.baseline.step(self.dt, ram_rng);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iodine_reference::ReferenceLineModel;

    fn table() -> DiscriminatorTable {
        DiscriminatorTable::for_component(
            &ReferenceLineModel::bundled(),
            "a10",
            &ActuatorParams::default(),
            &ModulationConfig::default(),
            &LockInConfig::default(),
            &DetectorConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn interpolation_tracks_quadrature() {
        let t = table();
        let pk = t.peak_abs_v();
        for k in -40..=40 {
            let x = k as f64 * 61_234.5;
            assert!((t.eval(x) - t.direct(x)).abs() < 1e-4 * pk, "{x}");
        }
        let far = 50e6;
        assert_eq!(t.eval(far), t.direct(far));
    }

    #[test]
    fn center_is_a_root_and_odd() {
        let t = table();
        let pk = t.peak_abs_v();
        assert!(t.eval(0.0).abs() < 1e-3 * pk);
        for k in 1..100 {
            let x = k as f64 * 20e3;
            assert!((t.eval(x) + t.eval(-x)).abs() < 2e-3 * pk, "{x}");
        }
        assert!(t.lock_point_hz(0.0).unwrap().abs() < 0.01 * 1e6);
    }

    #[test]
    fn ram_shift_law() {
        let t = table();
        let d = t.slope_v_per_hz();
        let pk = t.peak_abs_v();
        for frac in [0.02, 0.05, 0.1, 0.2] {
            let b = frac * pk;
            let shift = t.lock_point_hz(b).unwrap();
            let lin = -b / d;
            assert!((shift / lin - 1.0).abs() < 0.10, "{frac}: {shift} vs {lin}");
        }
    }

    #[test]
    fn unknown_component() {
        let r = DiscriminatorTable::for_component(
            &ReferenceLineModel::bundled(),
            "zz",
            &ActuatorParams::default(),
            &ModulationConfig::default(),
            &LockInConfig::default(),
            &DetectorConfig::default(),
        );
        assert!(matches!(r, Err(DetectionError::UnknownComponent(_))));
    }
}
