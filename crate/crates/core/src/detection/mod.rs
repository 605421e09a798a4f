//! Photodetection, RAM corruption and 3f lock-in demodulation.
//!
//! Two fidelity levels share the same physics. The time-domain chain in
//! [`chain`] samples the detector at `sample_rate_hz` and demodulates it
//! sample by sample. The quasi-static chain in [`table`] replaces the
//! demodulator by its settled response, precomputed on a detuning grid by
//! Fourier quadrature of the modulated transmission, and adds the
//! demodulated noise and RAM baseline at the servo update rate.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iodine_reference::ReferenceLineModel;

pub mod chain;
pub mod table;

pub use chain::{
    calibrate_phase, scan_error_signal, scan_stats, settled_enbw_hz, ScanSetup, ScanStats, ScanTable,
    TimeDomainChain, SETTLE_PERIODS,
};
pub use table::{DiscriminatorTable, QuasiStaticChain};

/// Quadrature points per modulation period for Fourier coefficients.
pub const QUADRATURE_POINTS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum DetectionError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid detection field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("modulation depth {depth_hz} Hz outside the small-depth domain (<= {limit_hz} Hz)")]
    DepthOutOfDomain { depth_hz: f64, limit_hz: f64 },
    #[error("scan grid is not strictly monotone at index {0}")]
    NonMonotoneGrid(usize),
    #[error("dwell {dwell_s} s per point is below 10 lock-in time constants ({min_s} s)")]
    DwellTooShort { dwell_s: f64, min_s: f64 },
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DetectionError {
    DetectionError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub responsivity_v_per_w: f64,
    pub noise_v_per_rthz: f64,
    pub sample_rate_hz: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            responsivity_v_per_w: 500.0,
            // Calibrated so the a10 trace reaches SNR 78 in 100 Hz; see
            // `calibration::detector_noise_for_snr`.
            noise_v_per_rthz: 7.311e-6,
            sample_rate_hz: 1e5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, f_mod_hz: f64) -> Result<(), DetectionError> {
        if !(self.responsivity_v_per_w.is_finite() && self.responsivity_v_per_w > 0.0) {
            return Err(invalid("responsivity_v_per_w", "must be > 0"));
        }
        if !(self.noise_v_per_rthz.is_finite() && self.noise_v_per_rthz >= 0.0) {
            return Err(invalid("noise_v_per_rthz", "must be >= 0"));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 6.0 * f_mod_hz) {
            return Err(invalid("sample_rate_hz", format!("must exceed 2 x 3 x f_mod = {} Hz", 6.0 * f_mod_hz)));
        }
        Ok(())
    }

    /// Per-sample standard deviation of the white detector noise.
    pub fn sample_sigma_v(&self) -> f64 {
        self.noise_v_per_rthz * (self.sample_rate_hz / 2.0).sqrt()
    }
}

/// Residual amplitude modulation at the demodulated-baseline level, plus an
/// etalon ripple on the optical transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RamConfig {
    pub static_offset_v: f64,
    pub walk_sigma_v_per_rts: f64,
    /// Relaxation time of the baseline walk; 0 gives a pure random walk.
    #[serde(default)]
    pub walk_relax_s: f64,
    pub etalon_amp: f64,
    pub etalon_fsr_hz: f64,
}

impl Default for RamConfig {
    fn default() -> Self {
        // Fitted values; see `calibration::static_offset_for_shift` and
        // `calibration::ram_walk_for_peak`.
        Self {
            static_offset_v: 3.1623e-3,
            walk_sigma_v_per_rts: 2.125e-5,
            walk_relax_s: 1902.1,
            etalon_amp: 0.0,
            etalon_fsr_hz: 1.5e9,
        }
    }
}

impl RamConfig {
    pub const OFF: RamConfig = RamConfig {
        static_offset_v: 0.0,
        walk_sigma_v_per_rts: 0.0,
        walk_relax_s: 0.0,
        etalon_amp: 0.0,
        etalon_fsr_hz: 1.5e9,
    };

    pub fn validate(&self) -> Result<(), DetectionError> {
        if !self.static_offset_v.is_finite() {
            return Err(invalid("static_offset_v", "must be finite"));
        }
        if !(self.walk_sigma_v_per_rts.is_finite() && self.walk_sigma_v_per_rts >= 0.0) {
            return Err(invalid("walk_sigma_v_per_rts", "must be >= 0"));
        }
        if !(self.walk_relax_s.is_finite() && self.walk_relax_s >= 0.0) {
            return Err(invalid("walk_relax_s", "must be >= 0"));
        }
        if !(self.etalon_amp.is_finite() && self.etalon_amp.abs() < 1.0) {
            return Err(invalid("etalon_amp", "must satisfy |amp| < 1"));
        }
        if self.etalon_amp != 0.0 && !(self.etalon_fsr_hz.is_finite() && self.etalon_fsr_hz > 0.0) {
            return Err(invalid("etalon_fsr_hz", "must be > 0 when etalon_amp != 0"));
        }
        Ok(())
    }

    /// Stationary standard deviation of the baseline walk (infinite for a
    /// pure random walk with nonzero rate).
    pub fn stationary_sigma_v(&self) -> f64 {
        if self.walk_sigma_v_per_rts == 0.0 {
            0.0
        } else if self.walk_relax_s == 0.0 {
            f64::INFINITY
        } else {
            self.walk_sigma_v_per_rts * (self.walk_relax_s / 2.0).sqrt()
        }
    }

    /// Transmission ripple factor at an absolute 532 nm frequency.
    pub fn etalon_factor(&self, freq_532_hz: f64) -> f64 {
        if self.etalon_amp == 0.0 {
            return 1.0;
        }
        let cycles = (freq_532_hz / self.etalon_fsr_hz).fract();
        1.0 + self.etalon_amp * (2.0 * std::f64::consts::PI * cycles).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LockInConfig {
    pub harmonic: u32,
    pub lo_freq_hz: f64,
    pub phase_rad: f64,
    pub lpf_tau_s: f64,
    pub gain: f64,
}

impl Default for LockInConfig {
    fn default() -> Self {
        Self { harmonic: 3, lo_freq_hz: 7800.0, phase_rad: 0.0, lpf_tau_s: 0.010, gain: 10.0 }
    }
}

impl LockInConfig {
    pub fn validate(&self, f_mod_hz: f64) -> Result<(), DetectionError> {
        if self.harmonic != 3 {
            return Err(invalid("harmonic", "only 3f detection is supported"));
        }
        let expect = self.harmonic as f64 * f_mod_hz;
        if !((self.lo_freq_hz - expect).abs() <= 1e-9 * expect) {
            return Err(invalid("lo_freq_hz", format!("must equal harmonic x f_mod = {expect} Hz")));
        }
        if !(self.lpf_tau_s.is_finite() && self.lpf_tau_s > 0.0) {
            return Err(invalid("lpf_tau_s", "must be > 0"));
        }
        if !self.phase_rad.is_finite() {
            return Err(invalid("phase_rad", "must be finite"));
        }
        if !(self.gain.is_finite() && self.gain != 0.0) {
            return Err(invalid("gain", "must be finite and non-zero"));
        }
        Ok(())
    }

    /// One-sided density of detector white noise after mixing and gain.
    pub fn demodulated_density(&self, detector_noise_v_per_rthz: f64) -> f64 {
        self.gain.abs() * detector_noise_v_per_rthz / std::f64::consts::SQRT_2
    }
}

/// Single-pole low-pass filter, exact for piecewise-constant input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowPass {
    alpha: f64,
    pub y: f64,
}

impl LowPass {
    pub fn new(tau_s: f64, dt: f64) -> Self {
        Self { alpha: 1.0 - (-dt / tau_s).exp(), y: 0.0 }
    }

    #[inline]
    pub fn step(&mut self, x: f64) -> f64 {
        self.y += self.alpha * (x - self.y);
        self.y
    }
}

/// Demodulated baseline: static offset plus a (possibly mean-reverting) walk.
#[derive(Debug, Clone, PartialEq)]
pub struct RamBaseline {
    cfg: RamConfig,
    walk: f64,
}

impl RamBaseline {
    /// A mean-reverting walk starts from its stationary distribution; a pure
    /// random walk starts at zero.
    pub fn new<R: Rng + ?Sized>(cfg: &RamConfig, rng: &mut R) -> Self {
        let s = cfg.stationary_sigma_v();
        let walk = if s.is_finite() && s > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            s * z
        } else {
            0.0
        };
        Self { cfg: *cfg, walk }
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.cfg.static_offset_v + self.walk
    }

    pub fn walk_v(&self) -> f64 {
        self.walk
    }

    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) {
        let q = self.cfg.walk_sigma_v_per_rts;
        if q == 0.0 {
            return;
        }
        let z: f64 = rng.sample(StandardNormal);
        if self.cfg.walk_relax_s == 0.0 {
            self.walk += q * dt.sqrt() * z;
        } else {
            let a = (-dt / self.cfg.walk_relax_s).exp();
            let s = self.cfg.stationary_sigma_v();
            self.walk = self.walk * a + s * (1.0 - a * a).sqrt() * z;
        }
    }
}

/// `v = R·P·T·(1 + a·sin(2π·ν/FSR)) + noise`.
pub fn detector_samples<R: Rng + ?Sized>(
    trans: &[f64],
    power_w: &[f64],
    det: &DetectorConfig,
    ram: &RamConfig,
    freq_532_hz: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>, DetectionError> {
    if trans.len() != power_w.len() {
        return Err(DetectionError::LengthMismatch(trans.len(), power_w.len()));
    }
    if trans.len() != freq_532_hz.len() {
        return Err(DetectionError::LengthMismatch(trans.len(), freq_532_hz.len()));
    }
    let sigma = det.sample_sigma_v();
    Ok(trans
        .iter()
        .zip(power_w)
        .zip(freq_532_hz)
        .map(|((t, p), f)| {
            let clean = det.responsivity_v_per_w * p * t * ram.etalon_factor(*f);
            if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                clean + sigma * z
            } else {
                clean
            }
        })
        .collect())
}

/// `out[k] = LPF(gain·s[k]·sin(2π·f_lo·t_k + φ)) + baseline(t_k)`.
pub fn lock_in<R: Rng + ?Sized>(signal: &[f64], cfg: &LockInConfig, ram: &RamConfig, dt: f64, rng: &mut R) -> Vec<f64> {
    let mut lpf = LowPass::new(cfg.lpf_tau_s, dt);
    let mut baseline = RamBaseline::new(ram, rng);
    let two_pi = 2.0 * std::f64::consts::PI;
    signal
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let cycles = (cfg.lo_freq_hz * k as f64 * dt).fract();
            let lo = (two_pi * cycles + cfg.phase_rad).sin();
            let out = lpf.step(cfg.gain * s * lo) + baseline.value();
            baseline.step(dt, rng);
            out
        })
        .collect()
}

/// Fourier coefficient of the modulated, intensity-modulated transmission
/// against `sin(n·θ + φ)`:
///
/// `a_n = (2/N)·Σ T(Δ + d·sin θ)·(1 + m·sin θ)·sin(n·θ + φ)`.
///
/// `detuning_hz` and `depth_hz` are at 532 nm, measured like the model's
/// detuning; `dip_shift_hz` moves the dips only.
pub fn harmonic_coefficient(
    model: &ReferenceLineModel,
    detuning_hz: f64,
    depth_hz: f64,
    power_mod_frac: f64,
    harmonic: u32,
    phase_rad: f64,
    dip_shift_hz: f64,
) -> f64 {
    let n = QUADRATURE_POINTS;
    let mut acc = 0.0;
    for j in 0..n {
        let th = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / n as f64;
        let s = th.sin();
        let t = model.transmission_with_shift(detuning_hz + depth_hz * s, dip_shift_hz);
        acc += t * (1.0 + power_mod_frac * s) * (harmonic as f64 * th + phase_rad).sin();
    }
    2.0 * acc / n as f64
}

/// Small-depth third-harmonic coefficient `−(d³/24)·T‴(Δ)`, with `T‴` from a
/// five-point central difference at step `d/10`. Units match
/// [`harmonic_coefficient`].
pub fn analytic_3f(model: &ReferenceLineModel, detuning_hz: f64, depth_hz: f64) -> Result<f64, DetectionError> {
    let limit = 0.2 * model.narrowest_fwhm_hz().unwrap_or(f64::INFINITY);
    if !(depth_hz.is_finite() && depth_hz >= 0.0 && depth_hz <= limit) {
        return Err(DetectionError::DepthOutOfDomain { depth_hz, limit_hz: limit });
    }
    if depth_hz == 0.0 {
        return Ok(0.0);
    }
    let h = depth_hz / 10.0;
    let t = |x: f64| model.transmission_with_shift(x, 0.0);
    let d3 = (t(detuning_hz + 2.0 * h) - 2.0 * t(detuning_hz + h) + 2.0 * t(detuning_hz - h)
        - t(detuning_hz - 2.0 * h))
        / (2.0 * h * h * h);
    Ok(-depth_hz.powi(3) / 24.0 * d3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iodine_reference::{HyperfineComponent, IodineCell};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn a10_like() -> ReferenceLineModel {
        ReferenceLineModel {
            description: None,
            reference_freq_532_hz: 563_228_604_357_000.0,
            doppler_fwhm_hz: 400e6,
            peak_optical_depth: 0.5,
            stark_coeff_hz_per_w: 0.0,
            cell: IodineCell::default(),
            components: vec![HyperfineComponent { label: "a10".into(), offset_hz: 0.0, dip_contrast: 0.1, fwhm_hz: 1e6 }],
        }
    }

    #[test]
    fn constant_light_gives_constant_voltage() {
        let det = DetectorConfig { noise_v_per_rthz: 0.0, ..DetectorConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100;
        let v = detector_samples(&vec![1.0; n], &vec![2e-3; n], &det, &RamConfig::OFF, &vec![5.6e14; n], &mut rng).unwrap();
        assert!(v.iter().all(|&x| x == 500.0 * 2e-3));
    }

    #[test]
    fn etalon_node_is_neutral() {
        let ram = RamConfig { etalon_amp: 0.05, etalon_fsr_hz: 1e9, ..RamConfig::OFF };
        assert_eq!(ram.etalon_factor(563_000e9), 1.0);
        assert!((ram.etalon_factor(563_000.25e9) - 1.05).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let det = DetectorConfig::default();
        assert_eq!(
            detector_samples(&[1.0; 3], &[1.0; 2], &det, &RamConfig::OFF, &[1.0; 3], &mut rng),
            Err(DetectionError::LengthMismatch(3, 2))
        );
    }

    #[test]
    fn detector_noise_bandwidth() {
        let det = DetectorConfig { noise_v_per_rthz: 1e-5, ..DetectorConfig::default() };
        let n = (10.0 * det.sample_rate_hz) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = detector_samples(&vec![1.0; n], &vec![0.0; n], &det, &RamConfig::OFF, &vec![0.0; n], &mut rng).unwrap();
        let rms = (v.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        let expect = 1e-5 * (det.sample_rate_hz / 2.0).sqrt();
        assert!((rms / expect - 1.0).abs() < 0.05);
    }

    fn settled(out: &[f64], n: usize) -> f64 {
        out[out.len() - n..].iter().sum::<f64>() / n as f64
    }

    #[test]
    fn lock_in_recovers_in_phase_tone() {
        let cfg = LockInConfig { phase_rad: 0.4, ..LockInConfig::default() };
        let dt = 1e-5;
        let a = 0.02;
        let sig: Vec<f64> = (0..20_000)
            .map(|k| a * (2.0 * std::f64::consts::PI * cfg.lo_freq_hz * k as f64 * dt + cfg.phase_rad).sin())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = lock_in(&sig, &cfg, &RamConfig::OFF, dt, &mut rng);
        assert!((settled(&out, 500) / (cfg.gain * a / 2.0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn harmonic_selectivity() {
        let cfg = LockInConfig::default();
        let dt = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tone = |f: f64| -> Vec<f64> {
            (0..20_000).map(|k| (2.0 * std::f64::consts::PI * f * k as f64 * dt).sin()).collect()
        };
        let r3 = settled(&lock_in(&tone(7800.0), &cfg, &RamConfig::OFF, dt, &mut rng), 500);
        for f in [2600.0, 5200.0] {
            let r = settled(&lock_in(&tone(f), &cfg, &RamConfig::OFF, dt, &mut rng), 500);
            assert!(r.abs() < 1e-3 * r3.abs(), "{f}: {r} vs {r3}");
        }
    }

    #[test]
    fn static_baseline_adds_offset() {
        let ram = RamConfig { static_offset_v: 0.01, ..RamConfig::OFF };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = lock_in(&[0.0; 100], &LockInConfig::default(), &ram, 1e-5, &mut rng);
        assert!(out.iter().all(|&v| v == 0.01));
    }

    #[test]
    fn lpf_step_response_at_tau() {
        let dt = 1e-5;
        let tau = 0.01;
        let mut f = LowPass::new(tau, dt);
        let k = (tau / dt).round() as usize;
        let mut y = 0.0;
        for _ in 0..k {
            y = f.step(1.0);
        }
        assert!((y - (1.0 - (-1.0f64).exp())).abs() < dt / tau);
    }

    #[test]
    fn mean_reverting_walk_is_stationary() {
        let ram = RamConfig { walk_sigma_v_per_rts: 1e-3, walk_relax_s: 10.0, ..RamConfig::OFF };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut acc = 0.0;
        let n = 4000;
        for _ in 0..n {
            let mut b = RamBaseline::new(&ram, &mut rng);
            for _ in 0..5 {
                b.step(1.0, &mut rng);
            }
            acc += b.walk_v().powi(2);
        }
        let s2 = ram.stationary_sigma_v().powi(2);
        assert!((acc / n as f64 / s2 - 1.0).abs() < 0.08);
    }

    #[test]
    fn analytic_3f_properties() {
        let m = a10_like();
        assert_eq!(analytic_3f(&m, 0.0, 0.1e6).unwrap().abs() < 1e-15, true);
        let a = analytic_3f(&m, 0.2e6, 0.1e6).unwrap();
        let b = analytic_3f(&m, 0.2e6, 0.05e6).unwrap();
        assert!((a / b / 8.0 - 1.0).abs() < 0.01, "{}", a / b);
        assert!(matches!(analytic_3f(&m, 0.0, 0.3e6), Err(DetectionError::DepthOutOfDomain { .. })));
    }

    #[test]
    fn quadrature_matches_small_depth_limit() {
        let m = a10_like();
        let d = 0.02e6;
        for x in [-0.6e6, -0.25e6, 0.1e6, 0.4e6] {
            let q = harmonic_coefficient(&m, x, d, 0.0, 3, 0.0, 0.0);
            let a = analytic_3f(&m, x, d).unwrap();
            assert!((q - a).abs() < 0.01 * a.abs().max(1e-12), "{x}: {q} vs {a}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(LockInConfig::default().validate(2600.0).is_ok());
        assert!(LockInConfig { lo_freq_hz: 7801.0, ..LockInConfig::default() }.validate(2600.0).is_err());
        assert!(DetectorConfig { sample_rate_hz: 15e3, ..DetectorConfig::default() }.validate(2600.0).is_err());
        assert!(RamConfig { etalon_amp: 0.1, etalon_fsr_hz: 0.0, ..RamConfig::OFF }.validate().is_err());
        assert!(RamConfig::default().validate().is_ok());
    }
}
