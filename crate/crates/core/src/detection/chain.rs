//! Sample-rate spectrometer and lock-in, and the stepped-carrier scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{harmonic_coefficient, DetectionError, DetectorConfig, LockInConfig, LowPass, RamBaseline, RamConfig};
use crate::iodine_reference::ReferenceLineModel;
use crate::laser::{ActuatorParams, ModulationConfig};

/// Modulation periods averaged for a settled reading (500 samples at the
/// default rates, an integer number of periods of every mixing product).
pub const SETTLE_PERIODS: usize = 13;

#[derive(Debug, Clone)]
pub struct ScanSetup<'a> {
    pub model: &'a ReferenceLineModel,
    pub component: &'a str,
    pub params: ActuatorParams,
    pub modulation: ModulationConfig,
    pub lockin: LockInConfig,
    pub detector: DetectorConfig,
    pub ram: RamConfig,
}

impl ScanSetup<'_> {
    pub fn settle_samples(&self) -> usize {
        ((SETTLE_PERIODS as f64 * self.detector.sample_rate_hz / self.modulation.f_mod_hz).round() as usize).max(1)
    }
}

/// Detector, mixer, filter and baseline, advanced one sample at a time.
#[derive(Debug, Clone)]
pub struct TimeDomainChain {
    model: ReferenceLineModel,
    component_offset_hz: f64,
    etalon_origin_cycles: f64,
    params: ActuatorParams,
    modulation: ModulationConfig,
    lockin: LockInConfig,
    detector: DetectorConfig,
    ram: RamConfig,
    k: u64,
    lpf_i: LowPass,
    lpf_q: LowPass,
    baseline: RamBaseline,
    noise_sigma_v: f64,
}

impl TimeDomainChain {
    pub fn new<R: Rng + ?Sized>(setup: &ScanSetup<'_>, ram_rng: &mut R) -> Result<Self, DetectionError> {
        let c = setup
            .model
            .component(setup.component)
            .ok_or_else(|| DetectionError::UnknownComponent(setup.component.to_string()))?;
        let dt = 1.0 / setup.detector.sample_rate_hz;
        let etalon_origin_cycles = if setup.ram.etalon_amp != 0.0 {
            (setup.model.reference_freq_532_hz / setup.ram.etalon_fsr_hz).fract()
        } else {
            0.0
        };
        Ok(Self {
            model: setup.model.clone(),
            component_offset_hz: c.offset_hz,
            etalon_origin_cycles,
            params: setup.params,
            modulation: setup.modulation,
            lockin: setup.lockin,
            detector: setup.detector,
            ram: setup.ram,
            k: 0,
            lpf_i: LowPass::new(setup.lockin.lpf_tau_s, dt),
            lpf_q: LowPass::new(setup.lockin.lpf_tau_s, dt),
            baseline: RamBaseline::new(&setup.ram, ram_rng),
            noise_sigma_v: setup.detector.sample_sigma_v(),
        })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.detector.sample_rate_hz
    }

    pub fn time_s(&self) -> f64 {
        self.k as f64 / self.detector.sample_rate_hz
    }

    pub fn set_phase(&mut self, phase_rad: f64) {
        self.lockin.phase_rad = phase_rad;
    }

    /// Quadrature output (LO shifted by 90°), without baseline.
    pub fn quadrature_v(&self) -> f64 {
        self.lpf_q.y
    }

    /// One detector sample. `carrier_delta_1064_hz` is the unmodulated
    /// carrier's offset from half the component's 532 nm center;
    /// `carrier_power_w` is the unmodulated output power.
    #[inline]
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        carrier_delta_1064_hz: f64,
        carrier_power_w: f64,
        det_rng: &mut R,
        ram_rng: &mut R,
    ) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let fs = self.detector.sample_rate_hz;
        let kf = self.k as f64;
        let s = (two_pi * (self.modulation.f_mod_hz * kf / fs).fract()).sin();

        let dev = self.modulation.depth_hz * s;
        let detuning = self.component_offset_hz + 2.0 * (carrier_delta_1064_hz + dev);
        let shift = self.model.stark_coeff_hz_per_w * 2.0 * carrier_power_w;
        let t = self.model.transmission_with_shift(detuning, shift);
        let mod_current = dev / self.params.freq_gain_hz_per_ma;
        let p = (carrier_power_w + self.params.power_gain_w_per_ma * mod_current).max(0.0);
        let mut v = self.detector.responsivity_v_per_w * p * t;
        if self.ram.etalon_amp != 0.0 {
            let cycles = self.etalon_origin_cycles + detuning / self.ram.etalon_fsr_hz;
            v *= 1.0 + self.ram.etalon_amp * (two_pi * cycles).sin();
        }
        if self.noise_sigma_v > 0.0 {
            let z: f64 = det_rng.sample(StandardNormal);
            v += self.noise_sigma_v * z;
        }

        let lo = two_pi * (self.lockin.lo_freq_hz * kf / fs).fract() + self.lockin.phase_rad;
        let g = self.lockin.gain * v;
        let (sl, cl) = lo.sin_cos();
        let y = self.lpf_i.step(g * sl);
        self.lpf_q.step(g * cl);
        let out = y + self.baseline.value();
        self.baseline.step(1.0 / fs, ram_rng);
        self.k += 1;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTable {
    pub detuning_hz: Vec<f64>,
    pub error_v: Vec<f64>,
}

impl ScanTable {
    pub fn to_csv(&self) -> String {
        crate::analysis::io::table_csv("detuning_hz,error_v", &self.detuning_hz, &self.error_v)
    }

    pub fn from_csv(text: &str) -> Result<Self, crate::analysis::io::CsvError> {
        let (detuning_hz, error_v) = crate::analysis::io::parse_table(text, "detuning_hz,error_v")?;
        Ok(Self { detuning_hz, error_v })
    }
}

/// Step the carrier through `grid_532_hz` (detuning from the component
/// center at 532 nm), holding each point for `dwell_s`, and record the
/// settled lock-in output: the mean over the last `SETTLE_PERIODS`
/// modulation periods of the dwell.
pub fn scan_error_signal<R: Rng + ?Sized>(
    setup: &ScanSetup<'_>,
    grid_532_hz: &[f64],
    dwell_s: f64,
    det_rng: &mut R,
    ram_rng: &mut R,
) -> Result<ScanTable, DetectionError> {
    setup.lockin.validate(setup.modulation.f_mod_hz)?;
    setup.detector.validate(setup.modulation.f_mod_hz)?;
    for i in 1..grid_532_hz.len() {
        if !(grid_532_hz[i] > grid_532_hz[i - 1]) {
            return Err(DetectionError::NonMonotoneGrid(i));
        }
    }
    let min = 10.0 * setup.lockin.lpf_tau_s;
    if dwell_s < min * (1.0 - 1e-12) {
        return Err(DetectionError::DwellTooShort { dwell_s, min_s: min });
    }
    let mut chain = TimeDomainChain::new(setup, ram_rng)?;
    let n_dwell = (dwell_s * setup.detector.sample_rate_hz).round() as usize;
    let n_avg = setup.settle_samples().min(n_dwell);
    // Pre-roll one dwell at the first point so the filter start-up
    // transient does not land in the first reading.
    if let Some(&x0) = grid_532_hz.first() {
        for _ in 0..n_dwell {
            chain.step(x0 / 2.0, setup.params.nominal_power_w, det_rng, ram_rng);
        }
    }
    let mut error_v = Vec::with_capacity(grid_532_hz.len());
    for &x in grid_532_hz {
        let mut acc = 0.0;
        for j in 0..n_dwell {
            let y = chain.step(x / 2.0, setup.params.nominal_power_w, det_rng, ram_rng);
            if j >= n_dwell - n_avg {
                acc += y;
            }
        }
        error_v.push(acc / n_avg as f64);
    }
    Ok(ScanTable { detuning_hz: grid_532_hz.to_vec(), error_v })
}

/// Lock-in phase maximizing the settled response at the discriminator lobe,
/// folded into (−π/2, π/2] so the sign convention of the LO is kept.
pub fn calibrate_phase(setup: &ScanSetup<'_>) -> Result<f64, DetectionError> {
    let c = setup
        .model
        .component(setup.component)
        .ok_or_else(|| DetectionError::UnknownComponent(setup.component.to_string()))?;
    // Locate the lobe of the in-phase response on the positive side.
    let d532 = 2.0 * setup.modulation.depth_hz;
    let mut probe = 0.0;
    let mut best = 0.0;
    for i in 1..=200 {
        let x = i as f64 * 0.01 * c.fwhm_hz;
        let a = harmonic_coefficient(setup.model, c.offset_hz + x, d532, 0.0, 3, 0.0, 0.0).abs();
        if a > best {
            best = a;
            probe = x;
        }
    }
    let quiet = ScanSetup {
        detector: DetectorConfig { noise_v_per_rthz: 0.0, ..setup.detector },
        ram: RamConfig::OFF,
        lockin: LockInConfig { phase_rad: 0.0, ..setup.lockin },
        ..setup.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut chain = TimeDomainChain::new(&quiet, &mut rng)?;
    let n = (20.0 * setup.lockin.lpf_tau_s * setup.detector.sample_rate_hz).round() as usize;
    let n_avg = quiet.settle_samples().min(n);
    let (mut i_acc, mut q_acc) = (0.0, 0.0);
    let mut r2 = ChaCha8Rng::seed_from_u64(1);
    for j in 0..n {
        let y = chain.step(probe / 2.0, setup.params.nominal_power_w, &mut rng, &mut r2);
        if j >= n - n_avg {
            i_acc += y;
            q_acc += chain.quadrature_v();
        }
    }
    let mut phi = q_acc.atan2(i_acc);
    let half_pi = std::f64::consts::FRAC_PI_2;
    if phi > half_pi {
        phi -= std::f64::consts::PI;
    } else if phi <= -half_pi {
        phi += std::f64::consts::PI;
    }
    Ok(phi)
}

/// Noise bandwidth of one settled scan reading: the single-pole filter
/// followed by the boxcar over the last `n_avg` samples of each dwell.
pub fn settled_enbw_hz(lpf_tau_s: f64, sample_rate_hz: f64, n_dwell: usize, n_avg: usize) -> f64 {
    let dt = 1.0 / sample_rate_hz;
    let a = 1.0 - (-dt / lpf_tau_s).exp();
    // Weight of the input at sample j in the settled mean, by the reverse
    // recursion G[j] = w[j] + (1 − a)·G[j + 1].
    let start = n_dwell - n_avg;
    let (mut acc, mut sum, mut sum2) = (0.0, 0.0, 0.0);
    for j in (0..n_dwell).rev() {
        let w = if j >= start { 1.0 / n_avg as f64 } else { 0.0 };
        acc = w + (1.0 - a) * acc;
        let g = a * acc;
        sum += g;
        sum2 += g * g;
    }
    sample_rate_hz / 2.0 * sum2 / (sum * sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanStats {
    pub peak_to_peak_v: f64,
    /// Wing noise rescaled to the reporting bandwidth.
    pub noise_rms_v: f64,
    pub snr: f64,
    pub bandwidth_hz: f64,
    /// Error-signal root nearest the component center.
    pub zero_crossing_hz: f64,
    /// Separation of the roots flanking the central one.
    pub feature_width_hz: f64,
}

/// Figures of merit of a scan. Noise is the rms of readings farther than
/// `3·fwhm` from center, each wing about its own mean, scaled from the
/// reading bandwidth `enbw_hz` to `bandwidth_hz`.
pub fn scan_stats(scan: &ScanTable, fwhm_hz: f64, enbw_hz: f64, bandwidth_hz: f64) -> ScanStats {
    let x = &scan.detuning_hz;
    let y = &scan.error_v;
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);

    let wing = |pred: &dyn Fn(f64) -> bool| -> (f64, usize) {
        let v: Vec<f64> = x.iter().zip(y).filter(|(d, _)| pred(**d)).map(|(_, e)| *e).collect();
        if v.len() < 2 {
            return (0.0, 0);
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|e| (e - m).powi(2)).sum::<f64>(), v.len() - 1)
    };
    let (sl, nl) = wing(&|d| d < -3.0 * fwhm_hz);
    let (sr, nr) = wing(&|d| d > 3.0 * fwhm_hz);
    let reading_rms = if nl + nr > 0 { ((sl + sr) / (nl + nr) as f64).sqrt() } else { f64::NAN };
    let noise_rms_v = reading_rms * (bandwidth_hz / enbw_hz).sqrt();

    let mut roots = Vec::new();
    for i in 1..x.len() {
        let (a, b) = (y[i - 1], y[i]);
        if a == 0.0 || a.signum() != b.signum() {
            let f = if b == a { 0.0 } else { a / (a - b) };
            roots.push(x[i - 1] + f * (x[i] - x[i - 1]));
        }
    }
    let (zero_crossing_hz, feature_width_hz) = match roots
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
    {
        Some((i, &z)) => {
            let w = if i > 0 && i + 1 < roots.len() { roots[i + 1] - roots[i - 1] } else { f64::NAN };
            (z, w)
        }
        None => (f64::NAN, f64::NAN),
    };
    ScanStats {
        peak_to_peak_v: hi - lo,
        noise_rms_v,
        snr: (hi - lo) / noise_rms_v,
        bandwidth_hz,
        zero_crossing_hz,
        feature_width_hz,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::tests::a10_like;

    fn setup(model: &ReferenceLineModel) -> ScanSetup<'_> {
        ScanSetup {
            model,
            component: "a10",
            params: ActuatorParams::default(),
            modulation: ModulationConfig::default(),
            lockin: LockInConfig::default(),
            detector: DetectorConfig { noise_v_per_rthz: 0.0, ..DetectorConfig::default() },
            ram: RamConfig::OFF,
        }
    }

    #[test]
    fn enbw_of_plain_lpf() {
        // Long dwell, single-sample read: 1/(4τ).
        let e = settled_enbw_hz(0.01, 1e5, 20_000, 1);
        assert!((e / 25.0 - 1.0).abs() < 0.01, "{e}");
        assert!(settled_enbw_hz(0.01, 1e5, 10_000, 500) < e);
    }

    #[test]
    fn scan_is_odd_with_central_root() {
        let m = a10_like();
        let s = setup(&m);
        let grid: Vec<f64> = (-20..=20).map(|k| k as f64 * 0.1e6).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let scan = scan_error_signal(&s, &grid, 0.1, &mut r1, &mut r2).unwrap();
        let pk = scan.error_v.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..grid.len() {
            let j = grid.len() - 1 - i;
            assert!((scan.error_v[i] + scan.error_v[j]).abs() < 1e-3 * pk, "{i}");
        }
        let st = scan_stats(&scan, 1e6, 1.0, 1.0);
        assert!(st.zero_crossing_hz.abs() < 0.01e6);
        assert!(st.feature_width_hz > 0.5e6 && st.feature_width_hz < 2e6, "{}", st.feature_width_hz);
    }

    #[test]
    fn far_grid_is_flat_baseline() {
        let m = a10_like();
        let s = ScanSetup { ram: RamConfig { static_offset_v: 2e-3, ..RamConfig::OFF }, ..setup(&m) };
        let grid: Vec<f64> = (0..5).map(|k| 3e9 + k as f64 * 1e6).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let scan = scan_error_signal(&s, &grid, 0.1, &mut r1, &mut r2).unwrap();
        assert!(scan.error_v.iter().all(|v| (v - 2e-3).abs() < 1e-6), "{:?}", scan.error_v);
    }

    #[test]
    fn grid_and_dwell_checks() {
        let m = a10_like();
        let s = setup(&m);
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            scan_error_signal(&s, &[0.0, 1.0, 1.0], 0.1, &mut r1, &mut r2),
            Err(DetectionError::NonMonotoneGrid(2))
        );
        assert!(matches!(
            scan_error_signal(&s, &[0.0, 1.0], 0.05, &mut r1, &mut r2),
            Err(DetectionError::DwellTooShort { .. })
        ));
    }

    #[test]
    fn phase_calibration_finds_zero_for_unshifted_chain() {
        let m = a10_like();
        let phi = calibrate_phase(&setup(&m)).unwrap();
        assert!(phi.abs() < 0.02, "{phi}");
    }

    #[test]
    fn settled_scan_matches_quadrature() {
        let m = a10_like();
        let s = setup(&m);
        let grid: Vec<f64> = (-6..=6).map(|k| k as f64 * 0.25e6).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let scan = scan_error_signal(&s, &grid, 0.1, &mut r1, &mut r2).unwrap();
        let scale = s.lockin.gain * s.detector.responsivity_v_per_w * s.params.nominal_power_w / 2.0;
        let pm = s.params.power_gain_w_per_ma * (s.modulation.depth_hz / s.params.freq_gain_hz_per_ma) / s.params.nominal_power_w;
        let pk = scan.error_v.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (x, v) in grid.iter().zip(&scan.error_v) {
            let q = scale * harmonic_coefficient(&m, *x, 0.5e6, pm, 3, 0.0, 0.0);
            assert!((v - q).abs() < 2e-3 * pk, "{x}: {v} vs {q}");
        }
    }
}
