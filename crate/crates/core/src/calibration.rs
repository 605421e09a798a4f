//! Offline fits behind the shipped defaults.
//!
//! The defaults in `laser`, `detection` and `servo` are literals so that a
//! config file means the same thing regardless of code changes elsewhere.
//! The functions here regenerate them; `examples/fit_defaults.rs` prints the
//! result and the tests below check that the literals still agree.

use crate::detection::{DetectionError, DetectorConfig, DiscriminatorTable, LockInConfig};
use crate::iodine_reference::ReferenceLineModel;
use crate::laser::{ActuatorParams, ModulationConfig, NoiseSpec};

/// Free-running Allan targets `(τ, σ_y)`: 5.5e-10 at 1 s and 2.6e-8 near
/// 700 s as observed, plus the crossing of the 3.5e-9 requirement line,
/// placed at 30 s.
pub const FREE_RUN_TARGETS: [(f64, f64); 3] = [(1.0, 5.5e-10), (30.0, 3.5e-9), (700.0, 2.6e-8)];

/// Largest locked Allan deviation, reached near 3600 s.
pub const LOCKED_SIGMA_MAX: f64 = 5.7e-12;
pub const LOCKED_SIGMA_MAX_TAU_S: f64 = 3600.0;
/// Difference between the compact laser and the reference laser's iodine
/// lock point at 1064 nm.
pub const LOCK_POINT_DIFFERENCE_HZ: f64 = 12.6e3;
pub const TARGET_SNR: f64 = 78.0;
pub const SNR_BANDWIDTH_HZ: f64 = 100.0;
pub const UNITY_GAIN_HZ: f64 = 300.0;

/// Fit `(h0, h_m2, |drift|)` to Allan targets by non-negative least squares
/// on relative variance residuals. Each basis function is one of the
/// power-law Allan variances; all 2³ supports are tried and the best
/// feasible one kept. The drift sign is returned negative so a free-running
/// laser parked below the reference walks away from zero beat.
pub fn fit_free_run_noise(targets: &[(f64, f64)], nu0_hz: f64) -> NoiseSpec {
    let basis = |tau: f64| [1.0 / tau, tau, tau * tau];
    let mut best: Option<([f64; 3], f64)> = None;
    for mask in 1u8..8 {
        let idx: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        // Normal equations on rows scaled by 1/σ².
        let k = idx.len();
        let mut ata = vec![vec![0.0; k]; k];
        let mut atb = vec![0.0; k];
        for &(tau, s) in targets {
            let w = 1.0 / (s * s);
            let b = basis(tau);
            for (r, &i) in idx.iter().enumerate() {
                atb[r] += b[i] * w;
                for (c, &j) in idx.iter().enumerate() {
                    ata[r][c] += b[i] * w * b[j] * w;
                }
            }
        }
        let Some(x) = solve(ata, atb) else { continue };
        if x.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut coef = [0.0; 3];
        for (r, &i) in idx.iter().enumerate() {
            coef[i] = x[r];
        }
        let cost: f64 = targets
            .iter()
            .map(|&(tau, s)| {
                let b = basis(tau);
                let m = coef[0] * b[0] + coef[1] * b[1] + coef[2] * b[2];
                (m / (s * s) - 1.0).powi(2)
            })
            .sum();
        if best.as_ref().is_none_or(|(_, c)| cost < *c) {
            best = Some((coef, cost));
        }
    }
    let [a, b, c] = best.map(|(x, _)| x).unwrap_or([0.0; 3]);
    NoiseSpec {
        h0: 2.0 * a,
        h_m1: 0.0,
        h_m2: 3.0 * b / (2.0 * std::f64::consts::PI.powi(2)),
        drift_hz_per_s: -(2.0 * c).sqrt() * nu0_hz,
    }
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// White detector noise that gives `snr` (peak-to-peak over rms) in
/// `bandwidth_hz` after demodulation.
pub fn detector_noise_for_snr(peak_to_peak_v: f64, lockin: &LockInConfig, snr: f64, bandwidth_hz: f64) -> f64 {
    std::f64::consts::SQRT_2 * peak_to_peak_v / (snr * lockin.gain.abs() * bandwidth_hz.sqrt())
}

/// PI gains with the zero on the lock-in filter pole, so that the open loop
/// is a pure integrator crossing unity at `unity_hz`:
/// `ki = 2π·f/(|G|·D)`, `kp = ki·τ_lpf`, with `D` in V per 1064 nm Hz.
pub fn servo_gains(slope_v_per_hz_1064: f64, freq_gain_hz_per_ma: f64, unity_hz: f64, lpf_tau_s: f64) -> (f64, f64) {
    let ki = 2.0 * std::f64::consts::PI * unity_hz / (freq_gain_hz_per_ma.abs() * slope_v_per_hz_1064.abs());
    (ki * lpf_tau_s, ki)
}

/// Static baseline that moves the lock point by `shift_1064_hz`.
pub fn static_offset_for_shift(table: &DiscriminatorTable, shift_1064_hz: f64) -> f64 {
    -table.direct(2.0 * shift_1064_hz)
}

/// Allan variance of an Ornstein-Uhlenbeck frequency process of unit
/// variance and correlation time 1, at `u = τ/τc`.
pub fn ou_allan_variance(u: f64) -> f64 {
    (2.0 * u - 3.0 + 4.0 * (-u).exp() - (-2.0 * u).exp()) / (u * u)
}

/// Location and value of the maximum of [`ou_allan_variance`].
pub fn ou_allan_peak() -> (f64, f64) {
    // Golden-section search; the function is unimodal on (0, ∞).
    let (mut a, mut b) = (0.5, 5.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if ou_allan_variance(c) > ou_allan_variance(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let u = 0.5 * (a + b);
    (u, ou_allan_variance(u))
}

/// Mean-reverting RAM walk whose lock-point Allan deviation peaks at
/// `sigma_max` at `tau_peak_s`. Returns `(walk_sigma_v_per_rts, relax_s)`.
pub fn ram_walk_for_peak(sigma_max: f64, tau_peak_s: f64, nu0_hz: f64, slope_v_per_hz_1064: f64) -> (f64, f64) {
    let (u, v) = ou_allan_peak();
    let relax = tau_peak_s / u;
    let s_hz = sigma_max * nu0_hz / v.sqrt();
    let s_v = s_hz * slope_v_per_hz_1064.abs();
    (s_v * (2.0 / relax).sqrt(), relax)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CalibratedDefaults {
    pub noise: NoiseSpec,
    pub table_peak_to_peak_v: f64,
    pub slope_v_per_hz_1064: f64,
    pub detector_noise_v_per_rthz: f64,
    pub kp_ma_per_v: f64,
    pub ki_ma_per_v_s: f64,
    pub static_offset_v: f64,
    pub walk_sigma_v_per_rts: f64,
    pub walk_relax_s: f64,
}

/// Regenerate every fitted default from the shipped line table and the
/// unfitted engineering choices.
pub fn calibrated_defaults() -> Result<CalibratedDefaults, DetectionError> {
    let model = ReferenceLineModel::bundled();
    let params = ActuatorParams::default();
    let modulation = ModulationConfig::default();
    let lockin = LockInConfig::default();
    let detector = DetectorConfig::default();
    let table = DiscriminatorTable::for_component(&model, "a10", &params, &modulation, &lockin, &detector)?;
    // The table is in V per 532 nm Hz; the laser moves 532 nm twice as far.
    let slope_1064 = 2.0 * table.slope_v_per_hz();
    let pp = table.peak_to_peak_v();
    let (kp, ki) = servo_gains(slope_1064, params.freq_gain_hz_per_ma, UNITY_GAIN_HZ, lockin.lpf_tau_s);
    let nu0 = params.nominal_freq_1064_hz;
    let (walk, relax) = ram_walk_for_peak(LOCKED_SIGMA_MAX, LOCKED_SIGMA_MAX_TAU_S, nu0, slope_1064);
    Ok(CalibratedDefaults {
        noise: fit_free_run_noise(&FREE_RUN_TARGETS, nu0),
        table_peak_to_peak_v: pp,
        slope_v_per_hz_1064: slope_1064,
        detector_noise_v_per_rthz: detector_noise_for_snr(pp, &lockin, TARGET_SNR, SNR_BANDWIDTH_HZ),
        kp_ma_per_v: kp,
        ki_ma_per_v_s: ki,
        static_offset_v: static_offset_for_shift(&table, LOCK_POINT_DIFFERENCE_HZ),
        walk_sigma_v_per_rts: walk,
        walk_relax_s: relax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::RamConfig;
    use crate::laser::calibrate_default_noise;
    use crate::servo::ServoConfig;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn fit_recovers_known_spec() {
        let nu0 = 2.8e14;
        let truth = NoiseSpec { h0: 2e-19, h_m1: 0.0, h_m2: 3e-20, drift_hz_per_s: -5e3 };
        let targets: Vec<(f64, f64)> =
            [1.0, 10.0, 100.0, 1000.0].iter().map(|&t| (t, truth.allan_variance(t, nu0).sqrt())).collect();
        let fit = fit_free_run_noise(&targets, nu0);
        assert!(close(fit.h0, truth.h0, 1e-6));
        assert!(close(fit.h_m2, truth.h_m2, 1e-6));
        assert!(close(fit.drift_hz_per_s, truth.drift_hz_per_s, 1e-6));
    }

    #[test]
    fn ou_peak_constants() {
        let (u, v) = ou_allan_peak();
        assert!((u - 1.893).abs() < 1e-3, "{u}");
        assert!((v.sqrt() - 0.6174).abs() < 1e-3, "{}", v.sqrt());
    }

    #[test]
    fn shipped_defaults_match_calibration() {
        let c = calibrated_defaults().unwrap();
        let n = calibrate_default_noise();
        assert_eq!(n.h0, 0.0);
        assert!(close(n.h_m2, c.noise.h_m2, 2e-3), "{:?}", c.noise);
        assert!(close(n.drift_hz_per_s, c.noise.drift_hz_per_s, 2e-3), "{:?}", c.noise);
        let det = DetectorConfig::default();
        assert!(close(det.noise_v_per_rthz, c.detector_noise_v_per_rthz, 2e-3), "{c:?}");
        let s = ServoConfig::default();
        assert!(close(s.ki_ma_per_v_s, c.ki_ma_per_v_s, 2e-3), "{c:?}");
        assert!(close(s.kp_ma_per_v, c.kp_ma_per_v, 2e-3), "{c:?}");
        let r = RamConfig::default();
        assert!(close(r.static_offset_v, c.static_offset_v, 2e-3), "{c:?}");
        assert!(close(r.walk_sigma_v_per_rts, c.walk_sigma_v_per_rts, 2e-3), "{c:?}");
        assert!(close(r.walk_relax_s, c.walk_relax_s, 2e-3), "{c:?}");
    }

    #[test]
    fn fitted_free_run_meets_targets() {
        let nu0 = ActuatorParams::default().nominal_freq_1064_hz;
        let n = fit_free_run_noise(&FREE_RUN_TARGETS, nu0);
        for (tau, s) in FREE_RUN_TARGETS {
            let m = n.allan_variance(tau, nu0).sqrt();
            assert!(m / s > 0.5 && m / s < 2.0, "{tau}: {m}");
        }
    }
}
