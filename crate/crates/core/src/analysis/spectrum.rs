//! Beat-note spectra with a spectrum-analyzer-like resolution bandwidth.
//!
//! The beat is synthesized as a complex baseband tone around its mean
//! frequency and analyzed by Welch averaging with a Gaussian window. The
//! segment length and sample rate are chosen together so that the window's
//! equivalent noise bandwidth equals the requested RBW exactly. Bins are
//! normalized so that their linear sum is the mean power of the record.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// Window standard deviation as a fraction of the segment length.
pub const GAUSSIAN_SIGMA: f64 = 0.125;
/// −3 dB width of a resolution-limited tone divided by the RBW
/// (`2·√(2 ln 2) / √(2π)` for a gaussian power response).
pub const RESOLUTION_WIDTH_RATIO: f64 = 0.939_437_278_699_651_4;
const ZERO_PAD: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freq_hz: Vec<f64>,
    pub power_dbc: Vec<f64>,
    pub rbw_hz: f64,
}

impl Spectrum {
    pub fn bin_hz(&self) -> f64 {
        self.freq_hz[1] - self.freq_hz[0]
    }

    pub fn peak_index(&self) -> usize {
        self.power_dbc
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

pub fn gaussian_window(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let s = GAUSSIAN_SIGMA * n as f64;
    (0..n).map(|i| (-0.5 * ((i as f64 - c) / s).powi(2)).exp()).collect()
}

/// Equivalent noise bandwidth of a window, in bins.
pub fn enbw_bins(w: &[f64]) -> f64 {
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    w.len() as f64 * s2 / (s1 * s1)
}

/// Extra frequency noise of the beat, sampled at a fixed interval and held.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqNoise {
    pub dt: f64,
    pub values_hz: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatSpectrumConfig {
    /// Mean beat frequency; the spectrum is centered here.
    pub beat_hz: f64,
    pub f_mod_hz: f64,
    /// Peak deviation of the beat (the 1064 nm modulation depth).
    pub depth_hz: f64,
    pub duration_s: f64,
    pub rbw_hz: f64,
    pub span_hz: f64,
}

/// Welch spectrum of `exp(i·(2π·f_b·t − β·cos(2π·f_mod·t) + φ_noise(t)))`.
pub fn beat_spectrum(cfg: &BeatSpectrumConfig, noise: Option<&FreqNoise>) -> Result<Spectrum, AnalysisError> {
    for (name, v) in [
        ("rbw_hz", cfg.rbw_hz),
        ("span_hz", cfg.span_hz),
        ("duration_s", cfg.duration_s),
        ("f_mod_hz", cfg.f_mod_hz),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(AnalysisError::Invalid(format!("{name} must be > 0")));
        }
    }
    if !(cfg.depth_hz.is_finite() && cfg.depth_hz >= 0.0) {
        return Err(AnalysisError::Invalid("depth_hz must be >= 0".into()));
    }
    let floor = 2.0 / cfg.duration_s;
    if cfg.rbw_hz < floor {
        return Err(AnalysisError::RbwTooFine { rbw_hz: cfg.rbw_hz, floor_hz: floor });
    }

    // Pick the segment length for the span, then the sample rate that makes
    // the window ENBW equal to the RBW.
    let enbw_guess = enbw_bins(&gaussian_window(1024));
    let seg = ((enbw_guess * cfg.span_hz / cfg.rbw_hz).ceil() as usize).max(16);
    let window = gaussian_window(seg);
    let enbw = enbw_bins(&window);
    let fs = seg as f64 * cfg.rbw_hz / enbw;
    let total = (cfg.duration_s * fs).floor() as usize;
    if total < seg {
        return Err(AnalysisError::RbwTooFine { rbw_hz: cfg.rbw_hz, floor_hz: enbw * fs / total.max(1) as f64 });
    }
    if let Some(n) = noise {
        if !(n.dt > 0.0) || (n.values_hz.len() as f64) * n.dt < cfg.duration_s * (1.0 - 1e-9) {
            return Err(AnalysisError::Invalid("frequency noise record shorter than duration".into()));
        }
    }

    let two_pi = 2.0 * std::f64::consts::PI;
    let beta = cfg.depth_hz / cfg.f_mod_hz;
    let mut signal = Vec::with_capacity(total);
    let mut noise_phase = 0.0;
    for k in 0..total {
        let t = k as f64 / fs;
        let mod_cycles = (cfg.f_mod_hz * t).fract();
        let mut phase = -beta * (two_pi * mod_cycles).cos();
        if let Some(n) = noise {
            phase += noise_phase;
            let idx = ((t / n.dt) as usize).min(n.values_hz.len() - 1);
            noise_phase += two_pi * n.values_hz[idx] / fs;
        }
        signal.push(Complex64::from_polar(1.0, phase));
    }
    let mean_power = signal.iter().map(|z| z.norm_sqr()).sum::<f64>() / total as f64;

    let nfft = seg * ZERO_PAD;
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let hop = (seg / 2).max(1);
    let mut acc = vec![0.0; nfft];
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let mut segments = 0usize;
    let mut start = 0;
    while start + seg <= total {
        buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            buf[i] = signal[start + i] * *w;
        }
        fft.process(&mut buf);
        for (a, z) in acc.iter_mut().zip(&buf) {
            *a += z.norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    let s2: f64 = window.iter().map(|x| x * x).sum();
    let norm = segments as f64 * nfft as f64 * s2 * mean_power;

    let mut freq_hz = Vec::with_capacity(nfft);
    let mut power_dbc = Vec::with_capacity(nfft);
    let df = fs / nfft as f64;
    for j in 0..nfft {
        // fftshift: negative frequencies first.
        let k = (j + nfft / 2) % nfft;
        let f = (j as f64 - (nfft / 2) as f64) * df;
        freq_hz.push(cfg.beat_hz + f);
        power_dbc.push(10.0 * (acc[k] / norm).max(1e-300).log10());
    }
    Ok(Spectrum { freq_hz, power_dbc, rbw_hz: cfg.rbw_hz })
}

/// Linear sum of all bins, relative to the record power.
pub fn integrated_power(sp: &Spectrum) -> f64 {
    sp.power_dbc.iter().map(|p| 10f64.powf(p / 10.0)).sum()
}

/// Width between the outermost crossings of `peak − drop_db`.
pub fn linewidth(sp: &Spectrum, drop_db: f64) -> Result<f64, AnalysisError> {
    if sp.power_dbc.len() < 3 {
        return Err(AnalysisError::TooShort);
    }
    let p = &sp.power_dbc;
    let thr = p[sp.peak_index()] - drop_db;
    let first = p.iter().position(|&v| v >= thr).unwrap_or(0);
    let last = p.iter().rposition(|&v| v >= thr).unwrap_or(0);
    if first == 0 || last + 1 == p.len() {
        return Err(AnalysisError::NoCrossing { drop_db });
    }
    let cross = |i_lo: usize, i_hi: usize| {
        let (a, b) = (p[i_lo], p[i_hi]);
        let frac = if b == a { 0.5 } else { (thr - a) / (b - a) };
        sp.freq_hz[i_lo] + frac * (sp.freq_hz[i_hi] - sp.freq_hz[i_lo])
    };
    Ok(cross(last + 1, last) - cross(first - 1, first))
}

/// Depth of the dip at the carrier: the mean level of the strongest
/// `window_hz` stretch minus the mean level around the carrier, both taken
/// on linear power. Positive values mean the top of the line is concave.
pub fn carrier_dip_db(sp: &Spectrum, carrier_hz: f64, window_hz: f64) -> f64 {
    let lin: Vec<f64> = sp.power_dbc.iter().map(|p| 10f64.powf(p / 10.0)).collect();
    let df = sp.bin_hz();
    let half = ((window_hz / df / 2.0).round() as usize).max(1);
    let mean_at = |c: usize| {
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(lin.len() - 1);
        lin[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
    };
    let center = sp
        .freq_hz
        .iter()
        .map(|f| (f - carrier_hz).abs())
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, v)| if v < bv { (i, v) } else { (bi, bv) })
        .0;
    let best = (0..lin.len()).map(mean_at).fold(0.0, f64::max);
    10.0 * (best / mean_at(center)).log10()
}
