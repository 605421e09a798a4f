//! Frequency-counter records, Allan statistics and beat spectra.

use thiserror::Error;

mod allan;
mod counter;
pub mod io;
mod spectrum;

pub use allan::{allan_deviation, analysis_taus, octave_taus, AllanCurve, NAMED_TAUS_S};
pub use counter::{counter, peak_to_peak, FreqSeries, GateCounter};
pub use spectrum::{
    beat_spectrum, carrier_dip_db, gaussian_window, integrated_power, linewidth, BeatSpectrumConfig,
    FreqNoise, Spectrum, GAUSSIAN_SIGMA, RESOLUTION_WIDTH_RATIO,
};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("gate {gate_s} s is not an integer multiple of the sample interval {dt} s")]
    GateNotMultiple { gate_s: f64, dt: f64 },
    #[error("tau {tau_s} s is not a positive integer multiple of the gate {gate_s} s")]
    TauNotMultiple { tau_s: f64, gate_s: f64 },
    #[error("insufficient data for tau {tau_s} s ({n} samples)")]
    Insufficient { tau_s: f64, n: usize },
    #[error("series has fewer than 2 samples")]
    TooShort,
    #[error("resolution bandwidth {rbw_hz} Hz below floor {floor_hz} Hz")]
    RbwTooFine { rbw_hz: f64, floor_hz: f64 },
    #[error("no {drop_db} dB crossing inside the spectrum span")]
    NoCrossing { drop_db: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Returns `Some(round(ratio))` when `ratio` is a positive integer to within
/// a relative tolerance that absorbs decimal representation error.
pub(crate) fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    if !(num.is_finite() && den.is_finite() && num > 0.0 && den > 0.0) {
        return None;
    }
    let r = num / den;
    let m = r.round();
    if m >= 1.0 && (r - m).abs() <= 1e-9 * m {
        Some(m as usize)
    } else {
        None
    }
}
