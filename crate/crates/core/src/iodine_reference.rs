//! Iodine reference line near 532 nm.
//!
//! The transmission of the saturation spectrometer is a Beer-Lambert
//! exponent with a Gaussian Doppler envelope whose absorption is partially
//! recovered at each hyperfine component by a Lorentzian Lamb dip:
//!
//! ```text
//! T(Δ) = exp(-OD · G(Δ) · (1 - Σ cᵢ · Lᵢ(Δ - δᵢ(P))))
//! ```
//!
//! `Δ` is measured from `reference_freq_532_hz`, which is also the Doppler
//! center. `δᵢ(P)` is the component offset plus a linear light shift with the
//! total optical power in the cell. The recovery factor is floored at zero so
//! that overlapping dips never produce gain.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLED_TABLE: &str = include_str!("../data/r86_33_0.json");

/// Largest optical depth accepted; keeps `exp(-OD)` well above underflow.
pub const MAX_OPTICAL_DEPTH: f64 = 700.0;

#[derive(Debug, Error)]
pub enum LineError {
    #[error("cannot read line table {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed line table: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid line table field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown hyperfine component `{0}`")]
    UnknownLabel(String),
    #[error("domain error: {0}")]
    Domain(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperfineComponent {
    pub label: String,
    /// Component center relative to the model reference frequency, at 532 nm.
    pub offset_hz: f64,
    /// Fraction of the local Doppler absorption recovered at dip center.
    pub dip_contrast: f64,
    /// Lorentzian full width at half maximum.
    pub fwhm_hz: f64,
}

/// Cell set points. Carried for bookkeeping; widths are given directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IodineCell {
    pub length_m: f64,
    pub cold_finger_temp_c: f64,
    pub pressure_pa: f64,
    pub body_temp_c: f64,
}

impl Default for IodineCell {
    fn default() -> Self {
        Self {
            length_m: 0.4,
            cold_finger_temp_c: 7.0,
            pressure_pa: 8.0,
            body_temp_c: 24.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLineModel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Absolute anchor of the component ladder (and Doppler center) at 532 nm.
    pub reference_freq_532_hz: f64,
    pub doppler_fwhm_hz: f64,
    /// α₀·L at the Doppler center.
    pub peak_optical_depth: f64,
    /// Linear shift of every dip center with total optical power.
    #[serde(default)]
    pub stark_coeff_hz_per_w: f64,
    pub cell: IodineCell,
    pub components: Vec<HyperfineComponent>,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> LineError {
    LineError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Unit-peak Gaussian with the given FWHM.
#[inline]
fn gaussian(x: f64, fwhm: f64) -> f64 {
    let u = x / fwhm;
    (-4.0 * std::f64::consts::LN_2 * u * u).exp()
}

/// Unit-peak Lorentzian with the given FWHM.
#[inline]
fn lorentzian(x: f64, fwhm: f64) -> f64 {
    let u = 2.0 * x / fwhm;
    1.0 / (1.0 + u * u)
}

impl ReferenceLineModel {
    /// The shipped R(86)33-0 table.
    pub fn bundled() -> Self {
        parse_line_table(BUNDLED_TABLE).expect("bundled line table is valid")
    }

    pub fn validate(&self) -> Result<(), LineError> {
        if !(self.reference_freq_532_hz.is_finite() && self.reference_freq_532_hz > 0.0) {
            return Err(invalid("reference_freq_532_hz", "must be finite and > 0"));
        }
        if !(self.doppler_fwhm_hz.is_finite() && self.doppler_fwhm_hz > 0.0) {
            return Err(invalid("doppler_fwhm_hz", "must be finite and > 0"));
        }
        if !(self.peak_optical_depth.is_finite()
            && (0.0..=MAX_OPTICAL_DEPTH).contains(&self.peak_optical_depth))
        {
            return Err(invalid(
                "peak_optical_depth",
                format!("must lie in [0, {MAX_OPTICAL_DEPTH}]"),
            ));
        }
        if !self.stark_coeff_hz_per_w.is_finite() {
            return Err(invalid("stark_coeff_hz_per_w", "must be finite"));
        }
        if !(self.cell.length_m.is_finite() && self.cell.length_m > 0.0) {
            return Err(invalid("cell.length_m", "must be > 0"));
        }
        if !(self.cell.pressure_pa.is_finite() && self.cell.pressure_pa > 0.0) {
            return Err(invalid("cell.pressure_pa", "must be > 0"));
        }
        let mut seen = HashSet::new();
        for (i, c) in self.components.iter().enumerate() {
            if !seen.insert(c.label.as_str()) {
                return Err(invalid(
                    format!("components[{i}].label"),
                    format!("duplicate label `{}`", c.label),
                ));
            }
            if !(c.fwhm_hz.is_finite() && c.fwhm_hz > 0.0) {
                return Err(invalid(format!("components[{i}].fwhm_hz"), "must be > 0"));
            }
            if !(c.dip_contrast > 0.0 && c.dip_contrast <= 1.0) {
                return Err(invalid(
                    format!("components[{i}].dip_contrast"),
                    "must lie in (0, 1]",
                ));
            }
            if !c.offset_hz.is_finite() {
                return Err(invalid(format!("components[{i}].offset_hz"), "must be finite"));
            }
        }
        Ok(())
    }

    pub fn component(&self, label: &str) -> Option<&HyperfineComponent> {
        self.components.iter().find(|c| c.label == label)
    }

    pub fn narrowest_fwhm_hz(&self) -> Option<f64> {
        self.components.iter().map(|c| c.fwhm_hz).reduce(f64::min)
    }

    /// Light shift of every dip at the given total power.
    #[inline]
    pub fn stark_shift_hz(&self, total_power_w: f64) -> f64 {
        self.stark_coeff_hz_per_w * total_power_w
    }

    /// Transmission at an absolute 532 nm frequency.
    pub fn transmission(&self, freq_532_hz: f64, total_power_w: f64) -> Result<f64, LineError> {
        if !freq_532_hz.is_finite() || !total_power_w.is_finite() {
            return Err(LineError::Domain("transmission needs finite inputs"));
        }
        if total_power_w < 0.0 {
            return Err(LineError::Domain("total power must be non-negative"));
        }
        Ok(self.transmission_at_detuning(
            freq_532_hz - self.reference_freq_532_hz,
            total_power_w,
        ))
    }

    /// Transmission at a detuning `Δ` from the reference frequency.
    ///
    /// This is the hot-path form: working in detuning avoids cancellation
    /// against the 5.6e14 Hz carrier. Inputs are not checked.
    #[inline]
    pub fn transmission_at_detuning(&self, detuning_hz: f64, total_power_w: f64) -> f64 {
        self.transmission_with_shift(detuning_hz, self.stark_shift_hz(total_power_w))
    }

    /// Transmission with an explicit dip shift (Doppler envelope unshifted).
    #[inline]
    pub fn transmission_with_shift(&self, detuning_hz: f64, dip_shift_hz: f64) -> f64 {
        let envelope = gaussian(detuning_hz, self.doppler_fwhm_hz);
        if envelope == 0.0 {
            return 1.0;
        }
        let recovered: f64 = self
            .components
            .iter()
            .map(|c| c.dip_contrast * lorentzian(detuning_hz - c.offset_hz - dip_shift_hz, c.fwhm_hz))
            .sum();
        let saturation = (1.0 - recovered).max(0.0);
        (-self.peak_optical_depth * envelope * saturation).exp()
    }

    /// Absolute 532 nm center of a component at the given total power.
    pub fn line_center(&self, label: &str, total_power_w: f64) -> Result<f64, LineError> {
        let c = self
            .component(label)
            .ok_or_else(|| LineError::UnknownLabel(label.to_string()))?;
        Ok(self.reference_freq_532_hz + c.offset_hz + self.stark_shift_hz(total_power_w))
    }
}

pub fn parse_line_table(json: &str) -> Result<ReferenceLineModel, LineError> {
    let model: ReferenceLineModel = serde_json::from_str(json)?;
    model.validate()?;
    Ok(model)
}

pub fn load_line_table(path: impl AsRef<Path>) -> Result<ReferenceLineModel, LineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| LineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_line_table(&text)
}
