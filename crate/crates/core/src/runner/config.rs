//! Declarative scenario files.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{DetectionError, DetectorConfig, LockInConfig, RamConfig};
use crate::iodine_reference::{LineError, ReferenceLineModel};
use crate::laser::{calibrate_default_noise, ActuatorParams, LaserError, ModulationConfig, NoiseSpec};
use crate::servo::{LockDetector, ServoConfig, ServoError};

pub const SCHEMA_VERSION: u32 = 1;

/// A configuration problem, located by its dotted path in the scenario file.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("`{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

fn cfg_err(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sweep,
    Freerun,
    Lock,
    Spectrum,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sweep" => Ok(Mode::Sweep),
            "freerun" => Ok(Mode::Freerun),
            "lock" => Ok(Mode::Lock),
            "spectrum" => Ok(Mode::Spectrum),
            _ => Err(format!("unknown mode `{s}` (expected sweep, freerun, lock or spectrum)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Sample-rate spectrometer and lock-in.
    Full,
    /// Settled discriminator table at the servo update rate.
    QuasiStatic,
}

/// Which side of the reference the compact laser sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeatOrdering {
    CompactBelow,
    CompactAbove,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceLaser {
    /// Optical frequency the reference laser actually emits.
    pub abs_freq_1064_hz: f64,
    pub noise: NoiseSpec,
    /// Fixed offset between the reference's iodine lock point and its output.
    pub lock_offset_hz: f64,
    pub ordering: BeatOrdering,
}

impl Default for ReferenceLaser {
    fn default() -> Self {
        Self {
            abs_freq_1064_hz: 281_614_322_178_500.0,
            // σ_y(1 s) = 1e-13.
            noise: NoiseSpec { h0: 2e-26, ..NoiseSpec::QUIET },
            lock_offset_hz: 2.0e7,
            ordering: BeatOrdering::CompactBelow,
        }
    }
}

impl ReferenceLaser {
    /// Frequency of the iodine feature the reference is locked to.
    pub fn iodine_point_hz(&self) -> f64 {
        self.abs_freq_1064_hz - self.lock_offset_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Half-width of the 532 nm detuning grid about the target component.
    pub half_span_hz: f64,
    pub step_hz: f64,
    pub dwell_s: f64,
    /// Bandwidth the SNR is quoted in.
    pub snr_bandwidth_hz: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self { half_span_hz: 4e6, step_hz: 10e3, dwell_s: 0.1, snr_bandwidth_hz: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub rbw_hz: f64,
    pub span_hz: f64,
    /// Length of beat record analysed, taken from the end of the run.
    pub acquisition_s: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self { rbw_hz: 3e3, span_hz: 2e6, acquisition_s: 0.2 }
    }
}

fn default_gate() -> f64 {
    1.0
}
fn default_duration() -> f64 {
    3600.0
}
fn default_component() -> String {
    "a10".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    /// Defaults to `full` for sweeps and `quasi_static` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<Fidelity>,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_gate")]
    pub gate_s: f64,
    #[serde(default = "default_component")]
    pub target_component: String,
    #[serde(default = "ReferenceLineModel::bundled")]
    pub line_table: ReferenceLineModel,
    #[serde(default)]
    pub laser: ActuatorParams,
    #[serde(default)]
    pub modulation: ModulationConfig,
    #[serde(default = "calibrate_default_noise")]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub ram: RamConfig,
    #[serde(default)]
    pub lockin: LockInConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub servo: Option<ServoConfig>,
    #[serde(default)]
    pub reference: ReferenceLaser,
    #[serde(default)]
    pub lock_detector: LockDetector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl ScenarioConfig {
    /// Defaults for everything but the mode and seed, with the sections the
    /// mode requires filled in.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode,
            seed,
            fidelity: None,
            duration_s: default_duration(),
            gate_s: default_gate(),
            target_component: default_component(),
            line_table: ReferenceLineModel::bundled(),
            laser: ActuatorParams::default(),
            modulation: ModulationConfig::default(),
            noise: calibrate_default_noise(),
            detector: DetectorConfig::default(),
            ram: RamConfig::default(),
            lockin: LockInConfig::default(),
            servo: matches!(mode, Mode::Lock | Mode::Spectrum).then(ServoConfig::default),
            reference: ReferenceLaser::default(),
            lock_detector: LockDetector::default(),
            scan: (mode == Mode::Sweep).then(ScanConfig::default),
            spectrum: (mode == Mode::Spectrum).then(SpectrumConfig::default),
            output_dir: None,
        }
    }

    pub fn fidelity(&self) -> Fidelity {
        self.fidelity.unwrap_or(if self.mode == Mode::Sweep { Fidelity::Full } else { Fidelity::QuasiStatic })
    }

    /// Parse without validating.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if path == "." { String::new() } else { path };
            cfg_err(field, strip_position(&inner))
        })
    }

    /// Parse and validate.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let c = Self::from_json(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The fully resolved configuration, which parses back to `self`.
    pub fn echo_json(&self) -> String {
        let mut c = self.clone();
        c.fidelity = Some(self.fidelity());
        serde_json::to_string_pretty(&c).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(cfg_err("schema_version", format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        let fidelity = self.fidelity();
        if self.mode == Mode::Sweep && fidelity == Fidelity::QuasiStatic {
            return Err(cfg_err("fidelity", "quasi_static is not supported in sweep mode"));
        }
        if self.mode != Mode::Sweep {
            positive("duration_s", self.duration_s)?;
            positive("gate_s", self.gate_s)?;
        }

        self.line_table.validate().map_err(|e| line_err("line_table", e))?;
        if self.line_table.component(&self.target_component).is_none() {
            return Err(cfg_err("target_component", format!("`{}` is not in the line table", self.target_component)));
        }
        self.laser.validate().map_err(|e| laser_err("laser", e))?;
        self.modulation.validate().map_err(|e| laser_err("modulation", e))?;
        self.noise.validate().map_err(|e| laser_err("noise", e))?;
        let f_mod = self.modulation.f_mod_hz;
        self.detector.validate(f_mod).map_err(|e| det_err("detector", e))?;
        self.ram.validate().map_err(|e| det_err("ram", e))?;
        self.lockin.validate(f_mod).map_err(|e| det_err("lockin", e))?;
        positive("reference.abs_freq_1064_hz", self.reference.abs_freq_1064_hz)?;
        self.reference.noise.validate().map_err(|e| laser_err("reference.noise", e))?;
        if !self.reference.lock_offset_hz.is_finite() {
            return Err(cfg_err("reference.lock_offset_hz", "must be finite"));
        }
        positive("lock_detector.threshold_hz", self.lock_detector.threshold_hz)?;
        positive("lock_detector.dwell_s", self.lock_detector.dwell_s)?;

        let needs_servo = matches!(self.mode, Mode::Lock | Mode::Spectrum);
        match (&self.servo, needs_servo) {
            (None, true) => return Err(cfg_err("servo", format!("section required in {:?} mode", self.mode).to_lowercase())),
            (Some(s), _) => {
                s.validate().map_err(|e| match e {
                    ServoError::Invalid { field, reason } => cfg_err(format!("servo.{field}"), reason),
                    other => cfg_err("servo", other.to_string()),
                })?;
                if needs_servo && fidelity == Fidelity::Full {
                    full_rate_check(s, &self.detector, f_mod)?;
                }
                if needs_servo && fidelity == Fidelity::QuasiStatic {
                    integer_steps("servo.update_rate_hz", self.gate_s, 1.0 / s.update_rate_hz)?;
                }
            }
            (None, false) => {}
        }
        match fidelity {
            Fidelity::Full if self.mode != Mode::Sweep => {
                integer_steps("gate_s", self.gate_s, 1.0 / self.detector.sample_rate_hz)?;
            }
            Fidelity::QuasiStatic if self.mode == Mode::Freerun => {
                let rate = self.servo.map(|s| s.update_rate_hz).unwrap_or(ServoConfig::default().update_rate_hz);
                integer_steps("gate_s", self.gate_s, 1.0 / rate)?;
            }
            _ => {}
        }

        if self.mode == Mode::Sweep {
            let Some(s) = &self.scan else {
                return Err(cfg_err("scan", "section required in sweep mode"));
            };
            positive("scan.half_span_hz", s.half_span_hz)?;
            positive("scan.step_hz", s.step_hz)?;
            positive("scan.snr_bandwidth_hz", s.snr_bandwidth_hz)?;
            let min = 10.0 * self.lockin.lpf_tau_s;
            if !(s.dwell_s >= min * (1.0 - 1e-12)) {
                return Err(cfg_err("scan.dwell_s", format!("must be >= 10 lock-in time constants ({min} s)")));
            }
        }
        if self.mode == Mode::Spectrum {
            let Some(s) = &self.spectrum else {
                return Err(cfg_err("spectrum", "section required in spectrum mode"));
            };
            positive("spectrum.rbw_hz", s.rbw_hz)?;
            positive("spectrum.span_hz", s.span_hz)?;
            positive("spectrum.acquisition_s", s.acquisition_s)?;
            if s.acquisition_s > self.duration_s {
                return Err(cfg_err("spectrum.acquisition_s", "must not exceed duration_s"));
            }
            if s.rbw_hz < 2.0 / s.acquisition_s {
                return Err(cfg_err("spectrum.rbw_hz", format!("below the record floor {} Hz", 2.0 / s.acquisition_s)));
            }
        }
        Ok(())
    }
}

/// In full fidelity the servo reads the lock-in once per block of whole
/// modulation periods, so harmonic ripple averages out exactly.
fn full_rate_check(s: &ServoConfig, det: &DetectorConfig, f_mod: f64) -> Result<(), ConfigError> {
    let block = det.sample_rate_hz / s.update_rate_hz;
    let periods = f_mod / s.update_rate_hz;
    let whole = |x: f64| x >= 1.0 - 1e-9 && (x - x.round()).abs() < 1e-9 * x.max(1.0);
    if !(whole(block) && whole(periods)) {
        return Err(cfg_err(
            "servo.update_rate_hz",
            format!(
                "in full fidelity the update interval must be a whole number of samples and of modulation periods \
                 (got {block} samples, {periods} periods)"
            ),
        ));
    }
    Ok(())
}

fn integer_steps(field: &str, total: f64, step: f64) -> Result<(), ConfigError> {
    let r = total / step;
    if !(r >= 1.0 - 1e-9 && (r - r.round()).abs() < 1e-9 * r) {
        return Err(cfg_err(field, format!("gate {total} s is not a whole number of {step} s steps")));
    }
    Ok(())
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(cfg_err(field, format!("must be finite and > 0 (got {v})")))
    }
}

fn laser_err(section: &str, e: LaserError) -> ConfigError {
    match e {
        LaserError::Invalid { field, reason } => cfg_err(format!("{section}.{field}"), reason),
        other => cfg_err(section, other.to_string()),
    }
}

fn det_err(section: &str, e: DetectionError) -> ConfigError {
    match e {
        DetectionError::Invalid { field, reason } => cfg_err(format!("{section}.{field}"), reason),
        other => cfg_err(section, other.to_string()),
    }
}

fn line_err(section: &str, e: LineError) -> ConfigError {
    match e {
        LineError::Invalid { field, reason } => cfg_err(format!("{section}.{field}"), reason),
        other => cfg_err(section, other.to_string()),
    }
}

/// serde_json appends "at line L column C"; the path already locates it.
fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(mode: &str) -> String {
        format!(r#"{{"schema_version": 1, "mode": "{mode}", "seed": 7, "servo": {{"kp_ma_per_v": 1, "ki_ma_per_v_s": 100, "output_limit_ma": 50, "update_rate_hz": 2600, "polarity": "auto"}}}}"#)
    }

    #[test]
    fn minimal_lock_parses_with_defaults() {
        let c = ScenarioConfig::parse(&minimal("lock")).unwrap();
        assert_eq!(c.fidelity(), Fidelity::QuasiStatic);
        assert_eq!(c.duration_s, 3600.0);
        assert_eq!(c.target_component, "a10");
        assert_eq!(c.reference.abs_freq_1064_hz, 281_614_322_178_500.0);
    }

    #[test]
    fn echo_round_trips() {
        let c = ScenarioConfig::new(Mode::Spectrum, 3);
        let back = ScenarioConfig::parse(&c.echo_json()).unwrap();
        assert_eq!(back.fidelity, Some(Fidelity::QuasiStatic));
        assert_eq!(back.echo_json(), c.echo_json());
    }

    #[test]
    fn seed_is_mandatory() {
        let e = ScenarioConfig::parse(r#"{"schema_version": 1, "mode": "freerun"}"#).unwrap_err();
        assert!(e.reason.contains("seed"), "{e}");
    }

    #[test]
    fn schema_version_is_mandatory() {
        let e = ScenarioConfig::parse(r#"{"mode": "freerun", "seed": 1}"#).unwrap_err();
        assert!(e.reason.contains("schema_version"), "{e}");
    }

    #[test]
    fn errors_name_the_field() {
        let text = minimal("lock").replace("\"output_limit_ma\": 50", "\"output_limit_ma\": -1");
        assert_eq!(ScenarioConfig::parse(&text).unwrap_err().field, "servo.output_limit_ma");

        let text = minimal("lock").replace("\"kp_ma_per_v\": 1", "\"kp_ma_per_v\": \"x\"");
        assert_eq!(ScenarioConfig::parse(&text).unwrap_err().field, "servo.kp_ma_per_v");

        let text = minimal("lock").replace("\"seed\": 7", "\"seed\": 7, \"lockin\": {\"harmonic\": 3, \"lo_freq_hz\": 5000, \"phase_rad\": 0, \"lpf_tau_s\": 0.01, \"gain\": 10}");
        assert_eq!(ScenarioConfig::parse(&text).unwrap_err().field, "lockin.lo_freq_hz");

        let text = minimal("lock").replace("\"seed\": 7", "\"seed\": 7, \"bogus\": 1");
        assert!(ScenarioConfig::parse(&text).unwrap_err().reason.contains("bogus"));
    }

    #[test]
    fn mode_sections_required() {
        let e = ScenarioConfig::parse(r#"{"schema_version": 1, "mode": "lock", "seed": 1}"#).unwrap_err();
        assert_eq!(e.field, "servo");
        let e = ScenarioConfig::parse(r#"{"schema_version": 1, "mode": "sweep", "seed": 1}"#).unwrap_err();
        assert_eq!(e.field, "scan");
        let e = ScenarioConfig::parse(&minimal("spectrum")).unwrap_err();
        assert_eq!(e.field, "spectrum");
    }

    #[test]
    fn sweep_rejects_quasi_static() {
        let mut c = ScenarioConfig::new(Mode::Sweep, 1);
        c.validate().unwrap();
        c.fidelity = Some(Fidelity::QuasiStatic);
        assert_eq!(c.validate().unwrap_err().field, "fidelity");
    }

    #[test]
    fn full_fidelity_lock_needs_whole_periods() {
        let mut c = ScenarioConfig::new(Mode::Lock, 1);
        c.fidelity = Some(Fidelity::Full);
        assert_eq!(c.validate().unwrap_err().field, "servo.update_rate_hz");
        c.servo.as_mut().unwrap().update_rate_hz = 200.0;
        c.validate().unwrap();
    }

    #[test]
    fn unknown_component() {
        let mut c = ScenarioConfig::new(Mode::Freerun, 1);
        c.target_component = "b3".into();
        assert_eq!(c.validate().unwrap_err().field, "target_component");
    }

    #[test]
    fn reference_defaults() {
        let r = ReferenceLaser::default();
        assert_eq!(r.iodine_point_hz(), 281_614_302_178_500.0);
        let s1 = (r.noise.allan_variance(1.0, 2.8e14)).sqrt();
        assert!((s1 - 1e-13).abs() < 1e-18);
    }
}
