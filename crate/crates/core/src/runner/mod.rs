//! Scenario orchestration: simulate, summarize, write artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    self, allan_deviation, analysis_taus, beat_spectrum, carrier_dip_db, linewidth, peak_to_peak, AllanCurve,
    AnalysisError, BeatSpectrumConfig, FreqNoise, FreqSeries, Spectrum, NAMED_TAUS_S,
};
use crate::detection::{scan_stats, DetectionError, ScanStats, ScanTable};
use crate::laser::LaserError;
use crate::servo::{LockStatus, LockTransition, Polarity, ServoError};

pub mod config;
pub mod plot;
mod sim;

pub use config::{
    BeatOrdering, ConfigError, Fidelity, Mode, ReferenceLaser, ScanConfig, ScenarioConfig, SpectrumConfig,
    SCHEMA_VERSION,
};
pub use sim::{scan_grid, simulate, SimOutput};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Fractional stability the application needs at the pump fundamental.
pub const REQUIREMENT_SIGMA: f64 = 3.5e-9;
/// Averaging window for the carrier-dip figure of a beat spectrum.
pub const CARRIER_WINDOW_HZ: f64 = 20e3;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Laser(#[from] LaserError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error("reports disagree on nu0 ({a} Hz vs {b} Hz)")]
    Nu0Mismatch { a: f64, b: f64 },
    #[error("report has no {0}")]
    Missing(&'static str),
    #[error("lock was never achieved")]
    NeverLocked,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl RunnerError {
    /// Process exit code: 1 for configuration problems, 2 for the rest.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatSummary {
    pub n_gates: usize,
    pub gate_s: f64,
    pub mean_hz: f64,
    pub peak_to_peak_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSigma {
    pub tau_s: f64,
    pub sigma_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanSummary {
    pub named: Vec<NamedSigma>,
    pub max_sigma_y: f64,
    pub curve: AllanCurve,
}

impl AllanSummary {
    pub fn at(&self, tau_s: f64) -> Option<f64> {
        self.curve.at(tau_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockSummary {
    pub polarity: Polarity,
    pub engaged: bool,
    pub threshold_hz: f64,
    pub dwell_s: f64,
    pub status: LockStatus,
    pub timeline: Vec<LockTransition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub rbw_hz: f64,
    pub carrier_hz: f64,
    pub linewidth_3db_hz: f64,
    pub carrier_dip_db: f64,
}

/// Figures of merit; every number is a function of the emitted CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub beat: Option<BeatSummary>,
    pub allan: Option<AllanSummary>,
    pub lock: Option<LockSummary>,
    pub scan: Option<ScanStats>,
    pub spectrum: Option<SpectrumSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub toolkit_version: String,
    pub mode: Mode,
    pub fidelity: Fidelity,
    pub seed: u64,
    pub nu0_hz: f64,
    #[serde(flatten)]
    pub summary: Summary,
    pub artifacts: Vec<String>,
    pub config: ScenarioConfig,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| RunnerError::Artifact { path: path.display().to_string(), reason: e.to_string() })
    }

    pub fn allan(&self) -> Result<&AllanSummary, RunnerError> {
        self.summary.allan.as_ref().ok_or(RunnerError::Missing("Allan curve"))
    }
}

/// The CSV-level record of a run: exactly what `Summary` is computed from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunData {
    pub beat: Option<FreqSeries>,
    pub error_v: Vec<f64>,
    pub scan: Option<ScanTable>,
    pub spectrum: Option<Spectrum>,
}

impl RunData {
    fn from_sim(cfg: &ScenarioConfig, out: &SimOutput) -> Result<Self, RunnerError> {
        let spectrum = match (&cfg.spectrum, cfg.mode) {
            (Some(s), Mode::Spectrum) => {
                let n = out.dense_beat_hz.len();
                let mean = out.dense_beat_hz.iter().sum::<f64>() / n as f64;
                let noise = FreqNoise { dt: out.dense_dt, values_hz: out.dense_beat_hz.iter().map(|v| v - mean).collect() };
                let bcfg = BeatSpectrumConfig {
                    beat_hz: mean,
                    f_mod_hz: cfg.modulation.f_mod_hz,
                    depth_hz: cfg.modulation.depth_hz,
                    duration_s: n as f64 * out.dense_dt,
                    rbw_hz: s.rbw_hz,
                    span_hz: s.span_hz,
                };
                Some(beat_spectrum(&bcfg, Some(&noise))?)
            }
            _ => None,
        };
        Ok(Self { beat: out.beat.clone(), error_v: out.error_v.clone(), scan: out.scan.clone(), spectrum })
    }
}

/// Noise bandwidth of one scan reading for this configuration.
pub fn scan_enbw_hz(cfg: &ScenarioConfig) -> f64 {
    let Some(sc) = cfg.scan else { return f64::NAN };
    let fs = cfg.detector.sample_rate_hz;
    let n_dwell = (sc.dwell_s * fs).round() as usize;
    let n_avg = ((crate::detection::chain::SETTLE_PERIODS as f64 * fs / cfg.modulation.f_mod_hz).round() as usize)
        .max(1)
        .min(n_dwell);
    crate::detection::settled_enbw_hz(cfg.lockin.lpf_tau_s, fs, n_dwell, n_avg)
}

/// Compute the summary from run data. `lock` carries the facts about the
/// servo that are not measurements: resolved polarity and engagement.
pub fn summarize(cfg: &ScenarioConfig, data: &RunData, lock: Option<(Polarity, bool)>) -> Result<Summary, RunnerError> {
    let mut s = Summary { beat: None, allan: None, lock: None, scan: None, spectrum: None };
    if let Some(fs) = &data.beat {
        if !fs.is_empty() {
            s.beat = Some(BeatSummary {
                n_gates: fs.len(),
                gate_s: fs.gate_s,
                mean_hz: fs.mean(),
                peak_to_peak_hz: peak_to_peak(fs),
            });
        }
        let taus = analysis_taus(fs.len(), fs.gate_s, &NAMED_TAUS_S);
        if !taus.is_empty() {
            let curve = allan_deviation(fs, &taus, true)?;
            let named = NAMED_TAUS_S
                .iter()
                .filter_map(|&t| curve.at(t).map(|sigma_y| NamedSigma { tau_s: t, sigma_y }))
                .collect();
            let max_sigma_y = curve.max_sigma().unwrap_or(0.0);
            s.allan = Some(AllanSummary { named, max_sigma_y, curve });
        }
        if let Some((polarity, engaged)) = lock {
            let mean = fs.mean();
            let offsets: Vec<f64> = fs.values_hz.iter().map(|v| v - mean).collect();
            let det = cfg.lock_detector;
            let tail = ((det.dwell_s / fs.gate_s).round() as usize).min(data.error_v.len());
            let status = det.status(&offsets, fs.gate_s, engaged, &data.error_v[data.error_v.len() - tail..]);
            s.lock = Some(LockSummary {
                polarity,
                engaged,
                threshold_hz: det.threshold_hz,
                dwell_s: det.dwell_s,
                status,
                timeline: det.timeline(&offsets, fs.gate_s, engaged),
            });
        }
    }
    if let (Some(scan), Some(sc)) = (&data.scan, &cfg.scan) {
        let fwhm = cfg.line_table.component(&cfg.target_component).map(|c| c.fwhm_hz).unwrap_or(f64::NAN);
        s.scan = Some(scan_stats(scan, fwhm, scan_enbw_hz(cfg), sc.snr_bandwidth_hz));
    }
    if let Some(sp) = &data.spectrum {
        let carrier = sp.freq_hz[sp.freq_hz.len() / 2];
        s.spectrum = Some(SpectrumSummary {
            rbw_hz: sp.rbw_hz,
            carrier_hz: carrier,
            linewidth_3db_hz: linewidth(sp, 3.0)?,
            carrier_dip_db: carrier_dip_db(sp, carrier, CARRIER_WINDOW_HZ),
        });
    }
    Ok(s)
}

/// Simulate and summarize without touching the filesystem.
pub fn execute(cfg: &ScenarioConfig) -> Result<(RunData, RunReport), RunnerError> {
    let out = simulate(cfg)?;
    let data = RunData::from_sim(cfg, &out)?;
    let lock = out.polarity.map(|p| (p, out.engaged));
    let summary = summarize(cfg, &data, lock)?;
    let mut config = cfg.clone();
    config.fidelity = Some(cfg.fidelity());
    let report = RunReport {
        toolkit_version: TOOLKIT_VERSION.to_string(),
        mode: cfg.mode,
        fidelity: cfg.fidelity(),
        seed: cfg.seed,
        nu0_hz: cfg.laser.nominal_freq_1064_hz,
        summary,
        artifacts: Vec::new(),
        config,
    };
    Ok((data, report))
}

fn write(dir: &Path, name: &str, text: &str, artifacts: &mut Vec<String>) -> Result<(), RunnerError> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(io_err(&p))?;
    artifacts.push(name.to_string());
    Ok(())
}

/// Run a scenario and write its artifacts into `out_dir`.
pub fn run(cfg: &ScenarioConfig, out_dir: &Path) -> Result<RunReport, RunnerError> {
    let (data, mut report) = execute(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut art = Vec::new();
    write(out_dir, "config_echo.json", &cfg.echo_json(), &mut art)?;
    if let Some(fs) = &data.beat {
        write(out_dir, "beat.csv", &analysis::io::freq_series_csv(fs), &mut art)?;
        let t: Vec<f64> = (1..=fs.len()).map(|i| i as f64 * fs.gate_s).collect();
        let y: Vec<f64> = fs.values_hz.iter().map(|v| v / 1e3).collect();
        let p = plot::Plot {
            title: "Beat frequency",
            x_label: "time (s)",
            y_label: "beat (kHz)",
            series: vec![plot::Series { label: "beat", x: &t, y: &y }],
            ..Default::default()
        };
        write(out_dir, "beat.svg", &p.to_svg(), &mut art)?;
    }
    if !data.error_v.is_empty() {
        let gate = cfg.gate_s;
        let t: Vec<f64> = (1..=data.error_v.len()).map(|i| i as f64 * gate).collect();
        write(out_dir, "error.csv", &analysis::io::table_csv("t_s,error_v", &t, &data.error_v), &mut art)?;
    }
    if let Some(a) = &report.summary.allan {
        write(out_dir, "allan.csv", &analysis::io::allan_csv(&a.curve), &mut art)?;
        let p = plot::Plot {
            title: "Allan deviation",
            x_label: "averaging time (s)",
            y_label: "sigma_y",
            log_x: true,
            log_y: true,
            series: vec![plot::Series { label: mode_label(cfg.mode), x: &a.curve.taus_s, y: &a.curve.sigma_y }],
            hlines: vec![(REQUIREMENT_SIGMA, "3.5e-9 requirement")],
        };
        write(out_dir, "allan.svg", &p.to_svg(), &mut art)?;
    }
    if let Some(scan) = &data.scan {
        write(out_dir, "scan.csv", &scan.to_csv(), &mut art)?;
        let x: Vec<f64> = scan.detuning_hz.iter().map(|d| d / 1e6).collect();
        let p = plot::Plot {
            title: "3f error signal",
            x_label: "detuning at 532 nm (MHz)",
            y_label: "lock-in output (V)",
            series: vec![plot::Series { label: &cfg.target_component, x: &x, y: &scan.error_v }],
            ..Default::default()
        };
        write(out_dir, "scan.svg", &p.to_svg(), &mut art)?;
    }
    if let Some(sp) = &data.spectrum {
        write(out_dir, "spectrum.csv", &analysis::io::spectrum_csv(sp), &mut art)?;
        let c = sp.freq_hz[sp.freq_hz.len() / 2];
        let x: Vec<f64> = sp.freq_hz.iter().map(|f| (f - c) / 1e3).collect();
        let p = plot::Plot {
            title: "Beat spectrum",
            x_label: "offset from mean beat (kHz)",
            y_label: "power (dBc per RBW)",
            series: vec![plot::Series { label: "beat", x: &x, y: &sp.power_dbc }],
            ..Default::default()
        };
        write(out_dir, "spectrum.svg", &p.to_svg(), &mut art)?;
    }
    art.push("report.json".into());
    report.artifacts = art;
    let path = out_dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report is serializable");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(report)
}

fn mode_label(m: Mode) -> &'static str {
    match m {
        Mode::Sweep => "sweep",
        Mode::Freerun => "free running",
        Mode::Lock => "locked",
        Mode::Spectrum => "locked",
    }
}

fn read(dir: &Path, name: &str) -> Result<Option<String>, RunnerError> {
    let p = dir.join(name);
    if !p.exists() {
        return Ok(None);
    }
    std::fs::read_to_string(&p).map(Some).map_err(io_err(&p))
}

fn artifact<T, E: std::fmt::Display>(dir: &Path, name: &str, r: Result<T, E>) -> Result<T, RunnerError> {
    r.map_err(|e| RunnerError::Artifact { path: dir.join(name).display().to_string(), reason: e.to_string() })
}

/// Reload the CSVs and echoed config of a run directory.
pub fn load_run_data(dir: &Path) -> Result<(ScenarioConfig, RunData), RunnerError> {
    let cfg_text = read(dir, "config_echo.json")?.ok_or(RunnerError::Missing("config_echo.json"))?;
    let cfg = ScenarioConfig::parse(&cfg_text)?;
    let mut data = RunData::default();
    if let Some(t) = read(dir, "beat.csv")? {
        data.beat = Some(artifact(dir, "beat.csv", analysis::io::parse_freq_series(&t))?);
    }
    if let Some(t) = read(dir, "error.csv")? {
        data.error_v = artifact(dir, "error.csv", analysis::io::parse_table(&t, "t_s,error_v"))?.1;
    }
    if let Some(t) = read(dir, "scan.csv")? {
        data.scan = Some(artifact(dir, "scan.csv", ScanTable::from_csv(&t))?);
    }
    if let Some(t) = read(dir, "spectrum.csv")? {
        data.spectrum = Some(artifact(dir, "spectrum.csv", analysis::io::parse_spectrum(&t))?);
    }
    Ok((cfg, data))
}

/// Recompute a run's summary from its directory alone.
pub fn recompute_summary(dir: &Path) -> Result<Summary, RunnerError> {
    let (cfg, data) = load_run_data(dir)?;
    let report = RunReport::load(&dir.join("report.json"))?;
    let lock = report.summary.lock.as_ref().map(|l| (l.polarity, l.engaged));
    summarize(&cfg, &data, lock)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub tau_s: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    /// `sigma_a / sigma_b`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<RatioRow>,
    pub svg: String,
}

impl Comparison {
    pub fn ratio_at(&self, tau_s: f64) -> Option<f64> {
        self.rows.iter().find(|r| (r.tau_s - tau_s).abs() <= 1e-9 * tau_s).map(|r| r.ratio)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau_s,sigma_a,sigma_b,ratio\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.tau_s, r.sigma_a, r.sigma_b, r.ratio));
        }
        s
    }
}

/// Overlay two Allan curves on the requirement line and tabulate
/// `σ_a/σ_b` at every common τ. Pass the free-running report first to get
/// the improvement factor.
pub fn compare(a: &RunReport, b: &RunReport) -> Result<Comparison, RunnerError> {
    if (a.nu0_hz - b.nu0_hz).abs() > 1e-12 * a.nu0_hz.abs() {
        return Err(RunnerError::Nu0Mismatch { a: a.nu0_hz, b: b.nu0_hz });
    }
    let (ca, cb) = (&a.allan()?.curve, &b.allan()?.curve);
    let rows = ca
        .taus_s
        .iter()
        .zip(&ca.sigma_y)
        .filter_map(|(&t, &sa)| {
            let sb = cb.at(t)?;
            Some(RatioRow { tau_s: t, sigma_a: sa, sigma_b: sb, ratio: sa / sb })
        })
        .collect();
    let p = plot::Plot {
        title: "Allan deviation",
        x_label: "averaging time (s)",
        y_label: "sigma_y",
        log_x: true,
        log_y: true,
        series: vec![
            plot::Series { label: mode_label(a.mode), x: &ca.taus_s, y: &ca.sigma_y },
            plot::Series { label: mode_label(b.mode), x: &cb.taus_s, y: &cb.sigma_y },
        ],
        hlines: vec![(REQUIREMENT_SIGMA, "3.5e-9 requirement")],
    };
    Ok(Comparison { rows, svg: p.to_svg() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsoluteFrequency {
    pub freq_hz: f64,
    pub uncertainty_hz: f64,
}

/// Compact-laser frequency from the mean beat against the reference.
///
/// The reference emits `abs_freq`, which is its iodine point plus
/// `lock_offset`, so this is also `iodine_point + lock_offset ∓ beat`.
pub fn compact_frequency(reference: &ReferenceLaser, mean_beat_hz: f64) -> f64 {
    match reference.ordering {
        BeatOrdering::CompactBelow => reference.abs_freq_1064_hz - mean_beat_hz,
        BeatOrdering::CompactAbove => reference.abs_freq_1064_hz + mean_beat_hz,
    }
}

/// Frequency uncertainty implied by the worst Allan deviation of a run.
pub fn frequency_uncertainty(sigma_max: f64, nu0_hz: f64) -> f64 {
    sigma_max * nu0_hz
}

pub fn absolute_frequency(report: &RunReport, reference: &ReferenceLaser) -> Result<AbsoluteFrequency, RunnerError> {
    let lock = report.summary.lock.as_ref().ok_or(RunnerError::NeverLocked)?;
    if !lock.timeline.iter().any(|t| t.in_lock) {
        return Err(RunnerError::NeverLocked);
    }
    let beat = report.summary.beat.as_ref().ok_or(RunnerError::Missing("beat record"))?;
    let allan = report.allan()?;
    Ok(AbsoluteFrequency {
        freq_hz: compact_frequency(reference, beat.mean_hz),
        uncertainty_hz: frequency_uncertainty(allan.max_sigma_y, report.nu0_hz),
    })
}

/// Default output directory for a config file: `runs/<file stem>`.
pub fn default_out_dir(config_path: &Path, cfg: &ScenarioConfig) -> PathBuf {
    if let Some(d) = &cfg.output_dir {
        return PathBuf::from(d);
    }
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    PathBuf::from("runs").join(stem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absolute_frequency_arithmetic() {
        let r = ReferenceLaser::default();
        let f = compact_frequency(&r, 19_987_400.0);
        assert_eq!(f, 281_614_302_191_100.0);
        let quiet = ReferenceLaser { abs_freq_1064_hz: 2.8e14, lock_offset_hz: 0.0, ..r };
        assert_eq!(compact_frequency(&quiet, 0.0), 2.8e14);
        let u = frequency_uncertainty(5.7e-12, 281.614e12);
        assert!((u - 1605.2).abs() < 0.1, "{u}");
        assert_eq!((u / 100.0).round() / 10.0, 1.6);
    }

    #[test]
    fn quiescent_freerun() {
        let mut c = ScenarioConfig::new(Mode::Freerun, 1);
        c.noise = crate::laser::NoiseSpec::QUIET;
        c.reference.noise = crate::laser::NoiseSpec::QUIET;
        c.duration_s = 64.0;
        let (data, rep) = execute(&c).unwrap();
        let fs = data.beat.unwrap();
        assert!(fs.values_hz.iter().all(|v| *v == fs.values_hz[0]));
        let b = rep.summary.beat.unwrap();
        assert_eq!(b.peak_to_peak_hz, 0.0);
        assert!(rep.summary.allan.unwrap().curve.sigma_y.iter().all(|s| *s == 0.0));
        assert_eq!(b.mean_hz, 19_950_000.0);
    }

    #[test]
    fn exit_codes() {
        let e = RunnerError::Config(ConfigError { field: "x".into(), reason: "y".into() });
        assert_eq!(e.exit_code(), 1);
        assert_eq!(RunnerError::NeverLocked.exit_code(), 2);
    }
}
