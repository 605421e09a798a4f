//! The closed and open loops behind `run`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Fidelity, Mode, ScenarioConfig};
use super::RunnerError;
use crate::analysis::{FreqSeries, GateCounter};
use crate::detection::{
    scan_error_signal, DetectorConfig, DiscriminatorTable, QuasiStaticChain, RamConfig, ScanSetup, ScanTable,
    TimeDomainChain,
};
use crate::laser::{LaserState, NoiseSpec, NoiseState};
use crate::servo::{auto_polarity, servo_step_mut, Plant, Polarity, ServoConfig, ServoState};

/// Independent random streams, one per physical noise source, so that
/// changing one source leaves the others' draws untouched.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Laser = 1,
    Detector = 2,
    Ram = 3,
    Reference = 4,
}

fn rng(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s as u64);
    r
}

/// What a run produced, before any file is written.
#[derive(Debug, Clone, Default)]
pub struct SimOutput {
    /// Gated beat note between compact and reference laser.
    pub beat: Option<FreqSeries>,
    /// Gate-averaged error signal, for closed-loop runs.
    pub error_v: Vec<f64>,
    /// Beat at the simulation rate over the spectrum acquisition window.
    pub dense_beat_hz: Vec<f64>,
    pub dense_dt: f64,
    pub scan: Option<ScanTable>,
    pub polarity: Option<Polarity>,
    pub engaged: bool,
}

/// Gates the compact-minus-reference difference and applies the
/// reference laser's own noise.
struct Recorder {
    counter: GateCounter,
    err_counter: GateCounter,
    gates: Vec<f64>,
    err_gates: Vec<f64>,
    dense: Vec<f64>,
    dense_from: usize,
    k: usize,
    base_hz: f64,
    ref_nu0: f64,
    ref_noise: NoiseSpec,
    ref_state: NoiseState,
    ref_rng: ChaCha8Rng,
    dt: f64,
}

impl Recorder {
    fn new(cfg: &ScenarioConfig, dt: f64, dense_from: usize) -> Result<Self, RunnerError> {
        Ok(Self {
            counter: GateCounter::new(dt, cfg.gate_s)?,
            err_counter: GateCounter::new(dt, cfg.gate_s)?,
            gates: Vec::new(),
            err_gates: Vec::new(),
            dense: Vec::new(),
            dense_from,
            k: 0,
            base_hz: cfg.laser.nominal_freq_1064_hz - cfg.reference.abs_freq_1064_hz,
            ref_nu0: cfg.reference.abs_freq_1064_hz,
            ref_noise: cfg.reference.noise,
            ref_state: NoiseState::default(),
            ref_rng: rng(cfg.seed, Stream::Reference),
            dt,
        })
    }

    #[inline]
    fn push(&mut self, compact_offset_hz: f64, error_v: Option<f64>) {
        self.k += 1;
        let y_ref = self.ref_state.step(&self.ref_noise, self.dt, &mut self.ref_rng);
        let ref_offset = self.ref_noise.drift_hz_per_s * self.k as f64 * self.dt + self.ref_nu0 * y_ref;
        let beat = (self.base_hz + compact_offset_hz - ref_offset).abs();
        if self.k > self.dense_from {
            self.dense.push(beat);
        }
        if let Some(g) = self.counter.push(beat) {
            self.gates.push(g);
        }
        if let Some(e) = error_v {
            if let Some(g) = self.err_counter.push(e) {
                self.err_gates.push(g);
            }
        }
    }
}

fn steps(duration_s: f64, dt: f64) -> usize {
    (duration_s / dt).round() as usize
}

/// Settled error signal read off the discriminator table.
struct TablePlant<'a> {
    chain: &'a QuasiStaticChain,
    delta0_532_hz: f64,
    gain_532_hz_per_ma: f64,
    power0_w: f64,
    power_gain_w_per_ma: f64,
    static_offset_v: f64,
}

impl Plant for TablePlant<'_> {
    fn settled_error(&mut self, control_ma: f64) -> f64 {
        let d = self.delta0_532_hz + self.gain_532_hz_per_ma * control_ma;
        let p = self.power0_w + self.power_gain_w_per_ma * control_ma;
        self.chain.settled_v(d, p, self.static_offset_v)
    }
}

/// Settled error signal of a noise-free sample-rate chain.
struct TimeDomainPlant<'a> {
    setup: ScanSetup<'a>,
    delta0_1064_hz: f64,
    gain_hz_per_ma: f64,
    power0_w: f64,
    power_gain_w_per_ma: f64,
}

impl Plant for TimeDomainPlant<'_> {
    fn settled_error(&mut self, control_ma: f64) -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let Ok(mut chain) = TimeDomainChain::new(&self.setup, &mut r) else { return 0.0 };
        let fs = self.setup.detector.sample_rate_hz;
        let n = (20.0 * self.setup.lockin.lpf_tau_s * fs).round() as usize;
        let n_avg = self.setup.settle_samples().min(n);
        let d = self.delta0_1064_hz + self.gain_hz_per_ma * control_ma;
        let p = self.power0_w + self.power_gain_w_per_ma * control_ma;
        let mut acc = 0.0;
        for j in 0..n {
            let y = chain.step(d, p, &mut r, &mut r2);
            if j >= n - n_avg {
                acc += y;
            }
        }
        acc / n_avg as f64
    }
}

fn build_table(cfg: &ScenarioConfig) -> Result<DiscriminatorTable, RunnerError> {
    Ok(DiscriminatorTable::for_component(
        &cfg.line_table,
        &cfg.target_component,
        &cfg.laser,
        &cfg.modulation,
        &cfg.lockin,
        &cfg.detector,
    )?)
}

/// Dither and slope threshold for polarity detection: ±1% of the dip width
/// at 532 nm, and 5% of the nominal discriminator slope.
fn acquisition_params(cfg: &ScenarioConfig, table: &DiscriminatorTable) -> (f64, f64) {
    let fwhm = cfg.line_table.component(&cfg.target_component).map(|c| c.fwhm_hz).unwrap_or(1e6);
    let g532 = 2.0 * cfg.laser.freq_gain_hz_per_ma.abs();
    let dither = 0.01 * fwhm / g532;
    let min_slope = 0.05 * table.slope_v_per_hz().abs() * g532;
    (dither, min_slope)
}

fn resolve_polarity<P: Plant>(servo: &ServoConfig, plant: &mut P, dither: f64, min: f64) -> Result<Polarity, RunnerError> {
    match servo.polarity {
        Polarity::Auto => Ok(auto_polarity(plant, 0.0, dither, min)?),
        p => Ok(p),
    }
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<SimOutput, RunnerError> {
    cfg.validate()?;
    match (cfg.mode, cfg.fidelity()) {
        (Mode::Sweep, _) => sweep(cfg),
        (Mode::Freerun, f) => freerun(cfg, f),
        (Mode::Lock | Mode::Spectrum, Fidelity::QuasiStatic) => lock_quasi_static(cfg),
        (Mode::Lock | Mode::Spectrum, Fidelity::Full) => lock_full(cfg),
    }
}

fn component_offset(cfg: &ScenarioConfig) -> f64 {
    cfg.line_table.component(&cfg.target_component).map(|c| c.offset_hz).unwrap_or(0.0)
}

/// Compact laser's unmodulated 1064 nm carrier minus half the reference
/// line-table frequency, at zero actuation and noise.
fn carrier_base_hz(cfg: &ScenarioConfig) -> f64 {
    cfg.laser.nominal_freq_1064_hz - cfg.line_table.reference_freq_532_hz / 2.0
}

fn dense_from(cfg: &ScenarioConfig, n: usize, dt: f64) -> usize {
    match (&cfg.spectrum, cfg.mode) {
        (Some(s), Mode::Spectrum) => n.saturating_sub(steps(s.acquisition_s, dt)),
        _ => usize::MAX,
    }
}

fn finish(cfg: &ScenarioConfig, rec: Recorder, polarity: Option<Polarity>, engaged: bool) -> SimOutput {
    SimOutput {
        beat: Some(FreqSeries { values_hz: rec.gates, gate_s: cfg.gate_s, nu0_hz: cfg.laser.nominal_freq_1064_hz }),
        error_v: rec.err_gates,
        dense_beat_hz: rec.dense,
        dense_dt: rec.dt,
        scan: None,
        polarity,
        engaged,
    }
}

fn freerun(cfg: &ScenarioConfig, fidelity: Fidelity) -> Result<SimOutput, RunnerError> {
    let dt = match fidelity {
        Fidelity::Full => 1.0 / cfg.detector.sample_rate_hz,
        Fidelity::QuasiStatic => 1.0 / cfg.servo.map(|s| s.update_rate_hz).unwrap_or(ServoConfig::default().update_rate_hz),
    };
    let n = steps(cfg.duration_s, dt);
    let mut rec = Recorder::new(cfg, dt, usize::MAX)?;
    let mut laser_rng = rng(cfg.seed, Stream::Laser);
    let mut laser = LaserState::new(&cfg.laser);
    for _ in 0..n {
        laser.step(&cfg.laser, &cfg.noise, 0.0, dt, &mut laser_rng)?;
        rec.push(laser.carrier_offset_hz, None);
    }
    Ok(finish(cfg, rec, None, false))
}

fn lock_quasi_static(cfg: &ScenarioConfig) -> Result<SimOutput, RunnerError> {
    let servo_cfg = cfg.servo.expect("validated");
    let dt = 1.0 / servo_cfg.update_rate_hz;
    let n = steps(cfg.duration_s, dt);
    let mut laser_rng = rng(cfg.seed, Stream::Laser);
    let mut det_rng = rng(cfg.seed, Stream::Detector);
    let mut ram_rng = rng(cfg.seed, Stream::Ram);

    let table = build_table(cfg)?;
    let (dither, min_slope) = acquisition_params(cfg, &table);
    let mut chain = QuasiStaticChain::new(
        table,
        &cfg.laser,
        &cfg.lockin,
        &cfg.detector,
        &cfg.ram,
        cfg.line_table.stark_coeff_hz_per_w,
        servo_cfg.update_rate_hz,
        &mut ram_rng,
    );
    let base = carrier_base_hz(cfg);
    let comp = component_offset(cfg);
    let mut laser = LaserState::new(&cfg.laser);
    let delta0 = 2.0 * (base + laser.carrier_offset_hz) - comp;
    let polarity = {
        let mut plant = TablePlant {
            chain: &chain,
            delta0_532_hz: delta0,
            gain_532_hz_per_ma: 2.0 * cfg.laser.freq_gain_hz_per_ma,
            power0_w: cfg.laser.nominal_power_w,
            power_gain_w_per_ma: cfg.laser.power_gain_w_per_ma,
            static_offset_v: cfg.ram.static_offset_v,
        };
        resolve_polarity(&servo_cfg, &mut plant, dither, min_slope)?
    };
    chain.settle_at(delta0, laser.output_power_w);
    let mut servo = ServoState::engage_bumpless(&servo_cfg, Some(polarity), chain.output_v(), 0.0);

    let mut rec = Recorder::new(cfg, dt, dense_from(cfg, n, dt))?;
    let mut control = 0.0;
    for _ in 0..n {
        laser.step(&cfg.laser, &cfg.noise, control, dt, &mut laser_rng)?;
        let d532 = 2.0 * (base + laser.carrier_offset_hz) - comp;
        let e = chain.step(d532, laser.output_power_w, &mut det_rng, &mut ram_rng);
        control = servo_step_mut(&mut servo, &servo_cfg, e, dt);
        rec.push(laser.carrier_offset_hz, Some(e));
    }
    Ok(finish(cfg, rec, Some(polarity), servo.engaged))
}

fn setup(cfg: &ScenarioConfig) -> ScanSetup<'_> {
    ScanSetup {
        model: &cfg.line_table,
        component: &cfg.target_component,
        params: cfg.laser,
        modulation: cfg.modulation,
        lockin: cfg.lockin,
        detector: cfg.detector,
        ram: cfg.ram,
    }
}

fn lock_full(cfg: &ScenarioConfig) -> Result<SimOutput, RunnerError> {
    let servo_cfg = cfg.servo.expect("validated");
    let fs = cfg.detector.sample_rate_hz;
    let dt = 1.0 / fs;
    let block = (fs / servo_cfg.update_rate_hz).round() as usize;
    let servo_dt = block as f64 * dt;
    let n = steps(cfg.duration_s, dt);
    let mut laser_rng = rng(cfg.seed, Stream::Laser);
    let mut det_rng = rng(cfg.seed, Stream::Detector);
    let mut ram_rng = rng(cfg.seed, Stream::Ram);

    let s = setup(cfg);
    let table = build_table(cfg)?;
    let (dither, min_slope) = acquisition_params(cfg, &table);
    let base = carrier_base_hz(cfg);
    let comp_1064 = component_offset(cfg) / 2.0;
    let mut laser = LaserState::new(&cfg.laser);
    let polarity = {
        let quiet = ScanSetup {
            detector: DetectorConfig { noise_v_per_rthz: 0.0, ..cfg.detector },
            ram: RamConfig { walk_sigma_v_per_rts: 0.0, ..cfg.ram },
            ..s.clone()
        };
        let mut plant = TimeDomainPlant {
            setup: quiet,
            delta0_1064_hz: base + laser.carrier_offset_hz - comp_1064,
            gain_hz_per_ma: cfg.laser.freq_gain_hz_per_ma,
            power0_w: cfg.laser.nominal_power_w,
            power_gain_w_per_ma: cfg.laser.power_gain_w_per_ma,
        };
        resolve_polarity(&servo_cfg, &mut plant, dither, min_slope)?
    };
    let mut chain = TimeDomainChain::new(&s, &mut ram_rng)?;
    // Let the lock-in settle on the parked laser before closing the loop.
    let pre = (10.0 * cfg.lockin.lpf_tau_s / servo_dt).ceil() as usize * block;
    let mut e0 = 0.0;
    for j in 0..pre {
        let v = chain.step(base - comp_1064, laser.output_power_w, &mut det_rng, &mut ram_rng);
        if j >= pre - block {
            e0 += v / block as f64;
        }
    }
    let mut servo = ServoState::engage_bumpless(&servo_cfg, Some(polarity), e0, 0.0);

    let mut rec = Recorder::new(cfg, dt, dense_from(cfg, n, dt))?;
    let mut control = 0.0;
    let mut acc = 0.0;
    let mut last_e = e0;
    for k in 0..n {
        laser.step(&cfg.laser, &cfg.noise, control, dt, &mut laser_rng)?;
        acc += chain.step(base + laser.carrier_offset_hz - comp_1064, laser.output_power_w, &mut det_rng, &mut ram_rng);
        if (k + 1) % block == 0 {
            last_e = acc / block as f64;
            acc = 0.0;
            control = servo_step_mut(&mut servo, &servo_cfg, last_e, servo_dt);
        }
        rec.push(laser.carrier_offset_hz, Some(last_e));
    }
    Ok(finish(cfg, rec, Some(polarity), servo.engaged))
}

/// Scan grid about the target component at 532 nm.
pub fn scan_grid(half_span_hz: f64, step_hz: f64) -> Vec<f64> {
    let n = (half_span_hz / step_hz).floor() as i64;
    (-n..=n).map(|i| i as f64 * step_hz).collect()
}

fn sweep(cfg: &ScenarioConfig) -> Result<SimOutput, RunnerError> {
    let sc = cfg.scan.expect("validated");
    let mut det_rng = rng(cfg.seed, Stream::Detector);
    let mut ram_rng = rng(cfg.seed, Stream::Ram);
    let s = setup(cfg);
    let grid = scan_grid(sc.half_span_hz, sc.step_hz);
    let table = scan_error_signal(&s, &grid, sc.dwell_s, &mut det_rng, &mut ram_rng)?;
    Ok(SimOutput { scan: Some(table), ..SimOutput::default() })
}
