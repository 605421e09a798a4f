//! Closed-loop behaviour of the servo on the quasi-static plant.

use iodine_lock::detection::{DetectorConfig, DiscriminatorTable, LockInConfig, QuasiStaticChain, RamConfig};
use iodine_lock::iodine_reference::ReferenceLineModel;
use iodine_lock::laser::{ActuatorParams, LaserState, ModulationConfig, NoiseSpec};
use iodine_lock::runner::{self, Mode, RunnerError, ScenarioConfig};
use iodine_lock::servo::{servo_step_mut, Polarity, ServoConfig, ServoError, ServoState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn table(params: &ActuatorParams) -> DiscriminatorTable {
    DiscriminatorTable::for_component(
        &ReferenceLineModel::bundled(),
        "a10",
        params,
        &ModulationConfig::default(),
        &LockInConfig::default(),
        &DetectorConfig::default(),
    )
    .unwrap()
}

#[test]
fn step_disturbance_decays_at_integrator_rate() {
    let params = ActuatorParams { thermal_tau_s: 0.0, ..ActuatorParams::default() };
    let t = table(&params);
    let d_1064 = 2.0 * t.slope_v_per_hz();
    let rate = 2600.0;
    let dt = 1.0 / rate;
    // Pure integrator with a 1 s loop time constant, well above the filter.
    let ki = 1.0 / (params.freq_gain_hz_per_ma.abs() * d_1064.abs());
    let expected_tau = 1.0 / (ki * params.freq_gain_hz_per_ma.abs() * d_1064.abs());
    let cfg = ServoConfig { kp_ma_per_v: 0.0, ki_ma_per_v_s: ki, output_limit_ma: 1e3, update_rate_hz: rate, polarity: Polarity::Auto };
    let sign = -(params.freq_gain_hz_per_ma * d_1064).signum();
    let quiet = DetectorConfig { noise_v_per_rthz: 0.0, ..DetectorConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut chain = QuasiStaticChain::new(t, &params, &LockInConfig::default(), &quiet, &RamConfig::OFF, 0.0, rate, &mut rng);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);

    // Start locked at line center (the state is exact: zero error, zero
    // control, laser parked at the component), then step the carrier.
    let base = params.nominal_freq_1064_hz - ReferenceLineModel::bundled().reference_freq_532_hz / 2.0;
    let step_hz = 10e3;
    let control0 = -base / params.freq_gain_hz_per_ma;
    let mut laser = LaserState::settled_at(&params, control0);
    chain.settle_at(0.0, laser.output_power_w);
    let mut servo = ServoState::engage(&cfg, Some(Polarity::from_sign(sign)));
    servo.integrator_ma = control0;
    let mut control = control0;
    let mut dev = Vec::new();
    for _ in 0..(5.0 * rate) as usize {
        laser.step(&params, &NoiseSpec::QUIET, control, dt, &mut rng).unwrap();
        let x = base + laser.carrier_offset_hz + step_hz;
        let e = chain.step(2.0 * x, laser.output_power_w, &mut rng, &mut r2);
        control = servo_step_mut(&mut servo, &cfg, e, dt);
        dev.push(x);
    }
    // Log-linear fit of the deviation between 0.5 and 3 time constants.
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, &x) in dev.iter().enumerate() {
        let t = (k + 1) as f64 * dt;
        if t > 0.5 * expected_tau && t < 3.0 * expected_tau {
            let y = x.abs().ln();
            sx += t;
            sy += y;
            sxx += t * t;
            sxy += t * y;
            n += 1.0;
        }
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let tau = -1.0 / slope;
    assert!((tau / expected_tau - 1.0).abs() < 0.10, "fitted {tau} s vs {expected_tau} s");
}

fn short_lock(seed: u64, duration_s: f64) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(Mode::Lock, seed);
    c.duration_s = duration_s;
    c
}

#[test]
fn auto_polarity_follows_actuator_sign() {
    let c = short_lock(3, 2.0);
    let a = runner::simulate(&c).unwrap().polarity.unwrap();
    let mut flipped = c.clone();
    flipped.laser.freq_gain_hz_per_ma = -c.laser.freq_gain_hz_per_ma;
    let b = runner::simulate(&flipped).unwrap().polarity.unwrap();
    assert_ne!(a, b);
    assert_ne!(a, Polarity::Auto);
}

#[test]
fn auto_polarity_fails_out_of_capture_range() {
    let mut c = short_lock(3, 2.0);
    // 2 MHz at 1064 nm is 4 dip widths at 532 nm.
    c.laser.nominal_freq_1064_hz += 2e6;
    match runner::simulate(&c) {
        Err(RunnerError::Servo(ServoError::Acquisition { .. })) => {}
        other => panic!("expected acquisition error, got {other:?}"),
    }
}

/// Mean square deviation of the beat from the locked beat, which is the
/// reference offset less the 12.6 kHz lock-point difference.
fn spread(v: &[f64]) -> f64 {
    v.iter().map(|x| (x - 19_987_400.0).powi(2)).sum::<f64>() / v.len() as f64
}

#[test]
fn returned_polarity_reduces_variance() {
    let c = short_lock(5, 60.0);
    let good = runner::simulate(&c).unwrap();
    let p = good.polarity.unwrap();
    let mut bad = c.clone();
    let mut s = bad.servo.unwrap();
    s.polarity = if p == Polarity::Positive { Polarity::Negative } else { Polarity::Positive };
    bad.servo = Some(s);
    let bad = runner::simulate(&bad).unwrap();
    let free = runner::simulate(&ScenarioConfig { mode: Mode::Freerun, servo: None, ..c.clone() }).unwrap();

    let vg = spread(&good.beat.unwrap().values_hz);
    let vb = spread(&bad.beat.unwrap().values_hz);
    let vf = spread(&free.beat.unwrap().values_hz);
    assert!(vg < 1e-3 * vb, "good {vg:e}, wrong sign {vb:e}");
    assert!(vg < 1e-3 * vf, "good {vg:e}, free {vf:e}");
}

#[test]
fn negative_feedback_for_every_seed() {
    let duration = 300.0;
    for seed in 1..=6 {
        let c = short_lock(seed, duration);
        let out = runner::simulate(&c).unwrap();
        let beat = out.beat.unwrap();
        let lock_beat = 19_987_400.0;
        let offset = (beat.mean() - lock_beat).abs();
        let drift = c.noise.drift_hz_per_s.abs() * duration;
        assert!(offset < drift, "seed {seed}: {offset} Hz vs drift {drift} Hz");
        assert!(offset < 10e3, "seed {seed}: {offset} Hz");
    }
}
