//! Power-law fractional-frequency noise synthesis.
//!
//! White FM is an independent gaussian per step with variance `h0/(2·dt)`,
//! which is the gate average of a white process of one-sided density `h0`.
//! Random-walk FM integrates white increments of variance `2π²·h_m2·dt`.
//! Flicker FM sums first-order (Ornstein-Uhlenbeck) processes whose corner
//! frequencies are spaced by `FLICKER_RATIO` from `FLICKER_F_LO_HZ` up to
//! the Nyquist frequency of the step; each carries variance `h_m1·ln(ratio)`
//! so that the summed spectrum is `h_m1/f` between the outer corners.

use rand::Rng;
use rand_distr::StandardNormal;

use super::NoiseSpec;

/// Lowest flicker corner; below it the synthesized spectrum flattens.
pub const FLICKER_F_LO_HZ: f64 = 1e-5;
/// Corner spacing of the flicker bank (two corners per decade).
pub const FLICKER_RATIO: f64 = 3.162_277_660_168_379_5;

#[derive(Debug, Clone, PartialEq)]
pub struct FlickerBank {
    dt: f64,
    h_m1: f64,
    decay: Vec<f64>,
    kick: Vec<f64>,
    state: Vec<f64>,
}

impl FlickerBank {
    pub fn new<R: Rng + ?Sized>(h_m1: f64, dt: f64, rng: &mut R) -> Self {
        let var = h_m1 * FLICKER_RATIO.ln();
        let sd = var.sqrt();
        let f_hi = 0.5 / dt;
        let mut decay = Vec::new();
        let mut kick = Vec::new();
        let mut state = Vec::new();
        let mut f = FLICKER_F_LO_HZ;
        while h_m1 > 0.0 && f <= f_hi {
            let tau_c = 1.0 / (2.0 * std::f64::consts::PI * f);
            let a = (-dt / tau_c).exp();
            decay.push(a);
            kick.push(sd * (1.0 - a * a).sqrt());
            // Start from the stationary distribution.
            let z: f64 = rng.sample(StandardNormal);
            state.push(sd * z);
            f *= FLICKER_RATIO;
        }
        Self { dt, h_m1, decay, kick, state }
    }

    pub fn len(&self) -> usize {
        self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    pub fn corners_hz(&self) -> Vec<f64> {
        (0..self.len()).map(|k| FLICKER_F_LO_HZ * FLICKER_RATIO.powi(k as i32)).collect()
    }

    fn matches(&self, h_m1: f64, dt: f64) -> bool {
        self.h_m1 == h_m1 && self.dt == dt
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let mut sum = 0.0;
        for ((x, a), k) in self.state.iter_mut().zip(&self.decay).zip(&self.kick) {
            let z: f64 = rng.sample(StandardNormal);
            *x = *x * a + k * z;
            sum += *x;
        }
        sum
    }
}

/// Accumulated colored-noise state of one oscillator.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseState {
    /// Random-walk component, fractional.
    pub walk: f64,
    pub flicker: Option<FlickerBank>,
}

impl NoiseState {
    /// Fractional frequency deviation for the step just taken.
    pub fn step<R: Rng + ?Sized>(&mut self, spec: &NoiseSpec, dt: f64, rng: &mut R) -> f64 {
        let mut y = white_fm_sample(spec.h0, dt, rng);
        if spec.h_m2 > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            self.walk += z * (2.0 * std::f64::consts::PI.powi(2) * spec.h_m2 * dt).sqrt();
        }
        y += self.walk;
        if spec.h_m1 > 0.0 {
            if !self.flicker.as_ref().is_some_and(|b| b.matches(spec.h_m1, dt)) {
                self.flicker = Some(FlickerBank::new(spec.h_m1, dt, rng));
            }
            if let Some(bank) = self.flicker.as_mut() {
                y += bank.step(rng);
            }
        }
        y
    }
}

/// Gate-averaged white-FM draw.
#[inline]
pub fn white_fm_sample<R: Rng + ?Sized>(h0: f64, dt: f64, rng: &mut R) -> f64 {
    if h0 == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    z * (h0 / (2.0 * dt)).sqrt()
}
