use serde::{Deserialize, Serialize};

use super::{integer_ratio, AnalysisError};

/// Consecutive gate-averaged frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqSeries {
    pub values_hz: Vec<f64>,
    pub gate_s: f64,
    /// Carrier used to express values as fractional frequency.
    pub nu0_hz: f64,
}

impl FreqSeries {
    pub fn len(&self) -> usize {
        self.values_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values_hz.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values_hz.iter().sum::<f64>() / self.values_hz.len() as f64
    }

    pub fn duration_s(&self) -> f64 {
        self.gate_s * self.values_hz.len() as f64
    }
}

/// Boxcar (Π) gating of a densely sampled frequency record.
pub fn counter(dense_hz: &[f64], dt: f64, gate_s: f64, nu0_hz: f64) -> Result<FreqSeries, AnalysisError> {
    let m = integer_ratio(gate_s, dt).ok_or(AnalysisError::GateNotMultiple { gate_s, dt })?;
    let values_hz = dense_hz
        .chunks_exact(m)
        .map(|c| c.iter().sum::<f64>() / m as f64)
        .collect();
    Ok(FreqSeries { values_hz, gate_s, nu0_hz })
}

/// Streaming form of [`counter`] for long simulations.
#[derive(Debug, Clone)]
pub struct GateCounter {
    per_gate: usize,
    acc: f64,
    filled: usize,
}

impl GateCounter {
    pub fn new(dt: f64, gate_s: f64) -> Result<Self, AnalysisError> {
        let per_gate = integer_ratio(gate_s, dt).ok_or(AnalysisError::GateNotMultiple { gate_s, dt })?;
        Ok(Self { per_gate, acc: 0.0, filled: 0 })
    }

    pub fn samples_per_gate(&self) -> usize {
        self.per_gate
    }

    /// Feed one sample; returns the gate mean when a gate closes.
    #[inline]
    pub fn push(&mut self, v: f64) -> Option<f64> {
        self.acc += v;
        self.filled += 1;
        if self.filled == self.per_gate {
            let mean = self.acc / self.per_gate as f64;
            self.acc = 0.0;
            self.filled = 0;
            Some(mean)
        } else {
            None
        }
    }
}

pub fn peak_to_peak(fs: &FreqSeries) -> f64 {
    let (lo, hi) = fs
        .values_hz
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if fs.values_hz.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_in_constant_out() {
        let fs = counter(&[3.5; 1000], 0.01, 1.0, 1.0).unwrap();
        assert_eq!(fs.len(), 10);
        assert!(fs.values_hz.iter().all(|&v| (v - 3.5).abs() < 1e-12));
        assert_eq!(peak_to_peak(&fs), 0.0);
    }

    #[test]
    fn sine_period_per_gate_averages_to_zero() {
        let n = 100;
        let dense: Vec<f64> = (0..n * 7)
            .map(|k| (2.0 * std::f64::consts::PI * k as f64 / n as f64).sin())
            .collect();
        let fs = counter(&dense, 0.01, 1.0, 1.0).unwrap();
        assert_eq!(fs.len(), 7);
        assert!(fs.values_hz.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn length_is_floor() {
        let fs = counter(&[1.0; 1050], 0.01, 1.0, 1.0).unwrap();
        assert_eq!(fs.len(), 10);
    }

    #[test]
    fn rejects_non_multiple_gate() {
        assert!(matches!(
            counter(&[0.0; 10], 0.3, 1.0, 1.0),
            Err(AnalysisError::GateNotMultiple { .. })
        ));
        assert!(GateCounter::new(0.3, 1.0).is_err());
        assert_eq!(GateCounter::new(1.0 / 2600.0, 1.0).unwrap().samples_per_gate(), 2600);
    }

    #[test]
    fn white_noise_averaging_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dt = 0.01;
        let dense: Vec<f64> = (0..2_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fs = counter(&dense, dt, 1.0, 1.0).unwrap();
        let m = fs.mean();
        let var = fs.values_hz.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (fs.len() - 1) as f64;
        let expect = 1.0 * dt / 1.0;
        assert!((var / expect - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn streaming_matches_batch() {
        let dense: Vec<f64> = (0..1234).map(|k| (k as f64 * 0.37).cos() * 1e3).collect();
        let batch = counter(&dense, 0.1, 2.0, 1.0).unwrap();
        let mut g = GateCounter::new(0.1, 2.0).unwrap();
        let stream: Vec<f64> = dense.iter().filter_map(|&v| g.push(v)).collect();
        assert_eq!(stream.len(), batch.len());
        for (a, b) in stream.iter().zip(&batch.values_hz) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
