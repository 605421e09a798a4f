use serde::{Deserialize, Serialize};

use super::{integer_ratio, AnalysisError, FreqSeries};

/// Averaging times always reported when the record is long enough.
pub const NAMED_TAUS_S: [f64; 5] = [1.0, 13.0, 100.0, 1000.0, 3600.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanCurve {
    pub taus_s: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub n_pairs: Vec<usize>,
}

impl AllanCurve {
    pub fn at(&self, tau_s: f64) -> Option<f64> {
        self.taus_s
            .iter()
            .position(|&t| (t - tau_s).abs() <= 1e-9 * tau_s)
            .map(|i| self.sigma_y[i])
    }

    pub fn max_sigma(&self) -> Option<f64> {
        self.sigma_y.iter().copied().reduce(f64::max)
    }
}

/// Two-sample deviation of the fractional frequency at each requested τ.
///
/// Values are centered on their mean before scaling by `nu0_hz`, so a
/// common offset (a 20 MHz beat, say) does not eat into the precision of
/// the differences.
pub fn allan_deviation(fs: &FreqSeries, taus_s: &[f64], overlapping: bool) -> Result<AllanCurve, AnalysisError> {
    if fs.len() < 2 {
        return Err(AnalysisError::TooShort);
    }
    if !(fs.nu0_hz.is_finite() && fs.nu0_hz > 0.0) {
        return Err(AnalysisError::Invalid(format!("nu0_hz must be > 0, got {}", fs.nu0_hz)));
    }
    let mean = fs.mean();
    let y: Vec<f64> = fs.values_hz.iter().map(|v| (v - mean) / fs.nu0_hz).collect();
    let n = y.len();

    let mut curve = AllanCurve { taus_s: Vec::new(), sigma_y: Vec::new(), n_pairs: Vec::new() };
    let mut prefix = Vec::new();
    if overlapping {
        prefix.reserve(n + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for v in &y {
            acc += v;
            prefix.push(acc);
        }
    }
    for &tau in taus_s {
        let m = integer_ratio(tau, fs.gate_s).ok_or(AnalysisError::TauNotMultiple { tau_s: tau, gate_s: fs.gate_s })?;
        let (sum, pairs) = if overlapping {
            if n < 2 * m {
                return Err(AnalysisError::Insufficient { tau_s: tau, n });
            }
            let pairs = n - 2 * m + 1;
            let mut sum = 0.0;
            for j in 0..pairs {
                let a = prefix[j + m] - prefix[j];
                let b = prefix[j + 2 * m] - prefix[j + m];
                let d = (b - a) / m as f64;
                sum += d * d;
            }
            (sum, pairs)
        } else {
            let blocks: Vec<f64> = y.chunks_exact(m).map(|c| c.iter().sum::<f64>() / m as f64).collect();
            if blocks.len() < 2 {
                return Err(AnalysisError::Insufficient { tau_s: tau, n });
            }
            let sum = blocks.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>();
            (sum, blocks.len() - 1)
        };
        curve.taus_s.push(m as f64 * fs.gate_s);
        curve.sigma_y.push((sum / (2.0 * pairs as f64)).sqrt());
        curve.n_pairs.push(pairs);
    }
    Ok(curve)
}

/// Octave grid `gate·2^k` up to a quarter of the record.
pub fn octave_taus(n: usize, gate_s: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut m = 1usize;
    while m * 4 <= n {
        out.push(m as f64 * gate_s);
        m *= 2;
    }
    out
}

/// Octave grid merged with those named τ that still leave two
/// non-overlapping averages.
pub fn analysis_taus(n: usize, gate_s: f64, named: &[f64]) -> Vec<f64> {
    let mut ms: Vec<usize> = octave_taus(n, gate_s)
        .iter()
        .filter_map(|&t| integer_ratio(t, gate_s))
        .collect();
    for &t in named {
        if let Some(m) = integer_ratio(t, gate_s) {
            if n / m >= 2 {
                ms.push(m);
            }
        }
    }
    ms.sort_unstable();
    ms.dedup();
    ms.into_iter().map(|m| m as f64 * gate_s).collect()
}
