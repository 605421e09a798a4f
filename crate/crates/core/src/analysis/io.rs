//! CSV forms of counter records, Allan curves and spectra.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! read back is bit-identical to the one written.

use std::fmt::Write as _;

use super::{AllanCurve, FreqSeries, Spectrum};

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("csv line {line}: {reason}")]
pub struct CsvError {
    pub line: usize,
    pub reason: String,
}

fn err(line: usize, reason: impl Into<String>) -> CsvError {
    CsvError { line, reason: reason.into() }
}

pub fn freq_series_csv(fs: &FreqSeries) -> String {
    let mut s = String::with_capacity(fs.len() * 24 + 64);
    let _ = writeln!(s, "# gate_s={} nu0_hz={}", fs.gate_s, fs.nu0_hz);
    s.push_str("index,freq_hz\n");
    for (i, v) in fs.values_hz.iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s
}

fn header_value(comment: &str, key: &str, line: usize) -> Result<f64, CsvError> {
    comment
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| err(line, format!("missing `{key}` in header comment")))?
        .parse()
        .map_err(|_| err(line, format!("bad `{key}` value")))
}

/// Data rows of a CSV with the expected column header; comment lines are
/// returned separately.
fn rows<'a>(text: &'a str, header: &str) -> Result<(Vec<(usize, &'a str)>, Vec<(usize, Vec<&'a str>)>), CsvError> {
    let mut comments = Vec::new();
    let mut data = Vec::new();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            comments.push((i + 1, c.trim()));
        } else if !seen_header {
            if line != header {
                return Err(err(i + 1, format!("expected header `{header}`")));
            }
            seen_header = true;
        } else {
            data.push((i + 1, line.split(',').collect()));
        }
    }
    if !seen_header {
        return Err(err(0, format!("missing header `{header}`")));
    }
    Ok((comments, data))
}

fn parse_f64(field: &str, line: usize) -> Result<f64, CsvError> {
    field.trim().parse().map_err(|_| err(line, format!("bad number `{field}`")))
}

pub fn parse_freq_series(text: &str) -> Result<FreqSeries, CsvError> {
    let (comments, data) = rows(text, "index,freq_hz")?;
    let (cl, c) = comments.first().copied().ok_or_else(|| err(1, "missing `# gate_s=… nu0_hz=…` comment"))?;
    let gate_s = header_value(c, "gate_s", cl)?;
    let nu0_hz = header_value(c, "nu0_hz", cl)?;
    let mut values_hz = Vec::with_capacity(data.len());
    for (line, f) in data {
        if f.len() != 2 {
            return Err(err(line, "expected 2 columns"));
        }
        values_hz.push(parse_f64(f[1], line)?);
    }
    Ok(FreqSeries { values_hz, gate_s, nu0_hz })
}

pub fn allan_csv(c: &AllanCurve) -> String {
    let mut s = String::from("tau_s,sigma_y,n_pairs\n");
    for i in 0..c.taus_s.len() {
        let _ = writeln!(s, "{},{},{}", c.taus_s[i], c.sigma_y[i], c.n_pairs[i]);
    }
    s
}

pub fn parse_allan(text: &str) -> Result<AllanCurve, CsvError> {
    let (_, data) = rows(text, "tau_s,sigma_y,n_pairs")?;
    let mut c = AllanCurve { taus_s: Vec::new(), sigma_y: Vec::new(), n_pairs: Vec::new() };
    for (line, f) in data {
        if f.len() != 3 {
            return Err(err(line, "expected 3 columns"));
        }
        c.taus_s.push(parse_f64(f[0], line)?);
        c.sigma_y.push(parse_f64(f[1], line)?);
        c.n_pairs.push(f[2].trim().parse().map_err(|_| err(line, "bad pair count"))?);
    }
    Ok(c)
}

pub fn spectrum_csv(sp: &Spectrum) -> String {
    let mut s = String::with_capacity(sp.freq_hz.len() * 40);
    let _ = writeln!(s, "# rbw_hz={}", sp.rbw_hz);
    s.push_str("freq_hz,power_dbc\n");
    for (f, p) in sp.freq_hz.iter().zip(&sp.power_dbc) {
        let _ = writeln!(s, "{f},{p}");
    }
    s
}

pub fn parse_spectrum(text: &str) -> Result<Spectrum, CsvError> {
    let (comments, data) = rows(text, "freq_hz,power_dbc")?;
    let rbw_hz = match comments.first() {
        Some(&(l, c)) => header_value(c, "rbw_hz", l)?,
        None => return Err(err(1, "missing `# rbw_hz=…` comment")),
    };
    let mut sp = Spectrum { freq_hz: Vec::new(), power_dbc: Vec::new(), rbw_hz };
    for (line, f) in data {
        if f.len() != 2 {
            return Err(err(line, "expected 2 columns"));
        }
        sp.freq_hz.push(parse_f64(f[0], line)?);
        sp.power_dbc.push(parse_f64(f[1], line)?);
    }
    Ok(sp)
}

/// Two-column table with an arbitrary header (scan traces and the like).
pub fn table_csv(header: &str, a: &[f64], b: &[f64]) -> String {
    let mut s = String::with_capacity(a.len() * 40);
    s.push_str(header);
    s.push('\n');
    for (x, y) in a.iter().zip(b) {
        let _ = writeln!(s, "{x},{y}");
    }
    s
}

pub fn parse_table(text: &str, header: &str) -> Result<(Vec<f64>, Vec<f64>), CsvError> {
    let (_, data) = rows(text, header)?;
    let mut a = Vec::with_capacity(data.len());
    let mut b = Vec::with_capacity(data.len());
    for (line, f) in data {
        if f.len() != 2 {
            return Err(err(line, "expected 2 columns"));
        }
        a.push(parse_f64(f[0], line)?);
        b.push(parse_f64(f[1], line)?);
    }
    Ok((a, b))
}
