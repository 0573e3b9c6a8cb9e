//! Regulation-signal ingestion and synthesis.
//!
//! Real dispatch data is not redistributable, so scenarios can either load a
//! CSV with the same shape (2 s cadence, normalized to [-1, 1]) or generate
//! a reproducible surrogate: a mean-reverting random walk, recentred and
//! rescaled to peak magnitude one.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;

/// Signal cadence in seconds (fixed by the dispatch product).
pub const CADENCE_S: f64 = 2.0;

/// Normalized regulation series sampled every [`CADENCE_S`] seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub values: Vec<f64>,
}

impl Signal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sample at step `k`, holding the final value beyond the end.
    pub fn at(&self, k: usize) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values[k.min(self.values.len() - 1)]
        }
    }
}

/// Generate a reproducible synthetic regulation series.
///
/// Mean-reverting walk (5-minute reversion time) recentred to zero mean,
/// rescaled so `max |s| = 1`, and clipped. The same seed always yields the
/// same series.
pub fn gen_signal(seed: u64, duration_s: f64) -> Signal {
    let n = (duration_s / CADENCE_S).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = 1.0 / 300.0;
    let rho = 1.0 - CADENCE_S * theta;
    let sigma = 0.052;
    let mut values = Vec::with_capacity(n);
    let mut s = 0.0;
    for _ in 0..n {
        // Box-Muller on explicit uniforms keeps the stream stable across
        // rand versions.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        s = rho * s + sigma * g;
        values.push(s);
    }
    if n == 0 {
        return Signal { values };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    for v in values.iter_mut() {
        *v -= mean;
    }
    let peak = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        for v in values.iter_mut() {
            *v = (*v / peak).clamp(-1.0, 1.0);
        }
    }
    Signal { values }
}

/// Load a signal CSV with header `t_s,s`: strictly increasing time at the
/// fixed cadence, values within [-1, 1].
pub fn load_signal(path: impl AsRef<Path>) -> Result<Signal, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_signal(&text).map_err(|reason| HarnessError::Signal(format!(
        "{}: {reason}",
        path.display()
    )))
}

fn parse_signal(text: &str) -> Result<Signal, String> {
    let mut values = Vec::new();
    let mut expected_t = 0.0;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or("empty file")?;
    if header.trim() != "t_s,s" {
        return Err(format!("expected header `t_s,s`, found `{}`", header.trim()));
    }
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let t: f64 = parts
            .next()
            .ok_or_else(|| format!("line {}: missing time", lineno + 1))?
            .trim()
            .parse()
            .map_err(|e| format!("line {}: bad time ({e})", lineno + 1))?;
        let s: f64 = parts
            .next()
            .ok_or_else(|| format!("line {}: missing value", lineno + 1))?
            .trim()
            .parse()
            .map_err(|e| format!("line {}: bad value ({e})", lineno + 1))?;
        if parts.next().is_some() {
            return Err(format!("line {}: too many columns", lineno + 1));
        }
        if (t - expected_t).abs() > 1e-9 {
            return Err(format!(
                "line {}: cadence must be {CADENCE_S} s (expected t = {expected_t}, found {t})",
                lineno + 1
            ));
        }
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&s) {
            return Err(format!("line {}: value {s} outside [-1, 1]", lineno + 1));
        }
        values.push(s.clamp(-1.0, 1.0));
        expected_t += CADENCE_S;
    }
    if values.is_empty() {
        return Err("no samples".into());
    }
    Ok(Signal { values })
}

/// Write a signal CSV in the `load_signal` format.
pub fn write_signal(signal: &Signal, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let mut out = String::from("t_s,s\n");
    for (k, v) in signal.values.iter().enumerate() {
        out.push_str(&format!("{},{v}\n", k as f64 * CADENCE_S));
    }
    std::fs::write(path, out).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
