//! Synthetic series with planted motifs, each followed by a burst of
//! high-variance noise one forecast horizon long.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseSignal {
    Sine {
        period: f64,
        amplitude: f64,
    },
    /// Zero-mean AR(1) process `b_t = phi * b_{t-1} + e_t`.
    Ar1 {
        phi: f64,
        innovation_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    pub base: BaseSignal,
    pub motif: Vec<f64>,
    /// Probability that a placement slot receives a motif.
    pub motif_rate: f64,
    pub burst_std: f64,
    pub noise_std: f64,
    /// Burst length; normally the forecast horizon.
    pub burst_len: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// A ramp down followed by a sharp spike, scaled to `amplitude`.
    pub fn default_motif(len: usize, amplitude: f64) -> Vec<f64> {
        let fall = (len * 3 / 4).max(1);
        (0..len)
            .map(|i| {
                if i < fall {
                    amplitude * (0.5 - 1.5 * i as f64 / fall as f64)
                } else {
                    let rise = (i - fall + 1) as f64 / (len - fall) as f64;
                    amplitude * (-1.0 + 3.0 * rise)
                }
            })
            .collect()
    }

    /// Slot width: a motif, its burst, and an equally long quiet gap.
    pub fn slot_len(&self) -> usize {
        2 * (self.motif.len() + self.burst_len)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::SpecInvalid(m));
        let q = self.motif.len();
        if q == 0 || q * 10 >= self.length {
            return fail(format!(
                "motif length {q} must be positive and below length/10"
            ));
        }
        if self.motif.iter().any(|v| !v.is_finite()) {
            return fail("motif contains non-finite values".into());
        }
        if !(0.0..1.0).contains(&self.motif_rate) {
            return fail(format!("motif_rate {} outside [0, 1)", self.motif_rate));
        }
        if !(self.noise_std >= 0.0 && self.burst_std > self.noise_std) {
            return fail(format!(
                "need 0 <= noise_std ({}) < burst_std ({})",
                self.noise_std, self.burst_std
            ));
        }
        if self.burst_len == 0 {
            return fail("burst_len must be positive".into());
        }
        match self.base {
            BaseSignal::Sine { period, amplitude } => {
                if !(period > 0.0 && amplitude.is_finite()) {
                    return fail("sine needs a positive period".into());
                }
            }
            BaseSignal::Ar1 {
                phi,
                innovation_std,
            } => {
                if !(phi.abs() < 1.0 && innovation_std >= 0.0) {
                    return fail("ar1 needs |phi| < 1 and innovation_std >= 0".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSeries {
    pub series: TimeSeries,
    /// Signal before observation noise.
    pub clean: Vec<f64>,
    /// Motif start positions, ascending.
    pub positions: Vec<usize>,
    pub motif_len: usize,
    pub burst_len: usize,
}

impl SynthSeries {
    /// Half-open `[start, end)` ranges of the bursts.
    pub fn bursts(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positions.iter().map(|&p| {
            let start = p + self.motif_len;
            (start, start + self.burst_len)
        })
    }

    /// Whether `[start, end)` intersects any burst.
    pub fn overlaps_burst(&self, start: usize, end: usize) -> bool {
        self.bursts().any(|(b0, b1)| start < b1 && b0 < end)
    }

    /// Writes a single-column `value` CSV.
    pub fn write_dataset(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        writeln!(out, "value")?;
        for v in self.series.values() {
            writeln!(out, "{v}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `motif_start,burst_start,burst_end`.
    pub fn write_positions(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        writeln!(out, "motif_start,burst_start,burst_end")?;
        for (&p, (b0, b1)) in self.positions.iter().zip(self.bursts()) {
            writeln!(out, "{p},{b0},{b1}")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated as finite and non-negative")
}

pub fn generate_planted(spec: &SynthSpec) -> Result<SynthSeries, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.length;
    let q = spec.motif.len();

    let mut clean: Vec<f64> = match spec.base {
        BaseSignal::Sine { period, amplitude } => (0..n)
            .map(|i| amplitude * (std::f64::consts::TAU * i as f64 / period).sin())
            .collect(),
        BaseSignal::Ar1 {
            phi,
            innovation_std,
        } => {
            let innov = normal(innovation_std);
            let mut state = 0.0;
            (0..n)
                .map(|_| {
                    state = phi * state + innov.sample(&mut rng);
                    state
                })
                .collect()
        }
    };

    let slot = spec.slot_len();
    let mut positions = Vec::new();
    let mut slot_start = 0;
    while slot_start + slot <= n {
        if rng.random::<f64>() < spec.motif_rate {
            let jitter = rng.random_range(0..=slot - q - spec.burst_len);
            positions.push(slot_start + jitter);
        }
        slot_start += slot;
    }

    let mut noise_std = vec![spec.noise_std; n];
    for &p in &positions {
        clean[p..p + q].copy_from_slice(&spec.motif);
        noise_std[p + q..p + q + spec.burst_len].fill(spec.burst_std);
    }

    let unit = normal(1.0);
    let values: Vec<f64> = clean
        .iter()
        .zip(&noise_std)
        .map(|(c, s)| c + s * unit.sample(&mut rng))
        .collect();

    let series =
        TimeSeries::new("synthetic", values).map_err(|e| SynthError::SpecInvalid(e.to_string()))?;
    Ok(SynthSeries {
        series,
        clean,
        positions,
        motif_len: q,
        burst_len: spec.burst_len,
    })
}
