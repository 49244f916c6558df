use std::f64::consts::TAU;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{Error, Result};

/// One additive signal component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    /// `amplitude * sin(2π t / period_steps + phase + c * channel_phase)`
    Sine {
        amplitude: f64,
        period_steps: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        channel_phase: f64,
    },
    /// `slope * t`
    Trend { slope: f64 },
    /// Independent Gaussian noise with standard deviation `sigma`.
    Noise { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    pub components: Vec<Component>,
    pub channels: usize,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start_timestamp: i64,
    #[serde(default = "default_interval")]
    pub sampling_interval: i64,
}

// 2016-07-01 00:00:00, the first row of the ETT files.
fn default_start() -> i64 {
    1_467_331_200
}

fn default_interval() -> i64 {
    3600
}

impl SynthSpec {
    /// Hourly series with daily and weekly cycles plus light noise. Channels
    /// are phase-shifted copies of each other.
    pub fn seasonal(length: usize, channels: usize, seed: u64) -> Self {
        Self {
            length,
            components: vec![
                Component::Sine {
                    amplitude: 1.0,
                    period_steps: 24.0,
                    phase: 0.0,
                    channel_phase: 0.9,
                },
                Component::Sine {
                    amplitude: 0.5,
                    period_steps: 168.0,
                    phase: 0.0,
                    channel_phase: 0.4,
                },
                Component::Noise { sigma: 0.1 },
            ],
            channels,
            seed,
            start_timestamp: default_start(),
            sampling_interval: default_interval(),
        }
    }

    /// Noise-free sine per channel.
    pub fn sine(length: usize, channels: usize, period_steps: f64) -> Self {
        Self {
            length,
            components: vec![Component::Sine {
                amplitude: 1.0,
                period_steps,
                phase: 0.0,
                channel_phase: 1.0,
            }],
            channels,
            seed: 0,
            start_timestamp: default_start(),
            sampling_interval: default_interval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 1 {
            return Err(Error::Config("synthetic length must be at least 1".into()));
        }
        if self.channels < 1 {
            return Err(Error::Config("synthetic series needs at least one channel".into()));
        }
        if self.sampling_interval <= 0 {
            return Err(Error::Config("sampling interval must be positive".into()));
        }
        for c in &self.components {
            match *c {
                Component::Sine { period_steps, .. } if period_steps.is_nan() || period_steps < 2.0 => {
                    return Err(Error::Config(format!(
                        "sine period must be >= 2 steps, got {period_steps}"
                    )))
                }
                Component::Noise { sigma } if sigma.is_nan() || sigma < 0.0 => {
                    return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// Each noise component draws from its own stream so that adding or removing
// a component leaves the others untouched.
fn component_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Elementwise sum of the spec's components, bitwise reproducible per seed.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<RawSeries<f64>> {
    spec.validate()?;
    let shape = (spec.length, spec.channels);
    let mut values = Array2::<f64>::zeros(shape);
    for (index, component) in spec.components.iter().enumerate() {
        match *component {
            Component::Sine {
                amplitude,
                period_steps,
                phase,
                channel_phase,
            } => {
                values.zip_mut_with(
                    &Array2::from_shape_fn(shape, |(t, c)| {
                        amplitude * (TAU * t as f64 / period_steps + phase + c as f64 * channel_phase).sin()
                    }),
                    |v, s| *v += s,
                );
            }
            Component::Trend { slope } => {
                for ((t, _), v) in values.indexed_iter_mut() {
                    *v += slope * t as f64;
                }
            }
            Component::Noise { sigma } => {
                let mut rng = component_rng(spec.seed, index);
                for v in values.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * z;
                }
            }
        }
    }
    let timestamps = (0..spec.length as i64)
        .map(|t| spec.start_timestamp + t * spec.sampling_interval)
        .collect();
    let names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    RawSeries::new(timestamps, values, names, spec.sampling_interval)
}
