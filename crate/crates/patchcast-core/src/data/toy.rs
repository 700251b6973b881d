//! Synthetic data generators for the analysis experiments.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::RngStream;

use super::TimeSeriesDataset;

/// Generator parameters for the distribution-shift study.
#[derive(Debug, Clone)]
pub struct ShiftToyConfig {
    pub train_slope: f64,
    pub train_amp: f64,
    pub period: f64,
    pub len: usize,
    pub noise_std: f64,
}

impl Default for ShiftToyConfig {
    fn default() -> Self {
        ShiftToyConfig {
            train_slope: 0.01,
            train_amp: 1.0,
            period: 24.0,
            len: 480,
            noise_std: 0.1,
        }
    }
}

/// Test grid of (slope, amplitude) pairs; the default is 14 x 7 = 98 points.
#[derive(Debug, Clone)]
pub struct ShiftGrid {
    pub slopes: Vec<f64>,
    pub amps: Vec<f64>,
}

impl ShiftGrid {
    pub fn default_for(cfg: &ShiftToyConfig) -> Self {
        // 14 slopes spanning sign flips, 7 amplitudes from shrunk to grown.
        let slopes = (0..14)
            .map(|i| cfg.train_slope * (-2.0 + 4.0 * i as f64 / 13.0))
            .collect();
        let amps = (0..7)
            .map(|j| cfg.train_amp * (0.25 + 2.75 * j as f64 / 6.0))
            .collect();
        ShiftGrid { slopes, amps }
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.slopes.len() * self.amps.len());
        for &s in &self.slopes {
            for &a in &self.amps {
                out.push((s, a));
            }
        }
        out
    }
}

fn sine_trend_series(
    slope: f64,
    amp: f64,
    period: f64,
    len: usize,
    noise_std: f64,
    rng: &mut RngStream,
) -> Matrix {
    let mut data = Vec::with_capacity(len);
    for t in 0..len {
        let tt = t as f64;
        let clean = amp * (2.0 * std::f64::consts::PI * tt / period).sin() + slope * tt;
        let noise = if noise_std > 0.0 { noise_std * rng.normal() } else { 0.0 };
        data.push(clean + noise);
    }
    Matrix::from_vec(len, 1, data).unwrap()
}

/// One train dataset plus one test dataset per grid point.
///
/// Each series is y(t) = amp * sin(2*pi*t/period) + slope * t + noise.
pub fn gen_shift_toy(
    cfg: &ShiftToyConfig,
    grid: &ShiftGrid,
    rng: &mut RngStream,
) -> Result<(TimeSeriesDataset, Vec<(f64, f64, TimeSeriesDataset)>)> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::InvalidArg("shift grid is empty".into()));
    }
    let mut train_rng = rng.split(0);
    let train = TimeSeriesDataset {
        name: "shift_train".into(),
        values: sine_trend_series(
            cfg.train_slope,
            cfg.train_amp,
            cfg.period,
            cfg.len,
            cfg.noise_std,
            &mut train_rng,
        ),
        timestamps: None,
        split: None,
    };
    let mut tests = Vec::with_capacity(points.len());
    for (k, (s, a)) in points.into_iter().enumerate() {
        let mut r = rng.split(1 + k as u64);
        let ds = TimeSeriesDataset {
            name: format!("shift_test_{k}"),
            values: sine_trend_series(s, a, cfg.period, cfg.len, cfg.noise_std, &mut r),
            timestamps: None,
            split: None,
        };
        tests.push((s, a, ds));
    }
    Ok((train, tests))
}

/// A set of labeled fixed-length series for classification.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    /// One T x C matrix per series.
    pub series: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

/// Per-class generator table: distinct (slope, period, amplitude) per class.
fn class_params(class: usize) -> (f64, f64, f64) {
    let k = class as f64;
    let slope = (k - 4.5) * 0.004;
    let period = 8.0 + 4.0 * k;
    let amp = 0.5 + 0.2 * k;
    (slope, period, amp)
}

/// Labeled toy series: each class has its own trend and seasonality pattern.
///
/// With `noise_std = 0` all members of a class are identical.
pub fn gen_class_toy(
    num_classes: usize,
    per_class: usize,
    len: usize,
    noise_std: f64,
    rng: &mut RngStream,
) -> Result<LabeledSet> {
    if per_class == 0 {
        return Err(Error::InvalidArg("per_class must be at least 1".into()));
    }
    let mut series = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let (slope, period, amp) = class_params(class);
        for j in 0..per_class {
            let mut r = rng.split((class * per_class + j) as u64);
            // jitter the generator parameters a little, then add sample noise
            let (s, p, a) = if noise_std > 0.0 {
                (
                    slope * (1.0 + 0.1 * r.normal()),
                    period * (1.0 + 0.02 * r.normal()),
                    amp * (1.0 + 0.1 * r.normal()),
                )
            } else {
                (slope, period, amp)
            };
            series.push(sine_trend_series(s, a, p, len, noise_std, &mut r));
            labels.push(class);
        }
    }
    Ok(LabeledSet {
        series,
        labels,
        num_classes,
    })
}
