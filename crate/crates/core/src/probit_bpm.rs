//! Probit light-switching curves and Monte Carlo samples of them.
//!
//! A curve maps work-area illuminance to the probability that an occupant
//! switches the light on:
//!
//! ```text
//! p = a + c / (1 + exp(-(d * probit_m + b * E)))
//! ```
//!
//! where `E` is either the illuminance in lux or its base-10 logarithm.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// How illuminance enters the curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LuxScale {
    Raw,
    Log10,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbitModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// The constant multiplied by `d`; kept distinct from the GAN batch size.
    pub probit_m: f64,
    pub lux_scale: LuxScale,
}

impl ProbitModel {
    pub fn new(a: f64, b: f64, c: f64, d: f64, probit_m: f64, lux_scale: LuxScale) -> Result<Self> {
        let model = ProbitModel {
            a,
            b,
            c,
            d,
            probit_m,
            lux_scale,
        };
        model.validate()?;
        Ok(model)
    }

    /// Existing BPM of experiment 1 (log10 illuminance).
    pub fn experiment1_existing() -> Self {
        ProbitModel {
            a: -0.0175,
            b: -4.0835,
            c: 1.0361,
            d: -4.0835,
            probit_m: -1.8223,
            lux_scale: LuxScale::Log10,
        }
    }

    /// Performance target of experiment 1, log10 illuminance as tabulated.
    pub fn experiment1_target() -> Self {
        ProbitModel {
            a: 0.0,
            b: -0.003,
            c: 1.0,
            d: 1.0,
            probit_m: 2.035,
            lux_scale: LuxScale::Log10,
        }
    }

    pub fn experiment2_existing() -> Self {
        ProbitModel {
            a: 0.0,
            b: -0.005,
            c: 1.0,
            d: 1.0,
            probit_m: -0.170,
            lux_scale: LuxScale::Raw,
        }
    }

    pub fn experiment2_target() -> Self {
        ProbitModel {
            a: 0.0,
            b: -0.003,
            c: 1.0,
            d: 1.0,
            probit_m: 2.035,
            lux_scale: LuxScale::Raw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a, self.b, self.c, self.d, self.probit_m];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("probit constants must be finite".into()));
        }
        if self.c == 0.0 {
            return Err(Error::Config("probit amplitude c must be non-zero".into()));
        }
        Ok(())
    }

    fn illuminance_term(&self, work_lux: f64) -> Result<f64> {
        if !work_lux.is_finite() {
            return Err(Error::Domain(format!("illuminance {work_lux} is not finite")));
        }
        match self.lux_scale {
            LuxScale::Raw => Ok(work_lux),
            LuxScale::Log10 if work_lux > 0.0 => Ok(work_lux.log10()),
            LuxScale::Log10 => Err(Error::Domain(format!(
                "log10 illuminance needs a positive value, got {work_lux}"
            ))),
        }
    }

    /// The curve value before clamping; may leave [0, 1] slightly.
    pub fn raw_value(&self, work_lux: f64) -> Result<f64> {
        let e = self.illuminance_term(work_lux)?;
        let z = self.d * self.probit_m + self.b * e;
        Ok(self.a + self.c / (1.0 + (-z).exp()))
    }

    /// Switch-on probability, clamped to [0, 1].
    pub fn evaluate(&self, work_lux: f64) -> Result<f64> {
        Ok(self.raw_value(work_lux)?.clamp(0.0, 1.0))
    }
}

/// Truncated normal distribution of work-area illuminance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlluminanceDistribution {
    pub mean: f64,
    pub std_dev: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for IlluminanceDistribution {
    fn default() -> Self {
        IlluminanceDistribution {
            mean: 450.0,
            std_dev: 150.0,
            lower: 200.0,
            upper: 750.0,
        }
    }
}

/// Rejection sampling gives up after this many consecutive misses.
const MAX_REJECTIONS: usize = 1_000_000;

impl IlluminanceDistribution {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mean, self.std_dev, self.lower, self.upper];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("illuminance distribution must be finite".into()));
        }
        if self.lower >= self.upper {
            return Err(Error::Config(format!(
                "truncation window [{}, {}] is empty",
                self.lower, self.upper
            )));
        }
        if self.std_dev <= 0.0 {
            return Err(Error::Config("illuminance std_dev must be positive".into()));
        }
        if self.lower <= 0.0 {
            return Err(Error::Config("illuminance lower bound must be positive".into()));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, normal: &Normal<f64>, rng: &mut R) -> Result<f64> {
        for _ in 0..MAX_REJECTIONS {
            let x = normal.sample(rng);
            if x >= self.lower && x <= self.upper {
                return Ok(x);
            }
        }
        Err(Error::Config(format!(
            "truncation window [{}, {}] is unreachable from N({}, {})",
            self.lower, self.upper, self.mean, self.std_dev
        )))
    }
}

/// One Monte Carlo draw from a probit curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpmSample {
    pub work_lux: f64,
    pub p_switch_on: f64,
}

pub fn sample_lux(dist: &IlluminanceDistribution, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    dist.validate()?;
    let normal = Normal::new(dist.mean, dist.std_dev)
        .map_err(|e| Error::Config(format!("illuminance distribution: {e}")))?;
    let mut rng = rng_from_seed(seed);
    (0..count).map(|_| dist.draw(&normal, &mut rng)).collect()
}

pub fn sample_dataset(
    model: &ProbitModel,
    dist: &IlluminanceDistribution,
    count: usize,
    seed: u64,
) -> Result<Vec<BpmSample>> {
    model.validate()?;
    sample_lux(dist, count, seed)?
        .into_iter()
        .map(|work_lux| {
            Ok(BpmSample {
                work_lux,
                p_switch_on: model.evaluate(work_lux)?,
            })
        })
        .collect()
}

pub const BPM_CSV_HEADER: &str = "work_lux,p_switch_on";

pub fn write_bpm_csv<W: Write>(samples: &[BpmSample], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{BPM_CSV_HEADER}")?;
    for s in samples {
        writeln!(out, "{},{}", s.work_lux, s.p_switch_on)?;
    }
    Ok(())
}

pub fn read_bpm_csv(path: &Path) -> Result<Vec<BpmSample>> {
    let name = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["work_lux", "p_switch_on"] {
        return Err(Error::format(&name, 1, format!("expected header `{BPM_CSV_HEADER}`")));
    }
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let parse = |idx: usize| -> Result<f64> {
            record
                .get(idx)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::format(&name, row, format!("column {idx} is not a number")))
        };
        let sample = BpmSample {
            work_lux: parse(0)?,
            p_switch_on: parse(1)?,
        };
        if !(0.0..=1.0).contains(&sample.p_switch_on) {
            return Err(Error::format(&name, row, "p_switch_on outside [0, 1]"));
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::format(&name, 1, "empty dataset"));
    }
    Ok(samples)
}
