//! Training inputs for the GAN.
//!
//! BPM and target samples only carry illuminance, so their occupancy and
//! intermediate-leaving factors are imputed from the synthetic IVE dataset
//! before they are stacked with the IVE rows.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ive_hmm::{IntermediateLeaving, Occupancy, SyntheticIveRecord};
use crate::probit_bpm::BpmSample;
use crate::seed::rng_from_seed;

/// Width of an encoded feature vector.
pub const FEATURE_DIM: usize = 5;
/// Illuminance range used by [`LuxNorm::Scale01`].
pub const LUX_RANGE: (f64, f64) = (200.0, 750.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub occupancy: Occupancy,
    pub intermediate_leaving: IntermediateLeaving,
    pub work_lux: f64,
    pub p_switch_on: Option<f64>,
}

impl FeatureRow {
    pub fn query(occupancy: Occupancy, intermediate_leaving: IntermediateLeaving, work_lux: f64) -> Self {
        FeatureRow {
            occupancy,
            intermediate_leaving,
            work_lux,
            p_switch_on: None,
        }
    }
}

impl From<&SyntheticIveRecord> for FeatureRow {
    fn from(r: &SyntheticIveRecord) -> Self {
        FeatureRow {
            occupancy: r.occupancy,
            intermediate_leaving: r.intermediate_leaving,
            work_lux: r.work_lux,
            p_switch_on: Some(if r.light_on { 1.0 } else { 0.0 }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    ExistingBpm,
    SyntheticIve,
    Target,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::ExistingBpm => "existing_bpm",
            Provenance::SyntheticIve => "synthetic_ive",
            Provenance::Target => "target",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "existing_bpm" => Ok(Provenance::ExistingBpm),
            "synthetic_ive" => Ok(Provenance::SyntheticIve),
            "target" => Ok(Provenance::Target),
            other => Err(format!("unknown provenance `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssembledDataset {
    pub rows: Vec<FeatureRow>,
    pub provenance: Vec<Provenance>,
}

impl AssembledDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows_from(&self, which: Provenance) -> Vec<FeatureRow> {
        self.rows
            .iter()
            .zip(&self.provenance)
            .filter(|(_, p)| **p == which)
            .map(|(r, _)| *r)
            .collect()
    }

    pub fn count(&self, which: Provenance) -> usize {
        self.provenance.iter().filter(|p| **p == which).count()
    }
}

/// How the occupancy / leaving pair is drawn for an imputed row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMode {
    /// Both factors from one random IVE row, keeping their dependence.
    #[default]
    Joint,
    /// Each factor from its own random IVE row.
    IndependentMarginals,
}

pub fn impute_contextual_factors(
    bpm_rows: &[BpmSample],
    ive_rows: &[SyntheticIveRecord],
    mode: ImputeMode,
    seed: u64,
) -> Result<Vec<FeatureRow>> {
    if ive_rows.is_empty() {
        return Err(Error::Config("cannot impute factors from an empty IVE dataset".into()));
    }
    let mut rng = rng_from_seed(seed);
    let rows = bpm_rows
        .iter()
        .map(|s| {
            let donor = &ive_rows[rng.gen_range(0..ive_rows.len())];
            let leaving = match mode {
                ImputeMode::Joint => donor.intermediate_leaving,
                ImputeMode::IndependentMarginals => {
                    ive_rows[rng.gen_range(0..ive_rows.len())].intermediate_leaving
                }
            };
            FeatureRow {
                occupancy: donor.occupancy,
                intermediate_leaving: leaving,
                work_lux: s.work_lux,
                p_switch_on: Some(s.p_switch_on),
            }
        })
        .collect();
    Ok(rows)
}

/// Stacks BPM and IVE rows, then shuffles them with `seed`.
pub fn concat(bpm_rows: &[FeatureRow], ive_rows: &[FeatureRow], seed: u64) -> Result<AssembledDataset> {
    if bpm_rows.is_empty() || ive_rows.is_empty() {
        return Err(Error::Config("concat needs non-empty BPM and IVE rows".into()));
    }
    let mut tagged: Vec<(FeatureRow, Provenance)> = bpm_rows
        .iter()
        .map(|r| (*r, Provenance::ExistingBpm))
        .chain(ive_rows.iter().map(|r| (*r, Provenance::SyntheticIve)))
        .collect();
    tagged.shuffle(&mut rng_from_seed(seed));
    let (rows, provenance) = tagged.into_iter().unzip();
    Ok(AssembledDataset { rows, provenance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LuxNorm {
    None,
    #[default]
    Scale01,
}

impl LuxNorm {
    pub fn apply(self, lux: f64) -> f64 {
        match self {
            LuxNorm::None => lux,
            LuxNorm::Scale01 => (lux - LUX_RANGE.0) / (LUX_RANGE.1 - LUX_RANGE.0),
        }
    }
}

/// `[occupancy, leave_none, leave_short, leave_long, lux]`.
pub fn to_feature_vector(row: &FeatureRow, lux_norm: LuxNorm) -> [f64; FEATURE_DIM] {
    let mut v = [0.0; FEATURE_DIM];
    v[0] = match row.occupancy {
        Occupancy::NonOccupancy => 0.0,
        Occupancy::Occupancy => 1.0,
    };
    v[1 + row.intermediate_leaving.index()] = 1.0;
    v[4] = lux_norm.apply(row.work_lux);
    v
}

pub const ASSEMBLED_CSV_HEADER: &str = "provenance,occupancy,intermediate_leaving,work_lux,p_switch_on";

pub fn write_assembled_csv<W: Write>(data: &AssembledDataset, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{ASSEMBLED_CSV_HEADER}")?;
    for (r, p) in data.rows.iter().zip(&data.provenance) {
        let prob = r.p_switch_on.map(|p| p.to_string()).unwrap_or_default();
        writeln!(out, "{p},{},{},{},{prob}", r.occupancy, r.intermediate_leaving, r.work_lux)?;
    }
    Ok(())
}
