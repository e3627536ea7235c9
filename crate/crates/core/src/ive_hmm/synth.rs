use std::io::Write;
use std::path::Path;

use ndarray::ArrayView1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    Hmm, IlluminanceLevel, IntermediateLeaving, ObservationCode, Occupancy, N_OBSERVATIONS,
    N_SWITCH_STATES, STATE_ON,
};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// One record of the synthetic IVE dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIveRecord {
    pub occupancy: Occupancy,
    pub intermediate_leaving: IntermediateLeaving,
    pub outdoor_illum: IlluminanceLevel,
    pub work_illum: IlluminanceLevel,
    pub light_on: bool,
    pub work_lux: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledSequence {
    pub states: Vec<usize>,
    pub observations: Vec<usize>,
}

fn sample_categorical<R: Rng + ?Sized>(probs: ArrayView1<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` a hair below one.
    last_positive
}

/// Ancestral sampling of `n_sequences` independent sequences.
pub fn sample_sequences<R: Rng + ?Sized>(
    hmm: &Hmm,
    n_sequences: usize,
    seq_len: usize,
    rng: &mut R,
) -> Vec<SampledSequence> {
    (0..n_sequences)
        .map(|_| {
            let mut states = Vec::with_capacity(seq_len);
            let mut observations = Vec::with_capacity(seq_len);
            for t in 0..seq_len {
                let state = if t == 0 {
                    sample_categorical(hmm.initial.view(), rng)
                } else {
                    sample_categorical(hmm.transition.row(states[t - 1]), rng)
                };
                states.push(state);
                observations.push(sample_categorical(hmm.emission.row(state), rng));
            }
            SampledSequence {
                states,
                observations,
            }
        })
        .collect()
}

/// Draws `n_records` synthetic IVE records from a fitted switch-state HMM.
///
/// Sequences of `seq_len` steps are sampled independently and flattened; the
/// last sequence is truncated so exactly `n_records` come back.
pub fn synthesize(hmm: &Hmm, n_records: usize, seq_len: usize, seed: u64) -> Result<Vec<SyntheticIveRecord>> {
    if n_records == 0 || seq_len == 0 {
        return Err(Error::Config("synthesis needs n_records >= 1 and seq_len >= 1".into()));
    }
    hmm.validate()?;
    if hmm.n_hidden() != N_SWITCH_STATES || hmm.n_obs() != N_OBSERVATIONS {
        return Err(Error::Config(format!(
            "synthesis needs a {N_SWITCH_STATES}-state, {N_OBSERVATIONS}-symbol HMM, got {}x{}",
            hmm.n_hidden(),
            hmm.n_obs()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let n_sequences = n_records.div_ceil(seq_len);
    let records = sample_sequences(hmm, n_sequences, seq_len, &mut rng)
        .into_iter()
        .flat_map(|seq| {
            seq.states
                .into_iter()
                .zip(seq.observations)
                .collect::<Vec<_>>()
        })
        .take(n_records)
        .map(|(state, code)| {
            let f = ObservationCode::new(code)
                .expect("HMM emits only valid codes")
                .decode();
            SyntheticIveRecord {
                occupancy: f.occupancy,
                intermediate_leaving: f.intermediate_leaving,
                outdoor_illum: f.outdoor_illum,
                work_illum: f.work_illum,
                light_on: state == STATE_ON,
                work_lux: f.work_illum.lux(),
            }
        })
        .collect();
    Ok(records)
}

pub const SYNTHETIC_CSV_HEADER: &str =
    "occupancy,intermediate_leaving,outdoor_illum,work_illum,light_on,work_lux";

pub fn write_synthetic_csv<W: Write>(records: &[SyntheticIveRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SYNTHETIC_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.occupancy,
            r.intermediate_leaving,
            r.outdoor_illum,
            r.work_illum,
            u8::from(r.light_on),
            r.work_lux
        )?;
    }
    Ok(())
}

pub fn read_synthetic_csv(path: &Path) -> Result<Vec<SyntheticIveRecord>> {
    let name = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != SYNTHETIC_CSV_HEADER {
        return Err(Error::format(&name, 1, format!("expected header `{SYNTHETIC_CSV_HEADER}`")));
    }
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let field = |idx: usize| rec.get(idx).unwrap_or("").trim();
        let err = |m: String| Error::format(&name, row, m);
        let work_illum: IlluminanceLevel = field(3).parse().map_err(err)?;
        let light_on = match field(4) {
            "0" => false,
            "1" => true,
            other => return Err(Error::format(&name, row, format!("light_on `{other}` is not 0/1"))),
        };
        records.push(SyntheticIveRecord {
            occupancy: field(0).parse().map_err(err)?,
            intermediate_leaving: field(1).parse().map_err(err)?,
            outdoor_illum: field(2).parse().map_err(err)?,
            work_illum,
            light_on,
            work_lux: field(5)
                .parse()
                .map_err(|_| Error::format(&name, row, "work_lux is not a number"))?,
        });
    }
    if records.is_empty() {
        return Err(Error::format(&name, 1, "empty dataset"));
    }
    Ok(records)
}
