//! IVE event records, their ordinal observation codes, and HMM-based
//! augmentation of the small IVE corpus.
//!
//! Every event carries four contextual factors plus the light switch state.
//! The factors are folded into a single observation code in `[0, 54)`:
//!
//! ```text
//! code = occupancy * 27 + intermediate_leaving * 9 + outdoor_illum * 3 + work_illum
//! ```
//!
//! The switch state is the hidden state of a two-state HMM (0 = off, 1 = on).

mod corpus;
mod hmm;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{
    generate_example_corpus, load_ive_csv, write_ive_csv, IveCorpus, IVE_CSV_HEADER,
    SESSIONS_PER_CORPUS,
};
pub use hmm::{baum_welch, init_from_counts, BaumWelchFit, BaumWelchOptions, Hmm};
pub use synth::{
    read_synthetic_csv, sample_sequences, synthesize, write_synthetic_csv, SampledSequence,
    SyntheticIveRecord, SYNTHETIC_CSV_HEADER,
};

/// Number of distinct observation codes.
pub const N_OBSERVATIONS: usize = 54;
/// Hidden states: light off and light on.
pub const N_SWITCH_STATES: usize = 2;
pub const STATE_OFF: usize = 0;
pub const STATE_ON: usize = 1;

macro_rules! labelled_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(index: usize) -> Option<Self> {
                Self::ALL.get(index).copied()
            }

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($label => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} label `{}`",
                        stringify!($name),
                        other
                    )),
                }
            }
        }
    };
}

labelled_enum!(
    /// Phase of an IVE session.
    EventKind {
        InitialBeforeArrival => "Initial",
        Arrival => "Arrival",
        ShortLeave => "ShortLeave",
        ReturnShort => "ReturnShort",
        LongLeave => "LongLeave",
        ReturnLong => "ReturnLong",
        Departure => "Departure",
    }
);

labelled_enum!(Occupancy {
    NonOccupancy => "No",
    Occupancy => "Yes",
});

labelled_enum!(IntermediateLeaving {
    None => "None",
    Short => "Short",
    Long => "Long",
});

labelled_enum!(
    /// Illuminance category shared by outdoor and work-area factors.
    IlluminanceLevel {
        Dark => "Dark",
        Normal => "Normal",
        Bright => "Bright",
    }
);

impl IlluminanceLevel {
    pub fn lux(self) -> f64 {
        match self {
            IlluminanceLevel::Dark => 200.0,
            IlluminanceLevel::Normal => 500.0,
            IlluminanceLevel::Bright => 700.0,
        }
    }
}

/// The contextual factors that make up one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorTuple {
    pub occupancy: Occupancy,
    pub intermediate_leaving: IntermediateLeaving,
    pub outdoor_illum: IlluminanceLevel,
    pub work_illum: IlluminanceLevel,
}

impl FactorTuple {
    pub fn all() -> impl Iterator<Item = FactorTuple> {
        (0..N_OBSERVATIONS).map(|c| ObservationCode(c as u8).decode())
    }
}

/// One IVE event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_kind: EventKind,
    pub occupancy: Occupancy,
    pub intermediate_leaving: IntermediateLeaving,
    pub outdoor_illum: IlluminanceLevel,
    pub work_illum: IlluminanceLevel,
    pub light_on: bool,
}

impl EventRecord {
    pub fn factors(&self) -> FactorTuple {
        FactorTuple {
            occupancy: self.occupancy,
            intermediate_leaving: self.intermediate_leaving,
            outdoor_illum: self.outdoor_illum,
            work_illum: self.work_illum,
        }
    }

    pub fn switch_state(&self) -> usize {
        if self.light_on {
            STATE_ON
        } else {
            STATE_OFF
        }
    }
}

/// Ordinal encoding of a [`FactorTuple`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObservationCode(u8);

impl ObservationCode {
    pub fn new(code: usize) -> Result<Self> {
        if code < N_OBSERVATIONS {
            Ok(ObservationCode(code as u8))
        } else {
            Err(Error::Domain(format!(
                "observation code {code} outside [0, {N_OBSERVATIONS})"
            )))
        }
    }

    pub fn encode(factors: &FactorTuple) -> Self {
        let code = factors.occupancy.index() * 27
            + factors.intermediate_leaving.index() * 9
            + factors.outdoor_illum.index() * 3
            + factors.work_illum.index();
        ObservationCode(code as u8)
    }

    pub fn value(self) -> usize {
        self.0 as usize
    }

    pub fn decode(self) -> FactorTuple {
        let c = self.value();
        // Indices are in range by construction of `ObservationCode`.
        FactorTuple {
            occupancy: Occupancy::ALL[c / 27],
            intermediate_leaving: IntermediateLeaving::ALL[(c / 9) % 3],
            outdoor_illum: IlluminanceLevel::ALL[(c / 3) % 3],
            work_illum: IlluminanceLevel::ALL[c % 3],
        }
    }
}

pub fn encode(record: &EventRecord) -> ObservationCode {
    ObservationCode::encode(&record.factors())
}

pub fn decode(code: usize) -> Result<FactorTuple> {
    Ok(ObservationCode::new(code)?.decode())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factors(o: Occupancy, l: IntermediateLeaving, out: IlluminanceLevel, w: IlluminanceLevel) -> FactorTuple {
        FactorTuple {
            occupancy: o,
            intermediate_leaving: l,
            outdoor_illum: out,
            work_illum: w,
        }
    }

    #[test]
    fn encoding_examples() {
        use IlluminanceLevel::*;
        let nsbb = factors(Occupancy::NonOccupancy, IntermediateLeaving::Short, Bright, Bright);
        assert_eq!(ObservationCode::encode(&nsbb).value(), 17);
        let zero = factors(Occupancy::NonOccupancy, IntermediateLeaving::None, Dark, Dark);
        assert_eq!(ObservationCode::encode(&zero).value(), 0);
        let max = factors(Occupancy::Occupancy, IntermediateLeaving::Long, Bright, Bright);
        assert_eq!(ObservationCode::encode(&max).value(), 53);

        assert_eq!(decode(17).unwrap(), nsbb);
        assert_eq!(decode(0).unwrap(), zero);
        assert!(matches!(decode(54), Err(Error::Domain(_))));
    }

    #[test]
    fn encoding_is_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for occupancy in Occupancy::ALL {
            for leaving in IntermediateLeaving::ALL {
                for outdoor in IlluminanceLevel::ALL {
                    for work in IlluminanceLevel::ALL {
                        let f = factors(*occupancy, *leaving, *outdoor, *work);
                        let code = ObservationCode::encode(&f);
                        assert!(code.value() < N_OBSERVATIONS);
                        assert_eq!(code.decode(), f);
                        assert!(seen.insert(code));
                    }
                }
            }
        }
        assert_eq!(seen.len(), N_OBSERVATIONS);
    }

    #[test]
    fn illuminance_levels_map_to_lux() {
        assert_eq!(IlluminanceLevel::Dark.lux(), 200.0);
        assert_eq!(IlluminanceLevel::Normal.lux(), 500.0);
        assert_eq!(IlluminanceLevel::Bright.lux(), 700.0);
    }

    #[test]
    fn labels_parse_back() {
        for kind in EventKind::ALL {
            assert_eq!(kind.label().parse::<EventKind>().unwrap(), *kind);
        }
        assert!("VeryBright".parse::<IlluminanceLevel>().is_err());
        assert_eq!("Yes".parse::<Occupancy>().unwrap(), Occupancy::Occupancy);
    }
}
