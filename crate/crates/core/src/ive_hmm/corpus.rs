use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    encode, EventKind, EventRecord, IlluminanceLevel, IntermediateLeaving, Occupancy,
};
use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, SeededRng};

pub const IVE_CSV_HEADER: &str =
    "event_kind,occupancy,intermediate_leaving,outdoor_illum,work_illum,light_on";

const COLUMNS: [&str; 6] = [
    "event_kind",
    "occupancy",
    "intermediate_leaving",
    "outdoor_illum",
    "work_illum",
    "light_on",
];

/// IVE records with optional explicit session labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IveCorpus {
    pub records: Vec<EventRecord>,
    /// One label per record when the source carried a `session_id` column.
    pub session_ids: Option<Vec<String>>,
}

impl IveCorpus {
    pub fn from_records(records: Vec<EventRecord>) -> Self {
        IveCorpus {
            records,
            session_ids: None,
        }
    }

    /// Splits the corpus into sessions.
    ///
    /// With session labels, consecutive records sharing a label form a session
    /// (labels are grouped in order of first appearance). Without them, every
    /// `Initial` event starts a new session.
    pub fn sessions(&self) -> Vec<Vec<EventRecord>> {
        match &self.session_ids {
            Some(ids) => {
                let mut order: Vec<&str> = Vec::new();
                let mut groups: Vec<Vec<EventRecord>> = Vec::new();
                for (id, rec) in ids.iter().zip(&self.records) {
                    match order.iter().position(|o| *o == id.as_str()) {
                        Some(g) => groups[g].push(*rec),
                        None => {
                            order.push(id);
                            groups.push(vec![*rec]);
                        }
                    }
                }
                groups
            }
            None => {
                let mut groups: Vec<Vec<EventRecord>> = Vec::new();
                for rec in &self.records {
                    if rec.event_kind == EventKind::InitialBeforeArrival || groups.is_empty() {
                        groups.push(Vec::new());
                    }
                    groups.last_mut().unwrap().push(*rec);
                }
                groups
            }
        }
    }

    /// Sessions as labelled `(switch_state, observation_code)` sequences.
    pub fn labelled_sequences(&self) -> Vec<Vec<(usize, usize)>> {
        self.sessions()
            .iter()
            .map(|s| s.iter().map(|r| (r.switch_state(), encode(r).value())).collect())
            .collect()
    }

    pub fn observation_sequences(&self) -> Vec<Vec<usize>> {
        self.sessions()
            .iter()
            .map(|s| s.iter().map(|r| encode(r).value()).collect())
            .collect()
    }
}

pub fn load_ive_csv(path: &Path) -> Result<IveCorpus> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::format(&name, 0, e.to_string()))?;
    let headers = reader.headers()?.clone();
    let position = |col: &str| headers.iter().position(|h| h.trim() == col);
    let mut idx = [0usize; 6];
    for (slot, col) in idx.iter_mut().zip(COLUMNS) {
        *slot = position(col).ok_or_else(|| Error::format(&name, 1, format!("missing column `{col}`")))?;
    }
    let session_idx = position("session_id");

    let mut corpus = IveCorpus {
        records: Vec::new(),
        session_ids: session_idx.map(|_| Vec::new()),
    };
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::format(&name, row, e.to_string()))?;
        let field = |col: usize| -> Result<&str> {
            rec.get(idx[col])
                .map(str::trim)
                .ok_or_else(|| Error::format(&name, row, format!("missing value for `{}`", COLUMNS[col])))
        };
        let label_err = |m: String| Error::format(&name, row, m);
        let light_on = match field(5)? {
            "0" => false,
            "1" => true,
            other => return Err(Error::format(&name, row, format!("light_on `{other}` is not 0/1"))),
        };
        corpus.records.push(EventRecord {
            event_kind: field(0)?.parse().map_err(label_err)?,
            occupancy: field(1)?.parse().map_err(label_err)?,
            intermediate_leaving: field(2)?.parse().map_err(label_err)?,
            outdoor_illum: field(3)?.parse().map_err(label_err)?,
            work_illum: field(4)?.parse().map_err(label_err)?,
            light_on,
        });
        if let (Some(ids), Some(s)) = (corpus.session_ids.as_mut(), session_idx) {
            let id = rec
                .get(s)
                .map(|v| v.trim().to_owned())
                .ok_or_else(|| Error::format(&name, row, "missing value for `session_id`"))?;
            ids.push(id);
        }
    }
    if corpus.records.is_empty() {
        return Err(Error::format(&name, 1, "empty dataset"));
    }
    Ok(corpus)
}

pub fn write_ive_csv<W: Write>(records: &[EventRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{IVE_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.event_kind,
            r.occupancy,
            r.intermediate_leaving,
            r.outdoor_illum,
            r.work_illum,
            u8::from(r.light_on)
        )?;
    }
    Ok(())
}

/// Sessions in the example corpus; half include a short leave, half a long one.
pub const SESSIONS_PER_CORPUS: usize = 36;

/// Probability that an occupant wants the light on at a given work-area level.
fn switch_on_probability(work: IlluminanceLevel) -> f64 {
    match work {
        IlluminanceLevel::Dark => 0.98,
        IlluminanceLevel::Normal => 0.94,
        IlluminanceLevel::Bright => 0.86,
    }
}

fn draw_level(rng: &mut SeededRng) -> IlluminanceLevel {
    IlluminanceLevel::ALL[rng.gen_range(0..3)]
}

/// Work-area level tracks daylight most of the time.
fn draw_work_level(outdoor: IlluminanceLevel, rng: &mut SeededRng) -> IlluminanceLevel {
    if rng.gen_bool(0.6) {
        outdoor
    } else {
        draw_level(rng)
    }
}

fn push_event(
    records: &mut Vec<EventRecord>,
    rng: &mut SeededRng,
    kind: EventKind,
    occupancy: Occupancy,
    leaving: IntermediateLeaving,
    light_on: impl FnOnce(IlluminanceLevel, &mut SeededRng) -> bool,
) -> bool {
    let outdoor = draw_level(rng);
    let work = draw_work_level(outdoor, rng);
    let light_on = light_on(work, rng);
    records.push(EventRecord {
        event_kind: kind,
        occupancy,
        intermediate_leaving: leaving,
        outdoor_illum: outdoor,
        work_illum: work,
        light_on,
    });
    light_on
}

/// A 180-event stand-in for the unpublished IVE corpus.
///
/// Each of the 36 sessions runs Initial, Arrival, a short or long leave and
/// return, then Departure, giving 36/36/18/18/18/18/36 events per kind.
pub fn generate_example_corpus(seed: u64) -> Vec<EventRecord> {
    use EventKind::*;
    use IntermediateLeaving as Leave;
    use Occupancy::{NonOccupancy, Occupancy as Occupied};

    let mut rng = rng_from_seed(seed);
    let mut long_leave: Vec<bool> = (0..SESSIONS_PER_CORPUS).map(|i| i % 2 == 1).collect();
    long_leave.shuffle(&mut rng);

    let mut records = Vec::with_capacity(SESSIONS_PER_CORPUS * 5);
    for long in long_leave {
        let (leave_kind, return_kind, leaving, keep_on) = if long {
            (LongLeave, ReturnLong, Leave::Long, 0.4)
        } else {
            (ShortLeave, ReturnShort, Leave::Short, 0.9)
        };
        let r = &mut records;
        push_event(r, &mut rng, InitialBeforeArrival, NonOccupancy, Leave::None, |_, _| false);
        let on = push_event(r, &mut rng, Arrival, Occupied, Leave::None, |work, rng| {
            rng.gen_bool(switch_on_probability(work))
        });
        let on = push_event(r, &mut rng, leave_kind, NonOccupancy, leaving, |_, rng| {
            on && rng.gen_bool(keep_on)
        });
        let on = push_event(r, &mut rng, return_kind, Occupied, leaving, |work, rng| {
            on || rng.gen_bool(switch_on_probability(work))
        });
        push_event(r, &mut rng, Departure, NonOccupancy, Leave::None, |_, rng| {
            on && rng.gen_bool(0.15)
        });
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn write_tmp(contents: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ive.csv");
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn example_corpus_has_expected_event_counts() {
        let corpus = generate_example_corpus(1);
        assert_eq!(corpus.len(), 180);
        let mut counts: HashMap<EventKind, usize> = HashMap::new();
        for r in &corpus {
            *counts.entry(r.event_kind).or_default() += 1;
        }
        let expect = [
            (EventKind::InitialBeforeArrival, 36),
            (EventKind::Arrival, 36),
            (EventKind::ShortLeave, 18),
            (EventKind::ReturnShort, 18),
            (EventKind::LongLeave, 18),
            (EventKind::ReturnLong, 18),
            (EventKind::Departure, 36),
        ];
        for (kind, n) in expect {
            assert_eq!(counts[&kind], n, "{kind}");
        }
        assert!(corpus
            .iter()
            .filter(|r| r.event_kind == EventKind::InitialBeforeArrival)
            .all(|r| r.occupancy == Occupancy::NonOccupancy && !r.light_on));
    }

    #[test]
    fn example_corpus_is_deterministic() {
        assert_eq!(generate_example_corpus(5), generate_example_corpus(5));
        assert_ne!(generate_example_corpus(5), generate_example_corpus(6));
    }

    #[test]
    fn darker_work_area_means_light_on_more_often() {
        let mut on = [0usize; 3];
        let mut total = [0usize; 3];
        for seed in 0..20 {
            for r in generate_example_corpus(seed)
                .iter()
                .filter(|r| r.event_kind == EventKind::Arrival)
            {
                total[r.work_illum.index()] += 1;
                on[r.work_illum.index()] += usize::from(r.light_on);
            }
        }
        let rate = |i: usize| on[i] as f64 / total[i] as f64;
        assert!(rate(0) > rate(2), "dark {} vs bright {}", rate(0), rate(2));
    }

    #[test]
    fn sessions_split_on_initial_events() {
        let corpus = IveCorpus::from_records(generate_example_corpus(2));
        let sessions = corpus.sessions();
        assert_eq!(sessions.len(), SESSIONS_PER_CORPUS);
        assert!(sessions.iter().all(|s| s.len() == 5));
        assert_eq!(corpus.labelled_sequences()[0].len(), 5);
    }

    #[test]
    fn loads_well_formed_file() {
        let body = "\
event_kind,occupancy,intermediate_leaving,outdoor_illum,work_illum,light_on
Initial,No,None,Dark,Dark,0
Arrival,Yes,None,Dark,Dark,1
ShortLeave,No,Short,Normal,Dark,1
ReturnShort,Yes,Short,Normal,Normal,1
LongLeave,No,Long,Bright,Bright,0
ReturnLong,Yes,Long,Bright,Normal,1
Departure,No,None,Dark,Dark,0
";
        let (_dir, path) = write_tmp(body);
        let corpus = load_ive_csv(&path).unwrap();
        assert_eq!(corpus.records.len(), 7);
        assert!(corpus.session_ids.is_none());
        assert_eq!(corpus.records[3].event_kind, EventKind::ReturnShort);

        let mut buf = Vec::new();
        write_ive_csv(&corpus.records, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), body);
    }

    #[test]
    fn session_column_groups_records() {
        let body = "\
session_id,event_kind,occupancy,intermediate_leaving,outdoor_illum,work_illum,light_on
a,Initial,No,None,Dark,Dark,0
b,Initial,No,None,Dark,Dark,0
a,Arrival,Yes,None,Dark,Dark,1
b,Arrival,Yes,None,Bright,Bright,0
";
        let (_dir, path) = write_tmp(body);
        let sessions = load_ive_csv(&path).unwrap().sessions();
        assert_eq!(sessions.len(), 2);
        assert!(sessions[0][1].light_on);
        assert!(!sessions[1][1].light_on);
    }

    #[test]
    fn unknown_label_names_the_row() {
        let body = "\
event_kind,occupancy,intermediate_leaving,outdoor_illum,work_illum,light_on
Initial,No,None,Dark,Dark,0
Arrival,Yes,None,VeryBright,Dark,1
";
        let (_dir, path) = write_tmp(body);
        match load_ive_csv(&path) {
            Err(Error::Format { row, message, .. }) => {
                assert_eq!(row, 3);
                assert!(message.contains("VeryBright"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn header_only_is_empty_dataset() {
        let (_dir, path) = write_tmp(&format!("{IVE_CSV_HEADER}\n"));
        match load_ive_csv(&path) {
            Err(Error::Format { message, .. }) => assert!(message.contains("empty dataset")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_reported() {
        let (_dir, path) = write_tmp("event_kind,occupancy\nInitial,No\n");
        match load_ive_csv(&path) {
            Err(Error::Format { message, .. }) => assert!(message.contains("intermediate_leaving")),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
