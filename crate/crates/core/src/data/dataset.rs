//! Train/test dataset construction and the versioned JSONL files that carry
//! them between `prepare`, `train` and `eval`.
//!
//! Each file starts with a header line naming the schema version, the file
//! kind and the rules it was built with; every following line is a record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::event::InteractionEvent;
use crate::data::examples::{make_test_cases, TestCase};
use crate::data::filter::{filter_dataset, FilterRules};
use crate::data::history::{history_at, latest_profile, HistoryRules, LongTerm, UserHistory, SECONDS_PER_DAY};
use crate::data::session::{segment_by_user, SessionRules};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const TRAIN_FILE: &str = "train/histories.jsonl";
pub const TEST_FILE: &str = "test/cases.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareRules {
    pub session: SessionRules,
    pub history: HistoryRules,
    pub filter: FilterRules,
    pub test_prefix: f64,
}

impl Default for PrepareRules {
    fn default() -> Self {
        PrepareRules {
            session: SessionRules::default(),
            history: HistoryRules::default(),
            filter: FilterRules::default(),
            test_prefix: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    TrainHistories,
    TestCases,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub kind: FileKind,
    pub split_ts: i64,
    pub records: usize,
    pub rules: PrepareRules,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub split_ts: i64,
    pub train: Vec<UserHistory>,
    pub test: Vec<TestCase>,
}

/// Start of the day holding the latest event.
pub fn default_split(events: &[InteractionEvent]) -> Option<i64> {
    events
        .iter()
        .map(|e| e.timestamp)
        .max()
        .map(|t| t.div_euclid(SECONDS_PER_DAY) * SECONDS_PER_DAY)
}

/// Filters, splits at `split_ts` and builds training histories (one per
/// training session of length ≥ 2, long-term from earlier sessions) and
/// test cases (each user's latest session starting at or after the split,
/// long-term from everything before it).
pub fn prepare(events: &[InteractionEvent], rules: &PrepareRules, split_ts: Option<i64>) -> Result<PreparedData> {
    for e in events {
        e.validate()?;
    }
    if !(rules.test_prefix > 0.0 && rules.test_prefix <= 1.0) {
        return Err(Error::Config("test prefix fraction must be in (0, 1]".into()));
    }
    let split = split_ts
        .or_else(|| default_split(events))
        .ok_or_else(|| Error::Data("no events to prepare".into()))?;
    let kept = filter_dataset(events, Some(split), &rules.session, &rules.filter);
    let (train_events, test_events): (Vec<_>, Vec<_>) = kept.iter().cloned().partition(|e| e.timestamp < split);

    let mut train = Vec::new();
    for sessions in segment_by_user(&train_events, &rules.session)?.values() {
        for k in 0..sessions.len() {
            if sessions[k].len() >= 2 {
                train.push(history_at(sessions, k, &rules.history));
            }
        }
    }

    let mut by_user: indexmap::IndexMap<&str, Vec<&InteractionEvent>> = indexmap::IndexMap::new();
    for e in &kept {
        by_user.entry(&e.user_id).or_default().push(e);
    }
    for list in by_user.values_mut() {
        list.sort_by_key(|e| e.timestamp);
    }
    let mut histories = Vec::new();
    for (user, sessions) in segment_by_user(&test_events, &rules.session)? {
        let Some(last) = sessions.last() else { continue };
        let all = &by_user[user.as_str()];
        let start = last.start();
        let long_term = LongTerm::from_events(all.iter().rev().copied(), start, &rules.history);
        let profile = latest_profile(all.iter().copied().filter(|e| e.timestamp <= last.events.last().unwrap().timestamp));
        histories.push(UserHistory {
            user_id: user,
            profile,
            short_term: last.events.clone(),
            long_term,
        });
    }
    let test = make_test_cases(&histories, rules.test_prefix);
    Ok(PreparedData {
        split_ts: split,
        train,
        test,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n").map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Parses a header line followed by records of `kind`.
pub fn parse_jsonl<T: DeserializeOwned>(reader: impl BufRead, kind: FileKind) -> Result<(Header, Vec<T>)> {
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        };
        match &header {
            None => {
                let value: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
                let version = value.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: "missing schema_version header".into(),
                })?;
                if version != u64::from(SCHEMA_VERSION) {
                    return Err(Error::Version {
                        found: u32::try_from(version).unwrap_or(u32::MAX),
                        expected: SCHEMA_VERSION,
                    });
                }
                let h: Header = serde_json::from_value(value).map_err(parse_err)?;
                if h.kind != kind {
                    return Err(Error::Data(format!("expected a {kind:?} file, found {:?}", h.kind)));
                }
                header = Some(h);
            }
            Some(_) => records.push(serde_json::from_str(&line).map_err(parse_err)?),
        }
    }
    let header = header.ok_or_else(|| Error::Data("empty dataset file".into()))?;
    if header.records != records.len() {
        return Err(Error::Data(format!(
            "header promises {} records, file has {}",
            header.records,
            records.len()
        )));
    }
    Ok((header, records))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: FileKind) -> Result<(Header, Vec<T>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file), kind)
}

pub fn train_path(dir: &Path) -> PathBuf {
    dir.join(TRAIN_FILE)
}

pub fn test_path(dir: &Path) -> PathBuf {
    dir.join(TEST_FILE)
}

/// Writes `<dir>/train/histories.jsonl` and `<dir>/test/cases.jsonl`.
pub fn write_dataset(dir: &Path, data: &PreparedData, rules: &PrepareRules) -> Result<()> {
    let header = |kind, records| Header {
        schema_version: SCHEMA_VERSION,
        kind,
        split_ts: data.split_ts,
        records,
        rules: *rules,
    };
    write_jsonl(&train_path(dir), &header(FileKind::TrainHistories, data.train.len()), &data.train)?;
    write_jsonl(&test_path(dir), &header(FileKind::TestCases, data.test.len()), &data.test)
}

/// Reads training histories from a dataset directory (or the file itself).
pub fn read_train(path: &Path) -> Result<(Header, Vec<UserHistory>)> {
    let file = if path.is_dir() { train_path(path) } else { path.to_path_buf() };
    read_jsonl(&file, FileKind::TrainHistories)
}

/// Reads test cases from a dataset directory, its `test/` directory or the
/// file itself.
pub fn read_test(path: &Path) -> Result<(Header, Vec<TestCase>)> {
    let file = if path.join(TEST_FILE).is_file() {
        test_path(path)
    } else if path.is_dir() {
        path.join("cases.jsonl")
    } else {
        path.to_path_buf()
    };
    read_jsonl(&file, FileKind::TestCases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticConfig};

    fn ev(user: &str, item: &str, ts: i64) -> InteractionEvent {
        InteractionEvent::new(user, item, ts)
    }

    fn loose() -> PrepareRules {
        PrepareRules {
            filter: FilterRules {
                min_item_count: 1,
                ..FilterRules::default()
            },
            ..PrepareRules::default()
        }
    }

    #[test]
    fn split_defaults_to_start_of_last_day() {
        let events = [ev("u", "a", 10), ev("u", "b", 3 * SECONDS_PER_DAY + 5)];
        assert_eq!(default_split(&events), Some(3 * SECONDS_PER_DAY));
        assert_eq!(default_split(&[]), None);
    }

    #[test]
    fn prepare_builds_both_splits() {
        let day = SECONDS_PER_DAY;
        let mut events = vec![
            ev("u", "a", 0),
            ev("u", "b", 60),
            ev("u", "c", 5000),
            ev("u", "a", 5060),
            ev("u", "b", 5120),
        ];
        events.extend([
            ev("u", "c", day + 10),
            ev("u", "a", day + 20),
            ev("u", "b", day + 30),
            ev("u", "c", day + 40),
            ev("u", "d", day + 50),
        ]);
        let data = prepare(&events, &loose(), None).unwrap();
        assert_eq!(data.split_ts, day);
        assert_eq!(data.train.len(), 2);
        assert!(data.train[0].long_term.is_empty());
        assert_eq!(data.train[1].long_term.ids, vec!["b", "a"]);
        assert_eq!(data.test.len(), 1);
        let case = &data.test[0];
        // "d" never occurs before the split, so the filter removes it and
        // the session is c a b c
        assert_eq!(case.prefix.len(), 1);
        assert_eq!(case.ground_truth, vec!["a", "b"]);
        assert_eq!(case.long_term.ids, vec!["b", "a", "c"]);
    }

    #[test]
    fn round_trip_through_files() {
        let (events, _) = generate(&SyntheticConfig {
            users: 30,
            events_per_user: 20,
            ..SyntheticConfig::default()
        }, 2)
        .unwrap();
        let rules = PrepareRules::default();
        let data = prepare(&events, &rules, None).unwrap();
        assert!(!data.train.is_empty() && !data.test.is_empty());
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &rules).unwrap();
        let (h, train) = read_train(dir.path()).unwrap();
        assert_eq!(h.schema_version, SCHEMA_VERSION);
        assert_eq!(h.rules, rules);
        assert_eq!(train, data.train);
        let (_, test) = read_test(dir.path()).unwrap();
        assert_eq!(test, data.test);
        assert!(read_jsonl::<TestCase>(&train_path(dir.path()), FileKind::TestCases).is_err());
    }

    #[test]
    fn header_problems_are_reported() {
        let bad_version = "{\"schema_version\":9,\"kind\":\"test_cases\"}\n";
        assert!(matches!(
            parse_jsonl::<TestCase>(bad_version.as_bytes(), FileKind::TestCases),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(parse_jsonl::<TestCase>("{\"kind\":1}\n".as_bytes(), FileKind::TestCases).is_err());
        assert!(parse_jsonl::<TestCase>("".as_bytes(), FileKind::TestCases).is_err());
        let header = serde_json::to_string(&Header {
            schema_version: SCHEMA_VERSION,
            kind: FileKind::TestCases,
            split_ts: 0,
            records: 2,
            rules: PrepareRules::default(),
        })
        .unwrap();
        assert!(parse_jsonl::<TestCase>(format!("{header}\n").as_bytes(), FileKind::TestCases).is_err());
        let err = parse_jsonl::<TestCase>(format!("{header}\nnot json\n").as_bytes(), FileKind::TestCases);
        assert!(matches!(err, Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn every_history_satisfies_its_invariants() {
        let (events, _) = generate(&SyntheticConfig {
            users: 60,
            events_per_user: 40,
            min_session_len: 2,
            max_session_len: 9,
            ..SyntheticConfig::default()
        }, 5)
        .unwrap();
        let rules = PrepareRules::default();
        let data = prepare(&events, &rules, None).unwrap();
        let horizon = i64::from(rules.history.lookback_days) * SECONDS_PER_DAY;
        let by_id: std::collections::HashMap<&str, Vec<&InteractionEvent>> =
            events.iter().fold(Default::default(), |mut m, e| {
                m.entry(e.item_id.as_str()).or_default().push(e);
                m
            });
        for h in &data.train {
            let start = h.short_term[0].timestamp;
            assert!(h.short_term.len() >= 2 && h.short_term.len() <= rules.session.max_len);
            assert!(h.short_term.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            for f in crate::data::event::ItemFeature::ALL {
                let subset = h.long_term.subset(f);
                assert!(subset.len() <= rules.history.longterm_cap);
                let distinct: std::collections::HashSet<_> = subset.iter().collect();
                assert_eq!(distinct.len(), subset.len());
            }
            for id in &h.long_term.ids {
                assert!(by_id[id.as_str()].iter().any(|e| e.user_id == h.user_id
                    && e.timestamp < start
                    && e.timestamp >= start - horizon));
            }
        }
        for case in &data.test {
            assert!(case.prefix[0].timestamp >= data.split_ts);
        }
    }
}
