//! Next-item training examples and prefix/ground-truth test cases.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::event::InteractionEvent;
use crate::data::history::{LongTerm, UserHistory};

/// Prefix `short_term[..prefix_len]` of a history with the items that
/// follow it as targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample<'a> {
    pub history: &'a UserHistory,
    pub prefix_len: usize,
    pub targets: Vec<&'a str>,
}

impl<'a> TrainingExample<'a> {
    pub fn prefix(&self) -> &'a [InteractionEvent] {
        &self.history.short_term[..self.prefix_len]
    }
}

/// One example per position `t` in `1..m`: prefix `i_1..i_t`, targets
/// `i_{t+1}..i_{min(t+n_targets, m)}`.
pub fn make_training_examples(history: &UserHistory, n_targets: usize) -> Vec<TrainingExample<'_>> {
    let items: Vec<&str> = history.item_ids().collect();
    let m = items.len();
    if m < 2 || n_targets == 0 {
        return Vec::new();
    }
    (1..m)
        .map(|t| TrainingExample {
            history,
            prefix_len: t,
            targets: items[t..(t + n_targets).min(m)].to_vec(),
        })
        .collect()
}

/// Evaluation input: the fed prefix of a test session plus the set of
/// later items the user went on to interact with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub user_id: String,
    #[serde(default)]
    pub profile: BTreeMap<String, String>,
    pub prefix: Vec<InteractionEvent>,
    #[serde(default)]
    pub long_term: LongTerm,
    pub ground_truth: Vec<String>,
}

/// Number of fed items for a session of length `m`: `⌈fraction·m⌉`, at
/// least 1 and at most `m`.
pub fn prefix_len(m: usize, fraction: f64) -> usize {
    let raw = (fraction * m as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(m)
}

/// Splits each history's short-term session into a fed prefix and a
/// deduplicated ground-truth set excluding prefix items. Histories whose
/// ground truth ends up empty are dropped.
pub fn make_test_cases(histories: &[UserHistory], prefix_fraction: f64) -> Vec<TestCase> {
    histories
        .iter()
        .filter_map(|h| {
            let m = h.short_term.len();
            if m == 0 {
                return None;
            }
            let k = prefix_len(m, prefix_fraction);
            let fed: HashSet<&str> = h.short_term[..k].iter().map(|e| e.item_id.as_str()).collect();
            let mut seen = HashSet::new();
            let ground_truth: Vec<String> = h.short_term[k..]
                .iter()
                .map(|e| e.item_id.as_str())
                .filter(|id| !fed.contains(id) && seen.insert(*id))
                .map(str::to_string)
                .collect();
            if ground_truth.is_empty() {
                return None;
            }
            Some(TestCase {
                user_id: h.user_id.clone(),
                profile: h.profile.clone(),
                prefix: h.short_term[..k].to_vec(),
                long_term: h.long_term.clone(),
                ground_truth,
            })
        })
        .collect()
}
