use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::event::InteractionEvent;
use crate::data::session::{breaks, SessionRules};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    pub min_item_count: usize,
    pub spam_threshold: usize,
    pub min_session_len: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_item_count: 5,
            spam_threshold: 1000,
            min_session_len: 2,
        }
    }
}

/// Drops spam users, rare items and short training sessions.
///
/// Events with `timestamp < test_start` form the training window (all of
/// them when `test_start` is `None`). Item counts come from the training
/// window only and the resulting vocabulary applies to both windows; only
/// training sessions are subject to the length rule. Removing events can
/// push other items or sessions under a threshold, so the rules are applied
/// until nothing changes, which makes the filter idempotent. Input order is
/// preserved.
pub fn filter_dataset(
    events: &[InteractionEvent],
    test_start: Option<i64>,
    session_rules: &SessionRules,
    rules: &FilterRules,
) -> Vec<InteractionEvent> {
    let is_train = |e: &InteractionEvent| test_start.is_none_or(|t| e.timestamp < t);
    let mut keep = vec![true; events.len()];

    loop {
        let mut changed = false;

        let mut per_user: HashMap<&str, usize> = HashMap::new();
        for (e, _) in events.iter().zip(&keep).filter(|(_, k)| **k) {
            *per_user.entry(&e.user_id).or_default() += 1;
        }
        let mut per_item: HashMap<&str, usize> = HashMap::new();
        for (e, _) in events.iter().zip(&keep).filter(|(e, k)| **k && is_train(e)) {
            *per_item.entry(&e.item_id).or_default() += 1;
        }
        for (i, e) in events.iter().enumerate() {
            if keep[i]
                && (per_user[e.user_id.as_str()] > rules.spam_threshold
                    || per_item.get(e.item_id.as_str()).copied().unwrap_or(0) < rules.min_item_count)
            {
                keep[i] = false;
                changed = true;
            }
        }

        for i in short_training_sessions(events, &keep, &is_train, session_rules, rules.min_session_len) {
            keep[i] = false;
            changed = true;
        }

        if !changed {
            break;
        }
    }

    events
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(e, _)| e.clone())
        .collect()
}

/// Indices of kept training events that sit in sessions shorter than
/// `min_len`. Mirrors `segment_sessions` on index lists.
fn short_training_sessions(
    events: &[InteractionEvent],
    keep: &[bool],
    is_train: &impl Fn(&InteractionEvent) -> bool,
    rules: &SessionRules,
    min_len: usize,
) -> Vec<usize> {
    let mut by_user: indexmap::IndexMap<&str, Vec<usize>> = indexmap::IndexMap::new();
    for (i, e) in events.iter().enumerate() {
        if keep[i] && is_train(e) {
            by_user.entry(&e.user_id).or_default().push(i);
        }
    }
    let mut drop = Vec::new();
    for idx in by_user.values_mut() {
        idx.sort_by_key(|&i| events[i].timestamp);
        let mut run: Vec<usize> = Vec::new();
        for &i in idx.iter() {
            if let Some(&p) = run.last() {
                if run.len() >= rules.max_len || breaks(&events[p], &events[i], rules) {
                    if run.len() < min_len {
                        drop.append(&mut run);
                    }
                    run.clear();
                }
            }
            run.push(i);
        }
        if run.len() < min_len {
            drop.extend(run);
        }
    }
    drop
}
