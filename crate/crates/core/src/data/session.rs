//! Session segmentation.
//!
//! A new session starts when the backend session id changes (both present),
//! when the gap to the previous interaction reaches `gap_seconds`, or when
//! the running session already holds `max_len` interactions.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::event::InteractionEvent;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRules {
    pub gap_seconds: i64,
    pub max_len: usize,
}

impl Default for SessionRules {
    fn default() -> Self {
        SessionRules {
            gap_seconds: 600,
            max_len: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    pub events: Vec<InteractionEvent>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn start(&self) -> i64 {
        self.events[0].timestamp
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.item_id.as_str())
    }
}

pub(crate) fn breaks(prev: &InteractionEvent, next: &InteractionEvent, rules: &SessionRules) -> bool {
    let id_change = matches!(
        (&prev.session_id, &next.session_id),
        (Some(a), Some(b)) if a != b
    );
    id_change || next.timestamp - prev.timestamp >= rules.gap_seconds
}

/// Splits one user's events into sessions. Events are stably sorted by
/// timestamp first, so equal timestamps keep their input order.
pub fn segment_sessions(events: &[InteractionEvent], rules: &SessionRules) -> Result<Vec<Session>> {
    let Some(first) = events.first() else {
        return Ok(Vec::new());
    };
    if rules.max_len == 0 {
        return Err(Error::Config("max session length must be positive".into()));
    }
    if let Some(other) = events.iter().find(|e| e.user_id != first.user_id) {
        return Err(Error::Data(format!(
            "segment_sessions expects one user, got {:?} and {:?}",
            first.user_id, other.user_id
        )));
    }
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| e.timestamp);

    let mut sessions = Vec::new();
    let mut current: Vec<InteractionEvent> = Vec::new();
    for event in sorted {
        if let Some(prev) = current.last() {
            if current.len() >= rules.max_len || breaks(prev, &event, rules) {
                sessions.push(std::mem::take(&mut current));
            }
        }
        current.push(event);
    }
    sessions.push(current);
    Ok(sessions
        .into_iter()
        .map(|events| Session {
            user_id: first.user_id.clone(),
            events,
        })
        .collect())
}

/// Groups events by user (first-appearance order) and segments each user.
pub fn segment_by_user(
    events: &[InteractionEvent],
    rules: &SessionRules,
) -> Result<IndexMap<String, Vec<Session>>> {
    let mut by_user: IndexMap<String, Vec<InteractionEvent>> = IndexMap::new();
    for e in events {
        by_user.entry(e.user_id.clone()).or_default().push(e.clone());
    }
    by_user
        .into_iter()
        .map(|(user, evs)| Ok((user, segment_sessions(&evs, rules)?)))
        .collect()
}
