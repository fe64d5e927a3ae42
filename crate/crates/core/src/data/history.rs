use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::event::{InteractionEvent, ItemFeature};
use crate::data::session::Session;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRules {
    pub lookback_days: u32,
    pub longterm_cap: usize,
}

impl Default for HistoryRules {
    fn default() -> Self {
        HistoryRules {
            lookback_days: 7,
            longterm_cap: 20,
        }
    }
}

/// Per-feature long-term subsets, newest value first, deduplicated.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongTerm {
    #[serde(default, rename = "id")]
    pub ids: Vec<String>,
    #[serde(default)]
    pub leaf_category: Vec<String>,
    #[serde(default, rename = "first_level_category")]
    pub category: Vec<String>,
    #[serde(default)]
    pub brand: Vec<String>,
    #[serde(default)]
    pub shop: Vec<String>,
}

impl LongTerm {
    pub fn subset(&self, f: ItemFeature) -> &[String] {
        match f {
            ItemFeature::Id => &self.ids,
            ItemFeature::LeafCategory => &self.leaf_category,
            ItemFeature::Category => &self.category,
            ItemFeature::Brand => &self.brand,
            ItemFeature::Shop => &self.shop,
        }
    }

    fn subset_mut(&mut self, f: ItemFeature) -> &mut Vec<String> {
        match f {
            ItemFeature::Id => &mut self.ids,
            ItemFeature::LeafCategory => &mut self.leaf_category,
            ItemFeature::Category => &mut self.category,
            ItemFeature::Brand => &mut self.brand,
            ItemFeature::Shop => &mut self.shop,
        }
    }

    pub fn is_empty(&self) -> bool {
        ItemFeature::ALL.iter().all(|&f| self.subset(f).is_empty())
    }

    /// Builds subsets from events given newest first. Only events strictly
    /// before `start` and no older than `start - lookback` contribute.
    pub fn from_events<'a>(
        newest_first: impl IntoIterator<Item = &'a InteractionEvent>,
        start: i64,
        rules: &HistoryRules,
    ) -> LongTerm {
        let horizon = start - i64::from(rules.lookback_days) * SECONDS_PER_DAY;
        let mut out = LongTerm::default();
        let mut seen: [HashSet<&str>; 5] = Default::default();
        for e in newest_first {
            if e.timestamp >= start || e.timestamp < horizon {
                continue;
            }
            for f in ItemFeature::ALL {
                let Some(v) = e.feature(f) else { continue };
                let list = out.subset_mut(f);
                if list.len() < rules.longterm_cap && seen[f.index()].insert(v) {
                    list.push(v.to_string());
                }
            }
        }
        out
    }
}

/// A user's short-term session with the long-term behaviors preceding it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    #[serde(default)]
    pub profile: BTreeMap<String, String>,
    pub short_term: Vec<InteractionEvent>,
    #[serde(default)]
    pub long_term: LongTerm,
}

impl UserHistory {
    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.short_term.iter().map(|e| e.item_id.as_str())
    }
}

/// Most recent nonempty profile among the given events.
pub fn latest_profile<'a>(events: impl DoubleEndedIterator<Item = &'a InteractionEvent>) -> BTreeMap<String, String> {
    events
        .rev()
        .find(|e| !e.profile.is_empty())
        .map(|e| e.profile.clone())
        .unwrap_or_default()
}

/// History whose short-term part is `sessions[index]`, with long-term
/// subsets drawn from the sessions before it.
pub fn history_at(sessions: &[Session], index: usize, rules: &HistoryRules) -> UserHistory {
    let short = &sessions[index];
    let prior = sessions[..index].iter().rev().flat_map(|s| s.events.iter().rev());
    let long_term = LongTerm::from_events(prior, short.start(), rules);
    let profile = latest_profile(sessions[..=index].iter().flat_map(|s| s.events.iter()));
    UserHistory {
        user_id: short.user_id.clone(),
        profile,
        short_term: short.events.clone(),
        long_term,
    }
}

/// One history per user: the user's latest session is the short-term part.
/// `sessions` may mix users but must be chronological within each user.
pub fn build_user_histories(sessions: &[Session], rules: &HistoryRules) -> Vec<UserHistory> {
    let mut by_user: indexmap::IndexMap<&str, Vec<Session>> = indexmap::IndexMap::new();
    for s in sessions.iter().filter(|s| !s.is_empty()) {
        by_user.entry(s.user_id.as_str()).or_default().push(s.clone());
    }
    by_user
        .values()
        .map(|user_sessions| history_at(user_sessions, user_sessions.len() - 1, rules))
        .collect()
}
