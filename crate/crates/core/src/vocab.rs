//! Value-to-index maps for item and profile features.
//!
//! Index 0 of every feature is reserved for unknown values. Known values
//! are numbered from 1 in lexicographic order, so vocabularies built from
//! the same data are identical regardless of input order.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::event::{InteractionEvent, ItemFeature};
use crate::data::history::UserHistory;

pub const OOV: usize = 0;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureVocab {
    values: Vec<String>,
    index: HashMap<String, usize>,
}

impl FeatureVocab {
    pub fn from_values<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = values.into_iter().map(Into::into).collect();
        let values: Vec<String> = sorted.into_iter().collect();
        let index = values.iter().enumerate().map(|(i, v)| (v.clone(), i + 1)).collect();
        FeatureVocab { values, index }
    }

    /// Number of indices including the unknown slot.
    pub fn size(&self) -> usize {
        self.values.len() + 1
    }

    pub fn lookup(&self, value: Option<&str>) -> usize {
        value.and_then(|v| self.index.get(v).copied()).unwrap_or(OOV)
    }

    pub fn value(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.values.get(i)).map(String::as_str)
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }
}

impl Serialize for FeatureVocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.values.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureVocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<String>::deserialize(d)?;
        let n = values.len();
        let v = FeatureVocab::from_values(values);
        if v.values.len() != n {
            return Err(serde::de::Error::custom("vocabulary values must be distinct"));
        }
        Ok(v)
    }
}

/// Vocabularies for every item and profile feature, plus training-set item
/// frequencies used to rank items for negative sampling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub items: BTreeMap<String, FeatureVocab>,
    pub profile: BTreeMap<String, FeatureVocab>,
    /// Occurrences of each item-id index in the training sessions.
    pub item_counts: Vec<u64>,
}

impl Vocab {
    pub fn build(histories: &[UserHistory], profile_features: &[String]) -> Vocab {
        let events = || histories.iter().flat_map(|h| h.short_term.iter());
        let mut items = BTreeMap::new();
        for f in ItemFeature::ALL {
            let mut values: Vec<&str> = events().filter_map(|e| e.feature(f)).collect();
            for h in histories {
                values.extend(h.long_term.subset(f).iter().map(String::as_str));
            }
            items.insert(f.name().to_string(), FeatureVocab::from_values(values));
        }
        let mut profile = BTreeMap::new();
        for p in profile_features {
            let values = histories.iter().filter_map(|h| profile_value(&h.user_id, &h.profile, p));
            profile.insert(p.clone(), FeatureVocab::from_values(values));
        }
        let ids = &items[ItemFeature::Id.name()];
        let mut item_counts = vec![0u64; ids.size()];
        for e in events() {
            item_counts[ids.lookup(Some(&e.item_id))] += 1;
        }
        Vocab {
            items,
            profile,
            item_counts,
        }
    }

    pub fn item(&self, f: ItemFeature) -> &FeatureVocab {
        &self.items[f.name()]
    }

    pub fn ids(&self) -> &FeatureVocab {
        self.item(ItemFeature::Id)
    }

    pub fn num_items(&self) -> usize {
        self.ids().size()
    }

    pub fn item_index(&self, item_id: &str) -> usize {
        self.ids().lookup(Some(item_id))
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        self.ids().value(index)
    }

    pub fn event_index(&self, e: &InteractionEvent, f: ItemFeature) -> usize {
        self.item(f).lookup(e.feature(f))
    }

    pub fn profile_index(&self, user_id: &str, profile: &BTreeMap<String, String>, feature: &str) -> usize {
        self.profile
            .get(feature)
            .map_or(OOV, |v| v.lookup(profile_value(user_id, profile, feature)))
    }

    /// Item-id indices (excluding the unknown slot) by descending training
    /// frequency, ties by ascending index.
    pub fn frequency_rank(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (1..self.num_items()).collect();
        order.sort_by(|&a, &b| self.item_counts[b].cmp(&self.item_counts[a]).then(a.cmp(&b)));
        order
    }

    pub fn check(&self, profile_features: &[String]) -> crate::Result<()> {
        for f in ItemFeature::ALL {
            if !self.items.contains_key(f.name()) {
                return Err(crate::Error::Data(format!("vocabulary lacks item feature {}", f.name())));
            }
        }
        if let Some(p) = profile_features.iter().find(|p| !self.profile.contains_key(*p)) {
            return Err(crate::Error::Data(format!("vocabulary lacks profile feature {p}")));
        }
        if self.item_counts.len() != self.num_items() {
            return Err(crate::Error::Data("item count table does not match the id vocabulary".into()));
        }
        Ok(())
    }
}

/// `user_id` falls back to the history's owner when the profile omits it.
fn profile_value<'a>(user_id: &'a str, profile: &'a BTreeMap<String, String>, feature: &str) -> Option<&'a str> {
    match profile.get(feature) {
        Some(v) => Some(v),
        None if feature == "user_id" => Some(user_id),
        None => None,
    }
}
