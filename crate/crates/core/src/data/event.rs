use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Item feature scales, in the fixed order used for embedding concatenation
/// and long-term subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ItemFeature {
    Id,
    LeafCategory,
    Category,
    Brand,
    Shop,
}

impl ItemFeature {
    pub const ALL: [ItemFeature; 5] = [
        ItemFeature::Id,
        ItemFeature::LeafCategory,
        ItemFeature::Category,
        ItemFeature::Brand,
        ItemFeature::Shop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ItemFeature::Id => "id",
            ItemFeature::LeafCategory => "leaf_category",
            ItemFeature::Category => "first_level_category",
            ItemFeature::Brand => "brand",
            ItemFeature::Shop => "shop",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ItemFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One user-item interaction. Serializes to the newline-delimited log
/// format (`ts`, `leaf_cate`, `cate`, ... field names).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, rename = "leaf_cate", skip_serializing_if = "Option::is_none")]
    pub leaf_category: Option<String>,
    #[serde(default, rename = "cate", skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shop: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub profile: BTreeMap<String, String>,
}

impl InteractionEvent {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, timestamp: i64) -> Self {
        InteractionEvent {
            user_id: user_id.into(),
            item_id: item_id.into(),
            timestamp,
            session_id: None,
            leaf_category: None,
            category: None,
            brand: None,
            shop: None,
            profile: BTreeMap::new(),
        }
    }

    /// Value of an item feature; `Id` is always the item id.
    pub fn feature(&self, f: ItemFeature) -> Option<&str> {
        match f {
            ItemFeature::Id => Some(&self.item_id),
            ItemFeature::LeafCategory => self.leaf_category.as_deref(),
            ItemFeature::Category => self.category.as_deref(),
            ItemFeature::Brand => self.brand.as_deref(),
            ItemFeature::Shop => self.shop.as_deref(),
        }
    }

    /// Map view of the item side features keyed by feature name.
    pub fn item_features(&self) -> BTreeMap<&'static str, &str> {
        ItemFeature::ALL
            .iter()
            .filter_map(|&f| self.feature(f).map(|v| (f.name(), v)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_id.is_empty() {
            return Err(Error::Data("empty user_id".into()));
        }
        if self.item_id.is_empty() {
            return Err(Error::Data("empty item_id".into()));
        }
        if self.timestamp < 0 {
            return Err(Error::Data(format!("negative timestamp {}", self.timestamp)));
        }
        Ok(())
    }
}

/// Parses and validates one log record.
pub fn parse_event_line(line: &str) -> Result<InteractionEvent> {
    let event: InteractionEvent = serde_json::from_str(line)?;
    event.validate()?;
    Ok(event)
}

/// Reads a newline-delimited event log; blank lines are skipped.
pub fn read_events(reader: impl BufRead) -> Result<Vec<InteractionEvent>> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let event = parse_event_line(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

pub fn write_events(mut out: impl std::io::Write, events: &[InteractionEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
