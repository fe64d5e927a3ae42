//! Online-style prediction: raw events in, ranked items out. Shared by the
//! offline `recommend` command, evaluation and the HTTP service.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::dataset::PrepareRules;
use crate::data::event::InteractionEvent;
use crate::data::history::{latest_profile, LongTerm};
use crate::data::session::segment_sessions;
use crate::error::{Error, Result};
use crate::matching::{ItemIndex, ScoredItem};
use crate::model::Model;

const ANONYMOUS: &str = "anonymous";

/// One submitted behavior, in the same field naming as the event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestEvent {
    pub item_id: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    #[serde(default, rename = "leaf_cate", skip_serializing_if = "Option::is_none")]
    pub leaf_category: Option<String>,
    #[serde(default, rename = "cate", skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shop: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    #[serde(default)]
    pub profile: BTreeMap<String, String>,
    pub events: Vec<RequestEvent>,
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_n() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub items: Vec<ScoredItem>,
    pub model_version: String,
    pub latency_ms: f64,
}

impl From<&InteractionEvent> for RequestEvent {
    fn from(e: &InteractionEvent) -> Self {
        RequestEvent {
            item_id: e.item_id.clone(),
            timestamp: e.timestamp,
            leaf_category: e.leaf_category.clone(),
            category: e.category.clone(),
            brand: e.brand.clone(),
            shop: e.shop.clone(),
        }
    }
}

/// A loaded model ready to answer requests. Immutable, so one instance can
/// serve concurrent callers.
#[derive(Clone, Debug)]
pub struct Recommender {
    model: Model,
    index: ItemIndex,
    rules: PrepareRules,
    version: String,
}

impl Recommender {
    pub fn new(model: Model, rules: PrepareRules) -> Recommender {
        let index = ItemIndex::from_model(&model);
        let version = model.config().hash();
        Recommender {
            model,
            index,
            rules,
            version,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Recommender {
        Recommender::new(ck.model, ck.rules.unwrap_or_default())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn index(&self) -> &ItemIndex {
        &self.index
    }

    pub fn rules(&self) -> &PrepareRules {
        &self.rules
    }

    /// Config hash of the loaded model.
    pub fn version(&self) -> &str {
        &self.version
    }

    /// Behavior vector after the last prefix event.
    pub fn behavior_vector(
        &self,
        user_id: &str,
        profile: &BTreeMap<String, String>,
        prefix: &[InteractionEvent],
        long_term: &LongTerm,
    ) -> Result<Vec<f64>> {
        let feats = self.model.featurize(user_id, profile, prefix, long_term);
        self.model.behavior_vector(&feats)
    }

    /// Top `n` items for a prepared prefix, skipping items already in it.
    pub fn rank(
        &self,
        user_id: &str,
        profile: &BTreeMap<String, String>,
        prefix: &[InteractionEvent],
        long_term: &LongTerm,
        n: usize,
    ) -> Result<Vec<ScoredItem>> {
        let o = self.behavior_vector(user_id, profile, prefix, long_term)?;
        let seen: HashSet<usize> = prefix.iter().map(|e| self.index.index_of(&e.item_id)).collect();
        self.index.retrieve(&o, n, &seen)
    }

    /// Sessionizes the submitted events: the latest session is the
    /// short-term input and everything before it feeds the long-term
    /// subsets.
    pub fn recommend(&self, req: &RecommendRequest) -> Result<Vec<ScoredItem>> {
        if req.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let s = self.sessionize(req)?;
        self.rank(&s.user_id, &s.profile, &s.short_term, &s.long_term, req.n)
    }

    /// Attention weights of every head, the user attention and the gate for
    /// the latest session of a request.
    pub fn inspect_attention(&self, req: &RecommendRequest) -> Result<AttentionDump> {
        let s = self.sessionize(req)?;
        let feats = self.model.featurize(&s.user_id, &s.profile, &s.short_term, &s.long_term);
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let trace = self.model.forward::<rand_chacha::ChaCha8Rng>(&tape, &bound, &feats, None)?;
        let rows = |v: Var| {
            let t = tape.value(v);
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()
        };
        Ok(AttentionDump {
            model_version: self.version.clone(),
            items: s.short_term.iter().map(|e| e.item_id.clone()).collect(),
            heads: trace.head_weights.iter().map(|&h| rows(h)).collect(),
            user_attention: trace.user_weights.map(rows),
            gate: trace.gate.map(rows),
        })
    }

    /// Applies the session rules to a request's events.
    pub fn sessionize(&self, req: &RecommendRequest) -> Result<Sessionized> {
        if req.events.is_empty() {
            return Err(Error::InvalidArgument("no events: cannot build a short-term session".into()));
        }
        let user = req.user_id.clone().unwrap_or_else(|| ANONYMOUS.to_string());
        let mut events: Vec<InteractionEvent> = req
            .events
            .iter()
            .map(|r| {
                let mut e = InteractionEvent::new(user.clone(), r.item_id.clone(), r.timestamp);
                e.leaf_category = r.leaf_category.clone();
                e.category = r.category.clone();
                e.brand = r.brand.clone();
                e.shop = r.shop.clone();
                e.profile = req.profile.clone();
                e.validate().map(|_| e)
            })
            .collect::<Result<_>>()?;
        events.sort_by_key(|e| e.timestamp);
        let sessions = segment_sessions(&events, &self.rules.session)?;
        let last = sessions.last().expect("nonempty events give a session");
        let start = last.start();
        let long = LongTerm::from_events(events.iter().rev(), start, &self.rules.history);
        let profile = if req.profile.is_empty() {
            latest_profile(events.iter())
        } else {
            req.profile.clone()
        };
        Ok(Sessionized {
            user_id: user,
            profile,
            short_term: last.events.clone(),
            long_term: long,
        })
    }
}

/// A request split into short-term session and long-term subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sessionized {
    pub user_id: String,
    pub profile: BTreeMap<String, String>,
    pub short_term: Vec<InteractionEvent>,
    pub long_term: LongTerm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub model_version: String,
    /// Items of the latest session, in order.
    pub items: Vec<String>,
    /// `heads[h][t][j]`: weight position `t` puts on position `j` in head `h`.
    pub heads: Vec<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_attention: Option<Vec<Vec<f64>>>,
    /// Fusion gate per position, when the model has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<Vec<Vec<f64>>>,
}
