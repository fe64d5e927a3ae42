//! Seeded synthetic interaction logs with a planted, documented signal.
//!
//! Items are grouped into clusters that share leaf category, first-level
//! category, brand family and shop, so side information is informative.
//! Two signals can be planted:
//!
//! * `Transitions`: inside a cluster the items form a cycle and a session
//!   walks along it, so the next item is a function of the current one
//!   (up to `noise_rate` uniformly random jumps).
//! * `LongTermPreference`: every user has one preferred cluster. Sessions
//!   open with a few items from a shared hub pool (the fed test prefix
//!   therefore says nothing about the user) and continue inside the
//!   preferred cluster. With probability `explore_rate` a session instead
//!   opens on an item of a random other cluster and stays there.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::event::InteractionEvent;
use crate::data::examples::prefix_len;
use crate::data::history::SECONDS_PER_DAY;
use crate::error::{Error, Result};
use crate::init::rng_for;

/// 2018-12-01T00:00:00Z
pub const DEFAULT_START_TS: i64 = 1_543_622_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantedPattern {
    Transitions,
    LongTermPreference { hub_items: usize, explore_rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub events_per_user: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    pub days: u32,
    pub noise_rate: f64,
    pub pattern: PlantedPattern,
    #[serde(default = "default_start")]
    pub start_ts: i64,
}

fn default_start() -> i64 {
    DEFAULT_START_TS
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 500,
            items: 200,
            clusters: 20,
            events_per_user: 50,
            min_session_len: 3,
            max_session_len: 4,
            days: 8,
            noise_rate: 0.1,
            pattern: PlantedPattern::Transitions,
            start_ts: DEFAULT_START_TS,
        }
    }
}

/// Ground truth about what was planted, written next to the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub seed: u64,
    pub config: SyntheticConfig,
    pub records: usize,
    pub item_cluster: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub successor: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub preferred_cluster: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hub_items: Vec<String>,
}

pub fn item_name(k: usize) -> String {
    format!("i{k:05}")
}

pub fn user_name(k: usize) -> String {
    format!("u{k:05}")
}

const AGE_BANDS: [&str; 4] = ["18-24", "25-34", "35-44", "45+"];
const GENDERS: [&str; 2] = ["f", "m"];

struct Catalog {
    /// Items of each cluster, in id order.
    clusters: Vec<Vec<usize>>,
    cluster_of: Vec<Option<usize>>,
    hub: Vec<usize>,
}

impl Catalog {
    fn new(config: &SyntheticConfig) -> Result<Self> {
        let hub_n = match config.pattern {
            PlantedPattern::LongTermPreference { hub_items, .. } => hub_items,
            PlantedPattern::Transitions => 0,
        };
        let clustered = config.items.saturating_sub(hub_n);
        if config.clusters == 0 || clustered < config.clusters {
            return Err(Error::Config(format!(
                "{} items cannot fill {} clusters plus {hub_n} hub items",
                config.items, config.clusters
            )));
        }
        let mut clusters = vec![Vec::new(); config.clusters];
        let mut cluster_of = vec![None; config.items];
        for j in 0..clustered {
            let c = j * config.clusters / clustered;
            clusters[c].push(hub_n + j);
            cluster_of[hub_n + j] = Some(c);
        }
        Ok(Catalog {
            clusters,
            cluster_of,
            hub: (0..hub_n).collect(),
        })
    }

    fn successor(&self, item: usize) -> usize {
        let c = self.cluster_of[item].expect("clustered item");
        let members = &self.clusters[c];
        let pos = members.iter().position(|&m| m == item).expect("member");
        members[(pos + 1) % members.len()]
    }

    fn event(&self, user: &str, item: usize, ts: i64, profile: &BTreeMap<String, String>) -> InteractionEvent {
        let mut e = InteractionEvent::new(user, item_name(item), ts);
        match self.cluster_of[item] {
            Some(c) => {
                e.leaf_category = Some(format!("leaf{c:03}"));
                e.category = Some(format!("cate{:03}", c / 2));
                e.brand = Some(format!("brand{c:03}-{}", item % 2));
                e.shop = Some(format!("shop{c:03}"));
            }
            None => {
                e.leaf_category = Some("leaf-hub".into());
                e.category = Some("cate-hub".into());
                e.brand = Some(format!("brand-hub-{}", item % 3));
                e.shop = Some("shop-hub".into());
            }
        }
        e.profile = profile.clone();
        e
    }
}

fn validate(config: &SyntheticConfig) -> Result<()> {
    if config.users == 0 || config.events_per_user == 0 || config.days == 0 {
        return Err(Error::Config("users, events_per_user and days must be positive".into()));
    }
    if config.min_session_len == 0 || config.min_session_len > config.max_session_len {
        return Err(Error::Config("need 1 <= min_session_len <= max_session_len".into()));
    }
    if !(0.0..=1.0).contains(&config.noise_rate) {
        return Err(Error::Config("noise_rate must be in [0, 1]".into()));
    }
    if let PlantedPattern::LongTermPreference { hub_items, explore_rate } = config.pattern {
        if hub_items == 0 || !(0.0..=1.0).contains(&explore_rate) {
            return Err(Error::Config("need hub_items > 0 and explore_rate in [0, 1]".into()));
        }
        if config.clusters < 2 {
            return Err(Error::Config("long-term preference needs at least two clusters".into()));
        }
    }
    Ok(())
}

/// Generates `users × events_per_user` events, sorted by user then time.
pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<(Vec<InteractionEvent>, SyntheticManifest)> {
    validate(config)?;
    let catalog = Catalog::new(config)?;
    let mut rng = rng_for(seed, 7);
    let mut events = Vec::with_capacity(config.users * config.events_per_user);
    let mut manifest = SyntheticManifest {
        seed,
        config: config.clone(),
        records: 0,
        item_cluster: catalog
            .cluster_of
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (item_name(i), c)))
            .collect(),
        successor: BTreeMap::new(),
        preferred_cluster: BTreeMap::new(),
        hub_items: catalog.hub.iter().map(|&i| item_name(i)).collect(),
    };
    if config.pattern == PlantedPattern::Transitions {
        for c in &catalog.clusters {
            for &i in c {
                manifest.successor.insert(item_name(i), item_name(catalog.successor(i)));
            }
        }
    }

    for u in 0..config.users {
        let user = user_name(u);
        let profile = BTreeMap::from([
            ("user_id".to_string(), user.clone()),
            ("age_band".to_string(), AGE_BANDS.choose(&mut rng).unwrap().to_string()),
            ("gender".to_string(), GENDERS.choose(&mut rng).unwrap().to_string()),
        ]);
        let favourite = rng.random_range(0..config.clusters);
        let second = rng.random_range(0..config.clusters);
        if matches!(config.pattern, PlantedPattern::LongTermPreference { .. }) {
            manifest.preferred_cluster.insert(user.clone(), favourite);
        }

        let mut lengths = Vec::new();
        let mut remaining = config.events_per_user;
        while remaining > 0 {
            let len = rng
                .random_range(config.min_session_len..=config.max_session_len)
                .min(remaining);
            lengths.push(len);
            remaining -= len;
        }

        let n_sessions = lengths.len();
        let days = config.days as usize;
        let mut per_day = vec![0usize; days];
        for k in 0..n_sessions {
            per_day[k * days / n_sessions] += 1;
        }
        let mut slot_in_day = vec![0usize; days];

        for (k, &len) in lengths.iter().enumerate() {
            let day = k * days / n_sessions;
            let spacing = SECONDS_PER_DAY / (per_day[day] as i64 + 1);
            let mut ts = config.start_ts
                + day as i64 * SECONDS_PER_DAY
                + spacing * (slot_in_day[day] as i64 + 1)
                + rng.random_range(0..60);
            slot_in_day[day] += 1;

            let items = match &config.pattern {
                PlantedPattern::Transitions => {
                    let cluster = if rng.random_bool(0.5) { favourite } else { second };
                    transition_walk(&catalog, cluster, len, config.noise_rate, &mut rng)
                }
                PlantedPattern::LongTermPreference { explore_rate, .. } => {
                    preference_session(&catalog, favourite, len, config.noise_rate, *explore_rate, &mut rng)
                }
            };
            for item in items {
                events.push(catalog.event(&user, item, ts, &profile));
                ts += rng.random_range(20..300);
            }
        }
    }
    manifest.records = events.len();
    Ok((events, manifest))
}

fn transition_walk(catalog: &Catalog, cluster: usize, len: usize, noise: f64, rng: &mut impl Rng) -> Vec<usize> {
    let all = catalog.cluster_of.len();
    let mut item = *catalog.clusters[cluster].choose(rng).unwrap();
    let mut out = vec![item];
    while out.len() < len {
        item = if rng.random_bool(noise) {
            rng.random_range(0..all)
        } else {
            catalog.successor(item)
        };
        out.push(item);
    }
    out
}

fn preference_session(
    catalog: &Catalog,
    favourite: usize,
    len: usize,
    noise: f64,
    explore_rate: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n_clusters = catalog.clusters.len();
    let opening = prefix_len(len, 0.25);
    let explore = rng.random_bool(explore_rate);
    let cluster = if explore {
        (favourite + rng.random_range(1..n_clusters)) % n_clusters
    } else {
        favourite
    };
    let mut out: Vec<usize> = Vec::with_capacity(len);
    if explore {
        out.push(*catalog.clusters[cluster].choose(rng).unwrap());
    }
    while out.len() < opening {
        out.push(*catalog.hub.choose(rng).unwrap());
    }
    let mut pool = catalog.clusters[cluster].clone();
    pool.shuffle(rng);
    let mut pool = pool.into_iter().cycle();
    while out.len() < len {
        let item = if rng.random_bool(noise) {
            let c = rng.random_range(0..n_clusters);
            *catalog.clusters[c].choose(rng).unwrap()
        } else {
            pool.next().unwrap()
        };
        out.push(item);
    }
    out
}
