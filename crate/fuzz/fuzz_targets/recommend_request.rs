#![no_main]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use seqmatch::config::TrainingConfig;
use seqmatch::data::dataset::PrepareRules;
use seqmatch::data::{InteractionEvent, LongTerm, UserHistory};
use seqmatch::model::Model;
use seqmatch::recommend::{RecommendRequest, Recommender};
use seqmatch::vocab::Vocab;

fn recommender() -> &'static Recommender {
    static REC: OnceLock<Recommender> = OnceLock::new();
    REC.get_or_init(|| {
        let events = (0..6).map(|i| InteractionEvent::new("u", format!("i{i}"), i * 10)).collect();
        let h = UserHistory {
            user_id: "u".into(),
            profile: BTreeMap::new(),
            short_term: events,
            long_term: LongTerm::default(),
        };
        let config = TrainingConfig {
            d: 8,
            heads: 2,
            ..TrainingConfig::default()
        };
        let vocab = Vocab::build(&[h], &config.profile_features);
        Recommender::new(Model::new(config, vocab).unwrap(), PrepareRules::default())
    })
}

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = serde_json::from_slice::<RecommendRequest>(data) {
        if req.n <= 64 {
            if let Ok(items) = recommender().recommend(&req) {
                assert!(items.len() <= req.n);
            }
        }
    }
});
