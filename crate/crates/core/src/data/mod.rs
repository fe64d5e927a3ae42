//! Interaction logs: parsing, sessions, histories, filtering and examples.

pub mod dataset;
pub mod event;
pub mod examples;
pub mod filter;
pub mod history;
pub mod session;
pub mod synthetic;

pub use dataset::{prepare, read_test, read_train, write_dataset, PrepareRules, PreparedData};
pub use event::{read_events, write_events, InteractionEvent, ItemFeature};
pub use examples::{make_test_cases, make_training_examples, prefix_len, TestCase, TrainingExample};
pub use filter::{filter_dataset, FilterRules};
pub use history::{build_user_histories, history_at, HistoryRules, LongTerm, UserHistory};
pub use session::{segment_by_user, segment_sessions, Session, SessionRules};
