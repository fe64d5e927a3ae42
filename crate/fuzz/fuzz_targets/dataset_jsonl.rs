#![no_main]

use libfuzzer_sys::fuzz_target;
use seqmatch::data::dataset::{parse_jsonl, FileKind};
use seqmatch::data::{TestCase, UserHistory};

fuzz_target!(|data: &[u8]| {
    if let Ok((header, rows)) = parse_jsonl::<UserHistory>(data, FileKind::TrainHistories) {
        assert_eq!(header.records, rows.len());
    }
    if let Ok((header, rows)) = parse_jsonl::<TestCase>(data, FileKind::TestCases) {
        assert_eq!(header.records, rows.len());
    }
});
