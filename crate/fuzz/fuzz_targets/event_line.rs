#![no_main]

use libfuzzer_sys::fuzz_target;
use seqmatch::data::event::parse_event_line;
use seqmatch::data::read_events;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(event) = parse_event_line(text) {
            // accepted events survive a write/read cycle
            let line = serde_json::to_string(&event).unwrap();
            assert_eq!(parse_event_line(&line).unwrap(), event);
        }
    }
    let _ = read_events(data);
});
