#![no_main]

use libfuzzer_sys::fuzz_target;
use tfcse::dataset::{format_labels, parse_labels};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_labels(text) {
        for r in &rows {
            assert!(r.onset_seconds >= 0.0 && r.offset_seconds > r.onset_seconds);
        }
        assert_eq!(parse_labels(&format_labels(&rows)).unwrap(), rows);
    }
});
