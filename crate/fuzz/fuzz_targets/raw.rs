#![no_main]

use libfuzzer_sys::fuzz_target;
use tfcse::audio::{decode_raw, encode_raw, RawHeader};

// First line is the sidecar header, the rest is sample data.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == b'\n').unwrap_or(data.len());
    let Ok(line) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let Ok(header) = RawHeader::parse(line) else {
        return;
    };
    assert_eq!(RawHeader::parse(&header.line()).ok(), Some(header));
    let body = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(audio) = decode_raw(&header, body) {
        let (h2, bytes) = encode_raw(&audio);
        assert_eq!(h2, header);
        assert_eq!(bytes.len(), body.len());
    }
});
