#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(audio) = tfcse::audio::decode_wav(data) {
        assert!(audio.num_channels() > 0);
        assert!(audio.channels().iter().all(|c| c.len() == audio.num_samples()));
    }
});
