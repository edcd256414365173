#![no_main]

use libfuzzer_sys::fuzz_target;
use tfcse::model::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = checkpoint::decode(data) {
        let again = checkpoint::encode(&model).expect("decoded model encodes");
        let back = checkpoint::decode(&again).expect("re-encoded model decodes");
        assert_eq!(back.config(), model.config());
    }
});
