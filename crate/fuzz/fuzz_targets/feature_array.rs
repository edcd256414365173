#![no_main]

use libfuzzer_sys::fuzz_target;
use tfcse::features::array;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = array::decode(data) {
        assert_eq!(t.data().len(), t.dims().iter().product::<usize>());
        assert_eq!(array::encode(&t), data);
    }
});
