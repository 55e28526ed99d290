#![no_main]

use libfuzzer_sys::fuzz_target;
use reid_core::eval::format::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode(data) {
        assert_eq!(set.person_ids.len(), set.len());
        assert_eq!(encode(&set), data);
    }
});
