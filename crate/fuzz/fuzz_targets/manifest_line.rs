#![no_main]

use libfuzzer_sys::fuzz_target;
use reid_core::datasets::ImageRecord;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rec) = serde_json::from_str::<ImageRecord>(line) {
        let text = serde_json::to_string(&rec).unwrap();
        assert_eq!(serde_json::from_str::<ImageRecord>(&text).unwrap(), rec);
    }
});
