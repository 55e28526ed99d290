#![no_main]

use libfuzzer_sys::fuzz_target;
use reid_core::datasets::{parse_market_filename, Layout};

fuzz_target!(|data: &[u8]| {
    let Ok(name) = std::str::from_utf8(data) else {
        return;
    };
    let Ok((pid, cam)) = parse_market_filename(name) else {
        return;
    };
    assert!(cam >= 1);
    // Whichever grammar matched, a rendered name must parse back the same.
    for layout in [Layout::Market, Layout::Duke] {
        let rendered = layout.format(pid, cam, 1, "jpg");
        assert_eq!(layout.parse(&rendered).unwrap(), (pid, cam), "{rendered}");
    }
});
