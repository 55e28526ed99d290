#![no_main]

use libfuzzer_sys::fuzz_target;
use reid_core::eval::kernel::parse_kernel_report;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = parse_kernel_report(text) {
        assert!(report.cmc.contains_key(&1) && report.cmc.contains_key(&20));
    }
});
