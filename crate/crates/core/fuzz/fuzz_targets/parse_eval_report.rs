#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(report) = melodyflow::eval::parse_eval_report(data) {
        let _ = melodyflow::report::render_markdown(&report, Some(&report));
    }
});
