#![no_main]

use libfuzzer_sys::fuzz_target;
use roadcast::graphmodel::{parse_manifest, write_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = parse_manifest(text, "fuzz") {
        let again =
            parse_manifest(&write_manifest(&m), "rewritten").expect("written manifest parses");
        assert_eq!(again, m);
    }
});
