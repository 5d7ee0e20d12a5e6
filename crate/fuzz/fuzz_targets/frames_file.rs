#![no_main]

use libfuzzer_sys::fuzz_target;
use roadcast::graphmodel::{parse_frames, write_frames};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(frames) = parse_frames(text, "fuzz") {
        // compare serialized forms: missing cells are NaN and never equal
        let written = write_frames(&frames);
        let again = parse_frames(&written, "rewritten").expect("written frames parse");
        assert_eq!(write_frames(&again), written);
    }
});
