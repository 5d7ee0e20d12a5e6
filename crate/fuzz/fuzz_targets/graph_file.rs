#![no_main]

use libfuzzer_sys::fuzz_target;
use roadcast::graphmodel::{parse_graph, write_graph};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(g) = parse_graph(text, "fuzz") {
        let written = write_graph(&g);
        let again = parse_graph(&written, "rewritten").expect("written graph parses");
        assert_eq!(write_graph(&again), written);
    }
});
