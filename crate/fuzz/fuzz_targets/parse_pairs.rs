#![no_main]

use diffpo::preference::{encode_pairs, parse_pairs};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Anything accepted must survive a re-encode.
    if let Ok((Some(meta), pairs)) = parse_pairs(text) {
        let again = parse_pairs(&encode_pairs(meta, &pairs)).expect("re-encoded pairs parse");
        assert_eq!(again.1.len(), pairs.len());
    }
});
