#![no_main]

use diffpo::checkpoint::{decode_any, decode_binary, encode_binary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_binary(data);
    if let Ok(params) = decode_any(data) {
        let back = decode_binary(&encode_binary(&params)).expect("round trip");
        assert_eq!(back.to_flat().len(), params.to_flat().len());
    }
});
