#![no_main]

use libfuzzer_sys::fuzz_target;
use lwplg::model::{decode_weights, encode_weights};

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode_weights::<f32>(data) {
        assert_eq!(encode_weights(&store), data);
    }
    if let Ok(store) = decode_weights::<f64>(data) {
        assert_eq!(encode_weights(&store), data);
    }
});
