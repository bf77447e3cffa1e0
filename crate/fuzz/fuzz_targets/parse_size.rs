#![no_main]

use libfuzzer_sys::fuzz_target;
use lwplg::parse::{parse_size, parse_sizes};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((h, w)) = parse_size(text) {
        assert!(h > 0 && w > 0);
    }
    if let Ok(sizes) = parse_sizes(text) {
        assert!(!sizes.is_empty());
    }
});
