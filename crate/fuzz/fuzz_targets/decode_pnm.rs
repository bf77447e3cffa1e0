#![no_main]

use libfuzzer_sys::fuzz_target;
use lwplg::image::{decode_pnm, preprocess};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let x = preprocess(&img, 8).unwrap();
        assert_eq!(x.dims(), &[1, 3, 8, 8]);
    }
});
