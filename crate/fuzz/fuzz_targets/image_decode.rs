#![no_main]

use libfuzzer_sys::fuzz_target;
use panosal::data::{decode_image, decode_mask, edge_from_mask};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert_eq!(img.shape()[0], 3);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    if let Ok(mask) = decode_mask(data) {
        let edge = edge_from_mask(&mask).expect("decoded masks are binary");
        assert!(edge.data().iter().zip(mask.data()).all(|(e, m)| e <= m));
    }
});
