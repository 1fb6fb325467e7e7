#![no_main]

use libfuzzer_sys::fuzz_target;
use panosal::checkpoint::Checkpoint;
use panosal::params::fnv1a;

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::decode(data);
    // Append a valid checksum so mutations reach the body parser.
    let mut fixed = data.to_vec();
    fixed.extend_from_slice(&fnv1a(data).to_le_bytes());
    if let Ok(ck) = Checkpoint::decode(&fixed) {
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(back.encode(), bytes);
    }
});
