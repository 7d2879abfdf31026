#![no_main]

use libfuzzer_sys::fuzz_target;

use collagan::tensor::snapshot::Snapshot;

fuzz_target!(|data: &[u8]| {
    // Decoding arbitrary bytes must never panic or over-allocate.
    if let Ok(snap) = Snapshot::from_bytes(data) {
        // A successfully decoded snapshot re-encodes to the same bytes.
        let encoded = snap.to_bytes();
        assert_eq!(encoded, data, "snapshot encoding is not canonical");
    }
});
