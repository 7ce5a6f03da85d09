#![no_main]
use libfuzzer_sys::fuzz_target;
use sha2::{Digest, Sha256};
use thermdiff::denoiser::Checkpoint;

fuzz_target!(|body: &[u8]| {
    // Seal the input so the fuzzer gets past the checksum.
    let mut data = body.to_vec();
    data.extend_from_slice(&Sha256::digest(body));
    if let Ok(ck) = Checkpoint::decode(&data) {
        assert_eq!(ck.encode(), data);
        let _ = ck.restore(None);
    }
});
