#![no_main]
use libfuzzer_sys::fuzz_target;
use thermdiff::io::{decode_pgm, encode_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(raster) = decode_pgm(data) {
        let again = decode_pgm(&encode_pgm(&raster)).expect("re-encoded raster must decode");
        assert_eq!(raster, again);
    }
});
