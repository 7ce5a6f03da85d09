#![no_main]
use libfuzzer_sys::fuzz_target;
use thermdiff::io::ImageMetadata;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(meta) = ImageMetadata::parse(text) {
        assert_eq!(ImageMetadata::parse(&meta.to_text()).unwrap(), meta);
    }
});
