#![no_main]
use libfuzzer_sys::fuzz_target;
use thermdiff_cli::records::{parse_records, to_lines};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_records(text) {
        if let Ok(lines) = to_lines(&records) {
            assert_eq!(parse_records(&lines).unwrap(), records);
        }
    }
});
