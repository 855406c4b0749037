#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(record) = segbert::features::alignment::parse(data) {
        // accepted records must re-parse from their canonical form
        let canonical = record.serialize();
        let reparsed = segbert::features::alignment::parse(canonical.as_bytes()).expect("canonical form must parse");
        assert_eq!(reparsed, record);
    }
});
