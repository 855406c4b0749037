#![no_main]
use libfuzzer_sys::fuzz_target;
use segbert::features::melfile;

fuzz_target!(|data: &[u8]| {
    if let Ok((mat, shift)) = melfile::decode(data, melfile::MEL_MAGIC) {
        // accepted payloads are finite and round-trip byte-exactly
        assert!(mat.all_finite());
        assert_eq!(melfile::encode(melfile::MEL_MAGIC, &mat, shift), data);
    }
});
