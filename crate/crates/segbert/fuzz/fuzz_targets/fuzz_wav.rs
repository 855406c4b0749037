#![no_main]
use libfuzzer_sys::fuzz_target;
use segbert::features::wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = wav::decode(data) {
        assert!(w.sample_rate > 0);
        // re-encoding a decoded waveform must stay decodable
        let bytes = wav::encode(&w);
        let again = wav::decode(&bytes).expect("re-encoded wav must decode");
        assert_eq!(again.samples.len(), w.samples.len());
    }
});
