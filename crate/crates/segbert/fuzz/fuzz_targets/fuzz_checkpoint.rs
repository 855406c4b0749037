#![no_main]
use libfuzzer_sys::fuzz_target;
use segbert::tensor::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = checkpoint::decode(data) {
        assert_eq!(checkpoint::encode(&tensors), data);
    }
});
