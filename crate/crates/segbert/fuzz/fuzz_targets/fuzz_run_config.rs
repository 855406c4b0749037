#![no_main]
use libfuzzer_sys::fuzz_target;
use segbert::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(text) {
            // accepted configs serialize to a parseable canonical form
            let canonical = cfg.serialize();
            RunConfig::parse(&canonical).expect("canonical config must parse");
        }
    }
});
