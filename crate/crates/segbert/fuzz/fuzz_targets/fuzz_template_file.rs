#![no_main]
use libfuzzer_sys::fuzz_target;
use segbert::features::melfile;
use segbert::template::{pad_mask, AcousticTemplate};

fuzz_target!(|data: &[u8]| {
    if let Ok((frames, _)) = melfile::decode(data, melfile::TEMPLATE_MAGIC) {
        let template = AcousticTemplate { frames };
        if template.len() > 0 && template.len() < 1 << 12 {
            // padding must stay inside the template's value envelope
            let padded = pad_mask(&template, 2 * template.len() + 3);
            assert!(padded.min() >= template.frames.min() && padded.max() <= template.frames.max());
        }
    }
});
