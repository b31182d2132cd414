#![no_main]

use libfuzzer_sys::fuzz_target;
use posthoc::features::image::decode_pnm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        let _ = img.luma();
    }
});
