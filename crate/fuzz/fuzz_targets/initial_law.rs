#![no_main]

use libfuzzer_sys::fuzz_target;
use mckv::models::InitialLaw;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(law) = InitialLaw::parse(text) {
        assert!(law.dim() > 0);
    }
});
