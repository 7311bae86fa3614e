#![no_main]

use libfuzzer_sys::fuzz_target;
use mckv::models::Payoff;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(payoff) = Payoff::parse(text) {
        let _ = payoff.eval(&[0.5]);
    }
});
