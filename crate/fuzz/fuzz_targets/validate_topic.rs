#![no_main]

use libfuzzer_sys::fuzz_target;
use mqttz::protocol::{validate_topic, ClientId};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = validate_topic(s);
        let _ = ClientId::new(s);
    }
});
