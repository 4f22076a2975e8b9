#![no_main]

use libfuzzer_sys::fuzz_target;
use mqttz::protocol::{decode_packet, encode_packet};

fuzz_target!(|data: &[u8]| {
    // Decoding must be total: any input either yields exactly one packet
    // or an error, never a panic. Accepted frames are canonical, so
    // re-encoding must reproduce the input bit for bit.
    if let Ok(packet) = decode_packet(data) {
        let reencoded = encode_packet(&packet).expect("decoded packet re-encodes");
        assert_eq!(reencoded, data);
    }
});
