#![no_main]

use libfuzzer_sys::fuzz_target;
use mqttz::broker::acl::AclTable;

fuzz_target!(|data: &[u8]| {
    // The ACL file is operator input; parsing must never panic.
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = AclTable::parse(text);
    }
});
