#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use mqttz::crypto::{derive_storage_key, HukSeed};
use mqttz::protocol::ClientId;
use mqttz::trusted::testing;

struct Fixture {
    store: testing::SecureStore,
    record_path: std::path::PathBuf,
    id: ClientId,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("mqttz-fuzz-store-{}", std::process::id()));
        std::fs::create_dir_all(&dir).expect("fuzz scratch dir");
        let storage_key = derive_storage_key(&HukSeed::from_bytes([0x77; 32]));
        let store = testing::open_store(&dir, &storage_key).expect("open store");
        let id = ClientId::new("fuzzed").expect("valid id");
        let record_path = testing::store_record_path(&store, &id);
        Fixture {
            store,
            record_path,
            id,
        }
    })
}

fuzz_target!(|data: &[u8]| {
    // A sealed record is untrusted disk input: arbitrary bytes in the
    // record file must unseal to a key or fail cleanly, never panic.
    let fx = fixture();
    std::fs::write(&fx.record_path, data).expect("write candidate record");
    let _ = testing::store_unseal(&fx.store, &fx.id);
});
