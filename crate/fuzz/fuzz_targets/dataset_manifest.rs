#![no_main]
use libfuzzer_sys::fuzz_target;
use mvtt::phantom::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = DatasetManifest::from_json(data) {
        for e in &m.volumes {
            assert!(!e.file.contains('/') && !e.file.contains('\\') && e.file != "..");
        }
        let again = DatasetManifest::from_json(&m.to_json()).expect("re-encoded manifest parses");
        assert_eq!(again, m);
    }
});
