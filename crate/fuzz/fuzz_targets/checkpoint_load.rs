#![no_main]
use libfuzzer_sys::fuzz_target;
use mvtt::network::ModelParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = ModelParams::from_bytes(data) {
        let bytes = p.to_bytes();
        let again = ModelParams::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
