#![no_main]
use libfuzzer_sys::fuzz_target;
use mvtt::phantom::Volume;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to bytes that decode to the same volume.
    if let Ok(v) = Volume::from_bytes(data) {
        let bytes = v.to_bytes();
        let again = Volume::from_bytes(&bytes).expect("re-encoded volume decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
