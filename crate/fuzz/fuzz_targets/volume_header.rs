#![no_main]
use libfuzzer_sys::fuzz_target;
use mvtt::phantom::VolumeHeader;

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = VolumeHeader::parse(data) {
        // Validated headers never overflow their payload size.
        let _ = h.payload_bytes();
        assert!(h.voxels() > 0);
    }
});
