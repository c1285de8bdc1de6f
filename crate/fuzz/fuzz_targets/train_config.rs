#![no_main]
use libfuzzer_sys::fuzz_target;
use mvtt::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(cfg) = serde_json::from_slice::<TrainConfig>(data) else {
        return;
    };
    // validate() and problems() must agree.
    assert_eq!(cfg.validate().is_ok(), cfg.problems().is_empty());
    let echo = serde_json::to_vec(&cfg).expect("config serialises");
    let back: TrainConfig = serde_json::from_slice(&echo).expect("echo parses");
    assert_eq!(serde_json::to_vec(&back).unwrap(), echo);
});
