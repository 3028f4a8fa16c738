#![no_main]

use libfuzzer_sys::fuzz_target;
use priorloc::pipeline::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = RunConfig::from_json(data, &[]) {
        let again = RunConfig::from_json(config.to_json().as_bytes(), &[]).expect("re-parse");
        assert_eq!(again, config);
    }
});
