#![no_main]

use libfuzzer_sys::fuzz_target;
use priorloc::pipeline::SceneSpec;

fuzz_target!(|data: &[u8]| {
    let _ = SceneSpec::from_json(data);
});
