#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = priorloc::io::parse_pcd(data) {
        // the ASCII writer is lossless, so whatever parses must round-trip
        let again = priorloc::io::parse_pcd(priorloc::io::write_pcd_ascii(&cloud).as_bytes()).expect("re-parse");
        assert_eq!(again.points, cloud.points);
    }
});
