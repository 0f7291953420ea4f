#![no_main]

use abrnet::train::{generate_synthetic, SyntheticSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = serde_json::from_slice::<SyntheticSpec>(data) else {
        return;
    };
    // keep allocations small
    if spec.n > 16 || spec.d_l > 16 || spec.samples > 256 || spec.clusters.len() > 8 {
        return;
    }
    if let Ok(ds) = generate_synthetic(&spec) {
        assert_eq!(ds.len(), spec.samples);
    }
});
