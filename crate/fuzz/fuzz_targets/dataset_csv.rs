#![no_main]

use abrnet::loss::{balance_weights, relation_stats};
use abrnet::train::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::read_csv(data) {
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let back = Dataset::read_csv(out.as_slice()).unwrap();
        assert_eq!(back.len(), ds.len());
        let labels = ds.labels();
        let _ = relation_stats(&labels);
        let _ = balance_weights(&labels);
    }
});
