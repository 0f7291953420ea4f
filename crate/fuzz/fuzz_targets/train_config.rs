#![no_main]

use abrnet::train::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<TrainConfig>(data) {
        if cfg.validate().is_ok() {
            let _ = cfg.model.effective_k();
        }
    }
});
