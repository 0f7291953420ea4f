#![no_main]

use abrnet::model::{forward, Checkpoint, FeatureSet, Mode};
use abrnet::numeric::Matrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(ckpt) = Checkpoint::from_json(text) else {
        return;
    };
    let Ok(params) = ckpt.params() else {
        return;
    };
    let cfg = &ckpt.config;
    if cfg.n.saturating_mul(cfg.d_l) > 4096 {
        return;
    }
    if let Ok(f) = FeatureSet::new(Matrix::zeros(cfg.n, cfg.d_l)) {
        let _ = forward(&f, &params, cfg, &Mode::Eval);
    }
});
