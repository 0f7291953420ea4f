//! Replays the fuzz seed corpora, plus deterministic byte mutations of each
//! seed, through the same entry points the fuzz targets drive.

use std::fs;
use std::path::PathBuf;

use abrnet::loss::{balance_weights, relation_stats};
use abrnet::model::{forward, Checkpoint, FeatureSet, Mode};
use abrnet::numeric::Matrix;
use abrnet::train::{generate_synthetic, Dataset, SyntheticSpec, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("seed_")
        })
        .collect();
    paths.sort();
    assert!(!paths.is_empty(), "no seeds for {target}");
    paths.into_iter().map(|p| fs::read(p).unwrap()).collect()
}

fn mutations(seed: &[u8], count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let mut out = vec![seed.to_vec()];
    const BYTES: &[u8] = b"0123456789-.,e{}[]\":\n nNaIf";
    for _ in 0..count {
        let mut m = seed.to_vec();
        for _ in 0..rng.random_range(1..4) {
            if m.is_empty() {
                break;
            }
            let at = rng.random_range(0..m.len());
            match rng.random_range(0..3) {
                0 => m[at] = BYTES[rng.random_range(0..BYTES.len())],
                1 => {
                    m.remove(at);
                }
                _ => m.truncate(at),
            }
        }
        out.push(m);
    }
    out
}

fn each_input(target: &str, f: impl Fn(&[u8])) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in corpus(target) {
        for input in mutations(&seed, 300, &mut rng) {
            f(&input);
        }
    }
}

#[test]
fn dataset_csv_inputs() {
    each_input("dataset_csv", |data| {
        if let Ok(ds) = Dataset::read_csv(data) {
            let mut out = Vec::new();
            ds.write_csv(&mut out).unwrap();
            assert_eq!(Dataset::read_csv(out.as_slice()).unwrap().len(), ds.len());
            let labels = ds.labels();
            let _ = relation_stats(&labels);
            let _ = balance_weights(&labels);
        }
    });
}

#[test]
fn train_config_inputs() {
    each_input("train_config", |data| {
        if let Ok(cfg) = serde_json::from_slice::<TrainConfig>(data) {
            if cfg.validate().is_ok() {
                assert!(cfg.model.effective_k() >= 1);
            }
        }
    });
}

#[test]
fn synth_spec_inputs() {
    each_input("synth_spec", |data| {
        let Ok(spec) = serde_json::from_slice::<SyntheticSpec>(data) else {
            return;
        };
        if spec.n > 16 || spec.d_l > 16 || spec.samples > 256 || spec.clusters.len() > 8 {
            return;
        }
        if let Ok(ds) = generate_synthetic(&spec) {
            assert_eq!(ds.len(), spec.samples);
        }
    });
}

#[test]
fn checkpoint_inputs() {
    each_input("checkpoint", |data| {
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
}
