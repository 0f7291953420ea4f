use abrnet::loss::{relation_stats, LabelBatch};
use abrnet::model::{
    forward, fusion_weights, relation_coefficients, topk_aggregate, DropoutPlan, FeatureSet,
    FusionParams, Mode, ModelConfig, ModelParams, RelationLayerParams,
};
use abrnet::numeric::{leaky_relu, Matrix};
use abrnet::train::{learning_rate, sample_dropout_subset, EvalReport, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn features_and_layer() -> impl Strategy<Value = (Matrix, Matrix, Matrix)> {
    (1usize..7, 1usize..5, 1usize..4)
        .prop_flat_map(|(n, d, dm)| (matrix(n, d, 3.0), matrix(dm, d, 2.0), matrix(dm, d, 2.0)))
}

fn label_table() -> impl Strategy<Value = (usize, Vec<Vec<u8>>)> {
    (1usize..6, 1usize..40).prop_flat_map(|(n, s)| {
        (
            Just(n),
            prop::collection::vec(prop::collection::vec(0u8..2, n), s),
        )
    })
}

proptest! {
    #[test]
    fn coefficient_rows_are_distributions((f, wq, wk) in features_and_layer()) {
        let fs = FeatureSet::new(f).unwrap();
        let mu = relation_coefficients(&fs, &RelationLayerParams { wq, wk }, 0.01).unwrap().mu;
        for i in 0..mu.rows() {
            let row = mu.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn keeping_every_unit_is_the_dense_product((f, wq, wk) in features_and_layer()) {
        let fs = FeatureSet::new(f.clone()).unwrap();
        let mu = relation_coefficients(&fs, &RelationLayerParams { wq, wk }, 0.01).unwrap();
        let r = topk_aggregate(&fs, &mu, f.rows(), 0.01).unwrap().r;
        let dense = mu.mu.matmul(&f).unwrap().map(|v| leaky_relu(v, 0.01));
        prop_assert!(r.sub(&dense).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn fusion_weights_are_open_unit_interval(r in matrix(4, 3, 2.0), q in matrix(3, 1, 2.0)) {
        let b = fusion_weights(&r, &FusionParams { q0: q }).unwrap();
        prop_assert!(b.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_gives_probabilities(n in 1usize..6, d in 1usize..5, m in 0usize..4, seed in any::<u64>()) {
        let cfg = ModelConfig { n, d_l: d, d_m: 3, m, k: None, t: m.max(1), hidden: 4, ..Default::default() };
        let p = ModelParams::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FeatureSet::new(Matrix::from_fn(n, d, |_, _| rand::Rng::random_range(&mut rng, -2.0..2.0))).unwrap();
        let y = forward(&f, &p, &cfg, &Mode::Eval).unwrap();
        prop_assert_eq!(y.len(), n);
        prop_assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        if m > 0 {
            let all: Vec<usize> = (0..m).collect();
            let plan = DropoutPlan::shared(&all, m, m, n).unwrap();
            prop_assert_eq!(forward(&f, &p, &cfg, &Mode::Train(plan)).unwrap(), y);
        }
    }

    #[test]
    fn relation_stats_invariants((n, rows) in label_table()) {
        let batch = LabelBatch::new(n, rows).unwrap();
        let Ok(s) = relation_stats(&batch) else {
            return Ok(());
        };
        for i in 0..n {
            prop_assert!((s.r[(i, i)] - (1.0 - s.rates[i])).abs() < 1e-12);
            for j in 0..n {
                prop_assert!(s.a[(i, j)] >= -1.0 - 1e-12);
                if s.r[(i, j)] == 0.0 {
                    prop_assert_eq!(s.a[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn f1_is_bounded_and_order_free((n, truth) in label_table(), flips in prop::collection::vec(any::<bool>(), 200)) {
        let pred: Vec<Vec<u8>> = truth
            .iter()
            .enumerate()
            .map(|(s, row)| row.iter().enumerate().map(|(u, &v)| v ^ u8::from(flips[(s * n + u) % 200])).collect())
            .collect();
        let a = EvalReport::from_predictions(&pred, &truth, n);
        prop_assert!(a.per_unit_f1.iter().all(|&f| (0.0..=1.0).contains(&f)));
        let (mut p2, mut t2) = (pred.clone(), truth.clone());
        p2.reverse();
        t2.reverse();
        prop_assert_eq!(EvalReport::from_predictions(&p2, &t2, n), a);
    }

    #[test]
    fn schedule_never_increases(lr0 in 0.0f64..1.0, every in 1usize..5, epoch in 0usize..50) {
        let cfg = TrainConfig { lr0, lr_halve_every: every, ..Default::default() };
        prop_assert!(learning_rate(&cfg, epoch + 1) <= learning_rate(&cfg, epoch));
        prop_assert!(learning_rate(&cfg, epoch) >= 0.0);
    }

    #[test]
    fn dropout_subsets_are_distinct_layers(m in 1usize..9, t_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let t = 1 + ((m - 1) as f64 * t_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = sample_dropout_subset(&mut rng, m, t).unwrap();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), t);
        prop_assert!(s.iter().all(|&l| l < m));
        prop_assert!(DropoutPlan::shared(&s, m, t, 3).is_ok());
    }
}
