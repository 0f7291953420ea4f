use abrnet::model::{
    classify, forward, fuse, fuse_with_dropout, fusion_weights, relation_coefficients,
    run_relation_module, topk_aggregate, ClassifierParams, ClassifierSharing, DropoutPlan,
    FeatureSet, FusionMode, FusionParams, Head, LayerOutput, Mode, ModelConfig, ModelParams,
    RelationCoefficients, RelationLayerParams,
};
use abrnet::numeric::{sigmoid, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fs(rows: Vec<Vec<f64>>) -> FeatureSet {
    FeatureSet::new(Matrix::from_rows(&rows).unwrap()).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn cfg(n: usize, d_l: usize, m: usize) -> ModelConfig {
    ModelConfig {
        n,
        d_l,
        d_m: 3,
        m,
        k: None,
        t: m.clamp(1, 2),
        hidden: 5,
        ..Default::default()
    }
}

#[test]
fn identical_rows_give_uniform_coefficients() {
    let f = fs(vec![vec![0.3, -1.0]; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = RelationLayerParams {
        wq: uniform(&mut rng, 2, 2),
        wk: uniform(&mut rng, 2, 2),
    };
    let mu = relation_coefficients(&f, &layer, 0.01).unwrap();
    for v in mu.mu.as_slice() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let zero_q = RelationLayerParams {
        wq: Matrix::zeros(2, 2),
        ..layer
    };
    let f = fs(vec![vec![1.0, 2.0], vec![-3.0, 0.5]]);
    let mu = relation_coefficients(&f, &zero_q, 0.01).unwrap();
    assert!(mu.mu.as_slice().iter().all(|&v| v == 0.5));
}

#[test]
fn scripted_two_unit_coefficients() {
    let f = fs(vec![vec![1.0], vec![2.0]]);
    let layer = RelationLayerParams {
        wq: Matrix::from_rows(&[vec![1.0]]).unwrap(),
        wk: Matrix::from_rows(&[vec![1.0]]).unwrap(),
    };
    let mu = relation_coefficients(&f, &layer, 0.01).unwrap();
    let (e1, e2) = (1f64.exp(), 2f64.exp());
    assert!((mu.mu[(0, 0)] - e1 / (e1 + e2)).abs() < 1e-15);
    assert!((mu.mu[(0, 1)] - e2 / (e1 + e2)).abs() < 1e-15);
}

#[test]
fn coefficient_shape_errors() {
    let f = fs(vec![vec![1.0, 2.0]]);
    let layer = RelationLayerParams {
        wq: Matrix::zeros(2, 3),
        wk: Matrix::zeros(2, 3),
    };
    assert!(relation_coefficients(&f, &layer, 0.01).is_err());
}

#[test]
fn topk_examples() {
    let f = fs(vec![vec![1.0, 2.0], vec![3.0, 0.5], vec![0.0, 4.0]]);
    let mu = RelationCoefficients {
        mu: Matrix::from_rows(&vec![vec![0.2, 0.5, 0.3]; 3]).unwrap(),
        layer: 0,
    };
    let r = topk_aggregate(&f, &mu, 1, 0.01).unwrap();
    for i in 0..3 {
        assert_eq!(r.r.row(i), &[1.5, 0.25]);
    }
    // k = n keeps the full weighted sum
    let full = topk_aggregate(&f, &mu, 3, 0.01).unwrap();
    assert!((full.r[(0, 0)] - (0.2 + 1.5)).abs() < 1e-15);
    assert!(topk_aggregate(&f, &mu, 0, 0.01).is_err());
    assert!(topk_aggregate(&f, &mu, 4, 0.01).is_err());

    let one = fs(vec![vec![-2.0, 3.0]]);
    let unit = RelationCoefficients {
        mu: Matrix::from_rows(&[vec![1.0]]).unwrap(),
        layer: 0,
    };
    assert_eq!(
        topk_aggregate(&one, &unit, 1, 0.01).unwrap().r.row(0),
        &[-0.02, 3.0]
    );
}

#[test]
fn topk_ties_prefer_lower_index() {
    let f = fs(vec![vec![1.0], vec![10.0], vec![100.0]]);
    let mu = RelationCoefficients {
        mu: Matrix::from_rows(&vec![vec![0.25, 0.25, 0.5]; 3]).unwrap(),
        layer: 0,
    };
    let r = topk_aggregate(&f, &mu, 2, 0.01).unwrap();
    assert_eq!(r.r[(0, 0)], 0.25 * 1.0 + 0.5 * 100.0);
}

#[test]
fn relation_module_layer_count() {
    let c = cfg(4, 3, 4);
    let p = ModelParams::init(&c, 2).unwrap();
    let f = FeatureSet::new(Matrix::from_fn(4, 3, |i, j| (i + j) as f64 * 0.1)).unwrap();
    let outs = run_relation_module(&f, &p.layers, &c).unwrap();
    assert_eq!(outs.len(), 4);
    assert!(outs.iter().all(|o| o.r.shape() == (4, 3)));
    assert!(run_relation_module(&f, &p.layers[..2], &c).is_err());
    let twins = vec![p.layers[0].clone(), p.layers[0].clone()];
    let outs = run_relation_module(&f, &twins, &cfg(4, 3, 2)).unwrap();
    assert_eq!(outs[0], outs[1]);
    assert!(run_relation_module(&f, &[], &cfg(4, 3, 0))
        .unwrap()
        .is_empty());
}

#[test]
fn fusion_weight_examples() {
    let r = Matrix::from_rows(&[vec![3f64.ln(), 0.0], vec![1.0, -1.0]]).unwrap();
    let q = FusionParams {
        q0: Matrix::column(&[1.0, 1.0]),
    };
    let b = fusion_weights(&r, &q).unwrap();
    assert!((b[0] - 0.75).abs() < 1e-15);
    assert_eq!(b[1], 0.5);
    let zero = FusionParams {
        q0: Matrix::zeros(2, 1),
    };
    assert!(fusion_weights(&r, &zero).unwrap().iter().all(|&v| v == 0.5));
}

#[test]
fn fuse_examples() {
    let f = fs(vec![vec![1.0, -2.0], vec![0.5, 4.0]]);
    let zero = FusionParams {
        q0: Matrix::zeros(2, 1),
    };
    assert_eq!(fuse(&f, &[], &zero).unwrap(), f.matrix().scale(0.5));
    let copies = vec![
        LayerOutput {
            r: f.matrix().clone()
        };
        3
    ];
    assert_eq!(fuse(&f, &copies, &zero).unwrap(), f.matrix().scale(2.0));
}

#[test]
fn fuse_two_layers_matches_scripted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = FeatureSet::new(uniform(&mut rng, 3, 4)).unwrap();
    let outs: Vec<LayerOutput> = (0..2)
        .map(|_| LayerOutput {
            r: uniform(&mut rng, 3, 4),
        })
        .collect();
    let q = FusionParams {
        q0: uniform(&mut rng, 4, 1),
    };
    let s = fuse(&f, &outs, &q).unwrap();
    let mut terms = vec![f.matrix().clone()];
    terms.extend(outs.iter().map(|o| o.r.clone()));
    for i in 0..3 {
        for d in 0..4 {
            let mut want = 0.0;
            for x in &terms {
                let z: f64 = (0..4).map(|e| x[(i, e)] * q.q0[(e, 0)]).sum();
                want += x[(i, d)] / (1.0 + (-z).exp());
            }
            assert!((s[(i, d)] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn dropout_scale_and_subset_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = FeatureSet::new(uniform(&mut rng, 2, 3)).unwrap();
    let outs: Vec<LayerOutput> = (0..4)
        .map(|_| LayerOutput {
            r: uniform(&mut rng, 2, 3),
        })
        .collect();
    let q = FusionParams {
        q0: uniform(&mut rng, 3, 1),
    };
    let s = fuse_with_dropout(&f, &outs, &q, &[1, 3], 4, 2).unwrap();
    let base = fuse_with_dropout(&f, &outs, &q, &[1, 3], 4, 2)
        .unwrap()
        .sub(&fuse(&f, &[], &q).unwrap())
        .unwrap();
    let kept = fuse(&f, &[outs[1].clone(), outs[3].clone()], &q)
        .unwrap()
        .sub(&fuse(&f, &[], &q).unwrap())
        .unwrap();
    assert!(base.sub(&kept.scale(2.0)).unwrap().max_abs() < 1e-14);
    assert_eq!(s.shape(), (2, 3));
    assert!(fuse_with_dropout(&f, &outs, &q, &[1], 4, 2).is_err());
    assert!(fuse_with_dropout(&f, &outs, &q, &[1, 1], 4, 2).is_err());
    assert!(fuse_with_dropout(&f, &outs, &q, &[1, 4], 4, 2).is_err());
}

fn zero_head(d: usize, h: usize, out_b: [f64; 2]) -> Head {
    Head {
        hidden_w: Matrix::zeros(h, d),
        hidden_b: Matrix::zeros(1, h),
        out_w: Matrix::zeros(2, h),
        out_b: Matrix::from_vec(1, 2, out_b.to_vec()).unwrap(),
    }
}

#[test]
fn classify_examples() {
    let s = Matrix::from_fn(3, 4, |i, j| i as f64 - j as f64);
    let zero = ClassifierParams {
        sharing: ClassifierSharing::Shared,
        heads: vec![zero_head(4, 5, [0.0, 0.0])],
    };
    assert_eq!(classify(&s, &zero, 0.01).unwrap(), vec![0.5; 3]);
    let biased = ClassifierParams {
        sharing: ClassifierSharing::Shared,
        heads: vec![zero_head(4, 5, [0.0, 3f64.ln()])],
    };
    for p in classify(&s, &biased, 0.01).unwrap() {
        assert!((p - 0.75).abs() < 1e-15);
    }
    let per_unit = ClassifierParams {
        sharing: ClassifierSharing::PerUnit,
        heads: vec![zero_head(4, 5, [0.0, 0.0]); 2],
    };
    assert!(classify(&s, &per_unit, 0.01).is_err());
}

#[test]
fn eval_forward_is_pure_and_train_with_all_layers_matches() {
    let c = cfg(4, 3, 3);
    let p = ModelParams::init(&c, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = FeatureSet::new(uniform(&mut rng, 4, 3)).unwrap();
    let a = forward(&f, &p, &c, &Mode::Eval).unwrap();
    assert_eq!(a, forward(&f, &p, &c, &Mode::Eval).unwrap());
    let c_all = ModelConfig { t: 3, ..c.clone() };
    let plan = DropoutPlan::shared(&[0, 1, 2], 3, 3, 4).unwrap();
    assert_eq!(forward(&f, &p, &c_all, &Mode::Train(plan)).unwrap(), a);
    assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn zero_layers_reduce_to_classifying_half_features() {
    let c = cfg(3, 2, 0);
    let mut p = ModelParams::init(&c, 5).unwrap();
    p.fusion.q0 = Matrix::zeros(2, 1);
    let f = fs(vec![vec![1.0, 2.0], vec![-1.0, 0.0], vec![0.3, 0.3]]);
    let direct = classify(&f.matrix().scale(0.5), &p.classifier, c.leaky_slope).unwrap();
    assert_eq!(forward(&f, &p, &c, &Mode::Eval).unwrap(), direct);
}

#[test]
fn permuting_units_permutes_everything() {
    let c = cfg(5, 4, 3);
    let p = ModelParams::init(&c, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let f = uniform(&mut rng, 5, 4);
    let perm = [3usize, 0, 4, 1, 2];
    let fp = Matrix::from_fn(5, 4, |a, d| f[(perm[a], d)]);
    let mut pp = p.clone();
    pp.classifier.heads = perm
        .iter()
        .map(|&i| p.classifier.heads[i].clone())
        .collect();

    let mu =
        relation_coefficients(&FeatureSet::new(f.clone()).unwrap(), &p.layers[0], 0.01).unwrap();
    let mup =
        relation_coefficients(&FeatureSet::new(fp.clone()).unwrap(), &p.layers[0], 0.01).unwrap();
    for a in 0..5 {
        for b in 0..5 {
            assert!((mup.mu[(a, b)] - mu.mu[(perm[a], perm[b])]).abs() < 1e-12);
        }
    }
    let y = forward(&FeatureSet::new(f).unwrap(), &p, &c, &Mode::Eval).unwrap();
    let yp = forward(&FeatureSet::new(fp).unwrap(), &pp, &c, &Mode::Eval).unwrap();
    for a in 0..5 {
        assert!((yp[a] - y[perm[a]]).abs() < 1e-12);
    }
}

#[test]
fn alternative_fusions_produce_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let f = FeatureSet::new(uniform(&mut rng, 4, 3)).unwrap();
    for fusion in [FusionMode::Avg, FusionMode::Concat, FusionMode::ScoreAvg] {
        let c = ModelConfig {
            fusion,
            ..cfg(4, 3, 2)
        };
        let p = ModelParams::init(&c, 3).unwrap();
        let y = forward(&f, &p, &c, &Mode::Eval).unwrap();
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0), "{fusion}: {y:?}");
        let plan = DropoutPlan::shared(&[1], 2, 1, 4).unwrap();
        let c1 = ModelConfig { t: 1, ..c };
        assert!(forward(&f, &p, &c1, &Mode::Train(plan))
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }
}

#[test]
fn gate_matches_logistic() {
    assert_eq!(sigmoid(0.0), 0.5);
}
