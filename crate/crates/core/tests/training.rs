mod common;

use cfair::centroids::{pseudo_metric_curves, pseudo_score};
use cfair::cftrain::full_loss;
use cfair::dataset::build_group_index;
use cfair::{
    batch_loss_grad, build_target_table, compute_weights, estimate_centroids, generate, init_from_pretrained,
    sample_epoch, train, EmbeddingDataset, GroupSpec, SynthConfig, TrainConfig,
};
use proptest::prelude::*;

fn small_shape() -> common::DatasetShape {
    common::DatasetShape {
        groups: 2..=3,
        identities: 3..=6,
        images: 2..=4,
        d: 4,
    }
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let h = 1e-6;
    for seed in 0..4 {
        let ds = common::random_dataset(40 + seed, &small_shape());
        let cs = estimate_centroids(&ds).unwrap();
        let table = build_target_table(&ds, &cs, 0).unwrap();
        let weights = compute_weights(&ds, &cs).unwrap();
        let mut r = common::rng(seed);
        let mut p = common::random_params(&mut r, ds.d(), ds.k(), 0.3);
        p.add_scaled(&init_from_pretrained(&cs), 1.0);
        let batch = vec![0, 3, 3, ds.n() - 1];
        let (_, grads) = batch_loss_grad(&p, &batch, &table, &weights, &ds).unwrap();
        let loss = |q: &cfair::ModuleParams| batch_loss_grad(q, &batch, &table, &weights, &ds).unwrap().0;
        for (name, range) in p.layout().blocks() {
            let numeric: Vec<f64> = range
                .clone()
                .map(|j| {
                    let (mut a, mut b) = (p.clone(), p.clone());
                    a.values_mut()[j] += h;
                    b.values_mut()[j] -= h;
                    (loss(&a) - loss(&b)) / (2.0 * h)
                })
                .collect();
            let err = common::rel_err(&grads.values()[range], &numeric);
            assert!(err < 1e-5, "seed {seed} block {name}: {err}");
        }
    }
}

#[test]
fn batches_sum_to_the_full_loss() {
    let ds = common::random_dataset(50, &small_shape());
    let cs = estimate_centroids(&ds).unwrap();
    let table = build_target_table(&ds, &cs, 1).unwrap();
    let weights = compute_weights(&ds, &cs).unwrap();
    let mut r = common::rng(50);
    let p = common::random_params(&mut r, ds.d(), ds.k(), 0.2);
    let full = full_loss(&p, &table, &weights, &ds).unwrap();
    let halves: f64 = [(0..ds.n() / 2).collect::<Vec<_>>(), (ds.n() / 2..ds.n()).collect()]
        .iter()
        .map(|b| batch_loss_grad(&p, b, &table, &weights, &ds).unwrap().0)
        .sum();
    assert!((full - halves).abs() <= 1e-14 * full);
}

fn single_group(seed: u64) -> EmbeddingDataset {
    common::random_dataset(
        seed,
        &common::DatasetShape {
            groups: 1..=1,
            identities: 5..=8,
            images: 2..=5,
            d: 6,
        },
    )
}

#[test]
fn single_group_training_is_a_fixpoint() {
    let ds = single_group(60);
    let cs = estimate_centroids(&ds).unwrap();
    let table = build_target_table(&ds, &cs, 0).unwrap();
    let weights = compute_weights(&ds, &cs).unwrap();
    let mut cfg = TrainConfig::new(0);
    cfg.batch_size = 8;
    cfg.epochs = 10;
    let out = train(&ds, &cs, &table, &weights, &cfg).unwrap();
    assert!(full_loss(&out.params, &table, &weights, &ds).unwrap() < 1e-10);
    for i in 0..ds.n() {
        for k in 0..ds.k() {
            let s = cfair::fairmodule::module_pseudo_score(&out.params, &ds.row_f64(i), k).unwrap();
            assert!((s - pseudo_score(&ds, &cs, i, k)).abs() < 1e-6);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let ds = common::random_dataset(70, &small_shape());
    let cs = estimate_centroids(&ds).unwrap();
    let table = build_target_table(&ds, &cs, 0).unwrap();
    let weights = compute_weights(&ds, &cs).unwrap();
    let mut cfg = TrainConfig::new(0);
    cfg.batch_size = 5;
    cfg.epochs = 3;
    cfg.seed = 9;
    let a = train(&ds, &cs, &table, &weights, &cfg).unwrap();
    let b = train(&ds, &cs, &table, &weights, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert!(!a.params.values().iter().zip(init_from_pretrained(&cs).values()).all(|(x, y)| x == y));
}

#[test]
fn sampler_balances_groups() {
    // 3 images in group 0, 30 in group 1
    let mut emb = Vec::new();
    let mut id = Vec::new();
    for i in 0..33u32 {
        emb.extend([1.0f32, i as f32 + 1.0]);
        id.push(if i < 3 { i % 2 } else { 2 + i % 3 });
    }
    let ds = EmbeddingDataset::new(2, emb, id, vec![0, 0, 1, 1, 1], vec!["a".into(), "b".into()]).unwrap();
    let gi = build_group_index(&ds);
    let mut small = 0usize;
    let mut total = 0usize;
    for epoch in 0..300 {
        let draws = sample_epoch(&gi, 1, epoch).unwrap();
        small += draws.iter().filter(|&&i| i < 3).count();
        total += draws.len();
    }
    let share = small as f64 / total as f64;
    assert!((share - 0.5).abs() < 0.02, "{share}");
}

#[test]
fn synthetic_noise_orders_genuine_scores() {
    let group = |name: &str, sigma| GroupSpec {
        name: name.into(),
        identities: 50,
        images_per_identity: 10,
        sigma,
    };
    let ds = generate(&SynthConfig {
        d: 64,
        groups: vec![group("A", 0.3), group("B", 0.8)],
        seed: 7,
    })
    .unwrap();
    let cs = estimate_centroids(&ds).unwrap();
    let a = pseudo_metric_curves(&ds, &cs, 0).unwrap();
    let b = pseudo_metric_curves(&ds, &cs, 1).unwrap();
    let mut jumps: Vec<f64> = a.frr.scores().iter().chain(b.frr.scores()).copied().collect();
    jumps.sort_by(f64::total_cmp);
    jumps.dedup();
    let dominated = jumps.iter().filter(|&&t| b.frr.eval(t) >= a.frr.eval(t)).count();
    assert!(dominated as f64 >= 0.95 * jumps.len() as f64, "{dominated}/{}", jumps.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn centroids_ignore_order_and_scale(seed in 0u64..1000, scale in 0.01f32..100.0) {
        let ds = common::random_dataset(seed, &small_shape());
        let cs = estimate_centroids(&ds).unwrap();
        let n = ds.n();
        // reverse the image order and rescale every row
        let order: Vec<usize> = (0..n).rev().collect();
        let emb: Vec<f32> = order.iter().flat_map(|&i| ds.row(i).iter().map(|v| v * scale).collect::<Vec<_>>()).collect();
        let ids: Vec<u32> = order.iter().map(|&i| ds.identity_of()[i]).collect();
        let other = EmbeddingDataset::new(ds.d(), emb, ids, ds.attribute_of_identity().to_vec(), ds.attribute_names().to_vec()).unwrap();
        let cs2 = estimate_centroids(&other).unwrap();
        for k in 0..ds.k() {
            for (x, y) in cs.centroid(k).iter().zip(cs2.centroid(k)) {
                prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn zero_init_reproduces_pretrained_scores(seed in 0u64..1000) {
        let ds = common::random_dataset(seed, &small_shape());
        let cs = estimate_centroids(&ds).unwrap();
        let p = init_from_pretrained(&cs);
        for i in 0..ds.n() {
            for k in 0..ds.k() {
                let s = cfair::fairmodule::module_pseudo_score(&p, &ds.row_f64(i), k).unwrap();
                prop_assert!((s - pseudo_score(&ds, &cs, i, k)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn transformed_curves_stay_within_one_step(seed in 0u64..1000) {
        let ds = common::random_dataset(seed, &small_shape());
        let cs = estimate_centroids(&ds).unwrap();
        let r = (seed % ds.num_attributes() as u64) as u32;
        for g in cfair::transform::alignment_report(&ds, &cs, r).unwrap() {
            prop_assert!(g.pass, "{:?}", g);
        }
    }

    #[test]
    fn normalized_weights_sum_to_one(seed in 0u64..1000) {
        let ds = common::random_dataset(seed, &small_shape());
        let cs = estimate_centroids(&ds).unwrap();
        let table = build_target_table(&ds, &cs, 0).unwrap();
        let w = compute_weights(&ds, &cs).unwrap();
        for kind in [cfair::PairKind::Genuine, cfair::PairKind::Impostor] {
            let total: f64 = table.entries().iter().zip(w.weights())
                .filter(|(e, _)| e.kind == kind).map(|(_, x)| x / w.normalizer(kind)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
