use std::collections::BTreeSet;

use alens_core::acquisition::{score_bald, score_max_entropy, score_var_ratio, select_batch};
use alens_core::alloop::{self, LoopConfig};
use alens_core::data::{make_splits, Dataset, SplitSpec};
use alens_core::ensemble::{ensemble_mean, predict_cube, train_ensemble};
use alens_core::learner::{glorot_init, train, Adam};
use alens_core::{
    AcquisitionKind, AcquisitionScore, Architecture, EnsembleConfig, EnsembleMode, LabeledSet, Matrix, McConfig,
    PredictionCube, TrainConfig,
};
use proptest::prelude::*;

type Nested = Vec<Vec<Vec<Vec<f64>>>>;

fn nested_cube(n: usize, m: usize, k: usize, c: usize, seed: u64) -> Nested {
    let mut rng = alens_core::Rng::new(seed);
    (0..n)
        .map(|_| {
            (0..m)
                .map(|_| {
                    (0..k)
                        .map(|_| {
                            let raw: Vec<f64> = (0..c).map(|_| rng.uniform().powi(3) + 1e-9).collect();
                            let z: f64 = raw.iter().sum();
                            raw.iter().map(|v| v / z).collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn h(p: &[f64]) -> f64 {
    let mut total = 0.0;
    for &v in p {
        if v > 0.0 {
            total -= v * v.ln();
        }
    }
    total
}

/// Straight nested-loop evaluation of the three scores for one sample.
fn oracle(sample: &[Vec<Vec<f64>>]) -> (f64, f64, f64) {
    let c = sample[0][0].len();
    let mut mean = vec![0.0; c];
    let mut slice_entropy = 0.0;
    let mut count = 0.0;
    for member in sample {
        for pass in member {
            for j in 0..c {
                mean[j] += pass[j];
            }
            slice_entropy += h(pass);
            count += 1.0;
        }
    }
    for v in &mut mean {
        *v /= count;
    }
    let max_ent = h(&mean);
    let bald = (max_ent - slice_entropy / count).max(0.0);
    let var_ratio = 1.0 - mean.iter().cloned().fold(f64::MIN, f64::max);
    (max_ent, bald, var_ratio)
}

proptest! {
    #[test]
    fn scores_match_nested_loops(n in 1usize..6, m in 1usize..4, k in 1usize..5, c in 2usize..6, seed in any::<u64>()) {
        let nested = nested_cube(n, m, k, c, seed);
        let cube = PredictionCube::from_nested(&nested).unwrap();
        let (me, bald, vr) = (score_max_entropy(&cube), score_bald(&cube), score_var_ratio(&cube));
        for s in 0..n {
            let (e_me, e_bald, e_vr) = oracle(&nested[s]);
            prop_assert!((me[s].score - e_me).abs() <= 1e-12);
            prop_assert!((bald[s].score - e_bald).abs() <= 1e-12);
            prop_assert!((vr[s].score - e_vr).abs() <= 1e-12);
            prop_assert!(bald[s].score >= 0.0);
            prop_assert!(bald[s].score <= me[s].score + 1e-12);
            prop_assert!(me[s].score <= (c as f64).ln() + 1e-12);
            prop_assert!(vr[s].score >= 0.0 && vr[s].score <= 1.0 - 1.0 / c as f64 + 1e-12);
        }
    }

    #[test]
    fn ensemble_mean_ignores_member_order(m in 2usize..5, seed in any::<u64>(), shift in 1usize..4) {
        let nested = nested_cube(4, m, 3, 5, seed);
        let cube = PredictionCube::from_nested(&nested).unwrap();
        let order: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let permuted = cube.select_members(&order).unwrap();
        let (a, b) = (ensemble_mean(&cube), ensemble_mean(&permuted));
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for row in a.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let (sa, sb) = (score_bald(&cube), score_bald(&permuted));
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!((x.score - y.score).abs() <= 1e-12);
        }
    }

    #[test]
    fn select_batch_takes_the_top_scores(raw in prop::collection::vec(0u8..8, 1..40), n_query in 1usize..50) {
        let scores: Vec<AcquisitionScore> = raw
            .iter()
            .enumerate()
            .map(|(pool_index, &v)| AcquisitionScore { pool_index, score: v as f64 })
            .collect();
        let chosen = select_batch(&scores, n_query).unwrap();
        prop_assert_eq!(chosen.len(), n_query.min(raw.len()));
        prop_assert!(chosen.windows(2).all(|w| w[0] < w[1]));
        let taken: BTreeSet<usize> = chosen.iter().copied().collect();
        for s in &scores {
            if taken.contains(&s.pool_index) {
                continue;
            }
            for &i in &chosen {
                let better = scores[i].score > s.score
                    || (scores[i].score == s.score && i < s.pool_index);
                prop_assert!(better);
            }
        }
    }
}

#[test]
fn identical_slices_have_zero_bald() {
    let slice = vec![0.2, 0.3, 0.5];
    let nested = vec![vec![vec![slice.clone(); 4]; 3]];
    let cube = PredictionCube::from_nested(&nested).unwrap();
    assert_eq!(score_bald(&cube)[0].score, 0.0);
}

fn finite_difference(params: &alens_core::LearnerParams, set: &LabeledSet) -> f64 {
    let (_, grads) = params.loss_and_gradients(set).unwrap();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, bump: &dyn Fn(f64) -> alens_core::LearnerParams| {
        let numeric = (bump(step).loss(set).unwrap() - bump(-step).loss(set).unwrap()) / (2.0 * step);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    };
    for (l, w) in params.weights.iter().enumerate() {
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                check(grads.weights[l].get(r, c), &|d| {
                    let mut p = params.clone();
                    p.weights[l].set(r, c, w.get(r, c) + d);
                    p
                });
            }
        }
        for j in 0..params.biases[l].len() {
            check(grads.biases[l][j], &|d| {
                let mut p = params.clone();
                p.biases[l][j] += d;
                p
            });
        }
    }
    worst
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = alens_core::Rng::new(17);
    let arch = Architecture::new(vec![4, 8, 3], vec![0.5]).unwrap();
    let mut params = glorot_init(&arch, &mut rng).unwrap();
    for b in params.biases.iter_mut().flatten() {
        *b = rng.uniform_range(-0.1, 0.1);
    }
    let inputs = Matrix::from_vec(6, 4, (0..24).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    let set = LabeledSet::new(inputs, vec![0, 1, 2, 1, 0, 2]).unwrap();
    let worst = finite_difference(&params, &set);
    assert!(worst < 1e-6, "relative error {worst}");
}

/// One uniform box per class in 5-D, linearly separable.
fn separable(n_per_class: usize, seed: u64) -> LabeledSet {
    let mut rng = alens_core::Rng::new(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_per_class * 3 {
        let class = i % 3;
        for d in 0..5 {
            let centre = if d == class { 2.0 } else { 0.0 };
            data.push(centre + rng.uniform_range(-0.6, 0.6));
        }
        labels.push(class);
    }
    LabeledSet::new(Matrix::from_vec(n_per_class * 3, 5, data).unwrap(), labels).unwrap()
}

#[test]
fn learner_fits_separable_data() {
    let arch = Architecture::new(vec![5, 16, 3], vec![0.2]).unwrap();
    let params = glorot_init(&arch, &mut alens_core::Rng::new(1)).unwrap();
    let cfg = TrainConfig {
        max_epochs: 100,
        patience: 20,
        batch_size: 16,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let out = train(params, &separable(50, 2), &separable(20, 3), &cfg).unwrap();
    let acc = out.params.accuracy(&separable(100, 4)).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn monte_carlo_mean_converges() {
    let arch = Architecture::new(vec![5, 32, 3], vec![0.5]).unwrap();
    let cfg = EnsembleConfig {
        m_members: 1,
        mode: EnsembleMode::Stochastic,
        mc: McConfig::new(500).unwrap(),
        shard_size: 64,
    };
    let quick = TrainConfig {
        max_epochs: 10,
        patience: 5,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let members: Vec<_> = train_ensemble(&separable(20, 5), &separable(10, 6), &arch, &cfg, &quick, &alens_core::Rng::new(7))
        .unwrap()
        .into_iter()
        .map(|o| o.params)
        .collect();
    let x = separable(10, 8).inputs;
    let small = ensemble_mean(&predict_cube(&members, &x, &cfg, &alens_core::Rng::new(1)).unwrap());
    let big_cfg = EnsembleConfig {
        mc: McConfig::new(5000).unwrap(),
        ..cfg
    };
    let big = ensemble_mean(&predict_cube(&members, &x, &big_cfg, &alens_core::Rng::new(2)).unwrap());
    let gap = small
        .as_slice()
        .iter()
        .zip(big.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap <= 0.02, "max gap {gap}");
}

#[test]
fn loop_never_touches_validation_or_test_indices() {
    let n = 400;
    let set = separable(n / 3 + 1, 9);
    let ds = Dataset {
        name: "toy".into(),
        images: set.inputs.select_rows(&(0..n).collect::<Vec<_>>()),
        labels: set.labels[..n].to_vec(),
        n_classes: 3,
        image_shape: (1, 5),
    };
    let splits = make_splits(
        n,
        n,
        &SplitSpec {
            pool_size: Some(200),
            val_size: 30,
            test_size: Some(60),
            seed: 3,
        },
    )
    .unwrap();
    let val = LabeledSet::gather(&ds.images, &ds.labels, &splits.val);
    let test = LabeledSet::gather(&ds.images, &ds.labels, &splits.test);
    let cfg = LoopConfig {
        initial_size: 6,
        n_query: 5,
        target_size: 21,
        acquisition: AcquisitionKind::Bald,
        arch: Architecture::new(vec![5, 8, 3], vec![0.25]).unwrap(),
        ensemble: EnsembleConfig {
            m_members: 2,
            mode: EnsembleMode::Stochastic,
            mc: McConfig::new(4).unwrap(),
            shard_size: 32,
        },
        train: TrainConfig {
            max_epochs: 5,
            patience: 2,
            ..TrainConfig::default()
        },
        seed: 4,
    };
    let out = alloop::run(&ds, &splits.pool, &val, &test, &cfg).unwrap();
    let pool: BTreeSet<usize> = splits.pool.iter().copied().collect();
    let val_set: BTreeSet<usize> = splits.val.iter().copied().collect();
    assert_eq!(out.state.labeled.len(), 21);
    assert!(out.state.labeled.iter().all(|i| pool.contains(i) && !val_set.contains(i)));
    assert!(out.state.pool.iter().all(|i| pool.contains(i)));
    assert_eq!(out.state.labeled.len() + out.state.pool.len(), pool.len());
    assert!(pool.is_disjoint(&val_set));
    let sizes: Vec<usize> = out.records.iter().map(|r| r.labeled_size).collect();
    assert_eq!(sizes, vec![6, 11, 16, 21]);
}

#[test]
fn full_batch_loss_never_increases_early() {
    let arch = Architecture::new(vec![5, 16, 3], vec![0.5]).unwrap();
    let mut params = glorot_init(&arch, &mut alens_core::Rng::new(11)).unwrap();
    let set = separable(10, 12);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(&params, &cfg);
    let mut last = params.loss(&set).unwrap();
    for step in 0..5 {
        let (_, grads) = params.loss_and_gradients(&set).unwrap();
        adam.step(&mut params, &grads);
        let now = params.loss(&set).unwrap();
        assert!(now <= last, "step {step}: {now} > {last}");
        last = now;
    }
}

#[test]
fn training_returns_the_best_snapshot() {
    let arch = Architecture::new(vec![5, 8, 3], vec![0.5]).unwrap();
    let val = separable(5, 14);
    for seed in 0..4 {
        let params = glorot_init(&arch, &mut alens_core::Rng::new(seed)).unwrap();
        let cfg = TrainConfig {
            max_epochs: 30,
            patience: 4,
            seed,
            ..TrainConfig::default()
        };
        let out = train(params, &separable(6, 13), &val, &cfg).unwrap();
        assert_eq!(out.params.accuracy(&val).unwrap(), out.best_val_accuracy);
        assert!(out.best_epoch <= out.epochs_run);
    }
}

#[test]
fn pass_order_and_flattening_leave_the_mean_unchanged() {
    let nested = nested_cube(5, 3, 4, 4, 21);
    let reversed: Nested = nested
        .iter()
        .map(|s| s.iter().map(|m| m.iter().rev().cloned().collect()).collect())
        .collect();
    let flat: Nested = nested
        .iter()
        .map(|s| vec![s.iter().flatten().cloned().collect()])
        .collect();
    let cube = PredictionCube::from_nested(&nested).unwrap();
    let base = ensemble_mean(&cube);
    for other in [reversed, flat] {
        let other = PredictionCube::from_nested(&other).unwrap();
        for (x, y) in base.as_slice().iter().zip(ensemble_mean(&other).as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (a, b) in score_bald(&cube).iter().zip(score_bald(&other)) {
            assert!((a.score - b.score).abs() <= 1e-12);
        }
    }
    for s in 0..5 {
        for j in 0..4 {
            let mut nested_avg = 0.0;
            for m in 0..3 {
                let mut pass_avg = 0.0;
                for k in 0..4 {
                    pass_avg += nested[s][m][k][j];
                }
                nested_avg += pass_avg / 4.0;
            }
            assert!((base.get(s, j) - nested_avg / 3.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn single_slice_cubes_have_zero_bald() {
    let nested = nested_cube(20, 1, 1, 5, 3);
    let cube = PredictionCube::from_nested(&nested).unwrap();
    let (me, bald) = (score_max_entropy(&cube), score_bald(&cube));
    for s in 0..20 {
        assert_eq!(bald[s].score, 0.0);
        assert!((me[s].score - h(&nested[s][0][0])).abs() <= 1e-12);
    }
    let flat = PredictionCube::from_nested(&[vec![vec![vec![0.1, 0.6, 0.3]; 4]; 3]]).unwrap();
    let mean = ensemble_mean(&flat);
    for (got, want) in mean.row(0).iter().zip([0.1, 0.6, 0.3]) {
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn splits_cover_the_training_file_without_a_pool_cap() {
    let s = make_splits(
        1000,
        100,
        &SplitSpec {
            pool_size: None,
            val_size: 40,
            test_size: None,
            seed: 5,
        },
    )
    .unwrap();
    let mut all: Vec<usize> = s.pool.iter().chain(&s.val).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    assert_eq!(s.test, (0..100).collect::<Vec<_>>());
}

#[test]
fn trajectory_does_not_depend_on_thread_count() {
    let n = 120;
    let set = separable(n / 3, 31);
    let ds = Dataset {
        name: "toy".into(),
        images: set.inputs.clone(),
        labels: set.labels.clone(),
        n_classes: 3,
        image_shape: (1, 5),
    };
    let held = separable(10, 32);
    let cfg = LoopConfig {
        initial_size: 6,
        n_query: 4,
        target_size: 14,
        acquisition: AcquisitionKind::Bald,
        arch: Architecture::new(vec![5, 8, 3], vec![0.25]).unwrap(),
        ensemble: EnsembleConfig {
            m_members: 3,
            mode: EnsembleMode::Stochastic,
            mc: McConfig::new(4).unwrap(),
            shard_size: 16,
        },
        train: TrainConfig {
            max_epochs: 5,
            patience: 2,
            ..TrainConfig::default()
        },
        seed: 8,
    };
    let candidates: Vec<usize> = (0..n).collect();
    let run_with = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| alloop::run(&ds, &candidates, &held, &held, &cfg).unwrap())
    };
    let (a, b) = (run_with(1), run_with(4));
    assert_eq!(a.initial, b.initial);
    assert_eq!(a.acquired, b.acquired);
    assert_eq!(a.records.len(), a.acquired.len() + 1);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.test_accuracy, y.test_accuracy);
        assert_eq!(x.brier, y.brier);
    }
}
