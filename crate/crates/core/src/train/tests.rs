use super::*;
use crate::models::{
    build_shared_network, build_soft_shared, build_word_cnn, derive_task_head, CharCnnSpec, EmbeddingInput, NetConfig,
    TaskSpec, WordCnnSpec,
};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};

fn net() -> NetConfig {
    NetConfig {
        seq_len: 8,
        char_len: 32,
        word: WordCnnSpec {
            windows: vec![2, 3],
            filters: 4,
            hidden: vec![],
        },
        char: CharCnnSpec {
            strides: [1, 2],
            filters: 4,
            hidden: 8,
            ..CharCnnSpec::default()
        },
    }
}

fn input() -> EmbeddingInput {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut v: Vec<f64> = (0..30 * 6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    v[..6].iter_mut().for_each(|x| *x = 0.0);
    EmbeddingInput::fixed(Tensor::new(vec![30, 6], v).unwrap())
}

/// Class `c` carries keyword `2 + c` somewhere among filler ids 10..30.
fn keyword_corpus(n: usize, classes: usize, seed: u64) -> Vec<EncodedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % classes;
            let mut tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(10..30)).collect();
            tokens[rng.gen_range(0..6)] = 2 + label;
            tokens.resize(8, 0);
            EncodedExample {
                tokens,
                chars: vec![],
                char_len: 32,
                label,
                task: 0,
            }
        })
        .collect()
}

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 10,
        max_epochs: 20,
        patience: 5,
        seed: 3,
        adam: AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        },
        task_weights: vec![],
    }
}

#[test]
fn shares_follow_remainder_rule() {
    assert_eq!(batch_shares(3, 30, 0), vec![10, 10, 10]);
    assert_eq!(batch_shares(4, 30, 0), vec![8, 8, 7, 7]);
    assert_eq!(batch_shares(4, 30, 1), vec![7, 7, 8, 8]);
    assert_eq!(batch_shares(4, 30, 2), vec![8, 8, 7, 7]);
}

#[test]
fn empty_training_split_rejected() {
    let mut store = ParamStore::new();
    let m = build_word_cnn(&net(), &input(), &TaskSpec::new("t", &["a", "b"]), &mut store, 1).unwrap();
    let data = TaskData { train: &[], val: &[] };
    assert!(matches!(
        train_stl(&m, &mut store, 0, data, &config()),
        Err(Error::Data(_))
    ));
}

#[test]
fn stl_fits_keyword_task_deterministically() {
    let train = keyword_corpus(40, 2, 5);
    let run = || {
        let mut store = ParamStore::new();
        let m = build_word_cnn(&net(), &input(), &TaskSpec::new("t", &["a", "b"]), &mut store, 1).unwrap();
        let out = train_stl(
            &m,
            &mut store,
            0,
            TaskData {
                train: &train,
                val: &[],
            },
            &config(),
        )
        .unwrap();
        let (_, acc) = loss_and_accuracy(&m, &store, 0, &train).unwrap();
        (out, acc, store.snapshot())
    };
    let (a, acc, wa) = run();
    let (b, _, wb) = run();
    assert_eq!(acc, 1.0);
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    assert!(a.best_epoch >= 1);
}

#[test]
fn evaluation_counts_every_example() {
    let data = keyword_corpus(10, 2, 2);
    let mut store = ParamStore::new();
    let m = build_word_cnn(&net(), &input(), &TaskSpec::new("t", &["a", "b"]), &mut store, 1).unwrap();
    let cm = evaluate(&m, &store, 0, &["a".into(), "b".into()], &data).unwrap();
    assert_eq!(cm.total(), 10);
}

#[test]
fn shared_training_then_frozen_head() {
    let tasks = [TaskSpec::new("A", &["a", "b"]), TaskSpec::new("B", &["x", "y", "z"])];
    let (ta, tb) = (keyword_corpus(20, 2, 1), keyword_corpus(30, 3, 2));
    let data = [TaskData { train: &ta, val: &[] }, TaskData { train: &tb, val: &[] }];
    let mut store = ParamStore::new();
    let sn = build_shared_network(&net(), &input(), &tasks, &mut store, 4).unwrap();
    let mut cfg = config();
    cfg.max_epochs = 3;
    cfg.patience = 2;
    let out = train_shared_network(&sn, &mut store, &data, &cfg).unwrap();
    assert!(out.history.iter().any(|r| r.task == "B"));
    let mut head = derive_task_head(&sn, &store, &input(), &tasks[0], 5).unwrap();
    let before = head.store.frozen_digests();
    assert!(!before.is_empty());
    train_stl(&head.model, &mut head.store, 0, data[0], &cfg).unwrap();
    assert_eq!(before, head.store.frozen_digests());
}

#[test]
fn pretraining_with_zero_transforms_matches_standalone_training() {
    let tasks = [TaskSpec::new("A", &["a", "b"]), TaskSpec::new("B", &["x", "y", "z"])];
    let (ta, tb) = (keyword_corpus(20, 2, 1), keyword_corpus(30, 3, 2));
    let data = [TaskData { train: &ta, val: &[] }, TaskData { train: &tb, val: &[] }];
    let mut cfg = config();
    cfg.max_epochs = 3;
    cfg.patience = 2;
    let seeds = [11, 12];
    let mut store = ParamStore::new();
    let ssn = build_soft_shared(&net(), &input(), &tasks, &mut store, &seeds).unwrap();
    let mut pre = Vec::new();
    let original = store.trainable_mask();
    for t in 0..2 {
        let mask: Vec<bool> = store.iter().map(|(_, p)| p.name.starts_with(&ssn.prefix(t))).collect();
        store.apply_trainable_mask(&mask);
        let c = TrainConfig {
            seed: derive_seed(cfg.seed, &format!("soft/pretrain/{t}")),
            ..cfg.clone()
        };
        pre.push(train_stl(&ssn.model, &mut store, t, data[t], &c).unwrap());
    }
    store.apply_trainable_mask(&original);
    for t in 0..2 {
        let mut alone = ParamStore::new();
        let m = build_word_cnn(&net(), &input(), &tasks[t], &mut alone, seeds[t]).unwrap();
        let c = TrainConfig {
            seed: derive_seed(cfg.seed, &format!("soft/pretrain/{t}")),
            ..cfg.clone()
        };
        let out = train_stl(&m, &mut alone, 0, data[t], &c).unwrap();
        assert_eq!(out.best_epoch, pre[t].best_epoch);
        for (_, p) in alone.iter().filter(|(_, p)| p.tensor.trainable()) {
            let joint = store.by_name(&format!("{}{}", ssn.prefix(t), p.name)).unwrap();
            assert_eq!(joint.tensor.values(), p.tensor.values(), "{}", p.name);
        }
    }
}

#[test]
fn joint_phase_moves_cross_transforms() {
    let tasks = [TaskSpec::new("A", &["a", "b"]), TaskSpec::new("B", &["x", "y", "z"])];
    let (ta, tb) = (keyword_corpus(20, 2, 1), keyword_corpus(30, 3, 2));
    let data = [TaskData { train: &ta, val: &[] }, TaskData { train: &tb, val: &[] }];
    let mut cfg = config();
    cfg.max_epochs = 2;
    cfg.patience = 1;
    let mut store = ParamStore::new();
    let ssn = build_soft_shared(&net(), &input(), &tasks, &mut store, &[1, 2]).unwrap();
    let out = train_soft_shared(&ssn, &mut store, &data, &cfg).unwrap();
    assert_eq!(out.pretrain.len(), 2);
    let moved = ssn
        .transform_names()
        .iter()
        .any(|n| store.by_name(n).unwrap().tensor.values().iter().any(|&v| v != 0.0));
    assert!(moved);
}
