use distmatch::augmentation::AugConfig;
use distmatch::datasets::{make_toy_dataset, LabeledImageSet};
use distmatch::evaluation::{
    accuracy, cross_architecture_eval, evaluate_sets, evaluate_synthetic, mean_std, train_on_set, EvalProtocol,
    TrainRecipe,
};
use distmatch::networks::{EmbedderConfig, NetworkInstance};
use distmatch::synthetic::{SyntheticMeta, SyntheticSet};
use distmatch::Error;

fn small_convnet() -> EmbedderConfig {
    let mut c = EmbedderConfig::convnet([1, 8, 8], 4);
    c.width = 16;
    c
}

fn quick_recipe(epochs: usize) -> TrainRecipe {
    TrainRecipe {
        epochs,
        batch_size: 64,
        ..TrainRecipe::defaults(1)
    }
}

fn synthetic_from(set: &LabeledImageSet, ipc: usize) -> SyntheticSet {
    let idx = set.class_index();
    let rows: Vec<usize> = idx.lists.iter().flat_map(|l| l[..ipc].to_vec()).collect();
    let meta = SyntheticMeta {
        dataset: "toy".into(),
        num_classes: set.num_classes,
        ipc,
        channel_mean: set.channel_mean.clone(),
        channel_std: set.channel_std.clone(),
        seed: 0,
        config_hash: String::new(),
        method: "random".into(),
        selection: None,
    };
    SyntheticSet::from_labeled(&set.subset(&rows), meta).unwrap()
}

#[test]
fn toy_training_fits_the_training_set() {
    let train = make_toy_dataset(0, 128);
    let net = train_on_set(&train, &small_convnet(), &quick_recipe(50), 3).unwrap();
    let acc = accuracy(&net, &train, None).unwrap();
    assert!(acc >= 99.0, "train accuracy {acc}");
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let train = make_toy_dataset(0, 4);
    let cfg = small_convnet();
    let seed = 11;
    let net = train_on_set(&train, &cfg, &quick_recipe(0), seed).unwrap();
    let init: NetworkInstance = NetworkInstance::build(&cfg, distmatch::repro::derive_seed(seed, "net", 0)).unwrap();
    assert_eq!(net.state(), init.state());
}

#[test]
fn training_is_deterministic() {
    let train = make_toy_dataset(0, 8);
    let a = train_on_set(&train, &small_convnet(), &quick_recipe(3), 5).unwrap();
    let b = train_on_set(&train, &small_convnet(), &quick_recipe(3), 5).unwrap();
    assert_eq!(a.state(), b.state());
}

#[test]
fn single_run_has_zero_std() {
    let train = make_toy_dataset(0, 32);
    let test = make_toy_dataset(1, 16);
    let protocol = EvalProtocol {
        recipe: quick_recipe(5),
        nets: 1,
        seed: 0,
        workers: 1,
    };
    let r = evaluate_synthetic(&[synthetic_from(&train, 2)], &test, &small_convnet(), &protocol).unwrap();
    assert_eq!(r.accuracies.len(), 1);
    assert_eq!(r.mean, r.accuracies[0]);
    assert_eq!(r.std, 0.0);
}

#[test]
fn reported_std_matches_recomputation() {
    let train = make_toy_dataset(0, 32);
    let test = make_toy_dataset(1, 16);
    let protocol = EvalProtocol {
        recipe: quick_recipe(4),
        nets: 3,
        seed: 9,
        workers: 2,
    };
    let sets = [synthetic_from(&train, 1), synthetic_from(&train, 1)];
    let r = evaluate_synthetic(&sets, &test, &small_convnet(), &protocol).unwrap();
    assert_eq!(r.accuracies.len(), 6);
    let n = r.accuracies.len() as f64;
    let mean = r.accuracies.iter().sum::<f64>() / n;
    let var = r.accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((r.mean - mean).abs() < 1e-12);
    assert!((r.std - var.sqrt()).abs() < 1e-12);
}

#[test]
fn same_seed_for_every_net_gives_zero_spread() {
    let train = make_toy_dataset(0, 16);
    let test = make_toy_dataset(1, 8);
    let cfg = small_convnet();
    let recipe = quick_recipe(3);
    let accs: Vec<f64> = (0..3)
        .map(|_| accuracy(&train_on_set(&train, &cfg, &recipe, 42).unwrap(), &test, None).unwrap())
        .collect();
    assert_eq!(mean_std(&accs).1, 0.0);
}

#[test]
fn mixed_ipc_is_a_contract_error() {
    let train = make_toy_dataset(0, 8);
    let test = make_toy_dataset(1, 4);
    let protocol = EvalProtocol {
        recipe: quick_recipe(1),
        nets: 1,
        seed: 0,
        workers: 1,
    };
    let sets = [synthetic_from(&train, 1), synthetic_from(&train, 2)];
    let err = evaluate_synthetic(&sets, &test, &small_convnet(), &protocol).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn permuting_labels_and_head_rows_keeps_accuracy() {
    let train = make_toy_dataset(0, 16);
    let test = make_toy_dataset(1, 16);
    let net = train_on_set(&train, &small_convnet(), &quick_recipe(5), 1).unwrap();
    let perm = [2usize, 0, 3, 1];

    let mut permuted = net.clone();
    let d = net.feature_dim();
    let (w, b) = (net.head().weight.clone(), net.head().bias.clone());
    let head = permuted.head_mut();
    for (old, &new) in perm.iter().enumerate() {
        head.weight[new * d..(new + 1) * d].copy_from_slice(&w[old * d..(old + 1) * d]);
        head.bias[new] = b[old];
    }
    let mut relabelled = test.clone();
    relabelled.labels = test.labels.iter().map(|&l| perm[l]).collect();

    assert_eq!(
        accuracy(&net, &test, None).unwrap(),
        accuracy(&permuted, &relabelled, None).unwrap()
    );
}

#[test]
fn restricting_classes_never_hurts_masked_accuracy() {
    let train = make_toy_dataset(0, 16);
    let test = make_toy_dataset(1, 16).filter_classes(&[0, 1]);
    let net = train_on_set(&train, &small_convnet(), &quick_recipe(2), 1).unwrap();
    let all = accuracy(&net, &test, None).unwrap();
    let masked = accuracy(&net, &test, Some(&[0, 1])).unwrap();
    assert!(masked >= all);
}

#[test]
fn cross_architecture_identity_case_matches_direct_evaluation() {
    let train = make_toy_dataset(0, 16);
    let test = make_toy_dataset(1, 8);
    let protocol = EvalProtocol {
        recipe: quick_recipe(2),
        nets: 1,
        seed: 4,
        workers: 1,
    };
    let sets = [synthetic_from(&train, 2)];
    let cfg = EmbedderConfig::from_label("convnet3-bn", [1, 8, 8], 4).unwrap();
    let direct = evaluate_synthetic(&sets, &test, &cfg, &protocol).unwrap();
    let table = cross_architecture_eval(&sets, &test, &["convnet3-bn".to_string()], &protocol).unwrap();
    assert_eq!(table.len(), 1);
    assert_eq!(table[0].accuracies, direct.accuracies);
    assert_eq!(table[0].arch, "convnet3-bn");
}

#[test]
fn unknown_architecture_is_a_config_error() {
    let train = make_toy_dataset(0, 4);
    let test = make_toy_dataset(1, 4);
    let protocol = EvalProtocol::defaults(1);
    let err = cross_architecture_eval(&[synthetic_from(&train, 1)], &test, &["lenet".to_string()], &protocol)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn plain_sets_and_synthetic_sets_agree() {
    let train = make_toy_dataset(0, 16);
    let test = make_toy_dataset(1, 8);
    let protocol = EvalProtocol {
        recipe: TrainRecipe {
            augmentation: AugConfig::identity(),
            ..quick_recipe(2)
        },
        nets: 2,
        seed: 1,
        workers: 1,
    };
    let s = synthetic_from(&train, 3);
    let a = evaluate_synthetic(std::slice::from_ref(&s), &test, &small_convnet(), &protocol).unwrap();
    let b = evaluate_sets(&[s.to_labeled()], &test, &small_convnet(), &protocol).unwrap();
    assert_eq!(a.accuracies, b.accuracies);
}
