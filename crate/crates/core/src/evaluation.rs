//! Train fresh networks on a (small) training set and measure test accuracy.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{apply_aug, AugConfig};
use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::networks::{cross_entropy, EmbedderConfig, Mode, NetworkInstance};
use crate::repro::{derive_seed, stream};
use crate::synthetic::SyntheticSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Cosine decay of the learning rate to zero over all steps; constant otherwise.
    pub cosine: bool,
    pub augmentation: AugConfig,
}

impl TrainRecipe {
    /// SGD with momentum 0.9, weight decay 5e-4, cosine-decayed lr 0.01,
    /// 300 epochs, batch 256, augmentation on.
    pub fn defaults(channels: usize) -> Self {
        Self {
            epochs: 300,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 256,
            cosine: true,
            augmentation: AugConfig::default_for_channels(channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("training lr must be positive and batch size at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("training momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        self.augmentation.ranges.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub recipe: TrainRecipe,
    /// Networks trained per synthetic set.
    pub nets: usize,
    pub seed: u64,
    pub workers: usize,
}

impl EvalProtocol {
    pub fn defaults(channels: usize) -> Self {
        Self {
            recipe: TrainRecipe::defaults(channels),
            nets: 20,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub arch: String,
    /// Test accuracies in percent, set-major.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub wall_time_secs: f64,
}

impl EvalResult {
    pub fn from_accuracies(arch: impl Into<String>, accuracies: Vec<f64>, wall_time_secs: f64) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            arch: arch.into(),
            accuracies,
            mean,
            std,
            wall_time_secs,
        }
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Draws one op kind for the batch and separate parameters for every image.
fn augment_batch<R: Rng + ?Sized>(cfg: &AugConfig, x: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    if cfg.is_identity() {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    let kind = cfg.strategies[rng.random_range(0..cfg.strategies.len())];
    let single = AugConfig {
        strategies: vec![kind],
        ranges: cfg.ranges.clone(),
        compose: false,
    };
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let p = single.sample([c, h, w], rng)?;
        let img = Tensor::new(vec![1, c, h, w], x.item(i).to_vec())?;
        let y = apply_aug(&p, &cfg.ranges, &img)?;
        out.item_mut(i).copy_from_slice(y.data());
    }
    Ok(out)
}

/// Trains a freshly initialised network (`seed` fixes both the initialisation
/// and the batch order) with softmax cross-entropy.
pub fn train_on_set(
    train: &LabeledImageSet,
    config: &EmbedderConfig,
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<NetworkInstance> {
    recipe.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("cannot train on an empty set".into()));
    }
    let mut net = NetworkInstance::build(config, derive_seed(seed, "net", 0))?;
    let mut rng = stream(seed, "train", 0);
    let n = train.len();
    let bs = recipe.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total = (recipe.epochs * steps_per_epoch).max(1) as f64;
    let mut velocity: Vec<Vec<f32>> = net.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let x = augment_batch(&recipe.augmentation, &train.images.select(chunk), &mut rng)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (emb, tape) = net.embed_tape(&x, Mode::Train)?;
            let (loss, g_logits) = cross_entropy(&net.logits(&emb), &labels);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "{} diverged at epoch {epoch}, step {step}: loss {loss}",
                    config.label()
                )));
            }
            let stats = tape.bn_stats.clone();
            let mut grads = net.zero_gradients();
            let g_emb = net.head_backward(&emb, &g_logits, Some(&mut grads));
            net.embed_backward(tape, &g_emb, Some(&mut grads), false)?;
            net.absorb_batch_stats(&stats);
            let lr = if recipe.cosine {
                0.5 * recipe.lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos())
            } else {
                recipe.lr
            } as f32;
            let (mom, wd) = (recipe.momentum as f32, recipe.weight_decay as f32);
            for ((slot, p), v) in net.params_mut().into_iter().zip(velocity.iter_mut()) {
                let g = &grads.0[slot];
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = mom * *vi + *gi + wd * *pi;
                    *pi -= lr * *vi;
                }
            }
            step += 1;
        }
    }
    Ok(net)
}

/// Test accuracy in percent. With `classes` given, predictions are restricted
/// to those classes.
pub fn accuracy(net: &NetworkInstance, test: &LabeledImageSet, classes: Option<&[usize]>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let c = net.num_classes();
    let allowed: Vec<bool> = match classes {
        Some(list) => (0..c).map(|k| list.contains(&k)).collect(),
        None => vec![true; c],
    };
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(500) {
        let logits = net.logits(&net.embed(&test.images.select(chunk), Mode::Eval)?);
        for (row, &i) in logits.data().chunks(c).zip(chunk) {
            let mut best = None;
            for (j, v) in row.iter().enumerate() {
                if allowed[j] && best.is_none_or(|(_, bv)| *v > bv) {
                    best = Some((j, *v));
                }
            }
            if best.map(|(j, _)| j) == Some(test.labels[i]) {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

fn run_grid(
    sets: &[LabeledImageSet],
    test: &LabeledImageSet,
    arch: &EmbedderConfig,
    protocol: &EvalProtocol,
) -> Result<EvalResult> {
    if protocol.nets == 0 || sets.is_empty() {
        return Err(Error::Config("need at least one set and one network per set".into()));
    }
    let start = Instant::now();
    let jobs: Vec<(usize, usize)> = (0..sets.len()).flat_map(|r| (0..protocol.nets).map(move |m| (r, m))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(protocol.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let accs: Vec<Result<f64>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, m)| {
                let seed = derive_seed(protocol.seed, "eval", (r * protocol.nets + m) as u64);
                let net = train_on_set(&sets[r], arch, &protocol.recipe, seed)?;
                let acc = accuracy(&net, test, None)?;
                info!("{} set {r} net {m}: {acc:.2}%", arch.label());
                Ok(acc)
            })
            .collect()
    });
    let accs = accs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_accuracies(arch.label(), accs, start.elapsed().as_secs_f64()))
}

/// Trains `protocol.nets` networks on each set and pools all accuracies.
pub fn evaluate_synthetic(
    sets: &[SyntheticSet],
    test: &LabeledImageSet,
    arch: &EmbedderConfig,
    protocol: &EvalProtocol,
) -> Result<EvalResult> {
    if let Some(first) = sets.first() {
        if let Some(bad) = sets.iter().find(|s| s.ipc() != first.ipc() || s.num_classes() != first.num_classes()) {
            return Err(Error::Contract(format!(
                "mixed sets: ipc {} vs {}, classes {} vs {}",
                first.ipc(),
                bad.ipc(),
                first.num_classes(),
                bad.num_classes()
            )));
        }
    }
    let labeled: Vec<LabeledImageSet> = sets.iter().map(SyntheticSet::to_labeled).collect();
    run_grid(&labeled, test, arch, protocol)
}

/// Same protocol on plain labelled sets (coresets, the whole training set).
pub fn evaluate_sets(
    sets: &[LabeledImageSet],
    test: &LabeledImageSet,
    arch: &EmbedderConfig,
    protocol: &EvalProtocol,
) -> Result<EvalResult> {
    run_grid(sets, test, arch, protocol)
}

/// One result per test architecture label (`convnet3-bn`, `alexnet-bn`, ...).
pub fn cross_architecture_eval(
    sets: &[SyntheticSet],
    test: &LabeledImageSet,
    test_archs: &[String],
    protocol: &EvalProtocol,
) -> Result<Vec<EvalResult>> {
    let first = sets.first().ok_or_else(|| Error::Config("no synthetic sets given".into()))?;
    let shape = first.image_shape();
    let configs = test_archs
        .iter()
        .map(|l| EmbedderConfig::from_label(l, shape, first.num_classes()))
        .collect::<Result<Vec<_>>>()?;
    configs.iter().map(|cfg| evaluate_synthetic(sets, test, cfg, protocol)).collect()
}

/// The training-time augmentation: one op kind per batch, fresh parameters per image.
pub fn augment_for_training<R: Rng + ?Sized>(cfg: &AugConfig, x: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    augment_batch(cfg, x, rng)
}
