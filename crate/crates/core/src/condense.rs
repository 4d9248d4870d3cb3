//! Distribution matching: learn synthetic images whose class-wise embedding
//! means match those of the real data under randomly sampled networks.

use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{apply_aug, apply_aug_backward, AugConfig, AugRanges, AugmentationParams};
use crate::datasets::{ClassIndex, LabeledImageSet};
use crate::error::{Error, Result};
use crate::networks::{
    sample_network, AccuracyBucket, CheckpointPool, EmbedderConfig, Mode, NetworkInstance, SamplerStrategy,
};
use crate::repro::{config_hash, stream};
use crate::synthetic::{SyntheticMeta, SyntheticSet};
use crate::tensor::{Real, Tensor};

/// Where `P_theta` comes from, in a form that can live in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerSpec {
    RandomInit,
    CheckpointPool {
        dir: PathBuf,
        #[serde(default)]
        bucket: Option<AccuracyBucket>,
    },
}

impl SamplerSpec {
    pub fn resolve(&self) -> Result<SamplerStrategy> {
        Ok(match self {
            SamplerSpec::RandomInit => SamplerStrategy::RandomInit,
            SamplerSpec::CheckpointPool { dir, bucket } => SamplerStrategy::CheckpointPool {
                pool: CheckpointPool::load_dir(dir)?,
                bucket: *bucket,
            },
        })
    }
}

/// How batch-norm networks normalise during matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Statistics from one pass over the augmented synthetic images of every
    /// class, frozen for the per-class passes.
    SyntheticStats,
    /// Each per-class batch is normalised with its own statistics.
    PerClassBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondenseConfig {
    pub dataset: String,
    pub ipc: usize,
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub real_batch: usize,
    pub embedder: EmbedderConfig,
    pub sampler: SamplerSpec,
    pub augmentation: AugConfig,
    pub norm_mode: NormMode,
    pub nets_per_iter: usize,
    pub seed: u64,
    pub workers: usize,
    /// Optimise only these classes; the others keep their initial images.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
}

/// `1` up to 50 images per class, `10` from 100 on.
pub fn default_lr(ipc: usize) -> f64 {
    if ipc >= 100 {
        10.0
    } else {
        1.0
    }
}

/// 20000 iterations, or 10000 for 64x64 inputs.
pub fn default_iterations(image_shape: [usize; 3]) -> usize {
    if image_shape[1] >= 64 {
        10_000
    } else {
        20_000
    }
}

impl CondenseConfig {
    pub fn defaults(dataset: &str, image_shape: [usize; 3], num_classes: usize, ipc: usize) -> Self {
        Self {
            dataset: dataset.to_string(),
            ipc,
            iterations: default_iterations(image_shape),
            lr: default_lr(ipc),
            momentum: 0.5,
            real_batch: 256,
            embedder: EmbedderConfig::default_for_input(image_shape, num_classes),
            sampler: SamplerSpec::RandomInit,
            augmentation: AugConfig::default_for_channels(image_shape[0]),
            norm_mode: NormMode::SyntheticStats,
            nets_per_iter: 1,
            seed: 0,
            workers: 1,
            classes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.ipc == 0 {
            problems.push("ipc must be at least 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.real_batch == 0 {
            problems.push("real_batch must be at least 1".into());
        }
        if self.nets_per_iter == 0 {
            problems.push("nets_per_iter must be at least 1".into());
        }
        if self.workers == 0 {
            problems.push("workers must be at least 1".into());
        }
        if self.augmentation.strategies.is_empty() {
            problems.push("augmentation strategy list is empty".into());
        }
        if let Err(e) = self.augmentation.ranges.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.embedder.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Draws `n` members of `pool`: without replacement when there are enough,
/// with replacement otherwise.
pub fn sample_batch<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= n {
        index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

fn init_class(index: &ClassIndex, class: usize, ipc: usize, seed: u64) -> Result<Vec<usize>> {
    let pool = index.of(class);
    if pool.is_empty() {
        return Err(Error::Contract(format!("class {class} has no real images")));
    }
    let mut rng = stream(seed, "init", class as u64);
    Ok(sample_batch(pool, ipc, &mut rng))
}

/// Synthetic set initialised with randomly chosen real images of each class.
pub fn init_synthetic(real: &LabeledImageSet, ipc: usize, seed: u64) -> Result<SyntheticSet> {
    let all: Vec<usize> = (0..real.num_classes).collect();
    init_active(real, ipc, seed, &all)
}

/// Like `init_synthetic`, but only `active` classes must have real images;
/// the others are initialised from real images when there are any, zeros otherwise.
fn init_active(real: &LabeledImageSet, ipc: usize, seed: u64, active: &[usize]) -> Result<SyntheticSet> {
    if ipc == 0 {
        return Err(Error::Config("ipc must be at least 1".into()));
    }
    let index = real.class_index();
    let item = real.images.item_len();
    let mut data = Vec::with_capacity(ipc * real.num_classes * item);
    for c in 0..real.num_classes {
        if active.contains(&c) || !index.of(c).is_empty() {
            for i in init_class(&index, c, ipc, seed)? {
                data.extend_from_slice(real.images.item(i));
            }
        } else {
            data.resize(data.len() + ipc * item, 0.0);
        }
    }
    let mut shape = real.images.shape().to_vec();
    shape[0] = ipc * real.num_classes;
    let meta = SyntheticMeta {
        dataset: String::new(),
        num_classes: real.num_classes,
        ipc,
        channel_mean: real.channel_mean.clone(),
        channel_std: real.channel_std.clone(),
        seed,
        config_hash: String::new(),
        method: "dm".into(),
        selection: None,
    };
    SyntheticSet::new(Tensor::new(shape, data)?, meta)
}

/// The real and synthetic batch of one class plus the shared transform.
#[derive(Clone, Debug)]
pub struct ClassBatch<T> {
    pub class: usize,
    pub real: Tensor<T>,
    pub synth: Tensor<T>,
    pub aug: AugmentationParams,
}

impl<T: Real> ClassBatch<T> {
    /// Checks that both sides belong to `class`.
    pub fn new(
        class: usize,
        real: Tensor<T>,
        real_labels: &[usize],
        synth: Tensor<T>,
        synth_labels: &[usize],
        aug: AugmentationParams,
    ) -> Result<Self> {
        if let Some(l) = real_labels.iter().chain(synth_labels).find(|l| **l != class) {
            return Err(Error::Contract(format!("label {l} in the batch pair of class {class}")));
        }
        if real_labels.len() != real.batch() || synth_labels.len() != synth.batch() {
            return Err(Error::Contract("label count does not match batch size".into()));
        }
        Ok(Self { class, real, synth, aug })
    }
}

fn check_batches<T: Real>(batches: &[ClassBatch<T>]) -> Result<()> {
    for (i, b) in batches.iter().enumerate() {
        if b.real.batch() == 0 || b.synth.batch() == 0 {
            return Err(Error::Contract(format!("empty batch for class {}", b.class)));
        }
        if batches[..i].iter().any(|o| o.class == b.class) {
            return Err(Error::Contract(format!("class {} appears twice", b.class)));
        }
    }
    Ok(())
}

/// Loss of one class and, when asked, its gradient w.r.t. the synthetic batch.
fn class_term<T: Real>(
    net: &NetworkInstance<T>,
    b: &ClassBatch<T>,
    ranges: &AugRanges,
    mode: Mode,
    want_grad: bool,
) -> Result<(f64, Option<Tensor<T>>)> {
    let real_emb = net.embed(&apply_aug(&b.aug, ranges, &b.real)?, mode)?;
    let mu_real = real_emb.mean_rows();
    let synth_aug = apply_aug(&b.aug, ranges, &b.synth)?;
    let (synth_emb, tape) = if want_grad {
        let (e, t) = net.embed_tape(&synth_aug, mode)?;
        (e, Some(t))
    } else {
        (net.embed(&synth_aug, mode)?, None)
    };
    let mu_synth = synth_emb.mean_rows();
    let diff: Vec<T> = mu_synth.iter().zip(&mu_real).map(|(s, r)| *s - *r).collect();
    let loss = diff.iter().map(|d| d.as_f64() * d.as_f64()).sum();
    let Some(tape) = tape else {
        return Ok((loss, None));
    };
    let n = synth_emb.batch();
    let scale = T::lit(2.0) / T::from_usize(n).unwrap();
    let row: Vec<T> = diff.iter().map(|d| *d * scale).collect();
    let grad_emb = Tensor::new(vec![n, row.len()], row.repeat(n))?;
    let g_aug = net
        .embed_backward(tape, &grad_emb, None, true)?
        .expect("input gradient requested");
    Ok((loss, Some(apply_aug_backward(&b.aug, &g_aug)?)))
}

/// `sum_c || mean psi(A(real_c)) - mean psi(A(synth_c)) ||^2`.
pub fn dm_loss<T: Real>(net: &NetworkInstance<T>, batches: &[ClassBatch<T>], ranges: &AugRanges, mode: Mode) -> Result<f64> {
    check_batches(batches)?;
    let mut total = 0.0;
    for b in batches {
        total += class_term(net, b, ranges, mode, false)?.0;
    }
    Ok(total)
}

/// Per-class losses and the gradient of the summed loss w.r.t. each synthetic batch.
pub fn dm_loss_grad<T: Real>(
    net: &NetworkInstance<T>,
    batches: &[ClassBatch<T>],
    ranges: &AugRanges,
    mode: Mode,
) -> Result<(Vec<f64>, Vec<Tensor<T>>)> {
    check_batches(batches)?;
    let mut losses = Vec::with_capacity(batches.len());
    let mut grads = Vec::with_capacity(batches.len());
    for b in batches {
        let (l, g) = class_term(net, b, ranges, mode, true)?;
        losses.push(l);
        grads.push(g.expect("gradient requested"));
    }
    Ok((losses, grads))
}

/// Copy of `net` whose batch-norm layers use the statistics of one train-mode
/// pass over the augmented synthetic images of `classes`.
pub fn set_norm_statistics(
    net: &NetworkInstance,
    synth: &SyntheticSet,
    classes: &[usize],
    aug: &[AugmentationParams],
    ranges: &AugRanges,
) -> Result<NetworkInstance> {
    if !net.has_batch_norm() {
        return Err(Error::Contract("set_norm_statistics needs a batch-norm network".into()));
    }
    if classes.len() != aug.len() {
        return Err(Error::Contract("one augmentation per class is required".into()));
    }
    let parts = classes
        .iter()
        .zip(aug)
        .map(|(&c, a)| apply_aug(a, ranges, &synth.class_images(c)))
        .collect::<Result<Vec<_>>>()?;
    let all = Tensor::concat(&parts.iter().collect::<Vec<_>>())?;
    let stats = net.train_batch_stats(&all)?;
    let mut frozen = net.clone();
    frozen.freeze_batch_stats(&stats);
    Ok(frozen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    /// Mean loss over the iterations since the previous point (at most 100).
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondenseReport {
    pub config_hash: String,
    pub iterations: usize,
    pub loss_curve: Vec<LossPoint>,
    pub wall_time_secs: f64,
}

/// What the per-iteration callback sees.
pub struct IterationInfo<'a> {
    pub iteration: usize,
    pub loss: f64,
    pub classes: &'a [usize],
    pub class_losses: &'a [f64],
    /// Transforms drawn for each class, per sampled network.
    pub aug: &'a [Vec<AugmentationParams>],
}

pub fn condense(real: &LabeledImageSet, cfg: &CondenseConfig) -> Result<(SyntheticSet, CondenseReport)> {
    condense_with(real, cfg, |_| {})
}

/// Runs `cfg.iterations` steps of distribution matching starting from real-image
/// initialisation. `on_iter` is called after every update.
pub fn condense_with(
    real: &LabeledImageSet,
    cfg: &CondenseConfig,
    mut on_iter: impl FnMut(&IterationInfo<'_>),
) -> Result<(SyntheticSet, CondenseReport)> {
    cfg.validate()?;
    let shape = real.image_shape();
    if cfg.embedder.input_shape != shape || cfg.embedder.num_classes != real.num_classes {
        return Err(Error::Config(format!(
            "embedder expects {:?} with {} classes, data is {:?} with {}",
            cfg.embedder.input_shape, cfg.embedder.num_classes, shape, real.num_classes
        )));
    }
    let classes: Vec<usize> = match &cfg.classes {
        Some(list) => {
            let mut l = list.clone();
            l.sort_unstable();
            l.dedup();
            if let Some(bad) = l.iter().find(|c| **c >= real.num_classes) {
                return Err(Error::Config(format!("class {bad} is out of range")));
            }
            l
        }
        None => (0..real.num_classes).collect(),
    };
    let start = Instant::now();
    let hash = cfg.hash();
    let strategy = cfg.sampler.resolve()?;
    let index = real.class_index();
    let mut synth = init_active(real, cfg.ipc, cfg.seed, &classes)?;
    synth.meta.dataset.clone_from(&cfg.dataset);
    synth.meta.config_hash.clone_from(&hash);

    let mut sampler_rng = stream(cfg.seed, "sampler", 0);
    let mut real_rngs: Vec<_> = classes.iter().map(|&c| stream(cfg.seed, "real", c as u64)).collect();
    let mut aug_rngs: Vec<_> = classes.iter().map(|&c| stream(cfg.seed, "aug", c as u64)).collect();
    let mut velocity: Vec<Vec<f32>> = classes.iter().map(|_| vec![0.0; cfg.ipc * real.images.item_len()]).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ranges = &cfg.augmentation.ranges;
    let lr = cfg.lr as f32;
    let momentum = cfg.momentum as f32;
    let inv_nets = 1.0 / cfg.nets_per_iter as f64;

    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut curve = Vec::new();
    let mut window_start = 0;
    for it in 0..cfg.iterations {
        let mut class_losses = vec![0.0; classes.len()];
        let mut class_grads: Vec<Option<Tensor<f32>>> = vec![None; classes.len()];
        let mut aug_log = Vec::with_capacity(cfg.nets_per_iter);
        for _ in 0..cfg.nets_per_iter {
            let net = sample_network(&strategy, &cfg.embedder, &mut sampler_rng)?;
            let mut augs = Vec::with_capacity(classes.len());
            let mut batches = Vec::with_capacity(classes.len());
            for (k, &c) in classes.iter().enumerate() {
                augs.push(cfg.augmentation.sample(shape, &mut aug_rngs[k])?);
                batches.push(sample_batch(index.of(c), cfg.real_batch, &mut real_rngs[k]));
            }
            let (net, mode) = if net.has_batch_norm() && cfg.norm_mode == NormMode::SyntheticStats {
                (set_norm_statistics(&net, &synth, &classes, &augs, ranges)?, Mode::Eval)
            } else {
                (net, Mode::Train)
            };
            let results: Vec<Result<(f64, Option<Tensor<f32>>)>> = pool.install(|| {
                (0..classes.len())
                    .into_par_iter()
                    .map(|k| {
                        let b = ClassBatch {
                            class: classes[k],
                            real: real.images.select(&batches[k]),
                            synth: synth.class_images(classes[k]),
                            aug: augs[k].clone(),
                        };
                        class_term(&net, &b, ranges, mode, true)
                    })
                    .collect()
            });
            for (k, r) in results.into_iter().enumerate() {
                let (l, g) = r?;
                let g = g.expect("gradient requested");
                class_losses[k] += l * inv_nets;
                match &mut class_grads[k] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *v;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
            aug_log.push(augs);
        }
        let loss: f64 = class_losses.iter().sum();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                class_losses,
            });
        }
        for (k, &c) in classes.iter().enumerate() {
            let g = class_grads[k].take().expect("every class has a gradient");
            let rows = synth.class_rows(c);
            let item = synth.images.item_len();
            let pixels = &mut synth.images.data_mut()[rows.start * item..rows.end * item];
            let scale = inv_nets as f32;
            for ((p, v), gv) in pixels.iter_mut().zip(velocity[k].iter_mut()).zip(g.data()) {
                *v = momentum * *v + *gv * scale;
                *p -= lr * *v;
            }
        }
        if !synth.images.all_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                class_losses,
            });
        }
        losses.push(loss);
        on_iter(&IterationInfo {
            iteration: it,
            loss,
            classes: &classes,
            class_losses: &class_losses,
            aug: &aug_log,
        });
        let done = it + 1;
        if done % 100 == 0 || done == cfg.iterations {
            let window = &losses[window_start..];
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            curve.push(LossPoint {
                iteration: done,
                loss: mean,
            });
            window_start = losses.len();
            info!("iteration {done}/{}: loss {mean:.4}", cfg.iterations);
        }
        debug!("iteration {it}: loss {loss}");
    }
    let report = CondenseReport {
        config_hash: hash,
        iterations: cfg.iterations,
        loss_curve: curve,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((synth, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::AugOp;
    use crate::datasets::make_toy_dataset;
    use crate::networks::{Activation, ArchKind, NormKind, Pooling};
    use crate::testutil::{central_diff, randn, rel_err};

    fn flatten_net(shape: [usize; 3], classes: usize) -> NetworkInstance<f64> {
        NetworkInstance::<f32>::build(&EmbedderConfig::flatten(shape, classes), 0).unwrap().cast()
    }

    fn pair(class: usize, real: Vec<f64>, synth: Vec<f64>) -> ClassBatch<f64> {
        let n = real.len() / 2;
        let m = synth.len() / 2;
        ClassBatch {
            class,
            real: Tensor::new(vec![n, 1, 1, 2], real).unwrap(),
            synth: Tensor::new(vec![m, 1, 1, 2], synth).unwrap(),
            aug: AugmentationParams::identity(),
        }
    }

    fn toy_config(ipc: usize, iterations: usize) -> CondenseConfig {
        let mut cfg = CondenseConfig::defaults("toy", [1, 8, 8], 4, ipc);
        cfg.iterations = iterations;
        cfg.embedder.width = 16;
        cfg.embedder.depth = 2;
        cfg.real_batch = 32;
        cfg
    }

    #[test]
    fn identical_batches_have_zero_loss() {
        let net = NetworkInstance::<f32>::build(&EmbedderConfig::convnet([1, 8, 8], 4), 1).unwrap();
        let x = randn(&[5, 1, 8, 8], 2).cast::<f32>();
        let aug = AugmentationParams {
            ops: vec![AugOp::Rotate { degrees: 7.0 }],
        };
        let b = ClassBatch {
            class: 0,
            real: x.clone(),
            synth: x,
            aug,
        };
        assert_eq!(dm_loss(&net, &[b], &AugRanges::default(), Mode::Train).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_identity_embedding_losses() {
        let net = flatten_net([1, 1, 2], 2);
        let r = AugRanges::default();
        let one = pair(0, vec![1.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(dm_loss(&net, &[one], &r, Mode::Eval).unwrap(), 1.0);
        // ||(0.5, 0.5)||^2 = 0.5 for each class
        let a = pair(0, vec![0.5, 0.5], vec![0.0, 0.0]);
        let b = pair(1, vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(dm_loss(&net, &[a, b], &r, Mode::Eval).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_or_duplicate_classes_are_contract_errors() {
        let t = Tensor::<f32>::zeros(&[2, 1, 1, 2]);
        let res = ClassBatch::new(0, t.clone(), &[0, 1], t.clone(), &[0, 0], AugmentationParams::identity());
        assert!(matches!(res, Err(Error::Contract(_))));
        let net = flatten_net([1, 1, 2], 2);
        let p = pair(0, vec![1.0, 0.0], vec![0.0, 0.0]);
        let res = dm_loss(&net, &[p.clone(), p], &AugRanges::default(), Mode::Eval);
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ranges = AugRanges::default();
        for (norm, mode, aug) in [
            (NormKind::Instance, Mode::Train, AugOp::Rotate { degrees: 9.0 }),
            (NormKind::Batch, Mode::Train, AugOp::Scale { sx: 0.9, sy: 1.1 }),
            (NormKind::None, Mode::Eval, AugOp::Crop { dy: 1, dx: 0 }),
        ] {
            let cfg = EmbedderConfig {
                arch: ArchKind::ConvNet,
                depth: 2,
                width: 4,
                activation: Activation::Sigmoid,
                norm,
                pooling: Pooling::Avg,
                input_shape: [2, 4, 4],
                num_classes: 2,
            };
            let net = NetworkInstance::<f32>::build(&cfg, 3).unwrap().cast::<f64>();
            let aug = AugmentationParams { ops: vec![aug] };
            let batches = vec![
                ClassBatch {
                    class: 0,
                    real: randn(&[6, 2, 4, 4], 10),
                    synth: randn(&[2, 2, 4, 4], 11),
                    aug: aug.clone(),
                },
                ClassBatch {
                    class: 1,
                    real: randn(&[6, 2, 4, 4], 12),
                    synth: randn(&[3, 2, 4, 4], 13),
                    aug,
                },
            ];
            let (_, grads) = dm_loss_grad(&net, &batches, &ranges, mode).unwrap();
            for k in 0..2 {
                let mut v = batches[k].synth.data().to_vec();
                let coords: Vec<usize> = (0..v.len()).collect();
                let numeric = central_diff(&mut v, &coords, 1e-6, |x| {
                    let mut bs = batches.clone();
                    bs[k].synth = Tensor::new(bs[k].synth.shape().to_vec(), x.to_vec()).unwrap();
                    dm_loss(&net, &bs, &ranges, mode).unwrap()
                });
                let e = rel_err(grads[k].data(), &numeric);
                assert!(e < 1e-3, "{norm:?} class {k}: rel err {e}");
            }
        }
    }

    #[test]
    fn init_copies_real_images_of_the_class() {
        let real = make_toy_dataset(0, 16);
        let s = init_synthetic(&real, 1, 5).unwrap();
        assert_eq!(s.images.batch(), 4);
        for c in 0..4 {
            let img = s.images.item(c);
            assert!(real.class_index().of(c).iter().any(|&i| real.images.item(i) == img));
        }
        assert_eq!(s, init_synthetic(&real, 1, 5).unwrap());
        assert!(matches!(init_synthetic(&real, 0, 5), Err(Error::Config(_))));
        let big = init_synthetic(&real, 20, 5).unwrap();
        assert_eq!(big.images.batch(), 80);
    }

    #[test]
    fn zero_iterations_return_the_initialisation() {
        let real = make_toy_dataset(0, 16);
        let (s, report) = condense(&real, &toy_config(2, 0)).unwrap();
        assert_eq!(s.images, init_synthetic(&real, 2, 0).unwrap().images);
        assert!(report.loss_curve.is_empty());
    }

    #[test]
    fn single_class_run_matches_joint_run() {
        let real = make_toy_dataset(0, 32);
        let mut cfg = toy_config(2, 6);
        cfg.augmentation = AugConfig::default_for_channels(1);
        let (joint, _) = condense(&real, &cfg).unwrap();
        for c in [1, 3] {
            cfg.classes = Some(vec![c]);
            let (alone, _) = condense(&real, &cfg).unwrap();
            assert_eq!(alone.class_images(c), joint.class_images(c), "class {c}");
        }
    }

    #[test]
    fn labels_are_fixed_and_loss_trends_down() {
        let real = make_toy_dataset(0, 64);
        let mut cfg = toy_config(1, 300);
        cfg.augmentation = AugConfig::identity();
        let init = init_synthetic(&real, 1, cfg.seed).unwrap();
        let (s, report) = condense(&real, &cfg).unwrap();
        assert_eq!(s.labels(), init.labels());
        let first = report.loss_curve.first().unwrap().loss;
        let last = report.loss_curve.last().unwrap().loss;
        assert!(last < first, "smoothed loss {first} -> {last}");
        assert_eq!(report.loss_curve.len(), 3);
    }

    #[test]
    fn divergence_reports_iteration_and_class_losses() {
        let real = make_toy_dataset(0, 16);
        let mut cfg = toy_config(1, 200);
        cfg.embedder = EmbedderConfig::flatten([1, 8, 8], 4);
        cfg.augmentation = AugConfig::identity();
        cfg.lr = 1e6;
        cfg.momentum = 0.9;
        match condense(&real, &cfg) {
            Err(Error::NonFiniteLoss { iteration, class_losses }) => {
                assert!(iteration < 200);
                assert_eq!(class_losses.len(), 4);
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn norm_statistics_come_from_all_synthetic_classes() {
        let real = make_toy_dataset(0, 16);
        let s = init_synthetic(&real, 2, 0).unwrap();
        let mut cfg = EmbedderConfig::convnet([1, 8, 8], 4);
        cfg.width = 8;
        let ranges = AugRanges::default();
        let classes = [0, 1, 2, 3];
        let aug = vec![AugmentationParams::identity(); 4];

        let inst = NetworkInstance::build(&cfg, 1).unwrap();
        assert!(matches!(
            set_norm_statistics(&inst, &s, &classes, &aug, &ranges),
            Err(Error::Contract(_))
        ));

        cfg.norm = NormKind::Batch;
        let net = NetworkInstance::build(&cfg, 1).unwrap();
        let a = set_norm_statistics(&net, &s, &classes, &aug, &ranges).unwrap();
        let b = set_norm_statistics(&net, &s, &classes, &aug, &ranges).unwrap();
        assert_eq!(a.bn_running_stats(), b.bn_running_stats());
        // eval mode with frozen statistics reproduces the train-mode pass
        let train = net.embed(&s.images, Mode::Train).unwrap();
        let eval = a.embed(&s.images, Mode::Eval).unwrap();
        assert!(train.max_abs_diff(&eval) < 1e-4);
    }

    #[test]
    fn constant_images_give_the_conv_output_mean() {
        // With constant input the first conv's output is known in closed form,
        // so the frozen mean of the first BN layer can be checked directly.
        let mut cfg = EmbedderConfig::convnet([1, 8, 8], 4);
        cfg.width = 3;
        cfg.depth = 1;
        cfg.norm = NormKind::Batch;
        let net = NetworkInstance::build(&cfg, 4).unwrap();
        let value = 0.7f32;
        let meta = SyntheticMeta {
            dataset: "toy".into(),
            num_classes: 4,
            ipc: 2,
            channel_mean: vec![0.0],
            channel_std: vec![1.0],
            seed: 0,
            config_hash: String::new(),
            method: "dm".into(),
            selection: None,
        };
        let s = SyntheticSet::new(Tensor::full(&[8, 1, 8, 8], value), meta).unwrap();
        let frozen = set_norm_statistics(&net, &s, &[0, 1, 2, 3], &vec![AugmentationParams::identity(); 4], &AugRanges::default())
            .unwrap();
        let (mean, _) = &frozen.bn_running_stats()[0];
        let params = net.params();
        let (weight, bias) = (params[0].1, params[1].1);
        for o in 0..3 {
            let mut total = 0.0f64;
            for y in 0..8i32 {
                for x in 0..8i32 {
                    let mut acc = bias[o] as f64;
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (iy, ix) = (y + ky - 1, x + kx - 1);
                            if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                acc += weight[o * 9 + (ky * 3 + kx) as usize] as f64 * value as f64;
                            }
                        }
                    }
                    total += acc;
                }
            }
            let expected = total / 64.0;
            assert!((mean[o] as f64 - expected).abs() < 1e-5, "channel {o}: {} vs {expected}", mean[o]);
        }
    }

    #[test]
    fn sample_batch_policy() {
        let mut rng = stream(0, "t", 0);
        let pool = [3, 5, 7];
        let mut full = sample_batch(&pool, 3, &mut rng);
        full.sort_unstable();
        assert_eq!(full, vec![3, 5, 7]);
        let over = sample_batch(&pool, 10, &mut rng);
        assert_eq!(over.len(), 10);
        assert!(over.iter().all(|i| pool.contains(i)));
    }

    #[test]
    fn config_validation_lists_problems() {
        let mut cfg = toy_config(1, 1);
        cfg.lr = -1.0;
        cfg.real_batch = 0;
        let Err(Error::Config(msg)) = cfg.validate() else {
            panic!("expected config error");
        };
        assert!(msg.contains("lr") && msg.contains("real_batch"), "{msg}");
        cfg = toy_config(1, 1);
        cfg.augmentation.strategies = vec![];
        assert!(cfg.validate().is_err());
        assert_eq!(default_lr(100), 10.0);
        assert_eq!(default_lr(50), 1.0);
    }
}
