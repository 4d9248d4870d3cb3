use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{build_body, ArchKind, EmbedderConfig};
use super::layers::{
    activate, activate_backward, global_avg_pool, global_avg_pool_backward, pool2, pool2_backward, Activation,
    BatchNorm, BatchStats, Conv2d, GroupNorm, Linear, Mode, PoolKind, BN_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    GroupNorm(GroupNorm<T>),
    BatchNorm(BatchNorm<T>),
    Act(Activation),
    Pool(PoolKind),
    GlobalPool,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual { body: Vec<Layer<T>>, shortcut: Vec<Layer<T>> },
}

#[derive(Debug)]
pub enum Cache<T> {
    Conv { input: Tensor<T> },
    GroupNorm { xhat: Vec<T>, inv_std: Vec<T> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, batch_mode: bool },
    Act { output: Tensor<T> },
    Pool { input_shape: Vec<usize>, argmax: Vec<u32> },
    GlobalPool { input_shape: Vec<usize> },
    Residual { body: Vec<Cache<T>>, shortcut: Vec<Cache<T>> },
}

/// What a forward pass recorded: per-layer caches (when requested) and the
/// batch statistics seen by every batch-norm layer in train mode, in
/// depth-first layer order.
#[derive(Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
    pub bn_stats: Vec<BatchStats<T>>,
    input_shape: Vec<usize>,
    feature_shape: Vec<usize>,
}

struct Pass<'a, T> {
    mode: Mode,
    record: bool,
    bn_stats: &'a mut Vec<BatchStats<T>>,
}

fn run<T: Real>(layers: &[Layer<T>], mut x: Tensor<T>, pass: &mut Pass<'_, T>) -> (Tensor<T>, Vec<Cache<T>>) {
    let mut caches = Vec::with_capacity(if pass.record { layers.len() } else { 0 });
    for layer in layers {
        let (y, cache) = match layer {
            Layer::Conv(conv) => {
                let y = conv.forward(&x);
                (y, Cache::Conv { input: x })
            }
            Layer::GroupNorm(gn) => {
                let (y, xhat, inv_std) = gn.forward(&x);
                (y, Cache::GroupNorm { xhat, inv_std })
            }
            Layer::BatchNorm(bn) => {
                let batch_mode = pass.mode == Mode::Train;
                let (y, xhat, inv_std) = if batch_mode {
                    let stats = BatchNorm::batch_stats(&x);
                    let out = bn.forward_with(&x, &stats.mean, &stats.var);
                    pass.bn_stats.push(stats);
                    out
                } else {
                    bn.forward_with(&x, &bn.running_mean, &bn.running_var)
                };
                (y, Cache::BatchNorm { xhat, inv_std, batch_mode })
            }
            Layer::Act(a) => {
                let y = activate(*a, &x);
                let output = if pass.record { y.clone() } else { Tensor::zeros(&[0]) };
                (y, Cache::Act { output })
            }
            Layer::Pool(kind) => {
                let input_shape = x.shape().to_vec();
                let (y, argmax) = pool2(*kind, &x);
                (y, Cache::Pool { input_shape, argmax })
            }
            Layer::GlobalPool => {
                let input_shape = x.shape().to_vec();
                (global_avg_pool(&x), Cache::GlobalPool { input_shape })
            }
            Layer::Residual { body, shortcut } => {
                let (mut main, body_caches) = run(body, x.clone(), pass);
                let (side, short_caches) = run(shortcut, x, pass);
                for (m, s) in main.data_mut().iter_mut().zip(side.data()) {
                    *m += *s;
                }
                (
                    main,
                    Cache::Residual {
                        body: body_caches,
                        shortcut: short_caches,
                    },
                )
            }
        };
        if pass.record {
            caches.push(cache);
        }
        x = y;
    }
    (x, caches)
}

fn run_backward<T: Real>(
    layers: &[Layer<T>],
    caches: Vec<Cache<T>>,
    mut grad: Tensor<T>,
    mut grads: Option<&mut [Vec<T>]>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        // The first layer's input gradient is only needed when the caller asks for it.
        let need = need_input_grad || i > 0;
        let g = grads.as_deref_mut();
        grad = match (layer, cache) {
            (Layer::Conv(conv), Cache::Conv { input }) => conv.backward(&input, &grad, g, need)?,
            (Layer::GroupNorm(gn), Cache::GroupNorm { xhat, inv_std }) => gn.backward(&xhat, &inv_std, &grad, g),
            (Layer::BatchNorm(bn), Cache::BatchNorm { xhat, inv_std, batch_mode }) => {
                bn.backward(&xhat, &inv_std, batch_mode, &grad, g)
            }
            (Layer::Act(a), Cache::Act { output }) => activate_backward(*a, &output, &grad),
            (Layer::Pool(kind), Cache::Pool { input_shape, argmax }) => {
                pool2_backward(*kind, &input_shape, &argmax, &grad)
            }
            (Layer::GlobalPool, Cache::GlobalPool { input_shape }) => global_avg_pool_backward(&input_shape, &grad),
            (Layer::Residual { body, shortcut }, Cache::Residual { body: bc, shortcut: sc }) => {
                let dmain = run_backward(body, bc, grad.clone(), grads.as_deref_mut(), true)
                    .expect("input grad requested");
                let mut dside = if shortcut.is_empty() {
                    grad
                } else {
                    run_backward(shortcut, sc, grad, grads.as_deref_mut(), true).expect("input grad requested")
                };
                for (s, m) in dside.data_mut().iter_mut().zip(dmain.data()) {
                    *s += *m;
                }
                dside
            }
            _ => unreachable!("cache does not match layer"),
        };
    }
    Some(grad)
}

fn visit_params<'a, T>(layers: &'a [Layer<T>], out: &mut Vec<(usize, &'a Vec<T>)>) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => out.extend([(c.slot, &c.weight), (c.slot + 1, &c.bias)]),
            Layer::GroupNorm(n) => out.extend([(n.slot, &n.gamma), (n.slot + 1, &n.beta)]),
            Layer::BatchNorm(n) => out.extend([(n.slot, &n.gamma), (n.slot + 1, &n.beta)]),
            Layer::Residual { body, shortcut } => {
                visit_params(body, out);
                visit_params(shortcut, out);
            }
            Layer::Act(_) | Layer::Pool(_) | Layer::GlobalPool => {}
        }
    }
}

fn visit_params_mut<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<(usize, &'a mut Vec<T>)>) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => out.extend([(c.slot, &mut c.weight), (c.slot + 1, &mut c.bias)]),
            Layer::GroupNorm(n) => out.extend([(n.slot, &mut n.gamma), (n.slot + 1, &mut n.beta)]),
            Layer::BatchNorm(n) => out.extend([(n.slot, &mut n.gamma), (n.slot + 1, &mut n.beta)]),
            Layer::Residual { body, shortcut } => {
                visit_params_mut(body, out);
                visit_params_mut(shortcut, out);
            }
            Layer::Act(_) | Layer::Pool(_) | Layer::GlobalPool => {}
        }
    }
}

fn visit_bn_mut<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut BatchNorm<T>>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm(bn) => out.push(bn),
            Layer::Residual { body, shortcut } => {
                visit_bn_mut(body, out);
                visit_bn_mut(shortcut, out);
            }
            _ => {}
        }
    }
}

fn visit_bn<'a, T>(layers: &'a [Layer<T>], out: &mut Vec<&'a BatchNorm<T>>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm(bn) => out.push(bn),
            Layer::Residual { body, shortcut } => {
                visit_bn(body, out);
                visit_bn(shortcut, out);
            }
            _ => {}
        }
    }
}

fn cast_layers<T: Real, U: Real>(layers: &[Layer<T>]) -> Vec<Layer<U>> {
    let cv = |v: &Vec<T>| -> Vec<U> { v.iter().map(|x| U::lit(x.as_f64())).collect() };
    layers
        .iter()
        .map(|l| match l {
            Layer::Conv(c) => Layer::Conv(Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                padding: c.padding,
                weight: cv(&c.weight),
                bias: cv(&c.bias),
                slot: c.slot,
            }),
            Layer::GroupNorm(n) => Layer::GroupNorm(GroupNorm {
                groups: n.groups,
                channels: n.channels,
                gamma: cv(&n.gamma),
                beta: cv(&n.beta),
                slot: n.slot,
            }),
            Layer::BatchNorm(n) => Layer::BatchNorm(BatchNorm {
                channels: n.channels,
                gamma: cv(&n.gamma),
                beta: cv(&n.beta),
                running_mean: cv(&n.running_mean),
                running_var: cv(&n.running_var),
                slot: n.slot,
            }),
            Layer::Act(a) => Layer::Act(*a),
            Layer::Pool(p) => Layer::Pool(*p),
            Layer::GlobalPool => Layer::GlobalPool,
            Layer::Residual { body, shortcut } => Layer::Residual {
                body: cast_layers(body),
                shortcut: cast_layers(shortcut),
            },
        })
        .collect()
}

/// Per-slot parameter gradients, shaped like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

impl<T: Real> Gradients<T> {
    pub fn zero(&mut self) {
        self.0.iter_mut().for_each(|g| g.fill(T::zero()));
    }
}

/// A feature extractor `psi` plus a linear classifier head `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInstance<T = f32> {
    config: EmbedderConfig,
    feature_shape: [usize; 3],
    body: Vec<Layer<T>>,
    head: Linear<T>,
    num_slots: usize,
}

impl<T: Real> NetworkInstance<T> {
    /// Deterministic construction: conv/linear weights drawn `U(±1/sqrt(fan_in))`
    /// from a ChaCha stream seeded with `seed`, zero biases, unit/zero norm affines.
    pub fn build(config: &EmbedderConfig, seed: u64) -> Result<Self> {
        let feature_shape = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (body, next_slot) = build_body(config, &mut rng);
        let head = Linear::new(&mut rng, feature_shape.iter().product(), config.num_classes, next_slot);
        Ok(Self {
            config: config.clone(),
            feature_shape,
            body,
            head,
            num_slots: next_slot + 2,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn head(&self) -> &Linear<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Linear<T> {
        &mut self.head
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.config.input_shape {
            return Err(Error::Shape(format!(
                "network expects [_, {}, {}, {}] input, got {:?}",
                self.config.input_shape[0],
                self.config.input_shape[1],
                self.config.input_shape[2],
                x.shape()
            )));
        }
        Ok(())
    }

    /// `psi(x)` as `[B, d']`, without recording anything for a backward pass.
    pub fn embed(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (emb, _) = self.forward_impl(x, mode, false)?;
        Ok(emb)
    }

    /// Batch statistics each batch-norm layer sees for `x` in train mode, depth-first.
    pub fn train_batch_stats(&self, x: &Tensor<T>) -> Result<Vec<BatchStats<T>>> {
        let (_, tape) = self.forward_impl(x, Mode::Train, false)?;
        Ok(tape.bn_stats)
    }

    /// `psi(x)` plus the tape needed for [`Self::embed_backward`].
    pub fn embed_tape(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        self.forward_impl(x, mode, true)
    }

    fn forward_impl(&self, x: &Tensor<T>, mode: Mode, record: bool) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut stats = Vec::new();
        let mut pass = Pass {
            mode,
            record,
            bn_stats: &mut stats,
        };
        let (features, caches) = run(&self.body, x.clone(), &mut pass);
        let feature_shape = features.shape().to_vec();
        let b = features.batch();
        let emb = features.reshape(&[b, self.feature_dim()])?;
        Ok((
            emb,
            Tape {
                caches,
                bn_stats: stats,
                input_shape: x.shape().to_vec(),
                feature_shape,
            },
        ))
    }

    /// Back-propagates `d loss / d psi(x)` through the feature extractor,
    /// accumulating parameter gradients into `grads` when given. Returns the
    /// input gradient when `need_input_grad` is set.
    pub fn embed_backward(
        &self,
        tape: Tape<T>,
        grad_emb: &Tensor<T>,
        grads: Option<&mut Gradients<T>>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if grad_emb.shape() != [tape.input_shape[0], self.feature_dim()] {
            return Err(Error::Shape(format!(
                "embedding gradient {:?} does not match batch {} x {}",
                grad_emb.shape(),
                tape.input_shape[0],
                self.feature_dim()
            )));
        }
        if self.body.is_empty() {
            return Ok(need_input_grad.then(|| grad_emb.clone().reshape(&tape.input_shape).expect("flatten")));
        }
        let g = grad_emb.clone().reshape(&tape.feature_shape)?;
        Ok(run_backward(
            &self.body,
            tape.caches,
            g,
            grads.map(|g| g.0.as_mut_slice()),
            need_input_grad,
        ))
    }

    pub fn logits(&self, emb: &Tensor<T>) -> Tensor<T> {
        self.head.forward(emb)
    }

    pub fn head_backward(&self, emb: &Tensor<T>, grad_logits: &Tensor<T>, grads: Option<&mut Gradients<T>>) -> Tensor<T> {
        self.head.backward(emb, grad_logits, grads.map(|g| g.0.as_mut_slice()))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(&self.embed(x, Mode::Eval)?);
        let c = self.num_classes();
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        let mut slots = vec![Vec::new(); self.num_slots];
        for (slot, p) in self.params() {
            slots[slot] = vec![T::zero(); p.len()];
        }
        Gradients(slots)
    }

    /// Learnable tensors ordered by slot.
    pub fn params(&self) -> Vec<(usize, &Vec<T>)> {
        let mut out = Vec::new();
        visit_params(&self.body, &mut out);
        out.push((self.head.slot, &self.head.weight));
        out.push((self.head.slot + 1, &self.head.bias));
        out.sort_by_key(|(s, _)| *s);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(usize, &mut Vec<T>)> {
        let mut out = Vec::new();
        visit_params_mut(&mut self.body, &mut out);
        out.push((self.head.slot, &mut self.head.weight));
        out.push((self.head.slot + 1, &mut self.head.bias));
        out.sort_by_key(|(s, _)| *s);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn has_batch_norm(&self) -> bool {
        let mut v = Vec::new();
        visit_bn(&self.body, &mut v);
        !v.is_empty()
    }

    /// Running statistics of every batch-norm layer, depth-first.
    pub fn bn_running_stats(&self) -> Vec<(Vec<T>, Vec<T>)> {
        let mut v = Vec::new();
        visit_bn(&self.body, &mut v);
        v.into_iter()
            .map(|bn| (bn.running_mean.clone(), bn.running_var.clone()))
            .collect()
    }

    /// Folds train-mode batch statistics into the running estimates with the
    /// usual exponential moving average (unbiased variance).
    pub fn absorb_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        let m = T::lit(BN_MOMENTUM);
        let mut bns = Vec::new();
        visit_bn_mut(&mut self.body, &mut bns);
        for (bn, s) in bns.into_iter().zip(stats) {
            let correction = if s.count > 1 {
                T::from_usize(s.count).unwrap() / T::from_usize(s.count - 1).unwrap()
            } else {
                T::one()
            };
            for ((rm, rv), (bm, bv)) in bn
                .running_mean
                .iter_mut()
                .zip(bn.running_var.iter_mut())
                .zip(s.mean.iter().zip(&s.var))
            {
                *rm = (T::one() - m) * *rm + m * *bm;
                *rv = (T::one() - m) * *rv + m * *bv * correction;
            }
        }
    }

    /// Replaces the running statistics with the given batch statistics so an
    /// eval-mode pass normalises exactly like the train-mode pass that produced them.
    pub fn freeze_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        let mut bns = Vec::new();
        visit_bn_mut(&mut self.body, &mut bns);
        for (bn, s) in bns.into_iter().zip(stats) {
            bn.running_mean.clone_from(&s.mean);
            bn.running_var.clone_from(&s.var);
        }
    }

    /// Every stored tensor (parameters then batch-norm buffers) in a fixed order.
    pub fn state(&self) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = self.params().into_iter().map(|(_, p)| p.clone()).collect();
        for (m, v) in self.bn_running_stats() {
            out.push(m);
            out.push(v);
        }
        out
    }

    pub fn load_state(&mut self, state: &[Vec<T>]) -> Result<()> {
        let expected: Vec<usize> = self.state().iter().map(Vec::len).collect();
        let got: Vec<usize> = state.iter().map(Vec::len).collect();
        if expected != got {
            return Err(Error::Shape(format!(
                "state layout {got:?} does not match network layout {expected:?}"
            )));
        }
        let n_params = self.params().len();
        for ((_, p), s) in self.params_mut().into_iter().zip(state) {
            p.clone_from(s);
        }
        let mut bns = Vec::new();
        visit_bn_mut(&mut self.body, &mut bns);
        for (bn, pair) in bns.into_iter().zip(state[n_params..].chunks(2)) {
            bn.running_mean.clone_from(&pair[0]);
            bn.running_var.clone_from(&pair[1]);
        }
        Ok(())
    }

    /// Same network at another precision.
    pub fn cast<U: Real>(&self) -> NetworkInstance<U> {
        let cv = |v: &Vec<T>| -> Vec<U> { v.iter().map(|x| U::lit(x.as_f64())).collect() };
        NetworkInstance {
            config: self.config.clone(),
            feature_shape: self.feature_shape,
            body: cast_layers(&self.body),
            head: Linear {
                in_features: self.head.in_features,
                out_features: self.head.out_features,
                weight: cv(&self.head.weight),
                bias: cv(&self.head.bias),
                slot: self.head.slot,
            },
            num_slots: self.num_slots,
        }
    }

    pub fn is_identity_embedding(&self) -> bool {
        self.config.arch == ArchKind::Flatten
    }
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let b = logits.batch();
    let c = logits.item_len();
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = T::zero();
    for i in 0..b {
        let row = logits.item(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|v| (*v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[labels[i]];
        let g = grad.item_mut(i);
        for j in 0..c {
            g[j] = (row[j] - log_z).exp() * inv_b;
        }
        g[labels[i]] -= inv_b;
    }
    (loss * inv_b, grad)
}
