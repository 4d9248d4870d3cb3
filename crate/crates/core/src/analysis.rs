//! Numerical check of the link between matching last-layer gradients and
//! matching mean embeddings.
//!
//! For softmax cross-entropy with logits `W e`, the gradient w.r.t. row `j` of
//! `W` is `(p_j - [j = y]) e`. When the probabilities are uniform the class-wise
//! mean gradient is the mean feature scaled by `(1 - C) / C` (row `y`) or `1 / C`
//! (other rows), so matching mean gradients reduces to matching mean features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::make_toy_dataset;
use crate::error::{Error, Result};
use crate::networks::{cross_entropy, EmbedderConfig, Linear, Mode, NetworkInstance};
use crate::tensor::Tensor;

/// Tolerance for every exact identity checked here.
pub const TOLERANCE: f64 = 1e-6;

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / z).collect()
}

/// Per-sample gradients `[B, C, d']` of the cross-entropy w.r.t. the head
/// weight `w` (`[C, d']`, row-major, no bias).
pub fn last_layer_gradient_closed_form(e: &Tensor<f64>, w: &[f64], labels: &[usize]) -> Result<Tensor<f64>> {
    let b = e.batch();
    let d = e.item_len();
    if d == 0 || !w.len().is_multiple_of(d) || w.is_empty() {
        return Err(Error::Shape(format!("head of {} values for {d} features", w.len())));
    }
    let c = w.len() / d;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} embeddings", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} is out of range for {c} classes")));
    }
    let mut out = Tensor::zeros(&[b, c, d]);
    for i in 0..b {
        let ei = e.item(i);
        let logits: Vec<f64> = w.chunks(d).map(|row| row.iter().zip(ei).map(|(a, x)| a * x).sum()).collect();
        let p = softmax(&logits);
        let g = out.item_mut(i);
        for j in 0..c {
            let coef = p[j] - if j == labels[i] { 1.0 } else { 0.0 };
            for (gv, x) in g[j * d..(j + 1) * d].iter_mut().zip(ei) {
                *gv = coef * x;
            }
        }
    }
    Ok(out)
}

/// The same gradients through the network's own linear layer and loss backward.
pub fn last_layer_gradient_backprop(e: &Tensor<f64>, w: &[f64], labels: &[usize]) -> Result<Tensor<f64>> {
    let (b, d) = (e.batch(), e.item_len());
    let c = w.len() / d.max(1);
    let mut head: Linear<f64> = Linear::new(&mut ChaCha8Rng::seed_from_u64(0), d, c, 0);
    head.weight = w.to_vec();
    let mut out = Tensor::zeros(&[b, c, d]);
    for i in 0..b {
        let x = Tensor::new(vec![1, d], e.item(i).to_vec())?;
        let (_, g_logits) = cross_entropy(&head.forward(&x), &labels[i..=i]);
        let mut grads = vec![vec![0.0; c * d], vec![0.0; c]];
        head.backward(&x, &g_logits, Some(&mut grads));
        out.item_mut(i).copy_from_slice(&grads[0]);
    }
    Ok(out)
}

fn mean_rows(g: &Tensor<f64>) -> Vec<f64> {
    let n = g.batch() as f64;
    let mut m = vec![0.0; g.item_len()];
    for i in 0..g.batch() {
        for (a, v) in m.iter_mut().zip(g.item(i)) {
            *a += v / n;
        }
    }
    m
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub num_classes: usize,
    pub class: usize,
    /// `||mean e(real) - mean e(synth)||`
    pub feature_diff_norm: f64,
    /// Row norms of the mean-gradient difference divided by `feature_diff_norm`,
    /// with the network's own head.
    pub ratios: Vec<f64>,
    /// Largest `|p_j - 1/C|` over both batches with the network's own head.
    pub max_prob_deviation: f64,
    /// `(C - 1) / C` for the class row, `1 / C` for the others.
    pub expected_ratios: Vec<f64>,
    /// Ratios with the head zeroed, where probabilities are exactly uniform.
    pub uniform_ratios: Vec<f64>,
    pub uniform_max_error: f64,
    pub uniform_ok: bool,
}

fn single_class(labels: &[usize], what: &str) -> Result<usize> {
    let first = *labels
        .first()
        .ok_or_else(|| Error::Contract(format!("{what} batch is empty")))?;
    if labels.iter().any(|&l| l != first) {
        return Err(Error::Contract(format!("{what} batch mixes classes")));
    }
    Ok(first)
}

/// Compares mean-feature and mean-last-layer-gradient differences between a
/// real and a synthetic batch of the same class.
pub fn equivalence_check(
    net: &NetworkInstance<f64>,
    real: &Tensor<f64>,
    real_labels: &[usize],
    synth: &Tensor<f64>,
    synth_labels: &[usize],
) -> Result<EquivalenceReport> {
    let class = single_class(real_labels, "real")?;
    if single_class(synth_labels, "synthetic")? != class {
        return Err(Error::Contract("real and synthetic batches are of different classes".into()));
    }
    let c = net.num_classes();
    let er = net.embed(real, Mode::Train)?;
    let es = net.embed(synth, Mode::Train)?;
    let d = er.item_len();
    let feat_diff: Vec<f64> = er.mean_rows().iter().zip(es.mean_rows()).map(|(a, b)| a - b).collect();
    let feature_diff_norm = norm(&feat_diff);

    let row_ratios = |w: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let gr = mean_rows(&last_layer_gradient_closed_form(&er, w, real_labels)?);
        let gs = mean_rows(&last_layer_gradient_closed_form(&es, w, synth_labels)?);
        let diff: Vec<f64> = gr.iter().zip(&gs).map(|(a, b)| a - b).collect();
        let norms: Vec<f64> = diff.chunks(d).map(norm).collect();
        let ratios = if feature_diff_norm > 0.0 {
            norms.iter().map(|n| n / feature_diff_norm).collect()
        } else {
            vec![0.0; c]
        };
        Ok((ratios, norms))
    };

    let w = &net.head().weight;
    let (ratios, _) = row_ratios(w)?;
    let mut max_prob_deviation: f64 = 0.0;
    for e in [&er, &es] {
        for i in 0..e.batch() {
            let logits: Vec<f64> = w.chunks(d).map(|row| row.iter().zip(e.item(i)).map(|(a, x)| a * x).sum()).collect();
            for p in softmax(&logits) {
                max_prob_deviation = max_prob_deviation.max((p - 1.0 / c as f64).abs());
            }
        }
    }

    let (uniform_ratios, uniform_norms) = row_ratios(&vec![0.0; w.len()])?;
    let expected_ratios: Vec<f64> = (0..c)
        .map(|j| if j == class { (c as f64 - 1.0) / c as f64 } else { 1.0 / c as f64 })
        .collect();
    let uniform_max_error = if feature_diff_norm > 0.0 {
        uniform_ratios.iter().zip(&expected_ratios).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    } else {
        uniform_norms.iter().copied().fold(0.0, f64::max)
    };
    Ok(EquivalenceReport {
        num_classes: c,
        class,
        feature_diff_norm,
        ratios,
        max_prob_deviation,
        expected_ratios,
        uniform_ratios,
        uniform_max_error,
        uniform_ok: uniform_max_error < TOLERANCE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppendixReport {
    /// Largest difference between closed-form and backprop gradients.
    pub closed_form_max_diff: f64,
    /// Largest entry of `sum_j g_ij` over all samples.
    pub row_sum_max: f64,
    /// Uniform-probability case on random embeddings.
    pub uniform_max_error: f64,
    /// Fresh ConvNet on toy images of one class.
    pub network: EquivalenceReport,
    /// Largest relative gap between the network's own-head ratios and the
    /// uniform constants; reported, not asserted.
    pub network_ratio_rel_gap: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("consistent shape")
}

/// Runs every check with `num_classes = 10`.
pub fn verify_appendix(seed: u64) -> Result<AppendixReport> {
    const C: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d) = (16, 24);

    let e = randn(&[b, d], &mut rng);
    let w = randn(&[C, d], &mut rng).into_data();
    let labels: Vec<usize> = (0..b).map(|i| (i * 7 + 3) % C).collect();
    let closed = last_layer_gradient_closed_form(&e, &w, &labels)?;
    let backprop = last_layer_gradient_backprop(&e, &w, &labels)?;
    let closed_form_max_diff = closed.max_abs_diff(&backprop);
    let mut row_sum_max: f64 = 0.0;
    for i in 0..b {
        let g = closed.item(i);
        for k in 0..d {
            row_sum_max = row_sum_max.max((0..C).map(|j| g[j * d + k]).sum::<f64>().abs());
        }
    }

    // Uniform probabilities: mean gradient rows are scaled mean features.
    let y = 4;
    let ey = randn(&[b, d], &mut rng);
    let mean_g = mean_rows(&last_layer_gradient_closed_form(&ey, &vec![0.0; C * d], &vec![y; b])?);
    let mean_e = ey.mean_rows();
    let mut uniform_max_error: f64 = 0.0;
    for j in 0..C {
        let scale = if j == y { (1.0 - C as f64) / C as f64 } else { 1.0 / C as f64 };
        for k in 0..d {
            uniform_max_error = uniform_max_error.max((mean_g[j * d + k] - scale * mean_e[k]).abs());
        }
    }

    let toy = make_toy_dataset(seed, 16);
    let rows: Vec<usize> = toy.class_index().of(0).to_vec();
    let (real_rows, synth_rows) = rows.split_at(rows.len() / 2);
    let cfg = EmbedderConfig::convnet(toy.image_shape(), C);
    let net = NetworkInstance::<f32>::build(&cfg, seed)?.cast::<f64>();
    let real = toy.images.select(real_rows).cast::<f64>();
    let synth = toy.images.select(synth_rows).cast::<f64>();
    let network = equivalence_check(&net, &real, &vec![0; real_rows.len()], &synth, &vec![0; synth_rows.len()])?;
    let network_ratio_rel_gap = network
        .ratios
        .iter()
        .zip(&network.expected_ratios)
        .map(|(r, e)| (r - e).abs() / e)
        .fold(0.0, f64::max);

    let passed = closed_form_max_diff < TOLERANCE
        && row_sum_max < TOLERANCE
        && uniform_max_error < TOLERANCE
        && network.uniform_ok;
    Ok(AppendixReport {
        closed_form_max_diff,
        row_sum_max,
        uniform_max_error,
        network,
        network_ratio_rel_gap,
        tolerance: TOLERANCE,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_prediction_has_vanishing_gradient() {
        let e = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
        let w = vec![60.0, 0.0, -60.0, 0.0, 0.0, -60.0];
        let g = last_layer_gradient_closed_form(&e, &w, &[0]).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-20), "{:?}", g.data());
    }

    #[test]
    fn uniform_probabilities_give_constant_weights() {
        let e = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let c = 4;
        let g = last_layer_gradient_closed_form(&e, &[0.0; 12], &[2]).unwrap();
        for j in 0..c {
            let scale = if j == 2 { (1.0 - c as f64) / c as f64 } else { 1.0 / c as f64 };
            for k in 0..3 {
                assert!((g.data()[j * 3 + k] - scale * e.data()[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn closed_form_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = randn(&[1, 5], &mut rng);
        let w = randn(&[3, 5], &mut rng).into_data();
        let g = last_layer_gradient_closed_form(&e, &w, &[1]).unwrap();
        let loss = |w: &[f64]| {
            let mut head: Linear<f64> = Linear::new(&mut ChaCha8Rng::seed_from_u64(0), 5, 3, 0);
            head.weight = w.to_vec();
            cross_entropy(&head.forward(&e), &[1]).0
        };
        let h = 1e-6;
        for k in 0..w.len() {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            assert!((fd - g.data()[k]).abs() < 1e-8, "weight {k}: {fd} vs {}", g.data()[k]);
        }
    }

    #[test]
    fn out_of_range_label_is_a_contract_error() {
        let e = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let err = last_layer_gradient_closed_form(&e, &[0.0; 4], &[2]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn appendix_checks_pass() {
        let r = verify_appendix(0).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.network.expected_ratios[0] - 0.9).abs() < 1e-15);
    }

    fn toy_net() -> (NetworkInstance<f64>, Tensor<f64>) {
        let toy = make_toy_dataset(2, 8);
        let rows = toy.class_index().of(1).to_vec();
        let cfg = EmbedderConfig::convnet(toy.image_shape(), 4);
        (NetworkInstance::<f32>::build(&cfg, 1).unwrap().cast(), toy.images.select(&rows).cast())
    }

    #[test]
    fn identical_batches_have_zero_differences() {
        let (net, x) = toy_net();
        let r = equivalence_check(&net, &x, &[1; 8], &x, &[1; 8]).unwrap();
        assert_eq!(r.feature_diff_norm, 0.0);
        assert_eq!(r.uniform_max_error, 0.0);
        assert!(r.uniform_ok);
    }

    #[test]
    fn mixed_class_batch_is_a_contract_error() {
        let (net, x) = toy_net();
        let mut labels = [1; 8];
        labels[3] = 0;
        let err = equivalence_check(&net, &x, &labels, &x, &[1; 8]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
