//! Coreset baselines: random selection and herding.

use rand::seq::index;
use rayon::prelude::*;

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::networks::{Mode, NetworkInstance};
use crate::repro::stream;
use crate::synthetic::{SyntheticMeta, SyntheticSet};

/// Selected samples, class-major, with their indices into the source set.
#[derive(Clone, Debug, PartialEq)]
pub struct Coreset {
    pub set: LabeledImageSet,
    pub selection: Vec<usize>,
}

impl Coreset {
    fn from_selection(real: &LabeledImageSet, selection: Vec<usize>) -> Self {
        Self {
            set: real.subset(&selection),
            selection,
        }
    }

    /// Wraps the coreset for DMC1 persistence; the selection goes into the metadata.
    pub fn to_synthetic(&self, dataset: &str, method: &str, seed: u64) -> Result<SyntheticSet> {
        let meta = SyntheticMeta {
            dataset: dataset.to_string(),
            num_classes: self.set.num_classes,
            ipc: 0,
            channel_mean: Vec::new(),
            channel_std: Vec::new(),
            seed,
            config_hash: String::new(),
            method: method.to_string(),
            selection: Some(self.selection.clone()),
        };
        SyntheticSet::from_labeled(&self.set, meta)
    }
}

fn class_pools(real: &LabeledImageSet, classes: &[usize], ipc: usize) -> Result<Vec<Vec<usize>>> {
    if ipc == 0 {
        return Err(Error::Selection("ipc must be at least 1".into()));
    }
    let index = real.class_index();
    classes
        .iter()
        .map(|&c| {
            if c >= real.num_classes {
                return Err(Error::Selection(format!("class {c} is out of range")));
            }
            let pool = index.of(c);
            if pool.len() < ipc {
                return Err(Error::Selection(format!(
                    "class {c} has {} samples, fewer than ipc {ipc}",
                    pool.len()
                )));
            }
            Ok(pool.to_vec())
        })
        .collect()
}

fn all_classes(real: &LabeledImageSet) -> Vec<usize> {
    (0..real.num_classes).collect()
}

/// `ipc` samples per class drawn uniformly without replacement. Each class has
/// its own stream, so the choice for a class does not depend on the others.
pub fn random_coreset(real: &LabeledImageSet, ipc: usize, seed: u64) -> Result<Coreset> {
    random_coreset_of(real, &all_classes(real), ipc, seed)
}

/// `random_coreset` restricted to `classes`; the rest of the set is ignored.
pub fn random_coreset_of(real: &LabeledImageSet, classes: &[usize], ipc: usize, seed: u64) -> Result<Coreset> {
    let pools = class_pools(real, classes, ipc)?;
    let selection = classes
        .iter()
        .zip(&pools)
        .flat_map(|(&c, pool)| {
            let mut rng = stream(seed, "coreset", c as u64);
            index::sample(&mut rng, pool.len(), ipc).into_iter().map(|i| pool[i]).collect::<Vec<_>>()
        })
        .collect();
    Ok(Coreset::from_selection(real, selection))
}

/// Greedy herding over feature rows: at each step adds the unselected row that
/// brings the running mean closest to the mean of all rows. Ties go to the
/// lowest row index. Returns row positions in selection order.
pub fn herding_select(features: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = features.len();
    let k = k.min(n);
    if n == 0 {
        return Vec::new();
    }
    let d = features[0].len();
    let mut total = vec![0.0; d];
    for f in features {
        for (m, v) in total.iter_mut().zip(f) {
            *m += v;
        }
    }

    // ||total/n - (sum + x)/t|| scaled by n*t: the argmin is the same and the
    // comparison stays exact for integer-valued features.
    let mut sum = vec![0.0; d];
    let mut taken = vec![false; n];
    let mut picks = Vec::with_capacity(k);
    for t in 1..=k {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = total
                .iter()
                .zip(&sum)
                .zip(f)
                .map(|((m, s), v)| {
                    let diff = t as f64 * m - n as f64 * (s + v);
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("an unselected row remains");
        taken[i] = true;
        for (s, v) in sum.iter_mut().zip(&features[i]) {
            *s += v;
        }
        picks.push(i);
    }
    picks
}

fn embed_rows(net: &NetworkInstance, real: &LabeledImageSet, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(256) {
        let e = net.embed(&real.images.select(chunk), Mode::Eval)?;
        out.extend(e.data().chunks(e.item_len()).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    Ok(out)
}

/// Herding in the penultimate embedding of `embed_net`, class by class.
pub fn herding_coreset(real: &LabeledImageSet, ipc: usize, embed_net: &NetworkInstance) -> Result<Coreset> {
    herding_coreset_of(real, &all_classes(real), ipc, embed_net)
}

pub fn herding_coreset_of(
    real: &LabeledImageSet,
    classes: &[usize],
    ipc: usize,
    embed_net: &NetworkInstance,
) -> Result<Coreset> {
    let pools = class_pools(real, classes, ipc)?;
    let per_class = pools
        .par_iter()
        .map(|pool| {
            let feats = embed_rows(embed_net, real, pool)?;
            Ok(herding_select(&feats, ipc).into_iter().map(|i| pool[i]).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Coreset::from_selection(real, per_class.concat()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_toy_dataset;
    use crate::networks::EmbedderConfig;

    fn points(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn closest_to_mean_is_picked_first() {
        assert_eq!(herding_select(&points(&[0.0, 1.0, 2.0]), 1), vec![1]);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        assert_eq!(herding_select(&points(&[0.0, 1.0, 2.0]), 2), vec![1, 0]);
    }

    #[test]
    fn random_coreset_is_balanced_and_seeded() {
        let real = make_toy_dataset(0, 16);
        let a = random_coreset(&real, 3, 1).unwrap();
        let b = random_coreset(&real, 3, 1).unwrap();
        let c = random_coreset(&real, 3, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.selection, c.selection);
        assert_eq!(a.set.class_index().sizes(), vec![3; 4]);
        let mut s = a.selection.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 12);
    }

    #[test]
    fn full_class_size_returns_every_sample() {
        let real = make_toy_dataset(0, 5);
        let mut sel = random_coreset(&real, 5, 0).unwrap().selection;
        sel.sort_unstable();
        assert_eq!(sel, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_ipc_is_a_selection_error() {
        let real = make_toy_dataset(0, 2);
        assert!(matches!(random_coreset(&real, 3, 0), Err(Error::Selection(_))));
        let net = NetworkInstance::build(&EmbedderConfig::flatten([1, 8, 8], 4), 0).unwrap();
        assert!(matches!(herding_coreset(&real, 3, &net), Err(Error::Selection(_))));
    }

    #[test]
    fn herding_whole_class_has_the_class_mean() {
        let real = make_toy_dataset(0, 6);
        let net = NetworkInstance::build(&EmbedderConfig::flatten([1, 8, 8], 4), 0).unwrap();
        let core = herding_coreset(&real, 6, &net).unwrap();
        let idx = real.class_index();
        for c in 0..4 {
            let mut got: Vec<usize> = core.selection[c * 6..(c + 1) * 6].to_vec();
            got.sort_unstable();
            assert_eq!(got, idx.of(c));
        }
    }

    #[test]
    fn herding_distance_does_not_grow_with_ipc() {
        let real = make_toy_dataset(0, 32);
        let net = NetworkInstance::build(&EmbedderConfig::flatten([1, 8, 8], 4), 0).unwrap();
        let idx = real.class_index();
        for c in 0..4 {
            let feats = embed_rows(&net, &real, idx.of(c)).unwrap();
            let d = feats[0].len();
            let mu: Vec<f64> = (0..d).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / feats.len() as f64).collect();
            let picks = herding_select(&feats, 5);
            let mut prev = f64::INFINITY;
            for k in 1..=5 {
                let dist: f64 = (0..d)
                    .map(|j| (mu[j] - picks[..k].iter().map(|&i| feats[i][j]).sum::<f64>() / k as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist <= prev + 1e-12, "class {c} ipc {k}: {dist} > {prev}");
                prev = dist;
            }
        }
    }

    #[test]
    fn coreset_persists_its_selection() {
        let real = make_toy_dataset(0, 4);
        let core = random_coreset(&real, 2, 0).unwrap();
        let s = core.to_synthetic("toy", "random", 0).unwrap();
        assert_eq!(s.meta.selection.as_deref(), Some(&core.selection[..]));
        assert_eq!(s.ipc(), 2);
    }
}
