//! Proxy-set architecture search: rank a space of networks by their validation
//! accuracy after short training on a small set, and score that ranking
//! against a reference ranking with Spearman correlation.

use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, train_on_set, TrainRecipe};
use crate::networks::EmbedderConfig;
use crate::repro::stream;

/// Splits off a random `fraction` of `train` as a validation set.
pub fn validation_split(
    train: &LabeledImageSet,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must be in (0, 1), got {fraction}")));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream(seed, "validation", 0));
    let n_val = ((train.len() as f64 * fraction).ceil() as usize).clamp(1, train.len().saturating_sub(1).max(1));
    let (val, rest) = order.split_at(n_val);
    let (mut val, mut rest) = (val.to_vec(), rest.to_vec());
    val.sort_unstable();
    rest.sort_unstable();
    Ok((train.subset(&rest), train.subset(&val)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NasBudget {
    pub recipe: TrainRecipe,
    /// Trainings per architecture, with seeds `0..repeats`; accuracies are averaged.
    pub repeats: usize,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchScore {
    /// Position in the search space.
    pub index: usize,
    pub label: String,
    /// Mean validation accuracy in percent.
    pub accuracy: f64,
    pub accuracies: Vec<f64>,
    /// Mean test accuracy, when a test set was given.
    pub test_accuracy: Option<f64>,
    /// Some repeat diverged and was scored 0.
    pub diverged: bool,
}

/// Trains every architecture on `train` and scores it on `val` (and `test`,
/// if given), in space order.
pub fn score_architectures(
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    space: &[EmbedderConfig],
    budget: &NasBudget,
) -> Result<Vec<ArchScore>> {
    if budget.repeats == 0 {
        return Err(Error::Config("need at least one repeat per architecture".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..space.len()).flat_map(|a| (0..budget.repeats).map(move |r| (a, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(budget.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Option<(f64, f64)>>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(a, r)| match train_on_set(train, &space[a], &budget.recipe, r as u64) {
                Ok(net) => {
                    let v = accuracy(&net, val, None)?;
                    let t = test.map(|t| accuracy(&net, t, None)).transpose()?;
                    Ok(Some((v, t.unwrap_or(f64::NAN))))
                }
                Err(Error::Training(msg)) => {
                    info!("{} repeat {r} diverged: {msg}", space[a]);
                    Ok(None)
                }
                Err(e) => Err(e),
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(space
        .iter()
        .enumerate()
        .map(|(a, cfg)| {
            let runs = &results[a * budget.repeats..(a + 1) * budget.repeats];
            let accuracies: Vec<f64> = runs.iter().map(|r| r.map_or(0.0, |(v, _)| v)).collect();
            let n = accuracies.len() as f64;
            ArchScore {
                index: a,
                label: cfg.to_string(),
                accuracy: accuracies.iter().sum::<f64>() / n,
                test_accuracy: test.map(|_| runs.iter().map(|r| r.map_or(0.0, |(_, t)| t)).sum::<f64>() / n),
                diverged: runs.iter().any(Option::is_none),
                accuracies,
            }
        })
        .collect())
}

/// Best first; ties keep enumeration order.
pub fn rank(scores: &[ArchScore]) -> Vec<ArchScore> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy));
    ranked
}

pub fn rank_architectures(
    proxy: &LabeledImageSet,
    val: &LabeledImageSet,
    space: &[EmbedderConfig],
    budget: &NasBudget,
) -> Result<Vec<ArchScore>> {
    Ok(rank(&score_architectures(proxy, val, None, space, budget)?))
}

/// Shrinks every width by `divisor`, keeping it a positive multiple of 4 so
/// group norm stays valid. For running the grid at toy scale.
pub fn scale_widths(space: &[EmbedderConfig], divisor: usize) -> Vec<EmbedderConfig> {
    space
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.width = (c.width / divisor.max(1) / 4 * 4).max(4);
            c
        })
        .collect()
}

/// 1-based ranks, ascending by value, with tied values sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of the average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Correlation(format!("{} vs {} scores", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Correlation("need at least two items".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Correlation("constant scores have no rank correlation".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman correlation restricted to the top `fraction` of items by proxy
/// score (at least one item; ties in the cut go to the lower index).
pub fn spearman_top_slice(proxy: &[f64], reference: &[f64], fraction: f64) -> Result<f64> {
    if proxy.len() != reference.len() {
        return Err(Error::Correlation(format!("{} vs {} scores", proxy.len(), reference.len())));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Correlation(format!("slice fraction must be in (0, 1], got {fraction}")));
    }
    let k = ((proxy.len() as f64 * fraction).ceil() as usize).max(1);
    let mut order: Vec<usize> = (0..proxy.len()).collect();
    order.sort_by(|&a, &b| proxy[b].total_cmp(&proxy[a]));
    let top = &order[..k.min(order.len())];
    if top.len() < 2 {
        return Err(Error::Correlation(format!("slice holds {} item(s)", top.len())));
    }
    let p: Vec<f64> = top.iter().map(|&i| proxy[i]).collect();
    let r: Vec<f64> = top.iter().map(|&i| reference[i]).collect();
    spearman(&p, &r)
}

/// One compared way of ranking the space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NasMethodRun {
    pub method: String,
    /// Proxy validation accuracy per architecture, in space order.
    pub scores: Vec<f64>,
    pub time_minutes: f64,
    /// Training images the method stores.
    pub storage_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NasRow {
    pub method: String,
    /// Reference performance of the architecture the method ranks first.
    pub performance: f64,
    pub correlation: Option<f64>,
    pub time_minutes: f64,
    pub storage_images: usize,
}

/// One row per method: performance / correlation / time / storage.
/// `reference_performance[i]` is architecture i's accuracy after reference training.
pub fn nas_report(
    methods: &[NasMethodRun],
    reference_scores: &[f64],
    reference_performance: &[f64],
    slice: f64,
) -> Vec<NasRow> {
    methods
        .iter()
        .map(|m| {
            let best = (0..m.scores.len()).fold(None, |b: Option<usize>, i| match b {
                Some(j) if m.scores[j] >= m.scores[i] => Some(j),
                _ => Some(i),
            });
            NasRow {
                method: m.method.clone(),
                performance: best.and_then(|i| reference_performance.get(i).copied()).unwrap_or(f64::NAN),
                correlation: spearman_top_slice(&m.scores, reference_scores, slice).ok(),
                time_minutes: m.time_minutes,
                storage_images: m.storage_images,
            }
        })
        .collect()
}

pub fn report_csv(rows: &[NasRow]) -> String {
    let mut out = String::from("method,performance,correlation,time_minutes,storage_images\n");
    for r in rows {
        let corr = r.correlation.map_or_else(|| "nan".to_string(), |c| format!("{c:.4}"));
        let _ = writeln!(
            out,
            "{},{:.2},{corr},{:.2},{}",
            r.method, r.performance, r.time_minutes, r.storage_images
        );
    }
    out
}
