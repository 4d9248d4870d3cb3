//! Image-classification data: loading, normalisation, class indexing and the
//! procedural toy corpus used throughout the tests.

mod loaders;
mod toy;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use loaders::{read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use toy::{make_toy_dataset, toy_raw, TOY_CLASSES, TOY_SIDE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum per-channel standard deviation stored after normalisation.
const MIN_STD: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    /// `[N, C, H, W]`, normalised channel values.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub channel_mean: Vec<f32>,
    pub channel_std: Vec<f32>,
}

impl LabeledImageSet {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        channel_mean: Vec<f32>,
        channel_std: Vec<f32>,
    ) -> Result<Self> {
        let (n, c, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} images", labels.len())));
        }
        if num_classes == 0 {
            return Err(Error::Contract("num_classes must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {bad} >= num_classes {num_classes}")));
        }
        if channel_mean.len() != c || channel_std.len() != c {
            return Err(Error::Shape(format!("normalisation stats must have {c} channels")));
        }
        if channel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Contract("channel_std must be strictly positive".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            channel_mean,
            channel_std,
        })
    }

    /// Normalises raw `[0, 1]` pixels with statistics computed from `raw` itself.
    pub fn from_raw(raw: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (mean, std) = channel_stats(&raw)?;
        Self::from_raw_with_stats(raw, labels, num_classes, mean, std)
    }

    /// Normalises raw pixels with externally supplied (training-split) statistics.
    pub fn from_raw_with_stats(
        mut raw: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        mean: Vec<f32>,
        std: Vec<f32>,
    ) -> Result<Self> {
        normalize_in_place(&mut raw, &mean, &std)?;
        Self::new(raw, labels, num_classes, mean, std)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_index(&self) -> ClassIndex {
        build_class_index(self)
    }

    /// Every class in `[0, num_classes)` has at least one sample.
    pub fn is_class_complete(&self) -> bool {
        self.class_index().lists.iter().all(|l| !l.is_empty())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            channel_mean: self.channel_mean.clone(),
            channel_std: self.channel_std.clone(),
        }
    }

    /// Samples whose label is in `classes`, in original order, labels unchanged.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.image_shape() != other.image_shape() || self.num_classes != other.num_classes {
            return Err(Error::Shape("cannot concatenate sets of different shape".into()));
        }
        let images = Tensor::concat(&[&self.images, &other.images])?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            images,
            labels,
            num_classes: self.num_classes,
            channel_mean: self.channel_mean.clone(),
            channel_std: self.channel_std.clone(),
        })
    }

    /// Inverse of the stored normalisation.
    pub fn denormalized(&self) -> Tensor<f32> {
        let mut t = self.images.clone();
        denormalize_in_place(&mut t, &self.channel_mean, &self.channel_std);
        t
    }
}

/// Per-channel mean and (population) standard deviation of `[N, C, H, W]` data.
pub fn channel_stats(x: &Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    let (_, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    let mut count = vec![0usize; c];
    for (pi, plane) in x.data().chunks(hw).enumerate() {
        let ch = pi % c;
        for v in plane {
            sum[ch] += *v as f64;
            sq[ch] += (*v as f64) * (*v as f64);
        }
        count[ch] += hw;
    }
    let mean: Vec<f32> = sum.iter().zip(&count).map(|(s, n)| (s / *n as f64) as f32).collect();
    let std = sq
        .iter()
        .zip(&sum)
        .zip(&count)
        .map(|((q, s), n)| {
            let m = s / *n as f64;
            ((q / *n as f64 - m * m).max(0.0).sqrt() as f32).max(MIN_STD)
        })
        .collect();
    Ok((mean, std))
}

pub fn normalize_in_place(x: &mut Tensor<f32>, mean: &[f32], std: &[f32]) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if mean.len() != c || std.len() != c {
        return Err(Error::Shape(format!("normalisation stats must have {c} channels")));
    }
    for (pi, plane) in x.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (mean[pi % c], std[pi % c]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(())
}

pub fn denormalize_in_place(x: &mut Tensor<f32>, mean: &[f32], std: &[f32]) {
    let (_, c, h, w) = x.dims4().expect("image tensor");
    for (pi, plane) in x.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (mean[pi % c], std[pi % c]);
        plane.iter_mut().for_each(|v| *v = *v * s + m);
    }
}

/// Per-class sample indices; a partition of `0..N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassIndex {
    pub lists: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn of(&self, class: usize) -> &[usize] {
        &self.lists[class]
    }

    pub fn num_classes(&self) -> usize {
        self.lists.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }
}

pub fn build_class_index(data: &LabeledImageSet) -> ClassIndex {
    let mut lists = vec![Vec::new(); data.num_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        lists[l].push(i);
    }
    ClassIndex { lists }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Cifar100,
    TinyImageNet,
    Toy,
}

impl DatasetName {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Self::Mnist),
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            "tinyimagenet" | "tiny-imagenet" => Ok(Self::TinyImageNet),
            "toy" => Ok(Self::Toy),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
            Self::TinyImageNet => "tinyimagenet",
            Self::Toy => "toy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: DatasetName,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    /// Directory holding the raw files (ignored for `toy`).
    pub source: PathBuf,
}

impl DatasetSpec {
    pub fn named(name: DatasetName, source: impl Into<PathBuf>) -> Self {
        let (image_shape, num_classes) = match name {
            DatasetName::Mnist => ([1, 28, 28], 10),
            DatasetName::Cifar10 => ([3, 32, 32], 10),
            DatasetName::Cifar100 => ([3, 32, 32], 100),
            DatasetName::TinyImageNet => ([3, 64, 64], 200),
            DatasetName::Toy => ([1, TOY_SIDE, TOY_SIDE], TOY_CLASSES),
        };
        Self {
            name,
            image_shape,
            num_classes,
            source: source.into(),
        }
    }

    /// Resolves `name` under `root`, or under `$DMC_DATA_DIR` when `root` is `None`.
    pub fn from_name(name: &str, root: Option<&Path>) -> Result<Self> {
        let name = DatasetName::parse(name)?;
        let root = match root {
            Some(r) => r.to_path_buf(),
            None => std::env::var_os("DMC_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data")),
        };
        Ok(Self::named(name, root.join(name.as_str())))
    }
}

/// Seeds and sizes used for the toy splits served by [`load_dataset`].
pub const TOY_TRAIN_SEED: u64 = 0;
pub const TOY_TEST_SEED: u64 = 1;
pub const TOY_PER_CLASS: usize = 128;

fn load_raw(spec: &DatasetSpec, split: Split) -> Result<(Tensor<f32>, Vec<usize>)> {
    match spec.name {
        DatasetName::Mnist => loaders::load_mnist(&spec.source, split),
        DatasetName::Cifar10 => loaders::load_cifar10(&spec.source, split),
        DatasetName::Cifar100 => loaders::load_cifar100(&spec.source, split),
        DatasetName::TinyImageNet => loaders::load_tinyimagenet(&spec.source, split),
        DatasetName::Toy => {
            let seed = if split == Split::Train { TOY_TRAIN_SEED } else { TOY_TEST_SEED };
            Ok(toy_raw(seed, TOY_PER_CLASS))
        }
    }
}

fn check_spec(spec: &DatasetSpec, raw: &Tensor<f32>, labels: &[usize]) -> Result<()> {
    let (_, c, h, w) = raw.dims4()?;
    if [c, h, w] != spec.image_shape {
        return Err(Error::Load {
            path: spec.source.clone(),
            reason: format!("images are {c}x{h}x{w}, expected {:?}", spec.image_shape),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::Load {
            path: spec.source.clone(),
            reason: format!("label {bad} outside {} classes", spec.num_classes),
        });
    }
    Ok(())
}

/// Loads one split, normalised with per-channel statistics of the training split.
pub fn load_dataset(spec: &DatasetSpec, split: Split) -> Result<LabeledImageSet> {
    let (raw, labels) = load_raw(spec, split)?;
    check_spec(spec, &raw, &labels)?;
    let (mean, std) = match split {
        Split::Train => channel_stats(&raw)?,
        Split::Test => channel_stats(&load_raw(spec, Split::Train)?.0)?,
    };
    LabeledImageSet::from_raw_with_stats(raw, labels, spec.num_classes, mean, std)
}

/// Loads both splits, reading the training files once.
pub fn load_train_test(spec: &DatasetSpec) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (raw_train, train_labels) = load_raw(spec, Split::Train)?;
    check_spec(spec, &raw_train, &train_labels)?;
    let (raw_test, test_labels) = load_raw(spec, Split::Test)?;
    check_spec(spec, &raw_test, &test_labels)?;
    let (mean, std) = channel_stats(&raw_train)?;
    let train = LabeledImageSet::from_raw_with_stats(raw_train, train_labels, spec.num_classes, mean.clone(), std.clone())?;
    let test = LabeledImageSet::from_raw_with_stats(raw_test, test_labels, spec.num_classes, mean, std)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn tiny(labels: Vec<usize>, classes: usize) -> LabeledImageSet {
        let n = labels.len();
        let raw = Tensor::new(vec![n, 1, 2, 2], (0..n * 4).map(|i| i as f32 / 10.0).collect()).unwrap();
        LabeledImageSet::from_raw(raw, labels, classes).unwrap()
    }

    #[test]
    fn class_index_groups_labels() {
        let idx = build_class_index(&tiny(vec![0, 1, 0, 1], 2));
        assert_eq!(idx.lists, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn class_index_with_single_class() {
        let idx = build_class_index(&tiny(vec![2, 2, 2], 3));
        assert!(idx.of(0).is_empty() && idx.of(1).is_empty());
        assert_eq!(idx.of(2), &[0, 1, 2]);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let raw = Tensor::zeros(&[2, 1, 2, 2]);
        let err = LabeledImageSet::new(raw, vec![0, 3], 3, vec![0.0], vec![1.0]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_non_positive_std() {
        let raw = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(LabeledImageSet::new(raw, vec![0], 1, vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn unknown_dataset_name() {
        assert!(matches!(DatasetName::parse("imagenet"), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn named_specs_match_reference_shapes() {
        let s = DatasetSpec::named(DatasetName::Mnist, "x");
        assert_eq!((s.image_shape, s.num_classes), ([1, 28, 28], 10));
        let s = DatasetSpec::named(DatasetName::Cifar100, "x");
        assert_eq!((s.image_shape, s.num_classes), ([3, 32, 32], 100));
        let s = DatasetSpec::named(DatasetName::TinyImageNet, "x");
        assert_eq!((s.image_shape, s.num_classes), ([3, 64, 64], 200));
    }

    #[test]
    fn missing_source_names_the_file() {
        let spec = DatasetSpec::named(DatasetName::Mnist, "/nonexistent/mnist");
        match load_dataset(&spec, Split::Train) {
            Err(Error::Load { path, .. }) => assert!(path.to_string_lossy().contains("train-images")),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn toy_splits_use_training_statistics() {
        let spec = DatasetSpec::named(DatasetName::Toy, "");
        let (train, test) = load_train_test(&spec).unwrap();
        assert_eq!(train.len(), 512);
        assert_eq!(train.image_shape(), [1, 8, 8]);
        assert_eq!(test.channel_mean, train.channel_mean);
        assert_eq!(test.channel_std, train.channel_std);
        assert_ne!(test.images, train.images);
        assert_eq!(load_dataset(&spec, Split::Test).unwrap(), test);
    }

    proptest! {
        #[test]
        fn normalisation_is_invertible(values in prop::collection::vec(0.0f32..=1.0, 4 * 3 * 4)) {
            let raw = Tensor::new(vec![4, 3, 2, 2], values).unwrap();
            let (mean, std) = channel_stats(&raw).unwrap();
            let mut t = raw.clone();
            normalize_in_place(&mut t, &mean, &std).unwrap();
            denormalize_in_place(&mut t, &mean, &std);
            for (a, b) in t.data().iter().zip(raw.data()) {
                prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }

        #[test]
        fn class_index_is_a_partition(labels in prop::collection::vec(0usize..5, 1..60)) {
            let idx = build_class_index(&tiny(labels.clone(), 5));
            let mut all: Vec<usize> = idx.lists.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for (c, list) in idx.lists.iter().enumerate() {
                prop_assert!(list.iter().all(|&i| labels[i] == c));
            }
        }
    }
}
