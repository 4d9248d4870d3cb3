//! The learnable synthetic set and its DMC1 persistence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::format::Container;
use crate::tensor::Tensor;

/// Provenance stored alongside the pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub dataset: String,
    pub num_classes: usize,
    pub ipc: usize,
    pub channel_mean: Vec<f32>,
    pub channel_std: Vec<f32>,
    pub seed: u64,
    pub config_hash: String,
    /// `dm`, `random` or `herding`.
    pub method: String,
    /// For coresets: the source index of each stored image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Vec<usize>>,
}

/// `ipc` images per class, stored class-major: class `c` owns rows
/// `c * ipc .. (c + 1) * ipc`. Labels are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub images: Tensor<f32>,
    labels: Vec<usize>,
    pub meta: SyntheticMeta,
}

impl SyntheticSet {
    pub fn new(images: Tensor<f32>, meta: SyntheticMeta) -> Result<Self> {
        let (n, c, _, _) = images.dims4()?;
        if meta.ipc == 0 || meta.num_classes == 0 {
            return Err(Error::Config("ipc and class count must be positive".into()));
        }
        if n != meta.ipc * meta.num_classes {
            return Err(Error::Shape(format!(
                "{n} images for {} classes x {} per class",
                meta.num_classes, meta.ipc
            )));
        }
        if meta.channel_mean.len() != c || meta.channel_std.len() != c {
            return Err(Error::Shape("normalisation statistics do not match the channel count".into()));
        }
        let labels = (0..n).map(|i| i / meta.ipc).collect();
        Ok(Self { images, labels, meta })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ipc(&self) -> usize {
        self.meta.ipc
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_rows(&self, class: usize) -> std::ops::Range<usize> {
        class * self.meta.ipc..(class + 1) * self.meta.ipc
    }

    pub fn class_images(&self, class: usize) -> Tensor<f32> {
        let rows: Vec<usize> = self.class_rows(class).collect();
        self.images.select(&rows)
    }

    pub fn to_labeled(&self) -> LabeledImageSet {
        LabeledImageSet {
            images: self.images.clone(),
            labels: self.labels.clone(),
            num_classes: self.meta.num_classes,
            channel_mean: self.meta.channel_mean.clone(),
            channel_std: self.meta.channel_std.clone(),
        }
    }

    /// Wraps a class-balanced labelled set (a coreset, say), reordering it class-major.
    pub fn from_labeled(set: &LabeledImageSet, mut meta: SyntheticMeta) -> Result<Self> {
        let index = set.class_index();
        let sizes = index.sizes();
        let ipc = sizes[0];
        if ipc == 0 || sizes.iter().any(|s| *s != ipc) {
            return Err(Error::Contract(format!("set is not class balanced: {sizes:?}")));
        }
        let order: Vec<usize> = index.lists.iter().flatten().copied().collect();
        if let Some(sel) = meta.selection.take() {
            meta.selection = Some(order.iter().map(|&i| sel[i]).collect());
        }
        meta.ipc = ipc;
        meta.num_classes = set.num_classes;
        meta.channel_mean.clone_from(&set.channel_mean);
        meta.channel_std.clone_from(&set.channel_std);
        Self::new(set.images.select(&order), meta)
    }
}

pub fn save_condensed(set: &SyntheticSet, path: &Path) -> Result<()> {
    to_container(set)?.write(path)
}

pub fn to_container(set: &SyntheticSet) -> Result<Container> {
    let dims = set.images.shape().iter().map(|&d| d as u64).collect();
    let labels = set.labels.iter().map(|&l| l as u32).collect();
    Container::new(dims, labels, set.images.data().to_vec(), Vec::new())?.with_metadata(&set.meta)
}

pub fn load_condensed(path: &Path) -> Result<SyntheticSet> {
    from_container(Container::read(path)?)
}

pub fn from_container(c: Container) -> Result<SyntheticSet> {
    if c.dims.len() != 4 {
        return Err(Error::Format(format!("condensed sets are rank 4, found rank {}", c.dims.len())));
    }
    let meta: SyntheticMeta = c.metadata_as()?;
    if let Some(bad) = c.labels.iter().find(|&&l| l as usize >= meta.num_classes) {
        return Err(Error::Format(format!("label {bad} is not below the class count {}", meta.num_classes)));
    }
    let n = c.dims[0] as usize;
    if meta.ipc == 0 || n != meta.ipc * meta.num_classes {
        return Err(Error::Format(format!(
            "{n} images for {} classes x {} per class",
            meta.num_classes, meta.ipc
        )));
    }
    if c.labels.iter().enumerate().any(|(i, &l)| l as usize != i / meta.ipc) {
        return Err(Error::Format("labels are not stored class-major".into()));
    }
    let shape = c.dims.iter().map(|&d| d as usize).collect();
    let images = Tensor::new(shape, c.values)?;
    SyntheticSet::new(images, meta).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn meta(num_classes: usize, ipc: usize, c: usize) -> SyntheticMeta {
        SyntheticMeta {
            dataset: "toy".into(),
            num_classes,
            ipc,
            channel_mean: vec![0.1; c],
            channel_std: vec![0.7; c],
            seed: 42,
            config_hash: "00ff".into(),
            method: "dm".into(),
            selection: None,
        }
    }

    fn sample_set() -> SyntheticSet {
        let data = (0..4 * 64).map(|i| (i as f32 * 0.37).sin()).collect();
        SyntheticSet::new(Tensor::new(vec![4, 1, 8, 8], data).unwrap(), meta(4, 1, 1)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.dmc");
        let s = sample_set();
        save_condensed(&s, &p).unwrap();
        assert_eq!(load_condensed(&p).unwrap(), s);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.dmc");
        let bytes = to_container(&sample_set()).unwrap().to_bytes();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_condensed(&p), Err(Error::Format(_))));
    }

    #[test]
    fn out_of_range_label_is_format_error() {
        let mut c = to_container(&sample_set()).unwrap();
        c.labels[3] = 4;
        assert!(matches!(from_container(c), Err(Error::Format(_))));
    }

    #[test]
    fn inconsistent_ipc_is_format_error() {
        let mut c = to_container(&sample_set()).unwrap();
        let mut m: SyntheticMeta = c.metadata_as().unwrap();
        m.ipc = 2;
        c = c.with_metadata(&m).unwrap();
        assert!(matches!(from_container(c), Err(Error::Format(_))));
    }

    #[test]
    fn labelled_sets_are_reordered_class_major() {
        let images = Tensor::new(vec![4, 1, 1, 1], vec![10.0, 11.0, 20.0, 21.0]).unwrap();
        let set = LabeledImageSet {
            images,
            labels: vec![1, 0, 0, 1],
            num_classes: 2,
            channel_mean: vec![0.0],
            channel_std: vec![1.0],
        };
        let mut m = meta(2, 2, 1);
        m.selection = Some(vec![7, 8, 9, 10]);
        let s = SyntheticSet::from_labeled(&set, m).unwrap();
        assert_eq!(s.images.data(), &[11.0, 20.0, 10.0, 21.0]);
        assert_eq!(s.labels(), &[0, 0, 1, 1]);
        assert_eq!(s.meta.selection, Some(vec![8, 9, 7, 10]));
    }

    proptest! {
        #[test]
        fn arbitrary_sets_round_trip(classes in 1usize..4, ipc in 1usize..3, seed in any::<u64>(), bits in prop::collection::vec(any::<u32>(), 48)) {
            let n = classes * ipc;
            let data: Vec<f32> = (0..n * 12).map(|i| f32::from_bits(bits[i % 48].rotate_left(i as u32))).collect();
            let mut m = meta(classes, ipc, 3);
            m.seed = seed;
            let s = SyntheticSet::new(Tensor::new(vec![n, 3, 2, 2], data).unwrap(), m).unwrap();
            let back = from_container(Container::from_bytes(&to_container(&s).unwrap().to_bytes()).unwrap()).unwrap();
            prop_assert_eq!(to_container(&back).unwrap().to_bytes(), to_container(&s).unwrap().to_bytes());
        }
    }
}
