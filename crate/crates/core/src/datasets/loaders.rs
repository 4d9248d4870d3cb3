//! Readers for the on-disk formats of the named datasets. All return raw pixel
//! values in `[0, 1]`; normalisation happens in the caller.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Split;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| load_err(path, e.to_string()))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| load_err(path, "truncated header"))
}

/// Reads an IDX3 image file as `[N, 1, rows, cols]` in `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_file(path)?;
    if be_u32(&bytes, 0, path)? != IDX_IMAGES_MAGIC {
        return Err(load_err(path, "bad IDX image magic"));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(load_err(
            path,
            format!("expected {} pixel bytes, found {}", n * rows * cols, body.len()),
        ));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    if be_u32(&bytes, 0, path)? != IDX_LABELS_MAGIC {
        return Err(load_err(path, "bad IDX label magic"));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(load_err(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Writes `[N, 1, rows, cols]` pixels in `[0, 1]` as an IDX3 file.
pub fn write_idx_images(path: &Path, images: &Tensor<f32>) -> Result<()> {
    let (n, _, rows, cols) = images.dims4()?;
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(labels.iter().map(|&l| l as u8));
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub(super) fn load_mnist(dir: &Path, split: Split) -> Result<(Tensor<f32>, Vec<usize>)> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = read_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let labels = read_idx_labels(&labels_path)?;
    if labels.len() != images.batch() {
        return Err(load_err(&labels_path, "label count does not match image count"));
    }
    Ok((images, labels))
}

/// Either `dir/<sub>` or `dir` itself, whichever holds `probe`.
fn resolve(dir: &Path, sub: &str, probe: &str) -> PathBuf {
    let nested = dir.join(sub);
    if nested.join(probe).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// CIFAR binary records: `label_bytes` label bytes (the last one is used) then
/// 3072 channel-major pixels.
fn read_cifar_records(path: &Path, label_bytes: usize, out_px: &mut Vec<f32>, out_labels: &mut Vec<usize>) -> Result<()> {
    const PIXELS: usize = 3 * 32 * 32;
    let bytes = read_file(path)?;
    let rec = label_bytes + PIXELS;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(load_err(path, format!("size {} is not a multiple of {rec}", bytes.len())));
    }
    for r in bytes.chunks(rec) {
        out_labels.push(r[label_bytes - 1] as usize);
        out_px.extend(r[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

pub(super) fn load_cifar10(dir: &Path, split: Split) -> Result<(Tensor<f32>, Vec<usize>)> {
    let dir = resolve(dir, "cifar-10-batches-bin", "test_batch.bin");
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let (mut px, mut labels) = (Vec::new(), Vec::new());
    for f in files {
        read_cifar_records(&dir.join(f), 1, &mut px, &mut labels)?;
    }
    let n = labels.len();
    Ok((Tensor::new(vec![n, 3, 32, 32], px)?, labels))
}

pub(super) fn load_cifar100(dir: &Path, split: Split) -> Result<(Tensor<f32>, Vec<usize>)> {
    let dir = resolve(dir, "cifar-100-binary", "test.bin");
    let file = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let (mut px, mut labels) = (Vec::new(), Vec::new());
    read_cifar_records(&dir.join(file), 2, &mut px, &mut labels)?;
    let n = labels.len();
    Ok((Tensor::new(vec![n, 3, 32, 32], px)?, labels))
}

fn push_rgb(path: &Path, px: &mut Vec<f32>) -> Result<()> {
    let img = image::open(path).map_err(|e| load_err(path, e.to_string()))?.to_rgb8();
    if img.dimensions() != (64, 64) {
        return Err(load_err(path, format!("image is {:?}, expected 64x64", img.dimensions())));
    }
    for c in 0..3 {
        px.extend(img.pixels().map(|p| p.0[c] as f32 / 255.0));
    }
    Ok(())
}

/// The standard `tiny-imagenet-200` layout; the validation split serves as test.
pub(super) fn load_tinyimagenet(dir: &Path, split: Split) -> Result<(Tensor<f32>, Vec<usize>)> {
    let dir = resolve(dir, "tiny-imagenet-200", "wnids.txt");
    let wnids_path = dir.join("wnids.txt");
    let wnids_text = fs::read_to_string(&wnids_path).map_err(|e| load_err(&wnids_path, e.to_string()))?;
    let wnids: Vec<&str> = wnids_text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let class_of = |w: &str| wnids.iter().position(|x| *x == w);
    let (mut px, mut labels) = (Vec::new(), Vec::new());
    match split {
        Split::Train => {
            for (c, w) in wnids.iter().enumerate() {
                let img_dir = dir.join("train").join(w).join("images");
                let mut files: Vec<PathBuf> = fs::read_dir(&img_dir)
                    .map_err(|e| load_err(&img_dir, e.to_string()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .collect();
                files.sort();
                for f in files {
                    push_rgb(&f, &mut px)?;
                    labels.push(c);
                }
            }
        }
        Split::Test => {
            let ann_path = dir.join("val").join("val_annotations.txt");
            let ann = fs::read_to_string(&ann_path).map_err(|e| load_err(&ann_path, e.to_string()))?;
            for line in ann.lines() {
                let mut parts = line.split('\t');
                let (Some(file), Some(w)) = (parts.next(), parts.next()) else {
                    continue;
                };
                let c = class_of(w).ok_or_else(|| load_err(&ann_path, format!("unknown wnid {w}")))?;
                push_rgb(&dir.join("val").join("images").join(file), &mut px)?;
                labels.push(c);
            }
        }
    }
    let n = labels.len();
    Ok((Tensor::new(vec![n, 3, 64, 64], px)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = Tensor::new(vec![2, 1, 2, 3], vec![0.0, 1.0, 0.5, 0.2, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        write_idx_images(&dir.path().join("i"), &imgs).unwrap();
        write_idx_labels(&dir.path().join("l"), &[3, 7]).unwrap();
        let back = read_idx_images(&dir.path().join("i")).unwrap();
        assert_eq!(back.shape(), imgs.shape());
        assert!(back.max_abs_diff(&imgs) <= 0.5 / 255.0 + 1e-7);
        assert_eq!(read_idx_labels(&dir.path().join("l")).unwrap(), vec![3, 7]);
    }

    #[test]
    fn truncated_idx_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i");
        fs::write(&p, [0u8, 0, 8, 3, 0, 0, 0, 5]).unwrap();
        assert!(matches!(read_idx_images(&p), Err(Error::Load { .. })));
    }

    #[test]
    fn cifar_record_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for label in [4u8, 9u8] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(255u8, 3072));
        }
        fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let (t, labels) = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(t.shape(), &[2, 3, 32, 32]);
        assert_eq!(labels, vec![4, 9]);
        assert!(t.data().iter().all(|v| *v == 1.0));
    }
}
