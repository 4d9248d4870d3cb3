//! PNG grids of condensed sets: one row per class, one column per image.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::synthetic::SyntheticSet;
use crate::tensor::Tensor;

const PAD: u32 = 2;

/// Denormalises, clamps to `[0, 1]` and tiles the images, each enlarged by `zoom`.
pub fn grid_image(set: &SyntheticSet, zoom: u32) -> Result<RgbImage> {
    if zoom == 0 {
        return Err(Error::Config("zoom must be at least 1".into()));
    }
    let [c, h, w] = set.image_shape();
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("cannot render {c}-channel images")));
    }
    let mut pixels: Tensor<f32> = set.images.clone();
    crate::datasets::denormalize_in_place(&mut pixels, &set.meta.channel_mean, &set.meta.channel_std);
    let (rows, cols) = (set.num_classes() as u32, set.ipc() as u32);
    let (cell_h, cell_w) = (h as u32 * zoom + PAD, w as u32 * zoom + PAD);
    let mut img = RgbImage::from_pixel(cols * cell_w + PAD, rows * cell_h + PAD, Rgb([255, 255, 255]));
    for class in 0..set.num_classes() {
        for (k, i) in set.class_rows(class).enumerate() {
            let item = pixels.item(i);
            let (x0, y0) = (PAD + k as u32 * cell_w, PAD + class as u32 * cell_h);
            for y in 0..h {
                for x in 0..w {
                    let at = |ch: usize| {
                        let v = item[(ch.min(c - 1) * h + y) * w + x].clamp(0.0, 1.0);
                        (v * 255.0).round() as u8
                    };
                    let px = Rgb([at(0), at(1), at(2)]);
                    for dy in 0..zoom {
                        for dx in 0..zoom {
                            img.put_pixel(x0 + x as u32 * zoom + dx, y0 + y as u32 * zoom + dy, px);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn save_grid(set: &SyntheticSet, path: &Path, zoom: u32) -> Result<()> {
    grid_image(set, zoom)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticMeta;

    #[test]
    fn grid_layout_and_clamping() {
        let data = vec![-1.0, 0.0, 0.5, 1.0, 2.0, 0.25];
        let meta = SyntheticMeta {
            dataset: "t".into(),
            num_classes: 3,
            ipc: 2,
            channel_mean: vec![0.0],
            channel_std: vec![1.0],
            seed: 0,
            config_hash: String::new(),
            method: "dm".into(),
            selection: None,
        };
        let set = SyntheticSet::new(Tensor::new(vec![6, 1, 1, 1], data).unwrap(), meta).unwrap();
        let img = grid_image(&set, 1).unwrap();
        assert_eq!(img.dimensions(), (2 * 3 + 2, 3 * 3 + 2));
        assert_eq!(img.get_pixel(2, 2), &Rgb([0, 0, 0]));
        assert_eq!(img.get_pixel(5, 5), &Rgb([255, 255, 255]));
        assert_eq!(img.get_pixel(2, 5), &Rgb([128, 128, 128]));
        assert_eq!(img.get_pixel(5, 8), &Rgb([64, 64, 64]));
    }
}
