//! PNG reading and writing for RGB images and label maps.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{LabelMask, Tensor};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads any PNG as RGB `(3, H, W)` with values in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut t = Tensor::zeros(vec![3, h, w]);
    let data = t.data_mut();
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = f64::from(px[ch]) / 255.0;
        }
    }
    Ok(t)
}

/// Writes a `(3, H, W)` tensor, clamping to `[0, 1]` and rounding to 8 bits.
pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let [3, h, w] = *t.shape() else {
        return Err(Error::Shape(format!(
            "expected (3, H, W), got {:?}",
            t.shape()
        )));
    };
    let plane = h * w;
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| (t.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads an 8- or 16-bit grayscale PNG as labels.
pub fn read_labels(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u16> = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u16::from).collect(),
        image::DynamicImage::ImageLuma16(g) => g.into_raw(),
        other => {
            return Err(image_err(
                path,
                format!("label maps must be grayscale, found {:?}", other.color()),
            ))
        }
    };
    LabelMask::new(h, w, data)
}

/// Writes labels as 8-bit grayscale when they fit, 16-bit otherwise.
pub fn write_labels(path: &Path, mask: &LabelMask) -> Result<()> {
    let (h, w) = mask.dims();
    let result = if mask.data().iter().all(|&l| l <= 255) {
        let raw = mask.data().iter().map(|&l| l as u8).collect();
        GrayImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer matches dims")
            .save(path)
    } else {
        ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, mask.data().to_vec())
            .expect("buffer matches dims")
            .save(path)
    };
    result.map_err(|e| image_err(path, e))
}
