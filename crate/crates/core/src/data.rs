//! Domain folders, deterministic batching and PNG output.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};

pub const SUPPORTED_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// An unpaired image domain: a sorted list of decodable files.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub root: PathBuf,
    pub files: Vec<PathBuf>,
    pub size: usize,
    pub channels: usize,
    /// Files with a supported extension that failed to decode.
    pub skipped: Vec<PathBuf>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Supported image files directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_supported(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Enumerate a domain folder, skipping (with a warning) files that fail to
/// decode. Fails only if nothing decodes.
pub fn load_domain(dir: &Path, size: usize, channels: usize) -> Result<DomainDataset> {
    if !matches!(channels, 1 | 3) {
        return Err(Error::config("channels", 0, format!("must be 1 or 3, got {channels}")));
    }
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for path in list_images(dir)? {
        match image::open(&path) {
            Ok(_) => files.push(path),
            Err(e) => {
                warn!("skipping undecodable image {}: {e}", path.display());
                skipped.push(path);
            }
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyDomain(dir.to_path_buf()));
    }
    Ok(DomainDataset {
        root: dir.to_path_buf(),
        files,
        size,
        channels,
        skipped,
    })
}

/// `v / 127.5 − 1`.
pub fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`to_unit`] with clamping and half-away-from-zero rounding.
pub fn to_byte(x: f32) -> u8 {
    let v = ((x as f64 + 1.0) * 127.5).clamp(0.0, 255.0);
    v.round() as u8
}

/// Decode, resize (bilinear) to `size×size` and scale to `[-1, 1]`.
/// Returns `C×size×size` values in planar order.
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(preprocess(&img, size, channels))
}

pub fn preprocess(img: &DynamicImage, size: usize, channels: usize) -> Vec<f32> {
    let s = size as u32;
    let n = size * size;
    let mut out = vec![0f32; channels * n];
    if channels == 1 {
        let g = image::imageops::resize(&img.to_luma8(), s, s, FilterType::Triangle);
        for (i, p) in g.pixels().enumerate() {
            out[i] = to_unit(p.0[0]);
        }
    } else {
        let rgb = image::imageops::resize(&img.to_rgb8(), s, s, FilterType::Triangle);
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * n + i] = to_unit(p.0[c]);
            }
        }
    }
    out
}

/// Stack preprocessed images into a batch.
pub fn load_batch(
    paths: &[PathBuf],
    size: usize,
    channels: usize,
    dtype: DType,
    device: &Device,
) -> Result<ImageBatch> {
    let mut values = Vec::with_capacity(paths.len() * channels * size * size);
    for p in paths {
        values.extend(load_image(p, size, channels)?);
    }
    let t = Tensor::from_vec(values, (paths.len(), channels, size, size), device)?;
    ImageBatch::new(t.to_dtype(dtype)?)
}

/// Position in a seeded, per-epoch shuffled stream over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCursor {
    pub seed: u64,
    pub epoch: u64,
    pub position: usize,
}

impl BatchCursor {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epoch: 0,
            position: 0,
        }
    }
}

/// The visiting order of `n` items in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// The next (at most `batch_size`) items of the epoch; the final batch of
/// an epoch may be short, after which the order is reshuffled.
pub fn next_batch(
    ds: &DomainDataset,
    batch_size: usize,
    cursor: BatchCursor,
    dtype: DType,
    device: &Device,
) -> Result<(ImageBatch, BatchCursor)> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", 0, "must be positive"));
    }
    let order = epoch_order(ds.len(), cursor.seed, cursor.epoch);
    let end = (cursor.position + batch_size).min(ds.len());
    let paths: Vec<PathBuf> = order[cursor.position..end]
        .iter()
        .map(|&i| ds.files[i].clone())
        .collect();
    let batch = load_batch(&paths, ds.size, ds.channels, dtype, device)?;
    let next = if end == ds.len() {
        BatchCursor {
            seed: cursor.seed,
            epoch: cursor.epoch + 1,
            position: 0,
        }
    } else {
        BatchCursor {
            position: end,
            ..cursor
        }
    };
    Ok((batch, next))
}

/// Quantize a single `C×H×W` image (batch of one) to 8-bit and write PNG.
pub fn encode_output(image: &ImageBatch, path: &Path) -> Result<()> {
    let (b, c, h, w) = image.dims4();
    if b != 1 {
        return Err(Error::ShapeMismatch(format!(
            "encode_output takes one image, got a batch of {b}"
        )));
    }
    let v = image
        .tensor()
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let n = h * w;
    let dynimg = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, v.iter().map(|&x| to_byte(x)).collect())
                .expect("buffer matches dimensions"),
        ),
        3 => {
            let mut buf = Vec::with_capacity(3 * n);
            for i in 0..n {
                for ch in 0..3 {
                    buf.push(to_byte(v[ch * n + i]));
                }
            }
            DynamicImage::ImageRgb8(
                RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions"),
            )
        }
        other => {
            return Err(Error::ShapeMismatch(format!(
                "cannot encode {other}-channel image"
            )))
        }
    };
    dynimg
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map_endpoints() {
        assert_eq!(to_unit(0), -1.0);
        assert_eq!(to_unit(255), 1.0);
        assert!((to_unit(128) - 0.003_921_6).abs() < 1e-6);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(1.2), 255);
        assert_eq!(to_byte(-3.0), 0);
    }

    #[test]
    fn byte_round_trip_is_exact() {
        for v in 0..=255u8 {
            assert_eq!(to_byte(to_unit(v)), v);
        }
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(17, 3, 2);
        assert_ne!(o, epoch_order(17, 3, 3));
        o.sort();
        assert_eq!(o, (0..17).collect::<Vec<_>>());
    }
}
