#![allow(dead_code)]

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use gadan::synthetic::write_toy_domains;
use gadan::geometry::build_operator;
use gadan::{ImageBatch, NetworkConfig, TrainConfig, TransformKind, TransformOperator, TransformParams, ValidityMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cpu() -> Device {
    Device::Cpu
}

/// The smallest architecture the validators accept, for fast tests.
pub fn tiny_network(kind: TransformKind, size: usize, channels: usize) -> NetworkConfig {
    let mut c = NetworkConfig::new(kind, size);
    c.channels = channels;
    c.code_dim = 4;
    c.loc_size = 32;
    c.gen_width = 2;
    c.res_blocks = 1;
    c.disc_width = 2;
    c
}

pub fn random_batch(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), dtype: DType) -> ImageBatch {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ImageBatch::new(Tensor::from_vec(v, shape, &cpu()).unwrap().to_dtype(dtype).unwrap()).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> ValidityMask {
    let v: Vec<f64> = (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    ValidityMask::new(Tensor::from_vec(v, (b, 1, h, w), &cpu()).unwrap()).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a)
        .iter()
        .zip(values(b))
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Toy domains of `n` grayscale 24×24 images each under `root`.
pub fn toy_folders(root: &Path, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let (x, y) = (root.join("x"), root.join("y"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write_toy_domains(&x, &y, n, 24, &mut rng).unwrap();
    (x, y)
}

/// A fast training config over [`toy_folders`].
pub fn tiny_train_config(root: &Path, steps: u64, seed: u64) -> TrainConfig {
    let (x, y) = toy_folders(root, 6, seed);
    let mut c = TrainConfig::new(TransformKind::Homography, 2, steps, seed, x, y, root.join("ckpt"));
    c.network = tiny_network(TransformKind::Homography, 24, 1);
    c
}

pub fn mean_abs_loop(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        total += (a[i] - b[i]).abs();
    }
    total / a.len() as f64
}

pub fn random_operator(rng: &mut ChaCha8Rng, kind: TransformKind, b: usize) -> TransformOperator {
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|_| kind.identity_theta().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect())
        .collect();
    build_operator(&TransformParams::from_rows(kind, &rows, DType::F64, &cpu()).unwrap()).unwrap()
}

/// Free parameters of a matrix operator read entry by entry, or the TPS
/// displacements.
pub fn params_loop(op: &TransformOperator) -> Vec<f64> {
    match op.matrix() {
        Some(m) => {
            let n = op.kind.num_params();
            let mut out = Vec::new();
            for mat in values(m).chunks(9) {
                for v in mat.iter().take(n) {
                    out.push(v / mat[8]);
                }
            }
            out
        }
        None => values(&op.representation().unwrap()),
    }
}
