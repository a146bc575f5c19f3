//! Synthetic inputs: smooth random fields, random homographies and the
//! rectangle toy domains used for end-to-end runs.

use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::batch::ImageBatch;
use crate::data::to_byte;
use crate::error::{Error, Result};

/// Background level of toy scenes.
pub const TOY_BACKGROUND: f64 = -0.6;
/// Maximum absolute tilt of domain Y scenes, in degrees.
pub const TOY_MAX_TILT_DEG: f64 = 20.0;
/// Blur applied to domain Y scenes, in pixels.
pub const TOY_BLUR_SIGMA: f64 = 1.0;
const SUPERSAMPLE: usize = 4;

/// `c×h×w` field in roughly `[-0.9, 0.9]`: a few random low-frequency
/// sinusoids per channel.
pub fn smooth_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-2.5..2.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.2..0.3),
                ]
            })
            .collect();
        for i in 0..h {
            let y = (2 * i + 1) as f64 / h as f64 - 1.0;
            for j in 0..w {
                let x = (2 * j + 1) as f64 / w as f64 - 1.0;
                out[(ch * h + i) * w + j] = waves
                    .iter()
                    .map(|[fx, fy, ph, a]| a * (fx * x + fy * y + ph).sin())
                    .sum();
            }
        }
    }
    out
}

/// Separable Gaussian blur of each `h×w` plane in `data`, replicating edges.
pub fn gaussian_blur(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / sum).collect();
    let mut tmp = vec![0.0; h * w];
    for plane in data.chunks_mut(h * w) {
        for i in 0..h {
            for j in 0..w {
                tmp[i * w + j] = (-r..=r)
                    .map(|d| {
                        let jj = (j as isize + d).clamp(0, w as isize - 1) as usize;
                        k[(d + r) as usize] * plane[i * w + jj]
                    })
                    .sum();
            }
        }
        for i in 0..h {
            for j in 0..w {
                plane[i * w + j] = (-r..=r)
                    .map(|d| {
                        let ii = (i as isize + d).clamp(0, h as isize - 1) as usize;
                        k[(d + r) as usize] * tmp[ii * w + j]
                    })
                    .sum();
            }
        }
    }
}

/// The homography (row-major, (3,3) = 1) mapping each `src[i]` to `dst[i]`.
pub fn homography_from_points(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<[f64; 9]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let [x, y] = src[k];
        let [u, v] = dst[k];
        let r = 2 * k;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::singular("degenerate point correspondences", vec![]))?;
    Ok([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

/// A homography that moves each frame corner by at most `max_frac` of the
/// frame width along each axis.
pub fn random_corner_homography(rng: &mut ChaCha8Rng, max_frac: f64) -> Result<[f64; 9]> {
    let corners = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    let d = 2.0 * max_frac;
    let mut moved = corners;
    for p in moved.iter_mut() {
        p[0] += rng.random_range(-d..=d);
        p[1] += rng.random_range(-d..=d);
    }
    homography_from_points(&corners, &moved)
}

/// Apply a row-major 3×3 matrix to a point with projective division.
pub fn apply_h(h: &[f64; 9], p: [f64; 2]) -> [f64; 2] {
    let z = h[6] * p[0] + h[7] * p[1] + h[8];
    [
        (h[0] * p[0] + h[1] * p[1] + h[2]) / z,
        (h[3] * p[0] + h[4] * p[1] + h[5]) / z,
    ]
}

/// Row-major inverse of a 3×3 matrix, normalized so (3,3) = 1.
pub fn invert_h(h: &[f64; 9]) -> Option<[f64; 9]> {
    let m = nalgebra::Matrix3::from_row_slice(h).try_inverse()?;
    let s = m[(2, 2)];
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)] / s;
        }
    }
    Some(out)
}

/// One bright axis-aligned rectangle on a dark ground, in normalized
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RectScene {
    pub center: [f64; 2],
    pub half: [f64; 2],
    pub level: f64,
}

impl RectScene {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            center: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
            half: [rng.random_range(0.3..0.45), rng.random_range(0.15..0.28)],
            level: rng.random_range(0.6..0.9),
        }
    }

    fn value_at(&self, p: [f64; 2]) -> f64 {
        let inside = (p[0] - self.center[0]).abs() <= self.half[0]
            && (p[1] - self.center[1]).abs() <= self.half[1];
        if inside {
            self.level
        } else {
            TOY_BACKGROUND
        }
    }

    /// Render at `size×size`, optionally under the forward map `h`, by
    /// supersampled point evaluation.
    pub fn render(&self, size: usize, h: Option<&[f64; 9]>) -> Vec<f64> {
        let inv = h.map(|h| invert_h(h).expect("invertible scene transform"));
        let s = SUPERSAMPLE;
        let mut out = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                let mut acc = 0.0;
                for a in 0..s {
                    for b in 0..s {
                        let y = ((i * s + a) as f64 + 0.5) * 2.0 / (size * s) as f64 - 1.0;
                        let x = ((j * s + b) as f64 + 0.5) * 2.0 / (size * s) as f64 - 1.0;
                        let q = match &inv {
                            Some(m) => apply_h(m, [x, y]),
                            None => [x, y],
                        };
                        acc += self.value_at(q);
                    }
                }
                out[i * size + j] = acc / (s * s) as f64;
            }
        }
        out
    }
}

/// Rotation by `deg` degrees about the frame center followed by a mild
/// projective component.
pub fn tilt_homography(deg: f64, persp: [f64; 2]) -> [f64; 9] {
    let (s, c) = deg.to_radians().sin_cos();
    // P · R with P = [[1,0,0],[0,1,0],[px,py,1]]
    [c, -s, 0.0, s, c, 0.0, persp[0] * c + persp[1] * s, -persp[0] * s + persp[1] * c, 1.0]
}

/// A domain-X scene: an upright rectangle.
pub fn toy_x(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    RectScene::sample(rng).render(size, None)
}

/// A domain-Y scene: a rectangle tilted uniformly within ±20°, with mild
/// perspective and Gaussian blur. Returns the image and its tilt in degrees.
pub fn toy_y(rng: &mut ChaCha8Rng, size: usize) -> (Vec<f64>, f64) {
    let scene = RectScene::sample(rng);
    let tilt = rng.random_range(-TOY_MAX_TILT_DEG..=TOY_MAX_TILT_DEG);
    let persp = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let mut img = scene.render(size, Some(&tilt_homography(tilt, persp)));
    gaussian_blur(&mut img, size, size, TOY_BLUR_SIGMA);
    (img, tilt)
}

/// Write a single-channel `[-1, 1]` image as an 8-bit PNG.
pub fn write_gray_png(values: &[f64], size: usize, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v as f32)).collect();
    let img = image::GrayImage::from_raw(size as u32, size as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch("pixel buffer does not match size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Populate `x_dir` and `y_dir` with `n` toy scenes each. Returns the
/// generated Y tilts in degrees.
pub fn write_toy_domains(x_dir: &Path, y_dir: &Path, n: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    for d in [x_dir, y_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut tilts = Vec::with_capacity(n);
    for i in 0..n {
        write_gray_png(&toy_x(rng, size), size, &x_dir.join(format!("x_{i:05}.png")))?;
        let (y, t) = toy_y(rng, size);
        write_gray_png(&y, size, &y_dir.join(format!("y_{i:05}.png")))?;
        tilts.push(t);
    }
    Ok(tilts)
}

/// A batch of smooth random images as a tensor-backed [`ImageBatch`].
pub fn smooth_batch(
    rng: &mut ChaCha8Rng,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    dtype: candle_core::DType,
    dev: &candle_core::Device,
) -> Result<ImageBatch> {
    let mut v = Vec::with_capacity(b * c * h * w);
    for _ in 0..b {
        v.extend(smooth_field(rng, c, h, w));
    }
    ImageBatch::new(candle_core::Tensor::from_vec(v, (b, c, h, w), dev)?.to_dtype(dtype)?)
}

/// Pixels brighter than this count as toy foreground: halfway between the
/// ground and the dimmest rectangle.
pub const TOY_FOREGROUND: f64 = 0.0;
/// Fraction of foreground pixels ignored at each end of an extent.
const EXTENT_TRIM: f64 = 0.01;
const TILT_STEP_DEG: f64 = 0.25;

/// Trimmed `(low, high)` of `v`.
fn trimmed_extent(v: &mut [f64]) -> (f64, f64) {
    let n = v.len();
    let k = ((n as f64) * EXTENT_TRIM) as usize;
    let lo = *v.select_nth_unstable_by(k, f64::total_cmp).1;
    let hi = *v.select_nth_unstable_by(n - 1 - k, f64::total_cmp).1;
    (lo, hi)
}

/// Tilt in degrees of the rectangle in a `size×size` toy image, from the
/// minimum-area rectangle fitted around its foreground over angles in
/// `[-45°, 45°]`. Positive angles turn the x axis towards y, as in
/// [`tilt_homography`]. `None` if there is almost no foreground.
pub fn estimate_tilt_deg(values: &[f64], size: usize) -> Option<f64> {
    let coord = |i: usize| (i as f64 + 0.5) * 2.0 / size as f64 - 1.0;
    let pts: Vec<[f64; 2]> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > TOY_FOREGROUND)
        .map(|(i, _)| [coord(i % size), coord(i / size)])
        .collect();
    if pts.len() < 16 {
        return None;
    }
    let (mut u, mut v) = (vec![0.0; pts.len()], vec![0.0; pts.len()]);
    let steps = (45.0 / TILT_STEP_DEG) as i64;
    let mut best = (f64::INFINITY, 0.0);
    for k in -steps..=steps {
        let deg = k as f64 * TILT_STEP_DEG;
        let (s, c) = deg.to_radians().sin_cos();
        for (i, p) in pts.iter().enumerate() {
            u[i] = c * p[0] + s * p[1];
            v[i] = -s * p[0] + c * p[1];
        }
        let (u0, u1) = trimmed_extent(&mut u);
        let (v0, v1) = trimmed_extent(&mut v);
        let area = (u1 - u0) * (v1 - v0);
        if area < best.0 {
            best = (area, deg);
        }
    }
    Some(best.1)
}

/// Mean squared 5-point Laplacian over interior pixels of a `size×size`
/// image.
pub fn laplacian_energy(values: &[f64], size: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..size - 1 {
        for j in 1..size - 1 {
            let at = |y: usize, x: usize| values[y * size + x];
            let lap = at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * at(i, j);
            total += lap * lap;
        }
    }
    total / ((size - 2) * (size - 2)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn four_point_fit_reproduces_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_corner_homography(&mut rng, 0.25).unwrap();
        let corners = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
        let back = invert_h(&h).unwrap();
        for c in corners {
            let r = apply_h(&back, apply_h(&h, c));
            assert!((r[0] - c[0]).abs() < 1e-12 && (r[1] - c[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let mut v = vec![0.3; 64];
        gaussian_blur(&mut v, 8, 8, 1.5);
        assert!(v.iter().all(|x| (x - 0.3).abs() < 1e-12));
    }

    #[test]
    fn pure_rotation_tilt() {
        let h = tilt_homography(90.0, [0.0, 0.0]);
        let p = apply_h(&h, [1.0, 0.0]);
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }
    #[test]
    fn tilt_oracle_recovers_scene_tilts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut worst, mut total): (f64, f64) = (0.0, 0.0);
        for _ in 0..40 {
            let (img, tilt) = toy_y(&mut rng, 64);
            let err = (estimate_tilt_deg(&img, 64).unwrap() - tilt).abs();
            worst = worst.max(err);
            total += err;
        }
        // Perspective and framing bend some rectangles by a few degrees.
        assert!(total / 40.0 < 1.5 && worst < 6.0, "tilt error mean {} worst {worst}", total / 40.0);
        for _ in 0..10 {
            let est = estimate_tilt_deg(&toy_x(&mut rng, 64), 64).unwrap();
            assert!(est.abs() <= 0.5, "upright scene read as {est}");
        }
        assert_eq!(estimate_tilt_deg(&vec![TOY_BACKGROUND; 64 * 64], 64), None);
    }

    #[test]
    fn blur_lowers_laplacian_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sharp = toy_x(&mut rng, 64);
        let mut soft = sharp.clone();
        gaussian_blur(&mut soft, 64, 64, TOY_BLUR_SIGMA);
        assert!(laplacian_energy(&soft, 64) < 0.5 * laplacian_energy(&sharp, 64));
        assert_eq!(laplacian_energy(&vec![0.4; 64], 8), 0.0);
        // A single spike: |lap| is 4 at the spike and 1 at its 4 neighbors.
        let mut spike = vec![0.0; 25];
        spike[12] = 1.0;
        assert!((laplacian_energy(&spike, 5) - 20.0 / 9.0).abs() < 1e-12);
    }
}
