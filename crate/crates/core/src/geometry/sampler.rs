//! Differentiable bilinear grid sampling.
//!
//! Grid coordinates live in normalized `[-1, 1]` space with pixel-center
//! alignment: pixel `i` of an axis of length `n` has normalized center
//! `(2i + 1) / n - 1`. Taps that fall outside the source image contribute
//! a constant fill value, so the output is always a convex combination of
//! source values and the fill.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Sample `image` (`B×C×Hi×Wi`) at `grid` (`B×Ho×Wo×2`, last axis `(x, y)`)
/// and return a `B×C×Ho×Wo` tensor. Differentiable w.r.t. both inputs.
pub fn grid_sample(image: &Tensor, grid: &Tensor, fill: f64) -> Result<Tensor> {
    let (b, _, _, _) = image.dims4()?;
    let (gb, _, _, two) = grid.dims4()?;
    if b != gb || two != 2 {
        return Err(Error::ShapeMismatch(format!(
            "grid_sample: image {:?} vs grid {:?}",
            image.dims(),
            grid.dims()
        )));
    }
    if image.dtype() != grid.dtype() {
        return Err(Error::ShapeMismatch(format!(
            "grid_sample: dtype {:?} vs {:?}",
            image.dtype(),
            grid.dtype()
        )));
    }
    let image = image.contiguous()?;
    let grid = grid.contiguous()?;
    Ok(image.apply_op2(&grid, BilinearSampler { fill })?)
}

struct BilinearSampler {
    fill: f64,
}

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Dims {
    fn from_shapes(image: &[usize], grid: &[usize]) -> Self {
        Dims {
            batch: image[0],
            channels: image[1],
            in_h: image[2],
            in_w: image[3],
            out_h: grid[1],
            out_w: grid[2],
        }
    }
}

/// One of the four bilinear taps around a sample point.
#[derive(Clone, Copy)]
struct Footprint {
    x0: isize,
    y0: isize,
    tx: f64,
    ty: f64,
}

/// Map a normalized coordinate to continuous pixel space and split it into
/// integer and fractional parts. Fractions within a few ulps of zero are
/// snapped so that pixel-center grids reproduce the source exactly.
fn footprint(gx: f64, gy: f64, in_w: usize, in_h: usize, eps: f64) -> Option<Footprint> {
    if !gx.is_finite() || !gy.is_finite() {
        return None;
    }
    let ix = ((gx + 1.0) * in_w as f64 - 1.0) / 2.0;
    let iy = ((gy + 1.0) * in_h as f64 - 1.0) / 2.0;
    // far outside: every tap is fill
    if ix < -2.0 || iy < -2.0 || ix > in_w as f64 + 1.0 || iy > in_h as f64 + 1.0 {
        return Some(Footprint {
            x0: -2,
            y0: -2,
            tx: 0.0,
            ty: 0.0,
        });
    }
    let (x0, tx) = split(ix, eps * in_w as f64);
    let (y0, ty) = split(iy, eps * in_h as f64);
    Some(Footprint { x0, y0, tx, ty })
}

fn split(v: f64, tol: f64) -> (isize, f64) {
    let r = v.round();
    if (v - r).abs() <= tol {
        return (r as isize, 0.0);
    }
    let f = v.floor();
    (f as isize, v - f)
}

fn snap_eps(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 4.0 * f64::EPSILON,
        _ => 4.0 * f32::EPSILON as f64,
    }
}

#[inline]
fn tap<T: WithDType>(plane: &[T], d: &Dims, x: isize, y: isize, fill: f64) -> f64 {
    if x < 0 || y < 0 || x >= d.in_w as isize || y >= d.in_h as isize {
        fill
    } else {
        plane[y as usize * d.in_w + x as usize].to_f64()
    }
}

fn forward<T: WithDType>(image: &[T], grid: &[T], d: Dims, fill: f64, eps: f64) -> Vec<T> {
    let plane_in = d.in_h * d.in_w;
    let plane_out = d.out_h * d.out_w;
    let mut out = vec![T::from_f64(fill); d.batch * d.channels * plane_out];
    for n in 0..d.batch {
        for p in 0..plane_out {
            let g = (n * plane_out + p) * 2;
            let Some(fp) = footprint(grid[g].to_f64(), grid[g + 1].to_f64(), d.in_w, d.in_h, eps)
            else {
                continue;
            };
            let (tx, ty) = (fp.tx, fp.ty);
            let w = [
                (1.0 - tx) * (1.0 - ty),
                tx * (1.0 - ty),
                (1.0 - tx) * ty,
                tx * ty,
            ];
            for c in 0..d.channels {
                let base = (n * d.channels + c) * plane_in;
                let plane = &image[base..base + plane_in];
                let v00 = tap(plane, &d, fp.x0, fp.y0, fill);
                let mut acc = w[0] * v00;
                if tx != 0.0 {
                    acc += w[1] * tap(plane, &d, fp.x0 + 1, fp.y0, fill);
                }
                if ty != 0.0 {
                    acc += w[2] * tap(plane, &d, fp.x0, fp.y0 + 1, fill);
                    if tx != 0.0 {
                        acc += w[3] * tap(plane, &d, fp.x0 + 1, fp.y0 + 1, fill);
                    }
                }
                out[(n * d.channels + c) * plane_out + p] = T::from_f64(acc);
            }
        }
    }
    out
}

/// Returns `(grad_image, grad_grid)`.
fn backward<T: WithDType>(
    image: &[T],
    grid: &[T],
    grad_out: &[T],
    d: Dims,
    fill: f64,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let plane_in = d.in_h * d.in_w;
    let plane_out = d.out_h * d.out_w;
    let mut g_img = vec![0f64; image.len()];
    let mut g_grid = vec![T::zero(); grid.len()];
    let sx = d.in_w as f64 / 2.0;
    let sy = d.in_h as f64 / 2.0;
    for n in 0..d.batch {
        for p in 0..plane_out {
            let g = (n * plane_out + p) * 2;
            let Some(fp) = footprint(grid[g].to_f64(), grid[g + 1].to_f64(), d.in_w, d.in_h, eps)
            else {
                continue;
            };
            let (tx, ty) = (fp.tx, fp.ty);
            let taps = [
                (fp.x0, fp.y0, (1.0 - tx) * (1.0 - ty)),
                (fp.x0 + 1, fp.y0, tx * (1.0 - ty)),
                (fp.x0, fp.y0 + 1, (1.0 - tx) * ty),
                (fp.x0 + 1, fp.y0 + 1, tx * ty),
            ];
            let mut dix = 0.0;
            let mut diy = 0.0;
            for c in 0..d.channels {
                let go = grad_out[(n * d.channels + c) * plane_out + p].to_f64();
                if go == 0.0 {
                    continue;
                }
                let base = (n * d.channels + c) * plane_in;
                let plane = &image[base..base + plane_in];
                let v00 = tap(plane, &d, fp.x0, fp.y0, fill);
                let v10 = tap(plane, &d, fp.x0 + 1, fp.y0, fill);
                let v01 = tap(plane, &d, fp.x0, fp.y0 + 1, fill);
                let v11 = tap(plane, &d, fp.x0 + 1, fp.y0 + 1, fill);
                dix += go * ((1.0 - ty) * (v10 - v00) + ty * (v11 - v01));
                diy += go * ((1.0 - tx) * (v01 - v00) + tx * (v11 - v10));
                for &(x, y, w) in &taps {
                    if w != 0.0 && x >= 0 && y >= 0 && x < d.in_w as isize && y < d.in_h as isize
                    {
                        g_img[base + y as usize * d.in_w + x as usize] += go * w;
                    }
                }
            }
            g_grid[g] = T::from_f64(dix * sx);
            g_grid[g + 1] = T::from_f64(diy * sy);
        }
    }
    (g_img.into_iter().map(T::from_f64).collect(), g_grid)
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("grid_sample expects contiguous inputs"),
    }
}

impl CustomOp2 for BilinearSampler {
    fn name(&self) -> &'static str {
        "bilinear-grid-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = Dims::from_shapes(l1.dims(), l2.dims());
        let shape = Shape::from((d.batch, d.channels, d.out_h, d.out_w));
        let eps = snap_eps(s1.dtype());
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(forward::<f32>(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                d,
                self.fill,
                eps,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(forward::<f64>(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                d,
                self.fill,
                eps,
            )),
            _ => candle_core::bail!("grid_sample supports matching f32/f64 inputs only"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        image: &Tensor,
        grid: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = Dims::from_shapes(image.dims(), grid.dims());
        let eps = snap_eps(image.dtype());
        let (gi, gg) = match image.dtype() {
            DType::F32 => {
                let (gi, gg) = backward::<f32>(
                    &image.flatten_all()?.to_vec1()?,
                    &grid.flatten_all()?.to_vec1()?,
                    &grad_res.flatten_all()?.to_vec1()?,
                    d,
                    self.fill,
                    eps,
                );
                (
                    Tensor::from_vec(gi, image.shape(), image.device())?,
                    Tensor::from_vec(gg, grid.shape(), grid.device())?,
                )
            }
            DType::F64 => {
                let (gi, gg) = backward::<f64>(
                    &image.flatten_all()?.to_vec1()?,
                    &grid.flatten_all()?.to_vec1()?,
                    &grad_res.flatten_all()?.to_vec1()?,
                    d,
                    self.fill,
                    eps,
                );
                (
                    Tensor::from_vec(gi, image.shape(), image.device())?,
                    Tensor::from_vec(gg, grid.shape(), grid.device())?,
                )
            }
            dt => candle_core::bail!("grid_sample backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gi), Some(gg)))
    }
}
