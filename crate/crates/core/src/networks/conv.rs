//! 2-D convolution and its adjoint with analytic gradients.
//!
//! Wide outputs loop over kernel taps, each a single contiguous pass over
//! a padded input plane, instead of materializing a patch matrix. Narrow
//! outputs are one matrix product over gathered patches.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Outputs at least this wide use the direct loops.
const DIRECT_MIN_WIDTH: usize = 32;

/// Shapes of a convolution from `B×C×H×W` to `B×O×Ho×Wo`.
///
/// The input is zero-padded (by the padding, then up to a multiple of the
/// stride) and split into `s²` phase planes of `Hq×Wq`: plane `(ry, rx)`
/// holds the padded pixels whose row is `ry` and column is `rx` modulo the
/// stride. Outputs are kept in a wide layout with row stride `Wq`. Kernel
/// tap `(ky, kx)` then pairs wide output element `i` with element
/// `i + (ky/s)·Wq + kx/s` of plane `(ky mod s, kx mod s)` for every `i`, so
/// each tap is one contiguous pass over a whole plane. The `Wq − Wo`
/// columns past each output row are scratch: discarded on the way out and
/// zero on the way in.
#[derive(Clone, Copy, Debug)]
struct Geom {
    b: usize,
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Geom {
    fn hq(&self) -> usize {
        (self.h + 2 * self.p).div_ceil(self.s)
    }

    fn wq(&self) -> usize {
        (self.w + 2 * self.p).div_ceil(self.s)
    }

    fn plane(&self) -> usize {
        self.hq() * self.wq()
    }

    /// Elements of a wide output plane that a tap touches.
    fn span(&self) -> usize {
        (self.ho - 1) * self.wq() + self.wo
    }

    /// Padded phase planes of a `B×C×H×W` buffer, ordered `(ry, rx, b, c)`.
    fn pad_split<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let (s, p, hq, wq) = (self.s, self.p, self.hq(), self.wq());
        let mut out = vec![T::from_f64(0.0); s * s * self.b * self.c * hq * wq];
        let mut at = 0;
        for ry in 0..s {
            for rx in 0..s {
                for bc in 0..self.b * self.c {
                    for i in 0..hq {
                        let row = (i * s + ry).wrapping_sub(p);
                        if row < self.h {
                            let src = &x[(bc * self.h + row) * self.w..][..self.w];
                            for j in 0..wq {
                                let col = (j * s + rx).wrapping_sub(p);
                                if col < self.w {
                                    out[at + j] = src[col];
                                }
                            }
                        }
                        at += wq;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Geom::pad_split`]: gather planes back into `B×C×H×W`,
    /// dropping the padding.
    fn merge_crop<T: WithDType>(&self, planes: &[T]) -> Vec<T> {
        let (s, p, hq, wq) = (self.s, self.p, self.hq(), self.wq());
        let bc_n = self.b * self.c;
        let mut out = vec![T::from_f64(0.0); bc_n * self.h * self.w];
        for bc in 0..bc_n {
            for y in 0..self.h {
                let (ry, i) = ((y + p) % s, (y + p) / s);
                for x in 0..self.w {
                    let (rx, j) = ((x + p) % s, (x + p) / s);
                    let plane = (ry * s + rx) * bc_n + bc;
                    out[(bc * self.h + y) * self.w + x] = planes[(plane * hq + i) * wq + j];
                }
            }
        }
        out
    }

    /// `B×O×Ho×Wo` to the wide layout, with zero scratch columns.
    fn widen<T: WithDType>(&self, y: &[T]) -> Vec<T> {
        let wq = self.wq();
        let mut out = vec![T::from_f64(0.0); self.b * self.o * self.ho * wq];
        for (dst, src) in out.chunks_mut(wq).zip(y.chunks(self.wo)) {
            dst[..self.wo].copy_from_slice(src);
        }
        out
    }

    /// Wide layout back to `B×O×Ho×Wo`.
    fn compact<T: WithDType>(&self, wide: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.b * self.o * self.ho * self.wo);
        for row in wide.chunks(self.wq()) {
            out.extend_from_slice(&row[..self.wo]);
        }
        out
    }

    /// Visit `(plane offset, wide output offset, weight index)` for every
    /// tap and every (batch, output channel, input channel) triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = *self;
        let (plane, wq, bc_n) = (g.plane(), g.wq(), g.b * g.c);
        let out_plane = g.ho * wq;
        for ky in 0..g.k {
            for kx in 0..g.k {
                let phase = (ky % g.s) * g.s + kx % g.s;
                let shift = (ky / g.s) * wq + kx / g.s;
                for b in 0..g.b {
                    for o in 0..g.o {
                        for c in 0..g.c {
                            let wi = ((o * g.c + c) * g.k + ky) * g.k + kx;
                            let x0 = (phase * bc_n + b * g.c + c) * plane + shift;
                            f(x0, (b * g.o + o) * out_plane, wi);
                        }
                    }
                }
            }
        }
    }

    /// Wide convolution output from padded phase planes.
    fn forward<T: WithDType>(&self, planes: &[T], w: &[T]) -> Vec<T> {
        let n = self.span();
        let mut y = vec![T::from_f64(0.0); self.b * self.o * self.ho * self.wq()];
        self.for_each_tap(|xs, ys, wi| axpy(&mut y[ys..ys + n], &planes[xs..xs + n], w[wi]));
        y
    }

    /// Gradient w.r.t. the padded phase planes, from a wide output gradient.
    fn grad_input<T: WithDType>(&self, gy: &[T], w: &[T]) -> Vec<T> {
        let n = self.span();
        let mut gx = vec![T::from_f64(0.0); self.s * self.s * self.b * self.c * self.plane()];
        self.for_each_tap(|xs, ys, wi| axpy(&mut gx[xs..xs + n], &gy[ys..ys + n], w[wi]));
        gx
    }

    /// Gradient w.r.t. the weight from padded phase planes and a wide
    /// output gradient.
    fn grad_weight<T: WithDType>(&self, planes: &[T], gy: &[T]) -> Vec<T> {
        let n = self.span();
        let mut gw = vec![T::from_f64(0.0); self.o * self.c * self.k * self.k];
        self.for_each_tap(|xs, ys, wi| gw[wi] += dot(&gy[ys..ys + n], &planes[xs..xs + n]));
        gw
    }
}

/// Dot product with independent partial sums, which lets the compiler keep
/// them in vector lanes.
#[inline(always)]
fn dot_lanes<T: WithDType>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::from_f64(0.0); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = T::from_f64(0.0);
    for v in acc {
        total += v;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

/// `dst += a · src`.
#[inline(always)]
fn axpy_plain<T: WithDType>(dst: &mut [T], src: &[T], a: T) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += a * v;
    }
}

#[cfg(target_arch = "x86_64")]
mod wide {
    use candle_core::WithDType;

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
        super::dot_lanes(a, b)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn axpy<T: WithDType>(dst: &mut [T], src: &[T], a: T) {
        super::axpy_plain(dst, src, a)
    }

    pub fn available() -> bool {
        std::is_x86_feature_detected!("avx2")
    }
}

fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
    #[cfg(target_arch = "x86_64")]
    if wide::available() {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { wide::dot(a, b) };
    }
    dot_lanes(a, b)
}

fn axpy<T: WithDType>(dst: &mut [T], src: &[T], a: T) {
    #[cfg(target_arch = "x86_64")]
    if wide::available() {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { wide::axpy(dst, src, a) };
    }
    axpy_plain(dst, src, a)
}

/// `transposed == false`: inputs are (image, weight) of the convolution.
/// `transposed == true`: inputs are (image, weight) of its adjoint, whose
/// image has the convolution's output shape.
struct DirectConv {
    geom: Geom,
    transposed: bool,
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv expects contiguous inputs"),
    }
}

fn to_vec<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

impl DirectConv {
    fn run<T: WithDType>(&self, a: &[T], w: &[T]) -> Vec<T> {
        let g = &self.geom;
        if self.transposed {
            g.merge_crop(&g.grad_input(&g.widen(a), w))
        } else {
            g.compact(&g.forward(&g.pad_split(a), w))
        }
    }

    fn grads<T: WithDType>(&self, a: &Tensor, w: &Tensor, grad: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let g = &self.geom;
        let (av, wv, gv) = (to_vec::<T>(a)?, to_vec::<T>(w)?, to_vec::<T>(grad)?);
        let (ga, gw) = if self.transposed {
            let planes = g.pad_split(&gv);
            (g.compact(&g.forward(&planes, &wv)), g.grad_weight(&planes, &g.widen(&av)))
        } else {
            let wide = g.widen(&gv);
            (g.merge_crop(&g.grad_input(&wide, &wv)), g.grad_weight(&g.pad_split(&av), &wide))
        };
        Ok((
            Tensor::from_vec(ga, a.shape(), a.device())?,
            Tensor::from_vec(gw, w.shape(), w.device())?,
        ))
    }
}

impl CustomOp2 for DirectConv {
    fn name(&self) -> &'static str {
        if self.transposed {
            "conv-transpose2d-direct"
        } else {
            "conv2d-direct"
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geom;
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(self.run::<f32>(slice(s1, l1)?, slice(s2, l2)?)),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(self.run::<f64>(slice(s1, l1)?, slice(s2, l2)?)),
            _ => candle_core::bail!("conv supports matching f32/f64 inputs only"),
        };
        let shape = if self.transposed {
            Shape::from((g.b, g.c, g.h, g.w))
        } else {
            Shape::from((g.b, g.o, g.ho, g.wo))
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        a: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (ga, gw) = match a.dtype() {
            DType::F32 => self.grads::<f32>(a, w, grad)?,
            DType::F64 => self.grads::<f64>(a, w, grad)?,
            dt => candle_core::bail!("conv backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(ga), Some(gw)))
    }
}

/// Gathers the `C·k·k` receptive field of every output pixel into one row
/// of a `(B·Ho·Wo)×(C·k·k)` patch matrix.
struct Im2Col(Geom);

impl Im2Col {
    /// Visit `(input index, patch index)` for every in-bounds tap.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let g = &self.0;
        let ckk = g.c * g.k * g.k;
        for b in 0..g.b {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let row = ((b * g.ho + oy) * g.wo + ox) * ckk;
                    for c in 0..g.c {
                        for ky in 0..g.k {
                            let iy = (oy * g.s + ky).wrapping_sub(g.p);
                            if iy >= g.h {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.s + kx).wrapping_sub(g.p);
                                if ix < g.w {
                                    f(((b * g.c + c) * g.h + iy) * g.w + ix, row + (c * g.k + ky) * g.k + kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn len(&self) -> usize {
        let g = &self.0;
        g.b * g.ho * g.wo * g.c * g.k * g.k
    }

    fn gather<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::from_f64(0.0); self.len()];
        self.for_each(|i, j| out[j] = x[i]);
        out
    }

    fn scatter<T: WithDType>(&self, cols: &[T]) -> Vec<T> {
        let g = &self.0;
        let mut out = vec![T::from_f64(0.0); g.b * g.c * g.h * g.w];
        self.for_each(|i, j| out[i] += cols[j]);
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.gather::<f32>(slice(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(self.gather::<f64>(slice(s, l)?)),
            _ => candle_core::bail!("im2col supports f32/f64 only"),
        };
        let g = &self.0;
        Ok((out, Shape::from((g.b * g.ho * g.wo, g.c * g.k * g.k))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let gx = match x.dtype() {
            DType::F32 => Tensor::from_vec(self.scatter(&to_vec::<f32>(grad)?), x.shape(), x.device())?,
            DType::F64 => Tensor::from_vec(self.scatter(&to_vec::<f64>(grad)?), x.shape(), x.device())?,
            dt => candle_core::bail!("im2col backward: unsupported dtype {dt:?}"),
        };
        Ok(Some(gx))
    }
}

/// The convolution as one matrix product over gathered patches.
fn conv2d_lowered(x: &Tensor, weight: &Tensor, g: &Geom) -> Result<Tensor> {
    let cols = x.contiguous()?.apply_op1(Im2Col(*g))?;
    let wm = weight.contiguous()?.reshape((g.o, g.c * g.k * g.k))?;
    let y = cols.matmul(&wm.t()?)?;
    Ok(y.reshape((g.b, g.ho * g.wo, g.o))?
        .transpose(1, 2)?
        .reshape((g.b, g.o, g.ho, g.wo))?)
}

fn check(x: &Tensor, weight: &Tensor, channels: usize) -> Result<()> {
    if x.dtype() != weight.dtype() {
        return Err(Error::ShapeMismatch(format!(
            "conv: dtype {:?} vs {:?}",
            x.dtype(),
            weight.dtype()
        )));
    }
    if x.dim(1)? != channels {
        return Err(Error::ShapeMismatch(format!(
            "conv: input has {} channels, weight expects {channels}",
            x.dim(1)?
        )));
    }
    Ok(())
}

/// Cross-correlation of `x` (`B×C×H×W`) with `weight` (`O×C×k×k`).
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    check(x, weight, wc)?;
    if k != k2 || h + 2 * padding < k || w + 2 * padding < k || stride == 0 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input {:?}, weight {:?}, stride {stride}, padding {padding}",
            x.dims(),
            weight.dims()
        )));
    }
    let geom = Geom {
        b,
        c,
        o,
        h,
        w,
        ho: (h + 2 * padding - k) / stride + 1,
        wo: (w + 2 * padding - k) / stride + 1,
        k,
        s: stride,
        p: padding,
    };
    if geom.wo < DIRECT_MIN_WIDTH {
        return conv2d_lowered(x, weight, &geom);
    }
    let op = DirectConv {
        geom,
        transposed: false,
    };
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, op)?)
}

/// Adjoint of [`conv2d`]: `x` is `B×C×H×W`, `weight` is `C×O×k×k`, and the
/// output is `B×O×((H−1)·stride − 2·padding + k + output_padding)` on each
/// axis.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (wc, o, k, k2) = weight.dims4()?;
    check(x, weight, wc)?;
    let size = |n: usize| (n - 1) * stride + k + output_padding;
    if k != k2 || stride == 0 || output_padding >= stride || size(h.min(w)) <= 2 * padding {
        return Err(Error::ShapeMismatch(format!(
            "conv_transpose2d: input {:?}, weight {:?}, stride {stride}, padding {padding}",
            x.dims(),
            weight.dims()
        )));
    }
    // The convolution this is the adjoint of maps B×O×Hc×Wc to x's shape.
    let geom = Geom {
        b,
        c: o,
        o: c,
        h: size(h) - 2 * padding,
        w: size(w) - 2 * padding,
        ho: h,
        wo: w,
        k,
        s: stride,
        p: padding,
    };
    let op = DirectConv {
        geom,
        transposed: true,
    };
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, op)?)
}
