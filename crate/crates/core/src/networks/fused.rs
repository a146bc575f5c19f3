//! Elementwise and per-channel ops with hand-written gradients: bias
//! addition, activations, and instance normalization fused with an
//! activation.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// Slope applied to negative inputs.
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    z
                } else {
                    a * z
                }
            }
        }
    }

    /// Derivative at pre-activation `z`, taking 0 at the kink.
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => f64::from(u8::from(z > 0.0)),
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("expected a contiguous input"),
    }
}

fn values<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// Apply `f` to a float storage, keeping its dtype.
macro_rules! by_dtype {
    ($storage:expr, $layout:expr, $f:expr) => {
        match $storage {
            CpuStorage::F32(_) => CpuStorage::F32($f(contiguous::<f32>($storage, $layout)?)),
            CpuStorage::F64(_) => CpuStorage::F64($f(contiguous::<f64>($storage, $layout)?)),
            _ => candle_core::bail!("only f32/f64 are supported"),
        }
    };
}

/// Run `f` on the values of tensors `ts` and wrap the result like `like`.
fn with_values<F32, F64>(ts: &[&Tensor], like: &Tensor, f32_fn: F32, f64_fn: F64) -> candle_core::Result<Tensor>
where
    F32: FnOnce(Vec<Vec<f32>>) -> Vec<f32>,
    F64: FnOnce(Vec<Vec<f64>>) -> Vec<f64>,
{
    match like.dtype() {
        DType::F32 => {
            let v = ts.iter().map(|t| values::<f32>(t)).collect::<candle_core::Result<_>>()?;
            Tensor::from_vec(f32_fn(v), like.shape(), like.device())
        }
        DType::F64 => {
            let v = ts.iter().map(|t| values::<f64>(t)).collect::<candle_core::Result<_>>()?;
            Tensor::from_vec(f64_fn(v), like.shape(), like.device())
        }
        dt => candle_core::bail!("unsupported dtype {dt:?}"),
    }
}

struct Activate(Activation);

fn activate_values<T: WithDType>(x: &[T], act: Activation) -> Vec<T> {
    x.iter().map(|v| T::from_f64(act.apply(v.to_f64()))).collect()
}

fn activate_grad<T: WithDType>(x: &[T], g: &[T], act: Activation) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(v, d)| T::from_f64(d.to_f64() * act.slope(v.to_f64())))
        .collect()
}

impl CustomOp1 for Activate {
    fn name(&self) -> &'static str {
        "activation"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let act = self.0;
        Ok((by_dtype!(s, l, |x| activate_values(x, act)), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let act = self.0;
        let g = with_values(
            &[x, grad],
            x,
            |v| activate_grad(&v[0], &v[1], act),
            |v| activate_grad(&v[0], &v[1], act),
        )?;
        Ok(Some(g))
    }
}

/// Elementwise activation.
pub fn activate(x: &Tensor, act: Activation) -> Result<Tensor> {
    if act == Activation::Identity {
        return Ok(x.clone());
    }
    Ok(x.contiguous()?.apply_op1(Activate(act))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    activate(x, Activation::LeakyRelu(slope))
}

struct BiasAdd;

fn bias_add_values<T: WithDType>(x: &[T], b: &[T], plane: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let v = b[i % b.len()];
        for a in chunk {
            *a += v;
        }
    }
    out
}

fn bias_grad<T: WithDType>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![0.0f64; channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        out[i % channels] += chunk.iter().map(|v| v.to_f64()).sum::<f64>();
    }
    out.into_iter().map(T::from_f64).collect()
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = l1.dims()[2] * l1.dims()[3];
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(bias_add_values(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, plane))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(bias_add_values(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, plane))
            }
            _ => candle_core::bail!("bias add supports matching f32/f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, c, h, w) = x.dims4()?;
        let gb = with_values(
            &[grad],
            b,
            |v| bias_grad(&v[0], c, h * w),
            |v| bias_grad(&v[0], c, h * w),
        )?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

/// Add a per-channel `bias` (`C`) to `x` (`B×C×H×W`).
pub fn bias_add(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if bias.dims() != [c] || bias.dtype() != x.dtype() {
        return Err(Error::ShapeMismatch(format!(
            "bias {:?} ({:?}) for input {:?} ({:?})",
            bias.dims(),
            bias.dtype(),
            x.dims(),
            x.dtype()
        )));
    }
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, BiasAdd)?)
}

struct InstanceNorm(Activation);

/// Mean and `1/sqrt(var + eps)` of one plane.
fn plane_stats<T: WithDType>(plane: &[T]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = plane.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn norm_forward<T: WithDType>(x: &[T], plane: usize, act: Activation) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for p in x.chunks(plane) {
        let (mean, inv) = plane_stats(p);
        out.extend(p.iter().map(|v| T::from_f64(act.apply((v.to_f64() - mean) * inv))));
    }
    out
}

/// With `z` the normalized plane and `d = g · act'(z)`:
/// `dx = inv · (d − mean(d) − z · mean(d·z))`.
fn norm_backward<T: WithDType>(x: &[T], g: &[T], plane: usize, act: Activation) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let n = plane as f64;
    let mut z = vec![0.0; plane];
    let mut d = vec![0.0; plane];
    for (xp, gp) in x.chunks(plane).zip(g.chunks(plane)) {
        let (mean, inv) = plane_stats(xp);
        for i in 0..plane {
            z[i] = (xp[i].to_f64() - mean) * inv;
            d[i] = gp[i].to_f64() * act.slope(z[i]);
        }
        let d_mean = d.iter().sum::<f64>() / n;
        let dz_mean = d.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / n;
        out.extend((0..plane).map(|i| T::from_f64(inv * (d[i] - d_mean - z[i] * dz_mean))));
    }
    out
}

impl CustomOp1 for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.dims();
        let plane = dims[2] * dims[3];
        let act = self.0;
        Ok((by_dtype!(s, l, |x| norm_forward(x, plane, act)), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        let act = self.0;
        let g = with_values(
            &[x, grad],
            x,
            |v| norm_backward(&v[0], &v[1], h * w, act),
            |v| norm_backward(&v[0], &v[1], h * w, act),
        )?;
        Ok(Some(g))
    }
}

/// Per-sample, per-channel normalization over the spatial axes (no affine),
/// `(x − mean) / sqrt(var + 1e-5)` with the biased variance, followed by
/// `act`.
pub fn instance_norm_act(x: &Tensor, act: Activation) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(InstanceNorm(act))?)
}

pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    instance_norm_act(x, Activation::Identity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn diff(p: &Tensor, q: &Tensor) -> f64 {
        (p - q).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    /// Compare values and gradients of `ours` and `reference` at `x` under a
    /// random linear probe.
    fn same_op(x: &[&Var], ours: impl Fn() -> Tensor, reference: impl Fn() -> Tensor) {
        let a = ours();
        let b = reference();
        assert!(diff(&a, &b) < 1e-12);
        let probe = Tensor::randn(0f64, 1.0, a.dims(), a.device()).unwrap();
        let ga = (&a * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (&b * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in x {
            assert!(diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-12);
        }
    }

    fn composed_norm(x: &Tensor) -> Tensor {
        let (b, c, h, w) = x.dims4().unwrap();
        let flat = x.reshape((b, c, h * w)).unwrap();
        let mean = flat.mean_keepdim(2).unwrap();
        let centered = flat.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(2).unwrap();
        let y = centered.broadcast_div(&(var + NORM_EPS).unwrap().sqrt().unwrap()).unwrap();
        y.reshape((b, c, h, w)).unwrap()
    }

    #[test]
    fn fused_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 2.0, (2, 3, 5, 7), &dev).unwrap();
        same_op(&[&x], || instance_norm(&x).unwrap(), || composed_norm(&x));
        same_op(
            &[&x],
            || instance_norm_act(&x, Activation::Relu).unwrap(),
            || composed_norm(&x).relu().unwrap(),
        );
        same_op(
            &[&x],
            || instance_norm_act(&x, Activation::LeakyRelu(0.2)).unwrap(),
            || {
                let z = composed_norm(&x);
                z.maximum(&(&z * 0.2).unwrap()).unwrap()
            },
        );
    }

    #[test]
    fn activations_and_bias_match_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (2, 3, 4, 5), &dev).unwrap();
        let b = Var::randn(0f64, 1.0, 3, &dev).unwrap();
        same_op(&[&x], || activate(&x, Activation::Relu).unwrap(), || x.relu().unwrap());
        same_op(
            &[&x],
            || leaky_relu(&x, 0.2).unwrap(),
            || x.maximum(&(x.as_tensor() * 0.2).unwrap()).unwrap(),
        );
        same_op(
            &[&x, &b],
            || bias_add(&x, &b).unwrap(),
            || x.broadcast_add(&b.reshape((1, 3, 1, 1)).unwrap()).unwrap(),
        );
    }
}
