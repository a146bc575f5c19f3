use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv2d, conv_transpose2d};
use super::fused::bias_add;
pub use super::fused::{activate, instance_norm, instance_norm_act, leaky_relu, Activation};
use crate::error::Result;

/// Draws initial weights from a seeded stream.
pub struct ParamInit<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl ParamInit<'_> {
    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.var(v, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.var(v, shape)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        Ok(Var::zeros(shape, self.dtype, &self.device)?)
    }

    fn var(&self, v: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(v, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }
}

/// Collects `(name, var)` pairs in a fixed order.
pub type NamedVars = Vec<(String, Var)>;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut ParamInit,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: init.normal(&[c_out, c_in, k, k], std)?,
            bias: init.zeros(&[c_out])?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        bias_add(&y, self.bias.as_tensor())
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Stride-2 transposed convolution that exactly doubles spatial size.
#[derive(Clone, Debug)]
pub struct UpConv2d {
    pub weight: Var,
    pub bias: Var,
}

impl UpConv2d {
    pub fn new(init: &mut ParamInit, c_in: usize, c_out: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: init.normal(&[c_in, c_out, 3, 3], std)?,
            bias: init.zeros(&[c_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, self.weight.as_tensor(), 2, 1, 1)?;
        bias_add(&y, self.bias.as_tensor())
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut ParamInit, d_in: usize, d_out: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: init.normal(&[d_out, d_in], std)?,
            bias: init.zeros(&[d_out])?,
        })
    }

    pub fn zeros(init: &mut ParamInit, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.zeros(&[d_out, d_in])?,
            bias: init.zeros(&[d_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}


/// 2×2 max pooling with stride 2. Built from a reshape and two max
/// reductions so the backward pass routes each gradient to its maximum
/// unscaled.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = x.reshape((b, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?;
    Ok(y)
}


