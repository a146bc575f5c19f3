use candle_core::Tensor;

use super::layers::{activate, max_pool2x2, Activation, Conv2d, Linear, NamedVars, ParamInit};
use super::SpatialCode;
use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::geometry::{resize, TransformKind, TransformParams};

/// Output channels of the five 3×3 conv blocks, each followed by 2×2 pooling.
pub const TRUNK_CHANNELS: [usize; 5] = [16, 32, 64, 128, 128];
pub const FC1_UNITS: usize = 512;
/// Bound on each predicted parameter deviation from identity.
pub const DEVIATION_BOUND: f64 = 0.35;

/// Regresses transform parameters from an image and a spatial code.
///
/// `theta = identity + 0.35 · tanh(FC2(FC1([trunk(image), code])))`, with
/// FC2 zero-initialized so a fresh net always predicts the identity.
#[derive(Clone, Debug)]
pub struct LocalizationNet {
    pub kind: TransformKind,
    pub input_size: usize,
    pub in_channels: usize,
    pub code_dim: usize,
    pub trunk: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LocalizationNet {
    pub fn new(
        init: &mut ParamInit,
        kind: TransformKind,
        in_channels: usize,
        input_size: usize,
        code_dim: usize,
        std: f64,
    ) -> Result<Self> {
        let mut trunk = Vec::with_capacity(TRUNK_CHANNELS.len());
        let mut c_in = in_channels;
        for &c_out in &TRUNK_CHANNELS {
            trunk.push(Conv2d::new(init, c_in, c_out, 3, 1, 1, std)?);
            c_in = c_out;
        }
        let side = input_size >> TRUNK_CHANNELS.len();
        let feat = c_in * side * side;
        let fc1 = Linear::new(init, feat + code_dim, FC1_UNITS, std)?;
        let fc2 = Linear::zeros(init, FC1_UNITS, kind.num_params())?;
        Ok(Self {
            kind,
            input_size,
            in_channels,
            code_dim,
            trunk,
            fc1,
            fc2,
        })
    }

    pub fn localize(&self, image: &ImageBatch, code: &SpatialCode) -> Result<TransformParams> {
        let (b, c, _, _) = image.dims4();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "localization expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let z = code.tensor();
        if z.dims() != [b, self.code_dim] {
            return Err(Error::ShapeMismatch(format!(
                "spatial code must be {b}×{}, got {:?}",
                self.code_dim,
                z.dims()
            )));
        }
        let mut h = resize(image.tensor(), self.input_size, self.input_size)?;
        for conv in &self.trunk {
            h = max_pool2x2(&activate(&conv.forward(&h)?, Activation::Relu)?)?;
        }
        let feat = h.flatten_from(1)?;
        let joint = Tensor::cat(&[&feat, &z.to_dtype(feat.dtype())?], 1)?;
        let hidden = self.fc1.forward(&joint)?.relu()?;
        let dev = (self.fc2.forward(&hidden)?.tanh()? * DEVIATION_BOUND)?;
        let ident = Tensor::new(self.kind.identity_theta(), dev.device())?
            .to_dtype(dev.dtype())?
            .unsqueeze(0)?;
        TransformParams::new(self.kind, dev.broadcast_add(&ident)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        for (i, conv) in self.trunk.iter().enumerate() {
            conv.collect(&format!("{prefix}.block{}", i + 1), out);
        }
        self.fc1.collect(&format!("{prefix}.fc1"), out);
        self.fc2.collect(&format!("{prefix}.fc2"), out);
    }
}
