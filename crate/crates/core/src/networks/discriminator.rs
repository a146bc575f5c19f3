use candle_core::Tensor;

use super::layers::{instance_norm_act, leaky_relu, Activation, Conv2d, Linear, NamedVars, ParamInit};
use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::geometry::{TransformKind, TransformOperator};

const SLOPE: f64 = 0.2;

/// Patch classifier: three stride-2 and one stride-1 4×4 feature layers,
/// then a 4×4 conv to a one-channel logit map (70×70 receptive field).
#[derive(Clone, Debug)]
pub struct ImageDiscriminator {
    layers: Vec<Conv2d>,
    head: Conv2d,
    channels: usize,
}

impl ImageDiscriminator {
    pub fn new(init: &mut ParamInit, channels: usize, width: usize, std: f64) -> Result<Self> {
        let widths = [width, 2 * width, 4 * width, 8 * width];
        let strides = [2, 2, 2, 1];
        let mut layers = Vec::with_capacity(4);
        let mut c_in = channels;
        for (&c_out, &s) in widths.iter().zip(&strides) {
            layers.push(Conv2d::new(init, c_in, c_out, 4, s, 1, std)?);
            c_in = c_out;
        }
        let head = Conv2d::new(init, c_in, 1, 4, 1, 1, std)?;
        Ok(Self {
            layers,
            head,
            channels,
        })
    }

    /// Spatial map of realness logits, `B×1×h×w`.
    pub fn discriminate(&self, image: &ImageBatch) -> Result<Tensor> {
        if image.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {} channels, got {}",
                self.channels,
                image.channels()
            )));
        }
        let mut h = image.tensor().clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            h = if i > 0 {
                instance_norm_act(&h, Activation::LeakyRelu(SLOPE))?
            } else {
                leaky_relu(&h, SLOPE)?
            };
        }
        self.head.forward(&h)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.conv{i}"), out);
        }
        self.head.collect(&format!("{prefix}.head"), out);
    }
}

/// Output spatial size of [`ImageDiscriminator`] for a square input, or 0
/// when the input is too small to produce a map.
pub fn patch_map_size(input: usize) -> usize {
    let mut n = input;
    for s in [2, 2, 2, 1, 1] {
        n = match (n + 2).checked_sub(4) {
            Some(span) => span / s + 1,
            None => return 0,
        };
    }
    n
}

/// Fully connected classifier over normalized transform parameters.
#[derive(Clone, Debug)]
pub struct TransformDiscriminator {
    kind: TransformKind,
    layers: [Linear; 3],
}

pub const TRANSFORM_DISC_HIDDEN: usize = 64;

impl TransformDiscriminator {
    pub fn new(init: &mut ParamInit, kind: TransformKind, std: f64) -> Result<Self> {
        let h = TRANSFORM_DISC_HIDDEN;
        Ok(Self {
            kind,
            layers: [
                Linear::new(init, kind.num_params(), h, std)?,
                Linear::new(init, h, h, std)?,
                Linear::new(init, h, 1, std)?,
            ],
        })
    }

    /// One realness logit per batch element, `B×1`.
    pub fn discriminate(&self, op: &TransformOperator) -> Result<Tensor> {
        if op.kind != self.kind {
            return Err(Error::KindMismatch {
                left: self.kind.to_string(),
                right: op.kind.to_string(),
            });
        }
        let mut h = op.representation()?;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = leaky_relu(&h, SLOPE)?;
            }
        }
        Ok(h)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.fc{i}"), out);
        }
    }
}
