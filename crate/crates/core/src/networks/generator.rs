use candle_core::Tensor;

use super::layers::{instance_norm, instance_norm_act, Activation, Conv2d, NamedVars, ParamInit, UpConv2d};
use crate::batch::{ImageBatch, ValidityMask};
use crate::error::{Error, Result};

/// Residual encoder-decoder: 7×7 stem, two stride-2 downsamplings,
/// `blocks` residual blocks, two stride-2 upsamplings, 7×7 head and tanh.
#[derive(Clone, Debug)]
pub struct ResnetGenerator {
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<(Conv2d, Conv2d)>,
    up: [UpConv2d; 2],
    head: Conv2d,
}

impl ResnetGenerator {
    pub fn new(
        init: &mut ParamInit,
        c_in: usize,
        c_out: usize,
        width: usize,
        blocks: usize,
        std: f64,
    ) -> Result<Self> {
        let (w1, w2, w4) = (width, 2 * width, 4 * width);
        Ok(Self {
            stem: Conv2d::new(init, c_in, w1, 7, 1, 3, std)?,
            down: [
                Conv2d::new(init, w1, w2, 3, 2, 1, std)?,
                Conv2d::new(init, w2, w4, 3, 2, 1, std)?,
            ],
            blocks: (0..blocks)
                .map(|_| {
                    Ok((
                        Conv2d::new(init, w4, w4, 3, 1, 1, std)?,
                        Conv2d::new(init, w4, w4, 3, 1, 1, std)?,
                    ))
                })
                .collect::<Result<_>>()?,
            up: [
                UpConv2d::new(init, w4, w2, std)?,
                UpConv2d::new(init, w2, w1, std)?,
            ],
            head: Conv2d::new(init, w1, c_out, 7, 1, 3, std)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "generator input must be a multiple of 4, got {h}×{w}"
            )));
        }
        let mut y = instance_norm_act(&self.stem.forward(x)?, Activation::Relu)?;
        for conv in &self.down {
            y = instance_norm_act(&conv.forward(&y)?, Activation::Relu)?;
        }
        for (a, b) in &self.blocks {
            let r = instance_norm_act(&a.forward(&y)?, Activation::Relu)?;
            let r = instance_norm(&b.forward(&r)?)?;
            y = (y + r)?;
        }
        for conv in &self.up {
            y = instance_norm_act(&conv.forward(&y)?, Activation::Relu)?;
        }
        Ok(self.head.forward(&y)?.tanh()?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        self.stem.collect(&format!("{prefix}.stem"), out);
        for (i, c) in self.down.iter().enumerate() {
            c.collect(&format!("{prefix}.down{i}"), out);
        }
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.collect(&format!("{prefix}.res{i}.a"), out);
            b.collect(&format!("{prefix}.res{i}.b"), out);
        }
        for (i, c) in self.up.iter().enumerate() {
            c.collect(&format!("{prefix}.up{i}"), out);
        }
        self.head.collect(&format!("{prefix}.head"), out);
    }
}

/// Background completion (`G_A`) followed by appearance translation (`G_B`).
#[derive(Clone, Debug)]
pub struct GeneratorPair {
    pub completion: ResnetGenerator,
    pub translation: ResnetGenerator,
    channels: usize,
}

impl GeneratorPair {
    pub fn new(
        init: &mut ParamInit,
        channels: usize,
        width: usize,
        blocks: usize,
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            completion: ResnetGenerator::new(init, channels + 1, channels, width, blocks, std)?,
            translation: ResnetGenerator::new(init, channels, channels, width, blocks, std)?,
            channels,
        })
    }

    /// `image·mask + G_A(image, mask)·(1 − mask)`: pixels with mask = 1 pass
    /// through untouched.
    pub fn complete_background(&self, image: &ImageBatch, mask: &ValidityMask) -> Result<ImageBatch> {
        let (b, c, h, w) = image.dims4();
        if c != self.channels || mask.tensor().dims() != [b, 1, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "completion expects {}-channel image and aligned mask, got {:?} and {:?}",
                self.channels,
                image.tensor().dims(),
                mask.tensor().dims()
            )));
        }
        let m = mask.tensor();
        let input = Tensor::cat(&[image.tensor(), m], 1)?;
        let generated = self.completion.forward(&input)?;
        let keep = image.tensor().broadcast_mul(m)?;
        let fill = generated.broadcast_mul(&m.affine(-1.0, 1.0)?)?;
        ImageBatch::new((keep + fill)?)
    }

    pub fn translate_appearance(&self, image: &ImageBatch) -> Result<ImageBatch> {
        if image.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "translation expects {} channels, got {}",
                self.channels,
                image.channels()
            )));
        }
        ImageBatch::new(self.translation.forward(image.tensor())?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        self.completion.collect(&format!("{prefix}.completion"), out);
        self.translation.collect(&format!("{prefix}.translation"), out);
    }
}
