//! Learnable components: localization nets, generator pairs, image and
//! transform discriminators, plus their weight container.

pub mod discriminator;
pub mod generator;
pub mod conv;
pub mod fused;
pub mod layers;
pub mod localization;
pub mod serialize;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::{select_rows, ImageBatch, ValidityMask};
use crate::error::{Error, Result};
use crate::geometry::{TransformKind, TransformOperator, TransformParams};

/// Smallest input for which the patch discriminator still yields a map.
pub const MIN_IMAGE_SIZE: usize = 24;

pub use discriminator::{patch_map_size, ImageDiscriminator, TransformDiscriminator};
pub use generator::{GeneratorPair, ResnetGenerator};
pub use layers::{NamedVars, ParamInit};
pub use localization::LocalizationNet;

/// Std of the zero-mean Gaussian used for every trainable weight except
/// the localization heads.
pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_CODE_DIM: usize = 16;
pub const DEFAULT_LOC_SIZE: usize = 256;

/// Architecture hyperparameters. Embedded in every weight container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub kind: TransformKind,
    /// Image channels, 1 or 3.
    pub channels: usize,
    pub image_size: usize,
    pub code_dim: usize,
    /// Side of the square input fed to the localization trunk.
    pub loc_size: usize,
    pub gen_width: usize,
    pub res_blocks: usize,
    pub disc_width: usize,
}

impl NetworkConfig {
    /// Defaults for a given kind and training resolution: 6 residual
    /// blocks up to 128 px, 9 above.
    pub fn new(kind: TransformKind, image_size: usize) -> Self {
        Self {
            kind,
            channels: 3,
            image_size,
            code_dim: DEFAULT_CODE_DIM,
            loc_size: DEFAULT_LOC_SIZE,
            gen_width: 64,
            res_blocks: if image_size <= 128 { 6 } else { 9 },
            disc_width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, 0, msg));
        if self.code_dim == 0 {
            return bad("code_dim", "spatial code dimension must be positive".into());
        }
        if !matches!(self.channels, 1 | 3) {
            return bad("channels", format!("must be 1 or 3, got {}", self.channels));
        }
        if self.image_size < MIN_IMAGE_SIZE || self.image_size % 4 != 0 {
            return bad(
                "image_size",
                format!("must be a multiple of 4 and >= {MIN_IMAGE_SIZE}, got {}", self.image_size),
            );
        }
        if self.loc_size < 32 || self.loc_size % 32 != 0 {
            return bad(
                "loc_size",
                format!("must be a positive multiple of 32, got {}", self.loc_size),
            );
        }
        if self.gen_width == 0 || self.disc_width == 0 {
            return bad("gen_width", "network widths must be positive".into());
        }
        if let TransformKind::Tps { grid } = self.kind {
            if grid < 2 {
                return bad("tps_grid", format!("control grid must be at least 2, got {grid}"));
            }
        }
        Ok(())
    }
}

/// Latent vectors `B×d_z` conditioning the localization nets.
#[derive(Clone, Debug)]
pub struct SpatialCode(Tensor);

impl SpatialCode {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "spatial code must be B×d_z, got {:?}",
                z.dims()
            )));
        }
        Ok(Self(z))
    }

    /// Draw `batch` codes i.i.d. from a standard normal.
    pub fn sample(
        rng: &mut ChaCha8Rng,
        batch: usize,
        dim: usize,
        dtype: DType,
        dev: &Device,
    ) -> Result<Self> {
        let v: Vec<f64> = (0..batch * dim)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect();
        Self::new(Tensor::from_vec(v, (batch, dim), dev)?.to_dtype(dtype)?)
    }

    /// `n` codes from a fresh generator seeded with `seed`.
    pub fn seeded(seed: u64, n: usize, dim: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample(&mut rng, n, dim, dtype, dev)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self(select_rows(&self.0, rows)?))
    }
}

/// Every learnable component of the adaptation model.
#[derive(Clone, Debug)]
pub struct Networks {
    pub config: NetworkConfig,
    pub ln_x: LocalizationNet,
    pub ln_y: LocalizationNet,
    pub g_x: GeneratorPair,
    pub g_y: GeneratorPair,
    pub d_x: ImageDiscriminator,
    pub d_y: ImageDiscriminator,
    pub d_t: TransformDiscriminator,
    dtype: DType,
    device: Device,
}

/// Names of the parameter groups, in serialization order.
pub const GROUPS: [&str; 7] = ["ln_x", "ln_y", "g_x", "g_y", "d_x", "d_y", "d_t"];

impl Networks {
    /// Initialize all nets from `seed`: Gaussian(0, 0.02) weights, zero
    /// biases and zeroed localization heads.
    pub fn init(config: &NetworkConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit {
            rng: &mut rng,
            dtype,
            device: device.clone(),
        };
        let c = config;
        let ln = |init: &mut ParamInit| {
            LocalizationNet::new(init, c.kind, c.channels, c.loc_size, c.code_dim, INIT_STD)
        };
        let gen = |init: &mut ParamInit| {
            GeneratorPair::new(init, c.channels, c.gen_width, c.res_blocks, INIT_STD)
        };
        let disc = |init: &mut ParamInit| ImageDiscriminator::new(init, c.channels, c.disc_width, INIT_STD);
        Ok(Self {
            config: config.clone(),
            ln_x: ln(&mut init)?,
            ln_y: ln(&mut init)?,
            g_x: gen(&mut init)?,
            g_y: gen(&mut init)?,
            d_x: disc(&mut init)?,
            d_y: disc(&mut init)?,
            d_t: TransformDiscriminator::new(&mut init, c.kind, INIT_STD)?,
            dtype,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn group(&self, name: &str) -> NamedVars {
        let mut out = Vec::new();
        match name {
            "ln_x" => self.ln_x.collect(name, &mut out),
            "ln_y" => self.ln_y.collect(name, &mut out),
            "g_x" => self.g_x.collect(name, &mut out),
            "g_y" => self.g_y.collect(name, &mut out),
            "d_x" => self.d_x.collect(name, &mut out),
            "d_y" => self.d_y.collect(name, &mut out),
            "d_t" => self.d_t.collect(name, &mut out),
            _ => {}
        }
        out
    }

    pub fn named_groups(&self) -> Vec<(&'static str, NamedVars)> {
        GROUPS.iter().map(|&g| (g, self.group(g))).collect()
    }

    /// Spatial modules and generators: the side that minimizes the objective.
    pub fn generator_vars(&self) -> Vec<Var> {
        ["ln_x", "ln_y", "g_x", "g_y"]
            .iter()
            .flat_map(|g| self.group(g).into_iter().map(|(_, v)| v))
            .collect()
    }

    pub fn discriminator_vars(&self) -> Vec<Var> {
        ["d_x", "d_y", "d_t"]
            .iter()
            .flat_map(|g| self.group(g).into_iter().map(|(_, v)| v))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_groups()
            .iter()
            .flat_map(|(_, vars)| vars.iter())
            .map(|(_, v)| v.elem_count())
            .sum()
    }
}

/// `localize` as a free function over a specific net.
pub fn localize(net: &LocalizationNet, image: &ImageBatch, code: &SpatialCode) -> Result<TransformParams> {
    net.localize(image, code)
}

pub fn complete_background(gen: &GeneratorPair, image: &ImageBatch, mask: &ValidityMask) -> Result<ImageBatch> {
    gen.complete_background(image, mask)
}

pub fn translate_appearance(gen: &GeneratorPair, image: &ImageBatch) -> Result<ImageBatch> {
    gen.translate_appearance(image)
}

pub fn discriminate_image(d: &ImageDiscriminator, image: &ImageBatch) -> Result<Tensor> {
    d.discriminate(image)
}

pub fn discriminate_transform(d: &TransformDiscriminator, op: &TransformOperator) -> Result<Tensor> {
    d.discriminate(op)
}
