//! Inference: one-to-one and one-to-many adaptation from X to Y.

use candle_core::Tensor;

use super::cycle::{forward_pass, Direction};
use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::networks::{Networks, SpatialCode};

/// Number of views per input in one-to-many adaptation.
pub const DEFAULT_NUM_VIEWS: usize = 10;

/// Localize, warp, complete and translate `image` under `code`. No
/// recovery path is run. `code` must have one row per image, or a single
/// row shared by every image.
pub fn adapt(nets: &Networks, image: &ImageBatch, code: &SpatialCode) -> Result<ImageBatch> {
    let b = image.batch_size();
    let code = match code.batch_size() {
        n if n == b => code.clone(),
        1 => SpatialCode::new(code.tensor().repeat((b, 1))?)?,
        n => {
            return Err(Error::ShapeMismatch(format!(
                "{n} spatial codes for a batch of {b} images"
            )))
        }
    };
    let x = ImageBatch::new(image.tensor().to_dtype(nets.dtype())?)?;
    let code = SpatialCode::new(code.tensor().to_dtype(nets.dtype())?)?;
    Ok(forward_pass(nets, &x, &code, Direction::X2Y)?.adapted.detach())
}

/// `n` adapted versions of every image. View `k` uses the `k`-th code drawn
/// from a standard normal seeded with `seed`, shared across the batch.
pub fn adapt_multi(nets: &Networks, image: &ImageBatch, n: usize, seed: u64) -> Result<Vec<ImageBatch>> {
    if n == 0 {
        return Err(Error::config("num_views", 0, "must be at least 1"));
    }
    let codes = SpatialCode::seeded(seed, n, nets.config.code_dim, nets.dtype(), nets.device())?;
    (0..n)
        .map(|k| {
            let row: Tensor = codes.tensor().narrow(0, k, 1)?;
            adapt(nets, image, &SpatialCode::new(row)?)
        })
        .collect()
}
