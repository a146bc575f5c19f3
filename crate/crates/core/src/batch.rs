//! Tensor newtypes shared across the crate.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// A `B×C×H×W` image tensor with values in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "image batch must be B×C×H×W, got {:?}",
                values.dims()
            )));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `(batch, channels, height, width)`
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn batch_size(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    /// Select a subset of batch rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self(select_rows(&self.0, rows)?))
    }
}

/// A `B×1×H×W` soft validity map with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ValidityMask(Tensor);

impl ValidityMask {
    pub fn new(values: Tensor) -> Result<Self> {
        let d = values.dims();
        if d.len() != 4 || d[1] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "validity mask must be B×1×H×W, got {d:?}"
            )));
        }
        Ok(Self(values))
    }

    pub fn ones(batch: usize, height: usize, width: usize, like: &Tensor) -> Result<Self> {
        let t = Tensor::ones((batch, 1, height, width), like.dtype(), like.device())?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }
}

pub(crate) fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let idx = Tensor::new(idx.as_slice(), t.device())?;
    Ok(t.index_select(&idx, 0)?)
}
