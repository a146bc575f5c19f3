//! Training objectives. Every loss returns a scalar tensor so it can be
//! back-propagated; [`CycleLossReport`] carries host-side values.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, ValidityMask};
use crate::error::{Error, Result};
use crate::geometry::TransformOperator;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_acl: f64,
    pub lambda_scl: f64,
    pub lambda_idt: f64,
    pub lambda_adv: f64,
    /// Weight of the region-missing term; 1 reproduces the plain sum.
    pub lambda_rml: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_acl: 10.0,
            lambda_scl: 1.0,
            lambda_idt: 5.0,
            lambda_adv: 1.0,
            lambda_rml: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_acl", self.lambda_acl),
            ("lambda_scl", self.lambda_scl),
            ("lambda_idt", self.lambda_idt),
            ("lambda_adv", self.lambda_adv),
            ("lambda_rml", self.lambda_rml),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, 0, format!("weight must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleLossReport {
    pub acl: f64,
    pub scl: f64,
    pub rml: f64,
    pub cycle_total: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub idt: f64,
}

/// Which side of the min-max game a loss is computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialSide {
    Generator,
    Discriminator,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Mean absolute difference between an image and its geometry-exact,
/// appearance-round-tripped reconstruction.
pub fn appearance_cycle_loss(x: &ImageBatch, x_rec: &ImageBatch) -> Result<Tensor> {
    same_shape(x.tensor(), x_rec.tensor(), "appearance cycle loss")?;
    mean_abs_diff(x.tensor(), x_rec.tensor())
}

/// Mean absolute difference between two operators' normalized free
/// parameters. Never compares images.
pub fn spatial_cycle_loss(h_inv: &TransformOperator, h_sy: &TransformOperator) -> Result<Tensor> {
    if h_inv.kind != h_sy.kind {
        return Err(Error::KindMismatch {
            left: h_inv.kind.to_string(),
            right: h_sy.kind.to_string(),
        });
    }
    let a = h_inv.representation()?;
    let b = h_sy.representation()?;
    same_shape(&a, &b, "spatial cycle loss")?;
    mean_abs_diff(&a, &b)
}

/// Mean absolute difference between the forward validity mask and its
/// round trip through the inverse transform.
pub fn region_missing_loss(m: &ValidityMask, m_roundtrip: &ValidityMask) -> Result<Tensor> {
    same_shape(m.tensor(), m_roundtrip.tensor(), "region missing loss")?;
    mean_abs_diff(m.tensor(), m_roundtrip.tensor())
}

/// Mean absolute difference restricted to the valid region:
/// `mean |translated·m − transformed·m|`.
pub fn identity_loss(translated: &ImageBatch, transformed: &ImageBatch, m: &ValidityMask) -> Result<Tensor> {
    same_shape(translated.tensor(), transformed.tensor(), "identity loss")?;
    let (b, _, h, w) = translated.dims4();
    if m.tensor().dims() != [b, 1, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "identity loss mask {:?} vs image {:?}",
            m.tensor().dims(),
            translated.tensor().dims()
        )));
    }
    let a = translated.tensor().broadcast_mul(m.tensor())?;
    let bb = transformed.tensor().broadcast_mul(m.tensor())?;
    mean_abs_diff(&a, &bb)
}

/// The three cycle terms and their weighted sum, as tensors.
#[derive(Clone, Debug)]
pub struct CycleTerms {
    pub acl: Tensor,
    pub scl: Tensor,
    pub rml: Tensor,
    pub total: Tensor,
}

/// `λ_acl·ACL + λ_scl·SCL + λ_rml·RML`.
pub fn combine_cycle(acl: Tensor, scl: Tensor, rml: Tensor, w: &LossWeights) -> Result<CycleTerms> {
    let total = ((acl.affine(w.lambda_acl, 0.0)? + scl.affine(w.lambda_scl, 0.0)?)?
        + rml.affine(w.lambda_rml, 0.0)?)?;
    Ok(CycleTerms {
        acl,
        scl,
        rml,
        total,
    })
}

/// Binary cross-entropy of logits against a constant label, averaged:
/// `mean(max(l, 0) − l·y + log(1 + exp(−|l|)))`.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> Result<Tensor> {
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let loss = ((logits.relu()? - logits.affine(target, 0.0)?)? + softplus)?;
    Ok(loss.mean_all()?)
}

/// Adversarial objective over discriminator logits.
///
/// Discriminator side: BCE pushing both real inputs to 1 and both fakes to 0,
/// summed over the image and transform terms. Generator side: the
/// non-saturating form, BCE pushing both fakes to 1. Real inputs are ignored
/// on the generator side.
pub fn adversarial_losses(
    d_out_real: &Tensor,
    d_out_fake: &Tensor,
    dt_out_real: &Tensor,
    dt_out_fake: &Tensor,
    side: AdversarialSide,
) -> Result<Tensor> {
    match side {
        AdversarialSide::Discriminator => {
            let img = (bce_with_logits(d_out_real, 1.0)? + bce_with_logits(d_out_fake, 0.0)?)?;
            let tr = (bce_with_logits(dt_out_real, 1.0)? + bce_with_logits(dt_out_fake, 0.0)?)?;
            Ok((img + tr)?)
        }
        AdversarialSide::Generator => {
            Ok((bce_with_logits(d_out_fake, 1.0)? + bce_with_logits(dt_out_fake, 1.0)?)?)
        }
    }
}

/// Read a scalar tensor to the host, failing on non-finite values.
pub fn scalar(t: &Tensor, name: &str) -> Result<f64> {
    let v = t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{name} = {v}")));
    }
    Ok(v)
}
