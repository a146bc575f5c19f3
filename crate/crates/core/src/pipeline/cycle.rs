use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, ValidityMask};
use crate::error::{Error, Result};
use crate::geometry::{
    build_operator, invert_operator, matrix::host_values, warp, warp_mask, TransformOperator,
    TransformParams,
};
use crate::losses::{
    appearance_cycle_loss, combine_cycle, identity_loss, region_missing_loss, spatial_cycle_loss,
    CycleTerms, LossWeights,
};
use crate::networks::{GeneratorPair, ImageDiscriminator, LocalizationNet, Networks, SpatialCode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    X2Y,
    Y2X,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::X2Y, Direction::Y2X];

    pub fn reverse(&self) -> Direction {
        match self {
            Direction::X2Y => Direction::Y2X,
            Direction::Y2X => Direction::X2Y,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Direction::X2Y => "x2y",
            Direction::Y2X => "y2x",
        }
    }
}

/// The modules playing each role for one cycle direction.
pub struct Roles<'a> {
    /// Spatial module of the source domain.
    pub ln_fwd: &'a LocalizationNet,
    pub g_fwd: &'a GeneratorPair,
    /// Spatial module and generators that map back to the source domain.
    pub ln_back: &'a LocalizationNet,
    pub g_back: &'a GeneratorPair,
    /// Discriminator of the target domain.
    pub d_target: &'a ImageDiscriminator,
}

impl Networks {
    pub fn roles(&self, direction: Direction) -> Roles<'_> {
        match direction {
            Direction::X2Y => Roles {
                ln_fwd: &self.ln_x,
                g_fwd: &self.g_x,
                ln_back: &self.ln_y,
                g_back: &self.g_y,
                d_target: &self.d_y,
            },
            Direction::Y2X => Roles {
                ln_fwd: &self.ln_y,
                g_fwd: &self.g_y,
                ln_back: &self.ln_x,
                g_back: &self.g_x,
                d_target: &self.d_x,
            },
        }
    }
}

/// Intermediates of the forward adaptation path.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub theta: TransformParams,
    pub op: TransformOperator,
    pub transformed: ImageBatch,
    pub mask: ValidityMask,
    pub completed: ImageBatch,
    pub adapted: ImageBatch,
}

/// Localize, warp, complete the background and translate appearance.
pub fn forward_pass(
    nets: &Networks,
    x: &ImageBatch,
    code: &SpatialCode,
    direction: Direction,
) -> Result<ForwardPass> {
    let r = nets.roles(direction);
    let theta = r.ln_fwd.localize(x, code)?;
    let op = build_operator(&theta)?;
    let (transformed, mask) = warp(x, &op)?;
    let completed = r.g_fwd.complete_background(&transformed, &mask)?;
    let adapted = r.g_fwd.translate_appearance(&completed)?;
    Ok(ForwardPass {
        theta,
        op,
        transformed,
        mask,
        completed,
        adapted,
    })
}

/// Everything produced by one source → target → source pass.
#[derive(Clone, Debug)]
pub struct CycleBundle {
    pub direction: Direction,
    pub x: ImageBatch,
    pub code: SpatialCode,
    /// Code handed to the recovery spatial module; the same tensor as `code`.
    pub recovery_code: SpatialCode,
    pub theta: TransformParams,
    pub h_xy: TransformOperator,
    pub transformed: ImageBatch,
    pub m: ValidityMask,
    pub adapted: ImageBatch,
    pub h_xy_inv: TransformOperator,
    /// Reconstruction through the exact inverse transform.
    pub x_rec_inv: ImageBatch,
    /// Transform predicted by the recovery spatial module from `adapted`.
    pub h_sy: TransformOperator,
    /// Reconstruction through the predicted transform.
    pub x_rec_pred: ImageBatch,
    pub m_roundtrip: ValidityMask,
}

/// Run one full cycle. The recovery pass reuses `code` unchanged.
pub fn run_cycle(
    nets: &Networks,
    x: &ImageBatch,
    code: &SpatialCode,
    direction: Direction,
) -> Result<CycleBundle> {
    let r = nets.roles(direction);
    let fwd = forward_pass(nets, x, code, direction)?;
    let recovery_code = code.clone();

    let h_xy_inv = invert_operator(&fwd.op)?;
    let (back, back_mask) = warp(&fwd.adapted, &h_xy_inv)?;
    let back = r.g_back.complete_background(&back, &back_mask)?;
    let x_rec_inv = r.g_back.translate_appearance(&back)?;

    let h_sy = build_operator(&r.ln_back.localize(&fwd.adapted, &recovery_code)?)?;
    let (pred, pred_mask) = warp(&fwd.adapted, &h_sy)?;
    let pred = r.g_back.complete_background(&pred, &pred_mask)?;
    let x_rec_pred = r.g_back.translate_appearance(&pred)?;

    let m_roundtrip = warp_mask(&fwd.mask, &h_xy_inv)?;

    Ok(CycleBundle {
        direction,
        x: x.clone(),
        code: code.clone(),
        recovery_code,
        theta: fwd.theta,
        h_xy: fwd.op,
        transformed: fwd.transformed,
        m: fwd.mask,
        adapted: fwd.adapted,
        h_xy_inv,
        x_rec_inv,
        h_sy,
        x_rec_pred,
        m_roundtrip,
    })
}

impl CycleBundle {
    pub fn batch_size(&self) -> usize {
        self.x.batch_size()
    }

    /// `λ_acl·ACL + λ_scl·SCL + λ_rml·RML` for this bundle.
    pub fn cycle_terms(&self, w: &LossWeights) -> Result<CycleTerms> {
        let acl = appearance_cycle_loss(&self.x, &self.x_rec_inv)?;
        let scl = spatial_cycle_loss(&self.h_xy_inv, &self.h_sy)?;
        let rml = region_missing_loss(&self.m, &self.m_roundtrip)?;
        combine_cycle(acl, scl, rml, w)
    }

    pub fn identity_term(&self) -> Result<candle_core::Tensor> {
        identity_loss(&self.adapted, &self.transformed, &self.m)
    }

    /// Runtime check of the structural invariants: the recovery code is the
    /// forward code, and for matrix kinds the stored inverse is the exact
    /// inverse of the forward operator (entrywise within `tol`).
    pub fn verify(&self, tol: f64) -> Result<()> {
        let a = host_values(self.code.tensor())?;
        let b = host_values(self.recovery_code.tensor())?;
        if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) || a.len() != b.len() {
            return Err(Error::ShapeMismatch(
                "recovery pass used a different spatial code".into(),
            ));
        }
        if self.h_xy.kind.is_matrix() {
            let recomputed = invert_operator(&self.h_xy)?;
            let lhs = host_values(recomputed.matrix().expect("matrix kind"))?;
            let rhs = host_values(self.h_xy_inv.matrix().expect("matrix kind"))?;
            let worst = lhs
                .iter()
                .zip(&rhs)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            if worst > tol {
                return Err(Error::singular(
                    format!("stored inverse deviates by {worst:e}"),
                    vec![],
                ));
            }
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.x.tensor().dtype()
    }
}

/// [`run_cycle`] that drops batch elements whose transforms are singular
/// and retries on the rest. Returns the surviving bundle and the original
/// indices it covers, or `None` when every element was dropped.
pub fn run_cycle_guarded(
    nets: &Networks,
    x: &ImageBatch,
    code: &SpatialCode,
    direction: Direction,
) -> Result<Option<(CycleBundle, Vec<usize>)>> {
    let mut kept: Vec<usize> = (0..x.batch_size()).collect();
    let mut xs = x.clone();
    let mut zs = code.clone();
    loop {
        match run_cycle(nets, &xs, &zs, direction) {
            Ok(b) => return Ok(Some((b, kept))),
            Err(Error::SingularTransform { reason, indices }) if !indices.is_empty() => {
                let dropped: Vec<usize> = indices.iter().map(|&i| kept[i]).collect();
                log::warn!(
                    "{}: skipping batch elements {dropped:?} with singular transforms ({reason})",
                    direction.label()
                );
                let rows: Vec<usize> = (0..kept.len()).filter(|i| !indices.contains(i)).collect();
                if rows.is_empty() {
                    return Ok(None);
                }
                kept = rows.iter().map(|&i| kept[i]).collect();
                xs = xs.select(&rows)?;
                zs = zs.select(&rows)?;
            }
            Err(e) => return Err(e),
        }
    }
}
