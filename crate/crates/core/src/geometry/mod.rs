//! Parameterization, inversion and differentiable application of affine,
//! homography and thin-plate-spline transforms.
//!
//! All parameters are expressed in normalized image coordinates `[-1, 1]²`
//! so they do not depend on resolution. Images are warped backward: every
//! output pixel pulls its value from a source location given by
//! [`generate_grid`], and out-of-frame samples take the black fill value.

pub mod matrix;
pub mod sampler;
pub mod tps;

use std::fmt;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::{select_rows, ImageBatch, ValidityMask};
use crate::error::{Error, Result};

pub use sampler::grid_sample;
pub use tps::TpsSolver;

/// Fill for image samples that land outside the source frame (black).
pub const IMAGE_FILL: f64 = -1.0;
/// Fill for mask samples that land outside the source frame.
pub const MASK_FILL: f64 = 0.0;
pub const DEFAULT_TPS_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Affine,
    Homography,
    /// Thin-plate spline over a `grid×grid` control lattice.
    Tps { grid: usize },
}

impl TransformKind {
    pub fn tps() -> Self {
        TransformKind::Tps {
            grid: DEFAULT_TPS_GRID,
        }
    }

    /// Length of the parameter vector.
    pub fn num_params(&self) -> usize {
        match self {
            TransformKind::Affine => 6,
            TransformKind::Homography => 8,
            TransformKind::Tps { grid } => 2 * grid * grid,
        }
    }

    pub fn is_matrix(&self) -> bool {
        !matches!(self, TransformKind::Tps { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Affine => "affine",
            TransformKind::Homography => "homography",
            TransformKind::Tps { .. } => "tps",
        }
    }

    /// Parameters of the identity transform.
    pub fn identity_theta(&self) -> Vec<f64> {
        match self {
            TransformKind::Affine => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            TransformKind::Homography => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            TransformKind::Tps { .. } => vec![0.0; self.num_params()],
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformKind::Tps { grid } => write!(f, "tps({grid}x{grid})"),
            k => f.write_str(k.name()),
        }
    }
}

/// A batch of raw parameter vectors, `B×N`.
#[derive(Clone, Debug)]
pub struct TransformParams {
    pub kind: TransformKind,
    pub theta: Tensor,
}

impl TransformParams {
    pub fn new(kind: TransformKind, theta: Tensor) -> Result<Self> {
        match theta.dims() {
            [_, n] if *n == kind.num_params() => Ok(Self { kind, theta }),
            d => Err(Error::ShapeMismatch(format!(
                "{kind} expects B×{} parameters, got {d:?}",
                kind.num_params()
            ))),
        }
    }

    pub fn from_rows(kind: TransformKind, rows: &[Vec<f64>], dtype: DType, dev: &Device) -> Result<Self> {
        let n = kind.num_params();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch(format!("{kind} expects {n} parameters per row")));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let theta = Tensor::from_vec(flat, (rows.len(), n), dev)?.to_dtype(dtype)?;
        Self::new(kind, theta)
    }

    /// The identity transform repeated `batch` times.
    pub fn identity(kind: TransformKind, batch: usize, dtype: DType, dev: &Device) -> Result<Self> {
        Self::from_rows(kind, &vec![kind.identity_theta(); batch], dtype, dev)
    }

    pub fn batch_size(&self) -> usize {
        self.theta.dims()[0]
    }

    /// Host copy of the parameters, one row per batch element.
    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.theta.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad: Vec<usize> = self
            .rows()?
            .iter()
            .enumerate()
            .filter(|(_, r)| r.iter().any(|v| !v.is_finite()))
            .map(|(i, _)| i)
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss(format!("transform parameters rows {bad:?}")))
        }
    }
}

/// Executable thin-plate spline.
#[derive(Clone, Debug)]
pub struct TpsOperator {
    /// Control displacements `B×K×2`.
    pub displacements: Tensor,
    /// Coefficients `B×(K+3)×2` of the displacement spline: K radial
    /// weights then the affine part. The full map is `p + spline(p)`.
    pub coefficients: Tensor,
    pub solver: Arc<TpsSolver>,
}

#[derive(Clone, Debug)]
pub enum OperatorRepr {
    /// `B×3×3` transform matrices.
    Matrix(Tensor),
    Tps(TpsOperator),
}

/// The executable form of a batch of transforms.
#[derive(Clone, Debug)]
pub struct TransformOperator {
    pub kind: TransformKind,
    pub repr: OperatorRepr,
}

impl TransformOperator {
    /// Wrap raw `B×3×3` matrices. No normalization is applied.
    pub fn from_matrix(kind: TransformKind, m: Tensor) -> Result<Self> {
        if !kind.is_matrix() {
            return Err(Error::KindMismatch {
                left: kind.to_string(),
                right: "matrix".into(),
            });
        }
        match m.dims() {
            [_, 3, 3] => Ok(Self {
                kind,
                repr: OperatorRepr::Matrix(m),
            }),
            d => Err(Error::ShapeMismatch(format!("expected B×3×3 matrices, got {d:?}"))),
        }
    }

    pub fn batch_size(&self) -> usize {
        match &self.repr {
            OperatorRepr::Matrix(m) => m.dims()[0],
            OperatorRepr::Tps(t) => t.displacements.dims()[0],
        }
    }

    pub fn matrix(&self) -> Option<&Tensor> {
        match &self.repr {
            OperatorRepr::Matrix(m) => Some(m),
            OperatorRepr::Tps(_) => None,
        }
    }

    /// Normalized free-parameter representation, `B×N`: the 6 (affine) or
    /// 8 (homography) leading entries of the matrix after dividing by its
    /// (3,3) entry, or the flattened control displacements for TPS.
    pub fn representation(&self) -> Result<Tensor> {
        let b = self.batch_size();
        match &self.repr {
            OperatorRepr::Matrix(m) => {
                let flat = matrix::normalize3(m)?.reshape((b, 9))?;
                Ok(flat.narrow(1, 0, self.kind.num_params())?)
            }
            OperatorRepr::Tps(t) => Ok(t.displacements.reshape((b, self.kind.num_params()))?),
        }
    }

    pub fn detach(&self) -> Self {
        let repr = match &self.repr {
            OperatorRepr::Matrix(m) => OperatorRepr::Matrix(m.detach()),
            OperatorRepr::Tps(t) => OperatorRepr::Tps(TpsOperator {
                displacements: t.displacements.detach(),
                coefficients: t.coefficients.detach(),
                solver: t.solver.clone(),
            }),
        };
        Self { kind: self.kind, repr }
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let repr = match &self.repr {
            OperatorRepr::Matrix(m) => OperatorRepr::Matrix(select_rows(m, rows)?),
            OperatorRepr::Tps(t) => OperatorRepr::Tps(TpsOperator {
                displacements: select_rows(&t.displacements, rows)?,
                coefficients: select_rows(&t.coefficients, rows)?,
                solver: t.solver.clone(),
            }),
        };
        Ok(Self { kind: self.kind, repr })
    }

    pub fn dtype(&self) -> DType {
        match &self.repr {
            OperatorRepr::Matrix(m) => m.dtype(),
            OperatorRepr::Tps(t) => t.displacements.dtype(),
        }
    }

    pub fn device(&self) -> &Device {
        match &self.repr {
            OperatorRepr::Matrix(m) => m.device(),
            OperatorRepr::Tps(t) => t.displacements.device(),
        }
    }
}

/// Source coordinates `B×H×W×2` in normalized space, last axis `(x, y)`.
#[derive(Clone, Debug)]
pub struct SamplingGrid(pub Tensor);

impl SamplingGrid {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Normalized pixel-center coordinates of an `h×w` raster, row-major.
pub fn pixel_centers(h: usize, w: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = (2 * i + 1) as f64 / h as f64 - 1.0;
        for j in 0..w {
            out.push([(2 * j + 1) as f64 / w as f64 - 1.0, y]);
        }
    }
    out
}

/// Identity-transform parameters as a batch of one.
pub fn identity_params(kind: TransformKind, dtype: DType, dev: &Device) -> Result<TransformParams> {
    TransformParams::identity(kind, 1, dtype, dev)
}

fn tps_solver(grid: usize) -> Result<Arc<TpsSolver>> {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<TpsSolver>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(s) = cache.lock().expect("tps cache poisoned").get(&grid) {
        return Ok(s.clone());
    }
    let solver = Arc::new(TpsSolver::new(grid)?);
    cache
        .lock()
        .expect("tps cache poisoned")
        .insert(grid, solver.clone());
    Ok(solver)
}

fn tps_from_displacements(kind: TransformKind, disp: Tensor) -> Result<TransformOperator> {
    let TransformKind::Tps { grid } = kind else {
        unreachable!("tps_from_displacements on {kind}")
    };
    let solver = tps_solver(grid)?;
    let k = solver.num_points();
    let (dtype, dev) = (disp.dtype(), disp.device().clone());
    let solve = Tensor::from_vec(solver.solve.clone(), (1, k + 3, k), &dev)?.to_dtype(dtype)?;
    let b = disp.dims()[0];
    let coefficients = solve.repeat((b, 1, 1))?.matmul(&disp.contiguous()?)?;
    Ok(TransformOperator {
        kind,
        repr: OperatorRepr::Tps(TpsOperator {
            displacements: disp,
            coefficients,
            solver,
        }),
    })
}

/// Assemble the executable operator. Matrix kinds are laid out row-major
/// with the (3,3) entry fixed at one; TPS solves the spline system that
/// carries the control grid onto `grid + displacements`.
pub fn build_operator(params: &TransformParams) -> Result<TransformOperator> {
    let kind = params.kind;
    let b = params.batch_size();
    let theta = &params.theta;
    let (dtype, dev) = (theta.dtype(), theta.device());
    match kind {
        TransformKind::Affine => {
            let last = Tensor::from_vec(vec![0.0, 0.0, 1.0], (1, 3), dev)?
                .to_dtype(dtype)?
                .repeat((b, 1))?;
            let m = Tensor::cat(&[theta, &last], 1)?.reshape((b, 3, 3))?;
            TransformOperator::from_matrix(kind, m)
        }
        TransformKind::Homography => {
            let one = Tensor::ones((b, 1), dtype, dev)?;
            let m = Tensor::cat(&[theta, &one], 1)?.reshape((b, 3, 3))?;
            let dets = matrix::host_values(&matrix::det3(&m)?)?;
            let bad: Vec<usize> = dets
                .iter()
                .enumerate()
                .filter(|(_, d)| !(d.abs() > matrix::DET_EPS))
                .map(|(i, _)| i)
                .collect();
            if !bad.is_empty() {
                return Err(Error::singular("homography with |det| <= 1e-8", bad));
            }
            TransformOperator::from_matrix(kind, m)
        }
        TransformKind::Tps { .. } => {
            let k = kind.num_params() / 2;
            tps_from_displacements(kind, theta.reshape((b, k, 2))?)
        }
    }
}

/// Exact inverse for matrix kinds (renormalized so (3,3) = 1). For TPS,
/// which has no closed-form inverse, the spline built from the negated
/// control displacements is returned; it inverts to first order.
pub fn invert_operator(op: &TransformOperator) -> Result<TransformOperator> {
    match &op.repr {
        OperatorRepr::Matrix(m) => {
            TransformOperator::from_matrix(op.kind, matrix::inverse3_normalized(m)?)
        }
        OperatorRepr::Tps(t) => tps_from_displacements(op.kind, t.displacements.neg()?),
    }
}

/// Per-output-pixel source locations for an `h×w` output. Matrix kinds
/// pull each output pixel from `op⁻¹ · p` (with projective division);
/// TPS evaluates the spline map at `p` directly.
pub fn generate_grid(op: &TransformOperator, h: usize, w: usize) -> Result<SamplingGrid> {
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!(
            "grid must be at least 2×2, got {h}×{w}"
        )));
    }
    let b = op.batch_size();
    let (dtype, dev) = (op.dtype(), op.device().clone());
    let centers = pixel_centers(h, w);
    match &op.repr {
        OperatorRepr::Matrix(m) => {
            let inv = matrix::inverse3_normalized(m)?;
            let homog: Vec<f64> = centers.iter().flat_map(|p| [p[0], p[1], 1.0]).collect();
            let pts = Tensor::from_vec(homog, (1, h * w, 3), &dev)?
                .to_dtype(dtype)?
                .repeat((b, 1, 1))?;
            let src = pts.matmul(&inv.transpose(1, 2)?.contiguous()?)?;
            let den = src.narrow(2, 2, 1)?;
            let xy = src.narrow(2, 0, 2)?.broadcast_div(&den)?;
            Ok(SamplingGrid(xy.reshape((b, h, w, 2))?))
        }
        OperatorRepr::Tps(t) => {
            let k3 = t.solver.num_points() + 3;
            let mut basis = Vec::with_capacity(h * w * k3);
            for p in &centers {
                t.solver.basis_row(p[0], p[1], &mut basis);
            }
            let basis = Tensor::from_vec(basis, (1, h * w, k3), &dev)?
                .to_dtype(dtype)?
                .repeat((b, 1, 1))?;
            let offset = basis.matmul(&t.coefficients.contiguous()?)?;
            let base: Vec<f64> = centers.iter().flatten().copied().collect();
            let base = Tensor::from_vec(base, (1, h * w, 2), &dev)?.to_dtype(dtype)?;
            let xy = offset.broadcast_add(&base)?;
            Ok(SamplingGrid(xy.reshape((b, h, w, 2))?))
        }
    }
}

/// Warp an image batch and produce the matching validity mask.
pub fn warp(image: &ImageBatch, op: &TransformOperator) -> Result<(ImageBatch, ValidityMask)> {
    let (b, _, h, w) = image.dims4();
    check_batch(b, op)?;
    let grid = generate_grid(op, h, w)?;
    let out = grid_sample(image.tensor(), grid.tensor(), IMAGE_FILL)?;
    let ones = Tensor::ones((b, 1, h, w), image.tensor().dtype(), image.tensor().device())?;
    let mask = grid_sample(&ones, grid.tensor(), MASK_FILL)?;
    Ok((ImageBatch::new(out)?, ValidityMask::new(mask)?))
}

/// Warp a validity mask with fill 0.
pub fn warp_mask(mask: &ValidityMask, op: &TransformOperator) -> Result<ValidityMask> {
    let d = mask.tensor().dims();
    check_batch(d[0], op)?;
    let grid = generate_grid(op, d[2], d[3])?;
    ValidityMask::new(grid_sample(mask.tensor(), grid.tensor(), MASK_FILL)?)
}

/// Bilinear resize with pixel-center alignment, differentiable.
pub fn resize(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let d = image.dims4()?;
    if (d.2, d.3) == (h, w) {
        return Ok(image.clone());
    }
    // clamp to the outermost source centers so edges replicate instead of fading to fill
    let (lim_x, lim_y) = (1.0 - 1.0 / d.3 as f64, 1.0 - 1.0 / d.2 as f64);
    let centers: Vec<f64> = pixel_centers(h, w)
        .into_iter()
        .flat_map(|[x, y]| [x.clamp(-lim_x, lim_x), y.clamp(-lim_y, lim_y)])
        .collect();
    let grid = Tensor::from_vec(centers, (1, h, w, 2), image.device())?
        .to_dtype(image.dtype())?
        .repeat((d.0, 1, 1, 1))?;
    grid_sample(image, &grid, IMAGE_FILL)
}

fn check_batch(b: usize, op: &TransformOperator) -> Result<()> {
    if op.batch_size() != b {
        return Err(Error::ShapeMismatch(format!(
            "image batch {b} vs operator batch {}",
            op.batch_size()
        )));
    }
    Ok(())
}
