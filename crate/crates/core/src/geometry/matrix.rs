//! Batched, differentiable 3×3 matrix helpers.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Smallest admissible `|det|` for an invertible transform matrix.
pub const DET_EPS: f64 = 1e-8;

fn entries(m: &Tensor) -> Result<Vec<Tensor>> {
    let b = m.dims()[0];
    let flat = m.reshape((b, 9))?;
    (0..9)
        .map(|i| Ok(flat.narrow(1, i, 1)?))
        .collect::<Result<Vec<_>>>()
}

/// Per-element determinants of a `B×3×3` batch, as a `B×1` tensor.
pub fn det3(m: &Tensor) -> Result<Tensor> {
    let e = entries(m)?;
    let c0 = ((&e[4] * &e[8])? - (&e[5] * &e[7])?)?;
    let c1 = ((&e[3] * &e[8])? - (&e[5] * &e[6])?)?;
    let c2 = ((&e[3] * &e[7])? - (&e[4] * &e[6])?)?;
    let det = (((&e[0] * c0)? - (&e[1] * c1)?)? + (&e[2] * c2)?)?;
    Ok(det)
}

/// Inverse of a `B×3×3` batch through the adjugate, then rescaled so the
/// (3,3) entry is exactly one. Fails on `|det| ≤ 1e-8` or when the
/// rescaling entry vanishes.
pub fn inverse3_normalized(m: &Tensor) -> Result<Tensor> {
    let b = m.dims()[0];
    let e = entries(m)?;
    let cof = |a: usize, d: usize, bb: usize, c: usize| -> Result<Tensor> {
        Ok(((&e[a] * &e[d])? - (&e[bb] * &e[c])?)?)
    };
    // adj[i][j] = cofactor[j][i]
    let adj = [
        cof(4, 8, 5, 7)?,
        cof(2, 7, 1, 8)?,
        cof(1, 5, 2, 4)?,
        cof(5, 6, 3, 8)?,
        cof(0, 8, 2, 6)?,
        cof(2, 3, 0, 5)?,
        cof(3, 7, 4, 6)?,
        cof(1, 6, 0, 7)?,
        cof(0, 4, 1, 3)?,
    ];
    let det = (((&e[0] * &adj[0])? + (&e[1] * &adj[3])?)? + (&e[2] * &adj[6])?)?;
    let dets = host_values(&det)?;
    let bad: Vec<usize> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| !(d.abs() > DET_EPS))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::singular(
            format!("|det| <= {DET_EPS:e} (dets {:?})", pick(&dets, &bad)),
            bad,
        ));
    }
    // Normalizing by adj[8] is the same as dividing the true inverse by its
    // (3,3) entry; det cancels.
    let corner = host_values(&adj[8])?;
    let bad: Vec<usize> = corner
        .iter()
        .enumerate()
        .filter(|(_, c)| !(c.abs() > DET_EPS))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::singular(
            "inverse has vanishing (3,3) entry; cannot normalize",
            bad,
        ));
    }
    let adj = Tensor::cat(&adj, 1)?;
    let inv = adj.broadcast_div(&adj.narrow(1, 8, 1)?)?;
    Ok(inv.reshape((b, 3, 3))?)
}

/// Divide each matrix by its (3,3) entry.
pub fn normalize3(m: &Tensor) -> Result<Tensor> {
    let b = m.dims()[0];
    let flat = m.reshape((b, 9))?;
    let corner = flat.narrow(1, 8, 1)?;
    let c = host_values(&corner)?;
    let bad: Vec<usize> = c
        .iter()
        .enumerate()
        .filter(|(_, v)| !(v.abs() > DET_EPS))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::singular("matrix (3,3) entry vanishes", bad));
    }
    Ok(flat.broadcast_div(&corner)?.reshape((b, 3, 3))?)
}

pub(crate) fn host_values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}
