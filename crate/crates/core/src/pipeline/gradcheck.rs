//! Analytic gradients versus central finite differences on small random
//! instances, in double precision.

use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cycle::{run_cycle, Direction};
use crate::batch::{ImageBatch, ValidityMask};
use crate::error::Result;
use crate::geometry::{build_operator, invert_operator, warp, warp_mask, TransformKind, TransformParams};
use crate::losses::{
    adversarial_losses, appearance_cycle_loss, identity_loss, region_missing_loss, spatial_cycle_loss,
    AdversarialSide, LossWeights,
};
use crate::networks::{NetworkConfig, Networks, SpatialCode};
use crate::synthetic::smooth_batch;

pub const COMPONENT_TOL: f64 = 1e-3;
pub const CHAIN_TOL: f64 = 1e-2;
/// Largest gradient magnitude accepted where the exact gradient is zero.
pub const ZERO_TOL: f64 = 1e-12;
const STEP: f64 = 1e-6;
/// The chain objective is a sum of many terms, so round-off in the
/// difference quotient dominates below this step.
const CHAIN_STEP: f64 = 1e-4;
/// Largest disagreement between difference quotients at `h` and `h/2`,
/// relative to `CHAIN_TOL` times the gradient scale, for an entry to count
/// as smooth.
const KINK_FRAC: f64 = 0.02;
const SIZE: usize = 24;
const KINDS: [TransformKind; 3] = [
    TransformKind::Affine,
    TransformKind::Homography,
    TransformKind::Tps { grid: 4 },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub component: String,
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|, 1e-8)`,
    /// or the largest gradient magnitude for zero-gradient checks.
    pub error: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<5} {:<28} err {:.3e} (tol {:.0e})",
                if e.passed { "PASS" } else { "FAIL" },
                e.component,
                e.error,
                e.tol
            )?;
        }
        write!(
            f,
            "gradient check seed {}: {}",
            self.seed,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Max-norm relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Central differences of `f` with respect to the listed flat entries of
/// `var`, which is restored afterwards.
fn numeric_grad(
    var: &Var,
    entries: &[usize],
    step: f64,
    f: &mut dyn FnMut() -> Result<f64>,
) -> Result<Vec<f64>> {
    let shape = var.dims().to_vec();
    let base = flat(var.as_tensor())?;
    let set = |v: &[f64]| -> Result<()> {
        var.set(&Tensor::from_vec(v.to_vec(), shape.as_slice(), var.device())?)?;
        Ok(())
    };
    let mut out = Vec::with_capacity(entries.len());
    let mut v = base.clone();
    for &i in entries {
        v[i] = base[i] + step;
        set(&v)?;
        let up = f()?;
        v[i] = base[i] - step;
        set(&v)?;
        let down = f()?;
        v[i] = base[i];
        out.push((up - down) / (2.0 * step));
    }
    set(&base)?;
    Ok(out)
}

fn analytic_grad(loss: &Tensor, var: &Var, entries: &[usize]) -> Result<Vec<f64>> {
    let grads = loss.backward()?;
    let g = match grads.get(var.as_tensor()) {
        Some(g) => flat(g)?,
        None => vec![0.0; var.elem_count()],
    };
    Ok(entries.iter().map(|&i| g[i]).collect())
}

struct Check<'a> {
    entries: &'a mut Vec<GradCheckEntry>,
}

impl Check<'_> {
    /// Compare analytic and numeric gradients of `f(var)`.
    fn compare(
        &mut self,
        name: String,
        tol: f64,
        var: &Var,
        entries: &[usize],
        f: &mut dyn FnMut() -> Result<Tensor>,
    ) -> Result<()> {
        let loss = f()?;
        let a = analytic_grad(&loss, var, entries)?;
        let n = numeric_grad(var, entries, STEP, &mut || Ok(f()?.to_scalar::<f64>()?))?;
        let error = relative_error(&a, &n);
        self.entries.push(GradCheckEntry {
            component: name,
            error,
            tol,
            passed: error <= tol,
        });
        Ok(())
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn weighted_sum(t: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok((t * w)?.sum_all()?)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, dev: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Ok(Tensor::from_vec(v, shape, dev)?)
}

fn near_identity_theta(rng: &mut ChaCha8Rng, kind: TransformKind, scale: f64, dev: &Device) -> Result<Var> {
    let id = kind.identity_theta();
    let v: Vec<f64> = id.iter().map(|x| x + rng.random_range(-scale..scale)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(v, (1, id.len()), dev)?)?)
}

fn params(kind: TransformKind, theta: &Var) -> Result<TransformParams> {
    TransformParams::new(kind, theta.as_tensor().clone())
}

/// Run every component and full-chain check for `seed`.
pub fn gradient_check(seed: u64) -> GradCheckReport {
    let mut entries = Vec::new();
    if let Err(e) = run_all(seed, &mut entries) {
        entries.push(GradCheckEntry {
            component: format!("harness error: {e}"),
            error: f64::INFINITY,
            tol: 0.0,
            passed: false,
        });
    }
    let passed = entries.iter().all(|e| e.passed);
    GradCheckReport {
        seed,
        entries,
        passed,
    }
}

fn run_all(seed: u64, entries: &mut Vec<GradCheckEntry>) -> Result<()> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = Check { entries };
    let (c, s) = (3, SIZE);

    for kind in KINDS {
        let name = kind.name();
        let x = smooth_batch(&mut rng, 1, c, s, s, DType::F64, &dev)?;
        let wi = random_tensor(&mut rng, &[1, c, s, s], 1.0, &dev)?;
        let wm = random_tensor(&mut rng, &[1, 1, s, s], 1.0, &dev)?;

        // warp with respect to the transform parameters
        let theta = near_identity_theta(&mut rng, kind, 0.15, &dev)?;
        check.compare(format!("warp/theta/{name}"), COMPONENT_TOL, &theta, &all(kind.num_params()), &mut || {
            let (img, m) = warp(&x, &build_operator(&params(kind, &theta)?)?)?;
            Ok((weighted_sum(img.tensor(), &wi)? + weighted_sum(m.tensor(), &wm)?)?)
        })?;

        // warp with respect to the image
        let xv = Var::from_tensor(x.tensor())?;
        let op = build_operator(&params(kind, &theta)?)?.detach();
        let picks: Vec<usize> = (0..12).map(|_| rng.random_range(0..c * s * s)).collect();
        check.compare(format!("warp/image/{name}"), COMPONENT_TOL, &xv, &picks, &mut || {
            let (img, _) = warp(&ImageBatch::new(xv.as_tensor().clone())?, &op)?;
            weighted_sum(img.tensor(), &wi)
        })?;

        // spatial cycle loss through inversion and normalization
        let other = near_identity_theta(&mut rng, kind, 0.15, &dev)?;
        let fixed = build_operator(&params(kind, &other)?)?.detach();
        check.compare(format!("loss/scl/{name}"), COMPONENT_TOL, &theta, &all(kind.num_params()), &mut || {
            let inv = invert_operator(&build_operator(&params(kind, &theta)?)?)?;
            spatial_cycle_loss(&inv, &fixed)
        })?;

        // region-missing loss through the forward mask and its round trip
        check.compare(format!("loss/rml/{name}"), COMPONENT_TOL, &theta, &all(kind.num_params()), &mut || {
            let op = build_operator(&params(kind, &theta)?)?;
            let (_, m) = warp(&x, &op)?;
            let back = warp_mask(&m, &invert_operator(&op)?)?;
            region_missing_loss(&m, &back)
        })?;

        // full chain: cycle objective with respect to localization weights
        full_chain(&mut check, &mut rng, kind, seed)?;
    }

    // losses that do not depend on the transform kind
    let x = smooth_batch(&mut rng, 2, c, s, s, DType::F64, &dev)?;
    let rec = Var::from_tensor(&(x.tensor() + random_tensor(&mut rng, &[2, c, s, s], 0.3, &dev)?)?)?;
    let picks: Vec<usize> = (0..16).map(|_| rng.random_range(0..2 * c * s * s)).collect();
    check.compare("loss/acl".into(), COMPONENT_TOL, &rec, &picks, &mut || {
        appearance_cycle_loss(&x, &ImageBatch::new(rec.as_tensor().clone())?)
    })?;

    let mask = ValidityMask::new(random_tensor(&mut rng, &[2, 1, s, s], 0.5, &dev)?.affine(1.0, 0.5)?)?;
    check.compare("loss/idt".into(), COMPONENT_TOL, &rec, &picks, &mut || {
        identity_loss(&ImageBatch::new(rec.as_tensor().clone())?, &x, &mask)
    })?;
    let mv = Var::from_tensor(mask.tensor())?;
    let mpicks: Vec<usize> = (0..16).map(|_| rng.random_range(0..2 * s * s)).collect();
    check.compare("loss/idt/mask".into(), COMPONENT_TOL, &mv, &mpicks, &mut || {
        identity_loss(
            &ImageBatch::new(rec.as_tensor().clone())?,
            &x,
            &ValidityMask::new(mv.as_tensor().clone())?,
        )
    })?;

    let logits = Var::from_tensor(&random_tensor(&mut rng, &[4, 1, 3, 3], 3.0, &dev)?)?;
    let other = random_tensor(&mut rng, &[4, 1, 3, 3], 3.0, &dev)?;
    let tl = random_tensor(&mut rng, &[4, 1], 3.0, &dev)?;
    for side in [AdversarialSide::Discriminator, AdversarialSide::Generator] {
        let tag = match side {
            AdversarialSide::Discriminator => "loss/adv_d",
            AdversarialSide::Generator => "loss/adv_g",
        };
        check.compare(tag.into(), COMPONENT_TOL, &logits, &all(36), &mut || {
            adversarial_losses(&other, logits.as_tensor(), &tl, &tl, side)
        })?;
    }

    translation_of_constant(&mut check, &dev)?;
    Ok(())
}

/// Small nets with perturbed localization heads, so gradients reach every
/// layer; the objective is the weighted cycle loss of one X→Y bundle.
fn full_chain(check: &mut Check, rng: &mut ChaCha8Rng, kind: TransformKind, seed: u64) -> Result<()> {
    let dev = Device::Cpu;
    let mut cfg = NetworkConfig::new(kind, SIZE);
    cfg.channels = 3;
    cfg.code_dim = 4;
    cfg.loc_size = 32;
    cfg.gen_width = 2;
    cfg.res_blocks = 1;
    cfg.disc_width = 2;
    let nets = Networks::init(&cfg, seed, DType::F64, &dev)?;
    for ln in [&nets.ln_x, &nets.ln_y] {
        let w = &ln.fc2.weight;
        w.set(&random_tensor(rng, w.dims(), 0.05, &dev)?)?;
        let b = &ln.fc2.bias;
        b.set(&random_tensor(rng, b.dims(), 0.1, &dev)?)?;
    }
    let x = smooth_batch(rng, 2, 3, SIZE, SIZE, DType::F64, &dev)?;
    let code = SpatialCode::new(random_tensor(rng, &[2, 4], 1.0, &dev)?)?;
    let w = LossWeights::default();
    let targets = [
        (&nets.ln_x.fc2.weight, 6),
        (&nets.ln_x.fc1.weight, 4),
        (&nets.ln_x.trunk[0].weight, 3),
        (&nets.ln_x.trunk[4].weight, 3),
    ];
    let f = || -> Result<Tensor> { Ok(run_cycle(&nets, &x, &code, Direction::X2Y)?.cycle_terms(&w)?.total) };
    let grads = f()?.backward()?;
    let full = targets
        .iter()
        .map(|(v, _)| match grads.get(v.as_tensor()) {
            Some(g) => flat(g),
            None => Ok(vec![0.0; v.elem_count()]),
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = full.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut eval = || Ok(f()?.to_scalar::<f64>()?);
    // An entry whose difference quotients at h and h/2 disagree sits on a
    // ReLU or max-pool kink, where the derivative is undefined; it is
    // replaced by another draw.
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for ((var, n), g) in targets.iter().zip(&full) {
        let mut kept = 0;
        for _ in 0..3 * n {
            if kept == *n {
                break;
            }
            let i = rng.random_range(0..var.elem_count());
            let coarse = numeric_grad(var, &[i], CHAIN_STEP, &mut eval)?[0];
            let fine = numeric_grad(var, &[i], CHAIN_STEP / 2.0, &mut eval)?[0];
            if (coarse - fine).abs() > KINK_FRAC * CHAIN_TOL * scale {
                continue;
            }
            analytic.push(g[i]);
            numeric.push(fine);
            kept += 1;
        }
    }
    let wanted: usize = targets.iter().map(|(_, n)| n).sum();
    // Too few smooth entries means the check compared almost nothing.
    let error = if 2 * analytic.len() < wanted {
        f64::INFINITY
    } else {
        relative_error(&analytic, &numeric)
    };
    check.entries.push(GradCheckEntry {
        component: format!("chain/cycle/{}", kind.name()),
        error,
        tol: CHAIN_TOL,
        passed: error <= CHAIN_TOL,
    });
    Ok(())
}

/// Translating a constant image changes nothing away from the borders, so
/// the interior sum has exactly zero gradient in the translation entries.
fn translation_of_constant(check: &mut Check, dev: &Device) -> Result<()> {
    let s = SIZE;
    let x = ImageBatch::new(Tensor::full(0.3f64, (1, 3, s, s), dev)?)?;
    let theta = Var::from_tensor(&Tensor::new(&[[1.0f64, 0.0, 0.08, 0.0, 1.0, -0.06]], dev)?)?;
    let mut interior = vec![0.0f64; s * s];
    for i in 3..s - 3 {
        for j in 3..s - 3 {
            interior[i * s + j] = 1.0;
        }
    }
    let wi = Tensor::from_vec(interior, (1, 1, s, s), dev)?;
    let (img, _) = warp(&x, &build_operator(&params(TransformKind::Affine, &theta)?)?)?;
    let loss = img.tensor().broadcast_mul(&wi)?.sum_all()?;
    let g = analytic_grad(&loss, &theta, &[2, 5])?;
    let error = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    check.entries.push(GradCheckEntry {
        component: "warp/translation/constant".into(),
        error,
        tol: ZERO_TOL,
        passed: error <= ZERO_TOL,
    });
    Ok(())
}
