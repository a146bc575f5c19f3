//! Property suite behind the `invariants` subcommand: geometry exactness,
//! loss identities, the identity-initialization cascade and serialization
//! round trips.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::{ImageBatch, ValidityMask};
use crate::error::Result;
use crate::geometry::{
    build_operator, invert_operator, matrix::host_values, warp, warp_mask, TransformKind, TransformParams,
};
use crate::losses::{appearance_cycle_loss, identity_loss, region_missing_loss, scalar, spatial_cycle_loss};
use crate::networks::{serialize::Container, NetworkConfig, Networks, SpatialCode};
use crate::pipeline::{run_cycle, Direction};
use crate::synthetic::{gaussian_blur, random_corner_homography, smooth_field};

pub const ALL_KINDS: [TransformKind; 3] = [
    TransformKind::Affine,
    TransformKind::Homography,
    TransformKind::Tps { grid: 4 },
];

#[derive(Clone, Debug)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for InvariantResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag:<5} {:<34} {}", self.name, self.detail)
    }
}

fn result(name: &str, passed: bool, detail: String) -> InvariantResult {
    InvariantResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = host_values(&(a - b)?)?;
    Ok(d.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Largest deviation of an identity warp from its input, over all kinds.
pub fn identity_warp_error(seed: u64) -> Result<f64> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (17, 13);
    let v: Vec<f32> = (0..2 * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = ImageBatch::new(Tensor::from_vec(v, (2, 3, h, w), &dev)?)?;
    let mut worst = 0.0f64;
    for kind in ALL_KINDS {
        let p = TransformParams::identity(kind, 2, DType::F32, &dev)?;
        let (y, m) = warp(&x, &build_operator(&p)?)?;
        worst = worst.max(max_abs_diff(x.tensor(), y.tensor())?);
        worst = worst.max(max_abs_diff(&m.tensor().ones_like()?, m.tensor())?);
    }
    Ok(worst)
}

/// Largest `‖H·H⁻¹ − I‖∞` over `n` random well-conditioned homographies.
pub fn homography_inverse_error(seed: u64, n: usize) -> Result<f64> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let h = random_corner_homography(&mut rng, 0.25)?;
        rows.push(h[..8].to_vec());
    }
    let p = TransformParams::from_rows(TransformKind::Homography, &rows, DType::F64, &dev)?;
    let op = build_operator(&p)?;
    let inv = invert_operator(&op)?;
    let prod = op.matrix().expect("matrix").matmul(inv.matrix().expect("matrix"))?;
    let mut worst = 0.0f64;
    for m in host_values(&prod)?.chunks(9) {
        // H⁻¹ is renormalized, so the product is a scaled identity.
        let s = m[8];
        for (i, v) in m.iter().enumerate() {
            let target = if i % 4 == 0 { 1.0 } else { 0.0 };
            worst = worst.max((v / s - target).abs());
        }
    }
    Ok(worst)
}

/// Mean L1 over the round-trip-valid interior after warping a blurred
/// random image by a random corner homography and back.
pub fn round_trip_error(seed: u64) -> Result<f64> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 64;
    let mut v: Vec<f64> = (0..s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    gaussian_blur(&mut v, s, s, 1.5);
    let x = ImageBatch::new(Tensor::from_vec(v, (1, 1, s, s), &dev)?)?;
    let h = random_corner_homography(&mut rng, 0.25)?;
    let p = TransformParams::from_rows(TransformKind::Homography, &[h[..8].to_vec()], DType::F64, &dev)?;
    let op = build_operator(&p)?;
    let inv = invert_operator(&op)?;
    let (fwd, m) = warp(&x, &op)?;
    let (back, _) = warp(&fwd, &inv)?;
    let mrt = host_values(warp_mask(&m, &inv)?.tensor())?;
    let a = host_values(x.tensor())?;
    let b = host_values(back.tensor())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..a.len() {
        if mrt[i] >= 1.0 - 1e-9 {
            sum += (a[i] - b[i]).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn loss_identities(seed: u64) -> Result<Vec<(String, f64)>> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = ImageBatch::new(Tensor::from_vec(smooth_field(&mut rng, 3, 8, 8), (1, 3, 8, 8), &dev)?)?;
    let m = ValidityMask::new(Tensor::from_vec(
        (0..64).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>(),
        (1, 1, 8, 8),
        &dev,
    )?)?;
    let mut out = vec![
        ("acl(x,x)".to_string(), scalar(&appearance_cycle_loss(&x, &x)?, "acl")?),
        ("identity_loss(a,a,m)".to_string(), scalar(&identity_loss(&x, &x, &m)?, "idt")?),
    ];
    for kind in ALL_KINDS {
        let theta: Vec<f64> = kind
            .identity_theta()
            .iter()
            .map(|v| v + rng.random_range(-0.1..0.1))
            .collect();
        let op = build_operator(&TransformParams::from_rows(kind, &[theta], DType::F64, &dev)?)?;
        out.push((format!("scl(A,A)/{}", kind.name()), scalar(&spatial_cycle_loss(&op, &op)?, "scl")?));
        let id = build_operator(&TransformParams::identity(kind, 1, DType::F64, &dev)?)?;
        let (_, mask) = warp(&x, &id)?;
        let rt = warp_mask(&mask, &invert_operator(&id)?)?;
        out.push((format!("rml(identity)/{}", kind.name()), scalar(&region_missing_loss(&mask, &rt)?, "rml")?));
    }
    Ok(out)
}

/// SCL, RML and `transformed − x` at identity initialization, both
/// directions, plus the code-sharing and exact-inverse checks.
fn identity_cascade(kind: TransformKind, seed: u64) -> Result<(f64, f64, f64)> {
    let dev = Device::Cpu;
    let mut cfg = NetworkConfig::new(kind, 24);
    cfg.code_dim = 4;
    cfg.loc_size = 32;
    cfg.gen_width = 4;
    cfg.res_blocks = 1;
    cfg.disc_width = 4;
    let nets = Networks::init(&cfg, seed, DType::F32, &dev)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..2 * 3 * 24 * 24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = ImageBatch::new(Tensor::from_vec(v, (2, 3, 24, 24), &dev)?)?;
    let code = SpatialCode::sample(&mut rng, 2, 4, DType::F32, &dev)?;
    let (mut scl, mut rml, mut dx) = (0.0f64, 0.0f64, 0.0f64);
    for dir in Direction::BOTH {
        let b = run_cycle(&nets, &x, &code, dir)?;
        b.verify(1e-12)?;
        let t = b.cycle_terms(&Default::default())?;
        scl = scl.max(scalar(&t.scl, "scl")?);
        rml = rml.max(scalar(&t.rml, "rml")?);
        dx = dx.max(max_abs_diff(b.transformed.tensor(), x.tensor())?);
    }
    Ok((scl, rml, dx))
}

fn container_round_trip(seed: u64) -> Result<bool> {
    let dev = Device::Cpu;
    let mut cfg = NetworkConfig::new(TransformKind::Homography, 24);
    cfg.loc_size = 32;
    cfg.gen_width = 2;
    cfg.res_blocks = 1;
    cfg.disc_width = 2;
    let nets = Networks::init(&cfg, seed, DType::F32, &dev)?;
    let a = nets.to_container()?.to_bytes()?;
    let back = Networks::from_container(&Container::from_bytes(&a, &dev)?, DType::F32, &dev)?;
    Ok(back.to_container()?.to_bytes()? == a)
}

fn codec_round_trip(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = std::env::temp_dir().join(format!("gadan-invariants-{}-{seed}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| crate::error::Error::io(&dir, e))?;
    let v: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.random_range(-1.2..1.2)).collect();
    let img = ImageBatch::new(Tensor::from_vec(v, (1, 3, 8, 8), &Device::Cpu)?)?;
    let (p1, p2) = (dir.join("a.png"), dir.join("b.png"));
    crate::data::encode_output(&img, &p1)?;
    let decoded = crate::data::load_batch(&[p1.clone()], 8, 3, DType::F32, &Device::Cpu)?;
    crate::data::encode_output(&decoded, &p2)?;
    let same = image::open(&p1).map(|i| i.to_rgb8().into_raw()).ok()
        == image::open(&p2).map(|i| i.to_rgb8().into_raw()).ok();
    let _ = std::fs::remove_dir_all(&dir);
    Ok(same)
}

/// Run the whole suite. Errors inside a check are reported as failures.
pub fn run_invariants(seed: u64) -> Vec<InvariantResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<(bool, String)>| match r {
        Ok((ok, detail)) => out.push(result(name, ok, detail)),
        Err(e) => out.push(result(name, false, format!("error: {e}"))),
    };
    push(
        "identity warp is exact",
        identity_warp_error(seed).map(|e| (e <= 1e-6, format!("max |Δ| = {e:.2e}"))),
    );
    push(
        "homography inverse (1000 samples)",
        homography_inverse_error(seed, 1000).map(|e| (e <= 1e-9, format!("max ‖H·H⁻¹ − I‖∞ = {e:.2e}"))),
    );
    push(
        "warp round trip (100 seeds)",
        (0..100)
            .map(|s| round_trip_error(seed.wrapping_add(s)))
            .collect::<Result<Vec<_>>>()
            .map(|v| {
                let worst = v.iter().fold(0.0f64, |m, x| m.max(*x));
                (worst <= 0.05, format!("max interior L1 = {worst:.4}"))
            }),
    );
    match loss_identities(seed) {
        Ok(list) => {
            for (name, v) in list {
                out.push(result(&name, v == 0.0, format!("value = {v:e}")));
            }
        }
        Err(e) => out.push(result("loss identities", false, format!("error: {e}"))),
    }
    for kind in ALL_KINDS {
        let name = format!("identity-init cycle/{}", kind.name());
        match identity_cascade(kind, seed) {
            Ok((scl, rml, dx)) => out.push(result(
                &name,
                scl == 0.0 && rml == 0.0 && dx == 0.0,
                format!("scl = {scl:e}, rml = {rml:e}, max |transformed − x| = {dx:e}"),
            )),
            Err(e) => out.push(result(&name, false, format!("error: {e}"))),
        }
    }
    let mut push = |name: &str, r: Result<bool>| match r {
        Ok(ok) => out.push(result(name, ok, String::new())),
        Err(e) => out.push(result(name, false, format!("error: {e}"))),
    };
    push("weight container byte round trip", container_round_trip(seed));
    push("png encode/decode idempotent", codec_round_trip(seed));
    out
}
