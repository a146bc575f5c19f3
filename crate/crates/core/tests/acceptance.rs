//! Acceptance gate. Every criterion runs in sequence inside one test so the
//! wall-clock budgets are measured without competing test threads; each
//! prints one PASS/FAIL line and the test fails if any criterion does.

mod common;

use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use common::{cpu, mean_abs_loop, params_loop, random_batch, random_mask, random_operator, tiny_train_config, values};
use gadan::cli::adapt_multi_folder;
use gadan::data::list_images;
use gadan::geometry::{build_operator, invert_operator, warp, warp_mask};
use gadan::losses::{appearance_cycle_loss, identity_loss, region_missing_loss, scalar, spatial_cycle_loss};
use gadan::pipeline::checkpoint::checkpoint_path;
use gadan::pipeline::{adapt, adapt_multi, gradient_check, run_cycle, train, MetricsRecord, Trainer};
use gadan::synthetic::{estimate_tilt_deg, laplacian_energy, toy_x, toy_y, write_gray_png, write_toy_domains};
use gadan::verify::{homography_inverse_error, identity_warp_error, round_trip_error, ALL_KINDS};
use gadan::{Direction, ImageBatch, NetworkConfig, Networks, SpatialCode, TrainConfig, TransformKind, TransformParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

fn geometry_exactness() -> Outcome {
    let t0 = Instant::now();
    let id = (0..10).map(|s| identity_warp_error(s).unwrap()).fold(0.0f64, f64::max);
    let inv = homography_inverse_error(0, 1000).unwrap();
    let dt = t0.elapsed();
    outcome(
        id <= 1e-6 && inv <= 1e-9 && within(dt, Duration::from_secs(10)),
        format!("identity warp max |Δ| {id:.1e}, max ‖H·H⁻¹ − I‖∞ {inv:.1e} over 1000, {:.1}s", dt.as_secs_f64()),
    )
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut failed = Vec::new();
    let (mut worst_component, mut worst_chain) = (0.0f64, 0.0f64);
    let mut kinds_seen = [false; 3];
    for seed in 0..20 {
        let r = gradient_check(seed);
        if !r.passed {
            failed.push(seed);
        }
        for e in &r.entries {
            if e.component.starts_with("chain/") {
                worst_chain = worst_chain.max(e.error);
                for (i, k) in ALL_KINDS.iter().enumerate() {
                    kinds_seen[i] |= e.component.ends_with(k.name());
                }
            } else if e.tol == 1e-3 {
                worst_component = worst_component.max(e.error);
            }
        }
    }
    let dt = t0.elapsed();
    outcome(
        failed.is_empty() && kinds_seen.iter().all(|&k| k) && within(dt, Duration::from_secs(300)),
        format!(
            "20 seeds × 3 kinds, worst component {worst_component:.1e} (≤1e-3), worst chain {worst_chain:.1e} (≤1e-2), \
             failing seeds {failed:?}, {:.0}s",
            dt.as_secs_f64()
        ),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = |t: &Tensor| scalar(t, "loss").unwrap();
    let mut exact = true;
    let mut oracle = 0.0f64;
    for _ in 0..10 {
        let x = random_batch(&mut rng, (2, 3, 9, 7), DType::F64);
        let y = random_batch(&mut rng, (2, 3, 9, 7), DType::F64);
        let m = random_mask(&mut rng, 2, 9, 7);
        let m2 = random_mask(&mut rng, 2, 9, 7);
        exact &= s(&appearance_cycle_loss(&x, &x).unwrap()) == 0.0;
        exact &= s(&identity_loss(&x, &x, &m).unwrap()) == 0.0;
        let (vx, vy, vm) = (values(x.tensor()), values(y.tensor()), values(m.tensor()));
        oracle = oracle.max((s(&appearance_cycle_loss(&x, &y).unwrap()) - mean_abs_loop(&vx, &vy)).abs());
        oracle = oracle.max(
            (s(&region_missing_loss(&m, &m2).unwrap()) - mean_abs_loop(&vm, &values(m2.tensor()))).abs(),
        );
        let plane = 63;
        let (mx, my): (Vec<f64>, Vec<f64>) = (0..vx.len())
            .map(|i| {
                let w = vm[(i / (3 * plane)) * plane + i % plane];
                (vx[i] * w, vy[i] * w)
            })
            .unzip();
        oracle = oracle.max((s(&identity_loss(&x, &y, &m).unwrap()) - mean_abs_loop(&mx, &my)).abs());
        for kind in ALL_KINDS {
            let a = random_operator(&mut rng, kind, 3);
            let b = random_operator(&mut rng, kind, 3);
            exact &= s(&spatial_cycle_loss(&a, &a).unwrap()) == 0.0;
            let scl = s(&spatial_cycle_loss(&a, &b).unwrap());
            oracle = oracle.max((scl - mean_abs_loop(&params_loop(&a), &params_loop(&b))).abs());
            let id = build_operator(&TransformParams::identity(kind, 2, DType::F64, &cpu()).unwrap()).unwrap();
            let (_, wm) = warp(&x, &id).unwrap();
            let rt = warp_mask(&wm, &invert_operator(&id).unwrap()).unwrap();
            exact &= s(&region_missing_loss(&wm, &rt).unwrap()) == 0.0;
        }
    }
    outcome(
        exact && oracle <= 1e-6,
        format!("identities exact: {exact}, max scalar-loop disagreement {oracle:.1e} (≤1e-6)"),
    )
}

fn identity_init_cycle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ok = true;
    for kind in ALL_KINDS {
        let mut cfg = NetworkConfig::new(kind, 64);
        cfg.gen_width = 8;
        cfg.disc_width = 8;
        let nets = Networks::init(&cfg, 3, DType::F32, &cpu()).unwrap();
        let x = random_batch(&mut rng, (2, 3, 64, 64), DType::F32);
        let code = SpatialCode::sample(&mut rng, 2, cfg.code_dim, DType::F32, &cpu()).unwrap();
        for dir in Direction::BOTH {
            let b = run_cycle(&nets, &x, &code, dir).unwrap();
            let t = b.cycle_terms(&Default::default()).unwrap();
            ok &= scalar(&t.scl, "scl").unwrap() == 0.0;
            ok &= scalar(&t.rml, "rml").unwrap() == 0.0;
            ok &= values(b.transformed.tensor()) == values(x.tensor());
        }
    }
    let dt = t0.elapsed();
    outcome(
        ok && within(dt, Duration::from_secs(60)),
        format!("SCL = 0, RML = 0, transformed == x for 3 kinds × 2 directions: {ok}, {:.1}s", dt.as_secs_f64()),
    )
}

fn round_trip() -> Outcome {
    let errs: Vec<f64> = (0..100).map(|s| round_trip_error(s).unwrap()).collect();
    let worst = errs.iter().cloned().fold(0.0f64, f64::max);
    outcome(worst <= 0.05, format!("max interior L1 {worst:.4} over 100 seeds (≤0.05)"))
}

fn determinism_and_resume() -> Outcome {
    let run = |t: &mut Trainer, n: usize| -> Vec<MetricsRecord> {
        (0..n).flat_map(|_| t.step().unwrap().records()).collect()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_train_config(d1.path(), 6, 31);
    let a = run(&mut Trainer::new(&cfg).unwrap(), 6);
    let b = run(&mut Trainer::new(&tiny_train_config(d2.path(), 6, 31)).unwrap(), 6);
    let same = a == b;
    let mut first = Trainer::new(&cfg).unwrap();
    run(&mut first, 3);
    let ckpt = first.checkpoint().unwrap();
    let path = d1.path().join("mid.ckpt");
    ckpt.write(&path).unwrap();
    let ckpt = gadan::pipeline::Checkpoint::read(&path, &cpu()).unwrap();
    let tail = run(&mut Trainer::from_checkpoint(&cfg, &ckpt).unwrap(), 3);
    let resumed = tail == a[6..];
    outcome(
        same && resumed,
        format!("identical streams over 6 steps: {same}; resume at step 3 matches: {resumed}"),
    )
}

fn one_to_n() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path(), 0, 2);
    train(&cfg, None).unwrap();
    let input = dir.path().join("inputs");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    write_toy_domains(&input, &dir.path().join("unused"), 230, 24, &mut rng).unwrap();
    let out = dir.path().join("views");
    let written = adapt_multi_folder(&checkpoint_path(&cfg.checkpoint_dir, 0), &input, &out, 10, 0).unwrap();
    let on_disk = std::fs::read_dir(&out).unwrap().count();
    let inputs = list_images(&input).unwrap().len();
    outcome(
        inputs == 230 && written == 2300 && on_disk == 2300,
        format!("{inputs} inputs × 10 views: {written} written, {on_disk} files"),
    )
}

const TOY_SIZE: usize = 64;
const TOY_TRAIN_IMAGES: usize = 512;
const TOY_STEPS: u64 = 1400;
const TOY_EVAL: usize = 200;
const TOY_VIEWS: usize = 10;
const TOY_BUDGET: Duration = Duration::from_secs(45 * 60);
const MA_WINDOW: usize = 200;

fn toy_config(root: &std::path::Path) -> TrainConfig {
    let (x, y) = (root.join("x"), root.join("y"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    write_toy_domains(&x, &y, TOY_TRAIN_IMAGES, TOY_SIZE, &mut rng).unwrap();
    let mut c = TrainConfig::new(TransformKind::Homography, 16, TOY_STEPS, 0, x, y, root.join("ckpt"));
    c.network.image_size = TOY_SIZE;
    c.network.channels = 1;
    c.network.code_dim = 8;
    c.network.loc_size = 32;
    c.network.gen_width = 4;
    c.network.res_blocks = 1;
    c.network.disc_width = 8;
    c.lr_g = 5e-4;
    c.lr_d = 5e-4;
    c.checkpoint_every = TOY_STEPS;
    c
}

fn to_batch(images: &[Vec<f64>]) -> ImageBatch {
    let v: Vec<f64> = images.concat();
    let t = Tensor::from_vec(v, (images.len(), 1, TOY_SIZE, TOY_SIZE), &cpu()).unwrap();
    ImageBatch::new(t.to_dtype(DType::F32).unwrap()).unwrap()
}

fn rows(b: &ImageBatch) -> Vec<Vec<f64>> {
    values(b.tensor()).chunks(TOY_SIZE * TOY_SIZE).map(|c| c.to_vec()).collect()
}

fn tilt(img: &[f64]) -> f64 {
    estimate_tilt_deg(img, TOY_SIZE).unwrap_or(0.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|t| (t - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn generator_total(r: &MetricsRecord, c: &TrainConfig) -> f64 {
    r.cycle_total + c.weights.lambda_adv * r.adv_g + c.weights.lambda_idt * r.idt
}

/// Trains on rectangles versus tilted, blurred rectangles and measures the
/// adapted outputs with the corner-fitting tilt oracle.
fn toy_end_to_end() -> (Outcome, Option<Outcome>) {
    let root = tempfile::tempdir().unwrap();
    let cfg = toy_config(root.path());
    let t0 = Instant::now();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut totals = Vec::with_capacity(TOY_STEPS as usize);
    for _ in 0..TOY_STEPS {
        let recs = trainer.step().unwrap().records();
        totals.push(recs.iter().map(|r| generator_total(r, &cfg)).sum::<f64>());
    }
    let train_time = t0.elapsed();
    let nets = &trainer.nets;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let xs: Vec<Vec<f64>> = (0..TOY_EVAL).map(|_| toy_x(&mut rng, TOY_SIZE)).collect();
    let ys: Vec<Vec<f64>> = (0..TOY_EVAL).map(|_| toy_y(&mut rng, TOY_SIZE).0).collect();
    let y_tilts: Vec<f64> = ys.iter().map(|i| tilt(i)).collect();
    let y_abs = mean(&y_tilts.iter().map(|t| t.abs()).collect::<Vec<_>>());
    let y_lap = mean(&ys.iter().map(|i| laplacian_energy(i, TOY_SIZE)).collect::<Vec<_>>());
    let x_lap = mean(&xs.iter().map(|i| laplacian_energy(i, TOY_SIZE)).collect::<Vec<_>>());

    let mut adapted = Vec::with_capacity(TOY_EVAL);
    let mut code_rng = ChaCha8Rng::seed_from_u64(7);
    for chunk in xs.chunks(20) {
        let code = SpatialCode::sample(&mut code_rng, chunk.len(), cfg.network.code_dim, DType::F32, &cpu()).unwrap();
        adapted.extend(rows(&adapt(nets, &to_batch(chunk), &code).unwrap()));
    }
    let a_abs = mean(&adapted.iter().map(|i| tilt(i).abs()).collect::<Vec<_>>());
    let a_lap = mean(&adapted.iter().map(|i| laplacian_energy(i, TOY_SIZE)).collect::<Vec<_>>());
    let views = adapt_multi(nets, &to_batch(&xs[..1]), TOY_VIEWS, 3).unwrap();
    let view_tilts: Vec<f64> = views.iter().map(|v| tilt(&rows(v)[0])).collect();
    let elapsed = t0.elapsed();

    if let Ok(dir) = std::env::var("GADAN_TOY_OUT") {
        let dir = std::path::PathBuf::from(dir);
        std::fs::create_dir_all(&dir).unwrap();
        for (k, img) in adapted.iter().take(8).enumerate() {
            write_gray_png(img, TOY_SIZE, &dir.join(format!("adapted{k}.png"))).unwrap();
        }
        for (k, v) in views.iter().enumerate() {
            write_gray_png(&rows(v)[0], TOY_SIZE, &dir.join(format!("view{k}.png"))).unwrap();
        }
    }

    let rel = (a_abs - y_abs).abs() / y_abs;
    let tilt_ok = rel <= 0.3;
    let blur_ok = (a_lap - y_lap).abs() < (x_lap - y_lap).abs();
    let (v_std, y_std) = (std_dev(&view_tilts), std_dev(&y_tilts));
    let diverse = v_std >= 0.3 * y_std;
    let main = outcome(
        tilt_ok && blur_ok && diverse && within(elapsed, TOY_BUDGET),
        format!(
            "{TOY_STEPS} steps in {:.0}s ({:.0}s total); (a) mean |tilt| {a_abs:.2}° vs Y {y_abs:.2}° rel {rel:.2} \
             (≤0.30): {tilt_ok}; (b) Laplacian energy {a_lap:.4} vs Y {y_lap:.4}, raw X {x_lap:.4}: {blur_ok}; \
             (c) view tilt std {v_std:.2}° vs 0.3 × {y_std:.2}°: {diverse}",
            train_time.as_secs_f64(),
            elapsed.as_secs_f64()
        ),
    );
    let trend = (totals.len() >= 2000).then(|| {
        let avg = |end: usize| mean(&totals[end - MA_WINDOW..end]);
        let (early, late) = (avg(200), avg(2000));
        outcome(late < early, format!("moving average at 2000 {late:.3} vs at 200 {early:.3}"))
    });
    (main, trend)
}

#[test]
fn acceptance() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("geometry exactness", geometry_exactness());
    report("gradient suite", gradient_suite());
    report("loss identities", loss_identities());
    report("identity-init cycle", identity_init_cycle());
    report("round trip", round_trip());
    report("determinism and resume", determinism_and_resume());
    report("1-to-N adaptation", one_to_n());
    let (toy, trend) = toy_end_to_end();
    report("toy end-to-end", toy);
    match trend {
        Some(o) => println!("{} loss trend (informational): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail),
        None => println!("SKIP loss trend (informational): needs at least 2000 steps, ran {TOY_STEPS}"),
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
