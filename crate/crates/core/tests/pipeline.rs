mod common;

use candle_core::{DType, Tensor, Var};
use common::{cpu, max_abs_diff, random_batch, tiny_network, tiny_train_config, values};
use gadan::geometry::{build_operator, invert_operator};
use gadan::networks::{complete_background, translate_appearance, Networks, SpatialCode};
use gadan::pipeline::checkpoint::{checkpoint_path, checkpoint_steps};
use gadan::pipeline::{
    adapt, adapt_multi, evaluate_cycles, gradient_check, run_cycle, train, transform_pair, Adam, AdamParams,
    Checkpoint, Direction, MetricsRecord, Trainer,
};
use gadan::verify::ALL_KINDS;
use gadan::{TransformKind, ValidityMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Give both localization heads random weights so transforms move away
/// from the identity.
fn perturb_heads(nets: &Networks, rng: &mut ChaCha8Rng, scale: f64) {
    for group in ["ln_x", "ln_y"] {
        for (name, var) in nets.group(group) {
            if name.contains("fc2") {
                let n = var.elem_count();
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
                let t = Tensor::from_vec(v, var.dims(), &cpu()).unwrap().to_dtype(var.dtype()).unwrap();
                var.set(&t).unwrap();
            }
        }
    }
}

fn swapped(nets: &Networks) -> Networks {
    let mut s = nets.clone();
    std::mem::swap(&mut s.ln_x, &mut s.ln_y);
    std::mem::swap(&mut s.g_x, &mut s.g_y);
    std::mem::swap(&mut s.d_x, &mut s.d_y);
    s
}

#[test]
fn identity_init_cycle_is_lossless_in_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in ALL_KINDS {
        let nets = Networks::init(&tiny_network(kind, 24, 3), 3, DType::F32, &cpu()).unwrap();
        let x = random_batch(&mut rng, (2, 3, 24, 24), DType::F32);
        let code = SpatialCode::sample(&mut rng, 2, 4, DType::F32, &cpu()).unwrap();
        for dir in Direction::BOTH {
            let b = run_cycle(&nets, &x, &code, dir).unwrap();
            let t = b.cycle_terms(&Default::default()).unwrap();
            assert_eq!(t.scl.to_scalar::<f32>().unwrap(), 0.0);
            assert_eq!(t.rml.to_scalar::<f32>().unwrap(), 0.0);
            assert_eq!(values(b.transformed.tensor()), values(x.tensor()));
            assert!(values(b.m.tensor()).iter().all(|v| *v == 1.0));
            assert_eq!(values(b.m_roundtrip.tensor()), values(b.m.tensor()));
            b.verify(1e-12).unwrap();
        }
    }
}

#[test]
fn direction_flag_swaps_roles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let nets = Networks::init(&tiny_network(TransformKind::Homography, 24, 1), 4, DType::F32, &cpu()).unwrap();
    perturb_heads(&nets, &mut rng, 0.05);
    let other = swapped(&nets);
    let x = random_batch(&mut rng, (2, 1, 24, 24), DType::F32);
    let code = SpatialCode::sample(&mut rng, 2, 4, DType::F32, &cpu()).unwrap();
    let a = run_cycle(&nets, &x, &code, Direction::X2Y).unwrap();
    let b = run_cycle(&other, &x, &code, Direction::Y2X).unwrap();
    for (p, q) in [
        (&a.adapted, &b.adapted),
        (&a.x_rec_inv, &b.x_rec_inv),
        (&a.x_rec_pred, &b.x_rec_pred),
    ] {
        assert_eq!(values(p.tensor()), values(q.tensor()));
    }
    assert_eq!(values(&a.theta.theta), values(&b.theta.theta));
}

#[test]
fn bundle_inverse_is_exact_away_from_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [TransformKind::Affine, TransformKind::Homography] {
        let nets = Networks::init(&tiny_network(kind, 24, 1), 5, DType::F64, &cpu()).unwrap();
        perturb_heads(&nets, &mut rng, 0.05);
        let x = random_batch(&mut rng, (3, 1, 24, 24), DType::F64);
        let code = SpatialCode::sample(&mut rng, 3, 4, DType::F64, &cpu()).unwrap();
        let b = run_cycle(&nets, &x, &code, Direction::X2Y).unwrap();
        assert!(values(&b.theta.theta).iter().any(|v| *v != 0.0 && *v != 1.0));
        let prod = b.h_xy_inv.matrix().unwrap().matmul(b.h_xy.matrix().unwrap()).unwrap();
        for m in values(&prod).chunks(9) {
            for (i, v) in m.iter().enumerate() {
                let target = if i % 4 == 0 { m[8] } else { 0.0 };
                assert!((v - target).abs() / m[8].abs() <= 1e-9);
            }
        }
        let again = invert_operator(&b.h_xy).unwrap();
        assert!(max_abs_diff(again.matrix().unwrap(), b.h_xy_inv.matrix().unwrap()) <= 1e-12);
        b.verify(1e-12).unwrap();
        assert_eq!(values(b.code.tensor()), values(b.recovery_code.tensor()));
    }
}

#[test]
fn transform_discriminator_pairs_inverse_of_other_direction_as_real() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let nets = Networks::init(&tiny_network(TransformKind::Homography, 24, 1), 6, DType::F64, &cpu()).unwrap();
    perturb_heads(&nets, &mut rng, 0.05);
    let x = random_batch(&mut rng, (2, 1, 24, 24), DType::F64);
    let y = random_batch(&mut rng, (2, 1, 24, 24), DType::F64);
    let cx = SpatialCode::sample(&mut rng, 2, 4, DType::F64, &cpu()).unwrap();
    let cy = SpatialCode::sample(&mut rng, 2, 4, DType::F64, &cpu()).unwrap();
    let (xy, yx) = evaluate_cycles(&nets, &x, &y, &cx, &cy).unwrap();
    let (real, fake) = transform_pair(&xy, &yx);
    // Real: the inverse of the Y→X transform. Fake: the X→Y transform.
    let inv_yx = invert_operator(&yx.h_xy).unwrap();
    assert!(max_abs_diff(real.matrix().unwrap(), inv_yx.matrix().unwrap()) <= 1e-12);
    assert_eq!(values(fake.matrix().unwrap()), values(xy.h_xy.matrix().unwrap()));
}

#[test]
fn adam_matches_closed_form_first_steps() {
    let x = Var::from_tensor(&Tensor::new(&[0.5f64, -1.0, 2.0], &cpu()).unwrap()).unwrap();
    let c = Tensor::new(&[3.0f64, -0.25, 0.0], &cpu()).unwrap();
    let p = AdamParams::with_lr(0.1);
    let mut opt = Adam::new(vec![("x".into(), x.clone())], p).unwrap();
    let mut want = vec![0.5f64, -1.0, 2.0];
    let (mut m, mut v) = (vec![0.0f64; 3], vec![0.0f64; 3]);
    let g = values(&c);
    for t in 1..=3 {
        let grads = (x.as_tensor() * &c).unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&grads).unwrap();
        for i in 0..3 {
            m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
            v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - p.beta1.powi(t));
            let vh = v[i] / (1.0 - p.beta2.powi(t));
            want[i] -= p.lr * mh / (vh.sqrt() + p.eps);
        }
        let got = values(x.as_tensor());
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-12, "step {t}: {got:?} vs {want:?}");
        }
    }
    assert_eq!(opt.steps_taken(), 3);
}

fn run_steps(t: &mut Trainer, n: usize) -> Vec<MetricsRecord> {
    (0..n).flat_map(|_| t.step().unwrap().records()).collect()
}

#[test]
fn same_seed_gives_identical_metric_streams() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = run_steps(&mut Trainer::new(&tiny_train_config(d1.path(), 4, 11)).unwrap(), 4);
    let b = run_steps(&mut Trainer::new(&tiny_train_config(d2.path(), 4, 11)).unwrap(), 4);
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    let d3 = tempfile::tempdir().unwrap();
    let mut cfg = tiny_train_config(d3.path(), 4, 11);
    cfg.seed = 12;
    let c = run_steps(&mut Trainer::new(&cfg).unwrap(), 4);
    assert_ne!(a, c);
}

#[test]
fn first_step_reports_lossless_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let m = Trainer::new(&tiny_train_config(dir.path(), 1, 2)).unwrap().step().unwrap();
    assert_eq!(m.step, 0);
    for (_, r) in &m.reports {
        assert_eq!(r.scl, 0.0);
        assert_eq!(r.rml, 0.0);
        assert!(r.acl > 0.0 && r.adv_d > 0.0 && r.adv_g > 0.0);
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let (k, n) = (2usize, 5usize);
    let d1 = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(d1.path(), n as u64, 21);
    let full = run_steps(&mut Trainer::new(&cfg).unwrap(), n);

    let mut first = Trainer::new(&cfg).unwrap();
    run_steps(&mut first, k);
    let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes, &cpu()).unwrap();
    assert_eq!(ckpt.step().unwrap(), k as u64);
    let mut resumed = Trainer::from_checkpoint(&cfg, &ckpt).unwrap();
    let tail = run_steps(&mut resumed, n - k);
    assert_eq!(tail, full[2 * k..].to_vec());
}

fn metrics_lines(dir: &std::path::Path) -> Vec<MetricsRecord> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"header\""))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_writes_checkpoints_at_cadence_and_resumes_from_files() {
    assert_eq!(checkpoint_steps(250, 100), vec![100, 200, 250]);
    let d1 = tempfile::tempdir().unwrap();
    let mut cfg = tiny_train_config(d1.path(), 5, 8);
    cfg.checkpoint_every = 2;
    let last = train(&cfg, None).unwrap();
    assert_eq!(last.step().unwrap(), 5);
    for s in [2u64, 4, 5] {
        assert!(checkpoint_path(&cfg.checkpoint_dir, s).exists(), "step {s}");
    }
    assert!(!checkpoint_path(&cfg.checkpoint_dir, 3).exists());
    let full = metrics_lines(&cfg.checkpoint_dir);
    assert_eq!(full.len(), 10);
    let header = std::fs::read_to_string(cfg.checkpoint_dir.join("metrics.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["config"]["weights"]["lambda_acl"], 10.0);

    // Resume from step 2 in a fresh directory.
    let d2 = tempfile::tempdir().unwrap();
    let mut cfg2 = tiny_train_config(d2.path(), 5, 8);
    cfg2.checkpoint_every = 2;
    train(&cfg2, Some(&checkpoint_path(&cfg.checkpoint_dir, 2))).unwrap();
    assert_eq!(metrics_lines(&cfg2.checkpoint_dir), full[4..].to_vec());
}

#[test]
fn zero_steps_stores_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path(), 0, 13);
    let ckpt = train(&cfg, None).unwrap();
    assert_eq!(ckpt.step().unwrap(), 0);
    let init = Networks::init(&cfg.network, 13, DType::F32, &cpu()).unwrap();
    let stored = ckpt.networks(DType::F32, &cpu()).unwrap();
    assert_eq!(
        stored.to_container().unwrap().to_bytes().unwrap(),
        init.to_container().unwrap().to_bytes().unwrap()
    );
    assert!(checkpoint_path(&cfg.checkpoint_dir, 0).exists());
}

#[test]
fn resume_rejects_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path(), 1, 1);
    let ckpt = Trainer::new(&cfg).unwrap().checkpoint().unwrap();
    let mut other = cfg.clone();
    other.network.gen_width = 3;
    assert!(Trainer::from_checkpoint(&other, &ckpt).is_err());
}

#[test]
fn non_finite_losses_abort_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&tiny_train_config(dir.path(), 1, 1)).unwrap();
    // Completion is masked out at identity init, so poison the translator.
    let group = t.nets.group("g_x");
    let (_, w) = group.iter().find(|(n, _)| n.contains("translation.head")).unwrap();
    w.set(&w.as_tensor().affine(0.0, f64::NAN).unwrap()).unwrap();
    match t.step() {
        Err(gadan::Error::NonFiniteLoss(what)) => assert!(what.contains("x2y"), "{what}"),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn adapt_at_identity_init_only_changes_appearance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let nets = Networks::init(&tiny_network(TransformKind::Homography, 24, 3), 7, DType::F32, &cpu()).unwrap();
    let x = random_batch(&mut rng, (3, 3, 24, 24), DType::F32);
    let code = SpatialCode::sample(&mut rng, 3, 4, DType::F32, &cpu()).unwrap();
    let out = adapt(&nets, &x, &code).unwrap();
    let ones = ValidityMask::new(Tensor::ones((3, 1, 24, 24), DType::F32, &cpu()).unwrap()).unwrap();
    let want = translate_appearance(&nets.g_x, &complete_background(&nets.g_x, &x, &ones).unwrap()).unwrap();
    assert_eq!(values(out.tensor()), values(want.tensor()));
    assert_eq!(out.tensor().dims(), x.tensor().dims());
    assert!(values(out.tensor()).iter().all(|v| v.abs() <= 1.0));
    assert_eq!(values(adapt(&nets, &x, &code).unwrap().tensor()), values(out.tensor()));
}

#[test]
fn adapt_multi_draws_seeded_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let nets = Networks::init(&tiny_network(TransformKind::Affine, 24, 1), 8, DType::F32, &cpu()).unwrap();
    perturb_heads(&nets, &mut rng, 0.5);
    let x = random_batch(&mut rng, (2, 1, 24, 24), DType::F32);
    let views = adapt_multi(&nets, &x, 10, 3).unwrap();
    assert_eq!(views.len(), 10);
    let again = adapt_multi(&nets, &x, 10, 3).unwrap();
    for (a, b) in views.iter().zip(&again) {
        assert_eq!(values(a.tensor()), values(b.tensor()));
    }
    let first = SpatialCode::seeded(3, 1, 4, DType::F32, &cpu()).unwrap();
    let single = adapt_multi(&nets, &x, 1, 3).unwrap();
    assert_eq!(values(single[0].tensor()), values(adapt(&nets, &x, &first).unwrap().tensor()));
    let other = adapt_multi(&nets, &x, 10, 4).unwrap();
    assert!(views.iter().zip(&other).any(|(a, b)| values(a.tensor()) != values(b.tensor())));
    assert!(adapt_multi(&nets, &x, 0, 3).is_err());
}

#[test]
fn gradient_reports_are_deterministic_and_pass() {
    let a = gradient_check(7);
    let b = gradient_check(7);
    assert_eq!(a.to_string(), b.to_string());
    assert!(a.passed, "{a}");
    assert!(a.entries.iter().any(|e| e.component.contains("homography")));
}

#[test]
fn singular_predictions_are_rejected_by_the_operator() {
    let rows = vec![vec![0.0; 8]];
    let p = gadan::TransformParams::from_rows(TransformKind::Homography, &rows, DType::F32, &cpu()).unwrap();
    assert!(build_operator(&p).is_err());
}
