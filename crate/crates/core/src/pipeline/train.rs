//! Alternating generator/discriminator optimization over both cycle
//! directions, with checkpointing and a line-delimited metrics log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{checkpoint_path, checkpoint_steps, Checkpoint, TrainingState};
use super::cycle::{run_cycle_guarded, CycleBundle, Direction};
use super::optim::{Adam, AdamParams};
use crate::batch::ImageBatch;
use crate::config::TrainConfig;
use crate::data::{load_domain, next_batch, BatchCursor, DomainDataset};
use crate::error::{Error, Result};
use crate::geometry::TransformOperator;
use crate::losses::{adversarial_losses, scalar, AdversarialSide, CycleLossReport};
use crate::networks::{NamedVars, Networks, SpatialCode};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAIN_DTYPE: DType = DType::F32;

const GENERATOR_GROUPS: [&str; 4] = ["ln_x", "ln_y", "g_x", "g_y"];
const DISCRIMINATOR_GROUPS: [&str; 3] = ["d_x", "d_y", "d_t"];

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub direction: Direction,
    pub acl: f64,
    pub scl: f64,
    pub rml: f64,
    pub cycle_total: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub idt: f64,
}

/// Per-direction reports of one step; empty if the step was skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub reports: Vec<(Direction, CycleLossReport)>,
}

impl StepMetrics {
    pub fn records(&self) -> Vec<MetricsRecord> {
        self.reports
            .iter()
            .map(|(d, r)| MetricsRecord {
                step: self.step,
                direction: *d,
                acl: r.acl,
                scl: r.scl,
                rml: r.rml,
                cycle_total: r.cycle_total,
                adv_g: r.adv_g,
                adv_d: r.adv_d,
                idt: r.idt,
            })
            .collect()
    }
}

fn named(nets: &Networks, groups: &[&str]) -> NamedVars {
    groups.iter().flat_map(|g| nets.group(g)).collect()
}

/// Owns the networks, optimizers, data streams and sampling state of a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub nets: Networks,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    cursor_x: BatchCursor,
    cursor_y: BatchCursor,
    step: u64,
    data_x: DomainDataset,
    data_y: DomainDataset,
    device: Device,
}

impl Trainer {
    /// Fresh run: every stream is derived from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let nets = Networks::init(&config.network, config.seed, TRAIN_DTYPE, &device)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let n = &config.network;
        let data_x = load_domain(&config.domain_x_dir, n.image_size, n.channels)?;
        let data_y = load_domain(&config.domain_y_dir, n.image_size, n.channels)?;
        if !data_x.skipped.is_empty() || !data_y.skipped.is_empty() {
            warn!(
                "skipped {} undecodable files in X and {} in Y",
                data_x.skipped.len(),
                data_y.skipped.len()
            );
        }
        Ok(Self {
            opt_g: Adam::new(named(&nets, &GENERATOR_GROUPS), AdamParams::with_lr(config.lr_g))?,
            opt_d: Adam::new(named(&nets, &DISCRIMINATOR_GROUPS), AdamParams::with_lr(config.lr_d))?,
            config: config.clone(),
            nets,
            rng,
            cursor_x: BatchCursor::new(config.seed.wrapping_add(1)),
            cursor_y: BatchCursor::new(config.seed.wrapping_add(2)),
            step: 0,
            data_x,
            data_y,
            device,
        })
    }

    /// Continue a run. The architecture in `config` must match the
    /// checkpoint; the step budget and cadence may differ.
    pub fn from_checkpoint(config: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let stored = ckpt.config()?;
        if stored.network != config.network {
            return Err(Error::Checkpoint(
                "network configuration differs from the checkpoint".into(),
            ));
        }
        let mut t = Self::new(config)?;
        let state = ckpt.state()?;
        t.nets.restore(&ckpt.container)?;
        t.opt_g.restore("adam_g", &ckpt.container, state.adam_g_t)?;
        t.opt_d.restore("adam_d", &ckpt.container, state.adam_d_t)?;
        t.rng = state.rng;
        t.cursor_x = state.cursor_x;
        t.cursor_y = state.cursor_y;
        t.step = state.step;
        Ok(t)
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> TrainingState {
        TrainingState {
            step: self.step,
            rng: self.rng.clone(),
            cursor_x: self.cursor_x,
            cursor_y: self.cursor_y,
            adam_g_t: self.opt_g.steps_taken(),
            adam_d_t: self.opt_d.steps_taken(),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(&self.config, &self.state());
        self.nets.store(&mut ckpt.container)?;
        self.opt_g.store("adam_g", &mut ckpt.container)?;
        self.opt_d.store("adam_d", &mut ckpt.container)?;
        Ok(ckpt)
    }

    /// Draw the next batches and run one optimization step.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let bs = self.config.batch_size;
        let (x, cx) = next_batch(&self.data_x, bs, self.cursor_x, TRAIN_DTYPE, &self.device)?;
        let (y, cy) = next_batch(&self.data_y, bs, self.cursor_y, TRAIN_DTYPE, &self.device)?;
        self.cursor_x = cx;
        self.cursor_y = cy;
        let m = self.train_step(&x, &y, self.step)?;
        self.step += 1;
        Ok(m)
    }

    /// Sample codes, run both directions, update the spatial modules and
    /// generators, then the discriminators on the same (detached) outputs.
    pub fn train_step(&mut self, x: &ImageBatch, y: &ImageBatch, step: u64) -> Result<StepMetrics> {
        let nets = &self.nets;
        let dim = nets.config.code_dim;
        let code_x = SpatialCode::sample(&mut self.rng, x.batch_size(), dim, TRAIN_DTYPE, &self.device)?;
        let code_y = SpatialCode::sample(&mut self.rng, y.batch_size(), dim, TRAIN_DTYPE, &self.device)?;

        let fwd = run_cycle_guarded(nets, x, &code_x, Direction::X2Y)?;
        let bwd = run_cycle_guarded(nets, y, &code_y, Direction::Y2X)?;
        let (Some((b_xy, _)), Some((b_yx, _))) = (fwd, bwd) else {
            warn!("step {step}: every element of a batch was singular; skipping update");
            return Ok(StepMetrics {
                step,
                reports: Vec::new(),
            });
        };
        let w = self.config.weights;
        let reals = [(Direction::X2Y, &b_xy, &b_yx, y), (Direction::Y2X, &b_yx, &b_xy, x)];

        // Generator side.
        let mut reports = Vec::with_capacity(2);
        let mut g_total: Option<Tensor> = None;
        for (dir, own, _, _) in &reals {
            let r = nets.roles(*dir);
            let tag = dir.label();
            let terms = own.cycle_terms(&w)?;
            let idt = own.identity_term()?;
            let d_fake = r.d_target.discriminate(&own.adapted)?;
            let dt_fake = nets.d_t.discriminate(&own.h_xy)?;
            // Real logits are ignored on the generator side.
            let adv_g = adversarial_losses(&d_fake, &d_fake, &dt_fake, &dt_fake, AdversarialSide::Generator)?;
            let report = CycleLossReport {
                acl: scalar(&terms.acl, &format!("{tag}.acl"))?,
                scl: scalar(&terms.scl, &format!("{tag}.scl"))?,
                rml: scalar(&terms.rml, &format!("{tag}.rml"))?,
                cycle_total: scalar(&terms.total, &format!("{tag}.cycle_total"))?,
                adv_g: scalar(&adv_g, &format!("{tag}.adv_g"))?,
                adv_d: 0.0,
                idt: scalar(&idt, &format!("{tag}.idt"))?,
            };
            reports.push((*dir, report));
            let total = ((adv_g.affine(w.lambda_adv, 0.0)? + terms.total)? + idt.affine(w.lambda_idt, 0.0)?)?;
            g_total = Some(match g_total {
                None => total,
                Some(acc) => (acc + total)?,
            });
        }
        let g_total = g_total.expect("two directions");
        scalar(&g_total, "generator_total")?;
        let grads = g_total.backward()?;
        self.opt_g.step(&grads)?;

        // Discriminator side: in the X→Y objective the inverse of the Y→X
        // transform is real and the X→Y transform is fake, and vice versa.
        let mut d_total: Option<Tensor> = None;
        for (i, (dir, own, other, real)) in reals.iter().enumerate() {
            let r = nets.roles(*dir);
            let d_real = r.d_target.discriminate(real)?;
            let d_fake = r.d_target.discriminate(&own.adapted.detach())?;
            let (t_real, t_fake) = transform_pair(own, other);
            let dt_real = nets.d_t.discriminate(&t_real.detach())?;
            let dt_fake = nets.d_t.discriminate(&t_fake.detach())?;
            let adv_d = adversarial_losses(&d_real, &d_fake, &dt_real, &dt_fake, AdversarialSide::Discriminator)?;
            reports[i].1.adv_d = scalar(&adv_d, &format!("{}.adv_d", dir.label()))?;
            d_total = Some(match d_total {
                None => adv_d,
                Some(acc) => (acc + adv_d)?,
            });
        }
        let grads = d_total.expect("two directions").backward()?;
        self.opt_d.step(&grads)?;

        Ok(StepMetrics { step, reports })
    }
}

/// `(real, fake)` inputs of the transform discriminator in the objective of
/// `own`'s direction: the inverse of the opposite direction's transform is
/// real and `own`'s forward transform is fake.
pub fn transform_pair<'a>(own: &'a CycleBundle, other: &'a CycleBundle) -> (&'a TransformOperator, &'a TransformOperator) {
    (&other.h_xy_inv, &own.h_xy)
}

/// Both cycle bundles for a batch pair without touching any weights.
pub fn evaluate_cycles(
    nets: &Networks,
    x: &ImageBatch,
    y: &ImageBatch,
    code_x: &SpatialCode,
    code_y: &SpatialCode,
) -> Result<(CycleBundle, CycleBundle)> {
    let a = super::cycle::run_cycle(nets, x, code_x, Direction::X2Y)?;
    let b = super::cycle::run_cycle(nets, y, code_y, Direction::Y2X)?;
    Ok((a, b))
}

fn open_metrics(dir: &Path, config: &TrainConfig, resumed_from: Option<u64>) -> Result<BufWriter<File>> {
    let path = dir.join(METRICS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed_from.is_some())
        .truncate(resumed_from.is_none())
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::json!({ "header": { "config": config, "resumed_from": resumed_from } });
    writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
    Ok(w)
}

/// Run (or resume) training to `config.steps` completed steps, writing
/// checkpoints at the configured cadence and at the end. Returns the final
/// checkpoint.
pub fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<Checkpoint> {
    let dir = &config.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::read(p, &Device::Cpu)?;
            Trainer::from_checkpoint(config, &ckpt)?
        }
        None => Trainer::new(config)?,
    };
    info!(
        "training {} parameters for {} steps from step {}",
        trainer.nets.num_parameters(),
        config.steps,
        trainer.steps_done()
    );
    let mut log = open_metrics(dir, config, resume.map(|_| trainer.steps_done()))?;
    let log_path = dir.join(METRICS_FILE);
    let save_at = checkpoint_steps(config.steps, config.checkpoint_every);
    if save_at.contains(&trainer.steps_done()) {
        trainer.checkpoint()?.write(&checkpoint_path(dir, trainer.steps_done()))?;
    }
    while trainer.steps_done() < config.steps {
        let m = trainer.step()?;
        for rec in m.records() {
            writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        }
        let done = trainer.steps_done();
        if done % config.log_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            if let Some((_, r)) = m.reports.first() {
                info!(
                    "step {done}: acl {:.4} scl {:.4} rml {:.4} adv_g {:.4} adv_d {:.4} idt {:.4}",
                    r.acl, r.scl, r.rml, r.adv_g, r.adv_d, r.idt
                );
            }
        }
        if save_at.contains(&done) {
            trainer.checkpoint()?.write(&checkpoint_path(dir, done))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.checkpoint()
}
