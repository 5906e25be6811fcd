//! Pretraining loop: AdamW with gradient accumulation, staged masking and
//! batch schedules, per-step loss logging and per-epoch checkpoints.
//!
//! All randomness derives from the root seed and counters (epoch, sample
//! position, micro-batch), so a run is reproducible bit for bit and resuming
//! from an epoch checkpoint continues exactly where the original left off.

mod adamw;
mod checkpoint;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ReadError};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::masking::{curriculum_ratio, CurriculumSchedule, REFERENCE_EPOCHS};
use crate::modal_input::MultimodalSample;
use crate::net::{forward_pretrain, init_params, Masking, ModelConfig, PeOptions};
use crate::numerics::{derive_seed, ParamStore, Tape, Tensor};
use crate::objective::{pretrain_loss, GroupTargets, LossBreakdown, LossWeights};
use crate::synthcorpus::{augment, drop_bands, AugmentConfig};

/// Local batch size and accumulation steps from a starting epoch on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchStage {
    pub start_epoch: usize,
    pub local_batch: usize,
    pub accumulation: usize,
}

impl BatchStage {
    pub fn effective_batch(&self) -> usize {
        self.local_batch * self.accumulation
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSchedule {
    pub stages: Vec<BatchStage>,
}

impl BatchSchedule {
    /// 16 x 4, 22 x 3 and 32 x 2 from epochs 0, 50 and 100.
    pub fn full() -> Self {
        Self::from_triples(&[(0, 16, 4), (50, 22, 3), (100, 32, 2)])
    }

    /// Desk-scale version of [`BatchSchedule::full`] with effective
    /// batches of 16, 15 and 16.
    pub fn toy() -> Self {
        Self::from_triples(&[(0, 4, 4), (50, 5, 3), (100, 8, 2)])
    }

    pub fn constant(local_batch: usize, accumulation: usize) -> Self {
        Self::from_triples(&[(0, local_batch, accumulation)])
    }

    /// Stages from `(start_epoch, local_batch, accumulation)` triples.
    pub fn from_triples(t: &[(usize, usize, usize)]) -> Self {
        BatchSchedule {
            stages: t
                .iter()
                .map(|&(start_epoch, local_batch, accumulation)| BatchStage {
                    start_epoch,
                    local_batch,
                    accumulation,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.stages.first() else {
            return Err(Error::contract("empty batch schedule"));
        };
        if first.start_epoch != 0 {
            return Err(Error::contract("batch schedule must start at epoch 0"));
        }
        if self.stages.windows(2).any(|w| w[1].start_epoch <= w[0].start_epoch) {
            return Err(Error::contract("batch stage start epochs must increase strictly"));
        }
        if self.stages.iter().any(|s| s.local_batch == 0 || s.accumulation == 0) {
            return Err(Error::contract("batch sizes and accumulation steps must be positive"));
        }
        Ok(())
    }

    /// Boundaries rescaled from the reference horizon, as for the masking
    /// curriculum.
    pub fn scaled(&self, epochs: usize) -> Self {
        if epochs == REFERENCE_EPOCHS {
            return self.clone();
        }
        let mut stages: Vec<BatchStage> = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let start = s.start_epoch * epochs / REFERENCE_EPOCHS;
            let stage = BatchStage {
                start_epoch: start,
                ..*s
            };
            match stages.last_mut() {
                Some(last) if last.start_epoch == start => *last = stage,
                _ => stages.push(stage),
            }
        }
        BatchSchedule { stages }
    }

    pub fn stage_at(&self, epoch: usize) -> BatchStage {
        *self
            .stages
            .iter()
            .take_while(|s| s.start_epoch <= epoch)
            .last()
            .unwrap_or(&self.stages[0])
    }

    fn to_text(&self) -> String {
        self.stages
            .iter()
            .map(|s| format!("{}:{}x{}", s.start_epoch, s.local_batch, s.accumulation))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Format(format!("batch_schedule: cannot parse {text:?}"));
        let mut stages = Vec::new();
        for item in text.split_whitespace() {
            let (start, rest) = item.split_once(':').ok_or_else(bad)?;
            let (b, a) = rest.split_once('x').ok_or_else(bad)?;
            stages.push(BatchStage {
                start_epoch: start.parse().map_err(|_| bad())?,
                local_batch: b.parse().map_err(|_| bad())?,
                accumulation: a.parse().map_err(|_| bad())?,
            });
        }
        let s = BatchSchedule { stages };
        s.validate()?;
        Ok(s)
    }
}

fn curriculum_to_text(c: &CurriculumSchedule) -> String {
    c.stages
        .iter()
        .map(|(e, r)| format!("{e}:{r}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_curriculum(text: &str) -> Result<CurriculumSchedule> {
    let bad = || Error::Format(format!("curriculum: cannot parse {text:?}"));
    let mut stages = Vec::new();
    for item in text.split_whitespace() {
        let (e, r) = item.split_once(':').ok_or_else(bad)?;
        stages.push((e.parse().map_err(|_| bad())?, r.parse().map_err(|_| bad())?));
    }
    let c = CurriculumSchedule { stages };
    c.validate()?;
    Ok(c)
}

/// Everything that determines a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Stage boundaries laid out for the reference horizon; rescaled to
    /// `epochs` when `scale_schedules` is set.
    pub curriculum: CurriculumSchedule,
    pub batch_schedule: BatchSchedule,
    pub scale_schedules: bool,
    pub augment: AugmentConfig,
    pub drop_prob: f64,
    pub loss_weights: LossWeights,
    pub geo: bool,
}

impl TrainConfig {
    /// Toy model and batch schedule over 30 epochs. The learning rate is
    /// raised to 1e-3 because a few hundred steps at 1e-4 barely move a
    /// freshly initialized model.
    pub fn toy() -> Self {
        TrainConfig {
            model: ModelConfig::toy(),
            epochs: 30,
            seed: 0,
            adamw: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            curriculum: CurriculumSchedule::default(),
            batch_schedule: BatchSchedule::toy(),
            scale_schedules: true,
            augment: AugmentConfig::default(),
            drop_prob: 0.1,
            loss_weights: LossWeights::default(),
            geo: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adamw.validate()?;
        self.curriculum.validate()?;
        self.batch_schedule.validate()?;
        self.loss_weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::contract("drop_prob outside [0, 1)"));
        }
        Ok(())
    }

    pub fn effective_curriculum(&self) -> CurriculumSchedule {
        if self.scale_schedules {
            self.curriculum.scaled(self.epochs)
        } else {
            self.curriculum.clone()
        }
    }

    pub fn effective_batches(&self) -> BatchSchedule {
        if self.scale_schedules {
            self.batch_schedule.scaled(self.epochs)
        } else {
            self.batch_schedule.clone()
        }
    }

    pub fn pe(&self) -> PeOptions {
        PeOptions {
            geo: self.geo,
            ..PeOptions::default()
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = self.model.to_kv();
        m.insert("epochs", self.epochs);
        m.insert("seed", self.seed);
        m.insert("lr", self.adamw.lr);
        m.insert("beta1", self.adamw.beta1);
        m.insert("beta2", self.adamw.beta2);
        m.insert("weight_decay", self.adamw.weight_decay);
        m.insert("eps", self.adamw.eps);
        m.insert("curriculum", curriculum_to_text(&self.curriculum));
        m.insert("batch_schedule", self.batch_schedule.to_text());
        m.insert("scale_schedules", self.scale_schedules);
        m.insert("max_noise", self.augment.max_noise);
        m.insert("blur_sigma", self.augment.blur_sigma);
        m.insert("blur_prob", self.augment.blur_prob);
        m.insert("rotate", self.augment.rotate);
        m.insert("drop_prob", self.drop_prob);
        m.insert("lambda_ms", self.loss_weights.lambda_ms);
        m.insert("lambda_mod", self.loss_weights.lambda_mod);
        m.insert("geo", self.geo);
        m
    }

    /// Overrides the fields of `base` named in `m`. Unknown keys are an
    /// error so that typos do not silently fall back to defaults.
    pub fn from_kv(m: &KvMap, base: &TrainConfig) -> Result<Self> {
        let known = base.to_kv();
        if let Some(k) = m.keys().find(|k| known.get(k).is_none()) {
            return Err(Error::Format(format!("unknown config key {k:?}")));
        }
        let mut c = base.clone();
        c.model = ModelConfig::from_kv(m, &base.model)?;
        macro_rules! set {
            ($key:literal, $slot:expr) => {
                if let Some(v) = m.parse_opt($key)? {
                    $slot = v;
                }
            };
        }
        set!("epochs", c.epochs);
        set!("seed", c.seed);
        set!("lr", c.adamw.lr);
        set!("beta1", c.adamw.beta1);
        set!("beta2", c.adamw.beta2);
        set!("weight_decay", c.adamw.weight_decay);
        set!("eps", c.adamw.eps);
        set!("scale_schedules", c.scale_schedules);
        set!("max_noise", c.augment.max_noise);
        set!("blur_sigma", c.augment.blur_sigma);
        set!("blur_prob", c.augment.blur_prob);
        set!("rotate", c.augment.rotate);
        set!("drop_prob", c.drop_prob);
        set!("lambda_ms", c.loss_weights.lambda_ms);
        set!("lambda_mod", c.loss_weights.lambda_mod);
        set!("geo", c.geo);
        if let Some(t) = m.get("curriculum") {
            c.curriculum = parse_curriculum(t)?;
        }
        if let Some(t) = m.get("batch_schedule") {
            c.batch_schedule = BatchSchedule::parse(t)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Loss and gradients of one batch; the loss is the mean over its samples.
pub fn batch_gradients(
    params: &ParamStore,
    model: &ModelConfig,
    batch: &[MultimodalSample],
    masking: &Masking,
    pe: &PeOptions,
    weights: LossWeights,
) -> Result<(BTreeMap<String, Tensor>, LossBreakdown)> {
    let mut tape = Tape::new();
    let binds = tape.bind(params);
    let out = forward_pretrain(&mut tape, &binds, model, batch, masking, pe)?;
    let targets = GroupTargets::from_batch(batch, &out.grid)?;
    let (loss, breakdown) = pretrain_loss(&mut tape, &out, &targets, weights)?;
    tape.backward(loss)?;
    Ok((tape.param_grads(&binds), breakdown))
}

/// Gradients of several micro-batches combined as if they formed one
/// batch: each contributes in proportion to its size.
pub fn accumulate_gradients(
    params: &ParamStore,
    model: &ModelConfig,
    micro_batches: &[(&[MultimodalSample], Masking)],
    pe: &PeOptions,
    weights: LossWeights,
) -> Result<(BTreeMap<String, Tensor>, LossBreakdown)> {
    let total: usize = micro_batches.iter().map(|(b, _)| b.len()).sum();
    if total == 0 {
        return Err(Error::contract("no samples to accumulate"));
    }
    let mut acc: Option<BTreeMap<String, Tensor>> = None;
    let mut sum = BreakdownSum::default();
    for (batch, masking) in micro_batches {
        let (grads, br) = batch_gradients(params, model, batch, masking, pe, weights)?;
        let w = batch.len() as f64 / total as f64;
        sum.add(&br, w);
        match &mut acc {
            None => {
                acc = Some(
                    grads
                        .into_iter()
                        .map(|(k, mut g)| {
                            g.data_mut().iter_mut().for_each(|v| *v *= w);
                            (k, g)
                        })
                        .collect(),
                )
            }
            Some(acc) => {
                for (k, g) in grads {
                    let a = acc.get_mut(&k).expect("same parameter set");
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += w * g);
                }
            }
        }
    }
    Ok((acc.expect("at least one micro-batch"), sum.finish(weights)))
}

/// Sample-weighted running combination of loss breakdowns.
#[derive(Default)]
struct BreakdownSum {
    gl: [f64; 6],
    gates: [f64; 6],
    total: f64,
}

impl BreakdownSum {
    fn add(&mut self, b: &LossBreakdown, w: f64) {
        for g in 0..6 {
            self.gl[g] += w * b.gates[g] * b.losses[g];
            self.gates[g] += w * b.gates[g];
        }
        self.total += w * b.total;
    }

    fn finish(&self, weights: LossWeights) -> LossBreakdown {
        let mut losses = [0.0; 6];
        for g in 0..6 {
            if self.gates[g] > 0.0 {
                losses[g] = self.gl[g] / self.gates[g];
            }
        }
        LossBreakdown {
            losses,
            gates: self.gates,
            weights,
            total: self.total,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub ratio: f64,
    pub stage: BatchStage,
    pub steps: usize,
    /// Sample-weighted mean of the total loss over the epoch.
    pub mean_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub checkpoint: Checkpoint,
}

pub const LOSS_LOG: &str = "loss.csv";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

pub fn epoch_checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Augments and band-drops one sample with randomness keyed by its
/// position in the epoch.
fn prepare_sample(sample: &MultimodalSample, config: &TrainConfig, epoch: usize, pos: usize) -> Result<MultimodalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, epoch as u64, pos as u64]));
    let s = augment(sample, &config.augment, &mut rng)?;
    drop_bands(&s, config.drop_prob, &mut rng)
}

/// Trains on `samples`. With `out_dir`, writes the loss log, one checkpoint
/// per epoch, the encoder-only export and the resolved config.
pub fn train(
    samples: &[MultimodalSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("no training samples"));
    }
    let (mut params, mut opt, start) = match resume {
        Some(ck) => {
            if ck.model != config.model || ck.seed != config.seed {
                return Err(Error::contract("checkpoint model or seed differs from the run config"));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::contract("cannot resume from an encoder-only checkpoint"))?;
            (ck.params, opt, ck.epoch)
        }
        None => (
            init_params(&config.model, derive_seed(config.seed, &[0]))?,
            OptimizerState::new(config.adamw),
            0,
        ),
    };
    let mut log = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, config.to_kv().to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        let path = dir.join(LOSS_LOG);
        let fresh = start == 0 || !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(f, "{}", LossBreakdown::csv_header()).map_err(|e| Error::io(&path, e))?;
        }
        log = Some((f, path));
    }
    let curriculum = config.effective_curriculum();
    let batches = config.effective_batches();
    let pe = config.pe();
    let mut summaries = Vec::new();
    for epoch in start..config.epochs {
        let ratio = curriculum_ratio(epoch, &curriculum)?;
        let stage = batches.stage_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, epoch as u64])));
        let prepared: Vec<MultimodalSample> = order
            .iter()
            .enumerate()
            .map(|(pos, &i)| prepare_sample(&samples[i], config, epoch, pos))
            .collect::<Result<_>>()?;
        let micro: Vec<&[MultimodalSample]> = prepared.chunks(stage.local_batch).collect();
        let mut epoch_total = 0.0;
        let mut steps = 0;
        for (step, group) in micro.chunks(stage.accumulation).enumerate() {
            let first_mb = step * stage.accumulation;
            let mbs: Vec<(&[MultimodalSample], Masking)> = group
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    (
                        *b,
                        Masking::Random {
                            ratio,
                            seed: config.seed,
                            epoch,
                            batch: first_mb + j,
                        },
                    )
                })
                .collect();
            let n: usize = group.iter().map(|b| b.len()).sum();
            let (grads, br) = accumulate_gradients(&params, &config.model, &mbs, &pe, config.loss_weights)
                .map_err(|e| e.with_context(format!("epoch {epoch} step {step}")))?;
            adamw_step(&mut params, &grads, &mut opt).map_err(|e| e.with_context(format!("epoch {epoch} step {step}")))?;
            epoch_total += br.total * n as f64;
            steps += 1;
            if let Some((f, path)) = &mut log {
                writeln!(f, "{}", br.csv_row(epoch, step, ratio)).map_err(|e| Error::io(&*path, e))?;
            }
        }
        let summary = EpochSummary {
            epoch,
            ratio,
            stage,
            steps,
            mean_total: epoch_total / samples.len() as f64,
        };
        log::info!(
            "epoch {epoch}: ratio {ratio} batch {}x{} steps {steps} mean loss {:.6}",
            stage.local_batch,
            stage.accumulation,
            summary.mean_total
        );
        summaries.push(summary);
        if let Some(dir) = out_dir {
            let ck = Checkpoint {
                model: config.model.clone(),
                params: params.clone(),
                optimizer: Some(opt.clone()),
                epoch: epoch + 1,
                seed: config.seed,
            };
            save_checkpoint(&epoch_checkpoint_path(dir, epoch + 1), &ck)
                .map_err(|e| e.with_context(format!("epoch {epoch}")))?;
        }
    }
    let checkpoint = Checkpoint {
        model: config.model.clone(),
        params,
        optimizer: Some(opt),
        epoch: config.epochs,
        seed: config.seed,
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(ENCODER_FILE), &checkpoint.encoder_export())?;
    }
    Ok(TrainReport {
        epochs: summaries,
        checkpoint,
    })
}
