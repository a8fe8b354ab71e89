//! Training loop: balanced sampling, flips, AdamW with a step-decay
//! schedule, per-epoch checkpoints and a CSV log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::DType;
use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datamodel::{BoundingBox, CaseDescriptor, CaseRecord, DatasetIndex, ModalityRegistry, SampleInstance, DEFAULT_BOX_JITTER};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::{PreparedBatch, SegModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::sampling::{epoch_length, Draw, Sampler};

/// Metadata key holding the serialized [`TrainState`].
pub const TRAIN_STATE_KEY: &str = "train_state";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    /// Learning rate of the last epoch.
    pub final_epoch_lr: f64,
    pub epochs: usize,
    pub flip_prob: f64,
    pub seed: u64,
    /// Box perturbation in model-frame pixels.
    pub box_jitter: u32,
    /// Global gradient-norm clip; off when unset.
    pub grad_clip: Option<f64>,
    /// Constant learning rate replacing the schedule.
    pub lr_override: Option<f64>,
    /// Steps per epoch; defaults to the sampler's epoch length.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            weight_decay: 1e-3,
            decay_factor: 0.9,
            decay_every: 5,
            final_epoch_lr: 5e-5,
            epochs: 25,
            flip_prob: 0.5,
            seed: 0,
            box_jitter: DEFAULT_BOX_JITTER,
            grad_clip: None,
            lr_override: None,
            steps_per_epoch: None,
        }
    }
}

// Strips binary drift from repeated decay so the schedule hits its decimal
// values exactly (e.g. 2e-4 * 0.9^3 evaluates to 1.4580000000000002e-4).
fn round_sig(x: f64) -> f64 {
    format!("{x:.11e}").parse().expect("formatted float parses")
}

/// Learning rate for `epoch`: `lr0 * decay^(epoch / decay_every)`, and
/// `final_epoch_lr` in the last epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidInput(format!("epoch {epoch} outside [0, {})", cfg.epochs)));
    }
    if let Some(lr) = cfg.lr_override {
        return Ok(lr);
    }
    if epoch + 1 == cfg.epochs {
        return Ok(cfg.final_epoch_lr);
    }
    let k = (epoch / cfg.decay_every.max(1)) as i32;
    Ok(round_sig(cfg.lr0 * cfg.decay_factor.powi(k)))
}

/// Mirrors a half-open box across the vertical axis of a `width`-wide frame.
pub fn flip_box_horizontal(b: &BoundingBox, width: usize) -> BoundingBox {
    let w = width as f32;
    BoundingBox {
        x_min: w - b.x_max,
        y_min: b.y_min,
        x_max: w - b.x_min,
        y_max: b.y_max,
    }
}

pub fn flip_box_vertical(b: &BoundingBox, height: usize) -> BoundingBox {
    let h = height as f32;
    BoundingBox {
        x_min: b.x_min,
        y_min: h - b.y_max,
        x_max: b.x_max,
        y_max: h - b.y_min,
    }
}

pub fn flip_horizontal(s: &SampleInstance) -> SampleInstance {
    let w = s.mask.ncols();
    SampleInstance {
        slice: s.slice.slice(s![.., ..;-1, ..]).to_owned(),
        mask: s.mask.slice(s![.., ..;-1]).to_owned(),
        bbox: flip_box_horizontal(&s.bbox, w),
        modality: s.modality.clone(),
    }
}

pub fn flip_vertical(s: &SampleInstance) -> SampleInstance {
    let h = s.mask.len_of(Axis(0));
    SampleInstance {
        slice: s.slice.slice(s![..;-1, .., ..]).to_owned(),
        mask: s.mask.slice(s![..;-1, ..]).to_owned(),
        bbox: flip_box_vertical(&s.bbox, h),
        modality: s.modality.clone(),
    }
}

/// Independent horizontal and vertical flips, each with `flip_prob`.
pub fn augment<R: Rng + ?Sized>(sample: SampleInstance, rng: &mut R, flip_prob: f64) -> SampleInstance {
    let h = rng.random::<f64>() < flip_prob;
    let v = rng.random::<f64>() < flip_prob;
    let sample = if h { flip_horizontal(&sample) } else { sample };
    if v {
        flip_vertical(&sample)
    } else {
        sample
    }
}

/// An index with every case held in memory.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub index: DatasetIndex,
    cases: Vec<Vec<Arc<CaseRecord>>>,
}

impl TrainData {
    /// Loads every case container of `index`.
    pub fn load(index: DatasetIndex, exec: Execution) -> Result<Self> {
        let cases = (0..index.num_modalities())
            .map(|m| {
                let loaded = exec::try_map(exec, index.cases_of(m), CaseDescriptor::load)?;
                Ok(loaded.into_iter().map(Arc::new).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { index, cases })
    }

    pub fn from_cases(registry: ModalityRegistry, cases: Vec<CaseRecord>) -> Result<Self> {
        let index = DatasetIndex::from_descriptors(registry, cases.iter().map(|c| CaseDescriptor::from_case(c, None)))?;
        let mut by_modality: Vec<Vec<Arc<CaseRecord>>> = vec![Vec::new(); index.num_modalities()];
        for c in cases {
            by_modality[c.modality.index].push(Arc::new(c));
        }
        Ok(Self { index, cases: by_modality })
    }

    pub fn case(&self, modality: usize, case: usize) -> &CaseRecord {
        &self.cases[modality][case]
    }

    pub fn all_cases(&self) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().flatten().map(|c| c.as_ref())
    }
}

/// Resumable state stored alongside the parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub next_epoch: usize,
    pub global_step: usize,
    pub optimizer_step: u64,
    pub sampler_rng: ChaCha8Rng,
    pub sample_rng: ChaCha8Rng,
}

/// One optimisation step: forward, loss, backward, update.
pub fn train_step(
    model: &SegModel,
    opt: &mut AdamW,
    batch: &PreparedBatch,
    loss: &LossConfig,
    grad_clip: Option<f64>,
    step: usize,
) -> Result<LossBreakdown> {
    let out = model.forward(batch)?;
    let terms = model.loss_terms(&out, batch, loss)?;
    let (total, breakdown) = total_loss(&terms, &loss.weights())?;
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("{breakdown:?}"),
        });
    }
    let grads = total.backward()?;
    opt.step(&grads, grad_clip)?;
    Ok(breakdown)
}

/// Stateful trainer over in-memory data.
pub struct Trainer<'d> {
    pub model: SegModel,
    pub opt: AdamW,
    cfg: RunConfig,
    data: &'d TrainData,
    sampler: Sampler<'d>,
    sample_rng: ChaCha8Rng,
    exec: Execution,
    global_step: usize,
    last_draws: Vec<(Draw, BoundingBox)>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &RunConfig, data: &'d TrainData, exec: Execution) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.sync();
        cfg.model.num_modalities = data.index.num_modalities();
        cfg.loss.weights().validate()?;
        let model = SegModel::new(cfg.model.clone(), data.index.registry().clone(), cfg.clip.clone(), DType::F32)?;
        let opt = AdamW::new(
            model.trainable_vars(),
            AdamWConfig {
                lr: lr_at(0, &cfg.train)?,
                weight_decay: cfg.train.weight_decay,
                ..Default::default()
            },
        )?;
        let sampler = Sampler::new(&data.index, cfg.sampling.clone())?;
        Ok(Self {
            model,
            opt,
            sample_rng: ChaCha8Rng::seed_from_u64(cfg.train.seed),
            cfg,
            data,
            sampler,
            exec,
            global_step: 0,
            last_draws: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.train.steps_per_epoch.unwrap_or_else(|| {
            epoch_length(&self.data.index, self.cfg.sampling.strategy, self.cfg.sampling.batch_size)
        })
    }

    /// Draws the next batch of augmented model-frame samples.
    pub fn next_samples(&mut self) -> Result<Vec<SampleInstance>> {
        let draws = self.sampler.next_batch()?;
        // Seeds are drawn sequentially so the parallel part stays deterministic.
        let jobs: Vec<(Draw, u64)> = draws.iter().map(|d| (*d, self.sample_rng.random())).collect();
        let (s, jitter, flip) = (self.cfg.model.img_size, self.cfg.train.box_jitter, self.cfg.train.flip_prob);
        let data = self.data;
        let samples = exec::try_map(self.exec, &jobs, |(d, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let case = data.case(d.modality, d.case);
            let sample = SampleInstance::from_case(case, d.slice_index(), d.label, s, jitter, &mut rng)?;
            Ok::<_, Error>(augment(sample, &mut rng, flip))
        })?;
        self.last_draws = draws.into_iter().zip(samples.iter().map(|s| s.bbox)).collect();
        Ok(samples)
    }

    /// Samples a batch and takes one step at `lr`.
    pub fn step(&mut self, lr: f64) -> Result<LossBreakdown> {
        let samples = self.next_samples()?;
        let batch = self.model.prepare_batch(self.exec, &samples)?;
        self.opt.set_learning_rate(lr);
        self.global_step += 1;
        train_step(&self.model, &mut self.opt, &batch, &self.cfg.loss, self.cfg.train.grad_clip, self.global_step)
    }

    /// Describes the most recent batch, for diagnostics.
    pub fn batch_dump(&self) -> serde_json::Value {
        let rows: Vec<_> = self
            .last_draws
            .iter()
            .map(|(d, b)| {
                serde_json::json!({
                    "case_id": d.descriptor(&self.data.index).case_id,
                    "modality": self.data.index.registry().names()[d.modality],
                    "z": d.z,
                    "label": d.label,
                    "box": b.to_array(),
                })
            })
            .collect();
        serde_json::json!({ "step": self.global_step, "samples": rows })
    }

    pub fn state(&self, next_epoch: usize) -> TrainState {
        TrainState {
            next_epoch,
            global_step: self.global_step,
            optimizer_step: self.opt.step_count(),
            sampler_rng: self.sampler.rng().clone(),
            sample_rng: self.sample_rng.clone(),
        }
    }

    pub fn save(&self, path: &Path, next_epoch: usize) -> Result<()> {
        let mut c = self.model.to_checkpoint()?;
        c.tensors.extend(self.opt.state_tensors());
        c.metadata
            .insert(TRAIN_STATE_KEY.into(), serde_json::to_string(&self.state(next_epoch))?);
        c.metadata.insert("run_config".into(), serde_json::to_string(&self.cfg)?);
        c.write(path)
    }

    /// Restores parameters, optimizer moments and RNG streams; returns the
    /// epoch to continue from.
    pub fn restore(&mut self, path: &Path) -> Result<usize> {
        let ckpt = Checkpoint::read(path, &candle_core::Device::Cpu)?;
        let state: TrainState = serde_json::from_str(
            ckpt.metadata
                .get(TRAIN_STATE_KEY)
                .ok_or_else(|| Error::Checkpoint(format!("{} has no training state", path.display())))?,
        )?;
        let model = SegModel::from_checkpoint(&ckpt, DType::F32)?;
        if model.meta() != self.model.meta() {
            return Err(Error::Checkpoint("checkpoint model config differs from the run config".into()));
        }
        for (name, var) in model.store().vars() {
            self.model.store().set(&name, var.as_tensor())?;
        }
        self.opt.load_state(&ckpt.tensors, state.optimizer_step)?;
        self.sampler.set_rng(state.sampler_rng);
        self.sample_rng = state.sample_rng;
        self.global_step = state.global_step;
        Ok(state.next_epoch)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub exec: Execution,
}

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
    pub rows: Vec<LogRow>,
}

pub const LOG_FILE: &str = "train_log.csv";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_epoch{epoch:03}.safetensors"))
}

fn log_line(r: &LogRow) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        r.step,
        r.epoch,
        r.lr,
        r.loss.bce,
        r.loss.dice,
        r.loss.iou,
        opt(r.loss.mcls),
        opt(r.loss.contrastive),
        r.loss.total
    )
}

/// Runs `epochs x steps_per_epoch` steps, checkpointing after each epoch and
/// appending one CSV row per step.
pub fn fit(cfg: &RunConfig, data: &TrainData, opts: &FitOptions) -> Result<FitReport> {
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let mut trainer = Trainer::new(cfg, data, opts.exec)?;
    let start = match &opts.resume {
        Some(p) => trainer.restore(p)?,
        None => 0,
    };
    let log_path = opts.out_dir.join(LOG_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(opts.resume.is_some())
        .write(true)
        .truncate(opts.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if opts.resume.is_none() {
        writeln!(log, "step,epoch,lr,{}", crate::losses::LossBreakdown::COLUMNS.join(","))
            .map_err(|e| Error::io(&log_path, e))?;
    }
    let steps = trainer.steps_per_epoch();
    let epochs = trainer.config().train.epochs;
    let mut report = FitReport {
        checkpoints: Vec::new(),
        log_path: log_path.clone(),
        rows: Vec::new(),
    };
    for epoch in start..epochs {
        let lr = lr_at(epoch, &trainer.config().train)?;
        for _ in 0..steps {
            let loss = match trainer.step(lr) {
                Ok(l) => l,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    let dump = opts.out_dir.join("nonfinite_batch.json");
                    let _ = std::fs::write(&dump, serde_json::to_vec_pretty(&trainer.batch_dump())?);
                    log::error!("non-finite loss; batch written to {}", dump.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let row = LogRow {
                step: trainer.global_step(),
                epoch,
                lr,
                loss,
            };
            log.write_all(log_line(&row).as_bytes()).map_err(|e| Error::io(&log_path, e))?;
            log::debug!("step {} epoch {epoch} lr {lr:e} loss {:.5}", row.step, loss.total);
            report.rows.push(row);
        }
        let path = checkpoint_path(&opts.out_dir, epoch);
        trainer.save(&path, epoch + 1)?;
        log::info!("epoch {epoch} done; checkpoint {}", path.display());
        report.checkpoints.push(path);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ModalityId;
    use ndarray::{Array2, Array3};

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 2e-4);
        assert_eq!(lr_at(5, &cfg).unwrap(), 1.8e-4);
        assert_eq!(lr_at(24, &cfg).unwrap(), 5e-5);
        assert!(lr_at(25, &cfg).is_err());
    }

    #[test]
    fn box_flip_arithmetic() {
        let b = BoundingBox::new(2.0, 3.0, 5.0, 7.0).unwrap();
        assert_eq!(flip_box_horizontal(&b, 10).to_array(), [5.0, 3.0, 8.0, 7.0]);
        assert_eq!(flip_box_horizontal(&flip_box_horizontal(&b, 10), 10), b);
    }

    fn sample() -> SampleInstance {
        let slice = Array3::from_shape_fn((8, 10, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f32);
        let mask = Array2::from_shape_fn((8, 10), |(y, x)| (3..7).contains(&y) && (2..5).contains(&x));
        SampleInstance {
            slice,
            mask,
            bbox: BoundingBox::new(2.0, 3.0, 5.0, 7.0).unwrap(),
            modality: ModalityId { index: 0, name: "CT".into() },
        }
    }

    #[test]
    fn flips_are_consistent_involutions() {
        let s = sample();
        let h = flip_horizontal(&s);
        assert_eq!(crate::datamodel::tight_box(h.mask.view()), Some((5, 3, 8, 7)));
        assert_eq!(h.bbox.to_array(), [5.0, 3.0, 8.0, 7.0]);
        assert_eq!(h.slice[[0, 0, 0]], s.slice[[0, 9, 0]]);
        assert_eq!(flip_horizontal(&h), s);
        assert_eq!(flip_vertical(&flip_vertical(&s)), s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(s.clone(), &mut rng, 0.0), s);
    }
}
