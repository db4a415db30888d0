//! Optimization loop, full-image inference, evaluation and density dumps.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::backbone::Model;
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::TrainConfig;
use crate::data::{augment, epoch_order, AnnotatedImage, AugmentationConfig};
use crate::error::{Error, Result};
use crate::groundtruth::{make_attention_gt, make_density_gt, DensityMap, DEFAULT_ATTENTION_THRESHOLD};
use crate::losses::{loss_total, LossConfig};
use crate::metrics::EvalReport;
use crate::optim::Adam;
use crate::tensor::{Element, Tensor};

pub const DUMP_MAGIC: &[u8; 5] = b"DMAP1";
pub const STEP_LOG: &str = "loss_log.csv";
pub const EPOCH_LOG: &str = "epoch_log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";

/// Loss component values of one image or one batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub density: f64,
    pub relative: f64,
    pub attention: Option<f64>,
    pub importance: Option<f64>,
}

impl LossValues {
    /// Fails on the first non-finite component, checked in the order
    /// density, relative, attention, importance, total.
    pub fn check_finite(&self) -> Result<()> {
        let named = [
            ("density", Some(self.density)),
            ("relative", Some(self.relative)),
            ("attention", self.attention),
            ("importance", self.importance),
            ("total", Some(self.total)),
        ];
        for (component, v) in named {
            if let Some(value) = v.filter(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: component.into(),
                    value,
                });
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, other: &LossValues, weight: f64) {
        let add = |a: Option<f64>, b: Option<f64>| b.map(|b| a.unwrap_or(0.0) + weight * b);
        self.total += weight * other.total;
        self.density += weight * other.density;
        self.relative += weight * other.relative;
        self.attention = add(self.attention, other.attention);
        self.importance = add(self.importance, other.importance);
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based epoch.
    pub epoch: usize,
    /// 1-based optimizer step.
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossValues,
    /// Mean absolute count error of the final output over the batch.
    pub batch_mae: f64,
}

/// Supervision for one training crop.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub density: Tensor<T>,
    pub mask: Tensor<T>,
    pub count: usize,
}

pub fn prepare_sample<T: Element>(item: &AnnotatedImage, sigma: f64) -> Result<Sample<T>> {
    let (h, w) = (item.height(), item.width());
    let gt = make_density_gt(&item.annotation()?, sigma)?;
    let mask = make_attention_gt(&gt, DEFAULT_ATTENTION_THRESHOLD)?;
    Ok(Sample {
        image: item.image.cast(),
        density: gt.values().cast().reshape(&[1, h, w])?,
        mask: mask.values().cast().reshape(&[1, h, w])?,
        count: item.count(),
    })
}

/// Forward and backward pass of one sample. Returns the loss values, the
/// gradient of the total loss for every parameter and the predicted count.
pub fn sample_gradients<T: Element>(
    model: &Model<T>,
    sample: &Sample<T>,
    loss_cfg: LossConfig,
) -> Result<(LossValues, Vec<Vec<T>>, f64)> {
    let mut tape = Tape::new();
    let p = model.register(&mut tape);
    let x = tape.constant(sample.image.clone());
    let out = model.forward(&mut tape, &p, x)?;
    let gt = tape.constant(sample.density.clone());
    let mask = out.gating.as_ref().and_then(|g| g.attention).map(|_| tape.constant(sample.mask.clone()));
    let parts = loss_total(&mut tape, &out.experts, out.gating.as_ref(), gt, mask, loss_cfg)?;
    let value = |v| tape.item(v).as_f64();
    let loss = LossValues {
        total: value(parts.total),
        density: value(parts.density),
        relative: value(parts.relative),
        attention: parts.attention.map(value),
        importance: parts.importance.map(value),
    };
    loss.check_finite()?;
    let pred_count = tape.value(out.experts.final_output).sum().as_f64();
    tape.backward(parts.total)?;
    let grads = p
        .iter()
        .zip(model.params())
        .map(|(&v, param)| {
            tape.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); param.value.numel()])
        })
        .collect();
    Ok((loss, grads, pred_count))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_F42D_4C95_7F2D);
    rng.set_stream(stream);
    rng
}

/// Model, optimizer and position in the deterministic batch stream.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    /// 0-based epoch of the next batch.
    pub epoch: usize,
    /// Next batch within `epoch`.
    pub batch: usize,
}

impl<T: Element> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != T::BITS {
            return Err(Error::Config {
                key: "precision".into(),
                msg: format!("trainer runs at {} bits", T::BITS),
            });
        }
        let model = Model::new(config.backbone(), config.seed)?;
        let adam = Adam::new(model.params());
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            batch: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let mut t = Self::new(ck.header.config.clone())?;
        ck.restore_into(t.model.params_mut())?;
        t.adam = ck.adam.clone();
        t.epoch = ck.header.epoch;
        t.batch = ck.header.batch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            header: CheckpointHeader {
                config: self.config.clone(),
                step: self.adam.step,
                epoch: self.epoch,
                batch: self.batch,
                precision: T::BITS,
            },
            params: self.model.params().to_vec(),
            adam: self.adam.clone(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.adam.step
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || (self.config.max_steps > 0 && self.adam.step >= self.config.max_steps as u64)
    }

    fn batches_per_epoch(&self, len: usize) -> usize {
        len.div_ceil(self.config.batch_size)
    }

    /// Runs the next batch and advances the position.
    pub fn step(&mut self, dataset: &[AnnotatedImage]) -> Result<StepRecord> {
        if dataset.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let cfg = &self.config;
        let order = epoch_order(dataset.len(), cfg.seed, self.epoch as u64);
        let start = self.batch * cfg.batch_size;
        let indices = &order[start..(start + cfg.batch_size).min(order.len())];
        let aug = AugmentationConfig {
            crop_size: cfg.crop,
            hflip_prob: cfg.hflip_prob,
            seed: cfg.seed,
        };
        let epoch = self.epoch as u64;
        let results: Vec<(LossValues, Vec<Vec<T>>, f64, usize)> = indices
            .par_iter()
            .map(|&i| {
                let mut rng = stream_rng(cfg.seed, (epoch << 32) | i as u64);
                let item = augment(&dataset[i], &aug, &mut rng)?;
                let sample = prepare_sample::<T>(&item, cfg.sigma)?;
                let (loss, grads, pred) = sample_gradients(&self.model, &sample, cfg.loss_config())?;
                Ok((loss, grads, pred, sample.count))
            })
            .collect::<Result<_>>()?;

        let weight = 1.0 / results.len() as f64;
        let mut loss = LossValues::default();
        let mut grads: Vec<Vec<f64>> = self.model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let mut abs_err = 0.0;
        for (l, g, pred, count) in &results {
            loss.accumulate(l, weight);
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, &x) in acc.iter_mut().zip(gi) {
                    *a += x.as_f64();
                }
            }
            abs_err += (pred - *count as f64).abs();
        }
        let grads: Vec<Vec<T>> = grads
            .into_iter()
            .map(|g| g.into_iter().map(|x| T::of(x * weight)).collect())
            .collect();

        let lr = self.config.lr_at(self.epoch + 1);
        self.adam.update(self.model.params_mut(), &grads, lr)?;
        let record = StepRecord {
            epoch: self.epoch + 1,
            step: self.adam.step,
            lr,
            loss,
            batch_mae: abs_err * weight,
        };
        self.batch += 1;
        if self.batch >= self.batches_per_epoch(dataset.len()) {
            self.batch = 0;
            self.epoch += 1;
        }
        Ok(record)
    }

    /// Trains until the epoch or step budget is exhausted. With an output
    /// directory, appends to the step and epoch logs and writes checkpoints.
    pub fn run(
        &mut self,
        dataset: &[AnnotatedImage],
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        let mut logs = match out {
            Some(dir) => Some(Logs::open(dir)?),
            None => None,
        };
        let mut records = Vec::new();
        let mut epoch_records: Vec<StepRecord> = Vec::new();
        while !self.finished() {
            let record = self.step(dataset)?;
            on_step(&record);
            if let Some(l) = logs.as_mut() {
                l.steps.serialize(StepRow::from(&record))?;
            }
            epoch_records.push(record.clone());
            records.push(record);
            let epoch_done = self.batch == 0;
            if epoch_done || self.finished() {
                if let Some(l) = logs.as_mut() {
                    l.epochs.serialize(StepRow::epoch_mean(&epoch_records))?;
                    l.flush()?;
                }
                epoch_records.clear();
            }
            if let (Some(dir), true) = (out, epoch_done && self.config.save_every > 0) {
                if self.epoch.is_multiple_of(self.config.save_every) {
                    self.checkpoint().save(&dir.join(format!("checkpoint_epoch{:04}.bin", self.epoch)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(records)
    }
}

#[derive(Serialize)]
struct StepRow {
    epoch: usize,
    step: u64,
    lr: f64,
    total: f64,
    density: f64,
    relative: f64,
    attention: Option<f64>,
    importance: Option<f64>,
    batch_mae: f64,
}

impl From<&StepRecord> for StepRow {
    fn from(r: &StepRecord) -> Self {
        Self {
            epoch: r.epoch,
            step: r.step,
            lr: r.lr,
            total: r.loss.total,
            density: r.loss.density,
            relative: r.loss.relative,
            attention: r.loss.attention,
            importance: r.loss.importance,
            batch_mae: r.batch_mae,
        }
    }
}

impl StepRow {
    fn epoch_mean(records: &[StepRecord]) -> Self {
        let last = records.last().expect("epoch has at least one step");
        let w = 1.0 / records.len() as f64;
        let mut loss = LossValues::default();
        records.iter().for_each(|r| loss.accumulate(&r.loss, w));
        Self {
            epoch: last.epoch,
            step: last.step,
            lr: last.lr,
            total: loss.total,
            density: loss.density,
            relative: loss.relative,
            attention: loss.attention,
            importance: loss.importance,
            batch_mae: records.iter().map(|r| r.batch_mae).sum::<f64>() * w,
        }
    }
}

struct Logs {
    steps: csv::Writer<fs::File>,
    epochs: csv::Writer<fs::File>,
    paths: [PathBuf; 2],
}

impl Logs {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<csv::Writer<fs::File>> {
            let path = dir.join(name);
            let fresh = !path.exists();
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
        };
        Ok(Self {
            steps: open(STEP_LOG)?,
            epochs: open(EPOCH_LOG)?,
            paths: [dir.join(STEP_LOG), dir.join(EPOCH_LOG)],
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.steps.flush().map_err(|e| Error::io(&self.paths[0], e))?;
        self.epochs.flush().map_err(|e| Error::io(&self.paths[1], e))
    }
}

/// Pads `[C,H,W]` on the bottom and right by reflection (edge pixel not
/// repeated) so both extents become multiples of `multiple`.
pub fn reflect_pad(image: &Tensor<f32>, multiple: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = image.chw()?;
    let (ph, pw) = (h.next_multiple_of(multiple), w.next_multiple_of(multiple));
    let reflect = |i: usize, n: usize| {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    let src = image.data();
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for r in 0..ph {
            let row = (ch * h + reflect(r, h)) * w;
            data.extend((0..pw).map(|col| src[row + reflect(col, w)]));
        }
    }
    Tensor::new(&[c, ph, pw], data)
}

/// Final density output for a whole image: padded to the downsampling
/// multiple, then cropped back to `[H,W]`.
pub fn predict_density<T: Element>(model: &Model<T>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, h, w) = image.chw()?;
    let padded = reflect_pad(image, model.config().downsampling())?;
    let pw = padded.shape()[2];
    let mut tape = Tape::<T>::new();
    let p: Vec<_> = model.params().iter().map(|q| tape.constant(q.value.clone())).collect();
    let x = tape.constant(padded.cast());
    let out = model.forward(&mut tape, &p, x)?;
    let full = tape.value(out.experts.final_output).data();
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        data.extend(full[r * pw..r * pw + w].iter().map(|v| v.as_f64() as f32));
    }
    Tensor::new(&[h, w], data)
}

/// Full-image evaluation of the final output against Gaussian ground truth.
pub fn evaluate<T: Element>(model: &Model<T>, dataset: &[AnnotatedImage], sigma: f64) -> Result<EvalReport> {
    let maps: Vec<(DensityMap, DensityMap)> = dataset
        .par_iter()
        .map(|item| {
            let pred = DensityMap::from_tensor(&predict_density(model, &item.image)?)?;
            let gt = make_density_gt(&item.annotation()?, sigma)?;
            Ok((pred, gt))
        })
        .collect::<Result<_>>()?;
    let (preds, gts): (Vec<_>, Vec<_>) = maps.into_iter().unzip();
    let names: Vec<String> = dataset.iter().map(|d| d.name.clone()).collect();
    let counts: Vec<usize> = dataset.iter().map(AnnotatedImage::count).collect();
    EvalReport::from_maps(&names, &preds, &gts, &counts)
}

pub fn write_density_dump(path: &Path, density: &Tensor<f32>) -> Result<()> {
    let (h, w) = match density.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::shape(format!("density dump needs [H,W], got {s:?}"))),
    };
    let mut buf = DUMP_MAGIC.to_vec();
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in density.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_density_dump(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::arg(format!("{} is not a DMAP1 density dump", path.display()));
    if bytes.len() < 13 || &bytes[..5] != DUMP_MAGIC {
        return Err(bad());
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let body = &bytes[13..];
    if body.len() != h * w * 4 {
        return Err(bad());
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[h, w], data)
}
