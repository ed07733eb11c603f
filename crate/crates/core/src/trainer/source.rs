use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_encoder, check_finite, write_json, Augmentation, EpochRecord, LogRecord, ScheduleConfig, StepRecord, TrainLog};
use super::{derive_seed, STREAM_AUGMENT, STREAM_INIT, STREAM_ORDER};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{EncoderSpec, SourceModel};
use crate::synthfaces::{stream_rng, Dataset, Sample, Split};
use crate::tensorcore::{AdamConfig, AdamState, LrSchedule, Tape, Tensor};

/// Hyperparameters of identity-classifier pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub augmentation: Augmentation,
    pub seed: u64,
    pub encoder: EncoderSpec,
    /// Expected class count; checked against the manifest when set.
    pub num_classes: Option<usize>,
    pub eval_batch: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            augmentation: Augmentation::default(),
            seed: 0,
            encoder: EncoderSpec::default(),
            num_classes: None,
            eval_batch: 32,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("epochs and batch sizes must be ≥ 1"));
        }
        self.augmentation.validate()?;
        self.encoder.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub num_classes: usize,
    pub epochs: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub final_val_accuracy: Option<f64>,
    pub final_train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct SourceRun {
    pub model: SourceModel,
    pub log: TrainLog,
    pub summary: SourceSummary,
}

impl SourceRun {
    /// Write `source.ckpt`, `train_log.ndjson` and `summary.json`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        self.model.save(&out_dir.join("source.ckpt"))?;
        self.log.write(&out_dir.join("train_log.ndjson"))?;
        write_json(&out_dir.join("summary.json"), &self.summary)
    }
}

/// Fraction of `samples` whose arg-max logit is their identity.
pub fn accuracy(model: &SourceModel, samples: &[&Sample], batch: usize) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let logits = model.infer(&Tensor::stack(&images)?)?.logits;
        let c = model.num_classes;
        for (row, s) in logits.data().chunks_exact(c).zip(chunk) {
            // First maximum wins.
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            correct += usize::from(best == s.identity);
        }
    }
    Ok(Some(correct as f64 / samples.len() as f64))
}

/// Pretrain the face-identity classifier with cross-entropy on the training
/// split.
pub fn train_source(dataset: &Dataset, config: &SourceConfig) -> Result<SourceRun> {
    config.validate()?;
    let manifest = &dataset.manifest;
    let classes = manifest.num_classes;
    if let Some(c) = config.num_classes {
        if c != classes {
            return Err(Error::config(format!(
                "config expects {c} classes but the manifest has {classes}"
            )));
        }
    }
    check_encoder(&config.encoder, manifest.image_size)?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() {
        return Err(Error::usage("the manifest has no training samples"));
    }
    if let Some(s) = train.iter().chain(&val).find(|s| s.identity >= classes) {
        return Err(Error::format(format!("{} has identity {} ≥ {classes}", s.id, s.identity)));
    }

    let mut model = SourceModel::new(config.encoder.clone(), classes, derive_seed(&[config.seed, STREAM_INIT]))?;
    let mut adam = AdamState::new(&model.params, config.adam);
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    // The rate decays once per epoch.
    let schedule = LrSchedule {
        initial_lr: config.schedule.initial_lr,
        total_steps: config.epochs as u64,
        power: config.schedule.power,
        end_lr: config.schedule.end_lr,
    };
    schedule.validate()?;
    let flip = dataset.flip();
    let mut log = TrainLog::default();
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(&[config.seed, STREAM_ORDER, epoch as u64]));
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut rng = stream_rng(&[config.seed, STREAM_AUGMENT, step]);
            let mut images = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = train[i];
                images.push(config.augmentation.apply(&s.image, &s.landmarks, flip, &mut rng)?.0);
                labels.push(s.identity);
            }
            let refs: Vec<&Tensor> = images.iter().collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(&refs)?);
            let (_, logits) = model.forward(&mut tape, x)?;
            let loss = losses::cross_entropy(&mut tape, logits, &labels)?;
            let value = tape.value(loss).item()?;
            check_finite("cross-entropy loss", value, step, epoch)?;
            let grads = tape.backward(loss)?;
            tape.accumulate(&grads, &mut model.params)?;
            let lr = schedule.lr_at(epoch as u64);
            adam.step(&mut model.params, lr as f32)?;
            step += 1;
            loss_sum += value as f64;
            log.records.push(LogRecord::Step(StepRecord {
                step,
                epoch,
                lr,
                l_r: None,
                l_cd: None,
                l_ed: None,
                l_ce: Some(value),
                total: value,
            }));
        }
        log.records.push(LogRecord::Epoch(EpochRecord {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            val_me: None,
            val_accuracy: accuracy(&model, &val, config.eval_batch)?,
        }));
    }

    let summary = SourceSummary {
        num_classes: classes,
        epochs: config.epochs,
        train_samples: train.len(),
        val_samples: val.len(),
        final_val_accuracy: log.epochs().last().and_then(|e| e.val_accuracy),
        final_train_accuracy: accuracy(&model, &train, config.eval_batch)?.unwrap_or(0.0),
    };
    Ok(SourceRun { model, log, summary })
}
