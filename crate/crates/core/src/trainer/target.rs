use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_encoder, check_finite, derive_seed, predict_landmarks, samples_me, write_json};
use super::{EpochRecord, LogRecord, StepRecord, TrainConfig, TrainLog};
use super::{STREAM_AUGMENT, STREAM_INIT, STREAM_ORDER};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalOptions, EvalReport};
use crate::heatmap::{self, LandmarkSet};
use crate::losses::{self, RegMode};
use crate::model::{transfer_init, SourceModel, TargetModel, Variant};
use crate::synthfaces::{stream_rng, Dataset, Split};
use crate::tensorcore::{AdamState, LrSchedule, ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub me: f64,
    pub sd: f64,
    pub fr: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub lambda: f32,
    pub train_samples: usize,
    /// Epoch whose parameters were kept (lowest validation ME).
    pub best_epoch: usize,
    pub best_val_me: Option<f64>,
    /// Training-set ME of the final (not the selected) parameters.
    pub final_train_me: f64,
    /// Test-split metrics of the selected parameters, input pixels.
    pub test: Option<TestMetrics>,
}

#[derive(Clone, Debug)]
pub struct TargetRun {
    /// The selected (best validation ME) model.
    pub model: TargetModel,
    pub log: TrainLog,
    pub summary: TargetSummary,
    pub test_report: Option<EvalReport>,
}

impl TargetRun {
    /// Write `target.ckpt`, `train_log.ndjson`, `summary.json` and, when a
    /// test split exists, `test_report.json` + `test_ced.csv`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        self.model.save(&out_dir.join("target.ckpt"))?;
        self.write_logs(out_dir)
    }

    /// Everything [`write`](Self::write) produces except the checkpoint.
    pub fn write_logs(&self, out_dir: &Path) -> Result<()> {
        self.log.write(&out_dir.join("train_log.ndjson"))?;
        write_json(&out_dir.join("summary.json"), &self.summary)?;
        if let Some(report) = &self.test_report {
            evalkit::write_report(report, &out_dir.join("test_report.json"), &out_dir.join("test_ced.csv"))?;
        }
        Ok(())
    }
}

fn initial_model(dataset: &Dataset, source: Option<&SourceModel>, config: &TrainConfig) -> Result<TargetModel> {
    let variant = config.variant;
    let decoder_seed = derive_seed(&[config.seed, STREAM_INIT]);
    match source {
        Some(src) => transfer_init(src, variant, &config.decoder, decoder_seed, config.freeze_classifier),
        None if variant.needs_source_outputs() => Err(Error::usage(format!(
            "variant {variant} needs a source checkpoint"
        ))),
        None => {
            // No pretrained source: train from a random encoder.
            let classes = dataset.manifest.num_classes.max(2);
            let scratch = SourceModel::new(Default::default(), classes, derive_seed(&[config.seed, STREAM_INIT, 1]))?;
            transfer_init(&scratch, variant, &config.decoder, decoder_seed, config.freeze_classifier)
        }
    }
}

/// Train a landmark detector for `config.variant`.
///
/// Every step augments the batch once; the same augmented images feed the
/// target and (in inference mode) the source. Parameters with the lowest
/// validation ME are kept.
pub fn train_target(dataset: &Dataset, source: Option<&SourceModel>, config: &TrainConfig) -> Result<TargetRun> {
    config.validate()?;
    let manifest = &dataset.manifest;
    let weights = config.loss_weights();
    let mut model = initial_model(dataset, source, config)?;
    check_encoder(&model.encoder, manifest.image_size)?;
    if manifest.num_landmarks != config.decoder.num_landmarks {
        return Err(Error::config(format!(
            "manifest has {} landmarks but the decoder predicts {}",
            manifest.num_landmarks, config.decoder.num_landmarks
        )));
    }
    let source = source.filter(|_| weights.mode != RegMode::None);

    let mut train = dataset.split(Split::Train);
    if let Some(n) = config.max_train_samples {
        train.truncate(n);
    }
    if train.is_empty() {
        return Err(Error::usage("the manifest has no training samples"));
    }
    let val = dataset.split(Split::Val);
    let test = dataset.split(Split::Test);
    let size = manifest.image_size;

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
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(&[config.seed, STREAM_ORDER, epoch as u64]));
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut rng = stream_rng(&[config.seed, STREAM_AUGMENT, step]);
            let mut images = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = train[i];
                let (image, lm) = config.augmentation.apply(&s.image, &s.landmarks, flip, &mut rng)?;
                targets.push(heatmap::encode(&lm, size, size, config.sigma)?.maps);
                images.push(image);
            }
            let images = Tensor::stack(&images.iter().collect::<Vec<_>>())?;
            let targets = Tensor::stack(&targets.iter().collect::<Vec<_>>())?;
            let source_out = source.map(|s| s.infer(&images)).transpose()?;

            let mut tape = Tape::new();
            let x = tape.constant(images);
            let fwd = model.forward(&mut tape, x)?;
            let l_r = losses::regression(&mut tape, fwd.heatmaps, &targets)?;
            let mut reg: Option<crate::tensorcore::Var> = None;
            let (mut l_cd, mut l_ed) = (None, None);
            if let Some(src) = &source_out {
                if weights.mode.uses_cd() {
                    let logits = fwd
                        .logits
                        .ok_or_else(|| Error::config("classifier regularizer without a classifier head"))?;
                    let s = tape.constant(src.logits.clone());
                    let v = losses::cd(&mut tape, s, logits, weights.mu)?;
                    l_cd = Some(tape.value(v).item()?);
                    reg = Some(v);
                }
                if weights.mode.uses_ed() {
                    let s = tape.constant(src.embedding.clone());
                    let (v, _) = losses::ed(&mut tape, s, fwd.features.embedding, weights.ed_reduction)?;
                    l_ed = Some(tape.value(v).item()?);
                    reg = Some(match reg {
                        Some(r) => tape.add(r, v)?,
                        None => v,
                    });
                }
            }
            let total = match reg {
                Some(r) => {
                    let scaled = tape.scale(r, weights.lambda);
                    tape.add(l_r, scaled)?
                }
                None => l_r,
            };
            let l_r_value = tape.value(l_r).item()?;
            let total_value = tape.value(total).item()?;
            check_finite("training loss", total_value, step, epoch)?;

            let grads = tape.backward(total)?;
            tape.accumulate(&grads, &mut model.params)?;
            let lr = schedule.lr_at(epoch as u64);
            adam.step(&mut model.params, lr as f32)?;
            step += 1;
            loss_sum += total_value as f64;
            log.records.push(LogRecord::Step(StepRecord {
                step,
                epoch,
                lr,
                l_r: Some(l_r_value),
                l_cd,
                l_ed,
                l_ce: None,
                total: total_value,
            }));
        }

        let val_me = samples_me(&model, &val, config.eval_batch)?;
        log.records.push(LogRecord::Epoch(EpochRecord {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            val_me,
            val_accuracy: None,
        }));
        let improved = match (&best, val_me) {
            (None, _) => true,
            (Some((b, _, _)), Some(me)) => me < *b,
            (Some(_), None) => true,
        };
        if improved {
            best = Some((val_me.unwrap_or(f64::INFINITY), epoch, model.params.clone()));
        }
    }

    let final_train_me = samples_me(&model, &train, config.eval_batch)?.unwrap_or(0.0);
    let (best_val_me, best_epoch) = match best {
        Some((me, epoch, params)) => {
            model.params = params;
            (me.is_finite().then_some(me), epoch)
        }
        None => (None, config.epochs - 1),
    };

    let test_report = if test.is_empty() {
        None
    } else {
        let images: Vec<&Tensor> = test.iter().map(|s| &s.image).collect();
        let preds = predict_landmarks(&model, &images, config.eval_batch)?;
        let truths: Vec<LandmarkSet> = test.iter().map(|s| s.landmarks.clone()).collect();
        let ids: Vec<String> = test.iter().map(|s| s.id.clone()).collect();
        Some(evalkit::evaluate(&ids, &preds, &truths, &EvalOptions::default())?)
    };
    let summary = TargetSummary {
        variant: config.variant,
        seed: config.seed,
        epochs: config.epochs,
        lambda: config.lambda,
        train_samples: train.len(),
        best_epoch,
        best_val_me,
        final_train_me,
        test: test_report.as_ref().map(|r| TestMetrics {
            me: r.me,
            sd: r.sd,
            fr: r.fr,
            auc: r.auc,
        }),
    };
    Ok(TargetRun {
        model,
        log,
        summary,
        test_report,
    })
}
