//! Training orchestration: source pretraining, target training for every
//! variant, and the multi-seed ablation.
//!
//! All randomness is drawn from streams keyed by `(seed, purpose, index)`,
//! so a run is bit-reproducible on one thread and independent of how other
//! runs are scheduled.

mod ablation;
mod source;
mod target;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{self, FlipSpec, LandmarkSet};
use crate::losses::EdReduction;
use crate::model::{DecoderSpec, EncoderSpec, TargetModel};
use crate::synthfaces::Sample;
use crate::tensorcore::{AdamConfig, Tensor};

pub use ablation::{run_ablation, AblationOptions, AblationRow, AblationTable, RunResult};
pub use source::{accuracy, train_source, SourceConfig, SourceRun, SourceSummary};
pub use target::{train_target, TargetRun, TargetSummary, TestMetrics};

/// Epoch budget of the ablation harness; single training runs default to
/// the full 150.
pub const ABLATION_EPOCHS: usize = 15;

// Stream tags for `stream_rng`.
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

/// Polynomial decay settings; the step count is derived from the run length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    pub power: f64,
    pub end_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            power: 0.9,
            end_lr: 0.0,
        }
    }
}

/// Landmark-aware flip and scale augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Scale factors are log-uniform in `[scale_min, scale_max]`.
    pub scale_min: f32,
    pub scale_max: f32,
    /// Draws before giving up on scaling a sample whose landmarks would
    /// leave the canvas.
    pub max_tries: usize,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            scale_min: 0.8,
            scale_max: 1.25,
            max_tries: 10,
        }
    }
}

impl Augmentation {
    pub const OFF: Augmentation = Augmentation {
        enabled: false,
        flip_prob: 0.0,
        scale_min: 1.0,
        scale_max: 1.0,
        max_tries: 0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::config(format!(
                "scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }

    /// Flip with probability `flip_prob`, then rescale about the centre by a
    /// log-uniform factor, redrawing when a landmark would leave the image.
    pub fn apply<R: Rng>(
        &self,
        image: &Tensor,
        landmarks: &LandmarkSet,
        flip: &FlipSpec,
        rng: &mut R,
    ) -> Result<(Tensor, LandmarkSet)> {
        if !self.enabled {
            return Ok((image.clone(), landmarks.clone()));
        }
        let (image, landmarks) = if rng.gen_bool(self.flip_prob) {
            heatmap::hflip(image, landmarks, flip)?
        } else {
            (image.clone(), landmarks.clone())
        };
        if self.scale_min == self.scale_max && self.scale_min == 1.0 {
            return Ok((image, landmarks));
        }
        let (lo, hi) = (self.scale_min.ln(), self.scale_max.ln());
        for _ in 0..self.max_tries {
            let factor = (lo + rng.gen::<f32>() * (hi - lo)).exp();
            if let Some(out) = heatmap::rescale(&image, &landmarks, factor)? {
                return Ok(out);
            }
        }
        Ok((image, landmarks))
    }
}

/// Hyperparameters of one target-model training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: crate::model::Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Weight `λ` of the regularizer; which regularizer is implied by the
    /// variant.
    pub lambda: f32,
    /// Softmax temperature `μ` of the classifier-output regularizer.
    pub mu: f32,
    pub ed_reduction: EdReduction,
    pub sigma: f32,
    pub augmentation: Augmentation,
    pub seed: u64,
    /// Freeze the retained classifier head of CTD-CD / CTD-Com targets.
    pub freeze_classifier: bool,
    pub decoder: DecoderSpec,
    /// Train on only the first `n` training samples (overfit checks).
    pub max_train_samples: Option<usize>,
    /// Images per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: crate::model::Variant::Ft,
            epochs: 150,
            batch_size: 2,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            lambda: 0.002,
            mu: 2.0,
            ed_reduction: EdReduction::Mean,
            sigma: heatmap::DEFAULT_SIGMA,
            augmentation: Augmentation::default(),
            seed: 0,
            freeze_classifier: false,
            decoder: DecoderSpec::default(),
            max_train_samples: None,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be ≥ 1"));
        }
        if self.max_train_samples == Some(0) {
            return Err(Error::config("max_train_samples must be ≥ 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("sigma must be positive"));
        }
        self.loss_weights().validate()?;
        self.augmentation.validate()?;
        self.decoder.validate()
    }

    pub fn loss_weights(&self) -> crate::losses::LossWeights {
        crate::losses::LossWeights {
            lambda: self.lambda,
            mu: self.mu,
            mode: self.variant.reg_mode(),
            ed_reduction: self.ed_reduction,
        }
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_r: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cd: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ed: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ce: Option<f32>,
    pub total: f32,
}

/// End-of-epoch validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_me: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Newline-delimited JSON training log. Records carry no wall-clock data,
/// so identical runs produce identical logs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Epoch(_) => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            LogRecord::Step(_) => None,
        })
    }

    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_ndjson()?.as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

/// Decode landmarks for `samples` with the target model, `batch` at a time.
pub fn predict_landmarks(model: &TargetModel, images: &[&Tensor], batch: usize) -> Result<Vec<LandmarkSet>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let maps = model.predict(&Tensor::stack(chunk)?)?;
        for i in 0..chunk.len() {
            out.push(heatmap::decode(&maps.index_outer(i)?)?.landmarks);
        }
    }
    Ok(out)
}

/// Mean error of the model's predictions on `samples` (input pixels).
pub(crate) fn samples_me(model: &TargetModel, samples: &[&Sample], batch: usize) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_landmarks(model, &images, batch)?;
    let truths: Vec<LandmarkSet> = samples.iter().map(|s| s.landmarks.clone()).collect();
    Ok(Some(crate::evalkit::mean_error(&preds, &truths)?.me))
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    rand::RngCore::next_u64(&mut crate::synthfaces::stream_rng(parts))
}

fn check_finite(what: &str, value: f32, step: u64, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "{what} became {value} at step {step} (epoch {epoch}); aborting"
        )))
    }
}

fn check_encoder(spec: &EncoderSpec, image_size: usize) -> Result<()> {
    spec.validate()?;
    if image_size % EncoderSpec::DOWNSAMPLE != 0 {
        return Err(Error::config(format!(
            "image size {image_size} is not divisible by {}",
            EncoderSpec::DOWNSAMPLE
        )));
    }
    Ok(())
}
