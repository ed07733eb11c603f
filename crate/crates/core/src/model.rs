//! Network definitions and source → target transfer.
//!
//! The encoder is a small residual CNN with 1/32 total downsampling: a 7×7
//! stride-2 stem and four stride-2 stages of two 3×3 convolutions with a
//! projected skip. The decoder is three 4×4 stride-2 transposed convolutions
//! (ReLU between) followed by a 1×1 convolution to `K` heatmap channels,
//! bringing the 1/32 feature map back to 1/4 of the input resolution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::losses::RegMode;
use crate::tensorcore::{checkpoint, he_uniform, ParamStore, Tape, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const CLASSIFIER_PREFIX: &str = "classifier.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    /// Output channels of the four residual stages; the last is `d`.
    pub widths: Vec<usize>,
    pub stem_width: usize,
    pub stem_kernel: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            stem_width: 16,
            stem_kernel: 7,
        }
    }
}

impl EncoderSpec {
    pub const DOWNSAMPLE: usize = 32;

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths.contains(&0) || self.stem_width == 0 {
            return Err(Error::config(format!(
                "encoder needs four non-empty stages (1/32 downsampling), got {:?}",
                self.widths
            )));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::config("stem kernel must be odd"));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    fn stage_inputs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut cin = self.stem_width;
        self.widths.iter().enumerate().map(move |(i, &cout)| {
            let r = (i + 1, cin, cout);
            cin = cout;
            r
        })
    }

    /// Name prefix of the last residual stage.
    pub fn last_stage_prefix(&self) -> String {
        format!("{ENCODER_PREFIX}stage{}.", self.widths.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub width: usize,
    pub layers: usize,
    pub kernel: usize,
    pub num_landmarks: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            width: 256,
            layers: 3,
            kernel: 4,
            num_landmarks: 14,
        }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers != 3 || self.kernel != 4 || self.width == 0 || self.num_landmarks == 0 {
            return Err(Error::config(format!(
                "decoder must be three 4×4 stride-2 layers with positive width and K, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Transfer-learning variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Feature extraction: encoder frozen.
    #[serde(rename = "FE")]
    Fe,
    /// Fine-tuning parts: only the last encoder stage trainable.
    #[serde(rename = "FTP")]
    Ftp,
    /// Full fine-tuning.
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "CTD-CD")]
    CtdCd,
    #[serde(rename = "CTD-ED")]
    CtdEd,
    #[serde(rename = "CTD-Com")]
    CtdCom,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Fe,
        Variant::Ftp,
        Variant::Ft,
        Variant::CtdCd,
        Variant::CtdEd,
        Variant::CtdCom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fe => "FE",
            Variant::Ftp => "FTP",
            Variant::Ft => "FT",
            Variant::CtdCd => "CTD-CD",
            Variant::CtdEd => "CTD-ED",
            Variant::CtdCom => "CTD-Com",
        }
    }

    pub fn reg_mode(self) -> RegMode {
        match self {
            Variant::Fe | Variant::Ftp | Variant::Ft => RegMode::None,
            Variant::CtdCd => RegMode::Cd,
            Variant::CtdEd => RegMode::Ed,
            Variant::CtdCom => RegMode::Com,
        }
    }

    /// Whether the target keeps a copy of the classifier head.
    pub fn keeps_classifier(self) -> bool {
        self.reg_mode().uses_cd()
    }

    /// Whether training needs the source network at every step.
    pub fn needs_source_outputs(self) -> bool {
        self.reg_mode() != RegMode::None
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::usage(format!("unknown variant `{s}` (expected FE, FTP, FT, CTD-CD, CTD-ED, CTD-Com)")))
    }
}

fn add_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    k: usize,
    cin: usize,
) -> Result<()> {
    store.insert(format!("{name}.w"), he_uniform(&[cout, k, k, cin], k * k * cin, rng), true)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]), true)
}

fn add_encoder(store: &mut ParamStore, spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<()> {
    spec.validate()?;
    add_conv(store, rng, "encoder.stem", spec.stem_width, spec.stem_kernel, 3)?;
    for (i, cin, cout) in spec.stage_inputs() {
        add_conv(store, rng, &format!("encoder.stage{i}.conv1"), cout, 3, cin)?;
        add_conv(store, rng, &format!("encoder.stage{i}.conv2"), cout, 3, cout)?;
        add_conv(store, rng, &format!("encoder.stage{i}.proj"), cout, 1, cin)?;
    }
    Ok(())
}

fn add_decoder(store: &mut ParamStore, spec: &DecoderSpec, input_channels: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    spec.validate()?;
    let mut cin = input_channels;
    for j in 1..=spec.layers {
        let k = spec.kernel;
        // Each output pixel of a stride-2 transposed conv sees k²/4 taps per
        // input channel.
        let fan_in = cin * k * k / 4;
        store.insert(
            format!("decoder.deconv{j}.w"),
            he_uniform(&[cin, k, k, spec.width], fan_in, rng),
            true,
        )?;
        store.insert(format!("decoder.deconv{j}.b"), Tensor::zeros(&[spec.width]), true)?;
        cin = spec.width;
    }
    add_conv(store, rng, "decoder.head", spec.num_landmarks, 1, spec.width)
}

fn add_classifier(store: &mut ParamStore, d: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert("classifier.w", he_uniform(&[classes, d], d, rng), true)?;
    store.insert("classifier.b", Tensor::zeros(&[classes]), true)
}

/// Encoder outputs: the 1/32-resolution map and its global average.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub spatial: Var,
    pub embedding: Var,
}

fn conv(tape: &mut Tape, params: &ParamStore, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    tape.conv2d(x, w, b, stride, pad)
}

/// Run the encoder on an `[N, H, W, 3]` batch.
pub fn encode_features(tape: &mut Tape, params: &ParamStore, spec: &EncoderSpec, images: Var) -> Result<Features> {
    let shape = tape.value(images).shape().to_vec();
    match shape.as_slice() {
        [_, h, w, 3] if h % EncoderSpec::DOWNSAMPLE == 0 && w % EncoderSpec::DOWNSAMPLE == 0 => {}
        _ => {
            return Err(Error::config(format!(
                "encoder input must be [N, H, W, 3] with H, W divisible by 32, got {shape:?}"
            )))
        }
    }
    let stem = conv(tape, params, "encoder.stem", images, 2, spec.stem_kernel / 2)?;
    let mut x = tape.relu(stem);
    for (i, _, _) in spec.stage_inputs() {
        let p = format!("encoder.stage{i}");
        let h = conv(tape, params, &format!("{p}.conv1"), x, 2, 1)?;
        let h = tape.relu(h);
        let h = conv(tape, params, &format!("{p}.conv2"), h, 1, 1)?;
        let skip = conv(tape, params, &format!("{p}.proj"), x, 2, 0)?;
        let sum = tape.add(h, skip)?;
        x = tape.relu(sum);
    }
    let embedding = tape.global_avg_pool(x)?;
    Ok(Features { spatial: x, embedding })
}

/// Heatmap logits `[N, H/4, W/4, K]` from the 1/32 feature map.
pub fn decode_heatmaps(tape: &mut Tape, params: &ParamStore, spec: &DecoderSpec, spatial: Var) -> Result<Var> {
    let mut x = spatial;
    for j in 1..=spec.layers {
        let w = tape.param(params, &format!("decoder.deconv{j}.w"))?;
        let b = tape.param(params, &format!("decoder.deconv{j}.b"))?;
        x = tape.deconv2d(x, w, b, 2, 1)?;
        x = tape.relu(x);
    }
    conv(tape, params, "decoder.head", x, 1, 0)
}

pub fn classify(tape: &mut Tape, params: &ParamStore, embedding: Var) -> Result<Var> {
    let w = tape.param(params, "classifier.w")?;
    let b = tape.param(params, "classifier.b")?;
    tape.dense(embedding, w, b)
}

/// Face-identity classifier `g ∘ f`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceModel {
    pub encoder: EncoderSpec,
    pub num_classes: usize,
    pub params: ParamStore,
}

/// Inference outputs of a model on one batch.
#[derive(Clone, Debug)]
pub struct SourceOutputs {
    pub logits: Tensor,
    pub embedding: Tensor,
}

impl SourceModel {
    pub fn new(encoder: EncoderSpec, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        add_encoder(&mut params, &encoder, &mut rng)?;
        add_classifier(&mut params, encoder.embedding_dim(), num_classes, &mut rng)?;
        Ok(Self {
            encoder,
            num_classes,
            params,
        })
    }

    /// Record the forward pass; returns encoder features and logits.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<(Features, Var)> {
        let feats = encode_features(tape, &self.params, &self.encoder, images)?;
        let logits = classify(tape, &self.params, feats.embedding)?;
        Ok((feats, logits))
    }

    /// Inference mode: no parameter is touched.
    pub fn infer(&self, images: &Tensor) -> Result<SourceOutputs> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let (feats, logits) = self.forward(&mut tape, x)?;
        Ok(SourceOutputs {
            logits: tape.value(logits).clone(),
            embedding: tape.value(feats.embedding).clone(),
        })
    }

    pub fn meta(&self) -> Value {
        json!({
            "kind": "source",
            "encoder": self.encoder,
            "num_classes": self.num_classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.meta(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        if ck.meta["kind"] != "source" {
            return Err(Error::format(format!("{} is not a source checkpoint", path.display())));
        }
        let encoder: EncoderSpec = serde_json::from_value(ck.meta["encoder"].clone())
            .map_err(|e| Error::format(format!("encoder spec: {e}")))?;
        let num_classes = ck.meta["num_classes"]
            .as_u64()
            .ok_or_else(|| Error::format("num_classes missing"))? as usize;
        Ok(Self {
            encoder,
            num_classes,
            params: ck.params,
        })
    }
}

/// Landmark detector `h ∘ f` with an optional retained classifier `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub variant: Variant,
    /// Class count of the retained classifier head, if any.
    pub num_classes: Option<usize>,
    pub params: ParamStore,
}

/// Output handles of a recorded target forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TargetForward {
    pub features: Features,
    pub heatmaps: Var,
    pub logits: Option<Var>,
}

impl TargetModel {
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<TargetForward> {
        let features = encode_features(tape, &self.params, &self.encoder, images)?;
        let heatmaps = decode_heatmaps(tape, &self.params, &self.decoder, features.spatial)?;
        let logits = match self.num_classes {
            Some(_) => Some(classify(tape, &self.params, features.embedding)?),
            None => None,
        };
        Ok(TargetForward {
            features,
            heatmaps,
            logits,
        })
    }

    /// Heatmap logits for a batch, without recording gradients.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let features = encode_features(&mut tape, &self.params, &self.encoder, x)?;
        let heatmaps = decode_heatmaps(&mut tape, &self.params, &self.decoder, features.spatial)?;
        Ok(tape.value(heatmaps).clone())
    }

    pub fn meta(&self) -> Value {
        json!({
            "kind": "target",
            "variant": self.variant,
            "encoder": self.encoder,
            "decoder": self.decoder,
            "num_classes": self.num_classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.meta(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        if ck.meta["kind"] != "target" {
            return Err(Error::format(format!("{} is not a target checkpoint", path.display())));
        }
        let field = |k: &str| -> Result<Value> { Ok(ck.meta[k].clone()) };
        let parse_err = |e: serde_json::Error| Error::format(format!("target checkpoint header: {e}"));
        Ok(Self {
            encoder: serde_json::from_value(field("encoder")?).map_err(parse_err)?,
            decoder: serde_json::from_value(field("decoder")?).map_err(parse_err)?,
            variant: serde_json::from_value(field("variant")?).map_err(parse_err)?,
            num_classes: serde_json::from_value(field("num_classes")?).map_err(parse_err)?,
            params: ck.params,
        })
    }
}

/// Build a target model from a trained source: the encoder is copied
/// verbatim, the decoder is freshly initialised from `seed`, and the
/// classifier is copied when the variant regularizes classifier outputs.
pub fn transfer_init(
    source: &SourceModel,
    variant: Variant,
    decoder: &DecoderSpec,
    seed: u64,
    freeze_classifier: bool,
) -> Result<TargetModel> {
    let mut params = ParamStore::new();
    let last_stage = source.encoder.last_stage_prefix();
    let mut encoder_entries = 0;
    for (name, entry) in source.params.iter() {
        if !name.starts_with(ENCODER_PREFIX) {
            continue;
        }
        let trainable = match variant {
            Variant::Fe => false,
            Variant::Ftp => name.starts_with(&last_stage),
            _ => true,
        };
        params.insert(name, entry.value.clone(), trainable)?;
        encoder_entries += 1;
    }
    if encoder_entries == 0 {
        return Err(Error::config("source model has no encoder parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_decoder(&mut params, decoder, source.encoder.embedding_dim(), &mut rng)?;
    let num_classes = if variant.keeps_classifier() {
        for name in ["classifier.w", "classifier.b"] {
            let entry = source.params.get(name).ok_or_else(|| {
                Error::config(format!("variant {variant} needs the source classifier but `{name}` is missing"))
            })?;
            params.insert(name, entry.value.clone(), !freeze_classifier)?;
        }
        Some(source.num_classes)
    } else {
        None
    };
    Ok(TargetModel {
        encoder: source.encoder.clone(),
        decoder: decoder.clone(),
        variant,
        num_classes,
        params,
    })
}
