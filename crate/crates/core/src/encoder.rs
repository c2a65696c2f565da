//! Small CNN disease classifier: conv/relu/maxpool stages, global average
//! pooling and a linear head. Exposes the last feature maps for CAM and the
//! pooled vector for the caption decoder.

use serde::{Deserialize, Serialize};

use crate::dataset::{Modality, RetinalImage};
use crate::error::{Error, Result};
use crate::nn::functional::softmax;
use crate::nn::params::{xavier_uniform, Bound};
use crate::nn::{ModelCheckpoint, ParamSet, Tape, Tensor, Var};
use crate::rng;

pub const FC_W: &str = "encoder.fc.weight";
pub const FC_B: &str = "encoder.fc.bias";
pub const META_CONFIG: &str = "encoder.config";
pub const META_CLASSES: &str = "encoder.classes";

pub fn conv_weight_name(stage: usize) -> String {
    format!("encoder.conv{stage}.weight")
}

pub fn conv_bias_name(stage: usize) -> String {
    format!("encoder.conv{stage}.bias")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Max-pool window (and stride); 1 disables pooling.
    pub pool: usize,
}

impl ConvStage {
    pub const fn same3x3(out_channels: usize) -> Self {
        Self { out_channels, kernel: 3, stride: 1, pad: 1, pool: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub image_side: usize,
    pub stages: Vec<ConvStage>,
    pub num_classes: usize,
}

impl EncoderConfig {
    pub fn new(input_channels: usize, num_classes: usize) -> Self {
        Self {
            input_channels,
            image_side: 32,
            stages: vec![ConvStage::same3x3(8), ConvStage::same3x3(16), ConvStage::same3x3(32)],
            num_classes,
        }
    }

    /// Channels of the last stage (length of the pooled feature).
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// Spatial side after every stage, or an error if it collapses.
    pub fn output_side(&self) -> Result<usize> {
        let mut side = self.image_side;
        for (i, s) in self.stages.iter().enumerate() {
            if s.kernel > side + 2 * s.pad {
                return Err(Error::invalid("encoder config", format!("stage {i}: kernel larger than input")));
            }
            side = (side + 2 * s.pad - s.kernel) / s.stride + 1;
            if s.pool > side {
                return Err(Error::invalid("encoder config", format!("stage {i}: pool window larger than input")));
            }
            side = (side - s.pool) / s.pool + 1;
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("encoder config", "need at least 2 classes"));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::invalid("encoder config", "input_channels must be 1 or 3"));
        }
        if self.stages.is_empty() {
            return Err(Error::invalid("encoder config", "need at least one conv stage"));
        }
        if self.stages.iter().any(|s| s.out_channels == 0 || s.kernel == 0 || s.stride == 0 || s.pool == 0) {
            return Err(Error::invalid("encoder config", "stage sizes must be positive"));
        }
        self.output_side().map(|_| ())
    }

    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = self.input_channels;
        for (i, s) in self.stages.iter().enumerate() {
            out.push((conv_weight_name(i), vec![s.out_channels, in_ch, s.kernel, s.kernel]));
            out.push((conv_bias_name(i), vec![s.out_channels]));
            in_ch = s.out_channels;
        }
        out.push((FC_W.to_string(), vec![self.num_classes, in_ch]));
        out.push((FC_B.to_string(), vec![self.num_classes]));
        out
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        for (name, shape) in self.expected_shapes() {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("'{name}' has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

pub fn init_encoder_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut r = rng::seeded(seed);
    let mut ps = ParamSet::new();
    for (name, shape) in cfg.expected_shapes() {
        let t = if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else if shape.len() == 4 {
            let fan_in = shape[1] * shape[2] * shape[3];
            let fan_out = shape[0] * shape[2] * shape[3];
            xavier_uniform(&mut r, &shape, fan_in, fan_out)
        } else {
            xavier_uniform(&mut r, &shape, shape[1], shape[0])
        };
        ps.insert(name, t);
    }
    Ok(ps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Last-stage activations `K × h × w` (after relu and pooling).
    pub feature_maps: Tensor,
    /// Spatial mean of each feature map.
    pub pooled: Tensor,
    pub logits: Tensor,
}

/// Tape variables of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub feature_maps: Var,
    pub pooled: Var,
    pub logits: Var,
}

fn in_layer(layer: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{op} in layer {layer}")),
        other => other,
    }
}

/// Forward pass recorded on `tape`.
pub fn record_encoder(tape: &mut Tape, b: &Bound, cfg: &EncoderConfig, input: Var) -> Result<EncoderVars> {
    let mut x = input;
    for (i, s) in cfg.stages.iter().enumerate() {
        let layer = format!("conv{i}");
        x = tape
            .conv2d(x, b.get(&conv_weight_name(i))?, b.get(&conv_bias_name(i))?, s.stride, s.pad)
            .map_err(in_layer(&layer))?;
        x = tape.relu(x).map_err(in_layer(&layer))?;
        if s.pool > 1 {
            x = tape.maxpool2d(x, s.pool, s.pool).map_err(in_layer(&layer))?;
        }
    }
    let pooled = tape.global_avg_pool(x).map_err(in_layer("gap"))?;
    let logits = tape.linear(pooled, b.get(FC_W)?, Some(b.get(FC_B)?)).map_err(in_layer("fc"))?;
    Ok(EncoderVars { feature_maps: x, pooled, logits })
}

/// Resizes and converts an image to the `C × S × S` input tensor the config
/// expects. Gray images are replicated for 3-channel configs; color images
/// are rejected by 1-channel configs.
pub fn image_tensor(image: &RetinalImage, cfg: &EncoderConfig) -> Result<Tensor> {
    let converted;
    let img = match (image.channels(), cfg.input_channels) {
        (a, b) if a == b => image,
        (1, 3) => {
            converted = image.clone().with_modality(Modality::Cfp);
            &converted
        }
        (a, b) => {
            return Err(Error::shape("encode_image", format!("{a}-channel image given to a {b}-channel encoder")));
        }
    };
    let side = cfg.image_side;
    Tensor::new(vec![cfg.input_channels, side, side], img.resized_planar(side, side))
}

/// An encoder configuration bound to its weights and class names.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub classes: Vec<String>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, params: ParamSet, classes: Vec<String>) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        if classes.len() != config.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} class names for a {}-class encoder",
                classes.len(),
                config.num_classes
            )));
        }
        Ok(Self { config, params: params.with_prefix("encoder."), classes })
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        Self::new(ck.meta(META_CONFIG)?, ck.params_with_prefix("encoder."), ck.meta(META_CLASSES)?)
    }

    /// Writes parameters and metadata into `ck`.
    pub fn store(&self, ck: &mut ModelCheckpoint) -> Result<()> {
        ck.merge_params(&self.params);
        ck.set_meta(META_CONFIG, &self.config)?;
        ck.set_meta(META_CLASSES, &self.classes)
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        let mut ck = ModelCheckpoint::new();
        self.store(&mut ck)?;
        Ok(ck)
    }

    pub fn encode_tensor(&self, input: &Tensor) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let v = record_encoder(&mut tape, &b, &self.config, x)?;
        Ok(EncoderOutput {
            feature_maps: tape.value(v.feature_maps).clone(),
            pooled: tape.value(v.pooled).clone(),
            logits: tape.value(v.logits).clone(),
        })
    }

    pub fn encode(&self, image: &RetinalImage) -> Result<EncoderOutput> {
        self.encode_tensor(&image_tensor(image, &self.config)?)
    }

    pub fn classifier_weights(&self) -> Result<&Tensor> {
        self.params.get(FC_W)
    }

    pub fn classifier_bias(&self) -> Result<&Tensor> {
        self.params.get(FC_B)
    }
}

pub fn encode_image(image: &RetinalImage, checkpoint: &ModelCheckpoint) -> Result<EncoderOutput> {
    Encoder::from_checkpoint(checkpoint)?.encode(image)
}

/// Top-`k` `(class, probability)` pairs: probability descending, ties by
/// ascending class id.
pub fn predict_topk(logits: &Tensor, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > logits.len() {
        return Err(Error::invalid("predict_topk", format!("k={k} outside 1..={}", logits.len())));
    }
    let probs = softmax(logits.data());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|c| (c, probs[c])).collect())
}
