use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{self, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::NetworkGeometry;
use crate::image::{ReconImage, TargetMask};
use crate::preprocess::{to_tensor, NormStats, RssTensor};
use crate::simulator::RssFrame;

/// Offset of the output squashing: predictions lie in `[EPS, 1 - EPS]`.
pub const OUTPUT_EPS: f64 = 1e-6;
/// Probability clamp of the loss.
pub const LOSS_CLAMP: f64 = 1e-6;

pub const ENC1_W: usize = 0;
pub const ENC1_B: usize = 1;
pub const ENC2_W: usize = 2;
pub const ENC2_B: usize = 3;
pub const FUSE_W: usize = 4;
pub const FUSE_B: usize = 5;
pub const ANC_W: usize = 6;
pub const ANC_B: usize = 7;
pub const ATTENTION: usize = 8;
pub const DEC1_W: usize = 9;
pub const DEC1_B: usize = 10;
pub const DEC2_W: usize = 11;
pub const DEC2_B: usize = 12;

pub const PARAM_NAMES: [&str; 13] = [
    "encoder.conv1.weight",
    "encoder.conv1.bias",
    "encoder.conv2.weight",
    "encoder.conv2.bias",
    "fusion.weight",
    "fusion.bias",
    "anc.linear.weight",
    "anc.linear.bias",
    "anc.attention",
    "decoder.conv1.weight",
    "decoder.conv1.bias",
    "decoder.conv2.weight",
    "decoder.conv2.bias",
];

/// Parameters that stay trainable during one-shot adaptation.
pub const ANC_LINEAR: [usize; 2] = [ANC_W, ANC_B];

/// Layer sizes. Each input channel has its own two-layer conv branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub nodes: usize,
    pub branch_width1: usize,
    pub branch_width2: usize,
    pub fused_width: usize,
    pub feature_side: usize,
    pub grid_px: usize,
    pub decoder_width: usize,
}

impl ModelConfig {
    pub fn for_geometry(geom: &NetworkGeometry) -> Self {
        Self {
            channels: geom.channels(),
            nodes: geom.node_count(),
            branch_width1: 8,
            branch_width2: 16,
            fused_width: 32,
            feature_side: 12,
            grid_px: geom.grid_px(),
            decoder_width: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.channels,
            self.nodes,
            self.branch_width1,
            self.branch_width2,
            self.fused_width,
            self.feature_side,
            self.grid_px,
            self.decoder_width,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("model sizes must be positive: {self:?}")));
        }
        if self.nodes % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "node count {} must be even for 2x2 pooling",
                self.nodes
            )));
        }
        Ok(())
    }

    /// Length of the flattened encoder output.
    pub fn encoded_len(&self) -> usize {
        self.fused_width * (self.nodes / 2) * (self.nodes / 2)
    }

    pub fn param_shapes(&self) -> [Vec<usize>; 13] {
        let (c, w1, w2) = (self.channels, self.branch_width1, self.branch_width2);
        let (f, d) = (self.feature_side, self.decoder_width);
        [
            vec![c * w1, 1, 3, 3],
            vec![c * w1],
            vec![c * w2, w1, 3, 3],
            vec![c * w2],
            vec![self.fused_width, c * w2, 1, 1],
            vec![self.fused_width],
            vec![f * f, self.encoded_len()],
            vec![f * f],
            vec![f, f],
            vec![d, 1, 3, 3],
            vec![d],
            vec![1, d, 3, 3],
            vec![1],
        ]
    }
}

/// Every model tensor in [`PARAM_NAMES`] order, with its trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
    pub trainable: Vec<bool>,
}

impl ModelParams {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`; attention map ones.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.param_shapes();
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if i == ATTENTION {
                    return Tensor::filled(shape.clone(), 1.0);
                }
                let fan_in: usize = shapes[weight_of(i)][1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape.clone(), data).expect("sized")
            })
            .collect();
        Ok(Self {
            tensors,
            trainable: vec![true; PARAM_NAMES.len()],
        })
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        Error::check_dim("parameter count", PARAM_NAMES.len(), self.tensors.len())?;
        Error::check_dim("trainable flags", PARAM_NAMES.len(), self.trainable.len())?;
        for ((t, shape), name) in self.tensors.iter().zip(config.param_shapes()).zip(PARAM_NAMES) {
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "{name}: shape {:?} does not match config {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Marks exactly the listed tensors trainable.
    pub fn set_trainable_only(&mut self, indices: &[usize]) {
        for (i, flag) in self.trainable.iter_mut().enumerate() {
            *flag = indices.contains(&i);
        }
    }
}

/// Weight tensor whose fan-in scales parameter `i`.
fn weight_of(i: usize) -> usize {
    match i {
        ENC1_B => ENC1_W,
        ENC2_B => ENC2_W,
        FUSE_B => FUSE_W,
        ANC_B => ANC_W,
        DEC1_B => DEC1_W,
        DEC2_B => DEC2_W,
        w => w,
    }
}

/// Trained network with the input statistics and the geometry it was built
/// for.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub norm: NormStats,
    pub geometry_hash: String,
}

impl DriftModel {
    pub fn new(geom: &NetworkGeometry, seed: u64) -> Result<Self> {
        let config = ModelConfig::for_geometry(geom);
        Self::with_config(config, geom.hash(), seed)
    }

    pub fn with_config(config: ModelConfig, geometry_hash: String, seed: u64) -> Result<Self> {
        Ok(Self {
            config,
            params: ModelParams::init(&config, seed)?,
            norm: NormStats::identity(config.channels),
            geometry_hash,
        })
    }

    pub fn check_geometry(&self, geom: &NetworkGeometry) -> Result<()> {
        if self.geometry_hash != geom.hash() {
            return Err(Error::Contract(format!(
                "model geometry hash {} does not match dataset geometry {}",
                self.geometry_hash,
                geom.hash()
            )));
        }
        Ok(())
    }

    /// Standardized input tensor of one complete frame.
    pub fn input(&self, frame: &RssFrame, geom: &NetworkGeometry) -> Result<RssTensor> {
        to_tensor(frame, geom, Some(&self.norm))
    }

    pub fn inputs(&self, frames: &[RssFrame], geom: &NetworkGeometry) -> Result<Vec<Tensor>> {
        frames.iter().map(|f| self.input(f, geom).and_then(|x| input_tensor(&self.config, &x))).collect()
    }
}

/// Validates an [`RssTensor`] against the model and converts it to a
/// `[channels, nodes, nodes]` tensor.
pub fn input_tensor(config: &ModelConfig, x: &RssTensor) -> Result<Tensor> {
    Error::check_dim("input channels", config.channels, x.channels)?;
    Error::check_dim("input nodes", config.nodes, x.nodes)?;
    Tensor::new(vec![x.channels, x.nodes, x.nodes], x.values.clone())
}

pub(crate) struct ParamVars(pub Vec<Var>);

pub(crate) fn param_leaves(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    ParamVars(
        params
            .tensors
            .iter()
            .zip(&params.trainable)
            .map(|(t, tr)| tape.leaf(t.clone(), *tr))
            .collect(),
    )
}

/// Encoder: per-channel conv branches, pooling and the 1x1 fusion.
/// Returns `[batch, fused, nodes / 2, nodes / 2]`.
pub(crate) fn encoder_graph(tape: &mut Tape, p: &ParamVars, config: &ModelConfig, x: Var) -> Result<Var> {
    let c = config.channels;
    let h = tape.conv2d(x, p.0[ENC1_W], p.0[ENC1_B], c)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, p.0[ENC2_W], p.0[ENC2_B], c)?;
    let h = tape.relu(h);
    let h = tape.maxpool2(h)?;
    let h = tape.conv2d(h, p.0[FUSE_W], p.0[FUSE_B], 1)?;
    Ok(tape.relu(h))
}

/// ANC decoder: linear projection, attention map, bilinear upsampling,
/// convolutions and squashing. Returns `[batch, 1, grid, grid]`.
pub(crate) fn decoder_graph(
    tape: &mut Tape,
    p: &ParamVars,
    config: &ModelConfig,
    features: Var,
    attention: bool,
) -> Result<Var> {
    let batch = tape.value(features).shape()[0];
    let f = config.feature_side;
    let h = tape.reshape(features, vec![batch, config.encoded_len()])?;
    let h = tape.linear(h, p.0[ANC_W], p.0[ANC_B])?;
    let mut h = tape.reshape(h, vec![batch, 1, f, f])?;
    if attention {
        h = tape.mul_map(h, p.0[ATTENTION])?;
    }
    let h = tape.upsample(h, config.grid_px)?;
    let h = tape.conv2d(h, p.0[DEC1_W], p.0[DEC1_B], 1)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, p.0[DEC2_W], p.0[DEC2_B], 1)?;
    Ok(tape.squash(h, OUTPUT_EPS))
}

fn batch_input(config: &ModelConfig, xs: &[Tensor]) -> Result<Tensor> {
    for x in xs {
        if x.shape() != [config.channels, config.nodes, config.nodes] {
            return Err(Error::InvalidArgument(format!(
                "input shape {:?} does not match model [{}, {}, {}]",
                x.shape(),
                config.channels,
                config.nodes,
                config.nodes
            )));
        }
    }
    Tensor::stack(&xs.iter().collect::<Vec<_>>())
}

fn outputs(config: &ModelConfig, t: &Tensor) -> Vec<ReconImage> {
    let px = config.grid_px * config.grid_px;
    t.data()
        .chunks(px)
        .map(|v| ReconImage::new(config.grid_px, v.to_vec()).expect("sized"))
        .collect()
}

pub(crate) fn forward_tensors(model: &DriftModel, xs: &[Tensor], attention: bool) -> Result<Vec<ReconImage>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let mut frozen = model.params.clone();
    frozen.trainable.iter_mut().for_each(|t| *t = false);
    let mut tape = Tape::new();
    let p = param_leaves(&mut tape, &frozen);
    let x = tape.leaf(batch_input(&model.config, xs)?, false);
    let feats = encoder_graph(&mut tape, &p, &model.config, x)?;
    let y = decoder_graph(&mut tape, &p, &model.config, feats, attention)?;
    Ok(outputs(&model.config, tape.value(y)))
}

/// Reconstruction of one standardized input.
pub fn forward(model: &DriftModel, x: &RssTensor) -> Result<ReconImage> {
    let t = input_tensor(&model.config, x)?;
    Ok(forward_tensors(model, &[t], true)?.remove(0))
}

/// Reconstructions of a batch of standardized inputs.
pub fn forward_batch(model: &DriftModel, xs: &[RssTensor]) -> Result<Vec<ReconImage>> {
    let ts = xs.iter().map(|x| input_tensor(&model.config, x)).collect::<Result<Vec<_>>>()?;
    forward_tensors(model, &ts, true)
}

/// Reconstructions of complete (imputed) frames, standardized with the
/// model's statistics.
pub fn reconstruct_frames(model: &DriftModel, frames: &[RssFrame], geom: &NetworkGeometry) -> Result<Vec<ReconImage>> {
    let mut out = Vec::with_capacity(frames.len());
    // bounded batches keep activation memory small
    for chunk in model.inputs(frames, geom)?.chunks(16) {
        out.extend(forward_tensors(model, chunk, true)?);
    }
    Ok(out)
}

/// Mean clamped binary cross-entropy of a prediction against a mask.
pub fn loss(pred: &ReconImage, mask: &TargetMask) -> Result<f64> {
    Error::check_dim("mask side", pred.side(), mask.side())?;
    let target: Vec<f64> = mask.pixels().iter().map(|v| *v as f64).collect();
    Ok(tape::bce(pred.values(), &target, LOSS_CLAMP))
}

fn repeated_target(mask: &TargetMask, batch: usize) -> Vec<f64> {
    let one: Vec<f64> = mask.pixels().iter().map(|v| *v as f64).collect();
    one.repeat(batch)
}

/// Loss and gradients of a batch sharing one mask. Frozen tensors get `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub grads: Vec<Option<Vec<f64>>>,
}

pub(crate) fn backward_tensors(model: &DriftModel, xs: &[Tensor], mask: &TargetMask) -> Result<Gradients> {
    Error::check_dim("mask side", model.config.grid_px, mask.side())?;
    if xs.is_empty() {
        return Err(Error::InsufficientData("backward needs at least one input".into()));
    }
    let mut tape = Tape::new();
    let p = param_leaves(&mut tape, &model.params);
    let x = tape.leaf(batch_input(&model.config, xs)?, false);
    let feats = encoder_graph(&mut tape, &p, &model.config, x)?;
    let y = decoder_graph(&mut tape, &p, &model.config, feats, true)?;
    let l = tape.bce(y, repeated_target(mask, xs.len()), LOSS_CLAMP)?;
    tape.backward(l)?;
    Ok(Gradients {
        loss: tape.value(l).data()[0],
        grads: collect_grads(&tape, &p, &model.params),
    })
}

pub(crate) fn collect_grads(tape: &Tape, p: &ParamVars, params: &ModelParams) -> Vec<Option<Vec<f64>>> {
    p.0.iter()
        .zip(&params.trainable)
        .zip(&params.tensors)
        .map(|((v, tr), t)| tr.then(|| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()])))
        .collect()
}

/// Reverse-mode gradients of the mean loss over `xs` (all sharing `mask`).
pub fn backward(model: &DriftModel, xs: &[RssTensor], mask: &TargetMask) -> Result<Gradients> {
    let ts = xs.iter().map(|x| input_tensor(&model.config, x)).collect::<Result<Vec<_>>>()?;
    backward_tensors(model, &ts, mask)
}

/// Encoder features of a batch (no gradients).
pub(crate) fn encode(model: &DriftModel, xs: &[Tensor]) -> Result<Tensor> {
    let mut frozen = model.params.clone();
    frozen.trainable.iter_mut().for_each(|t| *t = false);
    let mut tape = Tape::new();
    let p = param_leaves(&mut tape, &frozen);
    let x = tape.leaf(batch_input(&model.config, xs)?, false);
    let f = encoder_graph(&mut tape, &p, &model.config, x)?;
    Ok(tape.value(f).clone())
}

/// Loss and gradients from precomputed encoder features; valid when every
/// encoder tensor is frozen.
pub(crate) fn backward_from_features(model: &DriftModel, features: Tensor, mask: &TargetMask) -> Result<Gradients> {
    let batch = features.shape()[0];
    let mut tape = Tape::new();
    let p = param_leaves(&mut tape, &model.params);
    let f = tape.leaf(features, false);
    let y = decoder_graph(&mut tape, &p, &model.config, f, true)?;
    let l = tape.bce(y, repeated_target(mask, batch), LOSS_CLAMP)?;
    tape.backward(l)?;
    Ok(Gradients {
        loss: tape.value(l).data()[0],
        grads: collect_grads(&tape, &p, &model.params),
    })
}
