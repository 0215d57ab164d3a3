//! Differentiable tensor core and the reconstruction network: per-channel
//! convolutional encoder, ANC decoder (linear projection, attention map,
//! bilinear upsampling, convolutions), training and one-shot adaptation.

mod checkpoint;
mod model;
mod tape;
mod tensor;
mod train;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
pub use model::{
    backward, forward, forward_batch, input_tensor, loss, reconstruct_frames, DriftModel, Gradients, ModelConfig,
    ModelParams, ANC_B, ANC_LINEAR, ANC_W, ATTENTION, DEC1_B, DEC1_W, DEC2_B, DEC2_W, ENC1_B, ENC1_W, ENC2_B, ENC2_W,
    FUSE_B, FUSE_W, LOSS_CLAMP, OUTPUT_EPS, PARAM_NAMES,
};
pub use tape::{bce, Tape, Var};
pub use tensor::Tensor;
pub use train::{one_shot_finetune, train, LossKind, Sgd, TrainConfig, TrainOutcome, TRAIN_CONFIG_KEYS};
