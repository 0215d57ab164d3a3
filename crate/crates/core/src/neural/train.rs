use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{backward_from_features, backward_tensors, encode, DriftModel, Gradients, ANC_LINEAR};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::NetworkGeometry;
use crate::kv::KvDoc;
use crate::preprocess::{ImputedSample, NormStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bce" | "BCE" => Ok(Self::Bce),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("bce")
    }
}

/// `batch_size` is the number of frames drawn from one recording per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
            loss: LossKind::Bce,
            finetune_epochs: 50,
            finetune_lr: 1e-3,
        }
    }
}

pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "epochs",
    "learning_rate",
    "momentum",
    "batch_size",
    "seed",
    "loss",
    "finetune_epochs",
    "finetune_lr",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("finetune_lr", self.finetune_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("epochs", self.epochs);
        doc.set("learning_rate", self.learning_rate);
        doc.set("momentum", self.momentum);
        doc.set("batch_size", self.batch_size);
        doc.set("seed", self.seed);
        doc.set("loss", self.loss);
        doc.set("finetune_epochs", self.finetune_epochs);
        doc.set("finetune_lr", self.finetune_lr);
        doc
    }

    /// Overrides the fields present in `doc`.
    pub fn apply_kv(&mut self, doc: &KvDoc) -> Result<()> {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if doc.get(stringify!($field)).is_some() {
                    self.$field = doc.parse_value(stringify!($field))?;
                }
            )*};
        }
        take!(epochs, learning_rate, momentum, batch_size, seed, loss, finetune_epochs, finetune_lr);
        Ok(())
    }
}

/// Gradient descent with heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, tensors: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![None; tensors],
        }
    }

    /// Updates each tensor that has a gradient and is flagged trainable.
    pub fn step(&mut self, tensors: &mut [Tensor], trainable: &[bool], grads: &[Option<Vec<f64>>]) -> Result<()> {
        Error::check_dim("gradient count", tensors.len(), grads.len())?;
        for (i, (t, g)) in tensors.iter_mut().zip(grads).enumerate() {
            let (Some(g), true) = (g, trainable[i]) else {
                continue;
            };
            Error::check_dim("gradient length", t.len(), g.len())?;
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; g.len()]);
            for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DriftModel,
    /// Mean step loss of each epoch.
    pub loss_curve: Vec<f64>,
}

fn check_curve(curve: &[f64]) -> Result<()> {
    match curve.iter().position(|l| !l.is_finite()) {
        Some(e) => Err(Error::Contract(format!("loss became non-finite in epoch {e}"))),
        None => Ok(()),
    }
}

/// Fits the input statistics on the training frames, then runs
/// `config.epochs` passes; each pass visits every recording once in a
/// shuffled order and takes one step on `batch_size` of its frames.
pub fn train(
    mut model: DriftModel,
    samples: &[ImputedSample],
    geom: &NetworkGeometry,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.check_geometry(geom)?;
    if samples.is_empty() || samples.iter().all(|s| s.frames.is_empty()) {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    model.norm = NormStats::fit(samples.iter().flat_map(|s| s.frames.iter()))?;
    let inputs: Vec<Vec<Tensor>> = samples
        .iter()
        .map(|s| model.inputs(&s.frames, geom))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Sgd::new(config.learning_rate, config.momentum, model.params.tensors.len());
    let mut order: Vec<usize> = (0..samples.len()).filter(|&i| !inputs[i].is_empty()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let frames = &inputs[i];
            let batch: Vec<Tensor> = if frames.len() <= config.batch_size {
                frames.clone()
            } else {
                frames.choose_multiple(&mut rng, config.batch_size).cloned().collect()
            };
            let Gradients { loss, grads } = backward_tensors(&model, &batch, &samples[i].mask)?;
            opt.step(&mut model.params.tensors, &model.params.trainable, &grads)?;
            total += loss;
        }
        curve.push(total / order.len() as f64);
    }
    check_curve(&curve)?;
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
    })
}

/// Adapts a trained model to a new environment from one tuber's labeled
/// recordings. Only the ANC linear layer is left trainable; each of the
/// `finetune_epochs` steps follows the gradient averaged over every
/// recording, all frames included.
pub fn one_shot_finetune(
    mut model: DriftModel,
    samples: &[ImputedSample],
    geom: &NetworkGeometry,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.check_geometry(geom)?;
    if samples.is_empty() || samples.iter().any(|s| s.frames.is_empty()) {
        return Err(Error::InsufficientData("fine-tuning needs frames in every recording".into()));
    }
    model.params.set_trainable_only(&ANC_LINEAR);
    // the encoder is frozen, so its features are computed once
    let features: Vec<Tensor> = samples
        .iter()
        .map(|s| encode(&model, &model.inputs(&s.frames, geom)?))
        .collect::<Result<_>>()?;

    let mut opt = Sgd::new(config.finetune_lr, config.momentum, model.params.tensors.len());
    let scale = 1.0 / samples.len() as f64;
    let mut curve = Vec::with_capacity(config.finetune_epochs);
    for _ in 0..config.finetune_epochs {
        let mut total = 0.0;
        let mut sum: Vec<Option<Vec<f64>>> = vec![None; model.params.tensors.len()];
        for (f, s) in features.iter().zip(samples) {
            let Gradients { loss, grads } = backward_from_features(&model, f.clone(), &s.mask)?;
            total += loss;
            for (acc, g) in sum.iter_mut().zip(grads) {
                let Some(g) = g else { continue };
                match acc {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g * scale),
                    None => *acc = Some(g.iter().map(|g| g * scale).collect()),
                }
            }
        }
        opt.step(&mut model.params.tensors, &model.params.trainable, &sum)?;
        curve.push(total * scale);
    }
    check_curve(&curve)?;
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::tests::tiny_config;
    use crate::neural::model::{ModelParams, ATTENTION, ENC1_W};

    #[test]
    fn sgd_momentum_update() {
        let mut ts = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), Tensor::zeros(vec![1])];
        let mut opt = Sgd::new(0.1, 0.5, 2);
        let grads = vec![Some(vec![1.0, -1.0]), Some(vec![3.0])];
        opt.step(&mut ts, &[true, false], &grads).unwrap();
        assert_eq!(ts[0].data(), &[0.9, 2.1]);
        assert_eq!(ts[1].data(), &[0.0]);
        opt.step(&mut ts, &[true, false], &grads).unwrap();
        // v = 0.5 * 1 + 1 = 1.5
        assert!((ts[0].data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let cfg = tiny_config();
        let mut p = ModelParams::init(&cfg, 1).unwrap();
        let before = p.clone();
        let grads: Vec<_> = p.tensors.iter().map(|t| Some(vec![0.3; t.len()])).collect();
        Sgd::new(0.0, 0.9, p.tensors.len())
            .step(&mut p.tensors, &before.trainable, &grads)
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_tensors_never_move() {
        let cfg = tiny_config();
        let mut p = ModelParams::init(&cfg, 1).unwrap();
        p.set_trainable_only(&[ATTENTION]);
        let before = p.clone();
        let grads: Vec<_> = p.tensors.iter().map(|t| Some(vec![0.3; t.len()])).collect();
        let mut opt = Sgd::new(0.5, 0.9, p.tensors.len());
        for _ in 0..5 {
            opt.step(&mut p.tensors, &before.trainable, &grads).unwrap();
        }
        assert_eq!(p.tensors[ENC1_W], before.tensors[ENC1_W]);
        assert_ne!(p.tensors[ATTENTION], before.tensors[ATTENTION]);
    }

    #[test]
    fn config_kv_round_trip_and_validation() {
        let cfg = TrainConfig {
            epochs: 3,
            finetune_lr: 0.5,
            ..Default::default()
        };
        let mut back = TrainConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
