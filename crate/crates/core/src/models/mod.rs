//! I-Net and FB-Net architectures.
//!
//! Both share three conv → ReLU → BN stages. FB-Net additionally feeds F2 and
//! F3 back through the *same* second and third stages, so `conv2`/`bn2` and
//! `conv3`/`bn3` each exist once in [`ModelParams`] however often a forward
//! pass applies them.

pub mod checkpoint;
pub mod probe;
mod forward;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNormParams, ConvParams, LinearParams};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use forward::{
    fbnet_forward, head_input_gradient, inet_forward, infer, predict, Feedback, FeatureBundle, ForwardOptions,
    ForwardPass, Inference, Prediction,
};

pub const IN_CHANNELS: usize = 7;
pub const PATCH: usize = 16;
pub const CHANNELS: usize = 32;
pub const CLASSES: usize = 2;
pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Inet,
    InetGap,
    Fbnet,
    FbnetNogap,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Inet,
        ModelVariant::InetGap,
        ModelVariant::Fbnet,
        ModelVariant::FbnetNogap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Inet => "inet",
            ModelVariant::InetGap => "inet_gap",
            ModelVariant::Fbnet => "fbnet",
            ModelVariant::FbnetNogap => "fbnet_nogap",
        }
    }

    pub fn has_gap(self) -> bool {
        matches!(self, ModelVariant::InetGap | ModelVariant::Fbnet)
    }

    pub fn is_feedback(self) -> bool {
        matches!(self, ModelVariant::Fbnet | ModelVariant::FbnetNogap)
    }

    /// Spatial sizes of the decision branches (F3, then F23 and F33).
    pub fn branch_sizes(self) -> &'static [usize] {
        if self.is_feedback() {
            &[10, 8, 6]
        } else {
            &[10]
        }
    }

    /// Width of the vector the FC layer sees.
    pub fn fc_features(self) -> usize {
        let sizes = self.branch_sizes();
        if self.has_gap() {
            CHANNELS * sizes.len()
        } else {
            sizes.iter().map(|s| CHANNELS * s * s).sum()
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| Error::invalid(format!("unknown model variant {s:?} (inet, inet_gap, fbnet, fbnet_nogap)")))
    }
}

/// Which of the three shared stages a site uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Three,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub variant: ModelVariant,
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub conv3: ConvParams<T>,
    pub bn1: BatchNormParams<T>,
    pub bn2: BatchNormParams<T>,
    pub bn3: BatchNormParams<T>,
    pub fc: LinearParams<T>,
}

impl ModelParams {
    /// He-uniform conv/FC weights drawn in the order conv1, conv2, conv3, fc;
    /// BN starts at gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn init(variant: ModelVariant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams {
            variant,
            conv1: ConvParams::he_uniform(CHANNELS, IN_CHANNELS, &mut rng),
            conv2: ConvParams::he_uniform(CHANNELS, CHANNELS, &mut rng),
            conv3: ConvParams::he_uniform(CHANNELS, CHANNELS, &mut rng),
            bn1: BatchNormParams::new(CHANNELS),
            bn2: BatchNormParams::new(CHANNELS),
            bn3: BatchNormParams::new(CHANNELS),
            fc: LinearParams::he_uniform(CLASSES, variant.fc_features(), &mut rng),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Same values in another storage type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeroed(self.variant);
        for ((_, dst), (_, src)) in out.named_tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        for (dst, src) in [&mut out.bn1, &mut out.bn2, &mut out.bn3].into_iter().zip([&self.bn1, &self.bn2, &self.bn3]) {
            dst.epsilon = src.epsilon;
            dst.stats_momentum = src.stats_momentum;
        }
        out
    }

    /// Same shapes, every entry zero; the cotangent accumulator.
    pub fn zeroed(variant: ModelVariant) -> Self {
        ModelParams {
            variant,
            conv1: ConvParams::zeros(CHANNELS, IN_CHANNELS),
            conv2: ConvParams::zeros(CHANNELS, CHANNELS),
            conv3: ConvParams::zeros(CHANNELS, CHANNELS),
            bn1: BatchNormParams::zeroed(CHANNELS),
            bn2: BatchNormParams::zeroed(CHANNELS),
            bn3: BatchNormParams::zeroed(CHANNELS),
            fc: LinearParams::zeros(CLASSES, variant.fc_features()),
        }
    }

    pub fn conv(&self, stage: Stage) -> &ConvParams<T> {
        match stage {
            Stage::One => &self.conv1,
            Stage::Two => &self.conv2,
            Stage::Three => &self.conv3,
        }
    }

    pub fn bn(&self, stage: Stage) -> &BatchNormParams<T> {
        match stage {
            Stage::One => &self.bn1,
            Stage::Two => &self.bn2,
            Stage::Three => &self.bn3,
        }
    }

    pub(crate) fn stage_mut(&mut self, stage: Stage) -> (&mut ConvParams<T>, &mut BatchNormParams<T>) {
        match stage {
            Stage::One => (&mut self.conv1, &mut self.bn1),
            Stage::Two => (&mut self.conv2, &mut self.bn2),
            Stage::Three => (&mut self.conv3, &mut self.bn3),
        }
    }

    /// Every stored tensor under its canonical name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("conv1.weight", &self.conv1.kernels),
            ("conv1.bias", &self.conv1.bias),
            ("bn1.gamma", &self.bn1.gamma),
            ("bn1.beta", &self.bn1.beta),
            ("bn1.running_mean", &self.bn1.running_mean),
            ("bn1.running_var", &self.bn1.running_var),
            ("conv2.weight", &self.conv2.kernels),
            ("conv2.bias", &self.conv2.bias),
            ("bn2.gamma", &self.bn2.gamma),
            ("bn2.beta", &self.bn2.beta),
            ("bn2.running_mean", &self.bn2.running_mean),
            ("bn2.running_var", &self.bn2.running_var),
            ("conv3.weight", &self.conv3.kernels),
            ("conv3.bias", &self.conv3.bias),
            ("bn3.gamma", &self.bn3.gamma),
            ("bn3.beta", &self.bn3.beta),
            ("bn3.running_mean", &self.bn3.running_mean),
            ("bn3.running_var", &self.bn3.running_var),
            ("fc.weight", &self.fc.weights),
            ("fc.bias", &self.fc.bias),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("conv1.weight", &mut self.conv1.kernels),
            ("conv1.bias", &mut self.conv1.bias),
            ("bn1.gamma", &mut self.bn1.gamma),
            ("bn1.beta", &mut self.bn1.beta),
            ("bn1.running_mean", &mut self.bn1.running_mean),
            ("bn1.running_var", &mut self.bn1.running_var),
            ("conv2.weight", &mut self.conv2.kernels),
            ("conv2.bias", &mut self.conv2.bias),
            ("bn2.gamma", &mut self.bn2.gamma),
            ("bn2.beta", &mut self.bn2.beta),
            ("bn2.running_mean", &mut self.bn2.running_mean),
            ("bn2.running_var", &mut self.bn2.running_var),
            ("conv3.weight", &mut self.conv3.kernels),
            ("conv3.bias", &mut self.conv3.bias),
            ("bn3.gamma", &mut self.bn3.gamma),
            ("bn3.beta", &mut self.bn3.beta),
            ("bn3.running_mean", &mut self.bn3.running_mean),
            ("bn3.running_var", &mut self.bn3.running_var),
            ("fc.weight", &mut self.fc.weights),
            ("fc.bias", &mut self.fc.bias),
        ]
    }

    /// Tensors updated by the optimizer (running statistics excluded).
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| !n.contains("running"))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(n, _)| !n.contains("running"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = CHANNELS;
        self.conv1.kernels.ensure_shape(&[c, IN_CHANNELS, 3, 3])?;
        self.conv2.kernels.ensure_shape(&[c, c, 3, 3])?;
        self.conv3.kernels.ensure_shape(&[c, c, 3, 3])?;
        for conv in [&self.conv1, &self.conv2, &self.conv3] {
            conv.bias.ensure_shape(&[c])?;
        }
        for bn in [&self.bn1, &self.bn2, &self.bn3] {
            bn.gamma.ensure_shape(&[c])?;
            bn.validate()?;
        }
        self.fc.weights.ensure_shape(&[CLASSES, self.variant.fc_features()])?;
        self.fc.bias.ensure_shape(&[CLASSES])?;
        if self.named_tensors().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ModelParams<T>) -> bool {
        self.variant == other.variant
            && self.bn_hyper() == other.bn_hyper()
            && self
                .named_tensors()
                .iter()
                .zip(other.named_tensors())
                .all(|((_, a), (_, b))| a.bit_eq(b))
    }

    pub(crate) fn bn_hyper(&self) -> [(u32, u32); 3] {
        [&self.bn1, &self.bn2, &self.bn3].map(|b| (b.epsilon.to_bits(), b.stats_momentum.to_bits()))
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }
}
