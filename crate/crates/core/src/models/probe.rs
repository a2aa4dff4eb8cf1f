//! Adapter exposing a model's mean training loss to the gradient checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{ForwardOptions, ForwardPass};
use super::{ModelParams, ModelVariant, IN_CHANNELS, PATCH};
use crate::nn::gradcheck::{gradcheck, Differentiable, GradCheckConfig, GradCheckReport, Probe};
use crate::nn::softmax_cross_entropy;
use crate::tensor::{Scalar, Tensor};

/// Training-mode loss of a small fixed batch (BN batch statistics, a fixed
/// dropout mask) as a function of every trainable tensor and the inputs.
///
/// The storage type `T` is that of the model under test; with `f64` the
/// finite differences are free of 32-bit rounding noise.
pub struct LossProbe<T = f32> {
    pub params: ModelParams<T>,
    pub batch: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub dropout_rate: f32,
    pub dropout_seed: u64,
    /// Flips the sign of this group's analytic gradient; a harness self-test.
    pub corrupt_group: Option<String>,
    names: Vec<&'static str>,
}

impl<T: Scalar> LossProbe<T> {
    pub fn new(params: ModelParams<T>, batch: Vec<Tensor<T>>, labels: Vec<usize>, dropout_rate: f32, dropout_seed: u64) -> Self {
        let names = params.trainable().into_iter().map(|(n, _)| n).collect();
        LossProbe {
            params,
            batch,
            labels,
            dropout_rate,
            dropout_seed,
            corrupt_group: None,
            names,
        }
    }

    /// Fresh `variant` model from `seed` on a random two-patch batch holding
    /// one sample of each class, dropout 0.5.
    pub fn random(variant: ModelVariant, seed: u64) -> Self {
        let params = ModelParams::init(variant, seed).cast();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let batch = (0..2)
            .map(|_| {
                Tensor::from_fn(&[IN_CHANNELS, PATCH, PATCH], |_| {
                    T::from_f64(rng.gen_range(0.0f32..1.0) as f64)
                })
            })
            .collect();
        LossProbe::new(params, batch, vec![0, 1], 0.5, seed)
    }

    fn options(&self) -> ForwardOptions {
        ForwardOptions::train(self.dropout_rate, self.dropout_seed)
    }

    fn pass(&self) -> ForwardPass<T> {
        ForwardPass::run(&self.params, &self.batch, self.options()).expect("probe forward")
    }

    fn loss_and_cotangents(&self, pass: &ForwardPass<T>) -> (f64, Vec<Vec<T>>) {
        let n = self.batch.len() as f64;
        let mut loss = 0.0;
        let mut dl = Vec::new();
        for (l, &y) in pass.logits_wide.iter().zip(&self.labels) {
            let (li, g) = softmax_cross_entropy(l, y);
            loss += li / n;
            dl.push(g.iter().map(|v| T::from_f64(v / n)).collect());
        }
        (loss, dl)
    }

    fn tensor(&self, group: usize) -> &Tensor<T> {
        if group < self.names.len() {
            self.params.trainable()[group].1
        } else {
            &self.batch[group - self.names.len()]
        }
    }

    fn tensor_mut(&mut self, group: usize) -> &mut Tensor<T> {
        let n = self.names.len();
        if group < n {
            self.params.trainable_mut().swap_remove(group).1
        } else {
            &mut self.batch[group - n]
        }
    }

    pub fn check(&mut self, config: &GradCheckConfig) -> GradCheckReport {
        gradcheck(self, config)
    }
}

impl<T: Scalar> Differentiable for LossProbe<T> {
    fn group_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.names.iter().map(|s| s.to_string()).collect();
        v.extend((0..self.batch.len()).map(|i| format!("input[{i}]")));
        v
    }

    fn group_len(&self, group: usize) -> usize {
        self.tensor(group).len()
    }

    fn get(&self, group: usize, index: usize) -> f64 {
        self.tensor(group).data()[index].to_f64()
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        self.tensor_mut(group).data_mut()[index] = T::from_f64(value);
    }

    fn evaluate(&self) -> Probe {
        let pass = self.pass();
        let (loss, _) = self.loss_and_cotangents(&pass);
        Probe {
            loss,
            pattern: pass.relu_pattern(),
        }
    }

    fn gradient(&self) -> Vec<Vec<f64>> {
        let pass = self.pass();
        let (_, dl) = self.loss_and_cotangents(&pass);
        let mut grads = ModelParams::zeroed(self.params.variant);
        let dx = pass
            .backward(&self.params, &dl, &mut grads, true)
            .expect("probe backward")
            .expect("input cotangent");
        let mut out: Vec<Vec<f64>> = grads
            .trainable()
            .into_iter()
            .map(|(name, t)| {
                let mut v: Vec<f64> = t.data().iter().map(|x| x.to_f64()).collect();
                if self.corrupt_group.as_deref() == Some(name) {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        out.extend(dx.iter().map(|t| t.data().iter().map(|x| x.to_f64()).collect()));
        out
    }
}
