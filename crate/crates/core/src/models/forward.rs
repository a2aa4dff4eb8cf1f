use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ModelParams, ModelVariant, Stage, CHANNELS, IN_CHANNELS, PATCH, POSITIVE};
use crate::error::{Error, Result};
use crate::nn::batchnorm::BatchStats;
use crate::nn::gradcheck::PatternHasher;
use crate::nn::linear::linear_accumulate;
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, dropout, dropout_backward,
    global_average_pool, global_average_pool_backward, linear_backward, relu, relu_backward, softmax,
    BnCache, ConvParams, DropoutMask, Mode,
};
use crate::tensor::{Scalar, Tensor};

// Activation slots.
const X: usize = 0;
const F1: usize = 1;
const F2: usize = 2;
const F3: usize = 3;
const F22: usize = 4;
const F23: usize = 5;
const F32: usize = 6;
const F33: usize = 7;
const SLOTS: usize = 8;

/// `(stage, input slot, output slot)` in application order.
const INET_SITES: [(Stage, usize, usize); 3] = [(Stage::One, X, F1), (Stage::Two, F1, F2), (Stage::Three, F2, F3)];
const FBNET_SITES: [(Stage, usize, usize); 7] = [
    (Stage::One, X, F1),
    (Stage::Two, F1, F2),
    (Stage::Three, F2, F3),
    (Stage::Two, F2, F22),
    (Stage::Three, F22, F23),
    (Stage::Two, F3, F32),
    (Stage::Three, F32, F33),
];

fn sites(variant: ModelVariant) -> &'static [(Stage, usize, usize)] {
    if variant.is_feedback() {
        &FBNET_SITES
    } else {
        &INET_SITES
    }
}

fn branch_slots(variant: ModelVariant) -> &'static [usize] {
    if variant.is_feedback() {
        &[F3, F23, F33]
    } else {
        &[F3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout_rate: f32,
    /// Seeds the dropout masks of this pass; unused in eval mode.
    pub dropout_seed: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            dropout_rate: 0.0,
            dropout_seed: 0,
        }
    }

    pub fn train(dropout_rate: f32, dropout_seed: u64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            dropout_rate,
            dropout_seed,
        }
    }
}

/// Feedback-path features of FB-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct Feedback<T = f32> {
    /// 32×10×10
    pub f22: Tensor<T>,
    /// 32×8×8
    pub f23: Tensor<T>,
    /// 32×8×8
    pub f32: Tensor<T>,
    /// 32×6×6
    pub f33: Tensor<T>,
}

/// Post conv→ReLU→BN features of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T = f32> {
    /// 32×14×14
    pub f1: Tensor<T>,
    /// 32×12×12
    pub f2: Tensor<T>,
    /// 32×10×10
    pub f3: Tensor<T>,
    pub feedback: Option<Feedback<T>>,
}

impl<T: Scalar> FeatureBundle<T> {
    /// The last-stage features of every branch that reaches the decision
    /// layer: `[F3]` for I-Net, `[F3, F23, F33]` for FB-Net.
    pub fn decision_branches(&self) -> Vec<&Tensor<T>> {
        match &self.feedback {
            Some(fb) => vec![&self.f3, &fb.f23, &fb.f33],
            None => vec![&self.f3],
        }
    }
}

struct SiteRecord<T> {
    stage: Stage,
    src: usize,
    dst: usize,
    pre: Vec<Tensor<T>>,
    bn: BnCache<T>,
    stats: Option<BatchStats>,
}

/// A batched forward pass with everything its backward pass needs.
pub struct ForwardPass<T = f32> {
    variant: ModelVariant,
    acts: Vec<Vec<Tensor<T>>>,
    sites: Vec<SiteRecord<T>>,
    masks: Vec<Vec<DropoutMask<T>>>,
    decision: Vec<Vec<T>>,
    pub logits: Vec<Vec<T>>,
    /// The FC accumulators before rounding to the storage type.
    pub logits_wide: Vec<Vec<f64>>,
}

fn check_patch<T: Scalar>(patch: &Tensor<T>) -> Result<()> {
    patch.ensure_shape(&[IN_CHANNELS, PATCH, PATCH])
}

impl<T: Scalar> ForwardPass<T> {
    pub fn run(params: &ModelParams<T>, batch: &[Tensor<T>], opts: ForwardOptions) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid("forward pass over an empty batch"));
        }
        for p in batch {
            check_patch(p)?;
        }
        let variant = params.variant;
        let mut acts: Vec<Vec<Tensor<T>>> = vec![Vec::new(); SLOTS];
        acts[X] = batch.to_vec();
        let mut records = Vec::new();
        for &(stage, src, dst) in sites(variant) {
            let conv = params.conv(stage);
            let pre: Vec<Tensor<T>> = acts[src]
                .par_iter()
                .map(|x| conv2d(x, conv))
                .collect::<Result<_>>()?;
            let act: Vec<Tensor<T>> = pre.iter().map(relu).collect();
            let out = batchnorm_forward(&act, params.bn(stage), opts.mode)?;
            acts[dst] = out.output;
            records.push(SiteRecord {
                stage,
                src,
                dst,
                pre,
                bn: out.cache,
                stats: out.stats,
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
        let mut masks = Vec::with_capacity(batch.len());
        let mut decision = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        let mut logits_wide = Vec::with_capacity(batch.len());
        for n in 0..batch.len() {
            let mut sample_masks = Vec::new();
            let mut v = Vec::with_capacity(variant.fc_features());
            for &slot in branch_slots(variant) {
                let (dropped, mask) = dropout(&acts[slot][n], opts.dropout_rate, &mut rng, opts.mode)?;
                if variant.has_gap() {
                    v.extend_from_slice(global_average_pool(&dropped)?.data());
                } else {
                    v.extend_from_slice(dropped.data());
                }
                sample_masks.push(mask);
            }
            let wide = linear_accumulate(&v, &params.fc)?;
            logits.push(wide.iter().map(|&x| T::from_f64(x)).collect());
            logits_wide.push(wide);
            decision.push(v);
            masks.push(sample_masks);
        }
        Ok(ForwardPass {
            variant,
            acts,
            sites: records,
            masks,
            decision,
            logits,
            logits_wide,
        })
    }

    pub fn batch_len(&self) -> usize {
        self.logits.len()
    }

    pub fn features(&self, n: usize) -> FeatureBundle<T> {
        let a = |slot: usize| self.acts[slot][n].clone();
        FeatureBundle {
            f1: a(F1),
            f2: a(F2),
            f3: a(F3),
            feedback: self.variant.is_feedback().then(|| Feedback {
                f22: a(F22),
                f23: a(F23),
                f32: a(F32),
                f33: a(F33),
            }),
        }
    }

    /// Folds each training-mode site's batch statistics into the running
    /// estimates, in application order (shared stages update once per site).
    pub fn apply_running_stats(&self, params: &mut ModelParams<T>) {
        for site in &self.sites {
            if let Some(stats) = &site.stats {
                params.stage_mut(site.stage).1.update_running(stats);
            }
        }
    }

    /// Fingerprint of every ReLU's on/off state in this pass.
    pub fn relu_pattern(&self) -> u64 {
        let mut h = PatternHasher::default();
        for site in &self.sites {
            for t in &site.pre {
                h.push_positive(t.data());
            }
        }
        h.finish()
    }

    /// Backpropagates per-sample logit cotangents, adding parameter
    /// cotangents into `grads`. Returns input cotangents when requested.
    pub fn backward(
        &self,
        params: &ModelParams<T>,
        dlogits: &[Vec<T>],
        grads: &mut ModelParams<T>,
        want_input_grad: bool,
    ) -> Result<Option<Vec<Tensor<T>>>> {
        if dlogits.len() != self.batch_len() {
            return Err(Error::shape(
                format!("{} logit cotangents", self.batch_len()),
                dlogits.len(),
            ));
        }
        if grads.variant != self.variant || params.variant != self.variant {
            return Err(Error::Variant {
                expected: self.variant.to_string(),
                found: grads.variant.to_string(),
            });
        }
        let n = self.batch_len();
        let mut dacts: Vec<Option<Vec<Tensor<T>>>> = vec![None; SLOTS];

        for (s, dl) in dlogits.iter().enumerate() {
            let dv = linear_backward(&self.decision[s], &params.fc, dl, &mut grads.fc);
            for ((&slot, g), mask) in branch_slots(self.variant)
                .iter()
                .zip(split_head_gradient(self.variant, &dv)?)
                .zip(&self.masks[s])
            {
                let g = dropout_backward(mask, &g);
                accumulate(&mut dacts[slot], s, n, g)?;
            }
        }

        for site in self.sites.iter().rev() {
            let Some(dout) = dacts[site.dst].take() else {
                continue;
            };
            let (gconv, gbn) = grads.stage_mut(site.stage);
            let dact = batchnorm_backward(&site.bn, params.bn(site.stage), &dout, Some(gbn))?;
            let dpre: Vec<Tensor<T>> = site.pre.iter().zip(&dact).map(|(p, d)| relu_backward(p, d)).collect();
            let need_input = site.src != X || want_input_grad;
            let conv = params.conv(site.stage);
            let per_sample: Vec<(ConvParams<T>, Option<Tensor<T>>)> = self.acts[site.src]
                .par_iter()
                .zip(&dpre)
                .map(|(x, g)| {
                    let mut local = ConvParams::zeros(conv.out_channels(), conv.in_channels());
                    let dx = conv2d_backward(x, conv, g, &mut local, need_input)?;
                    Ok((local, dx))
                })
                .collect::<Result<_>>()?;
            for (s, (local, dx)) in per_sample.into_iter().enumerate() {
                gconv.kernels.add_assign(&local.kernels)?;
                gconv.bias.add_assign(&local.bias)?;
                if let Some(dx) = dx {
                    accumulate(&mut dacts[site.src], s, n, dx)?;
                }
            }
        }
        Ok(if want_input_grad { dacts[X].take() } else { None })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<Tensor<T>>>, s: usize, n: usize, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(v) => v[s].add_assign(&g),
        None => {
            let mut v: Vec<Tensor<T>> = (0..n).map(|_| Tensor::zeros(g.shape())).collect();
            v[s] = g;
            *slot = Some(v);
            Ok(())
        }
    }
}

/// Splits a decision-vector cotangent back onto the branch feature maps
/// (before dropout).
fn split_head_gradient<T: Scalar>(variant: ModelVariant, dv: &[T]) -> Result<Vec<Tensor<T>>> {
    if dv.len() != variant.fc_features() {
        return Err(Error::shape(variant.fc_features(), dv.len()));
    }
    let mut off = 0;
    let mut out = Vec::new();
    for &s in variant.branch_sizes() {
        if variant.has_gap() {
            out.push(global_average_pool_backward(
                &Tensor::vector(dv[off..off + CHANNELS].to_vec()),
                s,
                s,
            ));
            off += CHANNELS;
        } else {
            let len = CHANNELS * s * s;
            out.push(Tensor::new(vec![CHANNELS, s, s], dv[off..off + len].to_vec())?);
            off += len;
        }
    }
    Ok(out)
}

/// Cotangent of the eval-mode decision head with respect to each decision
/// branch, given a logit cotangent. The head is linear in the features, so
/// this does not depend on them.
pub fn head_input_gradient<T: Scalar>(params: &ModelParams<T>, dlogits: &[T]) -> Result<Vec<Tensor<T>>> {
    if dlogits.len() != params.fc.classes() {
        return Err(Error::shape(params.fc.classes(), dlogits.len()));
    }
    let f = params.fc.features();
    let dv: Vec<T> = (0..f)
        .map(|j| {
            let s = dlogits
                .iter()
                .enumerate()
                .map(|(c, g)| g.to_f64() * params.fc.weights.data()[c * f + j].to_f64())
                .sum::<f64>();
            T::from_f64(s)
        })
        .collect();
    split_head_gradient(params.variant, &dv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T = f32> {
    pub logits: Vec<T>,
    pub features: FeatureBundle<T>,
}

impl<T: Scalar> Inference<T> {
    pub fn positive_probability(&self) -> f64 {
        softmax(&self.logits)[POSITIVE]
    }
}

/// Eval-mode inference over a batch; samples are independent.
pub fn infer<T: Scalar>(params: &ModelParams<T>, patches: &[Tensor<T>]) -> Result<Vec<Inference<T>>> {
    let pass = ForwardPass::run(params, patches, ForwardOptions::eval())?;
    Ok((0..pass.batch_len())
        .map(|n| Inference {
            logits: pass.logits[n].clone(),
            features: pass.features(n),
        })
        .collect())
}

fn single<T: Scalar>(params: &ModelParams<T>, patch: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, FeatureBundle<T>)> {
    let opts = ForwardOptions {
        mode,
        dropout_rate: 0.0,
        dropout_seed: 0,
    };
    let pass = ForwardPass::run(params, std::slice::from_ref(patch), opts)?;
    Ok((Tensor::vector(pass.logits[0].clone()), pass.features(0)))
}

/// I-Net / I-Net+GAP on one patch. In training mode BN normalizes with the
/// patch's own statistics; dropout is left to the batched training pass.
pub fn inet_forward<T: Scalar>(patch: &Tensor<T>, params: &ModelParams<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
    if params.variant.is_feedback() {
        return Err(Error::Variant {
            expected: "inet or inet_gap".into(),
            found: params.variant.to_string(),
        });
    }
    let (logits, features) = single(params, patch, mode)?;
    Ok((logits, features.f3))
}

/// FB-Net / FB-Net w/o GAP on one patch.
pub fn fbnet_forward<T: Scalar>(
    patch: &Tensor<T>,
    params: &ModelParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, FeatureBundle<T>)> {
    if !params.variant.is_feedback() {
        return Err(Error::Variant {
            expected: "fbnet or fbnet_nogap".into(),
            found: params.variant.to_string(),
        });
    }
    single(params, patch, mode)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub positive: bool,
    pub probability: f64,
}

/// Positive iff `softmax(logits)[positive] ≥ threshold`.
pub fn predict<T: Scalar>(logits: &[T], threshold: f64) -> Prediction {
    let probability = softmax(logits)[POSITIVE];
    Prediction {
        positive: probability >= threshold,
        probability,
    }
}
