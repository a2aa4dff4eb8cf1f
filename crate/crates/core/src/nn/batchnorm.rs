//! Per-channel batch normalization over `batch × spatial`.

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{shape_str, Scalar, Tensor};

pub const DEFAULT_EPSILON: f32 = 1e-5;
pub const DEFAULT_STATS_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f32,
    /// Weight of the newest batch in the running-statistics EMA.
    pub stats_momentum: f32,
}

/// Statistics of one training-mode application, used for the running EMA.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

/// What the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub enum BnCache<T = f32> {
    Train { xhat: Vec<Tensor<T>>, inv_std: Vec<f64> },
    Eval { scale: Vec<f64> },
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::ONE),
            epsilon: DEFAULT_EPSILON,
            stats_momentum: DEFAULT_STATS_MOMENTUM,
        }
    }

    /// All-zero parameters, used as a cotangent accumulator.
    pub fn zeroed(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::zeros(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::zeros(&[channels]),
            epsilon: DEFAULT_EPSILON,
            stats_momentum: DEFAULT_STATS_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            t.ensure_shape(&[c])?;
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("batchnorm epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.stats_momentum > 0.0 && self.stats_momentum <= 1.0) {
            return Err(Error::invalid(format!(
                "batchnorm stats momentum must lie in (0,1], got {}",
                self.stats_momentum
            )));
        }
        if self.running_var.data().iter().any(|&v| v < T::ZERO) {
            return Err(Error::invalid("negative running variance"));
        }
        Ok(())
    }

    /// Folds one batch's statistics into the running estimates. The running
    /// variance uses the unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.stats_momentum as f64;
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = T::from_f64((1.0 - m) * rm.to_f64() + m * stats.mean[c]);
            let rv = &mut self.running_var.data_mut()[c];
            *rv = T::from_f64((1.0 - m) * rv.to_f64() + m * stats.var[c] * unbias);
        }
    }

    /// Eval mode as `y = scale·x + shift` per channel.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let eps = self.epsilon as f64;
        (0..self.channels())
            .map(|c| {
                let s = self.gamma.data()[c].to_f64() / (self.running_var.data()[c].to_f64() + eps).sqrt();
                let shift = self.beta.data()[c].to_f64() - s * self.running_mean.data()[c].to_f64();
                (s, shift)
            })
            .unzip()
    }
}

#[derive(Clone, Debug)]
pub struct BnOutput<T = f32> {
    pub output: Vec<Tensor<T>>,
    pub cache: BnCache<T>,
    /// Present in training mode only.
    pub stats: Option<BatchStats>,
}

fn check_batch<T: Scalar>(batch: &[Tensor<T>], params: &BatchNormParams<T>) -> Result<(usize, usize)> {
    let first = batch.first().ok_or_else(|| Error::invalid("batchnorm over an empty batch"))?;
    let (c, h, w) = first.dims3()?;
    if c != params.channels() {
        return Err(Error::shape(
            format!("{} channels", params.channels()),
            shape_str(first.shape()),
        ));
    }
    for t in batch {
        t.ensure_shape(first.shape())?;
    }
    Ok((c, h * w))
}

/// Pure forward pass. Running statistics are not touched; see
/// [`BatchNormParams::update_running`] or [`batchnorm`].
pub fn batchnorm_forward<T: Scalar>(batch: &[Tensor<T>], params: &BatchNormParams<T>, mode: Mode) -> Result<BnOutput<T>> {
    let (channels, plane) = check_batch(batch, params)?;
    let eps = params.epsilon as f64;
    match mode {
        Mode::Eval => {
            let (scale, shift) = params.eval_affine();
            let output = batch
                .iter()
                .map(|x| {
                    let mut y = x.clone();
                    for c in 0..channels {
                        for v in y.channel_mut(c) {
                            *v = T::from_f64(scale[c] * v.to_f64() + shift[c]);
                        }
                    }
                    y
                })
                .collect();
            Ok(BnOutput {
                output,
                cache: BnCache::Eval { scale },
                stats: None,
            })
        }
        Mode::Train => {
            let count = batch.len() * plane;
            let mut mean = vec![0.0f64; channels];
            let mut var = vec![0.0f64; channels];
            for c in 0..channels {
                let s: f64 = batch.iter().flat_map(|x| x.channel(c)).map(|v| v.to_f64()).sum();
                mean[c] = s / count as f64;
                let ss: f64 = batch
                    .iter()
                    .flat_map(|x| x.channel(c))
                    .map(|v| {
                        let d = v.to_f64() - mean[c];
                        d * d
                    })
                    .sum();
                var[c] = ss / count as f64;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = Vec::with_capacity(batch.len());
            let mut output = Vec::with_capacity(batch.len());
            for x in batch {
                let mut xh = x.clone();
                let mut y = x.clone();
                for c in 0..channels {
                    let g = params.gamma.data()[c].to_f64();
                    let b = params.beta.data()[c].to_f64();
                    for ((h, o), &v) in xh.channel_mut(c).iter_mut().zip(y.channel_mut(c)).zip(x.channel(c)) {
                        let n = (v.to_f64() - mean[c]) * inv_std[c];
                        *h = T::from_f64(n);
                        *o = T::from_f64(g * n + b);
                    }
                }
                xhat.push(xh);
                output.push(y);
            }
            Ok(BnOutput {
                output,
                cache: BnCache::Train { xhat, inv_std },
                stats: Some(BatchStats { mean, var, count }),
            })
        }
    }
}

/// Forward pass that also folds training-mode statistics into `params`.
pub fn batchnorm<T: Scalar>(batch: &[Tensor<T>], params: &mut BatchNormParams<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
    let out = batchnorm_forward(batch, params, mode)?;
    if let Some(stats) = &out.stats {
        params.update_running(stats);
    }
    Ok(out.output)
}

/// Backward pass. `gamma`/`beta` cotangents are added into `grads`; in eval
/// mode the affine parameters are treated as constants.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    params: &BatchNormParams<T>,
    grad_out: &[Tensor<T>],
    grads: Option<&mut BatchNormParams<T>>,
) -> Result<Vec<Tensor<T>>> {
    let (channels, plane) = check_batch(grad_out, params)?;
    match cache {
        BnCache::Eval { scale } => Ok(grad_out
            .iter()
            .map(|g| {
                let mut dx = g.clone();
                for c in 0..channels {
                    dx.channel_mut(c).iter_mut().for_each(|v| *v = T::from_f64(scale[c] * v.to_f64()));
                }
                dx
            })
            .collect()),
        BnCache::Train { xhat, inv_std } => {
            if xhat.len() != grad_out.len() {
                return Err(Error::shape(
                    format!("batch of {}", xhat.len()),
                    format!("batch of {}", grad_out.len()),
                ));
            }
            let m = (grad_out.len() * plane) as f64;
            let mut sum_dy = vec![0.0f64; channels];
            let mut sum_dy_xhat = vec![0.0f64; channels];
            for (g, xh) in grad_out.iter().zip(xhat) {
                for c in 0..channels {
                    for (dy, n) in g.channel(c).iter().zip(xh.channel(c)) {
                        sum_dy[c] += dy.to_f64();
                        sum_dy_xhat[c] += dy.to_f64() * n.to_f64();
                    }
                }
            }
            if let Some(grads) = grads {
                for c in 0..channels {
                    grads.gamma.data_mut()[c] += T::from_f64(sum_dy_xhat[c]);
                    grads.beta.data_mut()[c] += T::from_f64(sum_dy[c]);
                }
            }
            let dx = grad_out
                .iter()
                .zip(xhat)
                .map(|(g, xh)| {
                    let mut dx = g.clone();
                    for c in 0..channels {
                        let gamma = params.gamma.data()[c].to_f64();
                        let k = gamma * inv_std[c] / m;
                        for ((d, dy), n) in dx.channel_mut(c).iter_mut().zip(g.channel(c)).zip(xh.channel(c)) {
                            *d = T::from_f64(k * (m * dy.to_f64() - sum_dy[c] - n.to_f64() * sum_dy_xhat[c]));
                        }
                    }
                    dx
                })
                .collect();
            Ok(dx)
        }
    }
}
