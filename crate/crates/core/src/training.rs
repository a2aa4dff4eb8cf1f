//! Balanced mini-batch SGD training with periodic validation and
//! best-checkpoint selection.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{threshold_sweep, ClassificationMetrics};
use crate::models::{infer, ForwardOptions, ForwardPass, ModelParams, CLASSES, IN_CHANNELS, PATCH, POSITIVE};
use crate::nn::optim::sgd_momentum_step;
use crate::nn::{softmax, softmax_cross_entropy, OptState, SgdConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Mini-batch steps.
    pub iterations: u64,
    pub batch_size: usize,
    pub positives_per_batch: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub dropout_rate: f32,
    pub seed: u64,
    /// Random dihedral transform of every positive in a batch.
    pub augment: bool,
    /// Validation period in steps; 0 validates only after the last step.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 128,
            positives_per_batch: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            dropout_rate: 0.5,
            seed: 0,
            augment: false,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.positives_per_batch == 0 || self.positives_per_batch >= self.batch_size {
            return Err(Error::invalid(format!(
                "positives per batch must be in 1..{}, got {}",
                self.batch_size, self.positives_per_batch
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Draws `n_pos` positives and `n_neg` negatives, uniformly and without
/// replacement unless a pool is smaller than its draw, then shuffles.
/// Entries are `(index, is_positive)`.
pub fn balanced_minibatch<R: Rng>(
    positives: &[usize],
    negatives: &[usize],
    n_pos: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<Vec<(usize, bool)>> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid(format!(
            "balanced batches need both classes ({} positive, {} negative samples)",
            positives.len(),
            negatives.len()
        )));
    }
    let mut batch = Vec::with_capacity(n_pos + n_neg);
    for (pool, k, label) in [(positives, n_pos, true), (negatives, n_neg, false)] {
        if pool.len() >= k {
            batch.extend(rand::seq::index::sample(rng, pool.len(), k).into_iter().map(|i| (pool[i], label)));
        } else {
            batch.extend((0..k).map(|_| (pool[rng.gen_range(0..pool.len())], label)));
        }
    }
    batch.shuffle(rng);
    Ok(batch)
}

/// Dihedral transform `k` in `0..8` of every channel: `k % 4` quarter turns
/// counter-clockwise, then a horizontal flip when `k ≥ 4`.
pub fn dihedral(patch: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = patch.dims3()?;
    if h != w {
        return Err(Error::shape("square patch", format!("{h}x{w}")));
    }
    let n = h;
    let mut out = Tensor::zeros(&[c, n, n]);
    for ch in 0..c {
        let src = patch.channel(ch);
        let dst = out.channel_mut(ch);
        for i in 0..n {
            for j in 0..n {
                let (mut y, mut x) = (i, if k >= 4 { n - 1 - j } else { j });
                for _ in 0..k % 4 {
                    (y, x) = (x, n - 1 - y);
                }
                dst[i * n + j] = src[y * n + x];
            }
        }
    }
    Ok(out)
}

pub fn augment_positive<R: Rng>(patch: &Tensor, rng: &mut R) -> Result<Tensor> {
    dihedral(patch, rng.gen_range(0..8))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    /// Mean loss over the steps since the previous evaluation.
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_threshold: f64,
    pub val_tp_rate: f64,
    pub val_tn_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub variant: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Step whose parameters were returned.
    pub best_step: u64,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// Hex SHA-256 of the little-endian bits of every step loss.
    pub fn loss_digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.steps {
            h.update(s.loss.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Line-delimited JSON: a config header, one line per step and per
    /// evaluation in step order, and a summary.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            variant: &'a str,
            seed: u64,
            config: &'a TrainConfig,
        }
        let header = Header {
            variant: &self.variant,
            seed: self.seed,
            config: &self.config,
        };
        writeln!(out, "{}", serde_json::to_string(&header).map_err(std::io::Error::other)?)?;
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            writeln!(out, "{}", serde_json::json!({ "step": s.step, "loss": s.loss }))?;
            while let Some(e) = evals.next_if(|e| e.step == s.step) {
                writeln!(out, "{}", serde_json::json!({ "eval": e }))?;
            }
        }
        let summary = serde_json::json!({
            "summary": {
                "best_step": self.best_step,
                "loss_digest": self.loss_digest(),
            }
        });
        writeln!(out, "{summary}")
    }
}

/// Positive-class probabilities of eval-mode inference, in chunks.
pub fn positive_scores(params: &ModelParams, ds: &Dataset) -> Result<Vec<f64>> {
    const CHUNK: usize = 256;
    let mut scores = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(CHUNK) {
        let patches: Vec<Tensor> = (start..(start + CHUNK).min(ds.len())).map(|i| ds.patch(i)).collect();
        for inf in infer(params, &patches)? {
            scores.push(softmax(&inf.logits)[POSITIVE]);
        }
    }
    Ok(scores)
}

fn validate_on(params: &ModelParams, val: &Dataset) -> Result<ClassificationMetrics> {
    let scores = positive_scores(params, val)?;
    let sweep = threshold_sweep(&scores, val.labels())?;
    ClassificationMetrics::at_threshold(&scores, val.labels(), sweep.threshold)
}

fn check_dataset(ds: &Dataset, what: &str) -> Result<()> {
    if ds.dims() != (IN_CHANNELS, PATCH, PATCH) {
        return Err(Error::shape(
            format!("{what} records of {IN_CHANNELS}x{PATCH}x{PATCH}"),
            format!("{:?}", ds.dims()),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at `log.best_step`.
    pub params: ModelParams,
    pub log: TrainLog,
}

/// One SGD step on `batch`; returns the mean cross-entropy loss.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptState,
    batch: &[Tensor],
    labels: &[usize],
    dropout_rate: f32,
    dropout_seed: u64,
) -> Result<f64> {
    let pass = ForwardPass::run(params, batch, ForwardOptions::train(dropout_rate, dropout_seed))?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(batch.len());
    for (l, &y) in pass.logits_wide.iter().zip(labels) {
        if y >= CLASSES {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        let (li, g) = softmax_cross_entropy(l, y);
        loss += li / n;
        dlogits.push(g.iter().map(|v| (v / n) as f32).collect());
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let mut grads = ModelParams::zeroed(params.variant);
    pass.backward(params, &dlogits, &mut grads, false)?;
    pass.apply_running_stats(params);
    let g: Vec<&Tensor> = grads.trainable().into_iter().map(|(_, t)| t).collect();
    let mut p: Vec<&mut Tensor> = params.trainable_mut().into_iter().map(|(_, t)| t).collect();
    sgd_momentum_step(&mut p, &g, opt)?;
    Ok(loss)
}

/// Trains `model` on `train_set`. With a validation set, the parameters with
/// the best swept validation IoU among the periodic evaluations are returned
/// (latest on ties); otherwise the final parameters.
pub fn train(
    model: ModelParams,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    mut progress: impl FnMut(&EvalRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    check_dataset(train_set, "training")?;
    if let Some(v) = val_set {
        check_dataset(v, "validation")?;
    }
    let started = Instant::now();
    let positives = train_set.positives();
    let negatives = train_set.negatives();
    if config.iterations > 0 && (positives.is_empty() || negatives.is_empty()) {
        return Err(Error::invalid("training set needs both classes"));
    }

    let mut params = model;
    let mut opt = OptState::new(
        SgdConfig {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
        },
        params.trainable().iter().map(|(_, t)| t.shape()),
    );
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
    aug_rng.set_stream(2);

    let mut log = TrainLog {
        variant: params.variant.to_string(),
        seed: config.seed,
        config: config.clone(),
        steps: Vec::with_capacity(config.iterations as usize),
        evals: Vec::new(),
        best_step: 0,
        wall_clock_secs: 0.0,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    let n_neg = config.batch_size - config.positives_per_batch;
    let mut since_eval = (0.0, 0u64);

    for step in 1..=config.iterations {
        let picks = balanced_minibatch(&positives, &negatives, config.positives_per_batch, n_neg, &mut batch_rng)?;
        let dropout_seed: u64 = batch_rng.gen();
        let mut batch = Vec::with_capacity(picks.len());
        let mut labels = Vec::with_capacity(picks.len());
        for &(i, pos) in &picks {
            let p = train_set.patch(i);
            batch.push(if pos && config.augment { augment_positive(&p, &mut aug_rng)? } else { p });
            labels.push(pos as usize);
        }
        let loss = train_step(&mut params, &mut opt, &batch, &labels, config.dropout_rate, dropout_seed)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                other => other,
            })?;
        log.steps.push(StepRecord { step, loss });
        since_eval = (since_eval.0 + loss, since_eval.1 + 1);

        let due = step == config.iterations || (config.eval_every > 0 && step % config.eval_every == 0);
        if let (Some(val), true) = (val_set, due) {
            let m = validate_on(&params, val)?;
            let rec = EvalRecord {
                step,
                train_loss: since_eval.0 / since_eval.1 as f64,
                val_iou: m.iou,
                val_threshold: m.threshold,
                val_tp_rate: m.tp_rate,
                val_tn_rate: m.tn_rate,
            };
            since_eval = (0.0, 0);
            progress(&rec);
            if best.as_ref().is_none_or(|(b, _)| m.iou >= *b) {
                best = Some((m.iou, params.clone()));
                log.best_step = step;
            }
            log.evals.push(rec);
        }
    }
    let params = match best {
        Some((_, p)) => p,
        None => {
            log.best_step = config.iterations;
            params
        }
    };
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 5, 5], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn batch_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<usize> = (0..50).collect();
        let neg: Vec<usize> = (50..500).collect();
        let b = balanced_minibatch(&pos, &neg, 8, 120, &mut rng).unwrap();
        assert_eq!(b.len(), 128);
        assert_eq!(b.iter().filter(|(_, p)| *p).count(), 8);
        assert!(b.iter().all(|&(i, p)| p == (i < 50)));
        let mut uniq: Vec<usize> = b.iter().map(|x| x.0).collect();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 128);
    }

    #[test]
    fn small_pool_uses_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = balanced_minibatch(&[0, 1, 2], &[3, 4, 5, 6], 8, 120, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|(_, p)| *p).count(), 8);
        assert!(balanced_minibatch(&[], &[1], 8, 120, &mut rng).is_err());
    }

    #[test]
    fn dihedral_group() {
        let p = patch(2);
        assert_eq!(dihedral(&p, 0).unwrap(), p);
        let r1 = dihedral(&p, 1).unwrap();
        assert_eq!(dihedral(&r1, 1).unwrap(), dihedral(&p, 2).unwrap());
        let all: Vec<Tensor> = (0..8).map(|k| dihedral(&p, k).unwrap()).collect();
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(all[a], all[b], "{a} vs {b}");
            }
        }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            positives_per_batch: 128,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let d = TrainConfig::default();
        assert_eq!((d.batch_size, d.positives_per_batch, d.learning_rate, d.momentum, d.dropout_rate), (128, 8, 0.01, 0.9, 0.5));
    }
}
