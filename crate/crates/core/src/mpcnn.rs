//! Multi-channel pulse-coupled neural network (m-PCNN) fusion.
//!
//! Each of K feature channels drives a feed field `H_k`; the fields are
//! coupled through a shared firing map `Y` and fused multiplicatively:
//!
//! ```text
//! H_k[n] = e^{-α_H}·H_k[n-1] + V_H·(W ∗ Y[n-1]) + S_k
//! U[n]   = Π_k (1 + β_k·H_k[n])
//! Y[n]   = U[n] > T[n-1]
//! T[n]   = e^{-α_T}·T[n-1] + V_T·Y[n]
//! ```
//!
//! All state is kept in `f64`: with 96 channels the product `U` routinely
//! exceeds the 32-bit range.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maps::{normalize_values, resize_nearest, ActivationMap};
use crate::tensor::Tensor;

/// Square inverse-distance coupling kernel with a zero center.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkingKernel {
    size: usize,
    weights: Vec<f64>,
}

impl LinkingKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at offset `(di, dj)` from the center.
    pub fn at(&self, di: isize, dj: isize) -> f64 {
        let r = (self.size / 2) as isize;
        self.weights[((di + r) * self.size as isize + dj + r) as usize]
    }

    /// `(di, dj, w)` for every nonzero weight.
    fn taps(&self) -> Vec<(isize, isize, f64)> {
        let r = (self.size / 2) as isize;
        let mut out = Vec::new();
        for di in -r..=r {
            for dj in -r..=r {
                let w = self.at(di, dj);
                if w != 0.0 {
                    out.push((di, dj, w));
                }
            }
        }
        out
    }
}

/// `W[i][j] = 1/√(di² + dj²)` around the center, `0` at the center.
pub fn linking_kernel(size: usize) -> Result<LinkingKernel> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::invalid(format!("linking kernel size must be odd and positive, got {size}")));
    }
    let r = (size / 2) as isize;
    let mut weights = Vec::with_capacity(size * size);
    for di in -r..=r {
        for dj in -r..=r {
            let d2 = (di * di + dj * dj) as f64;
            weights.push(if d2 == 0.0 { 0.0 } else { 1.0 / d2.sqrt() });
        }
    }
    Ok(LinkingKernel { size, weights })
}

/// `β_k = scale·(w_k − min w)/(max w − min w)`; constant weights give
/// `scale/2` everywhere.
pub fn beta_from_fc_weights(weights: &[f64], scale: f64) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::invalid("no channel weights"));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("beta scale must be positive, got {scale}")));
    }
    if let Some(k) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("channel weight {k} is {}", weights[k])));
    }
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![scale / 2.0; weights.len()]);
    }
    Ok(weights.iter().map(|&w| scale * (w - lo) / (hi - lo)).collect())
}

/// User-facing fusion settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MPcnnConfig {
    pub alpha_h: f64,
    pub alpha_t: f64,
    pub v_h: f64,
    pub v_t: f64,
    pub t_init: f64,
    pub max_iters: usize,
    pub beta_scale: f64,
    pub linking_size: usize,
}

impl Default for MPcnnConfig {
    fn default() -> Self {
        MPcnnConfig {
            alpha_h: 0.3,
            alpha_t: 0.4,
            v_h: 0.2,
            v_t: 20.0,
            t_init: 1.0,
            max_iters: 50,
            beta_scale: 0.2,
            linking_size: 15,
        }
    }
}

/// Constants of one fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct MPcnnParams {
    pub alpha_h: f64,
    pub alpha_t: f64,
    pub v_h: f64,
    pub v_t: f64,
    pub beta: Vec<f64>,
    pub linking: LinkingKernel,
    pub max_iters: usize,
}

impl MPcnnParams {
    pub fn new(config: &MPcnnConfig, beta: Vec<f64>) -> Result<Self> {
        let p = MPcnnParams {
            alpha_h: config.alpha_h,
            alpha_t: config.alpha_t,
            v_h: config.v_h,
            v_t: config.v_t,
            beta,
            linking: linking_kernel(config.linking_size)?,
            max_iters: config.max_iters,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_t > 0.0) {
            return Err(Error::invalid(format!("V_T must be positive, got {}", self.v_t)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.beta.is_empty() {
            return Err(Error::invalid("beta is empty"));
        }
        for (name, v) in [("alpha_H", self.alpha_h), ("alpha_T", self.alpha_t), ("V_H", self.v_h)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} is {v}")));
            }
        }
        if let Some(k) = self.beta.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite(format!("beta[{k}] is {}", self.beta[k])));
        }
        Ok(())
    }
}

/// Evolving fields of one fusion. `feed` is K×H×W; the rest are H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct MPcnnState {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub feed: Vec<f64>,
    pub internal: Vec<f64>,
    pub firing: Vec<bool>,
    pub threshold: Vec<f64>,
    pub fired: Vec<bool>,
    pub n: usize,
}

impl MPcnnState {
    /// `H[0] = h0`, `Y[0] = 0`, `T[0] = t_init`, `U[0] = 1`.
    pub fn new(channels: usize, height: usize, width: usize, h0: Vec<f64>, t_init: f64) -> Result<Self> {
        let px = height * width;
        if h0.len() != channels * px {
            return Err(Error::shape(format!("{channels}x{height}x{width} feed"), h0.len()));
        }
        Ok(MPcnnState {
            channels,
            height,
            width,
            feed: h0,
            internal: vec![1.0; px],
            firing: vec![false; px],
            threshold: vec![t_init; px],
            fired: vec![false; px],
            n: 0,
        })
    }

    pub fn all_fired(&self) -> bool {
        self.fired.iter().all(|&f| f)
    }

    pub fn fired_count(&self) -> usize {
        self.fired.iter().filter(|&&f| f).count()
    }

    /// `W ∗ Y` with zero padding, same size as `Y`.
    fn linking_input(&self, taps: &[(isize, isize, f64)]) -> Vec<f64> {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = vec![0.0; self.height * self.width];
        if !self.firing.iter().any(|&y| y) {
            return out;
        }
        out.par_chunks_mut(self.width).enumerate().for_each(|(i, row)| {
            let i = i as isize;
            for (j, o) in row.iter_mut().enumerate() {
                let j = j as isize;
                let mut acc = 0.0;
                for &(di, dj, wt) in taps {
                    let (y, x) = (i + di, j + dj);
                    if y >= 0 && y < h && x >= 0 && x < w && self.firing[(y * w + x) as usize] {
                        acc += wt;
                    }
                }
                *o = acc;
            }
        });
        out
    }
}

/// One iteration, updating `state` in place.
pub fn mpcnn_step(state: &mut MPcnnState, stimulus: &[f64], params: &MPcnnParams) -> Result<()> {
    let (k, px) = (state.channels, state.height * state.width);
    if params.channels() != k {
        return Err(Error::shape(format!("{k} betas"), params.channels()));
    }
    if stimulus.len() != k * px || state.feed.len() != k * px {
        return Err(Error::shape(format!("{k}x{}x{} stimulus", state.height, state.width), stimulus.len()));
    }
    let link = state.linking_input(&params.linking.taps());
    let decay_h = (-params.alpha_h).exp();
    let decay_t = (-params.alpha_t).exp();

    let feed = &mut state.feed;
    feed.par_chunks_mut(px)
        .zip(stimulus.par_chunks(px))
        .for_each(|(hk, sk)| {
            for ((h, &s), &l) in hk.iter_mut().zip(sk).zip(&link) {
                *h = decay_h * *h + params.v_h * l + s;
            }
        });

    let u = &mut state.internal;
    u.fill(1.0);
    for (hk, &b) in feed.chunks(px).zip(&params.beta) {
        for (u, &h) in u.iter_mut().zip(hk) {
            *u *= 1.0 + b * h;
        }
    }
    if let Some(p) = u.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "m-PCNN internal state is {} at iteration {}, pixel ({}, {})",
            u[p],
            state.n + 1,
            p / state.width,
            p % state.width
        )));
    }
    for p in 0..px {
        let y = u[p] > state.threshold[p];
        state.firing[p] = y;
        state.threshold[p] = decay_t * state.threshold[p] + if y { params.v_t } else { 0.0 };
        state.fired[p] |= y;
    }
    state.n += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    /// Normalized `U` at the last iteration.
    pub map: ActivationMap,
    /// `U` was the same at every pixel; `map` is then all zeros.
    pub constant: bool,
    pub iterations: usize,
    /// Every pixel fired before `max_iters` ran out.
    pub all_fired: bool,
    pub fired_fraction: f64,
}

/// Runs the iteration on a K×H×W stack until every pixel has fired or
/// `max_iters` is reached. The stack is jointly min-max normalized and used
/// both as the stimulus and as the initial feed.
pub fn mpcnn_fuse(channels: &Tensor<f64>, beta: &[f64], config: &MPcnnConfig) -> Result<FusionResult> {
    let (k, h, w) = channels.dims3()?;
    if k == 0 {
        return Err(Error::invalid("m-PCNN needs at least one channel"));
    }
    if beta.len() != k {
        return Err(Error::shape(format!("{k} betas"), beta.len()));
    }
    if !channels.is_finite() {
        return Err(Error::NonFinite("m-PCNN input channels".into()));
    }
    let params = MPcnnParams::new(config, beta.to_vec())?;

    let lo = channels.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = channels.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let stimulus: Vec<f64> = if hi > lo {
        channels.data().iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; channels.len()]
    };

    let mut state = MPcnnState::new(k, h, w, stimulus.clone(), config.t_init)?;
    while state.n < params.max_iters {
        mpcnn_step(&mut state, &stimulus, &params)?;
        if state.all_fired() {
            break;
        }
    }
    let norm = normalize_values(h, w, &state.internal);
    Ok(FusionResult {
        map: norm.map,
        constant: norm.constant,
        iterations: state.n,
        all_fired: state.all_fired(),
        fired_fraction: state.fired_count() as f64 / (h * w) as f64,
    })
}

/// Resizes every channel of every branch to `resolution`² and stacks them in
/// branch order.
pub fn stack_branches(branches: &[&Tensor], resolution: usize) -> Result<Tensor<f64>> {
    let mut data = Vec::new();
    let mut k = 0;
    for b in branches {
        let (c, h, w) = b.dims3()?;
        for ch in 0..c {
            let m = ActivationMap::new(h, w, b.channel(ch).to_vec())?;
            let r = resize_nearest(&m, resolution, resolution)?;
            data.extend(r.values().iter().map(|&v| v as f64));
        }
        k += c;
    }
    Tensor::new(vec![k, resolution, resolution], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_size_three() {
        let k = linking_kernel(3).unwrap();
        assert_eq!(k.at(0, 0), 0.0);
        assert_eq!(k.at(0, 1), 1.0);
        assert_eq!(k.at(-1, 0), 1.0);
        assert!((k.at(1, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(linking_kernel(1).unwrap().weights(), &[0.0]);
        assert!(linking_kernel(4).is_err());
        assert!(linking_kernel(0).is_err());
    }

    #[test]
    fn kernel_sum_matches_brute_force() {
        let k = linking_kernel(15).unwrap();
        assert_eq!(k.weights().len(), 225);
        let mut oracle = 0.0f64;
        for a in 0..15i32 {
            for b in 0..15i32 {
                let (x, y) = ((a - 7) as f64, (b - 7) as f64);
                if a != 7 || b != 7 {
                    oracle += 1.0 / (x * x + y * y).sqrt();
                }
            }
        }
        let sum: f64 = k.weights().iter().sum();
        assert!((sum - oracle).abs() < 1e-9);
        for di in -7..=7 {
            for dj in -7..=7 {
                assert_eq!(k.at(di, dj), k.at(dj, -di));
                assert_eq!(k.at(di, dj), k.at(-di, dj));
            }
        }
    }

    #[test]
    fn beta_endpoints() {
        assert_eq!(beta_from_fc_weights(&[0.0, 1.0], 0.2).unwrap(), vec![0.0, 0.2]);
        assert_eq!(beta_from_fc_weights(&[3.0; 4], 0.2).unwrap(), vec![0.1; 4]);
        assert!(beta_from_fc_weights(&[0.0, f64::NAN], 0.2).is_err());
        assert!(beta_from_fc_weights(&[0.0, 1.0], 0.0).is_err());
    }

    fn params(beta: Vec<f64>, linking: usize) -> MPcnnParams {
        let config = MPcnnConfig {
            linking_size: linking,
            ..MPcnnConfig::default()
        };
        MPcnnParams::new(&config, beta).unwrap()
    }

    #[test]
    fn zero_beta_gives_unit_state() {
        let s: Vec<f64> = (0..2 * 9).map(|i| i as f64 / 17.0).collect();
        let p = params(vec![0.0, 0.0], 3);
        let mut st = MPcnnState::new(2, 3, 3, s.clone(), 1.0).unwrap();
        mpcnn_step(&mut st, &s, &p).unwrap();
        assert!(st.internal.iter().all(|&u| u == 1.0));
        assert!(st.firing.iter().all(|&y| !y));
    }

    #[test]
    fn first_step_has_no_linking() {
        let s: Vec<f64> = (0..16).map(|i| (i % 5) as f64 / 4.0).collect();
        let p = params(vec![0.1], 3);
        let mut st = MPcnnState::new(1, 4, 4, s.clone(), 1.0).unwrap();
        mpcnn_step(&mut st, &s, &p).unwrap();
        let d = (-0.3f64).exp();
        for (h, &x) in st.feed.iter().zip(&s) {
            assert_eq!(*h, d * x + x);
        }
    }

    #[test]
    fn uniform_field_fires_at_once() {
        let s = vec![0.5; 25];
        let p = params(vec![0.2], 3);
        let mut st = MPcnnState::new(1, 5, 5, s.clone(), 0.0).unwrap();
        mpcnn_step(&mut st, &s, &p).unwrap();
        assert!(st.firing.iter().all(|&y| y));
        assert!(st.all_fired());
    }

    #[test]
    fn constant_channel_is_flagged() {
        let c = Tensor::filled(&[1, 6, 6], 0.4);
        let r = mpcnn_fuse(&c, &[0.1], &MPcnnConfig::default()).unwrap();
        assert!(r.constant);
        assert!(r.map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overflow_is_reported() {
        let config = MPcnnConfig {
            linking_size: 3,
            ..MPcnnConfig::default()
        };
        let c = Tensor::from_fn(&[400, 2, 2], |i| (i % 4) as f64);
        let err = mpcnn_fuse(&c, &vec![1e300; 400], &config);
        assert!(matches!(err, Err(Error::NonFinite(ref m)) if m.contains("iteration 1")), "{err:?}");
    }

    #[test]
    fn branches_stack_to_common_grid() {
        let a: Tensor = Tensor::from_fn(&[2, 10, 10], |i| i as f32);
        let b: Tensor = Tensor::from_fn(&[3, 6, 6], |i| -(i as f32));
        let s = stack_branches(&[&a, &b], 16).unwrap();
        assert_eq!(s.shape(), &[5, 16, 16]);
        assert_eq!(s.channel(0)[0], 0.0);
        assert_eq!(s.channel(4)[16 * 16 - 1], -107.0);
    }
}
