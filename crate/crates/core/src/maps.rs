//! Activation maps: channelwise feature averaging, CAM, Grad-CAM, plus the
//! resizing and normalization every detection head shares.
//!
//! Maps from FB-Net's three branches (10×10, 8×8, 6×6) are resized to a
//! common working resolution with [`resize_nearest`] and then summed.

use crate::error::{Error, Result};
use crate::models::{head_input_gradient, FeatureBundle, ModelParams, CLASSES};
use crate::nn::softmax;
use crate::tensor::{shape_str, Tensor};

/// Side of the square grid all detection maps are compared on.
pub const WORKING_RESOLUTION: usize = 256;

/// A single-channel map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ActivationMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height * width != values.len() || height == 0 || width == 0 {
            return Err(Error::shape(
                format!("{height}x{width} map with {} values", height * width),
                format!("{} values", values.len()),
            ));
        }
        Ok(ActivationMap { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ActivationMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    fn from_f64(height: usize, width: usize, acc: &[f64]) -> Self {
        ActivationMap {
            height,
            width,
            values: acc.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn is_constant(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }

    pub fn bit_eq(&self, other: &ActivationMap) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Nearest-neighbour resampling; output pixel `(i, j)` reads source pixel
/// `(⌊i·H/target_h⌋, ⌊j·W/target_w⌋)`.
pub fn resize_nearest(map: &ActivationMap, target_h: usize, target_w: usize) -> Result<ActivationMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid(format!("resize target {target_h}x{target_w} is empty")));
    }
    let (h, w) = (map.height, map.width);
    let cols: Vec<usize> = (0..target_w).map(|j| j * w / target_w).collect();
    let mut values = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let row = &map.values[(i * h / target_h) * w..][..w];
        values.extend(cols.iter().map(|&c| row[c]));
    }
    Ok(ActivationMap {
        height: target_h,
        width: target_w,
        values,
    })
}

/// Min-max rescaled map and whether the input was constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub map: ActivationMap,
    /// A constant input maps to all zeros.
    pub constant: bool,
}

pub fn normalize_map(map: &ActivationMap) -> Normalized {
    let wide: Vec<f64> = map.values.iter().map(|&v| v as f64).collect();
    normalize_values(map.height, map.width, &wide)
}

/// [`normalize_map`] over a wide-valued grid, for maps whose raw range does
/// not fit in 32 bits.
pub fn normalize_values(height: usize, width: usize, values: &[f64]) -> Normalized {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !(hi - lo).is_finite() {
        return Normalized {
            map: ActivationMap::zeros(height, width),
            constant: true,
        };
    }
    let span = hi - lo;
    let values = values
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0) as f32)
        .collect();
    Normalized {
        map: ActivationMap { height, width, values },
        constant: false,
    }
}

fn plane(features: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = features.dims3()?;
    if c == 0 {
        return Err(Error::invalid("feature stack has no channels"));
    }
    Ok((c, h, w))
}

/// `Σ_k w_k·F_k` per pixel at native resolution, accumulated in `f64`.
fn weighted_sum(features: &Tensor, weights: &[f64]) -> Result<Vec<f64>> {
    let (c, h, w) = plane(features)?;
    if weights.len() != c {
        return Err(Error::shape(format!("{c} channel weights"), format!("{} weights", weights.len())));
    }
    let mut acc = vec![0.0f64; h * w];
    for (k, &wk) in weights.iter().enumerate() {
        for (a, &v) in acc.iter_mut().zip(features.channel(k)) {
            *a += wk * v as f64;
        }
    }
    Ok(acc)
}

/// Resizes each branch map to `target` and sums them. A single branch whose
/// size already matches is returned as computed.
fn combine(maps: Vec<ActivationMap>, target: (usize, usize)) -> Result<ActivationMap> {
    let mut acc = vec![0.0f64; target.0 * target.1];
    for m in &maps {
        let r = resize_nearest(m, target.0, target.1)?;
        for (a, &v) in acc.iter_mut().zip(&r.values) {
            *a += v as f64;
        }
    }
    Ok(ActivationMap::from_f64(target.0, target.1, &acc))
}

fn check_branches(branches: &[&Tensor]) -> Result<usize> {
    if branches.is_empty() {
        return Err(Error::invalid("no feature branches"));
    }
    let mut total = 0;
    for b in branches {
        total += plane(b)?.0;
    }
    Ok(total)
}

/// Per-pixel mean over channels: `C×H×W → H×W`.
pub fn feature_average(features: &Tensor) -> Result<ActivationMap> {
    let (c, h, w) = plane(features)?;
    let acc = weighted_sum(features, &vec![1.0 / c as f64; c])?;
    Ok(ActivationMap::from_f64(h, w, &acc))
}

/// Channel mean over every branch: each branch's channel sum is resized to
/// `target`, the sums are added, and the total is divided by the overall
/// channel count.
pub fn feature_average_branches(branches: &[&Tensor], target: (usize, usize)) -> Result<ActivationMap> {
    let total = check_branches(branches)?;
    let uniform = vec![1.0 / total as f64; total];
    cam(branches, &uniform, target)
}

/// Class activation map. `weights` holds one weight per channel across all
/// branches in concatenation order; each branch map is computed at native
/// resolution with its own slice of weights, resized to `target` and summed.
pub fn cam(branches: &[&Tensor], weights: &[f64], target: (usize, usize)) -> Result<ActivationMap> {
    let total = check_branches(branches)?;
    if weights.len() != total {
        return Err(Error::shape(format!("{total} channel weights"), format!("{} weights", weights.len())));
    }
    let mut off = 0;
    let mut maps = Vec::with_capacity(branches.len());
    for b in branches {
        let (c, h, w) = plane(b)?;
        maps.push(ActivationMap::from_f64(h, w, &weighted_sum(b, &weights[off..off + c])?));
        off += c;
    }
    combine(maps, target)
}

/// CAM generalized to a head that sees every feature pixel: `weights` holds
/// the FC row laid out like the concatenated, flattened branches, and the map
/// is `Σ_k w_{k,i,j}·F_k(i,j)`. Summing this map over pixels (before any
/// resize) and adding the bias gives the logit.
pub fn pixel_cam(branches: &[&Tensor], weights: &[f32], target: (usize, usize)) -> Result<ActivationMap> {
    check_branches(branches)?;
    let total: usize = branches.iter().map(|b| b.len()).sum();
    if weights.len() != total {
        return Err(Error::shape(format!("{total} pixel weights"), format!("{} weights", weights.len())));
    }
    let mut off = 0;
    let mut maps = Vec::with_capacity(branches.len());
    for b in branches {
        let (c, h, w) = plane(b)?;
        let mut acc = vec![0.0f64; h * w];
        for k in 0..c {
            let wk = &weights[off + k * h * w..][..h * w];
            for ((a, &v), &wv) in acc.iter_mut().zip(b.channel(k)).zip(wk) {
                *a += wv as f64 * v as f64;
            }
        }
        maps.push(ActivationMap::from_f64(h, w, &acc));
        off += b.len();
    }
    combine(maps, target)
}

/// What Grad-CAM differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradTarget {
    /// The raw class logit.
    #[default]
    Logit,
    /// The class softmax probability evaluated in 32-bit floats, which
    /// saturates to a zero gradient when the softmax rounds to 0 or 1.
    Probability,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    pub map: ActivationMap,
    /// GAP of the gradient per channel, in branch concatenation order.
    pub channel_weights: Vec<f64>,
    /// Every gradient entry was exactly zero; `map` is then all zeros.
    pub degenerate: bool,
}

/// Cotangent of the chosen target with respect to the logits.
pub fn target_cotangent(logits: &[f32], class: usize, target: GradTarget) -> Result<Vec<f32>> {
    if class >= CLASSES || logits.len() != CLASSES {
        return Err(Error::invalid(format!("class {class} out of range for {} logits", logits.len())));
    }
    Ok(match target {
        GradTarget::Logit => (0..CLASSES).map(|c| (c == class) as u8 as f32).collect(),
        GradTarget::Probability => {
            let p: Vec<f32> = softmax(logits).into_iter().map(|v| v as f32).collect();
            (0..CLASSES)
                .map(|c| {
                    let delta = (c == class) as u8 as f32;
                    p[class] * (delta - p[c])
                })
                .collect()
        }
    })
}

/// Grad-CAM from an eval-mode forward pass: the target's gradient with
/// respect to each decision branch, GAP'd into channel weights, combined as
/// in [`cam`].
pub fn grad_cam(
    params: &ModelParams,
    features: &FeatureBundle,
    logits: &[f32],
    class: usize,
    target: GradTarget,
    resolution: (usize, usize),
) -> Result<GradCam> {
    let dlogits = target_cotangent(logits, class, target)?;
    let grads = head_input_gradient(params, &dlogits)?;
    let branches = features.decision_branches();
    let mut channel_weights = Vec::new();
    let mut degenerate = true;
    for (g, f) in grads.iter().zip(&branches) {
        if g.shape() != f.shape() {
            return Err(Error::shape(shape_str(f.shape()), shape_str(g.shape())));
        }
        let (c, h, w) = g.dims3()?;
        degenerate &= g.data().iter().all(|&v| v == 0.0);
        for k in 0..c {
            let s: f64 = g.channel(k).iter().map(|&v| v as f64).sum();
            channel_weights.push(s / (h * w) as f64);
        }
    }
    let map = if degenerate {
        ActivationMap::zeros(resolution.0, resolution.1)
    } else {
        cam(&branches, &channel_weights, resolution)?
    };
    Ok(GradCam {
        map,
        channel_weights,
        degenerate,
    })
}

/// Per-channel CAM weights of `class` for a GAP head: the FC row.
pub fn fc_channel_weights(params: &ModelParams, class: usize) -> Result<Vec<f64>> {
    if !params.variant.has_gap() {
        return Err(Error::Variant {
            expected: "a GAP head (inet_gap or fbnet)".into(),
            found: params.variant.to_string(),
        });
    }
    if class >= params.fc.classes() {
        return Err(Error::invalid(format!("class {class} out of range")));
    }
    Ok(params.fc.row(class).iter().map(|&v| v as f64).collect())
}

/// CAM for any head: channel weights for GAP heads, [`pixel_cam`] otherwise.
pub fn model_cam(
    params: &ModelParams,
    features: &FeatureBundle,
    class: usize,
    resolution: (usize, usize),
) -> Result<ActivationMap> {
    let branches = features.decision_branches();
    if params.variant.has_gap() {
        cam(&branches, &fc_channel_weights(params, class)?, resolution)
    } else {
        if class >= params.fc.classes() {
            return Err(Error::invalid(format!("class {class} out of range")));
        }
        pixel_cam(&branches, params.fc.row(class), resolution)
    }
}
