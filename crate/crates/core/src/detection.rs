//! One entry point for every detection method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{
    feature_average_branches, grad_cam, model_cam, normalize_map, ActivationMap, GradTarget, WORKING_RESOLUTION,
};
use crate::models::{Inference, ModelParams, ModelVariant, POSITIVE};
use crate::mpcnn::{beta_from_fc_weights, mpcnn_fuse, stack_branches, MPcnnConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapMethod {
    #[serde(rename = "avg")]
    Average,
    #[serde(rename = "cam")]
    Cam,
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "mpcnn-cam")]
    MpcnnCam,
}

impl MapMethod {
    pub const ALL: [MapMethod; 4] = [MapMethod::Average, MapMethod::Cam, MapMethod::GradCam, MapMethod::MpcnnCam];

    pub fn name(self) -> &'static str {
        match self {
            MapMethod::Average => "avg",
            MapMethod::Cam => "cam",
            MapMethod::GradCam => "gradcam",
            MapMethod::MpcnnCam => "mpcnn-cam",
        }
    }
}

impl fmt::Display for MapMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown map method {s:?} (avg, cam, gradcam, mpcnn-cam)")))
    }
}

/// The eight (model, method) pairs of the published comparison, in its order.
pub const COMPARED_METHODS: [(ModelVariant, MapMethod); 8] = [
    (ModelVariant::Inet, MapMethod::Average),
    (ModelVariant::InetGap, MapMethod::Cam),
    (ModelVariant::Inet, MapMethod::GradCam),
    (ModelVariant::FbnetNogap, MapMethod::Average),
    (ModelVariant::Fbnet, MapMethod::Cam),
    (ModelVariant::FbnetNogap, MapMethod::GradCam),
    (ModelVariant::Fbnet, MapMethod::MpcnnCam),
    (ModelVariant::FbnetNogap, MapMethod::MpcnnCam),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Side of the square grid every map is produced on.
    pub resolution: usize,
    pub grad_target: GradTarget,
    pub mpcnn: MPcnnConfig,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            resolution: WORKING_RESOLUTION,
            grad_target: GradTarget::Logit,
            mpcnn: MPcnnConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMap {
    /// Min-max normalized to `[0, 1]`.
    pub map: ActivationMap,
    /// The raw map was constant.
    pub constant: bool,
    /// Grad-CAM saw an all-zero gradient.
    pub degenerate: bool,
    /// m-PCNN iterations run, when applicable.
    pub iterations: Option<usize>,
    /// m-PCNN stopped at `max_iters` with unfired pixels.
    pub incomplete: bool,
}

impl DetectionMap {
    fn plain(raw: ActivationMap) -> Self {
        let n = normalize_map(&raw);
        DetectionMap {
            map: n.map,
            constant: n.constant,
            degenerate: false,
            iterations: None,
            incomplete: false,
        }
    }
}

/// Positive-class map of one eval-mode inference.
///
/// CAM on a head without GAP uses each feature pixel's own FC weight. m-PCNN
/// weights channels by the FC row on GAP heads and by Grad-CAM channel
/// weights otherwise.
pub fn detection_map(
    params: &ModelParams,
    inference: &Inference,
    method: MapMethod,
    config: &DetectionConfig,
) -> Result<DetectionMap> {
    let r = config.resolution;
    if r == 0 {
        return Err(Error::invalid("detection resolution must be positive"));
    }
    let branches = inference.features.decision_branches();
    match method {
        MapMethod::Average => Ok(DetectionMap::plain(feature_average_branches(&branches, (r, r))?)),
        MapMethod::Cam => Ok(DetectionMap::plain(model_cam(params, &inference.features, POSITIVE, (r, r))?)),
        MapMethod::GradCam => {
            let g = grad_cam(
                params,
                &inference.features,
                &inference.logits,
                POSITIVE,
                config.grad_target,
                (r, r),
            )?;
            let mut d = DetectionMap::plain(g.map);
            d.degenerate = g.degenerate;
            Ok(d)
        }
        MapMethod::MpcnnCam => {
            let weights = if params.variant.has_gap() {
                crate::maps::fc_channel_weights(params, POSITIVE)?
            } else {
                grad_cam(params, &inference.features, &inference.logits, POSITIVE, GradTarget::Logit, (1, 1))?
                    .channel_weights
            };
            let beta = beta_from_fc_weights(&weights, config.mpcnn.beta_scale)?;
            let stack = stack_branches(&branches, r)?;
            let f = mpcnn_fuse(&stack, &beta, &config.mpcnn)?;
            Ok(DetectionMap {
                map: f.map,
                constant: f.constant,
                degenerate: false,
                iterations: Some(f.iterations),
                incomplete: !f.all_fired,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::infer;
    use crate::tensor::Tensor;

    #[test]
    fn method_names_round_trip() {
        for m in MapMethod::ALL {
            assert_eq!(m.name().parse::<MapMethod>().unwrap(), m);
        }
        assert!("grad-cam".parse::<MapMethod>().is_err());
    }

    #[test]
    fn every_method_on_every_variant() {
        let config = DetectionConfig {
            resolution: 16,
            ..DetectionConfig::default()
        };
        let patch: Tensor = Tensor::from_fn(&[7, 16, 16], |i| ((i * 37) % 101) as f32 / 101.0);
        for variant in ModelVariant::ALL {
            let p = ModelParams::init(variant, 3);
            let inf = infer(&p, std::slice::from_ref(&patch)).unwrap().remove(0);
            for m in MapMethod::ALL {
                let d = detection_map(&p, &inf, m, &config).unwrap();
                assert_eq!((d.map.height(), d.map.width()), (16, 16), "{variant} {m}");
                assert!(d.map.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
