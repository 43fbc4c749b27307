//! Spatial confidence maps and their request-map complements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, ScalarMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
#[derive(Default)]
pub enum GeneratorConfig {
    /// Confidence is the clamped objectness channel, which is also the
    /// channel the detection decoder scores.
    #[default]
    Channel0Passthrough,
    /// `logistic(w . f + b)` per cell.
    LinearReadout { weights: Vec<f64>, bias: f64 },
}


fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn generate_confidence(features: &FeatureMap, cfg: &GeneratorConfig) -> Result<ScalarMap> {
    let shape = features.shape();
    let values = match cfg {
        GeneratorConfig::Channel0Passthrough => features.channel_plane(0),
        GeneratorConfig::LinearReadout { weights, bias } => {
            if weights.len() != shape.channels {
                return Err(Error::config(format!(
                    "linear readout has {} weights for {} channels",
                    weights.len(),
                    shape.channels
                )));
            }
            (0..shape.cells())
                .map(|flat| {
                    let z: f64 = features
                        .cell(flat)
                        .iter()
                        .zip(weights)
                        .map(|(f, w)| f * w)
                        .sum();
                    logistic(z + bias)
                })
                .collect()
        }
    };
    ScalarMap::from_clamped(shape.height, shape.width, values)
}

/// `R = 1 - C`: where an agent wants help.
pub fn request_map(confidence: &ScalarMap) -> ScalarMap {
    complement(confidence)
}

/// Receiver-side recovery of a sender's confidence, `C = 1 - R`.
pub fn confidence_from_request(request: &ScalarMap) -> ScalarMap {
    complement(request)
}

fn complement(m: &ScalarMap) -> ScalarMap {
    m.map(|v| 1.0 - v)
        .expect("complement of a unit-interval map stays in range")
}
