//! Per-node input features: `(x, y, angle)` under each of the eight square symmetries.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::instance::{Instance, Symmetry};
use crate::neural::Tensor;

pub const FEATURES_PER_NODE: usize = 24;
pub const BASE_FEATURES: usize = 3;

/// How the angular third feature is computed from `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleFeature {
    /// `atan2(y, x)`, in `[0, π/2]` on the unit square; 0 at the origin.
    #[default]
    Atan2,
    /// `atanh(y / x)` with the ratio clamped into the open interval (-1, 1).
    Atanh,
}

const ATANH_CLAMP: f64 = 1.0 - 1e-6;

impl AngleFeature {
    pub fn eval(self, x: f64, y: f64) -> f64 {
        match self {
            AngleFeature::Atan2 => {
                if x == 0.0 && y == 0.0 {
                    0.0
                } else {
                    y.atan2(x)
                }
            }
            AngleFeature::Atanh => {
                let ratio = if x == 0.0 {
                    if y == 0.0 {
                        0.0
                    } else {
                        ATANH_CLAMP
                    }
                } else {
                    (y / x).clamp(-ATANH_CLAMP, ATANH_CLAMP)
                };
                ratio.atanh()
            }
        }
    }
}

/// `N x 24` feature matrix; the instance must already lie in the unit square.
pub fn featurize(instance: &Instance, angle: AngleFeature) -> Result<Tensor<f64>> {
    featurize_with(instance, angle, true)
}

/// With `augment == false` only the identity transform is used (`N x 3`).
pub fn featurize_with(instance: &Instance, angle: AngleFeature, augment: bool) -> Result<Tensor<f64>> {
    instance.require_normalized()?;
    let transforms: &[Symmetry] = if augment { &Symmetry::ALL } else { &Symmetry::ALL[..1] };
    let width = BASE_FEATURES * transforms.len();
    let mut data = Vec::with_capacity(instance.len() * width);
    for &p in instance.coords() {
        for s in transforms {
            let [x, y] = s.apply(p);
            data.extend_from_slice(&[x, y, angle.eval(x, y)]);
        }
    }
    Tensor::from_vec(&[instance.len(), width], data)
}
