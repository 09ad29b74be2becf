use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::dataset::{Demonstration, Observation};
use crate::geometry::Vec2;

/// Scene features: hinge estimate relative to the current state, radius
/// estimate, angle estimate and opening sign.
pub const SCENE_FEATURES: usize = 5;
/// Scene features followed by the absolute current state.
pub const VISION_FEATURES: usize = SCENE_FEATURES + 2;
pub const FORCE_FEATURES: usize = 2;

/// Normalized conditioning inputs of one plan request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Condition {
    pub vision: [f64; VISION_FEATURES],
    pub force: [f64; FORCE_FEATURES],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer<const N: usize> {
    #[serde(with = "array")]
    pub mean: [f64; N],
    #[serde(with = "array")]
    pub std: [f64; N],
}

impl<const N: usize> Standardizer<N> {
    fn fit(rows: &[[f64; N]]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; N];
        for r in rows {
            for k in 0..N {
                mean[k] += r[k] / n;
            }
        }
        let mut std = [0.0; N];
        for r in rows {
            for k in 0..N {
                std[k] += (r[k] - mean[k]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    fn apply(&self, row: [f64; N]) -> [f64; N] {
        std::array::from_fn(|k| (row[k] - self.mean[k]) / self.std[k])
    }
}

mod array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[f64; N], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[f64; N], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        let n = v.len();
        v.try_into()
            .map_err(|_| serde::de::Error::invalid_length(n, &"fixed-size array"))
    }
}

/// Maps raw observations and plans into network coordinates.
///
/// Plan states are expressed relative to the current state and divided by a
/// single isotropic scale so that training labels fall in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub label_scale: f64,
    pub vision: Standardizer<VISION_FEATURES>,
    pub force: Standardizer<FORCE_FEATURES>,
}

fn vision_row(obs: &Observation, state: Vec2) -> [f64; VISION_FEATURES] {
    let rel = obs.hinge_estimate - state;
    [
        rel.x,
        rel.y,
        obs.radius_estimate,
        obs.angle_estimate,
        obs.opening_sign,
        state.x,
        state.y,
    ]
}

impl Normalizer {
    pub fn fit(demos: &[Demonstration]) -> Result<Self, ModelError> {
        let mut vision = Vec::new();
        let mut force = Vec::new();
        let mut scale = 0.0f64;
        for d in demos {
            for s in &d.steps {
                vision.push(vision_row(&s.observation, s.state));
                force.push([s.force.x, s.force.y]);
                for l in &s.labels {
                    let rel = *l - s.state;
                    scale = scale.max(rel.x.abs()).max(rel.y.abs());
                }
            }
        }
        if vision.is_empty() || !(scale > 0.0 && scale.is_finite()) {
            return Err(ModelError::Data("no usable training records".into()));
        }
        Ok(Self {
            label_scale: scale,
            vision: Standardizer::fit(&vision),
            force: Standardizer::fit(&force),
        })
    }

    pub fn condition(&self, obs: &Observation, state: Vec2, force: Vec2) -> Condition {
        Condition {
            vision: self.vision.apply(vision_row(obs, state)),
            force: self.force.apply([force.x, force.y]),
        }
    }

    /// Flattened `[L * 2]` network target.
    pub fn encode_plan(&self, plan: &[Vec2], state: Vec2) -> Vec<f64> {
        plan.iter()
            .flat_map(|p| {
                let r = (*p - state) * (1.0 / self.label_scale);
                [r.x, r.y]
            })
            .collect()
    }

    pub fn decode_plan(&self, x: &[f64], state: Vec2) -> Vec<Vec2> {
        x.chunks_exact(2)
            .map(|c| state + Vec2::new(c[0], c[1]) * self.label_scale)
            .collect()
    }
}
