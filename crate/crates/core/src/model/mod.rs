//! Conditional diffusion planner over handle-position sequences.

pub mod check;
pub mod network;
pub mod normalize;
pub mod sample;
pub mod schedule;
pub mod train;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safediff_nn::{checkpoint, NnError, ParamStore};
use serde::{Deserialize, Serialize};

pub use network::{Denoiser, NetworkConfig};
pub use normalize::{Condition, Normalizer};
pub use sample::{sample_batch, SafeDiffPlanner};
pub use schedule::{make_schedule, q_sample, Schedule, ScheduleConfig};
pub use train::{train, train_step, TrainConfig, TrainReport, TrainingSet};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub network: NetworkConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    config: ModelConfig,
    normalizer: Normalizer,
    init_seed: u64,
}

/// Denoiser weights together with everything needed to sample from them.
#[derive(Clone, Debug)]
pub struct SafeDiffModel {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub network: Denoiser,
    pub schedule: Schedule,
    pub params: ParamStore,
    pub init_seed: u64,
}

impl SafeDiffModel {
    pub fn new(config: ModelConfig, normalizer: Normalizer, seed: u64) -> Result<Self, ModelError> {
        let schedule = make_schedule(&config.schedule)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let network = Denoiser::new(&mut params, &mut rng, &config.network)?;
        Ok(Self {
            config,
            normalizer,
            network,
            schedule,
            params,
            init_seed: seed,
        })
    }

    pub fn horizon(&self) -> usize {
        self.config.network.horizon
    }

    pub fn vision_only(&self) -> bool {
        self.config.network.vision_only
    }

    /// Sidecar path written next to a checkpoint.
    pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file_err = |p: &Path, e: std::io::Error| ModelError::File {
            path: p.to_path_buf(),
            message: e.to_string(),
        };
        std::fs::write(path, checkpoint::encode(&self.params)).map_err(|e| file_err(path, e))?;
        let sidecar = Sidecar {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            init_seed: self.init_seed,
        };
        let side = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
        std::fs::write(&side, text).map_err(|e| file_err(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let side = Self::sidecar_path(path);
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| ModelError::File {
                path: p.to_path_buf(),
                message: e.to_string(),
            })
        };
        let sidecar: Sidecar = serde_json::from_str(&read(&side)?).map_err(|e| ModelError::File {
            path: side.clone(),
            message: e.to_string(),
        })?;
        if sidecar.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::File {
                path: side,
                message: format!("format version {}", sidecar.format_version),
            });
        }
        let mut model = Self::new(sidecar.config, sidecar.normalizer, sidecar.init_seed)?;
        checkpoint::decode_into(&read(path)?, &mut model.params)?;
        Ok(model)
    }

    /// Planner sampling with the EMA weights.
    pub fn planner(&self) -> SafeDiffPlanner<'_> {
        SafeDiffPlanner::new(self)
    }
}
