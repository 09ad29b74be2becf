use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safediff_nn::{Adam, Graph, Tensor};
use serde::{Deserialize, Serialize};

use super::normalize::Condition;
use super::schedule::mix;
use super::{ModelError, SafeDiffModel};
use crate::dataset::Demonstration;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub ema_decay: f64,
    /// Records drawn from each demonstration per epoch.
    pub records_per_demo: usize,
    /// Global gradient-norm clip; non-positive disables it.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_decay: 0.985,
            ema_decay: 0.995,
            records_per_demo: 1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Normalized training records grouped by demonstration.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub targets: Vec<Vec<f64>>,
    pub conditions: Vec<Condition>,
    /// Record index range of each demonstration.
    pub demos: Vec<std::ops::Range<usize>>,
}

impl TrainingSet {
    pub fn build(demos: &[Demonstration], model: &SafeDiffModel) -> Result<Self, ModelError> {
        let horizon = model.horizon();
        let norm = &model.normalizer;
        let mut set = TrainingSet {
            targets: Vec::new(),
            conditions: Vec::new(),
            demos: Vec::new(),
        };
        for (i, d) in demos.iter().enumerate() {
            let start = set.targets.len();
            for s in &d.steps {
                if s.labels.len() != horizon {
                    return Err(ModelError::Data(format!(
                        "demonstration {} has {} labels per record, model horizon is {horizon}",
                        i + 1,
                        s.labels.len()
                    )));
                }
                set.targets.push(norm.encode_plan(&s.labels, s.state));
                set.conditions.push(norm.condition(&s.observation, s.state, s.force));
            }
            if set.targets.len() > start {
                set.demos.push(start..set.targets.len());
            }
        }
        if set.targets.is_empty() {
            return Err(ModelError::Data("no training records".into()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// One optimizer step on the records `batch`: noises each target at a
/// uniformly drawn timestep, regresses the clean target, then applies Adam
/// and the EMA update. Returns the batch loss.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut SafeDiffModel,
    adam: &mut Adam,
    set: &TrainingSet,
    batch: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64, ModelError> {
    let horizon = model.horizon();
    let steps = model.schedule.len();
    let b = batch.len();
    let mut clean = Vec::with_capacity(b * horizon * 2);
    let mut noisy = Vec::with_capacity(b * horizon * 2);
    let mut timesteps = Vec::with_capacity(b);
    let mut conds = Vec::with_capacity(b);
    for &i in batch {
        let t = rng.gen_range(1..=steps);
        let noise: Vec<f64> = (0..horizon * 2).map(|_| rng.sample(StandardNormal)).collect();
        noisy.extend(mix(model.schedule.alpha_bar(t), &set.targets[i], &noise));
        clean.extend_from_slice(&set.targets[i]);
        timesteps.push(t);
        conds.push(set.conditions[i]);
    }
    let shape = [b, horizon, 2];
    let mut g = Graph::new();
    let [x, time, vision, force] =
        model
            .network
            .constants(&mut g, &Tensor::new(&shape, noisy)?, &timesteps, &conds)?;
    let pred = model
        .network
        .forward(&mut g, &model.params, x, time, vision, force)?;
    let target = g.constant(Tensor::new(&shape, clean)?);
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(ModelError::NonFinite(format!("training loss {value}")));
    }
    g.backward(loss);
    model.params.zero_grad();
    model.params.accumulate_grads(&g);
    let norm = model.params.grad_norm();
    if !norm.is_finite() {
        return Err(ModelError::NonFinite("gradient norm".into()));
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let s = cfg.grad_clip / norm;
        for p in model.params.iter_mut() {
            p.grad.iter_mut().for_each(|v| *v *= s);
        }
    }
    adam.step(&mut model.params);
    model.params.ema_update(cfg.ema_decay);
    Ok(value)
}

/// Full training run. `on_epoch` receives the epoch index, its mean loss
/// and the model as it stands after that epoch.
pub fn train(
    model: &mut SafeDiffModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &SafeDiffModel),
) -> Result<TrainReport, ModelError> {
    if cfg.batch_size == 0 || cfg.records_per_demo == 0 {
        return Err(ModelError::Config("batch size and records per demo must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = Vec::with_capacity(set.demos.len() * cfg.records_per_demo);
        for r in &set.demos {
            for _ in 0..cfg.records_per_demo {
                order.push(rng.gen_range(r.clone()));
            }
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = train_step(model, &mut adam, set, batch, cfg, &mut rng)?;
            report.step_losses.push(loss);
            total += loss;
            count += 1;
        }
        let mean = total / count.max(1) as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean, model);
        adam.lr *= cfg.lr_decay;
    }
    Ok(report)
}
