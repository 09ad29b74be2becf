use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safediff_nn::{ParamStore, Tensor};

use super::normalize::Condition;
use super::{ModelError, SafeDiffModel};
use crate::geometry::Vec2;
use crate::runtime::{PlanRequest, Planner};

/// Requests denoised together; bounds the size of the activation tape.
const MAX_BATCH: usize = 64;

/// Ancestral sampling over the full schedule. Each item draws its noise from
/// its own generator, so results do not depend on batch composition.
/// Returns normalized plans, `L * 2` values each.
pub fn sample_batch(
    model: &SafeDiffModel,
    params: &ParamStore,
    conds: &[Condition],
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<f64>>, ModelError> {
    assert_eq!(conds.len(), rngs.len(), "one generator per condition");
    let n = model.horizon() * 2;
    let b = conds.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let mut x: Vec<f64> = rngs
        .iter_mut()
        .flat_map(|r| (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
        .collect();
    let schedule = &model.schedule;
    for t in (1..=schedule.len()).rev() {
        let xt = Tensor::new(&[b, model.horizon(), 2], x)?;
        let x0 = model.network.denoise(params, &xt, &vec![t; b], conds)?;
        let (c0, ct, var) = schedule.posterior(t);
        if t == 1 {
            x = x0.into_data();
            break;
        }
        let sd = var.sqrt();
        let xt = xt.into_data();
        x = Vec::with_capacity(b * n);
        for (i, rng) in rngs.iter_mut().enumerate() {
            for k in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                let j = i * n + k;
                x.push(c0 * x0.data()[j] + ct * xt[j] + sd * z);
            }
        }
    }
    Ok(x.chunks(n).map(|c| c.to_vec()).collect())
}

/// Closed-loop planner backed by the EMA weights of a trained model.
pub struct SafeDiffPlanner<'a> {
    model: &'a SafeDiffModel,
    ema: ParamStore,
}

impl<'a> SafeDiffPlanner<'a> {
    pub fn new(model: &'a SafeDiffModel) -> Self {
        Self {
            model,
            ema: model.params.ema_weights(),
        }
    }

    /// Plans from raw conditioning inputs, one generator seed per item.
    pub fn plan_raw(
        &self,
        inputs: &[(crate::dataset::Observation, Vec2, Vec2)],
        seeds: &[u64],
    ) -> Result<Vec<Vec<Vec2>>, ModelError> {
        let norm = &self.model.normalizer;
        let mut out = Vec::with_capacity(inputs.len());
        for (chunk, seeds) in inputs.chunks(MAX_BATCH).zip(seeds.chunks(MAX_BATCH)) {
            let conds: Vec<Condition> = chunk
                .iter()
                .map(|(obs, state, force)| norm.condition(obs, *state, *force))
                .collect();
            let mut rngs: Vec<ChaCha8Rng> =
                seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
            let plans = sample_batch(self.model, &self.ema, &conds, &mut rngs)?;
            out.extend(
                plans
                    .iter()
                    .zip(chunk)
                    .map(|(p, (_, state, _))| norm.decode_plan(p, *state)),
            );
        }
        Ok(out)
    }
}

impl Planner for SafeDiffPlanner<'_> {
    fn plan_batch(&mut self, requests: &[PlanRequest<'_>]) -> Vec<Result<Vec<Vec2>, String>> {
        let inputs: Vec<_> = requests
            .iter()
            .map(|r| (r.observation, r.state, r.force))
            .collect();
        let seeds: Vec<u64> = requests.iter().map(|r| r.noise_seed).collect();
        match self.plan_raw(&inputs, &seeds) {
            Ok(plans) => plans.into_iter().map(Ok).collect(),
            Err(e) => requests.iter().map(|_| Err(e.to_string())).collect(),
        }
    }
}
