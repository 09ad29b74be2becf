//! Finite-difference verification of the denoiser's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safediff_nn::check::{max_relative_error, numeric_gradient};
use safediff_nn::{Graph, ParamStore, Tensor, Var};

use super::network::{sinusoidal, Denoiser, NetworkConfig};
use super::normalize::{FORCE_FEATURES, VISION_FEATURES};
use super::ModelError;

const DELTA: f64 = 1e-6;
const FLOOR: f64 = 1e-3;

struct Probe {
    x: Tensor,
    time: Tensor,
    vision: Tensor,
    force: Tensor,
    encoder_only: bool,
}

impl Probe {
    fn inputs(&self) -> [&Tensor; 4] {
        [&self.x, &self.time, &self.vision, &self.force]
    }

    /// Weighted sum of the denoiser output (or of the coarsest encoder
    /// features), so every element receives a distinct cotangent.
    fn loss(
        &self,
        net: &Denoiser,
        store: &ParamStore,
        g: &mut Graph,
        inputs: [Tensor; 4],
    ) -> Result<(Var, [Var; 4]), ModelError> {
        let [x, time, vision, force] = inputs.map(|t| g.input(t));
        let y = if self.encoder_only {
            *net.encode(g, store, x, time, vision)?.last().expect("at least one level")
        } else {
            net.forward(g, store, x, time, vision, force)?
        };
        let w = g.constant(Tensor::randn(g.shape(y), &mut ChaCha8Rng::seed_from_u64(77)));
        let p = g.mul(y, w)?;
        Ok((g.sum(p), [x, time, vision, force]))
    }

    fn value(&self, net: &Denoiser, store: &ParamStore, inputs: [Tensor; 4]) -> f64 {
        let mut g = Graph::new();
        let (l, _) = self.loss(net, store, &mut g, inputs).expect("probe forward");
        g.value(l).item()
    }
}

/// Largest relative error between analytic and central-difference
/// gradients of a randomly initialized denoiser, over every parameter and
/// every input (noisy plan, time embedding, vision and force features).
/// Zero-initialized branches are overwritten with random weights so their
/// gradients are exercised too. Intended for toy-sized configurations.
pub fn denoiser_gradient_error(cfg: &NetworkConfig, seed: u64) -> Result<f64, ModelError> {
    gradient_error(cfg, seed, false)
}

/// Same check restricted to the conditioned encoder stack.
pub fn encoder_gradient_error(cfg: &NetworkConfig, seed: u64) -> Result<f64, ModelError> {
    gradient_error(cfg, seed, true)
}

fn gradient_error(cfg: &NetworkConfig, seed: u64, encoder_only: bool) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = Denoiser::new(&mut store, &mut rng, cfg)?;
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
    }
    let b = 2;
    let l = cfg.horizon;
    let probe = Probe {
        x: Tensor::randn(&[b, l, 2], &mut rng),
        time: sinusoidal(&[3.0, 41.0], cfg.time_dim),
        vision: Tensor::randn(&[b, VISION_FEATURES], &mut rng),
        force: Tensor::randn(&[b, FORCE_FEATURES], &mut rng),
        encoder_only,
    };

    let mut g = Graph::new();
    let owned = probe.inputs().map(|t| t.clone());
    let (loss, vars) = probe.loss(&net, &store, &mut g, owned)?;
    g.backward(loss);

    let mut worst = 0.0f64;
    for (k, input) in probe.inputs().into_iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map_or_else(|| vec![0.0; input.len()], |s| s.to_vec());
        let numeric = numeric_gradient(input.data(), DELTA, |data| {
            let mut inputs = probe.inputs().map(|t| t.clone());
            inputs[k] = Tensor::new(input.shape(), data.to_vec()).expect("same shape");
            probe.value(&net, &store, inputs)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }

    store.zero_grad();
    store.accumulate_grads(&g);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let base = store.value(id).clone();
        let analytic = store.get(id).grad.clone();
        let mut scratch = store.clone();
        let numeric = numeric_gradient(base.data(), DELTA, |data| {
            scratch.value_mut(id).data_mut().copy_from_slice(data);
            probe.value(&net, &scratch, probe.inputs().map(|t| t.clone()))
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }
    Ok(worst)
}
