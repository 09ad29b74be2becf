//! Conditional denoiser: a FiLM-conditioned encoder over the noisy plan
//! followed by a decoder that adds a force-attention residual at every
//! scale, with skip connections between matching scales.

use rand::Rng;
use safediff_nn::layers::{film, LayerNorm, Linear, Mlp, MultiHeadAttention, ResBlock, SelfAttentionBlock};
use safediff_nn::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::normalize::{Condition, FORCE_FEATURES, VISION_FEATURES};
use super::ModelError;

/// Network outputs are clamped to this box in normalized coordinates.
pub const OUTPUT_BOUND: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Plan states per sample.
    pub horizon: usize,
    /// Channel width per scale, finest first. Each further scale halves time.
    pub widths: Vec<usize>,
    pub heads: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub force_tokens: usize,
    pub force_dim: usize,
    /// Drops the force pathway entirely.
    pub vision_only: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            horizon: 32,
            widths: vec![16, 32, 48],
            heads: 2,
            cond_dim: 64,
            time_dim: 16,
            force_tokens: 4,
            force_dim: 32,
            vision_only: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive".into());
        }
        let levels = self.widths.len() as u32;
        let factor = 1usize << (levels - 1);
        if self.horizon == 0 || self.horizon % factor != 0 {
            return bad(format!(
                "horizon {} is not divisible by {factor} for {levels} scales",
                self.horizon
            ));
        }
        if self.heads == 0 || self.widths.iter().any(|w| w % self.heads != 0) {
            return bad(format!("{} heads do not divide every width", self.heads));
        }
        if self.force_dim % self.heads != 0 && !self.vision_only {
            return bad("heads must divide force_dim".into());
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time_dim must be even and positive".into());
        }
        if self.cond_dim == 0 || (!self.vision_only && (self.force_tokens == 0 || self.force_dim == 0)) {
            return bad("conditioning sizes must be positive".into());
        }
        Ok(())
    }
}

/// Sinusoidal features of `positions`, `[n, dim]`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[positions.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let k = col % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = positions[row] * freq;
        if col < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    film: Linear,
    res_in: ResBlock,
    attn: SelfAttentionBlock,
    res_out: ResBlock,
}

#[derive(Clone, Debug)]
struct CrossAttention {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    res_in: ResBlock,
    attn: SelfAttentionBlock,
    res_out: ResBlock,
    cross: Option<CrossAttention>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: NetworkConfig,
    cond: Mlp,
    input: Linear,
    encoder: Vec<EncoderLevel>,
    down: Vec<Linear>,
    up: Vec<Linear>,
    decoder: Vec<DecoderLevel>,
    force: Option<Mlp>,
    output: Linear,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &NetworkConfig,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let w = &cfg.widths;
        let n = w.len();
        let cond = Mlp::new(
            store,
            rng,
            "cond",
            &[cfg.time_dim + VISION_FEATURES, cfg.cond_dim, cfg.cond_dim],
        )?;
        let input = Linear::new(store, rng, "input", 2, w[0], true)?;
        let mut encoder = Vec::with_capacity(n);
        let mut down = Vec::new();
        for i in 0..n {
            let name = format!("enc{i}");
            encoder.push(EncoderLevel {
                film: Linear::new(store, rng, &format!("{name}.film"), cfg.cond_dim, 2 * w[i], true)?,
                res_in: ResBlock::new(store, rng, &format!("{name}.res_in"), w[i], w[i])?,
                attn: SelfAttentionBlock::new(store, rng, &format!("{name}.attn"), w[i], cfg.heads)?,
                res_out: ResBlock::new(store, rng, &format!("{name}.res_out"), w[i], w[i])?,
            });
            if i + 1 < n {
                down.push(Linear::new(store, rng, &format!("down{i}"), 2 * w[i], w[i + 1], true)?);
            }
        }
        let force = if cfg.vision_only {
            None
        } else {
            Some(Mlp::new(
                store,
                rng,
                "force",
                &[FORCE_FEATURES, cfg.cond_dim, cfg.force_tokens * cfg.force_dim],
            )?)
        };
        let mut up = Vec::new();
        let mut decoder = Vec::with_capacity(n);
        for i in 0..n {
            let name = format!("dec{i}");
            let in_dim = if i + 1 < n { 2 * w[i] } else { w[i] };
            if i + 1 < n {
                up.push(Linear::new(store, rng, &format!("up{i}"), w[i + 1], 2 * w[i], true)?);
            }
            let cross = if cfg.vision_only {
                None
            } else {
                let attn = MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{name}.cross"),
                    w[i],
                    cfg.force_dim,
                    cfg.heads,
                )?;
                attn.output.zero(store);
                Some(CrossAttention {
                    norm: LayerNorm::new(store, &format!("{name}.cross_norm"), w[i])?,
                    attn,
                })
            };
            decoder.push(DecoderLevel {
                res_in: ResBlock::new(store, rng, &format!("{name}.res_in"), in_dim, w[i])?,
                attn: SelfAttentionBlock::new(store, rng, &format!("{name}.attn"), w[i], cfg.heads)?,
                res_out: ResBlock::new(store, rng, &format!("{name}.res_out"), w[i], w[i])?,
                cross,
            });
        }
        let output = Linear::zeroed(store, "output", w[0], 2)?;
        store.sync_shadows();
        Ok(Self {
            cfg: cfg.clone(),
            cond,
            input,
            encoder,
            down,
            up,
            decoder,
            force,
            output,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Zeroes every residual branch, the FiLM heads and the conditioning
    /// paths so the network reduces to its skip paths.
    pub fn neutralize(&self, store: &mut ParamStore) {
        for lvl in &self.encoder {
            lvl.film.zero(store);
            lvl.res_in.zero_branch(store);
            lvl.attn.zero_branch(store);
            lvl.res_out.zero_branch(store);
        }
        for lvl in &self.decoder {
            lvl.res_in.zero_branch(store);
            lvl.attn.zero_branch(store);
            lvl.res_out.zero_branch(store);
        }
    }

    /// `x: [B, L, 2]`, `time: [B, time_dim]`, `vision: [B, 7]`, `force: [B, 2]`.
    /// Returns the clamped clean-plan estimate `[B, L, 2]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        time: Var,
        vision: Var,
        force: Var,
    ) -> Result<Var, ModelError> {
        let h = self.features(g, store, x, time, vision, force)?;
        let out = self.output.forward(g, store, h)?;
        Ok(g.clamp(out, -OUTPUT_BOUND, OUTPUT_BOUND))
    }

    /// Encoder output at every scale, finest first; the last entry is the
    /// (non-downsampled) coarsest scale.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        time: Var,
        vision: Var,
    ) -> Result<Vec<Var>, ModelError> {
        let b = g.shape(x)[0];
        let w = &self.cfg.widths;
        let ctx = g.concat(&[time, vision], 1)?;
        let c = self.cond.forward(g, store, ctx)?;
        let c = g.gelu(c);
        let h = self.input.forward(g, store, x)?;
        let positions: Vec<f64> = (0..self.cfg.horizon).map(|k| k as f64).collect();
        let pos = g.constant(sinusoidal(&positions, w[0]));
        let mut h = g.add(h, pos)?;
        let mut skips = Vec::with_capacity(w.len());
        let mut len = self.cfg.horizon;
        for (i, lvl) in self.encoder.iter().enumerate() {
            let ab = lvl.film.forward(g, store, c)?;
            let alpha = g.narrow(ab, 1, 0, w[i])?;
            let one = g.constant(Tensor::ones(&[w[i]]));
            let alpha = g.add(alpha, one)?;
            let beta = g.narrow(ab, 1, w[i], w[i])?;
            h = film(g, h, alpha, beta)?;
            h = lvl.res_in.forward(g, store, h)?;
            h = lvl.attn.forward(g, store, h)?;
            h = lvl.res_out.forward(g, store, h)?;
            skips.push(h);
            if let Some(d) = self.down.get(i) {
                len /= 2;
                h = g.reshape(h, &[b, len, 2 * w[i]])?;
                h = d.forward(g, store, h)?;
            }
        }
        Ok(skips)
    }

    /// Force context tokens `[B, tokens, force_dim]`, absent when vision-only.
    pub fn force_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        force: Var,
    ) -> Result<Option<Var>, ModelError> {
        let Some(mlp) = &self.force else {
            return Ok(None);
        };
        let b = g.shape(force)[0];
        let t = mlp.forward(g, store, force)?;
        Ok(Some(g.reshape(t, &[b, self.cfg.force_tokens, self.cfg.force_dim])?))
    }

    /// One decoder scale: `Res(Sttn(Res(x)))` then the force residual.
    pub fn decode_level(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: usize,
        x: Var,
        tokens: Option<Var>,
    ) -> Result<Var, ModelError> {
        let lvl = &self.decoder[level];
        let mut h = lvl.res_in.forward(g, store, x)?;
        h = lvl.attn.forward(g, store, h)?;
        h = lvl.res_out.forward(g, store, h)?;
        if let (Some(cross), Some(tokens)) = (&lvl.cross, tokens) {
            let q = cross.norm.forward(g, store, h)?;
            let r = cross.attn.forward(g, store, q, tokens)?;
            h = g.add(h, r)?;
        }
        Ok(h)
    }

    fn features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        time: Var,
        vision: Var,
        force: Var,
    ) -> Result<Var, ModelError> {
        let w = &self.cfg.widths;
        let n = w.len();
        let b = g.shape(x)[0];
        let skips = self.encode(g, store, x, time, vision)?;
        let tokens = self.force_tokens(g, store, force)?;
        let mut h = self.decode_level(g, store, n - 1, skips[n - 1], tokens)?;
        for i in (0..n - 1).rev() {
            let len = g.shape(skips[i])[1];
            let u = self.up[i].forward(g, store, h)?;
            let u = g.reshape(u, &[b, len, w[i]])?;
            let merged = g.concat(&[u, skips[i]], 2)?;
            h = self.decode_level(g, store, i, merged, tokens)?;
        }
        Ok(h)
    }

    /// Evaluates the clean-plan estimate for noisy plans `x` (`[B, L, 2]`)
    /// at per-item timesteps.
    pub fn denoise(
        &self,
        store: &ParamStore,
        x: &Tensor,
        timesteps: &[usize],
        conds: &[Condition],
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let inputs = self.constants(&mut g, x, timesteps, conds)?;
        let y = self.forward(&mut g, store, inputs[0], inputs[1], inputs[2], inputs[3])?;
        let out = g.value(y).clone();
        if !out.all_finite() {
            return Err(ModelError::NonFinite(format!(
                "denoiser output at timesteps {:?}",
                &timesteps[..timesteps.len().min(4)]
            )));
        }
        Ok(out)
    }

    /// Builds `[x, time, vision, force]` graph constants for a batch.
    pub fn constants(
        &self,
        g: &mut Graph,
        x: &Tensor,
        timesteps: &[usize],
        conds: &[Condition],
    ) -> Result<[Var; 4], ModelError> {
        let b = conds.len();
        let expected = [b, self.cfg.horizon, 2];
        if x.shape() != expected || timesteps.len() != b {
            return Err(ModelError::Shape(format!(
                "x {:?}, {} timesteps, {} conditions; expected {:?}",
                x.shape(),
                timesteps.len(),
                b,
                expected
            )));
        }
        let t: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let time = sinusoidal(&t, self.cfg.time_dim);
        let vision = Tensor::new(
            &[b, VISION_FEATURES],
            conds.iter().flat_map(|c| c.vision).collect(),
        )?;
        let force = Tensor::new(&[b, FORCE_FEATURES], conds.iter().flat_map(|c| c.force).collect())?;
        Ok([
            g.constant(x.clone()),
            g.constant(time),
            g.constant(vision),
            g.constant(force),
        ])
    }
}
