//! Layer set used by the denoiser: linear maps, normalization, temporal
//! convolution, residual blocks, FiLM and multi-head attention.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in scaled uniform initialization.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self, NnError> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
        )?;
        let bias = if bias {
            Some(store.register(
                format!("{name}.bias"),
                Tensor::uniform(&[out_dim], bound, rng),
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self, NnError> {
        let weight = store.register(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]))?;
        let bias = Some(store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?);
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Layer normalization over the channel axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, NnError> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::ones(&[dim]))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }
}

/// Same-padded 1-D convolution over the time axis of `[B, T, C]` input.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
    ) -> Result<Self, NnError> {
        Ok(Self {
            kernel,
            proj: Linear::new(store, rng, name, kernel * in_dim, out_dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let cols = g.unfold_time(x, self.kernel)?;
        self.proj.forward(g, store, cols)
    }
}

/// Two temporal convolutions, each followed by layer norm and GELU, plus a
/// skip path (a linear projection when the channel count changes).
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    skip: Option<Linear>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self, NnError> {
        Ok(Self {
            conv1: Conv1d::new(store, rng, &format!("{name}.conv1"), in_dim, out_dim, 3)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), out_dim)?,
            conv2: Conv1d::new(store, rng, &format!("{name}.conv2"), out_dim, out_dim, 3)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), out_dim)?,
            skip: if in_dim != out_dim {
                Some(Linear::new(store, rng, &format!("{name}.skip"), in_dim, out_dim, false)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.norm1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.conv2.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.gelu(h);
        let skip = match &self.skip {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        g.add(h, skip)
    }

    /// Makes the residual branch output exactly zero.
    pub fn zero_branch(&self, store: &mut ParamStore) {
        self.conv2.proj.zero(store);
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: &[usize],
    ) -> Result<Self, NnError> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], true))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

/// Feature-wise affine modulation `alpha * x + beta`.
///
/// `x` is `[B, T, C]`; `alpha` and `beta` carry one coefficient per channel,
/// either `[C]`, `[B, C]` or `[B, 1, C]`, and broadcast over time.
pub fn film(g: &mut Graph, x: Var, alpha: Var, beta: Var) -> Result<Var, NnError> {
    let xs = g.shape(x).to_vec();
    let lift = |g: &mut Graph, v: Var| -> Result<Var, NnError> {
        let s = g.shape(v).to_vec();
        match (xs.len(), s.len()) {
            (3, 2) if s[0] == xs[0] && s[1] == xs[2] => g.reshape(v, &[s[0], 1, s[1]]),
            (_, 1) if s[0] == *xs.last().unwrap_or(&0) => Ok(v),
            (3, 3) if s[0] == xs[0] && s[1] == 1 && s[2] == xs[2] => Ok(v),
            _ => Err(NnError::ShapeMismatch {
                op: "film",
                left: xs.clone(),
                right: s,
            }),
        }
    };
    let a = lift(g, alpha)?;
    let b = lift(g, beta)?;
    let y = g.mul(x, a)?;
    g.add(y, b)
}

/// Scaled dot-product attention with learned query/key/value/output
/// projections split over `heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
    ) -> Result<Self, NnError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::HeadsDoNotDivide { dim, heads });
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            key: Linear::new(store, rng, &format!("{name}.k"), context_dim, dim, true)?,
            value: Linear::new(store, rng, &format!("{name}.v"), context_dim, dim, true)?,
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    /// `query: [B, T, C]`, `context: [B, S, C_ctx]` -> `[B, T, C]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        context: Var,
    ) -> Result<Var, NnError> {
        let qs = g.shape(query).to_vec();
        let cs = g.shape(context).to_vec();
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] {
            return Err(NnError::ShapeMismatch {
                op: "attention",
                left: qs,
                right: cs,
            });
        }
        let (b, t, c) = (qs[0], qs[1], qs[2]);
        let s = cs[1];
        let h = self.heads;
        let d = c / h;
        let q = self.query.forward(g, store, query)?;
        let q = g.reshape(q, &[b, t, h, d])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = self.key.forward(g, store, context)?;
        let k = g.reshape(k, &[b, s, h, d])?;
        let k = g.permute(k, &[0, 2, 3, 1])?;
        let v = self.value.forward(g, store, context)?;
        let v = g.reshape(v, &[b, s, h, d])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, k)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = g.softmax(scores);
        let mixed = g.matmul(weights, v)?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, &[b, t, c])?;
        self.output.forward(g, store, mixed)
    }
}

/// Pre-normalized residual self-attention: `x + MHA(LN(x), LN(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self, NnError> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, dim, heads)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let n = self.norm.forward(g, store, x)?;
        let a = self.attn.forward(g, store, n, n)?;
        g.add(x, a)
    }

    pub fn zero_branch(&self, store: &mut ParamStore) {
        self.attn.output.zero(store);
    }
}
