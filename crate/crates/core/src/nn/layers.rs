use crate::tensor::{Graph, Real, Result, Rng, Tensor, TensorError, Var};

use super::params::{uniform_fan_in, Binding, ParamId, ParamStore};

pub const GROUP_NORM_EPS: f64 = 1e-6;

pub fn norm_groups(channels: usize) -> usize {
    channels.min(32)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(&[cout, cin, k, k], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), uniform_fan_in(&[cout], fan_in, rng));
        Self { weight, bias, stride, pad: k / 2 }
    }

    /// Zero-initialized weight and bias.
    pub fn zeros<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]).expect("shape"));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]).expect("shape"));
        Self { weight, bias, stride: 1, pad: k / 2 }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[channels], F::one()).expect("shape"));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]).expect("shape"));
        Self { gamma, beta, groups: norm_groups(channels) }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var> {
        g.group_norm(x, self.groups, p[self.gamma], p[self.beta], GROUP_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(&[dout, din], din, rng));
        let bias = store.add(format!("{name}.bias"), uniform_fan_in(&[dout], din, rng));
        Self { weight, bias }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

/// Pre-activation residual block:
/// `GN -> SiLU -> Conv3x3 (+ time projection) -> GN -> SiLU -> Conv3x3`, plus
/// a 1x1 projection on the skip path when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub time_proj: Option<Linear>,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ResBlockOptions {
    /// Width of the time embedding fed to this block, if any.
    pub time_dim: Option<usize>,
    /// Start the second convolution at zero so the block begins as identity.
    pub zero_out: bool,
}

impl ResBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        opts: ResBlockOptions,
        rng: &mut Rng,
    ) -> Self {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), cin);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng);
        let time_proj = opts.time_dim.map(|d| Linear::new(store, &format!("{name}.time_proj"), d, cout, rng));
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), cout);
        let conv2 = if opts.zero_out {
            Conv2d::zeros(store, &format!("{name}.conv2"), cout, cout, 3)
        } else {
            Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng)
        };
        let skip = (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng));
        Self { norm1, conv1, norm2, conv2, skip, time_proj, cin, cout }
    }

    /// `temb` must already be activated (`[B, time_dim]`) when the block
    /// was built with a time projection.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var, temb: Option<Var>) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.cin {
            return Err(TensorError::InvalidArgument {
                op: "ResBlock",
                reason: format!("expected {} channels, got {c}", self.cin),
            });
        }
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h)?;
        let mut h = self.conv1.forward(g, p, h)?;
        match (&self.time_proj, temb) {
            (Some(proj), Some(t)) => {
                let tp = proj.forward(g, p, t)?;
                h = g.add_channel_bias(h, tp)?;
            }
            (None, None) => {}
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "ResBlock",
                    reason: "time embedding supplied iff the block has a time projection".into(),
                })
            }
        }
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Stride-2 3x3 convolution halving the spatial dims.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, rng: &mut Rng) -> Self {
        Self { conv: Conv2d::new(store, &format!("{name}.conv"), channels, channels, 3, 2, rng) }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::InvalidShape { shape: s.to_vec(), reason: "downsample needs even H and W".into() });
        }
        self.conv.forward(g, p, x)
    }
}

/// Nearest 2x upsampling followed by a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv2d,
}

impl Upsample {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, rng: &mut Rng) -> Self {
        Self { conv: Conv2d::new(store, &format!("{name}.conv"), channels, channels, 3, 1, rng) }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var> {
        let u = g.upsample_nearest2x(x)?;
        self.conv.forward(g, p, u)
    }
}

/// Single-head attention block with a residual connection.
///
/// Queries come from the normalized input; keys and values come either from
/// the same tensor (self-attention) or from a separate context tensor
/// (cross-attention), projected by 1x1 convolutions.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: GroupNorm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub out: Conv2d,
    pub context_channels: Option<usize>,
}

impl AttentionBlock {
    pub fn new_self<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, rng: &mut Rng) -> Self {
        Self::build(store, name, channels, None, rng)
    }

    pub fn new_cross<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        context_channels: usize,
        rng: &mut Rng,
    ) -> Self {
        Self::build(store, name, channels, Some(context_channels), rng)
    }

    fn build<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        context: Option<usize>,
        rng: &mut Rng,
    ) -> Self {
        let norm = GroupNorm::new(store, &format!("{name}.norm"), channels);
        let kv_in = context.unwrap_or(channels);
        let q = Conv2d::new(store, &format!("{name}.q"), channels, channels, 1, 1, rng);
        let k = Conv2d::new(store, &format!("{name}.k"), kv_in, channels, 1, 1, rng);
        let v = Conv2d::new(store, &format!("{name}.v"), kv_in, channels, 1, 1, rng);
        let out = Conv2d::new(store, &format!("{name}.proj_out"), channels, channels, 1, 1, rng);
        Self { norm, q, k, v, out, context_channels: context }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var, context: Option<Var>) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let src = match (self.context_channels, context) {
            (None, None) => h,
            (Some(_), Some(c)) => c,
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "AttentionBlock",
                    reason: "context supplied iff the block is cross-attention".into(),
                })
            }
        };
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, src)?;
        let v = self.v.forward(g, p, src)?;
        let a = g.attention(q, k, v)?;
        let o = self.out.forward(g, p, a)?;
        g.add(x, o)
    }
}

/// Sinusoidal timestep features `[sin(t w_0..), cos(t w_0..)]` with
/// `w_k = 10000^(-k / (dim/2))`, one row per timestep.
pub fn timestep_embedding<F: Real>(timesteps: &[usize], dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(TensorError::InvalidArgument { op: "timestep_embedding", reason: format!("dim {dim} must be even") });
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let row_start = data.len();
        data.resize(row_start + dim, F::zero());
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            data[row_start + k] = F::from_f64(arg.sin());
            data[row_start + half + k] = F::from_f64(arg.cos());
        }
    }
    Tensor::new(&[timesteps.len(), dim], data)
}
