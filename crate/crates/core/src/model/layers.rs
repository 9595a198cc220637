//! Parameterized building blocks. Each layer owns [`ParamId`]s registered in a
//! [`ParamStore`] and runs on any float precision.

use srcorrnet_nn::{FilterCombine, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

use crate::error::Result;

const LN_EPS: f64 = 1e-5;

fn reg<T: Real>(store: &mut ParamStore<T>, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
    Ok(store.register(name, shape, init)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let w = reg(store, format!("{name}.weight"), &[inp, out], Init::Uniform { fan_in: inp })?;
        let b = if bias {
            Some(reg(store, format!("{name}.bias"), &[out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        Ok(g.linear(x, w, b)?)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: reg(store, format!("{name}.gain"), &[dim], Init::Ones)?,
            bias: reg(store, format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(s, self.gain), g.param(s, self.bias));
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }
}

/// Same-padded `k x k` convolution over `[.., t, f, c]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
}

impl Conv2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, k: usize, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            w: reg(store, format!("{name}.weight"), &[k, k, cin, cout], Init::Uniform { fan_in: k * k * cin })?,
            b: reg(store, format!("{name}.bias"), &[cout], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(s, self.w), g.param(s, self.b));
        Ok(g.conv2d(x, w, Some(b))?)
    }
}

/// Two same-padded 1-D convolutions along the sequence axis with a SwiGLU
/// hidden layer.
#[derive(Debug, Clone)]
pub struct ConvFfn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ConvFfn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, k: usize) -> Result<Self> {
        Ok(Self {
            w1: reg(store, format!("{name}.conv1.weight"), &[k, dim, 2 * hidden], Init::Uniform { fan_in: k * dim })?,
            b1: reg(store, format!("{name}.conv1.bias"), &[2 * hidden], Init::Zeros)?,
            w2: reg(store, format!("{name}.conv2.weight"), &[k, hidden, dim], Init::Uniform { fan_in: k * hidden })?,
            b2: reg(store, format!("{name}.conv2.bias"), &[dim], Init::Zeros)?,
        })
    }

    /// `x [n, seq, dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(s, self.w1), g.param(s, self.b1), g.param(s, self.w2), g.param(s, self.b2));
        let h = g.conv1d(x, w1, Some(b1), 1)?;
        let h = g.swiglu(h)?;
        Ok(g.conv1d(h, w2, Some(b2), 1)?)
    }

    pub fn output_weight(&self) -> (ParamId, ParamId) {
        (self.w2, self.b2)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.query"), dim, dim, true)?,
            k: Linear::new(store, &format!("{name}.key"), dim, dim, true)?,
            v: Linear::new(store, &format!("{name}.value"), dim, dim, true)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    /// `x [n, sq, dim]` attends to `kv [n, sk, dim]`. `rope_base` rotates
    /// queries and keys by their sequence positions.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        kv: Var,
        rope_base: Option<f64>,
        causal: bool,
    ) -> Result<Var> {
        let (xs, ks) = (g.shape(x).to_vec(), g.shape(kv).to_vec());
        let (n, sq, dim, sk) = (xs[0], xs[1], xs[2], ks[1]);
        let hd = dim / self.heads;
        let q = self.q.forward(g, s, x)?;
        let k = self.k.forward(g, s, kv)?;
        let v = self.v.forward(g, s, kv)?;
        let mut q = g.reshape(q, &[n, sq, self.heads, hd])?;
        let mut k = g.reshape(k, &[n, sk, self.heads, hd])?;
        let v = g.reshape(v, &[n, sk, self.heads, hd])?;
        if let Some(base) = rope_base {
            q = g.rope(q, base)?;
            k = g.rope(k, base)?;
        }
        let a = g.attention(q, k, v, causal)?;
        let a = g.reshape(a, &[n, sq, dim])?;
        self.out.forward(g, s, a)
    }

    pub fn output_weight(&self) -> ParamId {
        self.out.weight()
    }
}

/// Macaron unit: half ConvFFN, RoPE self-attention, half ConvFFN, each as a
/// pre-norm residual branch over sequences `[n, seq, dim]`.
#[derive(Debug, Clone)]
pub struct UnitModule {
    norm_ffn1: LayerNorm,
    ffn1: ConvFfn,
    norm_attn: LayerNorm,
    attn: Attention,
    norm_ffn2: LayerNorm,
    ffn2: ConvFfn,
    rope_base: f64,
}

impl UnitModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
        kernel: usize,
        rope_base: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm_ffn1: LayerNorm::new(store, &format!("{name}.ffn1_norm"), dim)?,
            ffn1: ConvFfn::new(store, &format!("{name}.ffn1"), dim, hidden, kernel)?,
            norm_attn: LayerNorm::new(store, &format!("{name}.attn_norm"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm_ffn2: LayerNorm::new(store, &format!("{name}.ffn2_norm"), dim)?,
            ffn2: ConvFfn::new(store, &format!("{name}.ffn2"), dim, hidden, kernel)?,
            rope_base,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let half = T::of(0.5);
        let h = self.norm_ffn1.forward(g, s, x)?;
        let h = self.ffn1.forward(g, s, h)?;
        let h = g.scale(h, half)?;
        let x = g.add(x, h)?;
        let h = self.norm_attn.forward(g, s, x)?;
        let h = self.attn.forward(g, s, h, h, Some(self.rope_base), false)?;
        let x = g.add(x, h)?;
        let h = self.norm_ffn2.forward(g, s, x)?;
        let h = self.ffn2.forward(g, s, h)?;
        let h = g.scale(h, half)?;
        Ok(g.add(x, h)?)
    }

    /// Parameters that close every residual branch.
    pub fn output_params(&self) -> Vec<ParamId> {
        let (a, b) = self.ffn1.output_weight();
        let (c, d) = self.ffn2.output_weight();
        vec![a, b, self.attn.output_weight(), c, d]
    }
}

/// Frequency-axis unit followed by time-axis unit over `[b, t, f, c]`.
#[derive(Debug, Clone)]
pub struct TfBlock {
    freq: UnitModule,
    time: UnitModule,
}

impl TfBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &super::ModelConfig) -> Result<Self> {
        let mk = |store: &mut ParamStore<T>, axis: &str| {
            UnitModule::new(
                store,
                &format!("{name}.{axis}"),
                cfg.channels,
                cfg.hidden_channels,
                cfg.heads,
                cfg.conv_kernel,
                cfg.rope_base,
            )
        };
        Ok(Self {
            freq: mk(store, "freq")?,
            time: mk(store, "time")?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let (b, t, f, c) = (sh[0], sh[1], sh[2], sh[3]);
        let y = g.reshape(x, &[b * t, f, c])?;
        let y = self.freq.forward(g, s, y)?;
        let y = g.reshape(y, &[b, t, f, c])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b * f, t, c])?;
        let y = self.time.forward(g, s, y)?;
        let y = g.reshape(y, &[b, f, t, c])?;
        Ok(g.permute(y, &[0, 2, 1, 3])?)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        let mut v = self.freq.output_params();
        v.extend(self.time.output_params());
        v
    }
}

/// Self-attention across speaker streams at each bin, then a ReLU FFN; no
/// positional information.
#[derive(Debug, Clone)]
pub struct SpeakerInteraction {
    norm_attn: LayerNorm,
    attn: Attention,
    norm_ffn: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

impl SpeakerInteraction {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.attn_norm"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim)?,
            ffn1: Linear::new(store, &format!("{name}.ffn1"), dim, 4 * dim, true)?,
            ffn2: Linear::new(store, &format!("{name}.ffn2"), 4 * dim, dim, true)?,
        })
    }

    /// `x [k, t, f, c]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let (k, t, f, c) = (sh[0], sh[1], sh[2], sh[3]);
        let y = g.permute(x, &[1, 2, 0, 3])?;
        let y = g.reshape(y, &[t * f, k, c])?;
        let h = self.norm_attn.forward(g, s, y)?;
        let h = self.attn.forward(g, s, h, h, None, false)?;
        let y = g.add(y, h)?;
        let h = self.norm_ffn.forward(g, s, y)?;
        let h = self.ffn1.forward(g, s, h)?;
        let h = g.relu(h)?;
        let h = self.ffn2.forward(g, s, h)?;
        let y = g.add(y, h)?;
        let y = g.reshape(y, &[t, f, k, c])?;
        Ok(g.permute(y, &[2, 0, 1, 3])?)
    }
}

/// Three pointwise projections merged into complex filter taps and applied
/// to the context stack.
#[derive(Debug, Clone)]
pub struct FilterHead {
    real: Linear,
    imag: Linear,
    mag: Linear,
    combine: FilterCombine,
}

impl FilterHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        taps: usize,
        combine: FilterCombine,
    ) -> Result<Self> {
        Ok(Self {
            real: Linear::new(store, &format!("{name}.real"), dim, taps, true)?,
            imag: Linear::new(store, &format!("{name}.imag"), dim, taps, true)?,
            mag: Linear::new(store, &format!("{name}.mag"), dim, taps, true)?,
            combine,
        })
    }

    /// Filter taps `[k, t, f, taps, 2]` from `d [k, t, f, c]`.
    pub fn filters<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, d: Var) -> Result<Var> {
        let r = self.real.forward(g, s, d)?;
        let i = self.imag.forward(g, s, d)?;
        let m = self.mag.forward(g, s, d)?;
        Ok(g.filter_combine(r, i, m, self.combine)?)
    }

    /// Separated spectra `[k, t, f, 2]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, d: Var, ctx: Var) -> Result<Var> {
        let w = self.filters(g, s, d)?;
        Ok(g.deep_filter(w, ctx)?)
    }

    /// The magnitude projection, unused by the polar combination.
    pub fn magnitude_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.mag.w];
        v.extend(self.mag.b);
        v
    }
}

/// Sinusoidal table `[len, dim]`: even channels sine, odd channels cosine.
pub fn sinusoid_table(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[p * dim + 2 * i] = (p as f64 * freq).sin();
            out[p * dim + 2 * i + 1] = (p as f64 * freq).cos();
        }
    }
    out
}

/// 2-D table `[t, f, dim]`: the first half of the channels encodes the frame
/// index, the second half the bin index.
pub fn sinusoid_table_2d(frames: usize, bins: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let (pt, pf) = (sinusoid_table(frames, half), sinusoid_table(bins, half));
    let mut out = Vec::with_capacity(frames * bins * dim);
    for t in 0..frames {
        for f in 0..bins {
            out.extend_from_slice(&pt[t * half..(t + 1) * half]);
            out.extend_from_slice(&pf[f * half..(f + 1) * half]);
        }
    }
    out
}

pub fn constant_table<T: Real>(g: &mut Graph<T>, shape: &[usize], data: &[f64]) -> Result<Var> {
    let t = Tensor::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())?;
    Ok(g.constant(t)?)
}
