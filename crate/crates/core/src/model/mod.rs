//! The separation network: correlation embedding, dual-path encoder, split
//! into speaker streams, weight-shared decoder stages with speaker
//! interaction, and deep-filter heads.

pub mod layers;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use srcorrnet_nn::{FilterCombine, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

use crate::corr::{correlate, to_real_features, CorrNorm};
use crate::error::{invalid, Result};
use crate::signal::{num_taps, unfold_context, ComplexSpectrogram, Stft, StftConfig, Waveform};
use layers::{
    constant_table, sinusoid_table, sinusoid_table_2d, Attention, Conv2d, FilterHead, LayerNorm, Linear,
    SpeakerInteraction, TfBlock,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Fixed,
    Attractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub hidden_channels: usize,
    pub enc_blocks: usize,
    /// Zero gives an encoder-only network that splits right before the
    /// filter head.
    pub dec_blocks: usize,
    pub attractor_blocks: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub time_half: usize,
    pub freq_half: usize,
    pub mics: usize,
    /// Fixed speaker count, or the maximum attractor count.
    pub speakers: usize,
    pub split: SplitKind,
    pub filter_combine: FilterCombine,
    pub corr_norm: CorrNorm,
    pub stft: StftConfig,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration used by the learning checks.
    fn default() -> Self {
        Self {
            channels: 32,
            hidden_channels: 64,
            enc_blocks: 1,
            dec_blocks: 2,
            attractor_blocks: 2,
            heads: 2,
            conv_kernel: 3,
            time_half: 1,
            freq_half: 1,
            mics: 1,
            speakers: 2,
            split: SplitKind::Fixed,
            filter_combine: FilterCombine::SigmoidGate,
            corr_norm: CorrNorm::default(),
            stft: StftConfig::default(),
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || self.heads == 0 || c % self.heads != 0 {
            return invalid("model config", format!("channels {c} not divisible by {} heads", self.heads));
        }
        if (c / self.heads) % 2 != 0 {
            return invalid("model config", "head width must be even for rotary encoding");
        }
        if c % 4 != 0 {
            return invalid("model config", "channels must be a multiple of 4");
        }
        if self.hidden_channels == 0 || self.conv_kernel % 2 == 0 {
            return invalid("model config", "hidden_channels must be positive and conv_kernel odd");
        }
        if self.enc_blocks == 0 {
            return invalid("model config", "enc_blocks must be at least 1");
        }
        if self.mics == 0 || self.speakers == 0 {
            return invalid("model config", "mics and speakers must be positive");
        }
        if self.split == SplitKind::Attractor && self.attractor_blocks == 0 {
            return invalid("model config", "attractor split needs attractor_blocks >= 1");
        }
        if !(0.0..=1.0).contains(&self.corr_norm.beta) {
            return invalid("model config", "corr_norm.beta outside [0, 1]");
        }
        self.stft.validate()
    }

    pub fn taps(&self) -> usize {
        num_taps(self.mics, self.time_half, self.freq_half)
    }

    pub fn feature_channels(&self) -> usize {
        2 * self.taps()
    }

    /// Attractor slots (`K_0 + 1`), zero for the fixed split.
    pub fn attractor_slots(&self) -> usize {
        match self.split {
            SplitKind::Fixed => 0,
            SplitKind::Attractor => self.speakers + 1,
        }
    }
}

/// Network inputs derived from a mixture.
#[derive(Debug, Clone)]
pub struct ModelInput<T> {
    /// `[t, f, 2 * taps]` normalized correlation features.
    pub features: Tensor<T>,
    /// `[t, f, taps, 2]` context stack of the mixture.
    pub context: Tensor<T>,
    pub spectrogram: ComplexSpectrogram,
}

impl<T: Real> ModelInput<T> {
    pub fn from_spectrogram(cfg: &ModelConfig, spec: ComplexSpectrogram) -> Result<Self> {
        if spec.channels() != cfg.mics {
            return invalid("model input", format!("{} channels, model expects {}", spec.channels(), cfg.mics));
        }
        let z = correlate(&spec, cfg.time_half, cfg.freq_half, cfg.corr_norm)?;
        let feat = to_real_features(&z);
        let features = Tensor::from_vec(
            &[feat.frames, feat.bins, feat.channels],
            feat.data.iter().map(|&v| T::of(v)).collect(),
        )?;
        let ctx = unfold_context(&spec, cfg.time_half, cfg.freq_half);
        let context = Tensor::from_vec(
            &[ctx.frames(), ctx.bins(), ctx.taps(), 2],
            ctx.data().iter().flat_map(|z| [T::of(z.re), T::of(z.im)]).collect(),
        )?;
        Ok(Self {
            features,
            context,
            spectrogram: spec,
        })
    }

    pub fn from_waveform(cfg: &ModelConfig, stft: &Stft, x: &Waveform) -> Result<Self> {
        Self::from_spectrogram(cfg, stft.forward(x)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Emits every stage and uses the true speaker count.
    Train,
    /// Emits the final stage only.
    Infer,
}

#[derive(Debug, Clone)]
pub struct AttractorOutput {
    /// `[K_0 + 1]` pre-sigmoid existence scores.
    pub logits: Var,
    pub probs: Var,
    /// Number of streams produced.
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[k, t, f, 2]` per stage; the last entry is the final output.
    pub stages: Vec<Var>,
    pub attractor: Option<AttractorOutput>,
}

#[derive(Debug, Clone)]
struct Embedding {
    conv_in: Conv2d,
    conv_out: Conv2d,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct FixedSplit {
    expand: Linear,
    mix: Linear,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct AttractorBlock {
    norm_cross: LayerNorm,
    cross: Attention,
    norm_self: LayerNorm,
    this: Attention,
    norm_ffn: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

#[derive(Debug, Clone)]
struct AttractorSplit {
    queries: ParamId,
    blocks: Vec<AttractorBlock>,
    norm_out: LayerNorm,
    exist: Linear,
    fuse_in: Linear,
    fuse_out: Linear,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
enum Split {
    Fixed(FixedSplit),
    Attractor(AttractorSplit),
}

#[derive(Debug, Clone)]
struct DecoderStage {
    block: TfBlock,
    interaction: SpeakerInteraction,
}

/// Layer layout of the network; weights live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct SrCorrNet {
    cfg: ModelConfig,
    embed: Embedding,
    encoder: Vec<TfBlock>,
    split: Split,
    decoder: Vec<DecoderStage>,
    aux_head: Option<FilterHead>,
    head: FilterHead,
}

impl SrCorrNet {
    /// Registers all parameters in `store` (which should be empty).
    pub fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let embed = Embedding {
            conv_in: Conv2d::new(store, "embed.conv_in", 3, cfg.feature_channels(), 2 * c)?,
            conv_out: Conv2d::new(store, "embed.conv_out", 3, c, c)?,
            norm: LayerNorm::new(store, "embed.norm", c)?,
        };
        let encoder = (0..cfg.enc_blocks)
            .map(|b| TfBlock::new(store, &format!("encoder.{b}"), cfg))
            .collect::<Result<_>>()?;
        let k = cfg.speakers;
        let split = match cfg.split {
            SplitKind::Fixed => Split::Fixed(FixedSplit {
                expand: Linear::new(store, "split.expand", c, 2 * k * c, true)?,
                mix: Linear::new(store, "split.mix", k * c, k * c, true)?,
                norm: LayerNorm::new(store, "split.norm", c)?,
            }),
            SplitKind::Attractor => {
                let slots = cfg.attractor_slots();
                let blocks = (0..cfg.attractor_blocks)
                    .map(|b| {
                        let n = format!("split.attractor.{b}");
                        Ok(AttractorBlock {
                            norm_cross: LayerNorm::new(store, &format!("{n}.cross_norm"), c)?,
                            cross: Attention::new(store, &format!("{n}.cross"), c, cfg.heads)?,
                            norm_self: LayerNorm::new(store, &format!("{n}.self_norm"), c)?,
                            this: Attention::new(store, &format!("{n}.self"), c, cfg.heads)?,
                            norm_ffn: LayerNorm::new(store, &format!("{n}.ffn_norm"), c)?,
                            ffn1: Linear::new(store, &format!("{n}.ffn1"), c, 4 * c, true)?,
                            ffn2: Linear::new(store, &format!("{n}.ffn2"), 4 * c, c, true)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Split::Attractor(AttractorSplit {
                    queries: store.register("split.queries", &[slots, c], Init::Uniform { fan_in: c })?,
                    blocks,
                    norm_out: LayerNorm::new(store, "split.attractor_norm", c)?,
                    exist: Linear::new(store, "split.exist", c, 1, true)?,
                    fuse_in: Linear::new(store, "split.fuse_in", 2 * c, 2 * c, true)?,
                    fuse_out: Linear::new(store, "split.fuse_out", c, c, true)?,
                    norm: LayerNorm::new(store, "split.norm", c)?,
                })
            }
        };
        let decoder = (0..cfg.dec_blocks)
            .map(|b| {
                Ok(DecoderStage {
                    block: TfBlock::new(store, &format!("decoder.{b}.block"), cfg)?,
                    interaction: SpeakerInteraction::new(store, &format!("decoder.{b}.speakers"), c, cfg.heads)?,
                })
            })
            .collect::<Result<_>>()?;
        let aux_head = if cfg.dec_blocks > 0 {
            Some(FilterHead::new(store, "aux_head", c, cfg.taps(), cfg.filter_combine)?)
        } else {
            None
        };
        let head = FilterHead::new(store, "head", c, cfg.taps(), cfg.filter_combine)?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            encoder,
            split,
            decoder,
            aux_head,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameters that receive no gradient by construction.
    pub fn inert_params(&self) -> Vec<ParamId> {
        match self.cfg.filter_combine {
            FilterCombine::TanhPolar => {
                let mut v = self.head.magnitude_params();
                if let Some(h) = &self.aux_head {
                    v.extend(h.magnitude_params());
                }
                v
            }
            FilterCombine::SigmoidGate => Vec::new(),
        }
    }

    /// Parameters closing the residual branches of every TF block.
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        self.encoder
            .iter()
            .chain(self.decoder.iter().map(|d| &d.block))
            .flat_map(|b| b.output_params())
            .collect()
    }

    /// `[t, f, 2 * taps]` features to `[t, f, c]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, feat: Var) -> Result<Var> {
        let sh = g.shape(feat).to_vec();
        if sh.len() != 3 || sh[2] != self.cfg.feature_channels() {
            return invalid(
                "features",
                format!("shape {sh:?}, expected [t, f, {}]", self.cfg.feature_channels()),
            );
        }
        let c = self.cfg.channels;
        let h = self.embed.conv_in.forward(g, s, feat)?;
        let h = g.swiglu(h)?;
        let h = self.embed.conv_out.forward(g, s, h)?;
        let h = self.embed.norm.forward(g, s, h)?;
        let pe = constant_table(g, &[sh[1], c], &sinusoid_table(sh[1], c))?;
        Ok(g.add_suffix(h, pe)?)
    }

    /// Encoder stack on `[1, t, f, c]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, e: Var) -> Result<Var> {
        self.encoder.iter().try_fold(e, |x, b| b.forward(g, s, x))
    }

    fn split_fixed<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, sp: &FixedSplit, e: Var) -> Result<Var> {
        let sh = g.shape(e).to_vec();
        let (t, f, c, k) = (sh[1], sh[2], sh[3], self.cfg.speakers);
        let h = sp.expand.forward(g, s, e)?;
        let h = g.swiglu(h)?;
        let h = sp.mix.forward(g, s, h)?;
        let h = g.reshape(h, &[t, f, k, c])?;
        let h = g.permute(h, &[2, 0, 1, 3])?;
        sp.norm.forward(g, s, h)
    }

    fn split_attractor<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        sp: &AttractorSplit,
        e: Var,
        k_true: Option<usize>,
    ) -> Result<(Var, AttractorOutput)> {
        let sh = g.shape(e).to_vec();
        let (t, f, c) = (sh[1], sh[2], sh[3]);
        let slots = self.cfg.attractor_slots();
        let k0 = self.cfg.speakers;
        if let Some(k) = k_true {
            if k == 0 || k > k0 {
                return invalid("speaker count", format!("K_true {k} outside 1..={k0}"));
            }
        }
        let pe = constant_table(g, &[t, f, c], &sinusoid_table_2d(t, f, c))?;
        let mem = g.add_suffix(e, pe)?;
        let mem = g.reshape(mem, &[1, t * f, c])?;
        let q = g.param(s, sp.queries);
        let mut a = g.reshape(q, &[1, slots, c])?;
        for b in &sp.blocks {
            let h = b.norm_cross.forward(g, s, a)?;
            let h = b.cross.forward(g, s, h, mem, None, false)?;
            a = g.add(a, h)?;
            let h = b.norm_self.forward(g, s, a)?;
            let h = b.this.forward(g, s, h, h, None, true)?;
            a = g.add(a, h)?;
            let h = b.norm_ffn.forward(g, s, a)?;
            let h = b.ffn1.forward(g, s, h)?;
            let h = g.relu(h)?;
            let h = b.ffn2.forward(g, s, h)?;
            a = g.add(a, h)?;
        }
        let a = sp.norm_out.forward(g, s, a)?;
        let logits = sp.exist.forward(g, s, a)?;
        let logits = g.reshape(logits, &[slots])?;
        let probs = g.sigmoid(logits)?;
        let count = match k_true {
            Some(k) => k,
            None => {
                let p = g.value(probs).data();
                p.iter().take_while(|&&v| v.f64() > 0.5).count().clamp(1, k0)
            }
        };
        let sel = g.reshape(a, &[slots, c])?;
        let sel = g.slice(sel, 0, 0, count)?;
        let sel = g.reshape(sel, &[count, 1, 1, c])?;
        let sel = g.repeat(sel, 1, t)?;
        let sel = g.repeat(sel, 2, f)?;
        let ek = g.repeat(e, 0, count)?;
        let h = g.concat(&[ek, sel], 3)?;
        let h = sp.fuse_in.forward(g, s, h)?;
        let h = g.swiglu(h)?;
        let h = sp.fuse_out.forward(g, s, h)?;
        let d = sp.norm.forward(g, s, h)?;
        Ok((d, AttractorOutput { logits, probs, count }))
    }

    /// Full network. `features [t, f, 2 * taps]`, `context [t, f, taps, 2]`.
    /// With the attractor split, `k_true` fixes the stream count; `None`
    /// infers it from the existence probabilities.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        input: &ModelInput<T>,
        k_true: Option<usize>,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let feat = g.constant(input.features.clone())?;
        let ctx = g.constant(input.context.clone())?;
        self.forward_vars(g, s, feat, ctx, k_true, mode)
    }

    /// As [`SrCorrNet::forward`] with caller-provided graph inputs.
    pub fn forward_vars<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        feat: Var,
        ctx: Var,
        k_true: Option<usize>,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let e = self.embed(g, s, feat)?;
        let sh = g.shape(e).to_vec();
        let e = g.reshape(e, &[1, sh[0], sh[1], sh[2]])?;
        let e = self.encode(g, s, e)?;
        let (mut d, attractor) = match &self.split {
            Split::Fixed(sp) => (self.split_fixed(g, s, sp, e)?, None),
            Split::Attractor(sp) => {
                let (d, a) = self.split_attractor(g, s, sp, e, k_true)?;
                (d, Some(a))
            }
        };
        let mut stages = Vec::with_capacity(self.decoder.len() + 1);
        for stage in &self.decoder {
            if mode == Mode::Train {
                let aux = self.aux_head.as_ref().expect("aux head exists with decoder stages");
                stages.push(aux.forward(g, s, d, ctx)?);
            }
            d = stage.block.forward(g, s, d)?;
            d = stage.interaction.forward(g, s, d)?;
        }
        stages.push(self.head.forward(g, s, d, ctx)?);
        Ok(ForwardOutput { stages, attractor })
    }
}

/// Converts a `[k, t, f, 2]` stage output into one mono spectrogram per
/// speaker.
pub fn stage_spectrograms<T: Real>(
    value: &Tensor<T>,
    config: StftConfig,
    sample_rate: u32,
) -> Result<Vec<ComplexSpectrogram>> {
    let sh = value.shape();
    let (k, t, f) = (sh[0], sh[1], sh[2]);
    let d = value.data();
    (0..k)
        .map(|s| {
            let base = s * t * f * 2;
            let data = (0..t * f)
                .map(|i| Complex64::new(d[base + 2 * i].f64(), d[base + 2 * i + 1].f64()))
                .collect();
            ComplexSpectrogram::new(data, t, 1, config, sample_rate)
        })
        .collect()
}
