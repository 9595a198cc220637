//! Waveforms, STFT analysis/synthesis, context unfolding and deep-filter
//! application.
//!
//! Spectrogram layout is `[frame][bin][channel]`, row-major. Framing uses
//! center padding: the signal is zero-padded by `frame_len / 2` on both ends
//! and frame `t` starts at padded index `t * hop`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Multi-channel real signal with equal-length channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return invalid("waveform", "sample rate must be positive");
        }
        if channels.is_empty() {
            return invalid("waveform", "no channels");
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return invalid("waveform", "channels differ in length");
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("waveform", "non-finite sample");
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Samples `start..start + len` of every channel, zero-filled past the end.
    pub fn segment(&self, start: usize, len: usize) -> Waveform {
        let channels = self
            .channels
            .iter()
            .map(|c| (start..start + len).map(|i| c.get(i).copied().unwrap_or(0.0)).collect())
            .collect();
        Waveform {
            channels,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

pub fn make_window(kind: WindowKind, length: usize) -> Result<Vec<f64>> {
    if length < 2 {
        return invalid("window", format!("length {length} must be at least 2"));
    }
    Ok(match kind {
        WindowKind::Hann => (0..length)
            .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / length as f64).cos()))
            .collect(),
        WindowKind::Rectangular => vec![1.0; length],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 128,
            hop: 64,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.frame_len % 2 != 0 {
            return invalid("stft config", format!("frame_len {} must be even and >= 2", self.frame_len));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return invalid("stft config", format!("hop {} must be in 1..={}", self.hop, self.frame_len));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Frame count for a signal of `n` samples under center padding.
    pub fn frames(&self, n: usize) -> usize {
        n / self.hop + 1
    }
}

/// Complex STFT `[frame][bin][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    frames: usize,
    bins: usize,
    channels: usize,
    config: StftConfig,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(
        data: Vec<Complex64>,
        frames: usize,
        channels: usize,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        config.validate()?;
        let bins = config.bins();
        if data.len() != frames * bins * channels {
            return shape_err(
                "spectrogram",
                format!("{} values for {frames}x{bins}x{channels}", data.len()),
            );
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return invalid("spectrogram", "non-finite value");
        }
        Ok(Self {
            data,
            frames,
            bins,
            channels,
            config,
            sample_rate,
        })
    }

    pub fn zeros(frames: usize, channels: usize, config: StftConfig, sample_rate: u32) -> Self {
        let bins = config.bins();
        Self {
            data: vec![Complex64::default(); frames * bins * channels],
            frames,
            bins,
            channels,
            config,
            sample_rate,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, t: usize, f: usize, m: usize) -> Complex64 {
        self.data[(t * self.bins + f) * self.channels + m]
    }

    /// One channel as a mono spectrogram.
    pub fn channel(&self, m: usize) -> ComplexSpectrogram {
        let data = self.data.iter().skip(m).step_by(self.channels).copied().collect();
        ComplexSpectrogram {
            data,
            frames: self.frames,
            bins: self.bins,
            channels: 1,
            config: self.config,
            sample_rate: self.sample_rate,
        }
    }
}

/// Planned STFT for one configuration.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: make_window(config.window, config.frame_len)?,
            forward: planner.plan_fft_forward(config.frame_len),
            inverse: planner.plan_fft_inverse(config.frame_len),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Multi-channel analysis.
    pub fn forward(&self, x: &Waveform) -> Result<ComplexSpectrogram> {
        if x.is_empty() {
            return invalid("stft input", "empty signal");
        }
        let frames = self.config.frames(x.len());
        let bins = self.config.bins();
        let m = x.num_channels();
        let mut data = vec![Complex64::default(); frames * bins * m];
        for (c, ch) in x.channels().iter().enumerate() {
            for (i, z) in self.analyze(ch).into_iter().enumerate() {
                data[i * m + c] = z;
            }
        }
        ComplexSpectrogram::new(data, frames, m, self.config, x.sample_rate())
    }

    /// Single-channel analysis, `[frame][bin]`.
    pub fn analyze(&self, x: &[f64]) -> Vec<Complex64> {
        let (n, half, bins) = (self.config.frame_len, self.config.frame_len / 2, self.config.bins());
        let frames = self.config.frames(x.len());
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::default(); n];
        for t in 0..frames {
            let start = (t * self.config.hop) as isize - half as isize;
            for (j, b) in buf.iter_mut().enumerate() {
                let idx = start + j as isize;
                let v = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(v * self.window[j], 0.0);
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        out
    }

    /// Weighted overlap-add synthesis normalized by the summed squared window.
    pub fn inverse(&self, spec: &ComplexSpectrogram, out_len: usize) -> Result<Waveform> {
        if spec.config() != self.config {
            return invalid("istft", "configuration differs from analysis");
        }
        let channels = (0..spec.channels())
            .map(|m| self.synthesize(spec.channel(m).data(), spec.frames(), out_len))
            .collect::<Result<Vec<_>>>()?;
        Waveform::new(channels, spec.sample_rate())
    }

    /// Single-channel synthesis from `[frame][bin]`.
    pub fn synthesize(&self, spec: &[Complex64], frames: usize, out_len: usize) -> Result<Vec<f64>> {
        let (n, half) = (self.config.frame_len, self.config.frame_len / 2);
        let norm = self.norm(frames, out_len)?;
        let mut acc = vec![0.0; frames * self.config.hop + n];
        let mut buf = vec![Complex64::default(); n];
        for t in 0..frames {
            self.irfft(&spec[t * self.config.bins()..(t + 1) * self.config.bins()], &mut buf);
            let start = t * self.config.hop;
            for j in 0..n {
                acc[start + j] += buf[j].re * self.window[j];
            }
        }
        Ok((0..out_len)
            .map(|i| acc.get(i + half).copied().unwrap_or(0.0) / norm[i])
            .collect())
    }

    /// Transpose of [`Stft::analyze`] viewed as a real-linear map from samples
    /// to `(re, im)` pairs. `grad` holds `dL/dre + i dL/dim` per bin.
    pub fn analyze_adjoint(&self, grad: &[Complex64], len: usize) -> Vec<f64> {
        let (n, half, bins) = (self.config.frame_len, self.config.frame_len / 2, self.config.bins());
        let frames = grad.len() / bins;
        let mut out = vec![0.0; len];
        let mut buf = vec![Complex64::default(); n];
        for t in 0..frames {
            // sum_k g_k e^{+i 2 pi k j / n} over the one-sided bins, real part.
            buf.iter_mut().for_each(|b| *b = Complex64::default());
            buf[..bins].copy_from_slice(&grad[t * bins..(t + 1) * bins]);
            self.inverse.process(&mut buf);
            let start = (t * self.config.hop) as isize - half as isize;
            for j in 0..n {
                let idx = start + j as isize;
                if idx >= 0 && (idx as usize) < len {
                    out[idx as usize] += buf[j].re * self.window[j];
                }
            }
        }
        out
    }

    /// Transpose of [`Stft::synthesize`]; returns `dL/dre + i dL/dim` per bin.
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> Result<Vec<Complex64>> {
        let (n, half, bins) = (self.config.frame_len, self.config.frame_len / 2, self.config.bins());
        let norm = self.norm(frames, grad.len())?;
        let mut padded = vec![0.0; frames * self.config.hop + n];
        for (i, (&g, &d)) in grad.iter().zip(&norm).enumerate() {
            if i + half < padded.len() {
                padded[i + half] = g / d;
            }
        }
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::default(); n];
        for t in 0..frames {
            let start = t * self.config.hop;
            for j in 0..n {
                buf[j] = Complex64::new(padded[start + j] * self.window[j], 0.0);
            }
            self.forward.process(&mut buf);
            for (k, z) in buf[..bins].iter().enumerate() {
                let interior = k != 0 && k != n / 2;
                let c = if interior { 2.0 } else { 1.0 } / n as f64;
                out.push(if interior {
                    z * c
                } else {
                    Complex64::new(z.re * c, 0.0)
                });
            }
        }
        Ok(out)
    }

    fn irfft(&self, half_spec: &[Complex64], buf: &mut [Complex64]) {
        let n = buf.len();
        for k in 0..n {
            buf[k] = if k < half_spec.len() {
                half_spec[k]
            } else {
                half_spec[n - k].conj()
            };
        }
        self.inverse.process(buf);
        let scale = 1.0 / n as f64;
        buf.iter_mut().for_each(|b| *b *= scale);
    }

    /// Per-output-sample sum of squared synthesis windows.
    fn norm(&self, frames: usize, out_len: usize) -> Result<Vec<f64>> {
        let (n, half) = (self.config.frame_len, self.config.frame_len / 2);
        let mut acc = vec![0.0; frames * self.config.hop + n];
        for t in 0..frames {
            for j in 0..n {
                acc[t * self.config.hop + j] += self.window[j] * self.window[j];
            }
        }
        let norm: Vec<f64> = (0..out_len).map(|i| acc.get(i + half).copied().unwrap_or(0.0)).collect();
        if let Some(i) = norm.iter().position(|&d| d < 1e-10) {
            return Err(Error::Degenerate(format!(
                "window overlap vanishes at output sample {i}; too few frames for {out_len} samples"
            )));
        }
        Ok(norm)
    }
}

pub fn stft(x: &Waveform, config: StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(config)?.forward(x)
}

pub fn istft(spec: &ComplexSpectrogram, out_len: usize) -> Result<Waveform> {
    Stft::new(spec.config())?.inverse(spec, out_len)
}

/// Spectro-temporal neighbourhood of every bin, `[frame][bin][tap]`.
///
/// Taps are ordered frequency offset (outer), time offset, channel (inner).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextStack {
    data: Vec<Complex64>,
    frames: usize,
    bins: usize,
    channels: usize,
    time_half: usize,
    freq_half: usize,
}

impl ContextStack {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn time_half(&self) -> usize {
        self.time_half
    }

    pub fn freq_half(&self) -> usize {
        self.freq_half
    }

    pub fn taps(&self) -> usize {
        num_taps(self.channels, self.time_half, self.freq_half)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, t: usize, f: usize, tap: usize) -> Complex64 {
        self.data[(t * self.bins + f) * self.taps() + tap]
    }
}

pub fn num_taps(channels: usize, time_half: usize, freq_half: usize) -> usize {
    channels * (2 * time_half + 1) * (2 * freq_half + 1)
}

/// Flat tap index for frequency offset `di`, time offset `dl`, channel `m`.
pub fn tap_index(di: isize, dl: isize, m: usize, channels: usize, time_half: usize, freq_half: usize) -> usize {
    let i = (di + freq_half as isize) as usize;
    let l = (dl + time_half as isize) as usize;
    (i * (2 * time_half + 1) + l) * channels + m
}

/// Visits every `(frame, bin, tap, neighbour)` with the neighbour's value,
/// or `None` when it lies outside the spectrogram.
pub(crate) fn for_each_tap(
    spec: &ComplexSpectrogram,
    time_half: usize,
    freq_half: usize,
    mut visit: impl FnMut(usize, usize, usize, Option<Complex64>),
) {
    let (nt, nf, nm) = (spec.frames() as isize, spec.bins() as isize, spec.channels());
    let (l, i) = (time_half as isize, freq_half as isize);
    for t in 0..nt {
        for f in 0..nf {
            let mut tap = 0;
            for di in -i..=i {
                for dl in -l..=l {
                    let (tt, ff) = (t + dl, f + di);
                    let inside = (0..nt).contains(&tt) && (0..nf).contains(&ff);
                    for m in 0..nm {
                        let v = inside.then(|| spec.get(tt as usize, ff as usize, m));
                        visit(t as usize, f as usize, tap, v);
                        tap += 1;
                    }
                }
            }
        }
    }
}

pub fn unfold_context(spec: &ComplexSpectrogram, time_half: usize, freq_half: usize) -> ContextStack {
    let taps = num_taps(spec.channels(), time_half, freq_half);
    let mut data = vec![Complex64::default(); spec.frames() * spec.bins() * taps];
    let bins = spec.bins();
    for_each_tap(spec, time_half, freq_half, |t, f, tap, v| {
        if let Some(v) = v {
            data[(t * bins + f) * taps + tap] = v;
        }
    });
    ContextStack {
        data,
        frames: spec.frames(),
        bins,
        channels: spec.channels(),
        time_half,
        freq_half,
    }
}

/// Complex deep filters `[speaker][frame][bin][tap]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTensor {
    data: Vec<Complex64>,
    speakers: usize,
    frames: usize,
    bins: usize,
    taps: usize,
}

impl FilterTensor {
    pub fn new(data: Vec<Complex64>, speakers: usize, frames: usize, bins: usize, taps: usize) -> Result<Self> {
        if data.len() != speakers * frames * bins * taps {
            return shape_err(
                "filter tensor",
                format!("{} values for {speakers}x{frames}x{bins}x{taps}", data.len()),
            );
        }
        Ok(Self {
            data,
            speakers,
            frames,
            bins,
            taps,
        })
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
}

/// `Y[k, t, f] = sum_tap W[k, t, f, tap] * ctx[t, f, tap]`, one mono
/// spectrogram per speaker.
pub fn apply_filter(
    filters: &FilterTensor,
    ctx: &ContextStack,
    config: StftConfig,
    sample_rate: u32,
) -> Result<Vec<ComplexSpectrogram>> {
    if filters.frames != ctx.frames || filters.bins != ctx.bins || filters.taps != ctx.taps() {
        return shape_err(
            "apply_filter",
            format!(
                "filters {}x{}x{} vs context {}x{}x{}",
                filters.frames,
                filters.bins,
                filters.taps,
                ctx.frames,
                ctx.bins,
                ctx.taps()
            ),
        );
    }
    let (bins, taps) = (ctx.frames * ctx.bins, ctx.taps());
    (0..filters.speakers)
        .map(|k| {
            let data = (0..bins)
                .map(|b| {
                    let w = &filters.data[(k * bins + b) * taps..(k * bins + b + 1) * taps];
                    let x = &ctx.data[b * taps..(b + 1) * taps];
                    w.iter().zip(x).map(|(w, x)| w * x).sum()
                })
                .collect();
            ComplexSpectrogram::new(data, ctx.frames, 1, config, sample_rate)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_closed_form() {
        let w = make_window(WindowKind::Hann, 4).unwrap();
        let expect = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(make_window(WindowKind::Hann, 128).unwrap()[0], 0.0);
        assert!(make_window(WindowKind::Hann, 1).is_err());
        assert!(make_window(WindowKind::Hann, 0).is_err());
    }

    #[test]
    fn frame_count_law() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frames(16000), 251);
        assert_eq!(cfg.bins(), 65);
    }

    #[test]
    fn config_validation() {
        let bad_hop = StftConfig {
            hop: 0,
            ..StftConfig::default()
        };
        assert!(bad_hop.validate().is_err());
        let odd = StftConfig {
            frame_len: 127,
            ..StftConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn empty_signal_rejected() {
        let x = Waveform::mono(vec![], 8000).unwrap();
        assert!(stft(&x, StftConfig::default()).is_err());
    }

    #[test]
    fn waveform_invariants() {
        assert!(Waveform::new(vec![vec![0.0; 3], vec![0.0; 4]], 8000).is_err());
        assert!(Waveform::mono(vec![f64::NAN], 8000).is_err());
        assert!(Waveform::mono(vec![0.0], 0).is_err());
    }
}
