//! Synthetic multi-channel mixtures: speech-like harmonic sources, toy
//! exponential-tail room responses, white sensor noise and truncated-response
//! training targets.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signal::Waveform;
use crate::wav::{read_wav, write_wav, WavEncoding};

pub const MANIFEST_VERSION: u32 = 1;

/// Unit direct-path tap at `delay` followed by uniform noise under an
/// `exp(-6.9 t / rt60)` amplitude envelope (time measured from the direct
/// path). `rt60 == 0` gives a pure delay.
pub fn gen_toy_rir(rt60: f64, delay: usize, length: usize, sample_rate: u32, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(rt60 >= 0.0 && rt60.is_finite()) {
        return invalid("rt60", format!("{rt60}"));
    }
    if delay >= length {
        return invalid("rir", format!("delay {delay} does not fit in {length} taps"));
    }
    let mut h = vec![0.0; length];
    h[delay] = 1.0;
    if rt60 > 0.0 {
        let decay = 6.9 / (rt60 * sample_rate as f64);
        // Tail energy of roughly the direct path, capped so the direct tap stays the peak.
        let gain = (2.0 * decay).sqrt().min(0.5);
        let spread = 3f64.sqrt();
        for (n, v) in h.iter_mut().enumerate().skip(delay + 1) {
            let u: f64 = rng.random_range(-spread..spread);
            *v = gain * u * (-decay * (n - delay) as f64).exp();
        }
    }
    Ok(h)
}

/// Keeps taps `0..=peak + n_offset` and zeroes the rest.
pub fn truncate_rir(h: &[f64], n_offset: usize) -> Vec<f64> {
    let peak = h
        .iter()
        .enumerate()
        .fold((0, -1.0), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
        .0;
    let keep = (peak + n_offset + 1).min(h.len());
    h.iter().enumerate().map(|(i, &v)| if i < keep { v } else { 0.0 }).collect()
}

/// Linear convolution truncated to `x.len()` samples.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let taps = h.iter().rposition(|v| *v != 0.0).map_or(0, |i| i + 1);
    if n == 0 || taps == 0 {
        return vec![0.0; n];
    }
    if taps <= 64 {
        return (0..n)
            .map(|i| (0..taps.min(i + 1)).map(|j| h[j] * x[i - j]).sum())
            .collect();
    }
    let size = (n + taps - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let (fwd, inv) = (planner.plan_fft_forward(size), planner.plan_fft_inverse(size));
    let mut a: Vec<Complex64> = (0..size).map(|i| Complex64::new(x.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    let mut b: Vec<Complex64> = (0..size)
        .map(|i| Complex64::new(if i < taps { h[i] } else { 0.0 }, 0.0))
        .collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..n].iter().map(|z| z.re / size as f64).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Speech-like source: an amplitude-modulated harmonic complex with a
/// wandering fundamental and static resonances, normalized to unit RMS.
pub fn speech_like_source(len: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let f0 = rng.random_range(90.0..260.0);
    let vibrato = [(rng.random_range(0.2..1.0), rng.random_range(0.03..0.1)), (rng.random_range(1.5..4.0), rng.random_range(0.01..0.04))];
    let phases: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let formants: Vec<(f64, f64)> = (0..3)
        .map(|i| (rng.random_range(300.0 + 800.0 * i as f64..900.0 + 1000.0 * i as f64), rng.random_range(150.0..400.0)))
        .collect();
    let syllable_rate = rng.random_range(2.5..5.0);
    let noise_mix = rng.random_range(0.0..0.05);
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / sr;
        let f = f0
            * (1.0
                + vibrato[0].1 * (std::f64::consts::TAU * vibrato[0].0 * t + phases[0]).sin()
                + vibrato[1].1 * (std::f64::consts::TAU * vibrato[1].0 * t + phases[1]).sin());
        phase += std::f64::consts::TAU * f / sr;
        let mut v = 0.0;
        let mut h = 1;
        while h as f64 * f < 0.45 * sr {
            let hf = h as f64 * f;
            let env: f64 = formants
                .iter()
                .map(|(c, w)| (-((hf - c) / w).powi(2)).exp())
                .sum::<f64>()
                + 0.05;
            v += env / (h as f64).powf(0.7) * (h as f64 * phase).sin();
            h += 1;
        }
        let gate = (std::f64::consts::TAU * syllable_rate * t + phases[2]).sin() * 0.5 + 0.5;
        let noise: f64 = rng.sample(StandardNormal);
        out.push(gate.powf(0.7) * (v + noise_mix * noise));
    }
    let r = rms(&out).max(1e-12);
    out.iter_mut().for_each(|v| *v /= r);
    out
}

#[derive(Debug, Clone)]
pub struct ToyRoom {
    pub mics: usize,
    pub rt60: f64,
    /// `delays[k][m]` in samples.
    pub delays: Vec<Vec<usize>>,
    /// `rirs[k][m]`.
    pub rirs: Vec<Vec<Vec<f64>>>,
}

impl ToyRoom {
    pub fn generate(
        sources: usize,
        mics: usize,
        rt60: f64,
        max_delay: usize,
        sample_rate: u32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let tail = (rt60 * sample_rate as f64 * 1.2).ceil() as usize;
        let length = max_delay + tail + 1;
        let mut delays = Vec::with_capacity(sources);
        let mut rirs = Vec::with_capacity(sources);
        for _ in 0..sources {
            let d: Vec<usize> = (0..mics).map(|_| rng.random_range(0..=max_delay)).collect();
            let r = d
                .iter()
                .map(|&dm| gen_toy_rir(rt60, dm, length, sample_rate, rng))
                .collect::<Result<Vec<_>>>()?;
            delays.push(d);
            rirs.push(r);
        }
        Ok(Self {
            mics,
            rt60,
            delays,
            rirs,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub mixture: Waveform,
    pub sources: Vec<Vec<f64>>,
    /// Reference-channel images through truncated responses.
    pub targets: Vec<Vec<f64>>,
    pub k_true: usize,
    pub snr_db: Option<f64>,
    pub rt60: f64,
    pub seed: u64,
}

/// Noise scale giving `snr_db` against the louder reference-channel image.
fn noise_gain(images_ref: &[Vec<f64>], noise_ref: &[f64], snr_db: f64) -> f64 {
    let loud = images_ref.iter().map(|x| energy(x)).fold(0.0, f64::max);
    (loud / (energy(noise_ref) * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Convolves each source with its full responses on every microphone, adds
/// white noise (`None` = noiseless) and builds truncated-response targets on
/// microphone 0.
pub fn synthesize_mixture(
    sources: &[Vec<f64>],
    room: &ToyRoom,
    noise_snr_db: Option<f64>,
    k: usize,
    n_offset: usize,
    sample_rate: u32,
    rng: &mut impl Rng,
) -> Result<MixtureSample> {
    if k == 0 || k > sources.len() || k > room.rirs.len() {
        return invalid(
            "speaker count",
            format!("K = {k} with {} sources and {} responses", sources.len(), room.rirs.len()),
        );
    }
    let len = sources[0].len();
    if sources[..k].iter().any(|s| s.len() != len || energy(s) == 0.0) {
        return invalid("sources", "sources must share a length and be non-silent");
    }
    let mut channels = vec![vec![0.0; len]; room.mics];
    let mut images_ref = Vec::with_capacity(k);
    let mut targets = Vec::with_capacity(k);
    for (src, rirs) in sources[..k].iter().zip(&room.rirs) {
        for (m, h) in rirs.iter().enumerate() {
            let img = convolve(src, h);
            if m == 0 {
                images_ref.push(img.clone());
            }
            for (c, v) in channels[m].iter_mut().zip(img) {
                *c += v;
            }
        }
        targets.push(convolve(src, &truncate_rir(&rirs[0], n_offset)));
    }
    if let Some(snr) = noise_snr_db {
        let noise: Vec<Vec<f64>> = (0..room.mics)
            .map(|_| (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let g = noise_gain(&images_ref, &noise[0], snr);
        for (c, n) in channels.iter_mut().zip(noise) {
            for (v, e) in c.iter_mut().zip(n) {
                *v += g * e;
            }
        }
    }
    Ok(MixtureSample {
        mixture: Waveform::new(channels, sample_rate)?,
        sources: sources[..k].to_vec(),
        targets,
        k_true: k,
        snr_db: noise_snr_db,
        rt60: room.rt60,
        seed: 0,
    })
}

/// Generator settings for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub mics: usize,
    /// `[lo, hi]`; `[0, 0]` is anechoic.
    pub rt60_range: [f64; 2],
    /// `[lo, hi]` in dB; `None` is noiseless.
    pub snr_range: Option<[f64; 2]>,
    /// Largest direct-path delay in samples.
    pub max_delay: usize,
    /// Defaults to 256 taps for several microphones and 512 for one.
    pub n_offset: Option<usize>,
    /// Random per-source level in dB, uniform in `[-spread, spread]`.
    pub level_spread_db: f64,
    pub write_sources: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 8,
            k_min: 2,
            k_max: 2,
            duration_s: 2.0,
            sample_rate: 8000,
            mics: 1,
            rt60_range: [0.0, 0.0],
            snr_range: None,
            max_delay: 0,
            n_offset: None,
            level_spread_db: 2.5,
            write_sources: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_min == 0 || self.k_min > self.k_max {
            return invalid("dataset spec", format!("K range [{}, {}]", self.k_min, self.k_max));
        }
        if self.mics == 0 || self.sample_rate == 0 || !(self.duration_s > 0.0) {
            return invalid("dataset spec", "mics, sample_rate and duration_s must be positive");
        }
        if !(self.rt60_range[0] >= 0.0 && self.rt60_range[0] <= self.rt60_range[1]) {
            return invalid("dataset spec", format!("rt60 range {:?}", self.rt60_range));
        }
        if let Some([lo, hi]) = self.snr_range {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return invalid("dataset spec", format!("snr range [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    pub fn n_offset(&self) -> usize {
        self.n_offset.unwrap_or(if self.mics > 1 { 256 } else { 512 })
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    /// Seed of sample `index`, decorrelated from neighbouring indices.
    pub fn sample_seed(&self, index: usize) -> u64 {
        let mut z = self.seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Deterministically generates sample `index`.
    pub fn generate(&self, index: usize) -> Result<MixtureSample> {
        self.validate()?;
        let seed = self.sample_seed(index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(self.k_min..=self.k_max);
        let len = self.num_samples();
        let sources: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let s = speech_like_source(len, self.sample_rate, &mut rng);
                let level = if self.level_spread_db > 0.0 {
                    rng.random_range(-self.level_spread_db..=self.level_spread_db)
                } else {
                    0.0
                };
                let g = 10f64.powf(level / 20.0);
                s.into_iter().map(|v| v * g).collect()
            })
            .collect();
        let rt60 = if self.rt60_range[1] > self.rt60_range[0] {
            rng.random_range(self.rt60_range[0]..=self.rt60_range[1])
        } else {
            self.rt60_range[0]
        };
        let room = ToyRoom::generate(k, self.mics, rt60, self.max_delay, self.sample_rate, &mut rng)?;
        let snr = self.snr_range.map(|[lo, hi]| if hi > lo { rng.random_range(lo..=hi) } else { lo });
        let mut sample = synthesize_mixture(&sources, &room, snr, k, self.n_offset(), self.sample_rate, &mut rng)?;
        sample.seed = seed;
        Ok(sample)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture_path: String,
    pub target_paths: Vec<String>,
    #[serde(rename = "K_true")]
    pub k_true: usize,
    pub rt60: f64,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub samples: Vec<ManifestEntry>,
}

/// A loaded manifest entry.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub mixture: Waveform,
    pub targets: Vec<Vec<f64>>,
    pub k_true: usize,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.version != MANIFEST_VERSION {
            return invalid("manifest", format!("version {} (expected {MANIFEST_VERSION})", m.version));
        }
        Ok(m)
    }

    /// Reads every sample's audio; paths are relative to `base`.
    pub fn load_samples(&self, base: &Path) -> Result<Vec<LoadedSample>> {
        self.samples
            .iter()
            .map(|e| {
                let mixture = read_wav(base.join(&e.mixture_path))?;
                let targets = e
                    .target_paths
                    .iter()
                    .map(|p| Ok(read_wav(base.join(p))?.into_channels().swap_remove(0)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(LoadedSample {
                    id: e.id.clone(),
                    mixture,
                    targets,
                    k_true: e.k_true,
                })
            })
            .collect()
    }
}

/// Writes `spec.count` samples as float WAVs plus `manifest.json` under `dir`
/// and returns the manifest path.
pub fn make_dataset(spec: &DatasetSpec, dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let s = spec.generate(i)?;
        let id = format!("mix{i:05}");
        let mixture_path = format!("{id}_mixture.wav");
        write_wav(dir.join(&mixture_path), &s.mixture, WavEncoding::Float32)?;
        let mut target_paths = Vec::with_capacity(s.k_true);
        for (k, t) in s.targets.iter().enumerate() {
            let p = format!("{id}_target{k}.wav");
            write_wav(dir.join(&p), &Waveform::mono(t.clone(), spec.sample_rate)?, WavEncoding::Float32)?;
            target_paths.push(p);
            if spec.write_sources {
                let p = format!("{id}_source{k}.wav");
                write_wav(dir.join(&p), &Waveform::mono(s.sources[k].clone(), spec.sample_rate)?, WavEncoding::Float32)?;
            }
        }
        samples.push(ManifestEntry {
            id,
            mixture_path,
            target_paths,
            k_true: s.k_true,
            rt60: s.rt60,
            snr_db: s.snr_db,
            seed: s.seed,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        samples,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Long single-microphone recording where `speakers` talkers take turns with
/// partial overlap; returns the mixture and per-speaker dry tracks.
pub fn synth_conversation(
    duration_s: f64,
    speakers: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<(Waveform, Vec<Vec<f64>>)> {
    if speakers == 0 {
        return invalid("conversation", "no speakers");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (duration_s * sample_rate as f64).round() as usize;
    let mut tracks = vec![vec![0.0; len]; speakers];
    let voices: Vec<Vec<f64>> = (0..speakers).map(|_| speech_like_source(len, sample_rate, &mut rng)).collect();
    let mut start = 0usize;
    let mut who = 0usize;
    while start < len {
        let turn = (rng.random_range(1.5..3.0) * sample_rate as f64) as usize;
        let end = (start + turn).min(len);
        tracks[who][start..end].copy_from_slice(&voices[who][start..end]);
        let overlap = (rng.random_range(0.0..0.5) * sample_rate as f64) as usize;
        start = end.saturating_sub(overlap).max(start + 1);
        who = (who + 1) % speakers;
    }
    let mix: Vec<f64> = (0..len).map(|i| tracks.iter().map(|t| t[i]).sum()).collect();
    Ok((Waveform::mono(mix, sample_rate)?, tracks))
}
