use std::path::Path;

use serde::{Deserialize, Serialize};
use srcorrnet_nn::{Graph, ParamStore};

use super::train::{load_checkpoint, model_checkpoint, stage_waveforms, TrainExample};
use crate::error::{invalid, Result};
use crate::model::{Mode, ModelInput, SrCorrNet};
use crate::objectives::{pit_assign, sdr, si_snr};
use crate::signal::{Stft, Waveform};

/// Streams separated from one mixture.
#[derive(Debug, Clone)]
pub struct Separation {
    pub streams: Vec<Vec<f64>>,
    /// Existence probabilities with the attractor split.
    pub probs: Option<Vec<f64>>,
}

/// A trained network ready for inference.
pub struct Separator {
    pub net: SrCorrNet,
    pub store: ParamStore<f32>,
    stft: Stft,
}

impl Separator {
    pub fn new(net: SrCorrNet, store: ParamStore<f32>) -> Result<Self> {
        let stft = Stft::new(net.config().stft)?;
        Ok(Self { net, store, stft })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (net, store) = load_checkpoint(path)?;
        Self::new(net, store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(model_checkpoint(&self.net, &self.store)?.save(path)?)
    }

    pub fn separate(&self, mixture: &Waveform) -> Result<Separation> {
        separate_with(&self.net, &self.store, &self.stft, mixture)
    }
}

pub(crate) fn separate_with(net: &SrCorrNet, store: &ParamStore<f32>, stft: &Stft, mixture: &Waveform) -> Result<Separation> {
    let input = ModelInput::<f32>::from_waveform(net.config(), stft, mixture)?;
    let mut g = Graph::new();
    let out = net.forward(&mut g, store, &input, None, Mode::Infer)?;
    let last = *out.stages.last().expect("final stage");
    let streams = stage_waveforms(&g, last, stft, mixture.len())?;
    let probs = out
        .attractor
        .map(|a| g.value(a.probs).data().iter().map(|&p| p as f64).collect());
    Ok(Separation { streams, probs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    /// Mean over reference speakers.
    pub si_snri: f64,
    pub sdri: f64,
    /// Per reference speaker, in target order.
    pub si_snri_per_speaker: Vec<f64>,
    pub k_true: usize,
    pub k_est: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub mean_si_snri: f64,
    pub mean_sdri: f64,
    /// Fraction of samples whose stream count equals the true count.
    pub count_accuracy: f64,
}

/// Metrics of `outputs` against `targets` with the permutation maximizing
/// summed SI-SNR. Extra outputs are ignored; missing ones count as silence.
pub fn evaluate_outputs(mixture_ref: &[f64], outputs: &[Vec<f64>], targets: &[Vec<f64>], clip_db: f64) -> Result<SampleMetrics> {
    let k = targets.len();
    if k == 0 {
        return invalid("evaluate", "no targets");
    }
    let silent = vec![0.0; mixture_ref.len()];
    let n = outputs.len().max(k);
    let out = |i: usize| outputs.get(i).map_or(silent.as_slice(), |v| v.as_slice());
    // Square cost over outputs x (targets + dummy columns).
    let mut cost = vec![vec![0.0; n]; n];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate().take(k) {
            *c = -si_snr(out(i), &targets[j], clip_db)?;
        }
    }
    let assignment = pit_assign(&cost)?;
    let mut si = vec![0.0; k];
    let mut sd = 0.0;
    for (i, &j) in assignment.permutation.iter().enumerate() {
        if j < k {
            let base = si_snr(mixture_ref, &targets[j], clip_db)?;
            si[j] = si_snr(out(i), &targets[j], clip_db)? - base;
            sd += sdr(out(i), &targets[j])? - sdr(mixture_ref, &targets[j])?;
        }
    }
    Ok(SampleMetrics {
        si_snri: si.iter().sum::<f64>() / k as f64,
        sdri: sd / k as f64,
        si_snri_per_speaker: si,
        k_true: k,
        k_est: outputs.len(),
    })
}

impl EvalReport {
    /// Means over `samples`; all zero for an empty set.
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let n = samples.len().max(1) as f64;
        Self {
            mean_si_snri: samples.iter().map(|s| s.si_snri).sum::<f64>() / n,
            mean_sdri: samples.iter().map(|s| s.sdri).sum::<f64>() / n,
            count_accuracy: samples.iter().filter(|s| s.k_est == s.k_true).count() as f64 / n,
            samples,
        }
    }
}

/// Separates every example and scores it on the reference channel.
pub fn evaluate(net: &SrCorrNet, store: &ParamStore<f32>, set: &[TrainExample], clip_db: f64) -> Result<EvalReport> {
    let stft = Stft::new(net.config().stft)?;
    let samples = set
        .iter()
        .map(|ex| {
            let sep = separate_with(net, store, &stft, &ex.mixture)?;
            evaluate_outputs(ex.mixture.channel(0), &sep.streams, &ex.targets, clip_db)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(samples))
}
