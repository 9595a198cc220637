//! Normalized correlation between the reference channel and the
//! spectro-temporal neighbourhood of every bin.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::signal::{for_each_tap, num_taps, ComplexSpectrogram};

/// Magnitude floor used by both normalizations.
pub const MAG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    PhatBeta,
    ScotBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrNorm {
    pub kind: NormKind,
    pub beta: f64,
}

impl Default for CorrNorm {
    fn default() -> Self {
        Self {
            kind: NormKind::ScotBeta,
            beta: 0.5,
        }
    }
}

/// Correlation entries `[frame][bin][tap]`, tap order as in
/// [`crate::signal::ContextStack`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor {
    data: Vec<Complex64>,
    frames: usize,
    bins: usize,
    taps: usize,
    norm: CorrNorm,
}

impl CorrelationTensor {
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn norm(&self) -> CorrNorm {
        self.norm
    }

    pub fn get(&self, t: usize, f: usize, tap: usize) -> Complex64 {
        self.data[(t * self.bins + f) * self.taps + tap]
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return invalid("beta", format!("{beta} outside [0, 1]"));
    }
    Ok(())
}

fn correlate_with(
    spec: &ComplexSpectrogram,
    time_half: usize,
    freq_half: usize,
    norm: CorrNorm,
    entry: impl Fn(Complex64, Complex64) -> Complex64,
) -> CorrelationTensor {
    let taps = num_taps(spec.channels(), time_half, freq_half);
    let bins = spec.bins();
    let mut data = vec![Complex64::default(); spec.frames() * bins * taps];
    for_each_tap(spec, time_half, freq_half, |t, f, tap, v| {
        if let Some(v) = v {
            data[(t * bins + f) * taps + tap] = entry(spec.get(t, f, 0), v);
        }
    });
    CorrelationTensor {
        data,
        frames: spec.frames(),
        bins,
        taps,
        norm,
    }
}

/// Raw correlation `X[t, f, ref] * conj(X[t + dl, f + di, m])`.
pub fn correlate_miso(spec: &ComplexSpectrogram, time_half: usize, freq_half: usize) -> CorrelationTensor {
    let norm = CorrNorm {
        kind: NormKind::None,
        beta: 0.0,
    };
    correlate_with(spec, time_half, freq_half, norm, |r, v| r * v.conj())
}

/// Divides every entry by `max(|z|, floor)^beta`.
pub fn normalize_phat_beta(z: &CorrelationTensor, beta: f64) -> Result<CorrelationTensor> {
    check_beta(beta)?;
    if z.norm.kind != NormKind::None {
        return invalid("phat input", "correlation is already normalized");
    }
    let data = z
        .data
        .iter()
        .map(|&v| v / v.norm().max(MAG_FLOOR).powf(beta))
        .collect();
    Ok(CorrelationTensor {
        data,
        norm: CorrNorm {
            kind: NormKind::PhatBeta,
            beta,
        },
        ..*z
    })
}

/// Correlation fused with per-operand magnitude normalization.
pub fn correlate_scot_beta(
    spec: &ComplexSpectrogram,
    time_half: usize,
    freq_half: usize,
    beta: f64,
) -> Result<CorrelationTensor> {
    check_beta(beta)?;
    let norm = CorrNorm {
        kind: NormKind::ScotBeta,
        beta,
    };
    Ok(correlate_with(spec, time_half, freq_half, norm, |r, v| {
        let d = r.norm().max(MAG_FLOOR).powf(beta) * v.norm().max(MAG_FLOOR).powf(beta);
        r * v.conj() / d
    }))
}

pub fn correlate(
    spec: &ComplexSpectrogram,
    time_half: usize,
    freq_half: usize,
    norm: CorrNorm,
) -> Result<CorrelationTensor> {
    match norm.kind {
        NormKind::None => Ok(correlate_miso(spec, time_half, freq_half)),
        NormKind::PhatBeta => normalize_phat_beta(&correlate_miso(spec, time_half, freq_half), norm.beta),
        NormKind::ScotBeta => correlate_scot_beta(spec, time_half, freq_half, norm.beta),
    }
}

/// Real-valued correlation features `[frame][bin][2 * taps]`, interleaving
/// real and imaginary parts per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct RealFeature {
    pub data: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
}

pub fn to_real_features(z: &CorrelationTensor) -> RealFeature {
    RealFeature {
        data: z.data.iter().flat_map(|v| [v.re, v.im]).collect(),
        frames: z.frames,
        bins: z.bins,
        channels: 2 * z.taps,
    }
}

pub fn from_real_features(feat: &RealFeature, norm: CorrNorm) -> Result<CorrelationTensor> {
    if feat.channels % 2 != 0 || feat.data.len() != feat.frames * feat.bins * feat.channels {
        return shape_err(
            "from_real_features",
            format!("{} values for {}x{}x{}", feat.data.len(), feat.frames, feat.bins, feat.channels),
        );
    }
    Ok(CorrelationTensor {
        data: feat.data.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect(),
        frames: feat.frames,
        bins: feat.bins,
        taps: feat.channels / 2,
        norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;

    fn spec1(values: &[Complex64]) -> ComplexSpectrogram {
        let cfg = StftConfig {
            frame_len: 2 * (values.len() - 1),
            hop: 1,
            window: crate::signal::WindowKind::Hann,
        };
        ComplexSpectrogram::new(values.to_vec(), 1, 1, cfg, 8000).unwrap()
    }

    #[test]
    fn phat_closed_forms() {
        let z = correlate_miso(&spec1(&[Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)]), 0, 0);
        assert_eq!(z.get(0, 0, 0), Complex64::new(4.0, 0.0));
        let half = normalize_phat_beta(&z, 0.5).unwrap();
        assert!((half.get(0, 0, 0) - Complex64::new(2.0, 0.0)).norm() < 1e-15);
        let full = normalize_phat_beta(&z, 1.0).unwrap();
        assert!((full.get(0, 0, 0).norm() - 1.0).abs() < 1e-15);
        assert_eq!(normalize_phat_beta(&z, 0.0).unwrap().data(), z.data());
        assert!(normalize_phat_beta(&z, 1.5).is_err());
        assert!(normalize_phat_beta(&full, 0.5).is_err());
    }

    #[test]
    fn scot_closed_form() {
        // Reference 2 at bin 0, neighbour 2j at bin 1: 2 * conj(2j) / (sqrt2 * sqrt2) = -2j.
        let s = spec1(&[Complex64::new(2.0, 0.0), Complex64::new(0.0, 2.0)]);
        let z = correlate_scot_beta(&s, 0, 1, 0.5).unwrap();
        // tap order for I=1, L=0, M=1: di = -1, 0, +1
        assert!((z.get(0, 0, 2) - Complex64::new(0.0, -2.0)).norm() < 1e-14);
        assert_eq!(z.get(0, 0, 0), Complex64::default());
    }

    #[test]
    fn real_feature_round_trip() {
        let s = spec1(&[Complex64::new(1.0, -1.0), Complex64::new(0.5, 2.0), Complex64::new(-3.0, 0.0)]);
        let z = correlate(&s, 0, 1, CorrNorm::default()).unwrap();
        let feat = to_real_features(&z);
        assert_eq!(feat.channels, 2 * z.taps());
        assert_eq!(from_real_features(&feat, z.norm()).unwrap(), z);
    }
}
