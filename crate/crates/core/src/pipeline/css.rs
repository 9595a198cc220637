use serde::{Deserialize, Serialize};

use super::eval::Separator;
use crate::error::{invalid, Result};
use crate::objectives::permutations;
use crate::signal::Waveform;

/// Chunking for continuous separation: `history + center + future` seconds
/// per chunk, hopped by `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CssConfig {
    pub history_s: f64,
    pub center_s: f64,
    pub future_s: f64,
    pub streams: usize,
}

impl Default for CssConfig {
    fn default() -> Self {
        Self {
            history_s: 1.2,
            center_s: 0.8,
            future_s: 0.4,
            streams: 2,
        }
    }
}

impl CssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.center_s > 0.0) || !(self.history_s >= 0.0) || !(self.future_s >= 0.0) || self.streams == 0 {
            return invalid("css config", format!("{self:?}"));
        }
        Ok(())
    }

    /// `(history, center, future)` in samples.
    fn samples(&self, sr: u32) -> (usize, usize, usize) {
        let n = |s: f64| (s * sr as f64).round() as usize;
        (n(self.history_s), n(self.center_s).max(1), n(self.future_s))
    }
}

/// Zero-lag normalized cross-correlation; zero when either side is silent.
pub fn normalized_correlation(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let den = (aa * bb).sqrt();
    if den > 0.0 {
        ab / den
    } else {
        0.0
    }
}

/// Permutation `p` maximizing `sum_k ncc(prev_tail[k], cur_head[p[k]])`;
/// output stream `k` continues with current stream `p[k]`. Ties keep the
/// earliest permutation in lexicographic order, so silence maps to identity.
pub fn stitch_align(prev_tail: &[Vec<f64>], cur_head: &[Vec<f64>]) -> Result<Vec<usize>> {
    if prev_tail.len() != cur_head.len() {
        return invalid("stitch", format!("{} vs {} streams", prev_tail.len(), cur_head.len()));
    }
    if let Some(len) = prev_tail.first().map(Vec::len) {
        if prev_tail.iter().chain(cur_head).any(|s| s.len() != len) {
            return invalid("stitch", "overlap lengths differ");
        }
    }
    let k = prev_tail.len();
    let score: Vec<Vec<f64>> = prev_tail
        .iter()
        .map(|a| cur_head.iter().map(|b| normalized_correlation(a, b)).collect())
        .collect();
    let mut best = (f64::NEG_INFINITY, (0..k).collect::<Vec<_>>());
    for p in permutations(k) {
        let s: f64 = p.iter().enumerate().map(|(i, &j)| score[i][j]).sum();
        if s > best.0 {
            best = (s, p);
        }
    }
    Ok(best.1)
}

fn fit_streams(mut streams: Vec<Vec<f64>>, count: usize, len: usize) -> Vec<Vec<f64>> {
    streams.truncate(count);
    streams.resize(count, vec![0.0; len]);
    streams
}

/// Chunk-wise separation of a long recording with stream stitching. The
/// first chunk emits its history and center, later chunks their center, and
/// the final chunk everything through the end.
pub fn css_separate(sep: &Separator, input: &Waveform, cfg: &CssConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let len = input.len();
    let (hist, center, fut) = cfg.samples(input.sample_rate());
    let chunk = hist + center + fut;
    if len <= chunk {
        return Ok(fit_streams(sep.separate(input)?.streams, cfg.streams, len));
    }
    let mut out = vec![vec![0.0; len]; cfg.streams];
    let mut prev: Option<(usize, Vec<Vec<f64>>)> = None;
    let mut start = 0usize;
    loop {
        let end = (start + chunk).min(len);
        let last = end == len;
        let seg = input.segment(start, end - start);
        let mut streams = fit_streams(sep.separate(&seg)?.streams, cfg.streams, end - start);
        if let Some((pstart, pstreams)) = &prev {
            // Overlap of this chunk with the previous one, in absolute samples.
            let (o0, o1) = (start, (pstart + chunk).min(len));
            let tail: Vec<Vec<f64>> = pstreams.iter().map(|s| s[o0 - pstart..o1 - pstart].to_vec()).collect();
            let head: Vec<Vec<f64>> = streams.iter().map(|s| s[..o1 - o0].to_vec()).collect();
            let perm = stitch_align(&tail, &head)?;
            streams = perm.iter().map(|&j| streams[j].clone()).collect();
        }
        let emit_from = if start == 0 { 0 } else { start + hist };
        let emit_to = if last { len } else { start + hist + center };
        for (o, s) in out.iter_mut().zip(&streams) {
            o[emit_from..emit_to].copy_from_slice(&s[emit_from - start..emit_to - start]);
        }
        if last {
            break;
        }
        prev = Some((start, streams));
        start += center;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_swapped_streams() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.71).cos()).collect();
        let c: Vec<f64> = (0..50).map(|i| ((i * i) % 7) as f64 - 3.0).collect();
        let prev = vec![a.clone(), b.clone(), c.clone()];
        assert_eq!(stitch_align(&prev, &prev).unwrap(), vec![0, 1, 2]);
        assert_eq!(stitch_align(&prev, &[b.clone(), a.clone(), c.clone()]).unwrap(), vec![1, 0, 2]);
        assert_eq!(stitch_align(&prev, &[c, a, b]).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn silence_keeps_identity() {
        let z = vec![vec![0.0; 10]; 2];
        assert_eq!(stitch_align(&z, &z).unwrap(), vec![0, 1]);
        assert_eq!(normalized_correlation(&z[0], &[1.0; 10]), 0.0);
    }

    #[test]
    fn mismatched_overlaps_rejected() {
        assert!(stitch_align(&[vec![1.0; 3]], &[vec![1.0; 4]]).is_err());
        assert!(stitch_align(&[vec![1.0; 3]], &[]).is_err());
    }
}
