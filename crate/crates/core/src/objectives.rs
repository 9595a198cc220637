//! Separation losses with analytic waveform gradients, permutation search,
//! attractor existence loss and the stage-weighting schedule.
//!
//! All losses here are evaluated in `f64` outside the autodiff graph; callers
//! feed the returned waveform gradients back through the synthesis adjoint.

use std::f64::consts::LN_10;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::signal::Stft;

/// Guard added to energies inside log ratios.
pub const EPS: f64 = 1e-8;

const DB: f64 = 10.0 / LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    /// Clipped SI-SNR on waveforms, magnitude SI-SNR on auxiliary stages.
    SisnrFamily,
    /// L1 on STFT magnitude, real and imaginary parts; magnitude-only L1 on
    /// auxiliary stages.
    L1TfFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub alpha_decay: f64,
    pub alpha_decay_start: u32,
    pub clip_db: f64,
    pub loss_family: LossFamily,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            alpha_decay: 0.95,
            alpha_decay_start: 30,
            clip_db: 30.0,
            loss_family: LossFamily::SisnrFamily,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid("loss config", format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return invalid("loss config", format!("alpha_decay {} outside (0, 1]", self.alpha_decay));
        }
        if !self.clip_db.is_finite() {
            return invalid("loss config", "clip_db must be finite");
        }
        Ok(())
    }

    /// Auxiliary weight for `epoch` (0-based).
    pub fn alpha_at(&self, epoch: u32) -> f64 {
        self.alpha * self.alpha_decay.powi(epoch.saturating_sub(self.alpha_decay_start) as i32)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

fn check_pair(y: &[f64], s: &[f64]) -> Result<f64> {
    if y.len() != s.len() {
        return shape_err("loss", format!("estimate {} vs target {} samples", y.len(), s.len()));
    }
    let es = energy(s);
    if es <= 0.0 {
        return Err(Error::Degenerate("all-zero target signal".into()));
    }
    Ok(es)
}

/// Optimal scale of the target onto the estimate, `<y, s> / |s|^2`.
pub fn projection_gain(y: &[f64], s: &[f64]) -> Result<f64> {
    Ok(dot(y, s) / check_pair(y, s)?)
}

/// Scale-invariant SNR in dB, capped at `clip_db`.
pub fn si_snr(y: &[f64], s: &[f64], clip_db: f64) -> Result<f64> {
    Ok(si_snr_grad(y, s, clip_db)?.0)
}

/// SI-SNR and its gradient with respect to the estimate (zero when capped).
pub fn si_snr_grad(y: &[f64], s: &[f64], clip_db: f64) -> Result<(f64, Vec<f64>)> {
    let gamma = projection_gain(y, s)?;
    let target: Vec<f64> = s.iter().map(|v| gamma * v).collect();
    let err: Vec<f64> = target.iter().zip(y).map(|(t, y)| t - y).collect();
    let (et, ee) = (energy(&target) + EPS, energy(&err) + EPS);
    let value = DB * (et.ln() - ee.ln());
    if value >= clip_db {
        return Ok((clip_db, vec![0.0; y.len()]));
    }
    let grad = target
        .iter()
        .zip(&err)
        .map(|(t, e)| DB * (2.0 * t / et + 2.0 * e / ee))
        .collect();
    Ok((value, grad))
}

/// Signal-to-distortion ratio with a least-squares projection of the estimate
/// onto the target.
pub fn sdr(y: &[f64], s: &[f64]) -> Result<f64> {
    let gamma = projection_gain(y, s)?;
    let proj: Vec<f64> = s.iter().map(|v| gamma * v).collect();
    let err: f64 = proj.iter().zip(y).map(|(p, y)| (y - p).powi(2)).sum();
    Ok(DB * ((energy(&proj) + EPS).ln() - (err + EPS).ln()))
}

/// Magnitude-domain SI-SNR: `|F(gamma s)|` against `|F(y)|`, with the
/// waveform-domain gain `gamma`. Capped at `clip_db`.
pub fn mag_si_snr_grad(y: &[f64], s: &[f64], clip_db: f64, stft: &Stft) -> Result<(f64, Vec<f64>)> {
    let ss = check_pair(y, s)?;
    let gamma = dot(y, s) / ss;
    let sref: Vec<f64> = stft.analyze(s).iter().map(|z| z.norm()).collect();
    let fy = stft.analyze(y);
    let b: Vec<f64> = fy.iter().map(|z| z.norm()).collect();
    let a: Vec<f64> = sref.iter().map(|v| gamma.abs() * v).collect();
    let diff: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a - b).collect();
    let (ea, ed) = (energy(&a) + EPS, energy(&diff) + EPS);
    let value = DB * (ea.ln() - ed.ln());
    if value >= clip_db {
        return Ok((clip_db, vec![0.0; y.len()]));
    }
    // Path through |F(y)|.
    let spec_grad: Vec<Complex64> = fy
        .iter()
        .zip(&diff)
        .map(|(z, d)| {
            let mag = z.norm();
            if mag > 0.0 {
                z * (DB * 2.0 * d / ed / mag)
            } else {
                Complex64::default()
            }
        })
        .collect();
    let mut grad = stft.analyze_adjoint(&spec_grad, y.len());
    // Path through the gain.
    let sign = if gamma >= 0.0 { 1.0 } else { -1.0 };
    let a_ref = energy(&sref);
    let dgamma = DB * (2.0 * gamma * a_ref / ea - 2.0 * sign * dot(&diff, &sref) / ed);
    for (g, sv) in grad.iter_mut().zip(s) {
        *g += dgamma * sv / ss;
    }
    Ok((value, grad))
}

pub fn mag_si_snr(y: &[f64], s: &[f64], clip_db: f64, stft: &Stft) -> Result<f64> {
    Ok(mag_si_snr_grad(y, s, clip_db, stft)?.0)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sum |(|Fy| - |Fs|)| + w_ri (sum |Re(Fy - Fs)| + sum |Im(Fy - Fs)|)` and
/// its gradient. `w_ri = 0` gives the magnitude-only variant.
fn tf_l1_grad(y: &[f64], s: &[f64], w_ri: f64, stft: &Stft) -> Result<(f64, Vec<f64>)> {
    if y.len() != s.len() {
        return shape_err("l1 loss", format!("estimate {} vs target {} samples", y.len(), s.len()));
    }
    let (fy, fs) = (stft.analyze(y), stft.analyze(s));
    let mut value = 0.0;
    let spec_grad: Vec<Complex64> = fy
        .iter()
        .zip(&fs)
        .map(|(zy, zs)| {
            let (my, dm) = (zy.norm(), zy.norm() - zs.norm());
            let (dr, di) = (zy.re - zs.re, zy.im - zs.im);
            value += dm.abs() + w_ri * (dr.abs() + di.abs());
            let mut g = Complex64::new(w_ri * sign(dr), w_ri * sign(di));
            if my > 0.0 {
                g += zy * (sign(dm) / my);
            }
            g
        })
        .collect();
    Ok((value, stft.analyze_adjoint(&spec_grad, y.len())))
}

pub fn l1_tf_loss_grad(y: &[f64], s: &[f64], stft: &Stft) -> Result<(f64, Vec<f64>)> {
    tf_l1_grad(y, s, 0.5, stft)
}

pub fn l1_tf_loss(y: &[f64], s: &[f64], stft: &Stft) -> Result<f64> {
    Ok(l1_tf_loss_grad(y, s, stft)?.0)
}

pub fn l1_mag_loss_grad(y: &[f64], s: &[f64], stft: &Stft) -> Result<(f64, Vec<f64>)> {
    tf_l1_grad(y, s, 0.0, stft)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitAssignment {
    /// `permutation[k]` is the source assigned to output `k`.
    pub permutation: Vec<usize>,
    pub loss_value: f64,
}

/// Minimum-cost bijection for `loss[k][j]` = loss of output `k` against source
/// `j`. Exhaustive up to four speakers, Hungarian beyond.
pub fn pit_assign(loss: &[Vec<f64>]) -> Result<PitAssignment> {
    let k = loss.len();
    if k == 0 || loss.iter().any(|r| r.len() != k) {
        return shape_err("pit_assign", "loss matrix must be square and non-empty");
    }
    let permutation = if k <= 4 {
        exhaustive_assign(loss)
    } else {
        hungarian(loss)
    };
    let loss_value = permutation.iter().enumerate().map(|(i, &j)| loss[i][j]).sum();
    Ok(PitAssignment {
        permutation,
        loss_value,
    })
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
}

pub(crate) fn exhaustive_assign(loss: &[Vec<f64>]) -> Vec<usize> {
    let mut best = (f64::INFINITY, Vec::new());
    for p in permutations(loss.len()) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| loss[i][j]).sum();
        if total < best.0 || best.1.is_empty() {
            best = (total, p);
        }
    }
    best.1
}

/// Kuhn-Munkres with row/column potentials, O(n^3).
pub(crate) fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // col_match[j] = row matched to column j (1-based, 0 = none)
    let mut col_match = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_match[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_match[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_match[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_match[j0] = col_match[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[col_match[j] - 1] = j - 1;
    }
    perm
}

fn bce(p: f64, active: bool) -> f64 {
    let q = if active { p } else { 1.0 - p };
    -(q.max(f64::MIN_POSITIVE)).ln()
}

fn check_count(slots: usize, k_true: usize) -> Result<()> {
    if slots < 2 || k_true == 0 || k_true >= slots {
        return invalid(
            "speaker count",
            format!("K_true {k_true} must lie in 1..={}", slots.saturating_sub(1)),
        );
    }
    Ok(())
}

/// Mean binary cross-entropy over all attractor slots; the first `k_true`
/// slots are active.
pub fn attractor_bce(probs: &[f64], k_true: usize) -> Result<f64> {
    check_count(probs.len(), k_true)?;
    Ok(probs.iter().enumerate().map(|(k, &p)| bce(p, k < k_true)).sum::<f64>() / probs.len() as f64)
}

/// Gradient of [`attractor_bce`] with respect to the pre-sigmoid logits.
pub fn attractor_bce_logit_grad(probs: &[f64], k_true: usize) -> Result<Vec<f64>> {
    check_count(probs.len(), k_true)?;
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .enumerate()
        .map(|(k, &p)| (p - if k < k_true { 1.0 } else { 0.0 }) / n)
        .collect())
}

/// `(1 - alpha) final + alpha mean(aux)`; without auxiliary stages the final
/// loss is returned unchanged.
pub fn combine_stage_losses(final_loss: f64, aux: &[f64], alpha: f64) -> f64 {
    if aux.is_empty() {
        return final_loss;
    }
    (1.0 - alpha) * final_loss + alpha * aux.iter().sum::<f64>() / aux.len() as f64
}

/// Loss, PIT permutation and per-stage waveform gradients for one example.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub final_loss: f64,
    pub aux_losses: Vec<f64>,
    pub attractor_loss: Option<f64>,
    pub assignment: PitAssignment,
    /// `[stage][speaker][sample]`, gradient of `total`.
    pub stage_grads: Vec<Vec<Vec<f64>>>,
    pub logit_grad: Option<Vec<f64>>,
}

fn final_term(
    family: LossFamily,
    y: &[f64],
    s: &[f64],
    clip: f64,
    stft: &Stft,
) -> Result<(f64, Vec<f64>)> {
    Ok(match family {
        LossFamily::SisnrFamily => {
            let (v, g) = si_snr_grad(y, s, clip)?;
            (-v, g.into_iter().map(|x| -x).collect())
        }
        LossFamily::L1TfFamily => l1_tf_loss_grad(y, s, stft)?,
    })
}

fn aux_term(family: LossFamily, y: &[f64], s: &[f64], clip: f64, stft: &Stft) -> Result<(f64, Vec<f64>)> {
    Ok(match family {
        LossFamily::SisnrFamily => {
            let (v, g) = mag_si_snr_grad(y, s, clip, stft)?;
            (-v, g.into_iter().map(|x| -x).collect())
        }
        LossFamily::L1TfFamily => l1_mag_loss_grad(y, s, stft)?,
    })
}

/// Full training objective.
///
/// `stages[b][k]` is the waveform of output `k` at stage `b`; the last stage
/// is the final output. The permutation is solved on the final stage and
/// reused for every auxiliary stage. `attractor` carries the existence
/// probabilities and the true speaker count.
pub fn training_objective(
    stages: &[Vec<Vec<f64>>],
    targets: &[Vec<f64>],
    cfg: &LossConfig,
    epoch: u32,
    stft: &Stft,
    attractor: Option<(&[f64], usize)>,
) -> Result<Objective> {
    let Some(last) = stages.last() else {
        return invalid("objective", "no output stages");
    };
    let k = targets.len();
    if stages.iter().any(|s| s.len() != k) {
        return shape_err("objective", format!("{k} targets but stage outputs differ in count"));
    }
    let family = cfg.loss_family;
    let matrix = last
        .iter()
        .map(|y| {
            targets
                .iter()
                .map(|s| match family {
                    LossFamily::SisnrFamily => si_snr(y, s, cfg.clip_db).map(|v| -v),
                    LossFamily::L1TfFamily => l1_tf_loss(y, s, stft),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let assignment = pit_assign(&matrix)?;
    let alpha = cfg.alpha_at(epoch);
    let n_aux = stages.len() - 1;
    let final_weight = if n_aux == 0 { 1.0 } else { 1.0 - alpha };
    let aux_weight = if n_aux == 0 { 0.0 } else { alpha / n_aux as f64 };

    let mut stage_grads = Vec::with_capacity(stages.len());
    let mut aux_losses = Vec::with_capacity(n_aux);
    let mut final_loss = 0.0;
    for (b, outputs) in stages.iter().enumerate() {
        let is_final = b == n_aux;
        let (mut value, mut grads) = (0.0, Vec::with_capacity(k));
        for (y, &j) in outputs.iter().zip(&assignment.permutation) {
            let (v, g) = if is_final {
                final_term(family, y, &targets[j], cfg.clip_db, stft)?
            } else {
                aux_term(family, y, &targets[j], cfg.clip_db, stft)?
            };
            let w = if is_final { final_weight } else { aux_weight };
            value += v;
            grads.push(g.into_iter().map(|x| x * w).collect());
        }
        if is_final {
            final_loss = value;
        } else {
            aux_losses.push(value);
        }
        stage_grads.push(grads);
    }
    let mut total = combine_stage_losses(final_loss, &aux_losses, alpha);
    let (attractor_loss, logit_grad) = match attractor {
        Some((probs, k_true)) => {
            let l = attractor_bce(probs, k_true)?;
            total += l;
            (Some(l), Some(attractor_bce_logit_grad(probs, k_true)?))
        }
        None => (None, None),
    };
    Ok(Objective {
        total,
        final_loss,
        aux_losses,
        attractor_loss,
        assignment,
        stage_grads,
        logit_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn si_snr_identity_and_scale_hit_the_cap() {
        let s = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(si_snr(&s, &s, 30.0).unwrap(), 30.0);
        let y: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&y, &s, 30.0).unwrap(), 30.0);
    }

    #[test]
    fn orthogonal_estimate_is_finite_and_very_negative() {
        let s = [1.0, 0.0, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0, 0.0];
        let v = si_snr(&y, &s, 30.0).unwrap();
        // gamma = 0: 10 log10(eps / (1 + eps))
        assert!((v - 10.0 * (EPS / (1.0 + EPS)).log10()).abs() < 1e-9);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(si_snr(&[1.0, 2.0], &[0.0, 0.0], 30.0).is_err());
        assert!(si_snr(&[1.0], &[1.0, 2.0], 30.0).is_err());
    }

    #[test]
    fn permutations_enumerated_lexicographically() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0, 1, 2]);
        assert_eq!(p[5], vec![2, 1, 0]);
        assert_eq!(permutations(1), vec![vec![0]]);
    }

    #[test]
    fn pit_small_cases() {
        let id = vec![vec![0.0, 5.0], vec![5.0, 0.0]];
        assert_eq!(pit_assign(&id).unwrap().permutation, vec![0, 1]);
        let swap = vec![vec![5.0, 0.0], vec![0.0, 5.0]];
        assert_eq!(pit_assign(&swap).unwrap().permutation, vec![1, 0]);
        assert!(pit_assign(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        assert_eq!(attractor_bce(&[1.0, 1.0, 0.0, 0.0], 2).unwrap(), 0.0);
        let v = attractor_bce(&[0.5; 4], 1).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(attractor_bce(&[0.5; 4], 4).is_err());
        assert!(attractor_bce(&[0.5; 4], 0).is_err());
    }

    #[test]
    fn alpha_schedule_closed_form() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.alpha_at(0), 0.5);
        assert_eq!(cfg.alpha_at(30), 0.5);
        assert!((cfg.alpha_at(32) - 0.5 * 0.95f64.powi(2)).abs() < 1e-15);
    }
}
