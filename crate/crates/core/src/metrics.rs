//! Segmentation and survival objectives, plus the evaluation metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};
use crate::volume::Mask;

pub const DICE_SMOOTH: f64 = 1e-5;
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_RANK_WEIGHT: f64 = 0.1;
pub const DEFAULT_RANK_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub subject_id: String,
    /// Event or censoring time; strictly positive.
    pub time: f64,
    /// `true` for an observed event, `false` when censored.
    pub event: bool,
}

/// Dice over raw binary buffers. Both empty scores 1.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(alloc::format!(
            "dice: lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::invalid(alloc::format!(
            "dice: mask dims {:?} vs {:?}",
            pred.dims.0,
            gt.dims.0
        )));
    }
    dice(&pred.data, &gt.data)
}

/// Soft-Dice + mean BCE on probabilities, with gradient w.r.t. `p`.
///
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the clamp passes no
/// gradient.
pub fn seg_loss_grad<F: Real>(p: &[F], gt: &[u8]) -> Result<(F, Vec<F>)> {
    if p.len() != gt.len() || p.is_empty() {
        return Err(Error::invalid("seg_loss: shape mismatch"));
    }
    let n = p.len() as f64;
    let (mut spg, mut sp, mut sg, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (&pi, &gi) in p.iter().zip(gt) {
        let pc = pi.as_f64().clamp(PROB_EPS, 1.0 - PROB_EPS);
        let g = (gi != 0) as u8 as f64;
        spg += pc * g;
        sp += pc;
        sg += g;
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
    }
    let num = 2.0 * spg + DICE_SMOOTH;
    let den = sp + sg + DICE_SMOOTH;
    let loss = 1.0 - num / den + bce / n;
    let grad = p
        .iter()
        .zip(gt)
        .map(|(&pi, &gi)| {
            let raw = pi.as_f64();
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
                return F::zero();
            }
            let g = (gi != 0) as u8 as f64;
            let d_dice = -(2.0 * g * den - num) / (den * den);
            let d_bce = (-g / raw + (1.0 - g) / (1.0 - raw)) / n;
            F::of(d_dice + d_bce)
        })
        .collect();
    Ok((F::of(loss), grad))
}

pub fn seg_loss<F: Real>(p: &[F], gt: &[u8]) -> Result<F> {
    seg_loss_grad(p, gt).map(|(l, _)| l)
}

/// The same objective evaluated from logits: the Dice term uses
/// `sigmoid(z)` and the BCE term the overflow-free logit form. Used in
/// training, where it avoids the vanishing gradient of the clamp.
pub fn seg_loss_logits_grad<F: Real>(z: &[F], gt: &[u8]) -> Result<(F, Vec<F>)> {
    if z.len() != gt.len() || z.is_empty() {
        return Err(Error::invalid("seg_loss: shape mismatch"));
    }
    let n = z.len() as f64;
    let p: Vec<f64> = z.iter().map(|&v| sigmoid(v.as_f64())).collect();
    let (mut spg, mut sp, mut sg, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for ((&zi, &pi), &gi) in z.iter().zip(&p).zip(gt) {
        let g = (gi != 0) as u8 as f64;
        let zi = zi.as_f64();
        spg += pi * g;
        sp += pi;
        sg += g;
        bce += zi.max(0.0) - zi * g + (-zi.abs()).exp().ln_1p();
    }
    let num = 2.0 * spg + DICE_SMOOTH;
    let den = sp + sg + DICE_SMOOTH;
    let loss = 1.0 - num / den + bce / n;
    let grad = p
        .iter()
        .zip(gt)
        .map(|(&pi, &gi)| {
            let g = (gi != 0) as u8 as f64;
            let d_dice = -(2.0 * g * den - num) / (den * den) * pi * (1.0 - pi);
            F::of(d_dice + (pi - g) / n)
        })
        .collect();
    Ok((F::of(loss), grad))
}

/// Discrete time bins with equal-frequency interior edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBins {
    /// `n_bins - 1` ascending interior cut points.
    pub edges: Vec<f64>,
}

impl TimeBins {
    pub fn equal_frequency(times: &[f64], n_bins: usize) -> Result<TimeBins> {
        if times.is_empty() || n_bins < 1 {
            return Err(Error::invalid("time bins need at least one time and one bin"));
        }
        let mut sorted = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let edges = (1..n_bins)
            .map(|k| {
                let q = k as f64 / n_bins as f64 * (sorted.len() - 1) as f64;
                let lo = q.floor() as usize;
                let hi = (lo + 1).min(sorted.len() - 1);
                sorted[lo] + (q - lo as f64) * (sorted[hi] - sorted[lo])
            })
            .collect();
        Ok(TimeBins { edges })
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Index of the bin containing `t`; edges belong to the upper bin.
    pub fn bin_of(&self, t: f64) -> usize {
        self.edges.partition_point(|&e| e <= t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeepHitConfig {
    pub rank_weight: f64,
    pub sigma: f64,
}

impl Default for DeepHitConfig {
    fn default() -> Self {
        DeepHitConfig {
            rank_weight: DEFAULT_RANK_WEIGHT,
            sigma: DEFAULT_RANK_SIGMA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeepHitTerms {
    pub nll: f64,
    pub rank: f64,
    pub total: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Single-risk DeepHit loss on row-major bin probabilities
/// (`records.len() × n_bins`), with gradient w.r.t. the probabilities.
///
/// Likelihood: an event contributes `-ln p[k]` for its bin `k`; a censored
/// subject contributes `-ln Σ_{j ≥ k} p[j]`, the mass at or after the bin
/// it was last seen in. Both are averaged over subjects.
///
/// Ranking: for each comparable pair (`event_i`, `t_i < t_j`) with cumulative
/// incidences `F_i`, `F_j` at `k_i`, the penalty is
/// `softplus(-(F_i - F_j) / σ)`, averaged over pairs and scaled by the
/// rank weight.
pub fn deephit_loss_grad<F: Real>(
    probs: &[F],
    records: &[SurvivalRecord],
    bins: &TimeBins,
    cfg: DeepHitConfig,
) -> Result<(DeepHitTerms, Vec<F>)> {
    let nb = bins.n_bins();
    let n = records.len();
    if n == 0 {
        return Err(Error::invalid("deephit: empty batch"));
    }
    if probs.len() != n * nb {
        return Err(Error::invalid(alloc::format!(
            "deephit: expected {} probabilities, got {}",
            n * nb,
            probs.len()
        )));
    }
    let p: Vec<f64> = probs.iter().map(|v| v.as_f64()).collect();
    let k: Vec<usize> = records.iter().map(|r| bins.bin_of(r.time)).collect();
    let mut grad = vec![0.0f64; n * nb];

    let mut nll = 0.0;
    for (i, r) in records.iter().enumerate() {
        let row = &p[i * nb..(i + 1) * nb];
        if r.event {
            let v = row[k[i]].max(1e-12);
            nll -= v.ln();
            grad[i * nb + k[i]] -= 1.0 / v / n as f64;
        } else {
            let v: f64 = row[k[i]..].iter().sum::<f64>().max(1e-12);
            nll -= v.ln();
            for j in k[i]..nb {
                grad[i * nb + j] -= 1.0 / v / n as f64;
            }
        }
    }
    nll /= n as f64;

    let cif = |i: usize, kk: usize| -> f64 { p[i * nb..i * nb + kk + 1].iter().sum() };
    let mut rank = 0.0;
    let mut pairs = 0usize;
    let mut pair_grads: Vec<(usize, usize, usize, f64)> = Vec::new();
    for i in 0..n {
        if !records[i].event {
            continue;
        }
        for j in 0..n {
            if records[i].time < records[j].time {
                let diff = cif(i, k[i]) - cif(j, k[i]);
                rank += softplus(-diff / cfg.sigma);
                // d softplus(-d/σ)/dd = -sigmoid(-d/σ)/σ
                pair_grads.push((i, j, k[i], -sigmoid(-diff / cfg.sigma) / cfg.sigma));
                pairs += 1;
            }
        }
    }
    if pairs > 0 {
        let scale = cfg.rank_weight / pairs as f64;
        rank /= pairs as f64;
        for (i, j, kk, g) in pair_grads {
            for b in 0..=kk {
                grad[i * nb + b] += scale * g;
                grad[j * nb + b] -= scale * g;
            }
        }
    }
    let terms = DeepHitTerms {
        nll,
        rank,
        total: nll + cfg.rank_weight * rank,
    };
    Ok((terms, grad.into_iter().map(F::of).collect()))
}

pub fn deephit_loss<F: Real>(
    probs: &[F],
    records: &[SurvivalRecord],
    bins: &TimeBins,
    cfg: DeepHitConfig,
) -> Result<f64> {
    deephit_loss_grad(probs, records, bins, cfg).map(|(t, _)| t.total)
}

/// Row-wise softmax over `n_bins` columns.
pub fn softmax_rows<F: Real>(logits: &[F], n_bins: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(n_bins) {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: F = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Back-propagate through [`softmax_rows`].
pub fn softmax_rows_backward<F: Real>(probs: &[F], dprobs: &[F], n_bins: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(probs.len());
    for (p, d) in probs.chunks(n_bins).zip(dprobs.chunks(n_bins)) {
        let s: F = p.iter().zip(d).map(|(&a, &b)| a * b).sum();
        out.extend(p.iter().zip(d).map(|(&a, &b)| a * (b - s)));
    }
    out
}

/// Harrell's concordance index. Risk ties count one half.
pub fn concordance_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if risks.len() != records.len() {
        return Err(Error::invalid("concordance: risks and records differ in length"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].time.total_cmp(&records[b].time));
    let mut num = 0.0;
    let mut comparable = 0usize;
    for (pos, &i) in order.iter().enumerate() {
        if !records[i].event {
            continue;
        }
        for &j in &order[pos + 1..] {
            if records[j].time <= records[i].time {
                continue;
            }
            comparable += 1;
            if risks[i] > risks[j] {
                num += 1.0;
            } else if risks[i] == risks[j] {
                num += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedResult("concordance: no comparable pairs".into()));
    }
    Ok(num / comparable as f64)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && x[idx[e + 1]] == x[idx[s]] {
            e += 1;
        }
        let avg = (s + e) as f64 / 2.0;
        for &i in &idx[s..=e] {
            r[i] = avg;
        }
        s = e + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman: need two equal-length samples of size >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedResult("spearman: constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn rec(time: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord {
            subject_id: String::new(),
            time,
            event,
        }
    }

    #[test]
    fn dice_examples() {
        let d = Dims::new(4, 2, 1);
        let mut a = Mask::empty(d, "x", "s");
        let mut b = Mask::empty(d, "x", "s");
        a.data[..4].fill(1);
        b.data[2..6].fill(1);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let e = Mask::empty(d, "x", "s");
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        let mut c = Mask::empty(d, "x", "s");
        c.data[6..].fill(1);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.0);
        let other = Mask::empty(Dims::new(8, 1, 1), "x", "s");
        assert!(matches!(dice_score(&a, &other), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn seg_loss_examples() {
        let gt = [1u8, 0, 1, 0];
        let exact: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
        assert!(seg_loss(&exact, &gt).unwrap() < 1e-3);
        let half = [0.5f64; 4];
        // soft dice at p = 0.5: 1 - (2 + s) / (4 + s)
        let dice_term = 1.0 - (2.0 + DICE_SMOOTH) / (4.0 + DICE_SMOOTH);
        let bce = seg_loss(&half, &gt).unwrap() - dice_term;
        assert!((bce - core::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn logit_loss_agrees_with_probability_loss() {
        let z = [-2.0f64, 0.3, 1.7, -0.1, 0.0];
        let gt = [0u8, 1, 1, 0, 1];
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let a = seg_loss(&p, &gt).unwrap();
        let (b, _) = seg_loss_logits_grad(&z, &gt).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn deephit_examples() {
        let bins = TimeBins {
            edges: (1..8).map(|k| k as f64).collect(),
        };
        let uniform = [0.125f64; 8];
        let r = [rec(3.5, true)];
        let (t, _) = deephit_loss_grad(&uniform, &r, &bins, DeepHitConfig::default()).unwrap();
        assert!((t.nll - 8f64.ln()).abs() < 1e-12);
        let mut onehot = [0.0f64; 8];
        onehot[3] = 1.0;
        let (t, _) = deephit_loss_grad(&onehot, &r, &bins, DeepHitConfig::default()).unwrap();
        assert!(t.nll.abs() < 1e-12);
        assert!(matches!(
            deephit_loss::<f64>(&[], &[], &bins, DeepHitConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn deephit_rank_vanishes_when_ordered() {
        let bins = TimeBins { edges: vec![1.0] };
        let probs = [1.0f64, 0.0, 0.0, 1.0];
        let r = [rec(0.5, true), rec(1.5, true)];
        let (t, _) = deephit_loss_grad(&probs, &r, &bins, DeepHitConfig::default()).unwrap();
        assert!(t.rank < 1e-4);
    }

    #[test]
    fn time_bins_are_equal_frequency() {
        let times: Vec<f64> = (0..80).map(|i| i as f64).collect();
        let b = TimeBins::equal_frequency(&times, 8).unwrap();
        let mut counts = [0usize; 8];
        for &t in &times {
            counts[b.bin_of(t)] += 1;
        }
        assert!(counts.iter().all(|&c| (9..=11).contains(&c)), "{counts:?}");
    }

    #[test]
    fn concordance_examples() {
        let r: Vec<SurvivalRecord> = [(1.0, true), (2.0, true), (3.0, false), (4.0, true)]
            .iter()
            .map(|&(t, e)| rec(t, e))
            .collect();
        assert_eq!(concordance_index(&[4.0, 3.0, 2.0, 1.0], &r).unwrap(), 1.0);
        // Subject 3 is censored, so only five pairs are comparable.
        assert!((concordance_index(&[3.0, 4.0, 2.0, 1.0], &r).unwrap() - 4.0 / 5.0).abs() < 1e-15);
        let all_events: Vec<SurvivalRecord> = (1..=4).map(|t| rec(t as f64, true)).collect();
        assert!(
            (concordance_index(&[3.0, 4.0, 2.0, 1.0], &all_events).unwrap() - 5.0 / 6.0).abs() < 1e-15
        );
        assert_eq!(concordance_index(&[1.0, 2.0, 3.0, 4.0], &r).unwrap(), 0.0);
        let censored = [rec(1.0, false), rec(2.0, false)];
        assert!(matches!(
            concordance_index(&[0.0, 1.0], &censored),
            Err(Error::UndefinedResult(_))
        ));
    }

    #[test]
    fn spearman_of_monotone_is_one() {
        let x = [1.0, 2.0, 3.0, 10.0];
        let y = [0.1, 0.2, 5.0, 9.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }
}
