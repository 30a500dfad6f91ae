//! Feature-space summaries: cosine separation of labelled groups and a
//! two-axis principal projection.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `1 − cos(a, b)`; zero vectors are at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    /// Mean distance over pairs sharing a label.
    pub within: f64,
    /// Mean distance over pairs with different labels.
    pub between: f64,
    /// `between / within` (infinite when `within` is zero).
    pub ratio: f64,
}

/// Mean pairwise cosine distance within and between label groups.
pub fn separation(rows: &[Vec<f64>], labels: &[usize]) -> Result<Separation> {
    separation_in_blocks(rows, labels, &vec![0; rows.len()])
}

/// As [`separation`], but only pairs that share a block are compared, so
/// that variation between blocks (e.g. different acquisitions) does not
/// count as within-group spread.
pub fn separation_in_blocks(rows: &[Vec<f64>], labels: &[usize], blocks: &[usize]) -> Result<Separation> {
    if rows.len() != labels.len() || rows.len() != blocks.len() {
        return Err(Error::invalid("separation: rows, labels and blocks differ in length"));
    }
    let (mut ws, mut wn, mut bs, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if blocks[i] != blocks[j] {
                continue;
            }
            let d = cosine_distance(&rows[i], &rows[j]);
            if labels[i] == labels[j] {
                ws += d;
                wn += 1;
            } else {
                bs += d;
                bn += 1;
            }
        }
    }
    if wn == 0 || bn == 0 {
        return Err(Error::UndefinedResult(
            "separation needs at least one within-group and one between-group pair".into(),
        ));
    }
    let within = ws / wn as f64;
    let between = bs / bn as f64;
    let ratio = if within == 0.0 { f64::INFINITY } else { between / within };
    Ok(Separation { within, between, ratio })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Two unit-norm principal axes.
    pub axes: [Vec<f64>; 2],
    /// Variance captured by each axis.
    pub variance: [f64; 2],
    /// Centred rows projected onto the axes.
    pub coords: Vec<[f64; 2]>,
}

fn power_iteration(cov: &[f64], d: usize) -> (Vec<f64>, f64) {
    // Deterministic start that is not orthogonal to any axis in practice.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut w = vec![0.0; d];
        for r in 0..d {
            w[r] = (0..d).map(|c| cov[r * d + c] * v[c]).sum();
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return (v.iter().map(|_| 0.0).collect(), 0.0);
        }
        w.iter_mut().for_each(|x| *x /= n);
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = w;
        lambda = n;
        if delta < 1e-12 {
            break;
        }
    }
    (v, lambda)
}

/// Top-two principal axes of the rows (power iteration with deflation).
pub fn pca2(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if n < 2 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("pca needs at least two equal-length, non-empty rows"));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centred {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b] / (n - 1) as f64;
            }
        }
    }
    let (v1, l1) = power_iteration(&cov, d);
    for a in 0..d {
        for b in 0..d {
            cov[a * d + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (v2, l2) = power_iteration(&cov, d);
    let coords = centred
        .iter()
        .map(|r| {
            [
                r.iter().zip(&v1).map(|(x, y)| x * y).sum(),
                r.iter().zip(&v2).map(|(x, y)| x * y).sum(),
            ]
        })
        .collect();
    Ok(Projection {
        mean,
        axes: [v1, v2],
        variance: [l1, l2],
        coords,
    })
}
