//! Accuracy measures, the rectification/imbalance similarity score and a
//! two-component PCA for parameter trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PCA_TOLERANCE: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 500;

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("accuracy", "no predictions"));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape("accuracy", format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(())
}

/// Fraction of samples predicted correctly.
pub fn sample_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `J×J` counts, row = true class, column = predicted class.
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check_lengths(preds, labels)?;
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::invalid("confusion", format!("class index {} out of range", p.max(y))));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Mean per-class recall over the classes present in `labels`.
pub fn class_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    let m = confusion(preds, labels, classes)?;
    let recalls: Vec<f64> = m
        .iter()
        .enumerate()
        .filter_map(|(j, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[j] as f64 / n as f64)
        })
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Min-max normalised inverse class frequency; classes with no samples are
/// treated as the rarest.
pub fn inverse_frequency(counts: &[usize]) -> Vec<f64> {
    let inv: Vec<f64> = counts.iter().map(|&n| if n == 0 { f64::INFINITY } else { 1.0 / n as f64 }).collect();
    let finite_max = inv.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let inv: Vec<f64> = inv.iter().map(|&v| if v.is_finite() { v } else { finite_max }).collect();
    crate::cro::normalize_cr(&inv)
}

/// Cosine similarity between `cr_tilde` and the normalised inverse class
/// frequency of `dis_g`; 0 when either vector is all zero.
pub fn ratio_similarity(cr_tilde: &[f64], dis_g: &[usize]) -> f64 {
    let target = inverse_frequency(dis_g);
    let dot: f64 = cr_tilde.iter().zip(&target).map(|(a, b)| a * b).sum();
    let na = cr_tilde.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Leading eigenvector of XᵀX via power iteration on the rows of `x`.
fn leading_direction(x: &[Vec<f64>], dim: usize) -> Option<Vec<f64>> {
    let apply = |v: &[f64]| {
        let mut out = vec![0.0; dim];
        for row in x {
            let s = dot(row, v);
            for (o, r) in out.iter_mut().zip(row) {
                *o += s * r;
            }
        }
        out
    };
    // Start from the largest row so the iteration begins inside the span.
    let start = x.iter().max_by(|a, b| dot(a, a).total_cmp(&dot(b, b)))?;
    let norm = dot(start, start).sqrt();
    if !(norm > 0.0) {
        return None;
    }
    let mut v: Vec<f64> = start.iter().map(|s| s / norm).collect();
    for _ in 0..PCA_MAX_ITERS {
        let w = apply(&v);
        let n = dot(&w, &w).sqrt();
        if !(n > 0.0) {
            return None;
        }
        let next: Vec<f64> = w.iter().map(|x| x / n).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < PCA_TOLERANCE {
            break;
        }
    }
    let first = v.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
    if first < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Some(v)
}

/// Projects mean-centred snapshots onto their top two principal components.
/// Components are sign-fixed so their first non-negligible loading is
/// positive; a missing second component yields zeros.
pub fn pca_trajectory(snapshots: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if snapshots.len() < 3 {
        return Err(Error::invalid("pca_trajectory", "need at least 3 snapshots"));
    }
    let dim = snapshots[0].len();
    if snapshots.iter().any(|s| s.len() != dim) {
        return Err(Error::shape("pca_trajectory", "snapshots differ in length"));
    }
    let n = snapshots.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|i| snapshots.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let centred: Vec<Vec<f64>> =
        snapshots.iter().map(|s| s.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let scale = centred.iter().map(|r| dot(r, r)).fold(0.0, f64::max).sqrt();
    let negligible = |rows: &[Vec<f64>]| rows.iter().all(|r| dot(r, r).sqrt() <= 1e-9 * scale.max(f64::MIN_POSITIVE));

    let mut out = vec![[0.0; 2]; snapshots.len()];
    if scale == 0.0 {
        return Ok(out);
    }
    let mut residual = centred.clone();
    #[allow(clippy::needless_range_loop)]
    for comp in 0..2 {
        if negligible(&residual) {
            break;
        }
        let Some(v) = leading_direction(&residual, dim) else { break };
        for (i, row) in centred.iter().enumerate() {
            out[i][comp] = dot(row, &v);
        }
        for row in residual.iter_mut() {
            let s = dot(row, &v);
            for (r, d) in row.iter_mut().zip(&v) {
                *r -= s * d;
            }
        }
    }
    Ok(out)
}

/// Per-round evaluation snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub eps_plus: f64,
    pub eps_minus: f64,
    pub tau: f64,
    pub cloud_c_acc: f64,
    pub cloud_s_acc: f64,
    /// `None` for a client with an empty test split.
    pub client_c_acc: Vec<Option<f64>>,
    pub client_s_acc: Vec<Option<f64>>,
    pub d_cka: Vec<f64>,
    pub cr_tilde: Vec<f64>,
    pub ratio_cosine: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<[f64; 2]>,
}

impl RoundRecord {
    pub fn mean_client_c_acc(&self) -> f64 {
        mean_present(&self.client_c_acc)
    }

    pub fn mean_client_s_acc(&self) -> f64 {
        mean_present(&self.client_s_acc)
    }
}

/// Mean of the present values; 0 if there are none.
pub fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}
