//! Attention and representation analysis: stable rank of attention matrices,
//! per-episode attention traces, position-embedding cosine similarity, and
//! learning-curve aggregation across runs.

use crate::nn::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("stable rank of an all-zero matrix is undefined")]
    ZeroMatrix,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("no input runs")]
    EmptyInput,
    #[error("runs disagree on the iteration grid at position {0}")]
    GridMismatch(usize),
    #[error("metric key {0:?} missing from a run record")]
    MissingKey(String),
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method. Plenty for
/// the small matrices here (attention over at most a few dozen tokens).
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let tol = 1e-12
        * m.iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q].abs();
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol * 1e-4 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

/// Singular values of a rectangular matrix via the eigenvalues of A^T A.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    // Gram matrix of the smaller side.
    let k = rows.min(cols);
    let mut gram = vec![0.0; k * k];
    if cols <= rows {
        for i in 0..cols {
            for j in 0..cols {
                let mut s = 0.0;
                for r in 0..rows {
                    s += a[r * cols + i] * a[r * cols + j];
                }
                gram[i * cols + j] = s;
            }
        }
    } else {
        for i in 0..rows {
            for j in 0..rows {
                let mut s = 0.0;
                for c in 0..cols {
                    s += a[i * cols + c] * a[j * cols + c];
                }
                gram[i * rows + j] = s;
            }
        }
    }
    let mut vals: Vec<f64> = symmetric_eigenvalues(&gram, k)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
    vals
}

/// Stable rank: squared Frobenius norm over the squared spectral norm,
/// sum(sigma_i^2) / sigma_max^2.
pub fn stable_rank(a: &[f64], rows: usize, cols: usize) -> Result<f64, AnalysisError> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let frob2: f64 = a.iter().map(|v| v * v).sum();
    if frob2 == 0.0 {
        return Err(AnalysisError::ZeroMatrix);
    }
    let svs = singular_values(a, rows, cols);
    let smax2 = svs[0] * svs[0];
    Ok(frob2 / smax2)
}

/// One attention measurement during an episode trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    /// Real-token submatrix, row-major.
    pub attention: Vec<f64>,
    pub tokens: usize,
    pub stable_rank: f64,
}

/// Crop an attention matrix over `n_max` tokens down to the real-token
/// submatrix given the token mask.
pub fn crop_attention(full: &Tensor, mask: &[bool]) -> (Vec<f64>, usize) {
    let n = mask.len();
    assert_eq!(full.data.len(), n * n, "attention must be square over n_max");
    let live: Vec<usize> = (0..n).filter(|t| mask[*t]).collect();
    let m = live.len();
    let mut out = Vec::with_capacity(m * m);
    for &r in &live {
        for &c in &live {
            out.push(full.data[r * n + c]);
        }
    }
    (out, m)
}

/// Cosine similarity between all pairs of position-embedding rows. Zero rows
/// get similarity 0 (and 1 on the diagonal, since they compare to itself).
pub fn pos_embed_cosine(w_pos: &Tensor) -> Vec<f64> {
    assert_eq!(w_pos.shape.len(), 2, "position table must be [n, d]");
    let (n, d) = (w_pos.shape[0], w_pos.shape[1]);
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            w_pos.data[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                out[i * n + j] = 1.0;
            } else if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = (0..d)
                    .map(|k| w_pos.data[i * d + k] * w_pos.data[j * d + k])
                    .sum();
                out[i * n + j] = dot / (norms[i] * norms[j]);
            }
        }
    }
    out
}

/// Per-iteration mean and population standard deviation of one metric across
/// runs. Every run must share the same iteration grid.
pub fn summarize_metrics(
    runs: &[Vec<(u64, f64)>],
) -> Result<Vec<(u64, f64, f64)>, AnalysisError> {
    if runs.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let grid: Vec<u64> = runs[0].iter().map(|(it, _)| *it).collect();
    for run in runs.iter().skip(1) {
        if run.len() != grid.len() {
            return Err(AnalysisError::GridMismatch(run.len().min(grid.len())));
        }
        for (pos, ((it, _), want)) in run.iter().zip(&grid).enumerate() {
            if it != want {
                return Err(AnalysisError::GridMismatch(pos));
            }
        }
    }
    Ok(grid
        .iter()
        .enumerate()
        .map(|(pos, &it)| {
            let xs: Vec<f64> = runs.iter().map(|r| r[pos].1).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
            (it, mean, var.sqrt())
        })
        .collect())
}
