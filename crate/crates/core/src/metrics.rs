//! Reconstruction and quantization diagnostics, plus the delimited-text
//! exports used for histograms and reconstruction plots.
//!
//! Every reduction sorts its terms first, so results are identical under any
//! permutation of the subvectors.

use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::tensor_store::Role;

pub const EXPORT_HEADER: &str = "# pocketllm-export v1";

/// Number of largest per-subvector errors summed into `mse_top100`.
pub const TOP_K: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("window rows {rows:?} cols {cols:?} outside a {shape:?} matrix")]
    Window { rows: Range<usize>, cols: Range<usize>, shape: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerMetrics {
    pub n: usize,
    /// `sum_i ||Z_i - Z'_i||^2`
    pub vq_sum: f64,
    pub vq_mean: f64,
    /// Mean over subvectors of `||S_i - S^_i||^2`.
    pub mse_mean: f64,
    /// Sum of the 100 largest per-subvector errors (all of them when `N < 100`).
    pub mse_top100: f64,
    /// `||W - W^||_F / ||W||_F`
    pub frobenius_rel_err: f64,
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

impl LayerMetrics {
    /// Builds metrics from per-subvector reconstruction errors, per-vector
    /// latent distances and the squared norm of the original weights.
    pub fn from_terms(mut recon_errors: Vec<f64>, mut vq_distances: Vec<f64>, weight_sq_norm: f64) -> Self {
        let n = recon_errors.len();
        let total_err = sorted_sum(&mut recon_errors);
        let top: f64 = recon_errors[n.saturating_sub(TOP_K)..].iter().sum();
        let vq_sum = sorted_sum(&mut vq_distances);
        let denom = |x: f64, by: usize| if by == 0 { 0.0 } else { x / by as f64 };
        let frobenius_rel_err = if weight_sq_norm > 0.0 {
            (total_err / weight_sq_norm).sqrt()
        } else if total_err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        LayerMetrics {
            n,
            vq_sum,
            vq_mean: denom(vq_sum, vq_distances.len()),
            mse_mean: denom(total_err, n),
            mse_top100: top,
            frobenius_rel_err,
        }
    }
}

/// `||a_i - b_i||^2` for every row pair.
pub fn row_sq_errors(a: &Matrix, b: &Matrix) -> Vec<f64> {
    a.iter_rows()
        .zip(b.iter_rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
        .collect()
}

/// Squared norm of `m`, summed in sorted order.
pub fn sorted_sq_norm(m: &Matrix) -> f64 {
    let mut rows: Vec<f64> = m.iter_rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    sorted_sum(&mut rows)
}

pub fn layer_metrics(s: &Matrix, s_hat: &Matrix, z: &Matrix, z_q: &Matrix) -> Result<LayerMetrics, MetricsError> {
    if s.shape() != s_hat.shape() || z.shape() != z_q.shape() || s.rows() != z.rows() {
        return Err(MetricsError::Shape(format!(
            "S {:?}, S^ {:?}, Z {:?}, Z' {:?}",
            s.shape(),
            s_hat.shape(),
            z.shape(),
            z_q.shape()
        )));
    }
    Ok(LayerMetrics::from_terms(row_sq_errors(s, s_hat), row_sq_errors(z, z_q), sorted_sq_norm(s)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// Retained value range after trimming.
    pub lo: f64,
    pub hi: f64,
    /// `(bin_center, count)`
    pub bins: Vec<(f64, usize)>,
    pub kept: usize,
    pub total: usize,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{EXPORT_HEADER}\nbin_center,count\n");
        for (c, n) in &self.bins {
            let _ = writeln!(out, "{c:e},{n}");
        }
        out
    }
}

/// Fixed-width histogram of the central `coverage` fraction of `values`
/// (trimming `(1 - coverage) / 2` from each tail).
pub fn weight_histogram(values: &[f64], coverage: f64, bins: usize) -> Result<Histogram, MetricsError> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(MetricsError::Argument(format!("coverage {coverage} not in (0, 1]")));
    }
    if bins == 0 {
        return Err(MetricsError::Argument("zero bins".into()));
    }
    if values.is_empty() {
        return Err(MetricsError::Argument("no values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    let cut = (((1.0 - coverage) / 2.0) * n as f64).floor() as usize;
    let cut = cut.min((n - 1) / 2);
    let kept = &sorted[cut..n - cut];
    let (lo, hi) = (kept[0], kept[kept.len() - 1]);
    if hi == lo {
        return Ok(Histogram { lo, hi, bins: vec![(lo, kept.len())], kept: kept.len(), total: n });
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in kept {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let bins = counts.into_iter().enumerate().map(|(i, c)| (lo + (i as f64 + 0.5) * width, c)).collect();
    Ok(Histogram { lo, hi, bins, kept: kept.len(), total: n })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconPoint {
    pub row: usize,
    pub col: usize,
    pub original: f64,
    pub reconstructed: f64,
}

/// Number of length-`d` subvectors shown per layer role in the default window.
pub fn default_window_vectors(role: Role) -> usize {
    match role {
        Role::Gate | Role::Up | Role::Down => 8,
        _ => 16,
    }
}

/// First row, first `count * d` columns (clipped to the matrix).
pub fn default_window(role: Role, d: usize, shape: (usize, usize)) -> (Range<usize>, Range<usize>) {
    let cols = (default_window_vectors(role) * d).min(shape.1);
    (0..1.min(shape.0), 0..cols)
}

/// Paired original/reconstructed values over a window. With no window the
/// default one for `role` at subvector length `d` is used.
pub fn export_reconstruction(
    w: &Matrix,
    w_hat: &Matrix,
    role: Role,
    d: usize,
    window: Option<(Range<usize>, Range<usize>)>,
) -> Result<Vec<ReconPoint>, MetricsError> {
    if w.shape() != w_hat.shape() {
        return Err(MetricsError::Shape(format!("{:?} vs {:?}", w.shape(), w_hat.shape())));
    }
    let (rows, cols) = window.unwrap_or_else(|| default_window(role, d, w.shape()));
    if rows.start > rows.end || cols.start > cols.end || rows.end > w.rows() || cols.end > w.cols() {
        return Err(MetricsError::Window { rows, cols, shape: w.shape() });
    }
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        for c in cols.clone() {
            out.push(ReconPoint { row: r, col: c, original: w[(r, c)], reconstructed: w_hat[(r, c)] });
        }
    }
    Ok(out)
}

pub fn reconstruction_csv(points: &[ReconPoint]) -> String {
    let mut out = format!("{EXPORT_HEADER}\nrow,col,original,reconstructed\n");
    for p in points {
        let _ = writeln!(out, "{},{},{:e},{:e}", p.row, p.col, p.original, p.reconstructed);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let s = random(10, 4, 1);
        let z = random(10, 4, 2);
        let m = layer_metrics(&s, &s, &z, &z).unwrap();
        assert_eq!((m.vq_sum, m.mse_mean, m.mse_top100, m.frobenius_rel_err), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn small_sets_take_every_error() {
        let s = Matrix::zeros(3, 1);
        let s_hat = Matrix::from_rows(&[[1.0], [2.0], [3.0]]);
        let z = Matrix::zeros(3, 1);
        let m = layer_metrics(&s, &s_hat, &z, &z).unwrap();
        assert_eq!(m.mse_top100, 14.0);
        assert_eq!(m.mse_mean, 14.0 / 3.0);
    }

    #[test]
    fn top100_matches_full_sort() {
        let s = random(500, 4, 3);
        let s_hat = random(500, 4, 4);
        let z = random(500, 2, 5);
        let m = layer_metrics(&s, &s_hat, &z, &z).unwrap();
        let mut errs: Vec<f64> = (0..500)
            .map(|i| (0..4).map(|j| (s[(i, j)] - s_hat[(i, j)]).powi(2)).sum())
            .collect();
        errs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let oracle: f64 = errs[..100].iter().sum();
        assert!((m.mse_top100 - oracle).abs() < 1e-12 * oracle);
        assert!(m.mse_top100 >= 100.0 * errs[99]);
        assert!(m.mse_top100 <= 500.0 * errs[0]);
    }

    #[test]
    fn permutation_invariant() {
        let s = random(300, 4, 6);
        let s_hat = random(300, 4, 7);
        let z = random(300, 3, 8);
        let zq = random(300, 3, 9);
        let a = layer_metrics(&s, &s_hat, &z, &zq).unwrap();
        let perm: Vec<usize> = (0..300).rev().collect();
        let b = layer_metrics(&s.gather_rows(&perm), &s_hat.gather_rows(&perm), &z.gather_rows(&perm), &zq.gather_rows(&perm))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top100_is_monotone_under_a_larger_error() {
        let s = random(150, 2, 10);
        let s_hat = random(150, 2, 11);
        let z = Matrix::zeros(150, 1);
        let a = layer_metrics(&s, &s_hat, &z, &z).unwrap();
        let mut s2 = s.as_slice().to_vec();
        s2.extend_from_slice(&[100.0, 100.0]);
        let mut h2 = s_hat.as_slice().to_vec();
        h2.extend_from_slice(&[0.0, 0.0]);
        let z2 = Matrix::zeros(151, 1);
        let b = layer_metrics(&Matrix::from_vec(151, 2, s2), &Matrix::from_vec(151, 2, h2), &z2, &z2).unwrap();
        assert!(b.mse_top100 >= a.mse_top100);
    }

    #[test]
    fn frobenius_decomposition() {
        let s = random(64, 4, 12);
        let s_hat = random(64, 4, 13);
        let z = Matrix::zeros(64, 1);
        let m = layer_metrics(&s, &s_hat, &z, &z).unwrap();
        let errs: f64 = row_sq_errors(&s, &s_hat).iter().sum();
        let rel = m.frobenius_rel_err.powi(2) - errs / s.sum_squares();
        assert!(rel.abs() < 1e-12);
    }

    #[test]
    fn histogram_cases() {
        let h = weight_histogram(&[0.25; 40], 0.999, 10).unwrap();
        assert_eq!(h.bins.iter().filter(|b| b.1 > 0).count(), 1);

        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let h = weight_histogram(&v, 1.0, 17).unwrap();
        assert_eq!(h.bins.iter().map(|b| b.1).sum::<usize>(), 1000);
        assert_eq!(h.bins.len(), 17);

        let h = weight_histogram(&v, 0.9, 17).unwrap();
        assert!(h.kept < 1000 && h.kept >= 900);

        assert!(weight_histogram(&v, 0.0, 4).is_err());
        assert!(weight_histogram(&v, 1.5, 4).is_err());
        assert!(weight_histogram(&v, 0.5, 0).is_err());
    }

    #[test]
    fn histogram_recovers_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dist = Normal::new(0.0, 0.02).unwrap();
        let n = 200_000;
        let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let h = weight_histogram(&v, 1.0, 400).unwrap();
        let total = h.kept as f64;
        let mean = h.bins.iter().map(|&(c, k)| c * k as f64).sum::<f64>() / total;
        let var = h.bins.iter().map(|&(c, k)| (c - mean).powi(2) * k as f64).sum::<f64>() / total;
        let se_mean = 0.02 / total.sqrt();
        let se_std = 0.02 / (2.0 * total).sqrt();
        // bin-center quantization adds at most width^2/12 to the variance
        let width = (h.hi - h.lo) / 400.0;
        assert!(mean.abs() < 3.0 * se_mean + width / 2.0, "{mean}");
        let std_corrected = (var - width * width / 12.0).sqrt();
        assert!((std_corrected - 0.02).abs() < 3.0 * se_std, "{std_corrected}");
    }

    #[test]
    fn reconstruction_export() {
        let w = random(8, 128, 14);
        let pts = export_reconstruction(&w, &w, Role::Q, 4, None).unwrap();
        assert_eq!(pts.len(), 16 * 4);
        let vectors: std::collections::BTreeSet<(usize, usize)> = pts.iter().map(|p| (p.row, p.col / 4)).collect();
        assert_eq!(vectors.len(), 16);
        assert!(pts.iter().all(|p| p.original == p.reconstructed));
        let up = export_reconstruction(&w, &w, Role::Up, 8, None).unwrap();
        assert_eq!(up.len(), 8 * 8);

        let csv = reconstruction_csv(&pts);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(EXPORT_HEADER));
        let cols = lines.next().unwrap().split(',').count();
        assert_eq!(cols, 2 + 2);
        assert!(lines.all(|l| l.split(',').count() == cols));

        assert!(matches!(export_reconstruction(&w, &w, Role::Q, 4, Some((0..9, 0..4))), Err(MetricsError::Window { .. })));
    }
}
