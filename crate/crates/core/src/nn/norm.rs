//! Layer normalization over whole weight rows.
//!
//! A group of `L` consecutive subvectors (one weight row) is treated as a
//! single vector of `L * width` elements for the mean and variance. The affine
//! gain and bias have length `width` and are shared by every slot of the row,
//! so the parameter count is that of plain layer normalization over `width`.

use super::{NetError, RowBatch};
use crate::matrix::Matrix;

pub const NORM_EPS: f64 = 1e-5;

/// Where (and whether) normalization statistics are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// Statistics over the reassembled weight row.
    Reshaped,
    /// Statistics over each subvector on its own (standard layer norm).
    PerVector,
    Disabled,
}

impl NormKind {
    /// Rows per statistics group for a batch grouped in runs of `group`.
    pub fn group_size(self, group: usize) -> Option<usize> {
        match self {
            NormKind::Reshaped => Some(group),
            NormKind::PerVector => Some(1),
            NormKind::Disabled => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    /// Pre-affine normalized values.
    pub xhat: Matrix,
    /// `1 / sqrt(var + eps)` per group.
    pub inv_std: Vec<f64>,
    pub group: usize,
}

/// Zero-mean, unit-variance normalization of each run of `group` rows.
pub fn normalize_groups(x: &Matrix, group: usize) -> NormCache {
    assert!(group > 0 && x.rows().is_multiple_of(group), "rows must split into whole groups");
    let span = group * x.cols();
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows() / group);
    if span > 0 {
        for chunk in xhat.as_mut_slice().chunks_exact_mut(span) {
            let n = span as f64;
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
    }
    NormCache { xhat, inv_std, group }
}

/// Normalizes then applies the per-column affine map.
pub fn norm_forward(x: &Matrix, group: usize, gain: &[f64], bias: &[f64]) -> (Matrix, NormCache) {
    assert_eq!(gain.len(), x.cols());
    assert_eq!(bias.len(), x.cols());
    let cache = normalize_groups(x, group);
    let mut out = cache.xhat.clone();
    let cols = x.cols();
    if cols > 0 {
        for row in out.as_mut_slice().chunks_exact_mut(cols) {
            for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
                *v = *v * g + b;
            }
        }
    }
    (out, cache)
}

/// Reverse pass of [`norm_forward`]. Accumulates into `dgain` and `dbias` and
/// returns the gradient with respect to the input.
pub fn norm_backward(
    dout: &Matrix,
    cache: &NormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let cols = dout.cols();
    let span = cache.group * cols;
    let mut dx = Matrix::zeros(dout.rows(), cols);
    if span == 0 {
        return dx;
    }
    for (r, (drow, xrow)) in dout.iter_rows().zip(cache.xhat.iter_rows()).enumerate() {
        for c in 0..cols {
            dgain[c] += drow[c] * xrow[c];
            dbias[c] += drow[c];
        }
        let dxrow = dx.row_mut(r);
        for c in 0..cols {
            dxrow[c] = drow[c] * gain[c];
        }
    }
    let n = span as f64;
    for ((dchunk, xchunk), &s) in dx
        .as_mut_slice()
        .chunks_exact_mut(span)
        .zip(cache.xhat.as_slice().chunks_exact(span))
        .zip(&cache.inv_std)
    {
        let mean_d = dchunk.iter().sum::<f64>() / n;
        let mean_dx = dchunk.iter().zip(xchunk).map(|(a, b)| a * b).sum::<f64>() / n;
        for (dv, &xv) in dchunk.iter_mut().zip(xchunk) {
            *dv = s * (*dv - mean_d - xv * mean_dx);
        }
    }
    dx
}

/// Reshaped layer normalization of a grouped batch.
pub fn rln_forward(batch: &RowBatch, gain: &[f64], bias: &[f64]) -> Result<RowBatch, NetError> {
    if gain.len() != batch.width() || bias.len() != batch.width() {
        return Err(NetError::Shape(format!(
            "affine length {}/{} for width {}",
            gain.len(),
            bias.len(),
            batch.width()
        )));
    }
    let (values, _) = norm_forward(&batch.values, batch.group, gain, bias);
    Ok(RowBatch { values, group: batch.group })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..3.0)).collect())
    }

    #[test]
    fn single_slot_is_standard_layer_norm() {
        let x = random(5, 8, 1);
        let gain = vec![1.5; 8];
        let bias = vec![0.25; 8];
        let y = rln_forward(&RowBatch::new(x.clone(), 1).unwrap(), &gain, &bias).unwrap();
        for (xr, yr) in x.iter_rows().zip(y.values.iter_rows()) {
            let mean = xr.iter().sum::<f64>() / 8.0;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (a, b) in xr.iter().zip(yr) {
                let want = (a - mean) / (var + NORM_EPS).sqrt() * 1.5 + 0.25;
                assert!((want - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_group_maps_to_zero() {
        let x = Matrix::from_vec(4, 3, vec![5.0; 12]);
        let y = rln_forward(&RowBatch::new(x, 4).unwrap(), &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(y.values.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whole_row_statistics() {
        let x = random(2 * 6, 4, 7);
        let cache = normalize_groups(&x, 6);
        for chunk in cache.xhat.as_slice().chunks_exact(24) {
            let mean = chunk.iter().sum::<f64>() / 24.0;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
            assert!(mean.abs() < 1e-6, "{mean}");
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
        // a single slot alone is not normalized
        let first: &[f64] = cache.xhat.row(0);
        let m0 = first.iter().sum::<f64>() / 4.0;
        assert!(m0.abs() > 1e-3);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = random(6, 3, 11);
        let gain = [0.7, -1.2, 2.0];
        let bias = [0.1, 0.0, -0.3];
        let w = random(6, 3, 12);
        let loss = |x: &Matrix, g: &[f64], b: &[f64]| -> f64 {
            let (y, _) = norm_forward(x, 3, g, b);
            y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = norm_forward(&x, 3, &gain, &bias);
        let mut dg = [0.0; 3];
        let mut db = [0.0; 3];
        let dx = norm_backward(&w, &cache, &gain, &mut dg, &mut db);
        let eps = 1e-5;
        for i in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += eps;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= eps;
            let fd = (loss(&xp, &gain, &bias) - loss(&xm, &gain, &bias)) / (2.0 * eps);
            assert!((fd - dx.as_slice()[i]).abs() < 1e-6 * fd.abs().max(1.0), "x[{i}] {fd} vs {}", dx.as_slice()[i]);
        }
        for c in 0..3 {
            let mut gp = gain;
            gp[c] += eps;
            let mut gm = gain;
            gm[c] -= eps;
            let fd = (loss(&x, &gp, &bias) - loss(&x, &gm, &bias)) / (2.0 * eps);
            assert!((fd - dg[c]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
