//! Latent codebook: initialization, nearest-codeword assignment, the
//! straight-through gradient route and the latent quantization loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use thiserror::Error;

use crate::format::fp16;
use crate::matrix::Matrix;
use crate::nn::Parameters;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodebookError {
    #[error("codebook needs at least one codeword of positive width (K = {k}, d = {d})")]
    Empty { k: usize, d: usize },
    #[error("no latent vectors to assign")]
    NoVectors,
    #[error("latent width {latent} does not match codeword width {codeword}")]
    Width { latent: usize, codeword: usize },
}

/// How codewords are drawn at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodebookInit {
    /// Per-dimension normal matching the latents' mean and standard deviation.
    LatentNormal,
    /// `U(-1/K, 1/K)`, ignoring the latents.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K x d`
    pub codewords: Matrix,
    pub seed: u64,
}

impl Codebook {
    pub fn new(codewords: Matrix, seed: u64) -> Result<Self, CodebookError> {
        if codewords.rows() == 0 || codewords.cols() == 0 {
            return Err(CodebookError::Empty { k: codewords.rows(), d: codewords.cols() });
        }
        Ok(Codebook { codewords, seed })
    }

    pub fn k(&self) -> usize {
        self.codewords.rows()
    }

    pub fn width(&self) -> usize {
        self.codewords.cols()
    }

    pub fn all_finite(&self) -> bool {
        self.codewords.all_finite()
    }

    /// Rounds every entry through IEEE binary16, the storage precision.
    pub fn round_to_f16(&mut self) {
        for v in self.codewords.as_mut_slice() {
            *v = fp16::decode(fp16::encode(*v as f32)) as f64;
        }
    }

    /// Rows `C[I[i]]`.
    pub fn gather(&self, indices: &[u32]) -> Matrix {
        let d = self.width();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.codewords.row(i as usize));
        }
        Matrix::from_vec(indices.len(), d, data)
    }

    pub fn init(k: usize, d: usize, seed: u64, init: CodebookInit, latents: Option<&Matrix>) -> Result<Self, CodebookError> {
        match init {
            CodebookInit::LatentNormal => init_codebook(k, d, seed, latents),
            CodebookInit::Uniform => {
                if k == 0 || d == 0 {
                    return Err(CodebookError::Empty { k, d });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bound = 1.0 / k as f64;
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let data = (0..k * d).map(|_| dist.sample(&mut rng)).collect();
                Codebook::new(Matrix::from_vec(k, d, data), seed)
            }
        }
    }
}

impl Parameters for Codebook {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("codebook", self.codewords.as_slice());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("codebook", self.codewords.as_mut_slice());
    }
}

/// Per-dimension `(mean, std)` of `latents`; standard normal where unavailable.
pub fn latent_statistics(d: usize, latents: Option<&Matrix>) -> Vec<(f64, f64)> {
    let Some(z) = latents.filter(|z| z.rows() > 0 && z.cols() == d) else {
        return vec![(0.0, 1.0); d];
    };
    let n = z.rows() as f64;
    (0..d)
        .map(|j| {
            let mean = z.iter_rows().map(|r| r[j]).sum::<f64>() / n;
            let var = z.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if mean.is_finite() && std.is_finite() {
                (mean, std)
            } else {
                (0.0, 1.0)
            }
        })
        .collect()
}

/// `K` codewords drawn i.i.d. per dimension from `Normal(mean_j, std_j)` of
/// the current latent vectors (standard normal without latents).
pub fn init_codebook(k: usize, d: usize, seed: u64, latents: Option<&Matrix>) -> Result<Codebook, CodebookError> {
    if k == 0 || d == 0 {
        return Err(CodebookError::Empty { k, d });
    }
    let dists: Vec<Normal<f64>> = latent_statistics(d, latents)
        .into_iter()
        .map(|(m, s)| Normal::new(m, s).expect("finite, non-negative std"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        for dist in &dists {
            data.push(dist.sample(&mut rng));
        }
    }
    Codebook::new(Matrix::from_vec(k, d, data), seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `Z'`: row `i` is `C[I[i]]`.
    pub quantized: Matrix,
    pub indices: Vec<u32>,
    /// Squared distance from each latent vector to its codeword.
    pub distances: Vec<f64>,
}

impl Assignment {
    pub fn usage_counts(&self, k: usize) -> Vec<usize> {
        usage_counts(&self.indices, k)
    }
}

pub fn usage_counts(indices: &[u32], k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i as usize] += 1;
    }
    counts
}

/// Lowest-index codeword minimizing the squared distance to `z`.
///
/// Partial sums are abandoned once they reach the best full distance; since
/// only a strictly smaller distance replaces the incumbent this is exact.
#[inline]
pub fn nearest(z: &[f64], codewords: &Matrix) -> (u32, f64) {
    let mut best = 0u32;
    let mut best_dist = f64::INFINITY;
    'outer: for (j, c) in codewords.iter_rows().enumerate() {
        let mut dist = 0.0;
        for (a, b) in z.iter().zip(c) {
            let t = a - b;
            dist += t * t;
            if dist >= best_dist {
                continue 'outer;
            }
        }
        best = j as u32;
        best_dist = dist;
    }
    (best, best_dist)
}

const ASSIGN_CHUNK: usize = 256;
/// Below this size the direct scan is as fast as the two-pass search.
const DIRECT_SCAN_MAX_K: usize = 32;

/// Codebook laid out for the screening pass: one contiguous run of `K`
/// values per dimension, plus squared norms.
struct ScreenIndex {
    columns: Vec<f64>,
    norms: Vec<f64>,
    max_norm: f64,
}

impl ScreenIndex {
    fn new(c: &Matrix) -> Self {
        let (k, d) = c.shape();
        let mut columns = vec![0.0; k * d];
        let mut norms = vec![0.0; k];
        for (j, row) in c.iter_rows().enumerate() {
            for (t, v) in row.iter().enumerate() {
                columns[t * k + j] = *v;
            }
            norms[j] = row.iter().map(|v| v * v).sum();
        }
        let max_norm = norms.iter().cloned().fold(0.0, f64::max).sqrt();
        ScreenIndex { columns, norms, max_norm }
    }

    /// Same result as [`nearest`]. Scores `|c|^2 - 2 z.c` for every codeword,
    /// then rescans with exact distances every codeword whose score is within
    /// the rounding error bound of the best.
    fn nearest(&self, z: &[f64], codewords: &Matrix, scores: &mut [f64]) -> (u32, f64) {
        let k = self.norms.len();
        scores.copy_from_slice(&self.norms);
        for (t, &zt) in z.iter().enumerate() {
            let col = &self.columns[t * k..(t + 1) * k];
            let m = -2.0 * zt;
            for (s, c) in scores.iter_mut().zip(col) {
                *s += m * c;
            }
        }
        let best_score = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = zn + self.max_norm;
        let tol = 4.0 * (z.len() + 4) as f64 * f64::EPSILON * scale * scale;
        let mut best = 0u32;
        let mut best_dist = f64::INFINITY;
        for (j, &s) in scores.iter().enumerate() {
            if s <= best_score + tol {
                let dist: f64 = z.iter().zip(codewords.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_dist {
                    best = j as u32;
                    best_dist = dist;
                }
            }
        }
        (best, best_dist)
    }
}

/// Nearest-codeword assignment of every row of `z`. Rows are independent, so
/// the result does not depend on how the rows are partitioned across threads.
pub fn assign_nearest(z: &Matrix, codebook: &Codebook) -> Result<Assignment, CodebookError> {
    if z.rows() == 0 {
        return Err(CodebookError::NoVectors);
    }
    if z.cols() != codebook.width() {
        return Err(CodebookError::Width { latent: z.cols(), codeword: codebook.width() });
    }
    let d = z.cols();
    let k = codebook.k();
    let screen = (k > DIRECT_SCAN_MAX_K && z.all_finite() && codebook.all_finite())
        .then(|| ScreenIndex::new(&codebook.codewords));
    let mut pairs = vec![(0u32, 0.0f64); z.rows()];
    pairs
        .par_chunks_mut(ASSIGN_CHUNK)
        .zip(z.as_slice().par_chunks(ASSIGN_CHUNK * d))
        .for_each(|(out, rows)| match &screen {
            Some(index) => {
                let mut scores = vec![0.0; k];
                for (o, row) in out.iter_mut().zip(rows.chunks_exact(d)) {
                    *o = index.nearest(row, &codebook.codewords, &mut scores);
                }
            }
            None => {
                for (o, row) in out.iter_mut().zip(rows.chunks_exact(d)) {
                    *o = nearest(row, &codebook.codewords);
                }
            }
        });
    let (indices, distances): (Vec<u32>, Vec<f64>) = pairs.into_iter().unzip();
    let quantized = codebook.gather(&indices);
    Ok(Assignment { quantized, indices, distances })
}

/// Straight-through estimator: the gradient reaching the quantized latents is
/// handed to the encoder output unchanged.
pub fn ste_route(upstream: &Matrix) -> Matrix {
    upstream.clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqLoss {
    /// `sum_i ||Z_i - Z'_i||^2`
    pub value: f64,
    /// `2 (Z - Z')`
    pub grad_latent: Matrix,
    /// `2 (Z' - Z)`
    pub grad_quantized: Matrix,
}

pub fn vq_loss(z: &Matrix, zq: &Matrix) -> VqLoss {
    assert_eq!(z.shape(), zq.shape(), "vq_loss shape mismatch");
    let mut value = 0.0;
    let mut gz = Matrix::zeros(z.rows(), z.cols());
    for ((g, a), b) in gz.as_mut_slice().iter_mut().zip(z.as_slice()).zip(zq.as_slice()) {
        let t = a - b;
        value += t * t;
        *g = 2.0 * t;
    }
    let mut gq = gz.clone();
    for v in gq.as_mut_slice() {
        *v = -*v;
    }
    VqLoss { value, grad_latent: gz, grad_quantized: gq }
}

/// Sums per-vector gradients on `Z'` into the codewords they were copied from.
pub fn scatter_to_codewords(grad_quantized: &Matrix, indices: &[u32], k: usize) -> Matrix {
    let mut out = Matrix::zeros(k, grad_quantized.cols());
    for (row, &i) in grad_quantized.iter_rows().zip(indices) {
        for (o, g) in out.row_mut(i as usize).iter_mut().zip(row) {
            *o += g;
        }
    }
    out
}

/// Re-seeds every unused codeword with a randomly drawn latent vector.
/// Returns how many codewords were replaced.
pub fn refresh_dead_codewords<R: Rng + ?Sized>(
    codebook: &mut Codebook,
    usage: &[usize],
    latents: &Matrix,
    rng: &mut R,
) -> usize {
    if latents.rows() == 0 {
        return 0;
    }
    let mut refreshed = 0;
    for (j, &count) in usage.iter().enumerate() {
        if count == 0 {
            let pick = rng.random_range(0..latents.rows());
            codebook.codewords.row_mut(j).copy_from_slice(latents.row(pick));
            refreshed += 1;
        }
    }
    refreshed
}

/// Moves each used codeword to the centroid of the latents assigned to it.
pub fn lloyd_recenter(codebook: &mut Codebook, latents: &Matrix, indices: &[u32]) {
    let k = codebook.k();
    let mut sums = Matrix::zeros(k, codebook.width());
    let counts = usage_counts(indices, k);
    for (row, &i) in latents.iter_rows().zip(indices) {
        for (s, v) in sums.row_mut(i as usize).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (j, &count) in counts.iter().enumerate().take(k) {
        if count > 0 {
            let n = count as f64;
            for (c, s) in codebook.codewords.row_mut(j).iter_mut().zip(sums.row(j)) {
                *c = s / n;
            }
        }
    }
}
