//! Compression ratio and average-bits accounting.
//!
//! All of these count only the quantized payload: codebook, indices and
//! decoder. Names, shapes and other fixed headers are overhead reported
//! separately.

use super::bitpack::index_bits;
use super::FormatError;

/// Size parameters of one compressed layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerBudget {
    /// Number of subvectors.
    pub n: u64,
    /// Subvector length.
    pub d: u64,
    /// Codebook size.
    pub k: u64,
    /// Decoder parameter count.
    pub n_fd: u64,
}

impl LayerBudget {
    pub fn original_bits(&self) -> u128 {
        32 * u128::from(self.n) * u128::from(self.d)
    }

    /// `16 K d + ceil(log2 K) N + 32 N_fd`
    pub fn compressed_bits(&self) -> Result<u128, FormatError> {
        let b = u128::from(index_bits(self.k)?);
        Ok(16 * u128::from(self.k) * u128::from(self.d) + b * u128::from(self.n) + 32 * u128::from(self.n_fd))
    }
}

/// An exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub numerator: u128,
    pub denominator: u128,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

/// Parameter-count ratio `N d / (K d + N + N_fd)`.
pub fn compression_ratio_params(n: u64, d: u64, k: u64, n_fd: u64) -> Ratio {
    Ratio {
        numerator: u128::from(n) * u128::from(d),
        denominator: u128::from(k) * u128::from(d) + u128::from(n) + u128::from(n_fd),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitsRatio {
    pub ratio: Ratio,
    /// Bits per stored index.
    pub index_bits: u32,
    /// False when `K` is not a power of two and the index width was rounded up.
    pub exact_log2: bool,
}

impl BitsRatio {
    pub fn value(&self) -> f64 {
        self.ratio.value()
    }
}

/// Storage ratio against f32 weights:
/// `32 N d / (16 K d + log2(K) N + 32 N_fd)`.
pub fn compression_ratio_bits(n: u64, d: u64, k: u64, n_fd: u64) -> Result<BitsRatio, FormatError> {
    let budget = LayerBudget { n, d, k, n_fd };
    Ok(BitsRatio {
        ratio: Ratio { numerator: budget.original_bits(), denominator: budget.compressed_bits()? },
        index_bits: index_bits(k)?,
        exact_log2: k.is_power_of_two(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvgBits {
    /// All compressed bits over the number of quantized weights.
    pub total: f64,
    /// Index bits alone over the number of quantized weights.
    pub index_only: f64,
}

/// Average bits per quantized weight over a set of layers.
pub fn avg_bits(layers: &[LayerBudget]) -> Result<AvgBits, FormatError> {
    if layers.is_empty() {
        return Err(FormatError::Invalid("avg_bits over an empty layer list".into()));
    }
    let mut weights: u128 = 0;
    let mut bits: u128 = 0;
    let mut index: u128 = 0;
    for l in layers {
        weights += u128::from(l.n) * u128::from(l.d);
        bits += l.compressed_bits()?;
        index += u128::from(index_bits(l.k)?) * u128::from(l.n);
    }
    Ok(AvgBits { total: bits as f64 / weights as f64, index_only: index as f64 / weights as f64 })
}

/// Index bits per weight, `ceil(log2 K) / d`, the limit of [`avg_bits`] as `N` grows.
pub fn index_bits_per_weight(d: u64, k: u64) -> Result<f64, FormatError> {
    Ok(f64::from(index_bits(k)?) / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_ratio_arithmetic() {
        let r = compression_ratio_params(100, 1, 100, 0);
        assert_eq!(r, Ratio { numerator: 100, denominator: 200 });
        assert_eq!(r.value(), 0.5);
        // decoder as large as the original
        assert!(compression_ratio_params(1000, 4, 16, 4000).value() < 1.0);
    }

    #[test]
    fn bits_ratio_limit() {
        // K = 2, d = 1: 32 N / (32 + N) -> 32
        let r = compression_ratio_bits(1_000_000_000, 1, 2, 0).unwrap();
        assert_eq!(r.ratio.denominator, 32 + 1_000_000_000);
        assert!((r.value() - 32.0).abs() < 1e-5);
        assert!(r.exact_log2);
        let odd = compression_ratio_bits(1000, 4, 1000, 0).unwrap();
        assert!(!odd.exact_log2);
        assert_eq!(odd.index_bits, 10);
    }

    #[test]
    fn index_components_of_the_four_configs() {
        assert_eq!(index_bits_per_weight(4, 1 << 15).unwrap(), 3.75);
        assert_eq!(index_bits_per_weight(4, 1 << 12).unwrap(), 3.0);
        assert_eq!(index_bits_per_weight(8, 1 << 15).unwrap(), 1.875);
        assert_eq!(index_bits_per_weight(8, 1 << 12).unwrap(), 1.5);
        let a = avg_bits(&[LayerBudget { n: 1 << 20, d: 4, k: 1 << 15, n_fd: 0 }]).unwrap();
        assert_eq!(a.index_only, 3.75);
        assert!(a.total > a.index_only);
    }

    #[test]
    fn avg_bits_empty_is_an_error() {
        assert!(avg_bits(&[]).is_err());
    }
}
