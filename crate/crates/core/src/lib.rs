//! Weight compression through a learned latent codebook.
//!
//! Each weight matrix is cut into length-`d` subvectors along its rows. A
//! small encoder maps them into a latent space, each latent is replaced by its
//! nearest codeword, and a small decoder maps codewords back. Only the
//! codebook, the per-subvector indices and the decoder are stored.
//!
//! ```no_run
//! use pocketllm::{compress_layer, reconstruct_layer, CompressConfig, Matrix};
//!
//! let w = Matrix::zeros(64, 64);
//! let (layer, report) = compress_layer(&w, &CompressConfig::new(4, 256)).unwrap();
//! let w_hat = reconstruct_layer(&layer).unwrap();
//! println!("{} -> {:?}", report.final_metrics.mse_mean, w_hat.shape());
//! ```

pub mod codebook;
pub mod compressor;
pub mod format;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod tensor_store;

pub use codebook::{Codebook, CodebookInit};
pub use compressor::{
    compress_layer, compress_model, compress_named_layer, compress_unit, reconstruct_layer, CompressConfig,
    CompressError, CompressedLayer, CompressedModel, LayerFilter, LatentScale, LayerMeta, LrSchedule, ModelReport, Scope, TrainReport,
    VqGradient,
};
pub use format::{load_pocket, read_pocket, save_pocket, write_pocket, FormatError};
pub use matrix::Matrix;
pub use metrics::LayerMetrics;
pub use nn::{MetaNet, MetaNetConfig, NormKind};
pub use tensor_store::{load_manifest, merge, split_rows, ModelManifest, Role, SubvectorSet};
