//! Fixed-architecture differentiable operators used by the meta encoder and
//! decoder: exact GELU, reshaped layer normalization, dense layers with
//! residual links, hand-written reverse mode and Adam.

mod adam;
mod gelu;
mod mlp;
mod norm;

pub use adam::{AdamConfig, AdamState};
pub use gelu::{gelu, gelu_derivative, gelu_in_place};
pub use mlp::{Activation, DenseLayer, ForwardCache, MetaNet, MetaNetConfig, ResidualSchedule};
pub use norm::{norm_backward, norm_forward, normalize_groups, rln_forward, NormCache, NormKind, NORM_EPS};

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward cache does not match the current parameters or input")]
    StaleCache,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid network configuration: {0}")]
    Config(String),
}

/// Activations for `R` weight rows of `L` subvectors each, stored as an
/// `(R*L) x width` matrix. Consecutive runs of `group` rows belong to the same
/// weight row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBatch {
    pub values: Matrix,
    pub group: usize,
}

impl RowBatch {
    pub fn new(values: Matrix, group: usize) -> Result<Self, NetError> {
        if group == 0 || !values.rows().is_multiple_of(group) {
            return Err(NetError::Shape(format!(
                "{} rows cannot be grouped into runs of {group}",
                values.rows()
            )));
        }
        Ok(RowBatch { values, group })
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn num_groups(&self) -> usize {
        self.values.rows() / self.group
    }
}

/// Named, ordered parameter tensors. The visiting order is the canonical
/// serialization order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, p| out.extend_from_slice(p));
        out
    }

    /// Overwrites all parameters from `flat`; fails with the expected length on mismatch.
    fn load_flat(&mut self, flat: &[f64]) -> Result<(), usize> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(expected);
        }
        let mut at = 0;
        self.visit_mut(&mut |_, p| {
            p.copy_from_slice(&flat[at..at + p.len()]);
            at += p.len();
        });
        Ok(())
    }
}
