//! The meta encoder / decoder: an `m`-layer MLP over subvectors.
//!
//! Layer `l` maps `x` to `Linear(act(norm(x)))`, and adds `x` back when the
//! residual schedule selects it. Widths run `d -> h -> ... -> h -> d`. A
//! residual across a width change adds the overlapping leading columns
//! (zero padding on the way up, truncation on the way down), so residual links
//! never add parameters.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::gelu::{gelu, gelu_derivative};
use super::norm::{norm_backward, norm_forward, NormCache, NormKind};
use super::{NetError, Parameters, RowBatch};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidualSchedule {
    None,
    /// Every layer except the first (encoder default).
    SkipFirst,
    /// Every layer except the last (decoder default).
    SkipLast,
    All,
}

impl ResidualSchedule {
    pub fn applies(self, layer: usize, layers: usize) -> bool {
        match self {
            ResidualSchedule::None => false,
            ResidualSchedule::SkipFirst => layer != 0,
            ResidualSchedule::SkipLast => layer + 1 != layers,
            ResidualSchedule::All => true,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            ResidualSchedule::None => 0,
            ResidualSchedule::SkipFirst => 1,
            ResidualSchedule::SkipLast => 2,
            ResidualSchedule::All => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => ResidualSchedule::None,
            1 => ResidualSchedule::SkipFirst,
            2 => ResidualSchedule::SkipLast,
            3 => ResidualSchedule::All,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Gelu,
    /// Pass-through; only meant for diagnostic fixtures.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_derivative(x),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MetaNetConfig {
    /// Number of layers `m`.
    pub layers: usize,
    /// Input and output width `d`.
    pub width: usize,
    /// Hidden width `h`.
    pub hidden: usize,
    pub use_bias: bool,
    pub residual: ResidualSchedule,
    pub norm: NormKind,
    pub activation: Activation,
}

impl MetaNetConfig {
    /// `round(2.5 * d)`; gives `h = 20` at `d = 8`, the only width for which a
    /// 3-layer net with biases has 768 linear parameters.
    pub fn default_hidden(width: usize) -> usize {
        ((width as f64) * 2.5).round().max(1.0) as usize
    }

    pub fn encoder(width: usize) -> Self {
        MetaNetConfig {
            layers: 3,
            width,
            hidden: Self::default_hidden(width),
            use_bias: true,
            residual: ResidualSchedule::SkipFirst,
            norm: NormKind::Reshaped,
            activation: Activation::Gelu,
        }
    }

    pub fn decoder(width: usize) -> Self {
        MetaNetConfig { residual: ResidualSchedule::SkipLast, ..Self::encoder(width) }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layers == 0 || self.width == 0 || self.hidden == 0 {
            return Err(NetError::Config(format!(
                "m = {}, d = {}, h = {} must all be positive",
                self.layers, self.width, self.hidden
            )));
        }
        Ok(())
    }

    /// `(in, out)` widths of each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let din = if l == 0 { self.width } else { self.hidden };
                let dout = if l + 1 == self.layers { self.width } else { self.hidden };
                (din, dout)
            })
            .collect()
    }

    pub fn linear_param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + if self.use_bias { o } else { 0 })
            .sum()
    }

    /// Gain and bias per normalization site.
    pub fn norm_param_count(&self) -> usize {
        match self.norm {
            NormKind::Disabled => 0,
            _ => self.layer_dims().iter().map(|&(i, _)| 2 * i).sum(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.linear_param_count() + self.norm_param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in x out`
    pub weight: Matrix,
    /// Empty when the net has no biases.
    pub bias: Vec<f64>,
    /// Empty when normalization is disabled.
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    pub residual: bool,
}

impl DenseLayer {
    fn in_width(&self) -> usize {
        self.weight.rows()
    }

    fn out_width(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone)]
pub struct MetaNet {
    config: MetaNetConfig,
    layers: Vec<DenseLayer>,
    version: u64,
}

impl PartialEq for MetaNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers
    }
}

struct LayerCache {
    norm: Option<NormCache>,
    pre_act: Matrix,
    act: Matrix,
}

/// Activations recorded by [`MetaNet::forward`] for the matching backward call.
pub struct ForwardCache {
    version: u64,
    rows: usize,
    layers: Vec<LayerCache>,
}

impl MetaNet {
    /// All-zero parameters with unit normalization gain.
    pub fn zeros(config: MetaNetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (din, dout))| {
                let (gain, nb) = match config.norm {
                    NormKind::Disabled => (Vec::new(), Vec::new()),
                    _ => (vec![1.0; din], vec![0.0; din]),
                };
                DenseLayer {
                    weight: Matrix::zeros(din, dout),
                    bias: if config.use_bias { vec![0.0; dout] } else { Vec::new() },
                    norm_gain: gain,
                    norm_bias: nb,
                    residual: config.residual.applies(l, config.layers),
                }
            })
            .collect();
        Ok(MetaNet { config, layers, version: 0 })
    }

    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` weights and biases, unit gain, zero norm bias.
    pub fn init<R: Rng + ?Sized>(config: MetaNetConfig, rng: &mut R) -> Result<Self, NetError> {
        let mut net = Self::zeros(config)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.in_width() as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("finite bound");
            for w in layer.weight.as_mut_slice() {
                *w = dist.sample(rng);
            }
            for b in &mut layer.bias {
                *b = dist.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &MetaNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, p| ok &= p.iter().all(|v| v.is_finite()));
        ok
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        self.visit_mut(&mut |_, p| {
            for v in p {
                *v = *v as f32 as f64;
            }
        });
    }

    fn check_input(&self, batch: &RowBatch) -> Result<(), NetError> {
        if batch.width() != self.config.width {
            return Err(NetError::Shape(format!("batch width {} != net width {}", batch.width(), self.config.width)));
        }
        Ok(())
    }

    fn layer_forward(&self, layer: &DenseLayer, x: &Matrix, group: usize) -> (Matrix, Option<NormCache>, Matrix, Matrix) {
        let (normed, norm_cache) = match self.config.norm.group_size(group) {
            Some(g) => {
                let (y, c) = norm_forward(x, g, &layer.norm_gain, &layer.norm_bias);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let mut act = normed.clone();
        for v in act.as_mut_slice() {
            *v = self.config.activation.apply(*v);
        }
        let mut y = act.matmul(&layer.weight);
        if !layer.bias.is_empty() {
            let cols = y.cols();
            for row in y.as_mut_slice().chunks_exact_mut(cols) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
        }
        if layer.residual {
            let overlap = layer.in_width().min(layer.out_width());
            for r in 0..y.rows() {
                let xr = &x.row(r)[..overlap];
                for (v, xv) in y.row_mut(r)[..overlap].iter_mut().zip(xr) {
                    *v += xv;
                }
            }
        }
        (y, norm_cache, normed, act)
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, batch: &RowBatch) -> Result<RowBatch, NetError> {
        self.check_input(batch)?;
        let mut x = batch.values.clone();
        for layer in &self.layers {
            x = self.layer_forward(layer, &x, batch.group).0;
        }
        Ok(RowBatch { values: x, group: batch.group })
    }

    pub fn forward(&self, batch: &RowBatch) -> Result<(RowBatch, ForwardCache), NetError> {
        self.check_input(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.values.clone();
        for layer in &self.layers {
            let (y, norm, pre_act, act) = self.layer_forward(layer, &x, batch.group);
            caches.push(LayerCache { norm, pre_act, act });
            x = y;
        }
        let cache = ForwardCache { version: self.version, rows: batch.len(), layers: caches };
        Ok((RowBatch { values: x, group: batch.group }, cache))
    }

    /// Reverse pass. Returns parameter gradients (as a net of the same shape)
    /// and the gradient with respect to the input batch.
    pub fn backward(&self, upstream: &Matrix, cache: &ForwardCache) -> Result<(MetaNet, Matrix), NetError> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(NetError::StaleCache);
        }
        if upstream.shape() != (cache.rows, self.config.width) {
            return Err(NetError::Shape(format!(
                "upstream {:?} for output ({}, {})",
                upstream.shape(),
                cache.rows,
                self.config.width
            )));
        }
        let mut grads = MetaNet::zeros(self.config)?;
        grads.visit_mut(&mut |_, p| p.fill(0.0));
        let mut dy = upstream.clone();
        for (l, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let g = &mut grads.layers[l];
            g.weight = lc.act.transposed_matmul(&dy);
            if !g.bias.is_empty() {
                for row in dy.iter_rows() {
                    for (b, v) in g.bias.iter_mut().zip(row) {
                        *b += v;
                    }
                }
            }
            let mut dn = dy.matmul_transposed(&layer.weight);
            for (v, &p) in dn.as_mut_slice().iter_mut().zip(lc.pre_act.as_slice()) {
                *v *= self.config.activation.derivative(p);
            }
            let mut dx = match &lc.norm {
                Some(nc) => norm_backward(&dn, nc, &layer.norm_gain, &mut g.norm_gain, &mut g.norm_bias),
                None => dn,
            };
            if layer.residual {
                let overlap = layer.in_width().min(layer.out_width());
                for r in 0..dx.rows() {
                    let dyr = &dy.row(r)[..overlap];
                    for (v, d) in dx.row_mut(r)[..overlap].iter_mut().zip(dyr) {
                        *v += d;
                    }
                }
            }
            dy = dx;
        }
        Ok((grads, dy))
    }
}

impl Parameters for MetaNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (l, layer) in self.layers.iter().enumerate() {
            f(&format!("layer{l}.weight"), layer.weight.as_slice());
            f(&format!("layer{l}.bias"), &layer.bias);
            f(&format!("layer{l}.norm_gain"), &layer.norm_gain);
            f(&format!("layer{l}.norm_bias"), &layer.norm_bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.version += 1;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{l}.weight"), layer.weight.as_mut_slice());
            f(&format!("layer{l}.bias"), &mut layer.bias);
            f(&format!("layer{l}.norm_gain"), &mut layer.norm_gain);
            f(&format!("layer{l}.norm_bias"), &mut layer.norm_bias);
        }
    }
}
