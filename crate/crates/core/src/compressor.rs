//! Joint training of encoder, codebook and decoder for one layer (or one
//! block of layers sharing a codebook and decoder), and reconstruction from
//! the stored parts.
//!
//! Each optimizer step runs on whole weight rows:
//!
//! ```text
//! Z  = encoder(S)            Z' = nearest codewords of Z
//! S^ = decoder(Z')           loss = sqrt(c * sum ||S - S^||^2) + lambda * c * sum ||Z - Z'||^2
//! ```
//!
//! where `c = N / batch_N` rescales batch sums to full-set magnitude. The
//! gradient reaching `Z'` is copied to `Z` unchanged (straight-through).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codebook::{
    assign_nearest, lloyd_recenter, refresh_dead_codewords, scatter_to_codewords, ste_route, Codebook, CodebookError,
    CodebookInit,
};
use crate::format::ratio::LayerBudget;
use crate::matrix::Matrix;
use crate::metrics::{row_sq_errors, sorted_sq_norm, LayerMetrics};
use crate::nn::{AdamConfig, AdamState, MetaNet, MetaNetConfig, NetError, NormKind, RowBatch};
use crate::tensor_store::{merge, split_rows, LayerEntry, ModelManifest, Role, StoreError, SubvectorSet};

#[derive(Debug, Error)]
pub enum CompressError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index} at position {position} is outside a codebook of {k}")]
    IndexOutOfRange { position: usize, index: u32, k: usize },
    #[error("training diverged at epoch {epoch} (loss {loss}); best snapshot restored")]
    Diverged { epoch: usize, loss: f64, snapshot: Box<UnitResult> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Scope {
    #[default]
    PerLayer,
    /// One encoder, decoder and codebook per transformer block.
    PerBlock,
}

impl Scope {
    pub fn code(self) -> u8 {
        match self {
            Scope::PerLayer => 0,
            Scope::PerBlock => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Scope::PerLayer),
            1 => Some(Scope::PerBlock),
            _ => None,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::PerLayer => "per_layer",
            Scope::PerBlock => "per_block",
        })
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per_layer" | "per-layer" | "layer" => Ok(Scope::PerLayer),
            "per_block" | "per-block" | "block" => Ok(Scope::PerBlock),
            _ => Err(format!("unknown scope `{s}` (expected per_layer or per_block)")),
        }
    }
}

/// Learning rate over the course of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` at the first epoch down to `lr / 100` at the last.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, lr: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let t = if epochs > 1 { (epoch - 1) as f64 / (epochs - 1) as f64 } else { 0.0 };
                let floor = lr / 100.0;
                floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// How `lambda` is applied to the summed latent loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LatentScale {
    /// `lambda * sum ||Z - Z'||^2` as is.
    Sum,
    /// `lambda / sqrt(N d)`: the same objective, up to a constant factor, as
    /// `sqrt(mean) + lambda * mean`, so the balance does not drift with `N`.
    PerElement,
}

/// How the latent quantization loss is split between encoder and codebook.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VqGradient {
    /// Both sides receive the full gradient of `sum ||Z - Z'||^2`.
    Symmetric,
    /// The codebook gets the full pull; the encoder only `commitment` times it.
    Split { commitment: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressConfig {
    /// Subvector length.
    pub d: usize,
    /// Codebook size.
    pub k: usize,
    pub scope: Scope,
    pub epochs: usize,
    /// Weight rows per optimizer step.
    pub batch_rows: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Weight of the latent quantization loss.
    pub lambda: f64,
    pub latent_scale: LatentScale,
    pub seed: u64,
    /// Layers per meta network.
    pub layers: usize,
    pub hidden: usize,
    pub norm: NormKind,
    pub codebook_init: CodebookInit,
    pub vq_gradient: VqGradient,
    /// Re-center used codewords on their members every this many epochs.
    pub lloyd_every: Option<usize>,
    pub refresh_dead: bool,
    /// Abort when the full-set loss exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl CompressConfig {
    pub fn new(d: usize, k: usize) -> Self {
        CompressConfig {
            d,
            k,
            scope: Scope::PerLayer,
            epochs: 40,
            batch_rows: 4,
            lr: 2e-3,
            lr_schedule: LrSchedule::Cosine,
            lambda: 1.0,
            latent_scale: LatentScale::PerElement,
            seed: 0,
            layers: 3,
            hidden: MetaNetConfig::default_hidden(d),
            norm: NormKind::Reshaped,
            codebook_init: CodebookInit::LatentNormal,
            vq_gradient: VqGradient::Symmetric,
            lloyd_every: None,
            refresh_dead: true,
            divergence_factor: 10.0,
        }
    }

    pub fn validate(&self) -> Result<(), CompressError> {
        let bad = |m: String| Err(CompressError::Config(m));
        if self.d == 0 {
            return bad("d must be at least 1".into());
        }
        if self.k < 2 {
            return bad(format!("codebook size must be at least 2, got {}", self.k));
        }
        if self.k > u32::MAX as usize {
            return bad(format!("codebook size {} exceeds 2^32 - 1", self.k));
        }
        if self.layers == 0 || self.hidden == 0 {
            return bad("meta networks need at least one layer and a positive hidden width".into());
        }
        if self.batch_rows == 0 {
            return bad("batch_rows must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if let VqGradient::Split { commitment } = self.vq_gradient {
            if !(commitment >= 0.0 && commitment.is_finite()) {
                return bad(format!("commitment weight must be non-negative, got {commitment}"));
            }
        }
        if self.lloyd_every == Some(0) {
            return bad("lloyd_every must be positive".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> MetaNetConfig {
        MetaNetConfig { layers: self.layers, hidden: self.hidden, norm: self.norm, ..MetaNetConfig::encoder(self.d) }
    }

    pub fn decoder_config(&self) -> MetaNetConfig {
        MetaNetConfig { layers: self.layers, hidden: self.hidden, norm: self.norm, ..MetaNetConfig::decoder(self.d) }
    }

    /// True when nothing but the latent loss moves the codebook and that loss is off.
    pub fn codebook_frozen(&self) -> bool {
        self.lambda == 0.0
    }

    /// Weight on the summed latent loss for a unit of `n` subvectors.
    pub fn effective_lambda(&self, n: usize) -> f64 {
        match self.latent_scale {
            LatentScale::Sum => self.lambda,
            LatentScale::PerElement => self.lambda / ((n * self.d) as f64).sqrt(),
        }
    }
}

impl fmt::Display for CompressConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d={} k={} scope={} epochs={} batch_rows={} lr={} schedule={:?} lambda={} latent_scale={:?} seed={} m={} h={} norm={:?} init={:?} vq_gradient={:?} lloyd_every={:?} refresh_dead={}",
            self.d,
            self.k,
            self.scope,
            self.epochs,
            self.batch_rows,
            self.lr,
            self.lr_schedule,
            self.lambda,
            self.latent_scale,
            self.seed,
            self.layers,
            self.hidden,
            self.norm,
            self.codebook_init,
            self.vq_gradient,
            self.lloyd_every,
            self.refresh_dead
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMeta {
    pub name: String,
    pub role: Role,
    pub block: u32,
    pub d_in: usize,
    pub d_out: usize,
}

impl From<&LayerEntry> for LayerMeta {
    fn from(e: &LayerEntry) -> Self {
        LayerMeta { name: e.name.clone(), role: e.role, block: e.block_index, d_in: e.d_in, d_out: e.d_out }
    }
}

/// What gets stored for one layer: codebook, indices and decoder. Layers of
/// one block share the same codebook and decoder allocation under
/// [`Scope::PerBlock`].
#[derive(Debug, Clone)]
pub struct CompressedLayer {
    pub meta: LayerMeta,
    pub d: usize,
    pub codebook: Arc<Codebook>,
    pub decoder: Arc<MetaNet>,
    pub indices: Vec<u32>,
}

impl PartialEq for CompressedLayer {
    fn eq(&self, o: &Self) -> bool {
        self.meta == o.meta
            && self.d == o.d
            && self.codebook.codewords == o.codebook.codewords
            && *self.decoder == *o.decoder
            && self.indices == o.indices
    }
}

impl CompressedLayer {
    pub fn per_row(&self) -> usize {
        self.meta.d_out / self.d
    }

    pub fn n(&self) -> usize {
        self.meta.d_in * self.per_row()
    }

    pub fn k(&self) -> usize {
        self.codebook.k()
    }

    /// Sizes for ratio accounting, counting normalization parameters in the
    /// decoder unless `linear_only`.
    pub fn budget(&self, linear_only: bool) -> LayerBudget {
        let cfg = self.decoder.config();
        let n_fd = if linear_only { cfg.linear_param_count() } else { cfg.param_count() };
        LayerBudget { n: self.n() as u64, d: self.d as u64, k: self.k() as u64, n_fd: n_fd as u64 }
    }

    pub fn validate(&self) -> Result<(), CompressError> {
        if self.d == 0 || !self.meta.d_out.is_multiple_of(self.d) {
            return Err(StoreError::NotDivisible { d: self.d, d_out: self.meta.d_out }.into());
        }
        if self.indices.len() != self.n() {
            return Err(CompressError::Config(format!(
                "layer `{}` has {} indices for {} subvectors",
                self.meta.name,
                self.indices.len(),
                self.n()
            )));
        }
        if self.codebook.width() != self.d || self.decoder.config().width != self.d {
            return Err(CompressError::Config(format!("layer `{}` parts disagree on d", self.meta.name)));
        }
        let k = self.k();
        if let Some((position, &index)) = self.indices.iter().enumerate().find(|(_, &i)| i as usize >= k) {
            return Err(CompressError::IndexOutOfRange { position, index, k });
        }
        Ok(())
    }

    /// Decoded subvectors `decoder(C[I])`, normalized per weight row.
    pub fn decode_subvectors(&self) -> Result<SubvectorSet, CompressError> {
        self.validate()?;
        let zq = self.codebook.gather(&self.indices);
        let s_hat = self.decoder.predict(&RowBatch::new(zq, self.per_row())?)?;
        Ok(SubvectorSet {
            data: s_hat.values,
            d: self.d,
            per_row: self.per_row(),
            d_in: self.meta.d_in,
            origin: self.meta.name.clone(),
        })
    }
}

/// `merge(decoder(gather(C, I)), d)`
pub fn reconstruct_layer(cl: &CompressedLayer) -> Result<Matrix, CompressError> {
    Ok(merge(&cl.decode_subvectors()?, cl.d)?)
}

/// Full-set statistics after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 0 is the state before any update.
    pub epoch: usize,
    /// `rmse + lambda * vq_sum`, with the effective lambda
    pub loss: f64,
    pub vq_sum: f64,
    pub mse_mean: f64,
    /// `sqrt(sum_i ||S_i - S^_i||^2)`
    pub rmse: f64,
    pub mse_top100: f64,
    pub used_codewords: usize,
    /// Dead codewords re-seeded after this epoch.
    pub refreshed: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub layers: Vec<String>,
    pub config: String,
    pub epochs: Vec<EpochRecord>,
    /// Metrics over all layers of the unit, from the stored parts.
    pub final_metrics: LayerMetrics,
    pub layer_metrics: Vec<LayerMetrics>,
    pub used_codewords: usize,
    pub k: usize,
    pub wall_time_secs: f64,
    pub codebook_frozen: bool,
    pub diverged: bool,
    /// Kept only for debugging; never stored with the compressed layer.
    pub encoder: Option<MetaNet>,
}

impl TrainReport {
    /// Line-delimited `epoch,vq_sum,mse_mean,rmse,mse_top100` records.
    pub fn to_records(&self) -> String {
        let mut out = String::from("epoch,vq_sum,mse_mean,rmse,mse_top100\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", e.epoch, e.vq_sum, e.mse_mean, e.rmse, e.mse_top100));
        }
        out
    }

    /// Fraction of epoch transitions where the full-set loss did not increase.
    pub fn non_increasing_fraction(&self) -> f64 {
        let pairs = self.epochs.windows(2).count();
        if pairs == 0 {
            return 1.0;
        }
        self.epochs.windows(2).filter(|w| w[1].loss <= w[0].loss).count() as f64 / pairs as f64
    }
}

/// Compressed layers of one training unit with its report.
#[derive(Debug, Clone)]
pub struct UnitResult {
    pub layers: Vec<CompressedLayer>,
    pub report: TrainReport,
}

#[derive(Clone)]
struct Snapshot {
    encoder: MetaNet,
    decoder: MetaNet,
    codebook: Codebook,
}

struct Eval {
    record: EpochRecord,
    latents: Matrix,
    usage: Vec<usize>,
    assignments: Vec<Vec<u32>>,
}

fn latent_batch(encoder: &MetaNet, set: &SubvectorSet) -> Result<Matrix, CompressError> {
    Ok(encoder.predict(&RowBatch::new(set.data.clone(), set.per_row)?)?.values)
}

fn concat_rows(parts: &[Matrix], cols: usize) -> Matrix {
    let rows = parts.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.as_slice());
    }
    Matrix::from_vec(rows, cols, data)
}

fn evaluate(
    sets: &[SubvectorSet],
    snap: &Snapshot,
    lambda: f64,
    epoch: usize,
) -> Result<Eval, CompressError> {
    let k = snap.codebook.k();
    type SetEval = (Matrix, Vec<u32>, Vec<f64>, Vec<f64>);
    let per_set: Vec<SetEval> = sets
        .par_iter()
        .map(|set| -> Result<_, CompressError> {
            let z = latent_batch(&snap.encoder, set)?;
            let a = assign_nearest(&z, &snap.codebook)?;
            let s_hat = snap.decoder.predict(&RowBatch::new(a.quantized, set.per_row)?)?;
            let errs = row_sq_errors(&set.data, &s_hat.values);
            Ok((z, a.indices, a.distances, errs))
        })
        .collect::<Result<_, _>>()?;
    let mut errs = Vec::new();
    let mut dists = Vec::new();
    let mut latents = Vec::new();
    let mut assignments = Vec::new();
    let mut usage = vec![0usize; k];
    for (z, idx, dist, e) in per_set {
        for &i in &idx {
            usage[i as usize] += 1;
        }
        latents.push(z);
        assignments.push(idx);
        dists.extend(dist);
        errs.extend(e);
    }
    let m = LayerMetrics::from_terms(errs, dists, 0.0);
    let rmse = (m.mse_mean * m.n as f64).sqrt();
    let record = EpochRecord {
        epoch,
        loss: rmse + lambda * m.vq_sum,
        vq_sum: m.vq_sum,
        mse_mean: m.mse_mean,
        rmse,
        mse_top100: m.mse_top100,
        used_codewords: usage.iter().filter(|&&c| c > 0).count(),
        refreshed: 0,
    };
    let d = snap.codebook.width();
    Ok(Eval { record, latents: concat_rows(&latents, d), usage, assignments })
}

struct Trainer<'a> {
    cfg: &'a CompressConfig,
    snap: Snapshot,
    enc_opt: AdamState,
    dec_opt: AdamState,
    cb_opt: AdamState,
    total_n: f64,
    lambda: f64,
}

impl Trainer<'_> {
    /// One optimizer step on a batch of whole weight rows. Returns the batch loss.
    fn step(&mut self, s: &Matrix, group: usize) -> Result<f64, CompressError> {
        let cfg = self.cfg;
        let snap = &mut self.snap;
        let batch_n = s.rows() as f64;
        let c = self.total_n / batch_n;

        let (z, enc_cache) = snap.encoder.forward(&RowBatch::new(s.clone(), group)?)?;
        let a = assign_nearest(&z.values, &snap.codebook)?;
        let (s_hat, dec_cache) = snap.decoder.forward(&RowBatch::new(a.quantized.clone(), group)?)?;

        let mut recon_sum = 0.0;
        let mut d_shat = Matrix::zeros(s.rows(), s.cols());
        for ((g, p), t) in d_shat.as_mut_slice().iter_mut().zip(s_hat.values.as_slice()).zip(s.as_slice()) {
            let diff = p - t;
            recon_sum += diff * diff;
            *g = diff;
        }
        let vq_sum: f64 = a.distances.iter().sum();
        let rmse = (c * recon_sum).sqrt();
        let loss = rmse + self.lambda * c * vq_sum;
        if !loss.is_finite() {
            return Ok(loss);
        }
        let scale = if rmse > 0.0 { c / rmse } else { 0.0 };
        for g in d_shat.as_mut_slice() {
            *g *= scale;
        }

        let (dec_grads, d_zq) = snap.decoder.backward(&d_shat, &dec_cache)?;
        let mut d_z = ste_route(&d_zq);
        let mut d_c = Matrix::zeros(a.quantized.rows(), a.quantized.cols());
        let commit = match cfg.vq_gradient {
            VqGradient::Symmetric => 1.0,
            VqGradient::Split { commitment } => commitment,
        };
        let w = 2.0 * self.lambda * c;
        for (((gz, gc), zv), qv) in d_z
            .as_mut_slice()
            .iter_mut()
            .zip(d_c.as_mut_slice())
            .zip(z.values.as_slice())
            .zip(a.quantized.as_slice())
        {
            *gz += w * commit * (zv - qv);
            *gc = w * (qv - zv);
        }
        let cb_grad = Codebook { codewords: scatter_to_codewords(&d_c, &a.indices, snap.codebook.k()), seed: 0 };
        let (enc_grads, _) = snap.encoder.backward(&d_z, &enc_cache)?;

        self.enc_opt.step(&mut snap.encoder, &enc_grads)?;
        self.dec_opt.step(&mut snap.decoder, &dec_grads)?;
        self.cb_opt.step(&mut snap.codebook, &cb_grad)?;
        Ok(loss)
    }
}

/// Stable 64-bit FNV-1a, for deriving per-unit seeds from names.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn unit_seed(seed: u64, key: &str) -> u64 {
    seed ^ fnv1a(key.as_bytes())
}

/// Trains one encoder/codebook/decoder triple over all `layers` (weights plus
/// metadata) and returns the compressed layers sharing its codebook and decoder.
pub fn compress_unit(layers: &[(LayerMeta, &Matrix)], cfg: &CompressConfig, seed: u64) -> Result<UnitResult, CompressError> {
    cfg.validate()?;
    if layers.is_empty() {
        return Err(CompressError::Config("no layers to compress".into()));
    }
    let start = Instant::now();
    let sets: Vec<SubvectorSet> = layers
        .iter()
        .map(|(meta, w)| {
            if w.shape() != (meta.d_in, meta.d_out) {
                return Err(CompressError::Config(format!(
                    "layer `{}` declared {}x{} but weights are {:?}",
                    meta.name,
                    meta.d_in,
                    meta.d_out,
                    w.shape()
                )));
            }
            Ok(split_rows(w, cfg.d, &meta.name)?)
        })
        .collect::<Result<_, _>>()?;
    let total_n: usize = sets.iter().map(SubvectorSet::len).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = MetaNet::init(cfg.encoder_config(), &mut rng)?;
    let decoder = MetaNet::init(cfg.decoder_config(), &mut rng)?;
    let initial_latents: Vec<Matrix> = sets.iter().map(|s| latent_batch(&encoder, s)).collect::<Result<_, _>>()?;
    let latents = concat_rows(&initial_latents, cfg.d);
    let codebook = Codebook::init(cfg.k, cfg.d, rng.next_u64(), cfg.codebook_init, Some(&latents))?;

    let lambda = cfg.effective_lambda(total_n);
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut trainer = Trainer {
        cfg,
        enc_opt: AdamState::new(adam, &encoder),
        dec_opt: AdamState::new(adam, &decoder),
        cb_opt: AdamState::new(adam, &codebook),
        snap: Snapshot { encoder, decoder, codebook },
        total_n: total_n as f64,
        lambda,
    };

    let mut eval = evaluate(&sets, &trainer.snap, lambda, 0)?;
    let initial_loss = eval.record.loss;
    let mut history = vec![eval.record];
    let mut best = (initial_loss, trainer.snap.clone());
    let mut diverged: Option<(usize, f64)> = None;

    // (set, weight row) pairs, reshuffled every epoch
    let mut rows: Vec<(usize, usize)> =
        sets.iter().enumerate().flat_map(|(si, s)| (0..s.d_in).map(move |r| (si, r))).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        rows.shuffle(&mut rng);
        let mut by_set: Vec<Vec<usize>> = vec![Vec::new(); sets.len()];
        for &(si, r) in &rows {
            by_set[si].push(r);
        }
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (si, rs) in by_set.into_iter().enumerate() {
            for chunk in rs.chunks(cfg.batch_rows) {
                batches.push((si, chunk.to_vec()));
            }
        }
        batches.shuffle(&mut rng);
        let lr = cfg.lr_schedule.at(cfg.lr, epoch, cfg.epochs);
        for opt in [&mut trainer.enc_opt, &mut trainer.dec_opt, &mut trainer.cb_opt] {
            opt.config.lr = lr;
        }

        for (si, batch_rows) in &batches {
            let set = &sets[*si];
            let l = set.per_row;
            let idx: Vec<usize> = batch_rows.iter().flat_map(|&r| r * l..(r + 1) * l).collect();
            let s = set.data.gather_rows(&idx);
            let loss = match trainer.step(&s, l) {
                Ok(loss) => loss,
                Err(CompressError::Net(NetError::NonFiniteGradient(_))) => f64::NAN,
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                diverged = Some((epoch, loss));
                break 'epochs;
            }
        }

        eval = evaluate(&sets, &trainer.snap, lambda, epoch)?;
        let loss = eval.record.loss;
        if !loss.is_finite() || loss > cfg.divergence_factor * initial_loss || !trainer.snap.codebook.all_finite() {
            history.push(eval.record);
            diverged = Some((epoch, loss));
            break;
        }
        if loss < best.0 {
            best = (loss, trainer.snap.clone());
        }
        if cfg.refresh_dead {
            eval.record.refreshed =
                refresh_dead_codewords(&mut trainer.snap.codebook, &eval.usage, &eval.latents, &mut rng);
        }
        if let Some(every) = cfg.lloyd_every {
            if epoch % every == 0 {
                let flat: Vec<u32> = eval.assignments.concat();
                lloyd_recenter(&mut trainer.snap.codebook, &eval.latents, &flat);
            }
        }
        history.push(eval.record);
    }

    let final_snap = if diverged.is_some() { best.1 } else { trainer.snap };
    let result = finalize(layers, &sets, final_snap, cfg, history, start, diverged.is_some())?;
    match diverged {
        Some((epoch, loss)) => Err(CompressError::Diverged { epoch, loss, snapshot: Box::new(result) }),
        None => Ok(result),
    }
}

/// Rounds the stored parts to storage precision, assigns every subvector
/// with the final encoder, and measures metrics from the stored parts.
fn finalize(
    layers: &[(LayerMeta, &Matrix)],
    sets: &[SubvectorSet],
    mut snap: Snapshot,
    cfg: &CompressConfig,
    epochs: Vec<EpochRecord>,
    start: Instant,
    diverged: bool,
) -> Result<UnitResult, CompressError> {
    snap.codebook.round_to_f16();
    snap.decoder.round_to_f32();
    let codebook = Arc::new(snap.codebook);
    let decoder = Arc::new(snap.decoder);

    let mut out = Vec::with_capacity(sets.len());
    let mut layer_metrics = Vec::with_capacity(sets.len());
    let (mut all_errs, mut all_dists, mut weight_sq) = (Vec::new(), Vec::new(), 0.0);
    let mut usage = vec![false; codebook.k()];
    for ((meta, _), set) in layers.iter().zip(sets) {
        let z = latent_batch(&snap.encoder, set)?;
        let a = assign_nearest(&z, &codebook)?;
        for &i in &a.indices {
            usage[i as usize] = true;
        }
        let cl = CompressedLayer {
            meta: meta.clone(),
            d: cfg.d,
            codebook: Arc::clone(&codebook),
            decoder: Arc::clone(&decoder),
            indices: a.indices,
        };
        let s_hat = cl.decode_subvectors()?;
        let errs = row_sq_errors(&set.data, &s_hat.data);
        let wsq = sorted_sq_norm(&set.data);
        layer_metrics.push(LayerMetrics::from_terms(errs.clone(), a.distances.clone(), wsq));
        all_errs.extend(errs);
        all_dists.extend(a.distances);
        weight_sq += wsq;
        out.push(cl);
    }
    let report = TrainReport {
        layers: layers.iter().map(|(m, _)| m.name.clone()).collect(),
        config: cfg.to_string(),
        epochs,
        final_metrics: LayerMetrics::from_terms(all_errs, all_dists, weight_sq),
        layer_metrics,
        used_codewords: usage.iter().filter(|&&u| u).count(),
        k: cfg.k,
        wall_time_secs: start.elapsed().as_secs_f64(),
        codebook_frozen: cfg.codebook_frozen(),
        diverged,
        encoder: Some(snap.encoder),
    };
    Ok(UnitResult { layers: out, report })
}

/// Compresses a single weight matrix with its own encoder, codebook and decoder.
pub fn compress_layer(w: &Matrix, cfg: &CompressConfig) -> Result<(CompressedLayer, TrainReport), CompressError> {
    compress_named_layer(w, "layer", Role::Other, 0, cfg)
}

pub fn compress_named_layer(
    w: &Matrix,
    name: &str,
    role: Role,
    block: u32,
    cfg: &CompressConfig,
) -> Result<(CompressedLayer, TrainReport), CompressError> {
    let meta = LayerMeta { name: name.to_string(), role, block, d_in: w.rows(), d_out: w.cols() };
    let r = compress_unit(&[(meta, w)], cfg, cfg.seed)?;
    Ok((r.layers.into_iter().next().expect("one layer in, one out"), r.report))
}

/// Which layer roles to compress.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFilter {
    pub roles: BTreeSet<Role>,
}

impl LayerFilter {
    /// The seven linear projections; `other` is only included when named.
    pub fn all_linear() -> Self {
        LayerFilter { roles: Role::LINEAR.into_iter().collect() }
    }

    pub fn accepts(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

impl FromStr for LayerFilter {
    type Err = String;

    /// `all` or a comma-separated role list such as `q,k,v`.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut roles = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                roles.extend(Role::LINEAR);
            } else {
                roles.insert(part.parse::<Role>()?);
            }
        }
        if roles.is_empty() {
            return Err("empty layer filter".into());
        }
        Ok(LayerFilter { roles })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub scope: Scope,
    pub layers: Vec<CompressedLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Data,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct LayerFailure {
    pub layers: Vec<String>,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ModelReport {
    pub units: Vec<TrainReport>,
    pub failures: Vec<LayerFailure>,
}

/// Groups the selected layers into training units: one per layer, or one per
/// block in order of first appearance.
pub fn plan_units<'m>(manifest: &'m ModelManifest, filter: &LayerFilter, scope: Scope) -> Vec<(String, Vec<&'m LayerEntry>)> {
    let selected = manifest.layers.iter().filter(|l| filter.accepts(l.role));
    match scope {
        Scope::PerLayer => selected.map(|l| (l.name.clone(), vec![l])).collect(),
        Scope::PerBlock => {
            let mut order: Vec<u32> = Vec::new();
            let mut groups: HashMap<u32, Vec<&LayerEntry>> = HashMap::new();
            for l in selected {
                if !groups.contains_key(&l.block_index) {
                    order.push(l.block_index);
                }
                groups.entry(l.block_index).or_default().push(l);
            }
            order.into_iter().map(|b| (format!("block{b}"), groups.remove(&b).unwrap_or_default())).collect()
        }
    }
}

/// Compresses every selected layer of a manifest. Units run concurrently on
/// up to `jobs` threads; output keeps manifest order. Failed units are listed
/// in the report; diverged units keep their restored snapshot.
pub fn compress_model(
    manifest: &ModelManifest,
    cfg: &CompressConfig,
    filter: &LayerFilter,
    jobs: usize,
) -> Result<(CompressedModel, ModelReport), CompressError> {
    cfg.validate()?;
    for entry in manifest.layers.iter().filter(|l| filter.accepts(l.role)) {
        if entry.d_out % cfg.d != 0 {
            return Err(StoreError::NotDivisible { d: cfg.d, d_out: entry.d_out }.into());
        }
    }
    let units = plan_units(manifest, filter, cfg.scope);
    let run = |(key, entries): &(String, Vec<&LayerEntry>)| -> Result<UnitResult, CompressError> {
        let weights: Vec<Matrix> = entries.iter().map(|e| manifest.load_weights(e)).collect::<Result<_, _>>()?;
        let layers: Vec<(LayerMeta, &Matrix)> =
            entries.iter().zip(&weights).map(|(e, w)| (LayerMeta::from(*e), w)).collect();
        compress_unit(&layers, cfg, unit_seed(cfg.seed, key))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CompressError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<UnitResult, CompressError>> = pool.install(|| units.par_iter().map(run).collect());

    let mut model = CompressedModel { scope: cfg.scope, layers: Vec::new() };
    let mut report = ModelReport::default();
    for ((_, entries), res) in units.iter().zip(results) {
        let names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
        match res {
            Ok(r) => {
                model.layers.extend(r.layers);
                report.units.push(r.report);
            }
            Err(CompressError::Diverged { epoch, loss, snapshot }) => {
                report.failures.push(LayerFailure {
                    layers: names,
                    kind: FailureKind::Diverged,
                    message: format!("diverged at epoch {epoch} (loss {loss}); best snapshot kept"),
                });
                model.layers.extend(snapshot.layers);
                report.units.push(snapshot.report);
            }
            Err(e) => report.failures.push(LayerFailure { layers: names, kind: FailureKind::Data, message: e.to_string() }),
        }
    }
    Ok((model, report))
}
