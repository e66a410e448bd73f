//! Weight manifests and the subvector split/merge of weight rows.
//!
//! A manifest is a text file:
//!
//! ```text
//! pocketllm-manifest v1
//! name|role|block|d_in|d_out|dtype|relative_path
//! ```
//!
//! Each tensor file holds `d_in * d_out` little-endian `f32` values in
//! row-major order and nothing else. Relative paths resolve against the
//! directory containing the manifest.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::matrix::Matrix;

pub const MANIFEST_HEADER: &str = "pocketllm-manifest v1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),
    #[error("layer `{name}`: expected {expected} bytes in {path}, found {found}")]
    SizeMismatch { name: String, path: PathBuf, expected: u64, found: u64 },
    #[error("unsupported dtype `{0}` (only f32 is accepted)")]
    UnsupportedDtype(String),
    #[error("subvector length {d} does not divide row length {d_out}")]
    NotDivisible { d: usize, d_out: usize },
    #[error("subvector set metadata inconsistent: {0}")]
    Inconsistent(String),
    #[error("no layer named `{0}`")]
    UnknownLayer(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Which projection of a transformer block a weight matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
    Other,
}

impl Role {
    /// The seven linear projections of a block; `Other` is only compressed when asked for by name.
    pub const LINEAR: [Role; 7] = [Role::Q, Role::K, Role::V, Role::O, Role::Gate, Role::Up, Role::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::Gate => "gate",
            Role::Up => "up",
            Role::Down => "down",
            Role::Other => "other",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Role::LINEAR.iter().chain(std::iter::once(&Role::Other)).copied().find(|r| r.code() == code)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "q" => Role::Q,
            "k" => Role::K,
            "v" => Role::V,
            "o" => Role::O,
            "gate" => Role::Gate,
            "up" => Role::Up,
            "down" => Role::Down,
            "other" => Role::Other,
            _ => return Err(format!("unknown role `{s}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerEntry {
    pub name: String,
    pub role: Role,
    pub block_index: u32,
    pub d_in: usize,
    pub d_out: usize,
    /// Path as written in the manifest.
    pub data_path: String,
}

impl LayerEntry {
    pub fn shape(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelManifest {
    pub layers: Vec<LayerEntry>,
    /// Directory that relative data paths resolve against.
    pub base_dir: PathBuf,
}

impl ModelManifest {
    pub fn layer(&self, name: &str) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn resolve(&self, entry: &LayerEntry) -> PathBuf {
        self.base_dir.join(&entry.data_path)
    }

    /// Reads the weights of one layer.
    pub fn load_weights(&self, entry: &LayerEntry) -> Result<Matrix, StoreError> {
        let path = self.resolve(entry);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let expected = (entry.numel() * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(StoreError::SizeMismatch {
                name: entry.name.clone(),
                path,
                expected,
                found: bytes.len() as u64,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Matrix::from_vec(entry.d_in, entry.d_out, data))
    }

    pub fn load_weights_by_name(&self, name: &str) -> Result<Matrix, StoreError> {
        let entry = self.layer(name).ok_or_else(|| StoreError::UnknownLayer(name.to_string()))?;
        self.load_weights(entry)
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<LayerEntry, StoreError> {
    let perr = |msg: String| StoreError::Parse { line: lineno, msg };
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 7 {
        return Err(perr(format!("expected 7 `|`-separated fields, found {}", fields.len())));
    }
    let name = fields[0].trim();
    if name.is_empty() {
        return Err(perr("empty layer name".into()));
    }
    let role = fields[1].trim().parse::<Role>().map_err(perr)?;
    let block_index = fields[2].trim().parse::<u32>().map_err(|e| perr(format!("block: {e}")))?;
    let d_in = fields[3].trim().parse::<usize>().map_err(|e| perr(format!("d_in: {e}")))?;
    let d_out = fields[4].trim().parse::<usize>().map_err(|e| perr(format!("d_out: {e}")))?;
    if d_in == 0 || d_out == 0 {
        return Err(perr("zero-sized dimension".into()));
    }
    let dtype = fields[5].trim();
    if dtype != "f32" {
        return Err(StoreError::UnsupportedDtype(dtype.to_string()));
    }
    let data_path = fields[6].trim();
    if data_path.is_empty() {
        return Err(perr("empty data path".into()));
    }
    Ok(LayerEntry {
        name: name.to_string(),
        role,
        block_index,
        d_in,
        d_out,
        data_path: data_path.to_string(),
    })
}

/// Parses manifest text. Blank lines are ignored; data files are not touched.
pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<ModelManifest, StoreError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => {
            return Err(StoreError::Parse { line: 1, msg: format!("expected header `{MANIFEST_HEADER}`") });
        }
    }
    let mut layers = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_line(line, i + 1)?;
        if !seen.insert(entry.name.clone()) {
            return Err(StoreError::DuplicateLayer(entry.name));
        }
        layers.push(entry);
    }
    Ok(ModelManifest { layers, base_dir: base_dir.into() })
}

/// Loads a manifest and checks every tensor file against its declared shape.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ModelManifest, StoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, base)?;
    for entry in &manifest.layers {
        let data = manifest.resolve(entry);
        let found = fs::metadata(&data).map_err(io_err(&data))?.len();
        let expected = (entry.numel() * 4) as u64;
        if found != expected {
            return Err(StoreError::SizeMismatch { name: entry.name.clone(), path: data, expected, found });
        }
    }
    Ok(manifest)
}

/// Writes raw little-endian f32 row-major data.
pub fn write_tensor(path: impl AsRef<Path>, w: &Matrix) -> Result<(), StoreError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(w.as_slice().len() * 4);
    for &v in w.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes `layers` as tensor files next to a new manifest at `manifest_path`.
///
/// Tensor files are named `<layer name>.f32` inside the manifest directory.
pub fn save_manifest<'a>(
    manifest_path: impl AsRef<Path>,
    layers: impl IntoIterator<Item = (&'a LayerEntry, &'a Matrix)>,
) -> Result<ModelManifest, StoreError> {
    let manifest_path = manifest_path.as_ref();
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(&base).map_err(io_err(&base))?;
    }
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (entry, w) in layers {
        if !seen.insert(entry.name.clone()) {
            return Err(StoreError::DuplicateLayer(entry.name.clone()));
        }
        if w.shape() != entry.shape() {
            return Err(StoreError::Inconsistent(format!(
                "layer `{}` declared {:?} but tensor is {:?}",
                entry.name,
                entry.shape(),
                w.shape()
            )));
        }
        let file = format!("{}.f32", entry.name.replace(['/', '\\'], "_"));
        write_tensor(base.join(&file), w)?;
        text.push_str(&format!(
            "{}|{}|{}|{}|{}|f32|{}\n",
            entry.name, entry.role, entry.block_index, entry.d_in, entry.d_out, file
        ));
        out.push(LayerEntry { data_path: file, ..entry.clone() });
    }
    fs::write(manifest_path, text).map_err(io_err(manifest_path))?;
    Ok(ModelManifest { layers: out, base_dir: base })
}

/// The `N x d` matrix of weight subvectors cut from a `d_in x d_out` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SubvectorSet {
    pub data: Matrix,
    pub d: usize,
    /// Subvectors per weight row (`d_out / d`).
    pub per_row: usize,
    pub d_in: usize,
    pub origin: String,
}

impl SubvectorSet {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn d_out(&self) -> usize {
        self.d * self.per_row
    }

    /// Same grouping metadata around new data (e.g. reconstructed subvectors).
    pub fn with_data(&self, data: Matrix) -> SubvectorSet {
        SubvectorSet { data, ..self.clone() }
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.data.cols() != self.d {
            return Err(StoreError::Inconsistent(format!("width {} != d {}", self.data.cols(), self.d)));
        }
        if self.data.rows() != self.d_in * self.per_row {
            return Err(StoreError::Inconsistent(format!(
                "N = {} but d_in * L = {} * {}",
                self.data.rows(),
                self.d_in,
                self.per_row
            )));
        }
        Ok(())
    }
}

/// Cuts every row of `w` into consecutive length-`d` subvectors.
///
/// Row `i` contributes rows `i*L .. i*L + L` of the result. Since the matrix is
/// row-major this is a pure reshape of the underlying buffer.
pub fn split_rows(w: &Matrix, d: usize, origin: &str) -> Result<SubvectorSet, StoreError> {
    let (d_in, d_out) = w.shape();
    if d == 0 || d_out % d != 0 {
        return Err(StoreError::NotDivisible { d, d_out });
    }
    let per_row = d_out / d;
    Ok(SubvectorSet {
        data: Matrix::from_vec(d_in * per_row, d, w.as_slice().to_vec()),
        d,
        per_row,
        d_in,
        origin: origin.to_string(),
    })
}

/// Inverse of [`split_rows`].
pub fn merge(s: &SubvectorSet, d: usize) -> Result<Matrix, StoreError> {
    if d != s.d {
        return Err(StoreError::Inconsistent(format!("merge with d = {d} on a set split at d = {}", s.d)));
    }
    s.check()?;
    Ok(Matrix::from_vec(s.d_in, s.d_out(), s.data.as_slice().to_vec()))
}

/// Writes a small random transformer-shaped model (`blocks` blocks of q, k,
/// v, o, gate, up, down plus one `other` embedding) and returns its manifest.
/// Attention projections are `width x width`; the MLP uses `2 * width`.
pub fn write_toy_model(
    manifest_path: impl AsRef<Path>,
    blocks: u32,
    width: usize,
    seed: u64,
) -> Result<ModelManifest, StoreError> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let ffn = 2 * width;
    let mut layers = Vec::new();
    let mut push = |name: String, role: Role, block: u32, d_in: usize, d_out: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let w = Matrix::from_vec(d_in, d_out, (0..d_in * d_out).map(|_| normal.sample(rng)).collect());
        layers.push((LayerEntry { name, role, block_index: block, d_in, d_out, data_path: String::new() }, w));
    };
    push("embed".into(), Role::Other, 0, 16, width, &mut rng);
    for b in 0..blocks {
        for role in [Role::Q, Role::K, Role::V, Role::O] {
            push(format!("blocks.{b}.attn.{role}"), role, b, width, width, &mut rng);
        }
        push(format!("blocks.{b}.mlp.gate"), Role::Gate, b, width, ffn, &mut rng);
        push(format!("blocks.{b}.mlp.up"), Role::Up, b, width, ffn, &mut rng);
        push(format!("blocks.{b}.mlp.down"), Role::Down, b, ffn, width, &mut rng);
    }
    save_manifest(manifest_path, layers.iter().map(|(e, w)| (e, w)))
}
