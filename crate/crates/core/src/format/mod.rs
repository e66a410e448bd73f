//! The `.pocket` container.
//!
//! All integers are little endian.
//!
//! ```text
//! header   "PKLM" | version u16 | scope u8 | reserved u8 | groups u32 | layers u32
//! group    d u32 | K u32 | m u32 | h u32 | flags u32
//!          K*d fp16 codewords (row major)
//!          N_fd f32 decoder parameters (per layer: weight, bias, norm gain, norm bias)
//! layer    name_len u16 | name | role u8 | block u32 | group u32 | d_in u32 | d_out u32
//!          ceil(N * ceil(log2 K) / 8) bytes of packed indices
//! ```
//!
//! A group is one shared codebook and decoder. Per-layer files have one group
//! per layer; per-block files one per block.

pub mod bitpack;
pub mod fp16;
pub mod ratio;

use std::io;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::codebook::Codebook;
use crate::compressor::{CompressedLayer, CompressedModel, LayerMeta, Scope};
use crate::matrix::Matrix;
use crate::nn::{Activation, MetaNet, MetaNetConfig, NormKind, Parameters, ResidualSchedule};
use crate::tensor_store::Role;

pub const MAGIC: &[u8; 4] = b"PKLM";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 4 + 4;
const GROUP_HEADER_LEN: usize = 5 * 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("codebook size {0} is too small (need at least 2)")]
    CodebookSize(u64),
    #[error("index {index} at position {position} is outside a codebook of {k}")]
    IndexOutOfRange { position: usize, index: u64, k: u64 },
    #[error("{what}: expected {expected} bytes, found {found}")]
    Length { what: &'static str, expected: usize, found: usize },
    #[error("not a pocket file (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported pocket version {0}")]
    BadVersion(u16),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last layer")]
    Trailing(usize),
    #[error("unknown flag bits {0:#x}")]
    BadFlags(u32),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Invalid(String),
}

const FLAG_BIAS: u32 = 1;
const NORM_SHIFT: u32 = 1;
const RESIDUAL_SHIFT: u32 = 3;
const FLAG_IDENTITY: u32 = 1 << 5;
const KNOWN_FLAGS: u32 = (1 << 6) - 1;

pub fn encode_flags(cfg: &MetaNetConfig) -> u32 {
    let norm = match cfg.norm {
        NormKind::Reshaped => 0,
        NormKind::PerVector => 1,
        NormKind::Disabled => 2,
    };
    let mut f = (norm << NORM_SHIFT) | (cfg.residual.code() << RESIDUAL_SHIFT);
    if cfg.use_bias {
        f |= FLAG_BIAS;
    }
    if cfg.activation == Activation::Identity {
        f |= FLAG_IDENTITY;
    }
    f
}

fn decode_flags(flags: u32, d: usize, m: usize, h: usize) -> Result<MetaNetConfig, FormatError> {
    if flags & !KNOWN_FLAGS != 0 {
        return Err(FormatError::BadFlags(flags & !KNOWN_FLAGS));
    }
    let norm = match (flags >> NORM_SHIFT) & 3 {
        0 => NormKind::Reshaped,
        1 => NormKind::PerVector,
        2 => NormKind::Disabled,
        _ => return Err(FormatError::BadFlags(flags)),
    };
    let residual = ResidualSchedule::from_code((flags >> RESIDUAL_SHIFT) & 3).ok_or(FormatError::BadFlags(flags))?;
    Ok(MetaNetConfig {
        layers: m,
        width: d,
        hidden: h,
        use_bias: flags & FLAG_BIAS != 0,
        residual,
        norm,
        activation: if flags & FLAG_IDENTITY != 0 { Activation::Identity } else { Activation::Gelu },
    })
}

fn to_u32(v: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{what} {v} does not fit in 32 bits")))
}

/// Distinct (codebook, decoder) pairs in first-use order, and each layer's group.
fn groups(model: &CompressedModel) -> (Vec<&CompressedLayer>, Vec<usize>) {
    let mut reps: Vec<&CompressedLayer> = Vec::new();
    let mut of_layer = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let found = reps
            .iter()
            .position(|r| Arc::ptr_eq(&r.codebook, &l.codebook) && Arc::ptr_eq(&r.decoder, &l.decoder));
        of_layer.push(found.unwrap_or_else(|| {
            reps.push(l);
            reps.len() - 1
        }));
    }
    (reps, of_layer)
}

/// Byte and bit accounting for a model as it would be written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileLayout {
    pub total_bytes: usize,
    /// `16 K d` per group.
    pub codebook_bits: u64,
    /// `32 N_fd` per group.
    pub decoder_bits: u64,
    /// Packed index bytes times eight, padding included.
    pub index_bits: u64,
}

impl FileLayout {
    pub fn payload_bits(&self) -> u64 {
        self.codebook_bits + self.decoder_bits + self.index_bits
    }

    /// Header, names, shapes and the like, in bytes.
    pub fn overhead_bytes(&self) -> usize {
        self.total_bytes - (self.payload_bits() / 8) as usize
    }
}

pub fn file_layout(model: &CompressedModel) -> Result<FileLayout, FormatError> {
    let (reps, _) = groups(model);
    let mut total = HEADER_LEN;
    let (mut cb, mut dec, mut idx) = (0u64, 0u64, 0u64);
    for g in &reps {
        let cw = g.codebook.k() * g.d;
        let nfd = g.decoder.num_params();
        total += GROUP_HEADER_LEN + 2 * cw + 4 * nfd;
        cb += 16 * cw as u64;
        dec += 32 * nfd as u64;
    }
    for l in &model.layers {
        let packed = bitpack::packed_len(l.n(), l.k() as u64)?;
        total += 2 + l.meta.name.len() + 1 + 4 * 4 + packed;
        idx += 8 * packed as u64;
    }
    Ok(FileLayout { total_bytes: total, codebook_bits: cb, decoder_bits: dec, index_bits: idx })
}

pub fn write_pocket(model: &CompressedModel) -> Result<Vec<u8>, FormatError> {
    let (reps, of_layer) = groups(model);
    let mut out = Vec::with_capacity(file_layout(model)?.total_bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.scope.code());
    out.push(0);
    out.extend_from_slice(&to_u32(reps.len(), "group count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(model.layers.len(), "layer count")?.to_le_bytes());

    for g in &reps {
        let cfg = g.decoder.config();
        if g.codebook.width() != g.d || cfg.width != g.d {
            return Err(FormatError::Invalid(format!("layer `{}` parts disagree on d", g.meta.name)));
        }
        for v in [g.d, g.codebook.k(), cfg.layers, cfg.hidden] {
            out.extend_from_slice(&to_u32(v, "group field")?.to_le_bytes());
        }
        out.extend_from_slice(&encode_flags(cfg).to_le_bytes());
        for &c in g.codebook.codewords.as_slice() {
            out.extend_from_slice(&fp16::encode(c as f32).to_le_bytes());
        }
        g.decoder.visit(&mut |_, p| {
            for &v in p {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        });
    }

    for (l, &g) in model.layers.iter().zip(&of_layer) {
        let name = l.meta.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| FormatError::Invalid(format!("layer name of {} bytes is too long", name.len())))?;
        if l.meta.d_out % l.d != 0 {
            return Err(FormatError::Invalid(format!("layer `{}`: d_out not divisible by d", l.meta.name)));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(l.meta.role.code());
        out.extend_from_slice(&l.meta.block.to_le_bytes());
        for v in [g, l.meta.d_in, l.meta.d_out] {
            out.extend_from_slice(&to_u32(v, "layer field")?.to_le_bytes());
        }
        if l.indices.len() != l.n() {
            return Err(FormatError::Invalid(format!(
                "layer `{}` has {} indices for {} subvectors",
                l.meta.name,
                l.indices.len(),
                l.n()
            )));
        }
        out.extend_from_slice(&bitpack::pack_indices(&l.indices, l.k() as u64)?);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated(what))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize, FormatError> {
        Ok(self.u32(what)? as usize)
    }

    /// `count * width` bytes, failing early instead of overflowing on hostile sizes.
    fn array(&mut self, count: usize, width: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let n = count.checked_mul(width).ok_or(FormatError::Truncated(what))?;
        self.take(n, what)
    }
}

pub fn read_pocket(bytes: &[u8]) -> Result<CompressedModel, FormatError> {
    let mut r = Reader { buf: bytes, at: 0 };
    // a short file is reported as a bad magic, not a truncation
    let mut magic = [0u8; 4];
    let head = &bytes[..bytes.len().min(4)];
    magic[..head.len()].copy_from_slice(head);
    if &magic != MAGIC || head.len() < 4 {
        return Err(FormatError::BadMagic(magic));
    }
    r.at = 4;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let scope_code = r.u8("scope")?;
    let scope = Scope::from_code(scope_code).ok_or_else(|| FormatError::Corrupt(format!("unknown scope {scope_code}")))?;
    let _reserved = r.u8("header")?;
    let group_count = r.usize("group count")?;
    let layer_count = r.usize("layer count")?;

    let mut parts: Vec<(Arc<Codebook>, Arc<MetaNet>)> = Vec::new();
    for _ in 0..group_count {
        let d = r.usize("group header")?;
        let k = r.usize("group header")?;
        let m = r.usize("group header")?;
        let h = r.usize("group header")?;
        let flags = r.u32("group header")?;
        if d == 0 || k < 2 || m == 0 || h == 0 {
            return Err(FormatError::Corrupt(format!("group with d={d} K={k} m={m} h={h}")));
        }
        let cfg = decode_flags(flags, d, m, h)?;
        let raw = r.array(k, 2 * d, "codebook")?;
        let cw: Vec<f64> =
            raw.chunks_exact(2).map(|c| f64::from(fp16::decode(u16::from_le_bytes([c[0], c[1]])))).collect();
        let codebook = Codebook::new(Matrix::from_vec(k, d, cw), 0).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        let mut decoder = MetaNet::zeros(cfg).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        let raw = r.array(decoder.num_params(), 4, "decoder")?;
        let flat: Vec<f64> =
            raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes")))).collect();
        decoder.load_flat(&flat).expect("length matches the config");
        parts.push((Arc::new(codebook), Arc::new(decoder)));
    }

    let mut layers = Vec::new();
    for _ in 0..layer_count {
        let name_len = r.u16("layer name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "layer name")?)
            .map_err(|_| FormatError::Corrupt("layer name is not UTF-8".into()))?
            .to_string();
        let role_code = r.u8("layer role")?;
        let role = Role::from_code(role_code)
            .ok_or_else(|| FormatError::Corrupt(format!("layer `{name}` has unknown role {role_code}")))?;
        let block = r.u32("layer header")?;
        let group = r.usize("layer header")?;
        let d_in = r.usize("layer header")?;
        let d_out = r.usize("layer header")?;
        let (codebook, decoder) = parts
            .get(group)
            .ok_or_else(|| FormatError::Corrupt(format!("layer `{name}` refers to missing group {group}")))?;
        let d = codebook.width();
        if d_out % d != 0 {
            return Err(FormatError::Corrupt(format!("layer `{name}`: d_out {d_out} not divisible by d {d}")));
        }
        let n = d_in
            .checked_mul(d_out / d)
            .ok_or_else(|| FormatError::Corrupt(format!("layer `{name}` is impossibly large")))?;
        let k = codebook.k() as u64;
        let packed = bitpack::packed_len(n, k)?;
        let payload = r.take(packed, "index payload")?;
        let indices = bitpack::unpack_indices(payload, n, k)?;
        layers.push(CompressedLayer {
            meta: LayerMeta { name, role, block, d_in, d_out },
            d,
            codebook: Arc::clone(codebook),
            decoder: Arc::clone(decoder),
            indices,
        });
    }
    if r.at != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - r.at));
    }
    Ok(CompressedModel { scope, layers })
}

pub fn save_pocket(path: impl AsRef<Path>, model: &CompressedModel) -> Result<(), FormatError> {
    let path = path.as_ref();
    let bytes = write_pocket(model)?;
    std::fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

pub fn load_pocket(path: impl AsRef<Path>) -> Result<CompressedModel, FormatError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })?;
    read_pocket(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_model(shared: bool) -> CompressedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let mk_parts = |rng: &mut ChaCha8Rng| {
            let mut cb = Codebook::init(8, d, 1, crate::codebook::CodebookInit::LatentNormal, None).unwrap();
            cb.round_to_f16();
            let mut dec = MetaNet::init(MetaNetConfig::decoder(d), rng).unwrap();
            dec.round_to_f32();
            (Arc::new(cb), Arc::new(dec))
        };
        let first = mk_parts(&mut rng);
        let layers = (0..3)
            .map(|i| {
                let (cb, dec) = if shared || i == 0 { first.clone() } else { mk_parts(&mut rng) };
                CompressedLayer {
                    meta: LayerMeta { name: format!("l{i}"), role: Role::Q, block: 0, d_in: 3, d_out: 8 },
                    d,
                    codebook: cb,
                    decoder: dec,
                    indices: (0..6).map(|j| (j * 3 + i) % 8).collect(),
                }
            })
            .collect();
        CompressedModel { scope: if shared { Scope::PerBlock } else { Scope::PerLayer }, layers }
    }

    #[test]
    fn round_trip_is_exact() {
        for shared in [false, true] {
            let m = sample_model(shared);
            let bytes = write_pocket(&m).unwrap();
            assert_eq!(bytes.len(), file_layout(&m).unwrap().total_bytes);
            let back = read_pocket(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(write_pocket(&back).unwrap(), bytes);
            if shared {
                assert!(Arc::ptr_eq(&back.layers[0].codebook, &back.layers[2].codebook));
            }
        }
    }

    #[test]
    fn shared_groups_are_stored_once() {
        let a = file_layout(&sample_model(true)).unwrap();
        let b = file_layout(&sample_model(false)).unwrap();
        assert_eq!(a.index_bits, b.index_bits);
        assert_eq!(3 * a.codebook_bits, b.codebook_bits);
        assert!(a.total_bytes < b.total_bytes);
    }

    #[test]
    fn header_errors() {
        let bytes = write_pocket(&sample_model(false)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_pocket(&bad), Err(FormatError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_pocket(&bad), Err(FormatError::BadVersion(9))));
        assert!(matches!(read_pocket(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated(_))));
        assert!(matches!(read_pocket(&bytes[..3]), Err(FormatError::BadMagic(_))));
        assert!(matches!(read_pocket(&[]), Err(FormatError::BadMagic([0, 0, 0, 0]))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_pocket(&long), Err(FormatError::Trailing(1))));
        let mut flags = bytes.clone();
        flags[HEADER_LEN + 16] = 0xC0;
        assert!(matches!(read_pocket(&flags), Err(FormatError::BadFlags(_))));
    }

    #[test]
    fn truncation_anywhere_is_an_error() {
        let bytes = write_pocket(&sample_model(true)).unwrap();
        for cut in 0..bytes.len() {
            assert!(read_pocket(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }
}
