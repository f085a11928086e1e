//! On-disk formats: adapter binaries, registry manifest, backbone and
//! reference JSON.
//!
//! Adapter file layout (little-endian):
//!
//! ```text
//! "CHAD"  u16 version  u16 id_len  id (UTF-8)  u16 rank  u16 layer_count
//! per layer: u16 layer_index  u32 d_out  u32 d_in  B (d_out·r f32)  A (r·d_in f32)
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Factors are stored in single precision, so a round trip is bit-exact for
//! factors that are already `f32`-representable (see [`quantize`]).

use std::path::Path;

use charcom_core::backbone::{BackboneParams, FeatureFrame, ADAPTED_LAYERS};
use charcom_core::lowrank::{DenseMatrix, LowRankUpdate};
use charcom_core::promptc::CharacterCard;
use charcom_core::trainer::{AdapterWeights, TrainReport};
use charcom_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"CHAD";
pub const VERSION: u16 = 1;
pub const LAYER_HEADER_BYTES: usize = 10;

/// Size in bytes of the fixed part before the first layer.
pub fn header_bytes(id: &str) -> usize {
    4 + 2 + 2 + id.len() + 2 + 2
}

pub fn encoded_len(a: &AdapterWeights) -> usize {
    header_bytes(&a.character_id)
        + a.layers.iter().map(|l| LAYER_HEADER_BYTES + 4 * (l.d_out() * l.rank() + l.rank() * l.d_in())).sum::<usize>()
        + 4
}

/// Round every factor entry to the nearest `f32`.
pub fn quantize(a: &AdapterWeights) -> Result<AdapterWeights> {
    let layers = a
        .layers
        .iter()
        .map(|l| {
            let q = |m: &DenseMatrix| DenseMatrix::new(m.rows(), m.cols(), m.data().iter().map(|&v| v as f32 as f64).collect());
            LowRankUpdate::new(q(l.b_factor())?, q(l.a_factor())?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdapterWeights { layers, ..a.clone() })
}

pub fn encode_adapter(a: &AdapterWeights) -> Result<Vec<u8>> {
    let id = a.character_id.as_bytes();
    let small = |v: usize, what: &str| u16::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u16")));
    let mut out = Vec::with_capacity(encoded_len(a));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&small(id.len(), "id length")?.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&small(a.rank, "rank")?.to_le_bytes());
    out.extend_from_slice(&small(a.layers.len(), "layer count")?.to_le_bytes());
    for (i, l) in a.layers.iter().enumerate() {
        if l.rank() != a.rank {
            return Err(Error::InvalidArgument(format!("layer {i} has rank {} but the adapter has rank {}", l.rank(), a.rank)));
        }
        let index = ADAPTED_LAYERS.get(i).copied().unwrap_or(i);
        out.extend_from_slice(&small(index, "layer index")?.to_le_bytes());
        for d in [l.d_out(), l.d_in()] {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in l.b_factor().data().iter().chain(l.a_factor().data()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos, message: format!("truncated while reading {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DenseMatrix> {
        let start = self.pos;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or(Error::Format {
            offset: start,
            message: format!("{what} dimensions overflow"),
        })?;
        let raw = self.take(n, what)?;
        let data: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format { offset: start + 4 * i, message: format!("non-finite value in {what}") });
        }
        DenseMatrix::new(rows, cols, data).map_err(|e| Error::Format { offset: start, message: e.to_string() })
    }
}

/// Parse an adapter file. Any defect yields [`Error::Format`] carrying the
/// byte offset where it was detected.
pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterWeights> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic".into() });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let id_len = r.u16("id length")? as usize;
    let id_at = r.pos;
    let character_id = std::str::from_utf8(r.take(id_len, "character id")?)
        .map_err(|_| Error::Format { offset: id_at, message: "character id is not UTF-8".into() })?
        .to_string();
    let rank_at = r.pos;
    let rank = r.u16("rank")? as usize;
    if rank == 0 {
        return Err(Error::Format { offset: rank_at, message: "rank 0".into() });
    }
    let count = r.u16("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let at = r.pos;
        let index = r.u16("layer index")? as usize;
        let expected = ADAPTED_LAYERS.get(i).copied().unwrap_or(i);
        if index != expected {
            return Err(Error::Format { offset: at, message: format!("layer {i} has index {index}, expected {expected}") });
        }
        let d_out = r.u32("d_out")? as usize;
        let d_in = r.u32("d_in")? as usize;
        if d_out == 0 || d_in == 0 {
            return Err(Error::Format { offset: at, message: "zero layer dimension".into() });
        }
        let b = r.matrix(d_out, rank, "B factor")?;
        let a = r.matrix(rank, d_in, "A factor")?;
        layers.push(LowRankUpdate::new(b, a).map_err(|e| Error::Format { offset: at, message: e.to_string() })?);
    }
    let crc_at = r.pos;
    let stored = r.u32("checksum")?;
    if stored != crc32fast::hash(&bytes[..crc_at]) {
        return Err(Error::Format { offset: crc_at, message: "checksum mismatch".into() });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos, message: "trailing bytes".into() });
    }
    Ok(AdapterWeights { character_id, layers, rank, report: TrainReport { updates_applied: 0, losses: Vec::new() } })
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::NotFound(format!("{} does not exist", path.display()))
    } else {
        Error::InvalidArgument(format!("{}: {e}", path.display()))
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

pub fn save_adapter(a: &AdapterWeights, path: &Path) -> Result<()> {
    write_file(path, &encode_adapter(a)?)
}

pub fn load_adapter(path: &Path) -> Result<AdapterWeights> {
    decode_adapter(&read_file(path)?)
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Format { offset: 0, message: format!("line {} column {}: {e}", e.line(), e.column()) }
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_file(path, text.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(json_error)
}

pub fn save_backbone(params: &BackboneParams, path: &Path) -> Result<()> {
    save_json(params, path)
}

pub fn load_backbone(path: &Path) -> Result<BackboneParams> {
    let params: BackboneParams = load_json(path)?;
    params.validate().map_err(|e| Error::Format { offset: 0, message: e.to_string() })?;
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub character_id: String,
    pub trigger: String,
    pub attributes: String,
    pub adapter_path: String,
    pub reference_path: String,
}

/// Cards from a manifest. Paths are relative to `base`; each card's anchor
/// is the normalised mean of its references.
pub fn load_registry(manifest: &Path) -> Result<(Vec<CharacterCard>, Vec<ManifestEntry>)> {
    let entries: Vec<ManifestEntry> = load_json(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut cards = Vec::with_capacity(entries.len());
    for e in &entries {
        let refs: Vec<Vec<f64>> = load_json(&base.join(&e.reference_path))?;
        if refs.is_empty() {
            return Err(Error::InvalidArgument(format!("no references for '{}'", e.character_id)));
        }
        let d = refs[0].len();
        let mut mean = vec![0.0; d];
        for r in &refs {
            if r.len() != d {
                return Err(Error::Format { offset: 0, message: format!("references of '{}' differ in length", e.character_id) });
            }
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        cards.push(CharacterCard {
            character_id: e.character_id.clone(),
            trigger: e.trigger.clone(),
            attributes: e.attributes.clone(),
            references: refs.into_iter().map(FeatureFrame::new).collect(),
            anchor: mean.into_iter().map(|v| v / n).collect(),
        });
    }
    Ok((cards, entries))
}
