//! Embedding stores and the `.cemb` binary format.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! magic "CEMB" | version u32 = 1 | modality u8 | normalized u8 | dim u32 | count u64
//! count x ( id_len u16 | id bytes (UTF-8) | dim x f32 )
//! ```
//!
//! Entry order is preserved on load and save; downstream rankings use it as
//! the tie-break order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const STORE_MAGIC: [u8; 4] = *b"CEMB";
pub const STORE_VERSION: u32 = 1;

/// Norms at or below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Allowed deviation from unit norm for stores flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    fn to_byte(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            other => Err(Error::Format(format!("unknown modality byte {other}"))),
        }
    }
}

/// Dot product of two equal-length slices, accumulated in 64-bit.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Euclidean norm accumulated in 64-bit.
pub fn norm_f64(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Scale `v` to unit norm. Returns `None` if the norm is at or below
/// [`DEGENERATE_NORM`].
pub fn normalize_vector(v: &[f32]) -> Option<Vec<f32>> {
    let norm = norm_f64(v);
    if norm <= DEGENERATE_NORM {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// An id-indexed set of fixed-dimension vectors of one modality.
///
/// Vectors are stored contiguously in entry order.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    modality: Modality,
    normalized: bool,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, modality: Modality) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("store dimension must be positive".into()));
        }
        if dim > u32::MAX as usize {
            return Err(Error::Format(format!("store dimension {dim} exceeds u32")));
        }
        Ok(Self {
            dim,
            modality,
            normalized: false,
            ids: Vec::new(),
            positions: HashMap::new(),
            data: Vec::new(),
        })
    }

    /// Append an entry, validating id and values.
    ///
    /// A store flagged as normalized also checks the unit-norm invariant.
    pub fn push(&mut self, id: impl Into<String>, values: &[f32]) -> Result<()> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Integrity("empty id".into()));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::Integrity(format!(
                "id of {} bytes exceeds 65535",
                id.len()
            )));
        }
        if values.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Integrity(format!(
                "non-finite value at coordinate {i} of {id:?}"
            )));
        }
        if self.normalized {
            check_unit_norm(&id, values)?;
        }
        if self.positions.contains_key(&id) {
            return Err(Error::Integrity(format!("duplicate id {id:?}")));
        }
        self.positions.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(values);
        Ok(())
    }

    /// Flag the store as normalized after checking every vector's norm.
    pub fn mark_normalized(&mut self) -> Result<()> {
        for (id, v) in self.iter() {
            check_unit_norm(id, v)?;
        }
        self.normalized = true;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Entry position of `id`, which is also its tie-break rank.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.vector_at(i))
    }

    /// Vector at entry position `i`. Panics if out of bounds.
    pub fn vector_at(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &[f32])> + '_ {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }

    /// A copy with every vector scaled to unit norm.
    pub fn l2_normalize(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for (id, v) in self.iter() {
            let n = normalize_vector(v).ok_or_else(|| Error::DegenerateVector(id.to_string()))?;
            data.extend_from_slice(&n);
        }
        Ok(Self {
            dim: self.dim,
            modality: self.modality,
            normalized: true,
            ids: self.ids.clone(),
            positions: self.positions.clone(),
            data,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        Self::read_from(BufReader::new(file))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != STORE_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected CEMB")));
        }
        let version = read_u32(&mut r)?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let modality = Modality::from_byte(read_u8(&mut r)?)?;
        let normalized = match read_u8(&mut r)? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad normalized flag {other}"))),
        };
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)?;

        let mut store = Self::new(dim, modality)?;
        let mut raw = vec![0u8; dim * 4];
        let mut values = vec![0f32; dim];
        for _ in 0..count {
            let id_len = read_u16(&mut r)? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id)
                .map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?;
            r.read_exact(&mut raw)?;
            for (dst, src) in values.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
            }
            store.push(id, &values)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        if normalized {
            store.mark_normalized()?;
        }
        Ok(store)
    }

    /// Write atomically: a temporary file in the target directory is renamed
    /// over `path` once fully written.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), |w| self.write_to(w))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&[self.modality.to_byte(), self.normalized as u8])?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (id, v) in self.iter() {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Bitwise equality of all fields, including float payloads.
impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.modality == other.modality
            && self.normalized == other.normalized
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_unit_norm(id: &str, v: &[f32]) -> Result<()> {
    let norm = norm_f64(v);
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::Integrity(format!(
            "{id:?} has norm {norm} in a normalized store"
        )));
    }
    Ok(())
}

pub(crate) fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
