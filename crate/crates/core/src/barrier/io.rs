//! Binary container for grid fields and cell masks.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "HJPF"                        magic
//! u32 version                   currently 1
//! u8  payload kind              0 = f64 values, 1 = one byte per cell mask
//! [u8; 3]                       reserved, zero
//! u32 n                         number of axes
//! n x f64 lo, n x f64 hi, n x u64 shape
//! u32 entries, then per entry: u32 len + UTF-8 key, u32 len + UTF-8 value
//! payload                       row-major, last axis fastest
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{CellMask, Grid, GridError, ScalarField};

pub const MAGIC: [u8; 4] = *b"HJPF";
pub const VERSION: u32 = 1;

const KIND_VALUES: u8 = 0;
const KIND_MASK: u8 = 1;
const MAX_AXES: u32 = 32;
const MAX_STRING: u32 = 1 << 20;
const MAX_ENTRIES: u32 = 1 << 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("corrupt field file at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("unsupported field file version {found} (this build reads version {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("shape {shape:?} overflows the addressable cell count")]
    ShapeOverflow { shape: Vec<u64> },
    #[error("expected a {expected} payload, found {found}")]
    WrongPayload { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Values(Vec<f64>),
    Mask(Vec<bool>),
}

impl Payload {
    fn kind_name(&self) -> &'static str {
        match self {
            Payload::Values(_) => "values",
            Payload::Mask(_) => "mask",
        }
    }
}

/// Decoded file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub grid: Arc<Grid>,
    pub metadata: BTreeMap<String, String>,
    pub payload: Payload,
}

impl FieldFile {
    pub fn from_field(field: &ScalarField, metadata: BTreeMap<String, String>) -> Self {
        Self { grid: field.grid().clone(), metadata, payload: Payload::Values(field.values().to_vec()) }
    }

    pub fn from_mask(mask: &CellMask, metadata: BTreeMap<String, String>) -> Self {
        Self { grid: mask.grid().clone(), metadata, payload: Payload::Mask(mask.cells().to_vec()) }
    }

    pub fn into_field(self) -> Result<ScalarField, FormatError> {
        match self.payload {
            Payload::Values(v) => Ok(ScalarField::new(self.grid, v)?),
            other => Err(FormatError::WrongPayload { expected: "values", found: other.kind_name() }),
        }
    }

    pub fn into_mask(self) -> Result<CellMask, FormatError> {
        match self.payload {
            Payload::Mask(m) => Ok(CellMask::new(self.grid, m)?),
            other => Err(FormatError::WrongPayload { expected: "mask", found: other.kind_name() }),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FormatError> {
        let g = &self.grid;
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let kind = match self.payload {
            Payload::Values(_) => KIND_VALUES,
            Payload::Mask(_) => KIND_MASK,
        };
        w.write_all(&[kind, 0, 0, 0])?;
        w.write_all(&(g.ndim() as u32).to_le_bytes())?;
        for v in g.lo().iter().chain(g.hi()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for &s in g.shape() {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        for (k, v) in &self.metadata {
            for s in [k, v] {
                w.write_all(&(s.len() as u32).to_le_bytes())?;
                w.write_all(s.as_bytes())?;
            }
        }
        match &self.payload {
            Payload::Values(values) => {
                for v in values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Payload::Mask(cells) => {
                let bytes: Vec<u8> = cells.iter().map(|&c| c as u8).collect();
                w.write_all(&bytes)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, FormatError> {
        let mut r = Counting { inner: r, offset: 0 };
        let magic: [u8; 4] = r.array("magic")?;
        if magic != MAGIC {
            return Err(r.corrupt(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion { found: version });
        }
        let at = r.offset;
        let [kind, reserved @ ..]: [u8; 4] = r.array("payload kind")?;
        if kind > KIND_MASK {
            return Err(r.corrupt(at, format!("unknown payload kind {kind}")));
        }
        if reserved != [0; 3] {
            return Err(r.corrupt(at + 1, "reserved bytes are not zero".into()));
        }
        let at = r.offset;
        let n = r.u32("axis count")?;
        if n == 0 || n > MAX_AXES {
            return Err(r.corrupt(at, format!("axis count {n} outside 1..={MAX_AXES}")));
        }
        let n = n as usize;
        let mut bounds = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            bounds.push(r.f64("bounds")?);
        }
        let hi = bounds.split_off(n);
        let lo = bounds;
        let mut shape64 = Vec::with_capacity(n);
        for _ in 0..n {
            shape64.push(r.u64("shape")?);
        }
        let shape: Vec<usize> = shape64
            .iter()
            .map(|&s| usize::try_from(s).ok())
            .collect::<Option<_>>()
            .ok_or_else(|| FormatError::ShapeOverflow { shape: shape64.clone() })?;
        let cells = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .filter(|&c| c.checked_mul(8).is_some())
            .ok_or_else(|| FormatError::ShapeOverflow { shape: shape64.clone() })?;
        let header_end = r.offset;
        let grid = Grid::new(lo, hi, shape).map_err(|e| match e {
            GridError::CapacityExceeded { .. } => FormatError::ShapeOverflow { shape: shape64.clone() },
            other => r.corrupt(header_end, format!("invalid grid: {other}")),
        })?;

        let at = r.offset;
        let entries = r.u32("metadata count")?;
        if entries > MAX_ENTRIES {
            return Err(r.corrupt(at, format!("{entries} metadata entries")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..entries {
            let key = r.string()?;
            let value = r.string()?;
            metadata.insert(key, value);
        }

        let payload = if kind == KIND_VALUES {
            let mut values = Vec::with_capacity(cells.min(1 << 20));
            for _ in 0..cells {
                values.push(r.f64("payload")?);
            }
            Payload::Values(values)
        } else {
            let mut cells_out = Vec::with_capacity(cells.min(1 << 20));
            for _ in 0..cells {
                let at = r.offset;
                let [b]: [u8; 1] = r.array("payload")?;
                if b > 1 {
                    return Err(r.corrupt(at, format!("mask byte {b} is neither 0 nor 1")));
                }
                cells_out.push(b == 1);
            }
            Payload::Mask(cells_out)
        };
        let mut extra = [0u8; 1];
        if r.inner.read(&mut extra)? != 0 {
            return Err(r.corrupt(r.offset, "trailing bytes after payload".into()));
        }
        Ok(Self { grid: Arc::new(grid), metadata, payload })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub fn save_field(field: &ScalarField, path: impl AsRef<Path>) -> Result<(), FormatError> {
    FieldFile::from_field(field, BTreeMap::new()).save(path)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<ScalarField, FormatError> {
    FieldFile::load(path)?.into_field()
}

pub fn save_mask(mask: &CellMask, path: impl AsRef<Path>) -> Result<(), FormatError> {
    FieldFile::from_mask(mask, BTreeMap::new()).save(path)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<CellMask, FormatError> {
    FieldFile::load(path)?.into_mask()
}

/// Reader that remembers how many bytes it has consumed.
struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn corrupt(&self, offset: u64, reason: String) -> FormatError {
        FormatError::Corrupt { offset, reason }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], FormatError> {
        let mut buf = [0u8; N];
        let mut filled = 0;
        while filled < N {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(self.corrupt(self.offset + filled as u64, format!("truncated while reading {what}")));
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self) -> Result<String, FormatError> {
        let at = self.offset;
        let len = self.u32("metadata length")?;
        if len > MAX_STRING {
            return Err(self.corrupt(at, format!("metadata string of {len} bytes")));
        }
        let start = self.offset;
        let mut bytes = Vec::with_capacity(len as usize);
        for _ in 0..len {
            let [b]: [u8; 1] = self.array("metadata")?;
            bytes.push(b);
        }
        String::from_utf8(bytes).map_err(|_| self.corrupt(start, "metadata is not UTF-8".into()))
    }
}
