//! Minimal binary array container for experiment artifacts.
//!
//! Layout (all little-endian):
//! magic `L96A` | version u32 | element tag u32 (f64 = 1) | rank u32 |
//! dims u64 x rank | row-major f64 payload.

use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"L96A";
pub const VERSION: u32 = 1;
pub const TAG_F64: u32 = 1;

#[derive(Debug, Error)]
pub enum ArrayFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unsupported element tag {0}")]
    BadTag(u32),
    #[error("dims {dims:?} inconsistent with payload of {len} elements")]
    DimMismatch { dims: Vec<u64>, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl ArrayFile {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self, ArrayFileError> {
        let expect: u64 = dims.iter().product();
        if expect != data.len() as u64 {
            return Err(ArrayFileError::DimMismatch { dims, len: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ArrayFileError> {
        let r = rows.len() as u64;
        let c = rows.first().map_or(0, |v| v.len()) as u64;
        let data: Vec<f64> = rows.iter().flat_map(|v| v.iter().copied()).collect();
        Self::new(vec![r, c], data)
    }

    /// Rank-2 view as owned rows.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        assert_eq!(self.dims.len(), 2, "rows() needs a rank-2 array");
        let c = self.dims[1] as usize;
        self.data.chunks(c).map(|ch| ch.to_vec()).collect()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), ArrayFileError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&TAG_F64.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self, ArrayFileError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ArrayFileError::BadMagic);
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(ArrayFileError::BadVersion(version));
        }
        r.read_exact(&mut u32buf)?;
        let tag = u32::from_le_bytes(u32buf);
        if tag != TAG_F64 {
            return Err(ArrayFileError::BadTag(tag));
        }
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut u64buf = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            dims.push(u64::from_le_bytes(u64buf));
        }
        let n: u64 = dims.iter().product();
        let mut data = Vec::with_capacity(n as usize);
        for _ in 0..n {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArrayFileError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArrayFileError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }
}
