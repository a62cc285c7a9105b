//! The `STYM` model container shared by every trained artifact.
//!
//! Layout (little endian): magic `STYM`, `version: u16`, `kind: u8`,
//! `K: u32`, `D: u32`, then f64 payload values until end of file. How the
//! payload splits into rows is fixed per kind.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STYM";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelKind {
    Kmeans = 1,
    Gmm = 2,
    ColorCodebook = 3,
    DdPartition = 4,
    Svm = 5,
    Ova = 6,
    Matrix = 7,
}

impl ModelKind {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => ModelKind::Kmeans,
            2 => ModelKind::Gmm,
            3 => ModelKind::ColorCodebook,
            4 => ModelKind::DdPartition,
            5 => ModelKind::Svm,
            6 => ModelKind::Ova,
            7 => ModelKind::Matrix,
            other => return Err(Error::Container(format!("unknown kind tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ModelKind,
    pub k: u32,
    pub d: u32,
    pub payload: Vec<f64>,
}

impl Container {
    pub fn new(kind: ModelKind, k: usize, d: usize, payload: Vec<f64>) -> Self {
        Self {
            kind,
            k: k as u32,
            d: d as u32,
            payload,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.kind as u8])?;
        w.write_all(&self.k.to_le_bytes())?;
        w.write_all(&self.d.to_le_bytes())?;
        for v in &self.payload {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 15 || &bytes[..4] != MAGIC {
            return Err(Error::Container("missing STYM header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let kind = ModelKind::from_tag(bytes[6])?;
        let k = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
        let d = u32::from_le_bytes(bytes[11..15].try_into().unwrap());
        let body = &bytes[15..];
        if body.len() % 8 != 0 {
            return Err(Error::Container("payload is not a whole number of f64 values".into()));
        }
        let payload = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { kind, k, d, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingModel(path.display().to_string()));
        }
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn expect(self, kind: ModelKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Container(format!("expected {kind:?}, found {:?}", self.kind)));
        }
        Ok(self)
    }

    pub fn expect_len(&self, len: usize) -> Result<()> {
        if self.payload.len() != len {
            return Err(Error::Container(format!(
                "{:?} payload has {} values, expected {len}",
                self.kind,
                self.payload.len()
            )));
        }
        Ok(())
    }
}
