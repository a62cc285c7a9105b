//! Bags of local feature vectors and their binary file format.
//!
//! Layout (little endian): magic `DSC1`, `dim: u32`, `count: u64`, then
//! `count x dim` f32 values, then `count x (x, y, scale)` f32 triples.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Where a local descriptor was computed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Geometry {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f64>,
    geometry: Vec<Geometry>,
}

const MAGIC: &[u8; 4] = b"DSC1";

impl DescriptorSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            geometry: Vec::new(),
        }
    }

    /// Builds a set from row-major data; geometry defaults to the origin.
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimMismatch {
                expected: dim,
                found: data.len(),
            });
        }
        let n = data.len() / dim;
        Ok(Self {
            dim,
            data,
            geometry: vec![Geometry::default(); n],
        })
    }

    pub fn push(&mut self, vector: &[f64], geometry: Geometry) {
        assert_eq!(vector.len(), self.dim, "descriptor length");
        self.data.extend_from_slice(vector);
        self.geometry.push(geometry);
    }

    pub fn extend(&mut self, other: &DescriptorSet) {
        assert_eq!(self.dim, other.dim);
        self.data.extend_from_slice(&other.data);
        self.geometry.extend_from_slice(&other.geometry);
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn geometry(&self) -> &[Geometry] {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.dim), &self.data).expect("consistent shape")
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for g in &self.geometry {
            for v in [g.x, g.y, g.scale] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Container("not a descriptor file".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut read_f32 = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut b4)?;
            Ok(f32::from_le_bytes(b4) as f64)
        };
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            data.push(read_f32(&mut r)?);
        }
        let mut geometry = Vec::with_capacity(count);
        for _ in 0..count {
            geometry.push(Geometry {
                x: read_f32(&mut r)?,
                y: read_f32(&mut r)?,
                scale: read_f32(&mut r)?,
            });
        }
        Ok(Self { dim, data, geometry })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
