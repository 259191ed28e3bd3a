//! Dense 2-D real grids and their little-endian binary file format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic tag of the grid file format.
pub const GRID_MAGIC: &[u8; 8] = b"SCARDMP1";

/// Row-major `H x W` grid of reals. Used for density maps (ground truth and
/// prediction) and for any exported 2-D array such as an attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

/// A non-negative grid whose sum is a head count.
pub type DensityMap = Grid;

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Grid {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("Grid::from_vec", height * width, values.len()));
        }
        Ok(Grid {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Grid {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(H, W)`.
    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `(y, x)` of the first maximal entry.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Grid {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn ensure_same_shape(&self, other: &Grid, context: &'static str) -> Result<()> {
        if self.resolution() != other.resolution() {
            return Err(Error::shape(
                context,
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    /// Serialize: magic, `u32` H, `u32` W, then `H * W` `f32` row-major, all
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != GRID_MAGIC {
            return Err(corrupt("missing SCARDMP1 header".into()));
        }
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = 16 + 4 * height * width;
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "expected {expected} bytes for a {height}x{width} grid, found {}",
                bytes.len()
            )));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Grid {
            height,
            width,
            values,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
