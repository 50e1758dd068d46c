//! Dense displacement fields and the Middlebury `.flo` format: magic float
//! 202021.25, i32 width, i32 height, then interleaved f32 (u, v) pairs in
//! row-major order, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;

/// Per-pixel displacement (pixels/frame) from one frame to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    /// Interleaved (u, v), row-major.
    pub uv: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField { height, width, uv: vec![0.0; 2 * height * width] }
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.uv[i], self.uv[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, u: f32, v: f32) {
        let i = 2 * (y * self.width + x);
        self.uv[i] = u;
        self.uv[i + 1] = v;
    }

    pub fn to_flo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.uv.len());
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for v in &self.uv {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_flo_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(origin, "truncated .flo header"));
        }
        let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
        if f32::from_le_bytes(word(0)) != FLO_MAGIC {
            return Err(Error::format(origin, "bad .flo magic"));
        }
        let (w, h) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
        if w <= 0 || h <= 0 {
            return Err(Error::format(origin, format!("invalid .flo extents {w}×{h}")));
        }
        let (w, h) = (w as usize, h as usize);
        let expected = 12 + 8 * w * h;
        if bytes.len() != expected {
            return Err(Error::format(origin, format!("expected {expected} bytes for {w}×{h} flow, found {}", bytes.len())));
        }
        let uv = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(FlowField { height: h, width: w, uv })
    }

    pub fn write_flo(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_flo_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_flo(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_flo_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut f = FlowField::zeros(2, 3);
        f.set(2, 1, 1.5, -2.0);
        let b = f.to_flo_bytes();
        assert_eq!(&b[..4], &202021.25f32.to_le_bytes());
        assert_eq!(&b[4..8], &3i32.to_le_bytes());
        assert_eq!(&b[8..12], &2i32.to_le_bytes());
        assert_eq!(b.len(), 12 + 2 * 3 * 8);
        let back = FlowField::from_flo_bytes(&b, Path::new("f.flo")).unwrap();
        assert_eq!(back.get(2, 1), (1.5, -2.0));
    }

    #[test]
    fn truncated_file_names_path() {
        let b = FlowField::zeros(4, 4).to_flo_bytes();
        let err = FlowField::from_flo_bytes(&b[..b.len() - 1], Path::new("clip_0/flow_3.flo")).unwrap_err();
        assert!(err.to_string().contains("clip_0/flow_3.flo"));
        assert!(FlowField::from_flo_bytes(&[0; 12], Path::new("x")).is_err());
    }
}
