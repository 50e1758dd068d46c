//! Dense row-major `f64` tensors and the `TSR1` snapshot format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &[u8; 4] = b"TSR1";
const MAX_RANK: usize = 4;

/// Dense n-dimensional array, order at most 4, laid out N×C×H×W by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::shape(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > MAX_RANK {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extents as (N, C, H, W); rank-3 tensors are read as C×H×W with N = 1.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            [c, h, w] => Ok((1, c, h, w)),
            _ => Err(Error::shape(format!("expected rank 3 or 4, got {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a snapshot; `origin` names the source in error messages.
    pub fn from_snapshot_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 8 || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("missing TSR1 magic"));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if rank > MAX_RANK {
            return Err(bad("rank exceeds 4"));
        }
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let shape: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        if bytes.len() != header + 8 * n {
            return Err(bad(&format!(
                "expected {} value bytes for shape {shape:?}, found {}",
                8 * n,
                bytes.len() - header
            )));
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_snapshot_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot_bytes(&bytes, path)
    }
}

/// Output coordinate → (lower index, upper index, upper weight) for bilinear
/// resampling along one axis. Output pixel `o` samples source coordinate
/// `(o + 0.5) * in_len / out_len - 0.5`, clamped to the valid range.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    let last = (in_len - 1) as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of an `h×w` plane to `out_h×out_w`.
pub fn resize_bilinear(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn snapshot_layout_is_little_endian() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_snapshot_bytes();
        assert_eq!(&bytes[..4], b"TSR1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn truncated_snapshot_is_rejected() {
        let t = Tensor::full(&[2, 2], 3.0);
        let bytes = t.to_snapshot_bytes();
        let err = Tensor::from_snapshot_bytes(&bytes[..bytes.len() - 3], Path::new("w.tsr"));
        assert!(err.unwrap_err().to_string().contains("w.tsr"));
    }

    #[test]
    fn snapshot_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsr");
        let t = Tensor::from_fn(&[1, 2, 3, 4], |i| (i as f64).sin());
        t.write_snapshot(&path).unwrap();
        assert_eq!(Tensor::read_snapshot(&path).unwrap(), t);
    }

    #[test]
    fn resize_identity_when_sizes_match() {
        let plane: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        assert_eq!(resize_bilinear(&plane, 3, 4, 3, 4), plane);
    }

    proptest::proptest! {
        #[test]
        fn snapshot_round_trip_is_bitwise(
            shape in proptest::collection::vec(1usize..4, 0..=4),
            seed in proptest::prelude::any::<u64>(),
        ) {
            let t = Tensor::from_fn(&shape, |i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2));
            let back = Tensor::from_snapshot_bytes(&t.to_snapshot_bytes(), Path::new("x")).unwrap();
            proptest::prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
