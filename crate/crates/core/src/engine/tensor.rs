use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes opening every serialized tensor.
pub const TENSOR_MAGIC: &[u8; 4] = b"DCT1";

/// Extent of a 4-D tensor in (batch, channels, height, width) order.
///
/// Convolution kernels reuse the same layout as (out, in, k, k).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Dims {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn scalar() -> Self {
        Dims::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements in one (height, width) plane.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements in one batch sample.
    pub const fn sample(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense 4-D array of `f32` values in row-major (NCHW) layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.numel()],
        }
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.numel()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor4::full(Dims::scalar(), value)
    }

    pub fn from_vec(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.numel() {
            return Err(Error::shape(format!(
                "{} values do not fill dims {dims}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    /// Builds a single-sample, single-channel tensor from a `height x width` map.
    pub fn from_map(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Tensor4::from_vec(Dims::new(1, 1, height, width), data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims.channels + c) * self.dims.height + y) * self.dims.width + x
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.offset(b, c, y, x);
        self.data[i] = value;
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::usage(format!(
                "item() on a tensor with dims {}",
                self.dims
            ))),
        }
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "cannot add {} into {}",
                other.dims, self.dims
            )));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// Slice of one batch sample.
    pub fn sample(&self, b: usize) -> &[f32] {
        let n = self.dims.sample();
        &self.data[b * n..(b + 1) * n]
    }

    /// Stacks single-sample tensors of equal (C, H, W) into a batch.
    pub fn stack(items: &[&Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::usage("cannot stack an empty list"))?;
        let inner = first.dims;
        let mut data = Vec::with_capacity(inner.numel() * items.len());
        let mut batch = 0;
        for t in items {
            let d = t.dims;
            if (d.channels, d.height, d.width) != (inner.channels, inner.height, inner.width) {
                return Err(Error::shape(format!("cannot stack {d} with {inner}")));
            }
            batch += d.batch;
            data.extend_from_slice(&t.data);
        }
        Tensor4::from_vec(
            Dims::new(batch, inner.channels, inner.height, inner.width),
            data,
        )
    }

    /// Serializes as `DCT1`, four little-endian `u64` dims, then little-endian `f32` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        for d in self.dims.as_array() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor4> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {:?}, expected \"DCT1\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *d = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::Format("tensor dim overflows usize".into()))?;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        let n = dims
            .batch
            .checked_mul(dims.channels)
            .and_then(|v| v.checked_mul(dims.height))
            .and_then(|v| v.checked_mul(dims.width))
            .ok_or_else(|| Error::Format(format!("tensor dims {dims} overflow")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor4 { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor4> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor4::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor4::from_vec(Dims::new(1, 2, 2, 2), vec![0.0; 7]).is_err());
    }

    #[test]
    fn header_layout() {
        let t = Tensor4::from_vec(Dims::new(1, 1, 1, 2), vec![1.0, -2.5]).unwrap();
        let mut bytes = Vec::new();
        t.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"DCT1");
        assert_eq!(bytes.len(), 4 + 32 + 8);
        assert_eq!(&bytes[4..12], &1u64.to_le_bytes());
        assert_eq!(&bytes[28..36], &2u64.to_le_bytes());
        assert_eq!(&bytes[36..40], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[40..44], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let err = Tensor4::read_from(&b"XXXX"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_payload_fails() {
        let t = Tensor4::full(Dims::new(1, 1, 2, 2), 3.0);
        let mut bytes = Vec::new();
        t.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(Tensor4::read_from(bytes.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(
            dims in (1usize..3, 1usize..4, 1usize..6, 1usize..6),
            seed in any::<u32>(),
        ) {
            let dims = Dims::new(dims.0, dims.1, dims.2, dims.3);
            let data: Vec<f32> = (0..dims.numel())
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0xbfff_ffff))
                .collect();
            let t = Tensor4::from_vec(dims, data).unwrap();
            let mut bytes = Vec::new();
            t.write_to(&mut bytes).unwrap();
            let back = Tensor4::read_from(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
