//! Dense row-major tensors, the [`Image`] raster type, and the PTF binary
//! tensor format.
//!
//! PTF layout (all little-endian): `b"PAET"`, version `u32 = 1`, `ndim: u32`,
//! `ndim` dims as `u32`, then `product(dims)` `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PTF_MAGIC: &[u8; 4] = b"PAET";
pub const PTF_VERSION: u32 = 1;
pub const MAX_DIMS: usize = 4;

/// Row-major tensor with up to four positive dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }
}

impl<T> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_DIMS {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..={MAX_DIMS}, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn map<U, F: FnMut(&T) -> U>(&self, f: F) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Tensor<f32> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|&v| v as f64)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(PTF_MAGIC)?;
        w.write_all(&PTF_VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads one PTF block from a stream. Truncation and bad headers map to
    /// [`Error::Corrupt`].
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "PTF magic")?;
        if &magic != PTF_MAGIC {
            return Err(Error::Corrupt(format!("bad PTF magic {magic:?}")));
        }
        let version = read_u32(r, "PTF version")?;
        if version != PTF_VERSION {
            return Err(Error::Corrupt(format!("unsupported PTF version {version}")));
        }
        let ndim = read_u32(r, "PTF rank")? as usize;
        if ndim == 0 || ndim > MAX_DIMS {
            return Err(Error::Corrupt(format!("PTF rank {ndim} out of range")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = read_u32(r, "PTF dim")? as usize;
            if d == 0 {
                return Err(Error::Corrupt("PTF zero dimension".into()));
            }
            dims.push(d);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt("PTF dims overflow".into()))?;
        let mut bytes = vec![0u8; n * 4];
        read_exact(r, &mut bytes, "PTF payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { dims, data })
    }
}

impl Tensor<f64> {
    /// Rounds to single precision.
    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|&v| v as f32)
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Corrupt(format!("truncated while reading {what}"))
        } else {
            Error::Corrupt(format!("{what}: {e}"))
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    t.write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let t = Tensor::read_from(&mut r)?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::Corrupt(format!(
            "{}: trailing bytes after PTF payload",
            path.display()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// An `H × W × C` raster with values in `[0, 1]` and `C ∈ {1, 3}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor<f32>);

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_tensor(Tensor::from_vec(&[height, width, channels], data)?)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_tensor(t: Tensor<f32>) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 {
            return Err(Error::Shape(format!("image must be rank 3, got {dims:?}")));
        }
        if dims[2] != 1 && dims[2] != 3 {
            return Err(Error::Shape(format!(
                "image must have 1 or 3 channels, got {}",
                dims[2]
            )));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("image value {v} outside [0, 1]")));
        }
        Ok(Image(t))
    }

    /// Like [`Image::from_tensor`] but clamps values into `[0, 1]`.
    pub fn from_tensor_clamped(mut t: Tensor<f32>) -> Result<Self> {
        for v in t.data_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::from_tensor(t)
    }

    pub fn height(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.0.data()[(y * self.width() + x) * self.channels() + c]
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

/// Binary `H × W` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Thresholds a single-channel image at `v > 0.5`.
    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::Shape("mask images must be single-channel".into()));
        }
        Mask::new(img.height(), img.width(), img.data().iter().map(|&v| v > 0.5).collect())
    }

    pub fn to_image(&self) -> Image {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Image::new(self.height, self.width, 1, data).expect("mask image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::from_vec(&[0, 3], Vec::<f32>::new()).is_err());
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.0f32]).is_err());
    }

    #[test]
    fn single_element_round_trip() {
        let t = Tensor::from_vec(&[1], vec![0.0f32]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 + 4);
        assert_eq!(Tensor::read_from(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn row_major_layout_on_disk() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PAET");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        let payload = &buf[20..];
        let second = f32::from_le_bytes(payload[4..8].try_into().unwrap());
        assert_eq!(second, 2.0);
        assert_eq!(t.offset(&[1, 0]), 3);
        assert_eq!(Tensor::read_from(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ptf");
        let t = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        assert!(matches!(
            Tensor::read_from(&mut bytes.as_slice()),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn image_invariants() {
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        let img = Image::new(2, 1, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(img.get(1, 0, 2), 0.5);
    }

    proptest! {
        #[test]
        fn ptf_round_trip_is_bit_identical(
            dims in proptest::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let n: usize = dims.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
            let t = Tensor::from_vec(&dims, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
