//! Dense row-major tensors and the XTEN binary record.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type tag stored in XTEN records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element of a tensor.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Converts a small literal into `T`.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// An n-dimensional array. A rank-0 shape `[]` holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} elements but data has {}", n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Adds `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("accumulate", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

const XTEN_MAGIC: &[u8; 4] = b"XTEN";
const XTEN_VERSION: u8 = 1;

impl<T: Scalar> Tensor<T> {
    /// Encodes as an XTEN record: magic, version, dtype, rank, u32 dims, raw LE data.
    pub fn to_xten(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.rank() + self.len() * T::DTYPE.size());
        out.extend_from_slice(XTEN_MAGIC);
        out.push(XTEN_VERSION);
        out.push(T::DTYPE.code());
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_xten<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.to_xten())
    }

    /// Reads one XTEN record from the front of `r`.
    pub fn read_xten<R: Read>(r: &mut R) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: "<xten>".into(),
            reason,
        };
        let mut head = [0u8; 7];
        r.read_exact(&mut head)
            .map_err(|e| corrupt(format!("truncated header: {e}")))?;
        if &head[..4] != XTEN_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        if head[4] != XTEN_VERSION {
            return Err(Error::Version {
                found: head[4] as u32,
                expected: XTEN_VERSION as u32,
            });
        }
        let dtype =
            DType::from_code(head[5]).ok_or_else(|| corrupt(format!("dtype code {}", head[5])))?;
        if dtype != T::DTYPE {
            return Err(Error::DType {
                found: dtype.name(),
                expected: T::DTYPE.name(),
            });
        }
        let rank = head[6] as usize;
        let mut dims = vec![0u8; 4 * rank];
        r.read_exact(&mut dims)
            .map_err(|e| corrupt(format!("truncated dims: {e}")))?;
        let shape: Vec<usize> = dims
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * dtype.size()];
        r.read_exact(&mut raw)
            .map_err(|e| corrupt(format!("truncated data: {e}")))?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn xten_header_layout() {
        let t = Tensor::<f64>::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_xten();
        assert_eq!(&bytes[..4], b"XTEN");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &1u32.to_le_bytes());
        assert_eq!(&bytes[15..23], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 7 + 8 + 16);
    }

    #[test]
    fn xten_rejects_wrong_dtype_and_truncation() {
        let t = Tensor::<f32>::ones(&[3]);
        let bytes = t.to_xten();
        assert!(matches!(
            Tensor::<f64>::read_xten(&mut bytes.as_slice()),
            Err(Error::DType { .. })
        ));
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(
            Tensor::<f32>::read_xten(&mut &cut[..]),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn scalar_tensor_has_empty_shape() {
        let s = Tensor::scalar(3.0f32);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 3.0);
        assert!(s.is_scalar());
    }
}
