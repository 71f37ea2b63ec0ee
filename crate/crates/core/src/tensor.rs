//! Dense row-major tensors of rank at most 4.
//!
//! Image tensors use the batch × channel × height × width layout throughout
//! the crate. The element type is generic so the same graph can be evaluated
//! in `f32` for training and in `f64` as a shadow for gradient checking.

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Floating point element type usable on a [`crate::autodiff::Tape`].
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(dims: Vec<usize>, data: Vec<F>) -> Result<Self> {
        validate_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, F::zero())
    }

    pub fn full(dims: &[usize], value: F) -> Self {
        validate_dims(dims).expect("invalid dims");
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        validate_dims(dims).expect("invalid dims");
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        validate_dims(&dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dims as `[b, c, h, w]`, or an error naming `op` when the rank is not 4.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.dims[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::shape(op, format!("expected rank 4, got {:?}", self.dims))),
        }
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims == other.dims
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn squared_norm(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Text dump: one line of space-separated dims, then one value per line.
    /// Values use the shortest representation that round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut out = self
            .dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push('\n');
        for v in &self.data {
            out.push_str(&format!("{v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty tensor dump".into()))?;
        let dims = header
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad dim `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map(F::from_f64)
                    .map_err(|_| Error::InvalidArgument(format!("bad value `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims, data)
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}[", self.dims)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(
            "tensor",
            format!("rank must be 1..={MAX_RANK}, got {}", dims.len()),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::shape("tensor", format!("non-positive dim in {dims:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn text_dump_round_trips_bits() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![0.1, -3.5e-8, 7.0, f32::MIN_POSITIVE]).unwrap();
        let back = Tensor::<f32>::from_text(&t.to_text()).unwrap();
        assert_eq!(t.dims(), back.dims());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(t.to_text().starts_with("2 2\n"));
    }

    #[test]
    fn cast_preserves_values() {
        let t = Tensor::<f32>::new(vec![3], vec![1.5, -2.25, 0.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data(), &[1.5, -2.25, 0.0]);
    }
}
