//! Dense row-major tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor: a shape plus flat row-major storage.
///
/// Scalars are stored with shape `[1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but panics on a shape/length mismatch.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&x| T::from_f64_lossy(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts between precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }

    /// Rotates the trailing two (spatial) axes by `quarter_turns` × 90°
    /// counter-clockwise. Pure index permutation.
    pub fn rot90(&self, quarter_turns: usize) -> Self {
        assert!(self.rank() >= 2, "rot90 needs at least two axes, got {:?}", self.shape);
        let r = self.rank();
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let k = quarter_turns % 4;
        let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
        let mut shape = self.shape.clone();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let planes = self.data.len() / (h * w);
        let mut out = Vec::with_capacity(self.data.len());
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    out.push(src[rot90_source(k, h, w, i, j)]);
                }
            }
        }
        Tensor { shape, data: out }
    }
}

/// Flat source index in an `h × w` plane for output position `(i, j)` after
/// `k` counter-clockwise quarter turns.
#[inline]
pub(crate) fn rot90_source(k: usize, h: usize, w: usize, i: usize, j: usize) -> usize {
    match k {
        0 => i * w + j,
        1 => j * w + (w - 1 - i),
        2 => (h - 1 - i) * w + (w - 1 - j),
        3 => (h - 1 - j) * w + i,
        _ => unreachable!(),
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn rot90_matches_numpy_convention() {
        let t = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(t.rot90(1).data(), &[2., 4., 1., 3.]);
        assert_eq!(t.rot90(2).data(), &[4., 3., 2., 1.]);
        assert_eq!(t.rot90(3).data(), &[3., 1., 4., 2.]);
    }

    #[test]
    fn rot90_rectangular_swaps_axes() {
        let t = Tensor::<f64>::from_f64(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]);
        let r = t.rot90(1);
        assert_eq!(r.shape(), &[1, 3, 2]);
        assert_eq!(r.data(), &[3., 6., 2., 5., 1., 4.]);
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let data: Vec<f64> = (0..27).map(|x| x as f64).collect();
        let t = Tensor::<f64>::from_f64(&[3, 3, 3], &data);
        let mut r = t.clone();
        for _ in 0..4 {
            r = r.rot90(1);
        }
        assert_eq!(r, t);
        assert_eq!(t.rot90(0), t);
    }
}
