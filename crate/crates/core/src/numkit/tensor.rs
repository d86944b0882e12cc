use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([b, c, h, w])
    }

    /// A matrix embedded as a degenerate (1, 1, rows, cols) shape.
    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape([1, 1, rows, cols])
    }

    pub fn b(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements per batch entry.
    pub fn sample_len(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }

    pub fn with_batch(&self, b: usize) -> Self {
        Shape([b, self.0[1], self.0[2], self.0[3]])
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }

    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.0[1] + c) * self.0[2] + i) * self.0[3] + j
    }

    pub fn unravel(&self, mut flat: usize) -> [usize; 4] {
        let j = flat % self.0[3];
        flat /= self.0[3];
        let i = flat % self.0[2];
        flat /= self.0[2];
        let c = flat % self.0[1];
        [flat / self.0[1], c, i, j]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, c, h, w] = self.0;
        write!(f, "({b}, {c}, {h}, {w})")
    }
}

/// Dense rank-4 array of `f64` in row-major (B, C, H, W) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Format(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let data = (0..shape.numel()).map(|k| f(shape.unravel(k))).collect();
        Tensor { shape, data }
    }

    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.shape.offset(b, c, i, j)]
    }

    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: f64) {
        let k = self.shape.offset(b, c, i, j);
        self.data[k] = v;
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape("zip_map", other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Copy out batch entries `start..start + len`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Tensor {
        let n = self.shape.sample_len();
        Tensor {
            shape: self.shape.with_batch(len),
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }

    /// Stack tensors along the batch axis. All parts share C, H, W.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat_batch of zero tensors".into()))?;
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if p.shape.with_batch(1) != first.shape.with_batch(1) {
                return Err(Error::ShapeMismatch {
                    op: "concat_batch",
                    left: first.shape,
                    right: p.shape,
                });
            }
            b += p.shape.b();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: first.shape.with_batch(b),
            data,
        })
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: shape,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_round_trip() {
        let s = Shape::new(2, 3, 4, 5);
        for k in 0..s.numel() {
            let [b, c, i, j] = s.unravel(k);
            assert_eq!(s.offset(b, c, i, j), k);
        }
    }

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn finiteness_reports_index() {
        let t = Tensor::new(Shape::new(1, 1, 1, 3), vec![0.0, f64::NAN, 1.0]).unwrap();
        match t.check_finite("probe") {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
