use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkit::{Shape, Tensor, Var};
use crate::params::Ctx;

use super::{zero_logdet, Bijection};

/// 2x2 space-to-channel rearrangement.
#[derive(Clone, Copy, Debug, Default)]
pub struct Squeeze;

fn squeezed_shape(s: Shape) -> Result<Shape> {
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return Err(Error::Config(format!("squeeze needs even spatial dims, got {s}")));
    }
    Ok(Shape::new(s.b(), 4 * s.c(), s.h() / 2, s.w() / 2))
}

/// For input shape `s`, the source offset of every squeezed output element:
/// `out[b, 4c + 2di + dj, i, j] = x[b, c, 2i + di, 2j + dj]`.
pub fn squeeze_index(s: Shape) -> Result<(Shape, Arc<[usize]>)> {
    let os = squeezed_shape(s)?;
    let index = (0..os.numel())
        .map(|k| {
            let [b, oc, i, j] = os.unravel(k);
            let (c, di, dj) = (oc / 4, (oc % 4) / 2, oc % 2);
            s.offset(b, c, 2 * i + di, 2 * j + dj)
        })
        .collect();
    Ok((os, index))
}

pub fn squeeze(x: &Tensor) -> Result<Tensor> {
    let (os, index) = squeeze_index(x.shape())?;
    Tensor::new(os, index.iter().map(|&k| x.data()[k]).collect())
}

pub fn unsqueeze(y: &Tensor) -> Result<Tensor> {
    let s = y.shape();
    if s.c() % 4 != 0 {
        return Err(Error::Config(format!("unsqueeze needs channels divisible by 4, got {s}")));
    }
    let xs = Shape::new(s.b(), s.c() / 4, 2 * s.h(), 2 * s.w());
    let (_, index) = squeeze_index(xs)?;
    let mut out = vec![0.0; xs.numel()];
    for (&k, &v) in index.iter().zip(y.data()) {
        out[k] = v;
    }
    Tensor::new(xs, out)
}

impl Bijection for Squeeze {
    fn forward(&self, ctx: &mut Ctx, x: Var, _cond: Option<Var>) -> Result<(Var, Var)> {
        let s = ctx.shape(x);
        let (os, index) = squeeze_index(s)?;
        let y = ctx.gather(x, os, index)?;
        let ld = zero_logdet(ctx, s.b())?;
        Ok((y, ld))
    }

    fn inverse(&self, ctx: &mut Ctx, y: Var, _cond: Option<Var>) -> Result<Var> {
        let s = ctx.shape(y);
        if s.c() % 4 != 0 {
            return Err(Error::Config(format!("unsqueeze needs channels divisible by 4, got {s}")));
        }
        let xs = Shape::new(s.b(), s.c() / 4, 2 * s.h(), 2 * s.w());
        let (_, index) = squeeze_index(xs)?;
        ctx.scatter(y, xs, index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_exact_inverse() {
        let x = Tensor::randn(Shape::new(2, 3, 4, 6), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let y = squeeze(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 12, 2, 3));
        assert_eq!(unsqueeze(&y).unwrap(), x);
        let ints = Tensor::from_fn(Shape::new(1, 2, 4, 4), |[_, c, i, j]| (c * 16 + i * 4 + j) as f64);
        assert_eq!(squeeze(&ints).unwrap().sum(), ints.sum());
        let one = squeeze(&Tensor::zeros(Shape::new(1, 1, 4, 4))).unwrap();
        assert_eq!(one.shape(), Shape::new(1, 4, 2, 2));
    }

    #[test]
    fn block_layout() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 2), |[_, _, i, j]| (2 * i + j) as f64);
        assert_eq!(squeeze(&x).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(squeeze(&Tensor::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }
}
