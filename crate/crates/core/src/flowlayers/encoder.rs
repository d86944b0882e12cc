use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{Shape, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};

use super::init_normal;

/// Maps a condition image to feature maps at one flow resolution:
/// area pooling, then 3x3 conv, tanh, 1x1 conv, tanh, 1x1 conv.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

/// Average over non-overlapping `f × f` blocks, on the tape.
pub(crate) fn area_pool(ctx: &mut Ctx, x: Var, f: usize) -> Result<Var> {
    if f == 1 {
        return Ok(x);
    }
    let s = ctx.shape(x);
    if s.h() % f != 0 || s.w() % f != 0 {
        return Err(Error::Config(format!("cannot pool {s} by {f}")));
    }
    let os = Shape::new(s.b(), s.c(), s.h() / f, s.w() / f);
    let mut acc: Option<Var> = None;
    for di in 0..f {
        for dj in 0..f {
            let index: Arc<[usize]> = (0..os.numel())
                .map(|k| {
                    let [b, c, i, j] = os.unravel(k);
                    s.offset(b, c, f * i + di, f * j + dj)
                })
                .collect();
            let g = ctx.gather(x, os, index)?;
            acc = Some(match acc {
                None => g,
                Some(a) => ctx.add(a, g)?,
            });
        }
    }
    let sum = acc.expect("f >= 1");
    ctx.mul_scalar(sum, 1.0 / (f * f) as f64)
}

impl ConditionEncoder {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let s1 = 1.0 / ((9 * in_channels) as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Ok(ConditionEncoder {
            name: name.to_string(),
            in_channels,
            out_channels,
            w1: params.add(format!("{name}.w1"), init_normal(Shape::new(hidden, in_channels, 3, 3), s1, rng), true)?,
            b1: params.add(format!("{name}.b1"), Tensor::zeros(Shape::new(1, hidden, 1, 1)), true)?,
            w2: params.add(format!("{name}.w2"), init_normal(Shape::matrix(hidden, hidden), s2, rng), true)?,
            b2: params.add(format!("{name}.b2"), Tensor::zeros(Shape::new(1, hidden, 1, 1)), true)?,
            w3: params.add(format!("{name}.w3"), init_normal(Shape::matrix(out_channels, hidden), s2, rng), true)?,
            b3: params.add(format!("{name}.b3"), Tensor::zeros(Shape::new(1, out_channels, 1, 1)), true)?,
        })
    }

    /// Features of shape (B, out_channels, height, width).
    pub fn encode(&self, ctx: &mut Ctx, cond: Var, height: usize, width: usize) -> Result<Var> {
        let cs = ctx.shape(cond);
        let aligned = height > 0
            && width > 0
            && cs.h() % height == 0
            && cs.w() % width == 0
            && cs.h() / height == cs.w() / width;
        if cs.c() != self.in_channels || !aligned {
            return Err(Error::ShapeMismatch {
                op: "condition_encoder",
                left: cs,
                right: Shape::new(cs.b(), self.in_channels, height, width),
            });
        }
        let pooled = area_pool(ctx, cond, cs.h() / height)?;
        let w1 = ctx.param(self.w1)?;
        let b1 = ctx.param(self.b1)?;
        let h = ctx.conv3x3(pooled, w1)?;
        let h = ctx.add_bcast(h, b1)?;
        let h = ctx.tanh(h)?;
        let w2 = ctx.param(self.w2)?;
        let b2 = ctx.param(self.b2)?;
        let h = ctx.conv1x1(h, w2)?;
        let h = ctx.add_bcast(h, b2)?;
        let h = ctx.tanh(h)?;
        let w3 = ctx.param(self.w3)?;
        let b3 = ctx.param(self.b3)?;
        let h = ctx.conv1x1(h, w3)?;
        ctx.add_bcast(h, b3)
    }
}
