use rand::Rng;

use crate::error::{Error, Result};
use crate::flowlayers::Bijection;
use crate::masking::{CheckerboardMask, Half, MaskKind};
use crate::numkit::{Shape, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};

const MIN_INVERSE_SCALE: f64 = 1e-12;

/// Map-based attention: `y[b, c, q] = σ(pre[b, q]) · x[b, c, q]` where
/// `pre = M·b + (1 − M)·s·N(mean_c(conv1x1(x ⊙ M, G2)))`, `M` marks half A
/// and `N` averages over the four direct neighbours.
#[derive(Clone, Debug)]
pub struct IMap {
    pub name: String,
    pub mask: CheckerboardMask,
    pub channels: usize,
    pub hidden: usize,
    /// (1, 1, C′, C) pointwise weight.
    pub g2: ParamId,
    /// Scalar multiplier of the pooled response.
    pub scale_s: ParamId,
    /// (1, 1, H, W) bias used on half A.
    pub bias_b: ParamId,
    /// Half whose values feed the weights. `Half::B` builds a broken layer for
    /// mutation tests: weights from B, applied on both halves.
    pub weight_source: Half,
}

fn neighbour_kernel() -> Tensor {
    Tensor::from_fn(Shape::new(1, 1, 3, 3), |[_, _, i, j]| {
        if (i + j) % 2 == 1 {
            0.25
        } else {
            0.0
        }
    })
}

impl IMap {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        mask: CheckerboardMask,
        channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if mask.kind() != MaskKind::Spatial2D {
            return Err(Error::Config(format!("{name}: attention needs a spatial mask")));
        }
        if hidden == 0 || channels == 0 {
            return Err(Error::Config(format!("{name}: channel counts must be positive")));
        }
        let (h, w) = (mask.height(), mask.width());
        let std = 1.0 / (channels as f64).sqrt();
        Ok(IMap {
            name: name.to_string(),
            channels,
            hidden,
            g2: params.add(
                format!("{name}.g2"),
                Tensor::randn(Shape::matrix(hidden, channels), std, rng),
                true,
            )?,
            scale_s: params.add(format!("{name}.scale_s"), Tensor::scalar(0.0), true)?,
            bias_b: params.add(format!("{name}.bias_b"), Tensor::zeros(Shape::new(1, 1, h, w)), true)?,
            mask,
            weight_source: Half::A,
        })
    }

    fn check(&self, s: Shape) -> Result<()> {
        if s.c() != self.channels || s.h() != self.mask.height() || s.w() != self.mask.width() {
            return Err(Error::ShapeMismatch {
                op: "imap",
                left: s,
                right: Shape::new(s.b(), self.channels, self.mask.height(), self.mask.width()),
            });
        }
        Ok(())
    }

    /// Pre-activation weights of shape (B, 1, H, W): `s·w` on half B and `b`
    /// on half A, where `w` is the channel mean of the pointwise response to
    /// the half-A input averaged over each position's 4-neighbourhood. The
    /// applied scales are their sigmoids.
    pub fn weights(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let xs = ctx.shape(x);
        self.check(xs)?;
        let src = self.mask.indicator(self.weight_source);
        let on_a = self.mask.indicator(Half::A);
        let on_b = self.mask.indicator(Half::B);
        let xa = ctx.mul_const(x, &src)?;
        let g2 = ctx.param(self.g2)?;
        let u = ctx.conv1x1(xa, g2)?;
        let pooled = ctx.channel_mean(u)?;
        // every 4-neighbour of a B position lies in A, so the averaged map
        // carries half-A context onto half B
        let k = ctx.constant(neighbour_kernel())?;
        let pooled = ctx.conv3x3(pooled, k)?;
        let s = ctx.param(self.scale_s)?;
        let dep = ctx.mul_bcast(pooled, s)?;
        // the broken variant also lets the pooled term reach half A
        let dep = if self.weight_source == Half::A {
            ctx.mul_const(dep, &on_b)?
        } else {
            dep
        };
        let b = ctx.param(self.bias_b)?;
        let b = ctx.mul_const(b, &on_a)?;
        ctx.add_bcast(dep, b)
    }

    /// `(pre-activation, applied scales)`, both (B, 1, H, W).
    pub fn weights_and_scales(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let pre = self.weights(ctx, x)?;
        let scales = ctx.sigmoid(pre)?;
        Ok((pre, scales))
    }

    fn scale_error(&self, scales: &Tensor, below: f64) -> Result<()> {
        let s = scales.shape();
        if let Some(k) = scales.data().iter().position(|&v| v <= below) {
            let [b, _, i, j] = s.unravel(k);
            return Err(Error::ScaleUnderflow {
                sample: b,
                row: i,
                col: j,
            });
        }
        Ok(())
    }
}

impl Bijection for IMap {
    fn forward(&self, ctx: &mut Ctx, x: Var, _cond: Option<Var>) -> Result<(Var, Var)> {
        let (pre, scales) = self.weights_and_scales(ctx, x)?;
        self.scale_error(ctx.value(scales), 0.0)?;
        let y = ctx.mul_bcast(x, scales)?;
        let ls = ctx.log_sigmoid(pre)?;
        let ld = ctx.sum_per_sample(ls)?;
        let ld = ctx.mul_scalar(ld, self.channels as f64)?;
        Ok((y, ld))
    }

    fn inverse(&self, ctx: &mut Ctx, y: Var, _cond: Option<Var>) -> Result<Var> {
        let ys = ctx.shape(y);
        self.check(ys)?;
        // Half A first: its scale σ(b) does not depend on the data.
        let b = ctx.param(self.bias_b)?;
        let sb = ctx.sigmoid(b)?;
        self.scale_error(ctx.value(sb), MIN_INVERSE_SCALE)?;
        let on_a = self.mask.indicator(Half::A);
        let ya = ctx.mul_const(y, &on_a)?;
        let sb = ctx.broadcast_to(sb, ys)?;
        let xa = ctx.div(ya, sb)?;
        let (_, scales) = self.weights_and_scales(ctx, xa)?;
        self.scale_error(ctx.value(scales), MIN_INVERSE_SCALE)?;
        let scales = ctx.broadcast_to(scales, ys)?;
        ctx.div(y, scales)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::make_mask_2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> (ParamStore, IMap) {
        let mut p = ParamStore::new();
        let l = IMap::new(&mut p, "im", make_mask_2d(h, w, 0), c, 3, rng).unwrap();
        (p, l)
    }

    fn randomize(p: &mut ParamStore, l: &IMap, rng: &mut ChaCha8Rng) {
        p.set(l.scale_s, Tensor::scalar(rng.gen_range(-2.0..2.0))).unwrap();
        let bs = p.get(l.bias_b).shape();
        p.set(l.bias_b, Tensor::randn(bs, 1.0, rng)).unwrap();
    }

    #[test]
    fn zero_params_halve_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut p, l) = layer(1, 2, 2, &mut rng);
        p.set(l.g2, Tensor::zeros(Shape::matrix(3, 1))).unwrap();
        let x = Tensor::randn(Shape::new(1, 1, 2, 2), 1.0, &mut rng);
        let mut ctx = Ctx::eval(&p);
        let xv = ctx.input(x.clone()).unwrap();
        let (y, ld) = l.forward(&mut ctx, xv, None).unwrap();
        assert!(ctx.value(y).max_abs_diff(&x.map(|v| v / 2.0)) < 1e-15);
        assert!((ctx.value(ld).item() - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        let back = l.inverse(&mut ctx, y, None).unwrap();
        assert!(ctx.value(back).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn a_scales_ignore_b_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut p, l) = layer(2, 4, 4, &mut rng);
        randomize(&mut p, &l, &mut rng);
        p.set(l.bias_b, Tensor::full(Shape::new(1, 1, 4, 4), 10.0)).unwrap();
        let x = Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut rng);
        let mut x2 = x.clone();
        for i in 0..4 {
            for j in 0..4 {
                if l.mask.contains(Half::B, 0, i, j) {
                    x2.set(0, 1, i, j, x.get(0, 1, i, j) + 3.0);
                }
            }
        }
        let mut ctx = Ctx::eval(&p);
        let v1 = ctx.input(x).unwrap();
        let v2 = ctx.input(x2).unwrap();
        let (_, s1) = l.weights_and_scales(&mut ctx, v1).unwrap();
        let (_, s2) = l.weights_and_scales(&mut ctx, v2).unwrap();
        let (s1, s2) = (ctx.value(s1), ctx.value(s2));
        for i in 0..4 {
            for j in 0..4 {
                if l.mask.contains(Half::A, 0, i, j) {
                    assert_eq!(s1.get(0, 0, i, j), s2.get(0, 0, i, j));
                    assert!((s1.get(0, 0, i, j) - 0.99995).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn logdet_scales_with_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lds = Vec::new();
        for c in [1, 2] {
            let mut p = ParamStore::new();
            let l = IMap::new(&mut p, "im", make_mask_2d(4, 4, 1), c, 2, &mut rng).unwrap();
            p.set(l.g2, Tensor::zeros(Shape::matrix(2, c))).unwrap();
            p.set(l.bias_b, Tensor::from_fn(Shape::new(1, 1, 4, 4), |[_, _, i, j]| 0.3 * i as f64 - 0.2 * j as f64))
                .unwrap();
            let mut ctx = Ctx::eval(&p);
            let x = ctx.input(Tensor::randn(Shape::new(1, c, 4, 4), 1.0, &mut rng)).unwrap();
            let (_, ld) = l.forward(&mut ctx, x, None).unwrap();
            lds.push(ctx.value(ld).item());
        }
        assert!((lds[1] - 2.0 * lds[0]).abs() < 1e-12);
    }

    #[test]
    fn round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (mut p, l) = layer(2, 4, 4, &mut rng);
            randomize(&mut p, &l, &mut rng);
            let x = Tensor::randn(Shape::new(2, 2, 4, 4), 1.0, &mut rng);
            let mut ctx = Ctx::eval(&p);
            let xv = ctx.input(x.clone()).unwrap();
            let (y, _) = l.forward(&mut ctx, xv, None).unwrap();
            let back = l.inverse(&mut ctx, y, None).unwrap();
            assert!(ctx.value(back).max_abs_diff(&x) < 1e-9);
            // forward undoes the inverse on an arbitrary input
            let z = Tensor::randn(Shape::new(2, 2, 4, 4), 1.0, &mut rng);
            let zv = ctx.input(z.clone()).unwrap();
            let pre = l.inverse(&mut ctx, zv, None).unwrap();
            let again = l.forward(&mut ctx, pre, None).unwrap().0;
            assert!(ctx.value(again).max_abs_diff(&z) < 1e-9);
        }
    }
}
