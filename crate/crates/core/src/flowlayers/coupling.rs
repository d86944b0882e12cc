use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::{CheckerboardMask, Half, MaskKind};
use crate::numkit::{Shape, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};

use super::{init_normal, require_condition, Bijection};

/// Bound on coupling log-scales: `log s = LOG_SCALE_BOUND · tanh(raw)`.
pub const LOG_SCALE_BOUND: f64 = 1.9;

/// Conditioning net: 3x3 conv, tanh, 1x1 conv, tanh, zero-initialized 1x1
/// output conv. Every conv carries a bias.
#[derive(Clone, Debug)]
pub struct CouplingNet {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl CouplingNet {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_channels == 0 || hidden == 0 || out_channels == 0 {
            return Err(Error::Config(format!("{name}: coupling net widths must be positive")));
        }
        let std1 = 1.0 / ((9 * in_channels) as f64).sqrt();
        let std2 = 1.0 / (hidden as f64).sqrt();
        Ok(CouplingNet {
            in_channels,
            hidden,
            out_channels,
            w1: params.add(
                format!("{name}.w1"),
                init_normal(Shape::new(hidden, in_channels, 3, 3), std1, rng),
                true,
            )?,
            b1: params.add(format!("{name}.b1"), Tensor::zeros(Shape::new(1, hidden, 1, 1)), true)?,
            w2: params.add(
                format!("{name}.w2"),
                init_normal(Shape::matrix(hidden, hidden), std2, rng),
                true,
            )?,
            b2: params.add(format!("{name}.b2"), Tensor::zeros(Shape::new(1, hidden, 1, 1)), true)?,
            w_out: params.add(
                format!("{name}.w_out"),
                Tensor::zeros(Shape::matrix(out_channels, hidden)),
                true,
            )?,
            b_out: params.add(
                format!("{name}.b_out"),
                Tensor::zeros(Shape::new(1, out_channels, 1, 1)),
                true,
            )?,
        })
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w1 = ctx.param(self.w1)?;
        let b1 = ctx.param(self.b1)?;
        let h = ctx.conv3x3(x, w1)?;
        let h = ctx.add_bcast(h, b1)?;
        let h = ctx.tanh(h)?;
        let w2 = ctx.param(self.w2)?;
        let b2 = ctx.param(self.b2)?;
        let h = ctx.conv1x1(h, w2)?;
        let h = ctx.add_bcast(h, b2)?;
        let h = ctx.tanh(h)?;
        let wo = ctx.param(self.w_out)?;
        let bo = ctx.param(self.b_out)?;
        let out = ctx.conv1x1(h, wo)?;
        ctx.add_bcast(out, bo)
    }

    /// Overwrite the output conv with Gaussian noise (tests and oracles).
    pub fn randomize_output(&self, params: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        let ws = params.get(self.w_out).shape();
        let bs = params.get(self.b_out).shape();
        params.set(self.w_out, init_normal(ws, std, rng))?;
        params.set(self.b_out, init_normal(bs, std, rng))
    }
}

/// How a coupling partitions its input into conditioning and transformed halves.
#[derive(Clone, Debug)]
pub enum CouplingSplit {
    /// First C/2 channels condition, the rest are transformed.
    Channel,
    /// Spatial or permuted checkerboard; mask half A conditions.
    Mask(CheckerboardMask),
}

impl CouplingSplit {
    pub fn name(&self) -> &'static str {
        match self {
            CouplingSplit::Channel => "channel",
            CouplingSplit::Mask(m) if m.kind() == MaskKind::Spatial2D => "checkerboard",
            CouplingSplit::Mask(_) => "permuted3d",
        }
    }

    /// Validate against a channel count at construction time.
    pub fn check_channels(&self, channels: usize) -> Result<()> {
        match self {
            CouplingSplit::Channel if channels % 2 != 0 || channels < 2 => {
                Err(Error::Config(format!("channel split needs an even channel count, got {channels}")))
            }
            CouplingSplit::Mask(m) if m.kind() == MaskKind::Permuted3D && m.channels() != channels => {
                Err(Error::Config(format!(
                    "permuted mask has {} channels, layer has {channels}",
                    m.channels()
                )))
            }
            _ => Ok(()),
        }
    }

    /// Indicator of the conditioning half, broadcastable against `shape`.
    pub fn conditioning(&self, shape: Shape) -> Result<Tensor> {
        match self {
            CouplingSplit::Channel => {
                let c = shape.c();
                Ok(Tensor::from_fn(Shape::new(1, c, 1, 1), |[_, ch, _, _]| {
                    if ch < c / 2 {
                        1.0
                    } else {
                        0.0
                    }
                }))
            }
            CouplingSplit::Mask(m) => {
                if m.height() != shape.h() || m.width() != shape.w() {
                    return Err(Error::ShapeMismatch {
                        op: "coupling_mask",
                        left: shape,
                        right: Shape::new(1, m.channels(), m.height(), m.width()),
                    });
                }
                Ok(m.indicator(Half::A))
            }
        }
    }
}

/// Indicator pair (conditioning, transformed).
pub(crate) fn split_indicators(split: &CouplingSplit, shape: Shape) -> Result<(Tensor, Tensor)> {
    let a = split.conditioning(shape)?;
    let b = a.map(|v| 1.0 - v);
    Ok((a, b))
}

/// Bounded log-scale from a raw net output.
pub(crate) fn clamp_log_scale(ctx: &mut Ctx, raw: Var) -> Result<Var> {
    let t = ctx.tanh(raw)?;
    ctx.mul_scalar(t, LOG_SCALE_BOUND)
}

/// Affine coupling `y_b = exp(log s) ⊙ x_b + t` with `(log s, t)` computed from
/// the conditioning half, optionally concatenated with condition features.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    pub name: String,
    pub channels: usize,
    pub split: CouplingSplit,
    pub net: CouplingNet,
    pub cond_channels: usize,
}

impl AffineCoupling {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        split: CouplingSplit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_condition(params, name, channels, hidden, split, 0, rng)
    }

    /// Conditional variant; `cond_channels` feature maps are appended to the net input.
    pub fn with_condition(
        params: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        split: CouplingSplit,
        cond_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        split.check_channels(channels)?;
        let net = CouplingNet::new(params, &format!("{name}.net"), channels + cond_channels, hidden, 2 * channels, rng)?;
        Ok(AffineCoupling {
            name: name.to_string(),
            channels,
            split,
            net,
            cond_channels,
        })
    }

    /// Masked `(log s, t)` for input whose conditioning half equals `x`'s.
    fn scale_shift(&self, ctx: &mut Ctx, x: Var, cond: Option<Var>, keep: &Tensor, moved: &Tensor) -> Result<(Var, Var)> {
        let xa = ctx.mul_const(x, keep)?;
        let input = if self.cond_channels > 0 {
            let c = require_condition(ctx, x, cond, &self.name)?;
            if ctx.shape(c).c() != self.cond_channels {
                return Err(Error::ShapeMismatch {
                    op: "cond_coupling",
                    left: ctx.shape(c),
                    right: ctx.shape(x).with_channels(self.cond_channels),
                });
            }
            ctx.concat_channels(&[xa, c])?
        } else {
            xa
        };
        let out = self.net.apply(ctx, input)?;
        let raw = ctx.slice_channels(out, 0, self.channels)?;
        let t = ctx.slice_channels(out, self.channels, self.channels)?;
        let ls = clamp_log_scale(ctx, raw)?;
        let ls = ctx.mul_const(ls, moved)?;
        let t = ctx.mul_const(t, moved)?;
        Ok((ls, t))
    }
}

impl Bijection for AffineCoupling {
    fn forward(&self, ctx: &mut Ctx, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let (keep, moved) = split_indicators(&self.split, ctx.shape(x))?;
        let (ls, t) = self.scale_shift(ctx, x, cond, &keep, &moved)?;
        let s = ctx.exp(ls)?;
        let y = ctx.mul(x, s)?;
        let y = ctx.add(y, t)?;
        let ld = ctx.sum_per_sample(ls)?;
        Ok((y, ld))
    }

    fn inverse(&self, ctx: &mut Ctx, y: Var, cond: Option<Var>) -> Result<Var> {
        let (keep, moved) = split_indicators(&self.split, ctx.shape(y))?;
        let (ls, t) = self.scale_shift(ctx, y, cond, &keep, &moved)?;
        let centered = ctx.sub(y, t)?;
        let nls = ctx.neg(ls)?;
        let inv_s = ctx.exp(nls)?;
        ctx.mul(centered, inv_s)
    }
}

/// Conditional affine injector `y = exp(log s) ⊙ x + t`, `(log s, t) = NN(c)`.
#[derive(Clone, Debug)]
pub struct CondInjector {
    pub name: String,
    pub channels: usize,
    pub cond_channels: usize,
    pub net: CouplingNet,
}

impl CondInjector {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        cond_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let net = CouplingNet::new(params, &format!("{name}.net"), cond_channels, hidden, 2 * channels, rng)?;
        Ok(CondInjector {
            name: name.to_string(),
            channels,
            cond_channels,
            net,
        })
    }

    fn scale_shift(&self, ctx: &mut Ctx, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let c = require_condition(ctx, x, cond, &self.name)?;
        let out = self.net.apply(ctx, c)?;
        let raw = ctx.slice_channels(out, 0, self.channels)?;
        let t = ctx.slice_channels(out, self.channels, self.channels)?;
        let ls = clamp_log_scale(ctx, raw)?;
        let xs = ctx.shape(x);
        let ls = ctx.broadcast_to(ls, xs)?;
        let t = ctx.broadcast_to(t, xs)?;
        Ok((ls, t))
    }
}

impl Bijection for CondInjector {
    fn forward(&self, ctx: &mut Ctx, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let (ls, t) = self.scale_shift(ctx, x, cond)?;
        let s = ctx.exp(ls)?;
        let y = ctx.mul(x, s)?;
        let y = ctx.add(y, t)?;
        let ld = ctx.sum_per_sample(ls)?;
        Ok((y, ld))
    }

    fn inverse(&self, ctx: &mut Ctx, y: Var, cond: Option<Var>) -> Result<Var> {
        let (ls, t) = self.scale_shift(ctx, y, cond)?;
        let centered = ctx.sub(y, t)?;
        let nls = ctx.neg(ls)?;
        let inv_s = ctx.exp(nls)?;
        ctx.mul(centered, inv_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{make_mask_2d, make_mask_3d};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn splits(c: usize, h: usize, w: usize) -> Vec<CouplingSplit> {
        vec![
            CouplingSplit::Channel,
            CouplingSplit::Mask(make_mask_2d(h, w, 0)),
            CouplingSplit::Mask(make_mask_3d(c, h, w, 11).unwrap()),
        ]
    }

    fn run(layer: &dyn Bijection, p: &ParamStore, x: &Tensor, c: Option<&Tensor>) -> (Tensor, Tensor, Tensor) {
        let mut ctx = Ctx::eval(p);
        let xv = ctx.input(x.clone()).unwrap();
        let cv = c.map(|c| ctx.input(c.clone()).unwrap());
        let (y, ld) = layer.forward(&mut ctx, xv, cv).unwrap();
        let back = layer.inverse(&mut ctx, y, cv).unwrap();
        (ctx.value(y).clone(), ctx.value(ld).clone(), ctx.value(back).clone())
    }

    #[test]
    fn zero_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(Shape::new(2, 4, 4, 4), 1.0, &mut rng);
        for split in splits(4, 4, 4) {
            let mut p = ParamStore::new();
            let l = AffineCoupling::new(&mut p, "cp", 4, 8, split, &mut rng).unwrap();
            let (y, ld, _) = run(&l, &p, &x, None);
            assert_eq!(y, x);
            assert!(ld.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_affine_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(Shape::new(1, 2, 2, 2), 1.0, &mut rng);
        let mut p = ParamStore::new();
        let l = AffineCoupling::new(&mut p, "cp", 2, 4, CouplingSplit::Channel, &mut rng).unwrap();
        let raw = (2f64.ln() / LOG_SCALE_BOUND).atanh();
        p.set(l.net.b_out, Tensor::new(Shape::new(1, 4, 1, 1), vec![raw, raw, 1.0, 1.0]).unwrap())
            .unwrap();
        let (y, ld, _) = run(&l, &p, &x, None);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(y.get(0, 0, i, j), x.get(0, 0, i, j));
                assert!((y.get(0, 1, i, j) - (2.0 * x.get(0, 1, i, j) + 1.0)).abs() < 1e-12);
            }
        }
        assert!((ld.item() - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn random_net_round_trip_and_half_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for split in splits(4, 4, 4) {
            let mut p = ParamStore::new();
            let l = AffineCoupling::new(&mut p, "cp", 4, 8, split.clone(), &mut rng).unwrap();
            l.net.randomize_output(&mut p, 0.5, &mut rng).unwrap();
            let x = Tensor::randn(Shape::new(2, 4, 4, 4), 1.0, &mut rng);
            let (y, _, back) = run(&l, &p, &x, None);
            assert!(back.max_abs_diff(&x) < 1e-9);
            let keep = split.conditioning(x.shape()).unwrap();
            let keep = crate::numkit::kernels::broadcast_to(&keep, x.shape()).unwrap();
            for k in 0..x.data().len() {
                if keep.data()[k] == 1.0 {
                    assert_eq!(y.data()[k], x.data()[k]);
                }
            }
        }
    }

    #[test]
    fn odd_channels_rejected() {
        let mut p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = AffineCoupling::new(&mut p, "cp", 3, 4, CouplingSplit::Channel, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn conditional_coupling_depends_on_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::new();
        let split = CouplingSplit::Mask(make_mask_2d(4, 4, 1));
        let l = AffineCoupling::with_condition(&mut p, "cc", 2, 6, split, 3, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut rng);
        let c1 = Tensor::randn(Shape::new(1, 3, 4, 4), 1.0, &mut rng);
        let c2 = Tensor::randn(Shape::new(1, 3, 4, 4), 1.0, &mut rng);
        let (y0, _, _) = run(&l, &p, &x, Some(&c1));
        assert_eq!(y0, x);
        l.net.randomize_output(&mut p, 0.5, &mut rng).unwrap();
        let (y1, _, back) = run(&l, &p, &x, Some(&c1));
        let (y2, _, _) = run(&l, &p, &x, Some(&c2));
        assert!(y1.max_abs_diff(&y2) > 1e-6);
        assert!(back.max_abs_diff(&x) < 1e-9);

        let mut ctx = Ctx::eval(&p);
        let xv = ctx.input(x.clone()).unwrap();
        let bad = ctx.input(Tensor::zeros(Shape::new(1, 3, 2, 2))).unwrap();
        assert!(matches!(l.forward(&mut ctx, xv, Some(bad)), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(l.forward(&mut ctx, xv, None), Err(Error::Config(_))));
    }

    #[test]
    fn injector_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ParamStore::new();
        let l = CondInjector::new(&mut p, "inj", 1, 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(1, 1, 2, 2), 1.0, &mut rng);
        let c = Tensor::randn(Shape::new(1, 2, 2, 2), 1.0, &mut rng);
        let (y, ld, _) = run(&l, &p, &x, Some(&c));
        assert_eq!(y, x);
        assert_eq!(ld.item(), 0.0);
        let raw = (3f64.ln() / LOG_SCALE_BOUND).atanh();
        p.set(l.net.b_out, Tensor::new(Shape::new(1, 2, 1, 1), vec![raw, 0.0]).unwrap()).unwrap();
        let (_, ld, back) = run(&l, &p, &x, Some(&c));
        assert!((ld.item() - 4.0 * 3f64.ln()).abs() < 1e-12);
        assert!(back.max_abs_diff(&x) < 1e-12);
    }
}
