use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::flowlayers::Bijection;
use crate::masking::{CheckerboardMask, Half, MaskKind, PatchGrid};
use crate::numkit::linalg::batched_solve;
use crate::numkit::{Shape, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};

use super::Activation;

/// Construction options for [`ISdp`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ISdpOptions {
    pub patches: usize,
    pub heads: usize,
    pub activation: Activation,
    /// Drop the `αI` term and use the bare activation matrix.
    pub pure_eq6: bool,
}

impl Default for ISdpOptions {
    fn default() -> Self {
        ISdpOptions {
            patches: 4,
            heads: 1,
            activation: Activation::Sigmoid,
            pure_eq6: false,
        }
    }
}

/// Near-equal contiguous channel ranges, one per head.
pub fn head_groups(channels: usize, heads: usize) -> Vec<std::ops::Range<usize>> {
    let base = channels / heads;
    let extra = channels % heads;
    let mut start = 0;
    (0..heads)
        .map(|h| {
            let len = base + usize::from(h < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Patchwise scaled dot-product attention.
///
/// For patch `p` and head `h`, `W̃ = αI + act(Q Kᵀ / √d)` with `Q = X_A W_qᵀ`,
/// `K = X_A W_kᵀ` built from the half-A rows `X_A` (m × C); the head's
/// half-B channel block is mapped as `Y_B = W̃ X_B`. Half A passes through.
#[derive(Clone, Debug)]
pub struct ISdp {
    pub name: String,
    pub mask: CheckerboardMask,
    pub channels: usize,
    pub grid: PatchGrid,
    pub options: ISdpOptions,
    /// Per-head (1, 1, C, C) weights.
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub log_d: ParamId,
    /// `α = softplus(alpha_raw)`.
    pub alpha_raw: ParamId,
    pos_a: Vec<Vec<(usize, usize)>>,
    pos_b: Vec<Vec<(usize, usize)>>,
}

impl ISdp {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        mask: CheckerboardMask,
        channels: usize,
        options: ISdpOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if mask.kind() != MaskKind::Spatial2D {
            return Err(Error::Config(format!("{name}: attention needs a spatial mask")));
        }
        if options.heads == 0 || options.heads > channels {
            return Err(Error::Config(format!(
                "{name}: {} heads for {channels} channels",
                options.heads
            )));
        }
        let grid = PatchGrid::square(options.patches)?;
        grid.patch_dims(mask.height(), mask.width())?;
        let mut pos_a = Vec::with_capacity(grid.count());
        let mut pos_b = Vec::with_capacity(grid.count());
        for p in 0..grid.count() {
            let a = mask.positions(Half::A, Some((grid, p)))?;
            let b = mask.positions(Half::B, Some((grid, p)))?;
            if a.len() != b.len() || a.is_empty() {
                return Err(Error::Config(format!(
                    "{name}: patch {p} holds {} A and {} B positions",
                    a.len(),
                    b.len()
                )));
            }
            pos_a.push(a);
            pos_b.push(b);
        }
        let std = 1.0 / (channels as f64).sqrt();
        let mut wq = Vec::with_capacity(options.heads);
        let mut wk = Vec::with_capacity(options.heads);
        for h in 0..options.heads {
            let shape = Shape::matrix(channels, channels);
            wq.push(params.add(format!("{name}.wq{h}"), Tensor::randn(shape, std, rng), true)?);
            wk.push(params.add(format!("{name}.wk{h}"), Tensor::randn(shape, std, rng), true)?);
        }
        let log_d = params.add(format!("{name}.log_d"), Tensor::scalar((channels as f64).sqrt().ln()), true)?;
        // softplus(ln(e − 1)) = 1
        let alpha_raw = params.add(
            format!("{name}.alpha_raw"),
            Tensor::scalar((std::f64::consts::E - 1.0).ln()),
            true,
        )?;
        Ok(ISdp {
            name: name.to_string(),
            mask,
            channels,
            grid,
            options,
            wq,
            wk,
            log_d,
            alpha_raw,
            pos_a,
            pos_b,
        })
    }

    /// Positions per patch half (`m`).
    pub fn block_order(&self) -> usize {
        self.pos_a[0].len()
    }

    fn check(&self, s: Shape) -> Result<()> {
        if s.c() != self.channels || s.h() != self.mask.height() || s.w() != self.mask.width() {
            return Err(Error::ShapeMismatch {
                op: "isdp",
                left: s,
                right: Shape::new(s.b(), self.channels, self.mask.height(), self.mask.width()),
            });
        }
        Ok(())
    }

    /// Offsets of the (B, P, m, |channels|) block for `half`.
    fn block_index(&self, s: Shape, half: Half, channels: std::ops::Range<usize>) -> (Shape, Arc<[usize]>) {
        let pos = match half {
            Half::A => &self.pos_a,
            Half::B => &self.pos_b,
        };
        let bs = Shape::new(s.b(), self.grid.count(), self.block_order(), channels.len());
        let index = (0..bs.numel())
            .map(|k| {
                let [b, p, r, c] = bs.unravel(k);
                let (i, j) = pos[p][r];
                s.offset(b, channels.start + c, i, j)
            })
            .collect();
        (bs, index)
    }

    fn half_a_rows(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.shape(x);
        self.check(s)?;
        let (bs, idx) = self.block_index(s, Half::A, 0..self.channels);
        ctx.gather(x, bs, idx)
    }

    fn head_weights(&self, ctx: &mut Ctx, xa: Var, head: usize) -> Result<Var> {
        let wq = ctx.param(self.wq[head])?;
        let wk = ctx.param(self.wk[head])?;
        let wq_t = ctx.transpose_last2(wq)?;
        let wk_t = ctx.transpose_last2(wk)?;
        let q = ctx.bmm(xa, wq_t)?;
        let k = ctx.bmm(xa, wk_t)?;
        let k_t = ctx.transpose_last2(k)?;
        let scores = ctx.bmm(q, k_t)?;
        let log_d = ctx.param(self.log_d)?;
        let inv_sqrt_d = ctx.mul_scalar(log_d, -0.5)?;
        let inv_sqrt_d = ctx.exp(inv_sqrt_d)?;
        let scores = ctx.mul_bcast(scores, inv_sqrt_d)?;
        let act = match self.options.activation {
            Activation::Sigmoid => ctx.sigmoid(scores)?,
            Activation::Softmax => ctx.softmax_last(scores)?,
        };
        if self.options.pure_eq6 {
            return Ok(act);
        }
        let m = self.block_order();
        let eye = Tensor::from_fn(Shape::matrix(m, m), |[_, _, i, j]| if i == j { 1.0 } else { 0.0 });
        let eye = ctx.constant(eye)?;
        let raw = ctx.param(self.alpha_raw)?;
        let alpha = ctx.softplus(raw)?;
        let diag = ctx.mul_bcast(eye, alpha)?;
        ctx.add_bcast(act, diag)
    }

    /// The (B, P, m, m) weight matrices of `head`, computed from half A of `x`.
    pub fn weights(&self, ctx: &mut Ctx, x: Var, head: usize) -> Result<Var> {
        let xa = self.half_a_rows(ctx, x)?;
        self.head_weights(ctx, xa, head)
    }

    fn block_error(&self, e: Error, head: usize) -> Error {
        match e {
            Error::SingularMatrix { matrix, pivot, .. } => Error::SingularBlock {
                sample: matrix / self.grid.count(),
                patch: matrix % self.grid.count(),
                head,
                pivot,
            },
            other => other,
        }
    }
}

impl Bijection for ISdp {
    fn forward(&self, ctx: &mut Ctx, x: Var, _cond: Option<Var>) -> Result<(Var, Var)> {
        let s = ctx.shape(x);
        let xa = self.half_a_rows(ctx, x)?;
        let keep = self.mask.indicator(Half::A);
        let mut y = ctx.mul_const(x, &keep)?;
        let mut ld: Option<Var> = None;
        for (h, group) in head_groups(self.channels, self.options.heads).into_iter().enumerate() {
            let ch = group.len() as f64;
            let w = self.head_weights(ctx, xa, h)?;
            let (bs, idx) = self.block_index(s, Half::B, group);
            let xb = ctx.gather(x, bs, idx.clone())?;
            let yb = ctx.bmm(w, xb)?;
            let placed = ctx.scatter(yb, s, idx)?;
            y = ctx.add(y, placed)?;
            let lad = ctx.logabsdet(w).map_err(|e| self.block_error(e, h))?;
            let lad = ctx.sum_per_sample(lad)?;
            let lad = ctx.mul_scalar(lad, ch)?;
            ld = Some(match ld {
                None => lad,
                Some(acc) => ctx.add(acc, lad)?,
            });
        }
        Ok((y, ld.expect("at least one head")))
    }

    fn inverse(&self, ctx: &mut Ctx, y: Var, _cond: Option<Var>) -> Result<Var> {
        let s = ctx.shape(y);
        let xa = self.half_a_rows(ctx, y)?;
        let keep = self.mask.indicator(Half::A);
        let kept = ctx.mul_const(y, &keep)?;
        let mut x = ctx.value(kept).clone();
        for (h, group) in head_groups(self.channels, self.options.heads).into_iter().enumerate() {
            let w = self.head_weights(ctx, xa, h)?;
            let (bs, idx) = self.block_index(s, Half::B, group);
            let yv = ctx.value(y).data();
            let yb = Tensor::new(bs, idx.iter().map(|&k| yv[k]).collect())?;
            let xb = batched_solve(ctx.value(w), &yb).map_err(|e| self.block_error(e, h))?;
            for (&k, &v) in idx.iter().zip(xb.data()) {
                x.data_mut()[k] = v;
            }
        }
        x.check_finite("isdp_inverse")?;
        ctx.constant(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::make_mask_2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_convs(p: &mut ParamStore, l: &ISdp) {
        for &id in l.wq.iter().chain(&l.wk) {
            let s = p.get(id).shape();
            p.set(id, Tensor::zeros(s)).unwrap();
        }
    }

    fn opts(patches: usize, heads: usize) -> ISdpOptions {
        ISdpOptions {
            patches,
            heads,
            ..ISdpOptions::default()
        }
    }

    #[test]
    fn head_groups_partition() {
        let g = head_groups(7, 3);
        assert_eq!(g, vec![0..3, 3..5, 5..7]);
    }

    #[test]
    fn zero_init_block_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        // 2x2 grid, one patch: m = 2; three channels in the only head.
        let l = ISdp::new(&mut p, "sd", make_mask_2d(2, 2, 0), 3, opts(1, 1), &mut rng).unwrap();
        zero_convs(&mut p, &l);
        let x = Tensor::randn(Shape::new(1, 3, 2, 2), 1.0, &mut rng);
        let mut ctx = Ctx::eval(&p);
        let xv = ctx.input(x.clone()).unwrap();
        let w = l.weights(&mut ctx, xv, 0).unwrap();
        assert_eq!(ctx.value(w).data(), &[1.5, 0.5, 0.5, 1.5]);
        let (y, ld) = l.forward(&mut ctx, xv, None).unwrap();
        assert!((ctx.value(ld).item() - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ctx.value(ld).item() - 2.07944).abs() < 1e-5);
        let back = l.inverse(&mut ctx, y, None).unwrap();
        assert!(ctx.value(back).max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::new();
        let o = ISdpOptions {
            activation: Activation::Softmax,
            pure_eq6: true,
            ..opts(4, 1)
        };
        let l = ISdp::new(&mut p, "sd", make_mask_2d(4, 4, 0), 2, o, &mut rng).unwrap();
        let mut ctx = Ctx::eval(&p);
        let xv = ctx.input(Tensor::randn(Shape::new(2, 2, 4, 4), 1.0, &mut rng)).unwrap();
        let w = l.weights(&mut ctx, xv, 0).unwrap();
        for row in ctx.value(w).data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_ignore_b_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        let l = ISdp::new(&mut p, "sd", make_mask_2d(4, 4, 1), 2, opts(4, 1), &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut rng);
        let mut x2 = x.clone();
        for (i, j) in l.mask.positions(Half::B, None).unwrap() {
            x2.set(0, 0, i, j, 5.0);
        }
        let mut ctx = Ctx::eval(&p);
        let v1 = ctx.input(x).unwrap();
        let v2 = ctx.input(x2).unwrap();
        let w1 = l.weights(&mut ctx, v1, 0).unwrap();
        let w2 = l.weights(&mut ctx, v2, 0).unwrap();
        assert_eq!(ctx.value(w1), ctx.value(w2));
    }

    #[test]
    fn round_trips_and_batch_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..100 {
            let heads = 1 + trial % 2;
            let mut p = ParamStore::new();
            let l = ISdp::new(&mut p, "sd", make_mask_2d(4, 4, (trial % 2) as u8), 3, opts(4, heads), &mut rng)
                .unwrap();
            let x = Tensor::randn(Shape::new(2, 3, 4, 4), 1.0, &mut rng);
            let mut ctx = Ctx::eval(&p);
            let xv = ctx.input(x.clone()).unwrap();
            let (y, ld) = l.forward(&mut ctx, xv, None).unwrap();
            let back = l.inverse(&mut ctx, y, None).unwrap();
            assert!(ctx.value(back).max_abs_diff(&x) < 1e-8);

            let swapped = Tensor::concat_batch(&[x.batch_slice(1, 1), x.batch_slice(0, 1)]).unwrap();
            let sv = ctx.input(swapped).unwrap();
            let (_, ld2) = l.forward(&mut ctx, sv, None).unwrap();
            let (a, b) = (ctx.value(ld).data(), ctx.value(ld2).data());
            assert_eq!((a[0], a[1]), (b[1], b[0]));
        }
    }

    #[test]
    fn pure_eq6_zero_init_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::new();
        let o = ISdpOptions {
            pure_eq6: true,
            ..opts(4, 1)
        };
        let l = ISdp::new(&mut p, "sd", make_mask_2d(4, 4, 0), 2, o, &mut rng).unwrap();
        zero_convs(&mut p, &l);
        let mut ctx = Ctx::eval(&p);
        let xv = ctx.input(Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut rng)).unwrap();
        assert!(matches!(l.forward(&mut ctx, xv, None), Err(Error::SingularBlock { head: 0, .. })));
        assert!(matches!(l.inverse(&mut ctx, xv, None), Err(Error::SingularBlock { .. })));
    }

    #[test]
    fn shared_heads_match_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p1 = ParamStore::new();
        let one = ISdp::new(&mut p1, "sd", make_mask_2d(4, 4, 0), 4, opts(4, 1), &mut rng).unwrap();
        let mut p3 = ParamStore::new();
        let three = ISdp::new(&mut p3, "sd", make_mask_2d(4, 4, 0), 4, opts(4, 3), &mut rng).unwrap();
        for h in 0..3 {
            p3.set(three.wq[h], p1.get(one.wq[0]).clone()).unwrap();
            p3.set(three.wk[h], p1.get(one.wk[0]).clone()).unwrap();
        }
        let x = Tensor::randn(Shape::new(2, 4, 4, 4), 1.0, &mut rng);
        let mut c1 = Ctx::eval(&p1);
        let mut c3 = Ctx::eval(&p3);
        let v1 = c1.input(x.clone()).unwrap();
        let v3 = c3.input(x).unwrap();
        let (y1, l1) = one.forward(&mut c1, v1, None).unwrap();
        let (y3, l3) = three.forward(&mut c3, v3, None).unwrap();
        assert!(c1.value(y1).max_abs_diff(c3.value(y3)) < 1e-12);
        assert!(c1.value(l1).max_abs_diff(c3.value(l3)) < 1e-10);
    }

    #[test]
    fn uneven_patches_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamStore::new();
        // 3x3 patches of a 6x6 grid hold 5 and 4 positions.
        assert!(ISdp::new(&mut p, "sd", make_mask_2d(6, 6, 0), 2, opts(4, 1), &mut rng).is_err());
        assert!(ISdp::new(&mut p, "sd", make_mask_2d(4, 4, 0), 2, opts(3, 1), &mut rng).is_err());
        assert!(ISdp::new(&mut p, "sd", make_mask_2d(4, 4, 0), 2, opts(4, 3), &mut rng).is_err());
    }
}
