//! Plain tensor kernels shared by the tape's forward and reverse rules.

use crate::error::{Error, Result};
use crate::numkit::{Shape, Tensor};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log σ(x)` without cancellation for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Whether `from` can be expanded to `to` by repeating size-1 axes.
pub fn broadcastable(from: Shape, to: Shape) -> bool {
    from.0.iter().zip(&to.0).all(|(&f, &t)| f == t || f == 1)
}

pub fn broadcast_to(a: &Tensor, to: Shape) -> Result<Tensor> {
    let from = a.shape();
    if !broadcastable(from, to) {
        return Err(Error::ShapeMismatch {
            op: "broadcast_to",
            left: from,
            right: to,
        });
    }
    if from == to {
        return Ok(a.clone());
    }
    let src = a.data();
    let mut out = Vec::with_capacity(to.numel());
    for b in 0..to.0[0] {
        let bb = if from.0[0] == 1 { 0 } else { b };
        for c in 0..to.0[1] {
            let cc = if from.0[1] == 1 { 0 } else { c };
            for i in 0..to.0[2] {
                let ii = if from.0[2] == 1 { 0 } else { i };
                if from.0[3] == 1 {
                    let v = src[from.offset(bb, cc, ii, 0)];
                    out.extend(std::iter::repeat(v).take(to.0[3]));
                } else {
                    let o = from.offset(bb, cc, ii, 0);
                    out.extend_from_slice(&src[o..o + to.0[3]]);
                }
            }
        }
    }
    Tensor::new(to, out)
}

/// Sum `a` down to `to`, collapsing every axis where `to` has extent 1.
pub fn sum_to(a: &Tensor, to: Shape) -> Result<Tensor> {
    let from = a.shape();
    if !broadcastable(to, from) {
        return Err(Error::ShapeMismatch {
            op: "sum_to",
            left: from,
            right: to,
        });
    }
    if from == to {
        return Ok(a.clone());
    }
    let mut out = vec![0.0; to.numel()];
    for (k, &v) in a.data().iter().enumerate() {
        let [b, c, i, j] = from.unravel(k);
        let idx = to.offset(
            if to.0[0] == 1 { 0 } else { b },
            if to.0[1] == 1 { 0 } else { c },
            if to.0[2] == 1 { 0 } else { i },
            if to.0[3] == 1 { 0 } else { j },
        );
        out[idx] += v;
    }
    Tensor::new(to, out)
}

/// `y[b, o, p] = Σ_i w[o, i] x[b, i, p]` for a (1, 1, C_out, C_in) weight.
pub fn conv1x1(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.b() != 1 || ws.c() != 1 || ws.w() != xs.c() {
        return Err(Error::ShapeMismatch {
            op: "conv1x1",
            left: xs,
            right: ws,
        });
    }
    let (co, ci, hw) = (ws.h(), ws.w(), xs.h() * xs.w());
    let mut out = vec![0.0; xs.b() * co * hw];
    let (xd, wd) = (x.data(), w.data());
    for b in 0..xs.b() {
        for o in 0..co {
            let dst = &mut out[(b * co + o) * hw..(b * co + o + 1) * hw];
            for i in 0..ci {
                let wv = wd[o * ci + i];
                if wv == 0.0 {
                    continue;
                }
                let src = &xd[(b * ci + i) * hw..(b * ci + i + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    Tensor::new(xs.with_channels(co), out)
}

/// Gradients of [`conv1x1`] with respect to input and weight.
pub fn conv1x1_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let (co, ci, hw) = (ws.h(), ws.w(), xs.h() * xs.w());
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    for b in 0..xs.b() {
        for o in 0..co {
            let gsl = &gd[(b * co + o) * hw..(b * co + o + 1) * hw];
            for i in 0..ci {
                let xsl = &xd[(b * ci + i) * hw..(b * ci + i + 1) * hw];
                let wv = wd[o * ci + i];
                let gxs = &mut gx[(b * ci + i) * hw..(b * ci + i + 1) * hw];
                let mut acc = 0.0;
                for p in 0..hw {
                    gxs[p] += wv * gsl[p];
                    acc += gsl[p] * xsl[p];
                }
                gw[o * ci + i] += acc;
            }
        }
    }
    (
        Tensor::new(xs, gx).expect("conv1x1 grad shape"),
        Tensor::new(ws, gw).expect("conv1x1 grad shape"),
    )
}

/// Same-padded 3x3 convolution with a (C_out, C_in, 3, 3) weight.
pub fn conv3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c() != xs.c() || ws.h() != 3 || ws.w() != 3 {
        return Err(Error::ShapeMismatch {
            op: "conv3x3",
            left: xs,
            right: ws,
        });
    }
    let (co, ci, h, wd) = (ws.b(), xs.c(), xs.h(), xs.w());
    let os = xs.with_channels(co);
    let mut out = vec![0.0; os.numel()];
    let (xv, wv) = (x.data(), w.data());
    for b in 0..xs.b() {
        for o in 0..co {
            for c in 0..ci {
                for di in 0..3 {
                    for dj in 0..3 {
                        let k = wv[((o * ci + c) * 3 + di) * 3 + dj];
                        if k == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let si = i as isize + di as isize - 1;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..wd {
                                let sj = j as isize + dj as isize - 1;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                out[os.offset(b, o, i, j)] +=
                                    k * xv[xs.offset(b, c, si as usize, sj as usize)];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

pub fn conv3x3_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let gs = g.shape();
    let (co, ci, h, wd) = (ws.b(), xs.c(), xs.h(), xs.w());
    let (xv, wv, gv) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; xv.len()];
    let mut gw = vec![0.0; wv.len()];
    for b in 0..xs.b() {
        for o in 0..co {
            for c in 0..ci {
                for di in 0..3 {
                    for dj in 0..3 {
                        let widx = ((o * ci + c) * 3 + di) * 3 + dj;
                        let k = wv[widx];
                        let mut acc = 0.0;
                        for i in 0..h {
                            let si = i as isize + di as isize - 1;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..wd {
                                let sj = j as isize + dj as isize - 1;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                let gval = gv[gs.offset(b, o, i, j)];
                                let xo = xs.offset(b, c, si as usize, sj as usize);
                                acc += gval * xv[xo];
                                gx[xo] += k * gval;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(xs, gx).expect("conv3x3 grad shape"),
        Tensor::new(ws, gw).expect("conv3x3 grad shape"),
    )
}

/// `out[b, 0, i, j] = mean_c x[b, c, i, j]`.
pub fn channel_mean(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.h() * s.w();
    let mut out = vec![0.0; s.b() * hw];
    for b in 0..s.b() {
        let dst = &mut out[b * hw..(b + 1) * hw];
        for c in 0..s.c() {
            let src = &x.data()[(b * s.c() + c) * hw..(b * s.c() + c + 1) * hw];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        let inv = 1.0 / s.c() as f64;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Tensor::new(s.with_channels(1), out).expect("channel_mean shape")
}

fn bmm_shape(a: Shape, b: Shape) -> Result<Shape> {
    let ok_batch = |x: usize, y: usize| x == y || x == 1 || y == 1;
    if a.w() != b.h() || !ok_batch(a.b(), b.b()) || !ok_batch(a.c(), b.c()) {
        return Err(Error::ShapeMismatch {
            op: "bmm",
            left: a,
            right: b,
        });
    }
    Ok(Shape::new(a.b().max(b.b()), a.c().max(b.c()), a.h(), b.w()))
}

/// Batched matrix product over the last two axes, broadcasting size-1 leading axes.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    bmm_impl(a, false, b, false)
}

/// `op(a) · op(b)` where `op` optionally transposes the trailing matrix.
fn bmm_impl(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let view = |s: Shape, t: bool| if t { Shape::new(s.b(), s.c(), s.w(), s.h()) } else { s };
    let (asv, bsv) = (view(a.shape(), ta), view(b.shape(), tb));
    let os = bmm_shape(asv, bsv)?;
    let (m, k, n) = (asv.h(), asv.w(), bsv.w());
    let (ad, bd) = (a.data(), b.data());
    let (a_rs, a_cs) = if ta { (1, m) } else { (k, 1) };
    let (b_rs, b_cs) = if tb { (1, k) } else { (n, 1) };
    let mut out = vec![0.0; os.numel()];
    for bb in 0..os.b() {
        for g in 0..os.c() {
            let ai = (if asv.b() == 1 { 0 } else { bb }) * asv.c() + if asv.c() == 1 { 0 } else { g };
            let bi = (if bsv.b() == 1 { 0 } else { bb }) * bsv.c() + if bsv.c() == 1 { 0 } else { g };
            let abase = ai * m * k;
            let bbase = bi * k * n;
            let obase = (bb * os.c() + g) * m * n;
            for r in 0..m {
                for q in 0..k {
                    let av = ad[abase + r * a_rs + q * a_cs];
                    if av == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        out[obase + r * n + c] += av * bd[bbase + q * b_rs + c * b_cs];
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

pub fn bmm_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let ga = bmm_impl(g, false, b, true)?;
    let gb = bmm_impl(a, true, g, false)?;
    Ok((sum_to(&ga, a.shape())?, sum_to(&gb, b.shape())?))
}

/// Softmax along the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let w = x.shape().w();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(x.shape(), out).expect("softmax shape")
}

pub fn softmax_last_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let w = y.shape().w();
    let mut out = vec![0.0; y.data().len()];
    for ((o, yr), gr) in out.chunks_mut(w).zip(y.data().chunks(w)).zip(g.data().chunks(w)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for k in 0..w {
            o[k] = yr[k] * (gr[k] - dot);
        }
    }
    Tensor::new(y.shape(), out).expect("softmax grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv1x1_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(Shape::new(1, 3, 2, 2), 1.0, &mut rng);
        let w = Tensor::randn(Shape::matrix(4, 3), 1.0, &mut rng);
        let y = conv1x1(&x, &w).unwrap();
        for o in 0..4 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        acc += w.get(0, 0, o, c) * x.get(0, c, i, j);
                    }
                    assert!((y.get(0, o, i, j) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv1x1_identity_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(Shape::new(2, 2, 3, 3), 1.0, &mut rng);
        let eye = Tensor::new(Shape::matrix(2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv1x1(&x, &eye).unwrap(), x);
        let swap = Tensor::new(Shape::matrix(2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = conv1x1(&x, &swap).unwrap();
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(y.get(b, 0, i, j), x.get(b, 1, i, j));
                    assert_eq!(y.get(b, 1, i, j), x.get(b, 0, i, j));
                }
            }
        }
    }

    #[test]
    fn conv1x1_dimension_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 3, 2, 2));
        let w = Tensor::zeros(Shape::matrix(2, 2));
        assert!(matches!(conv1x1(&x, &w), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn channel_mean_cases() {
        let x = Tensor::full(Shape::new(1, 4, 2, 2), 3.5);
        assert!(channel_mean(&x).data().iter().all(|&v| v == 3.5));
        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, 3.0]).unwrap();
        assert_eq!(channel_mean(&x).item(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(Shape::new(2, 5, 3, 3), 1.0, &mut rng);
        let m = channel_mean(&x);
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for c in 0..5 {
                        s += x.get(b, c, i, j);
                    }
                    assert!((m.get(b, 0, i, j) - s / 5.0).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn broadcast_and_sum_are_adjoint_shapes() {
        let a = Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let big = broadcast_to(&a, Shape::new(3, 2, 2, 2)).unwrap();
        assert_eq!(big.sum(), 3.0 * 4.0 * 3.0);
        let back = sum_to(&big, a.shape()).unwrap();
        assert_eq!(back.data(), &[12.0, 24.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(Shape::new(2, 3, 4, 5), 3.0, &mut rng);
        let y = softmax_last(&x);
        for row in y.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
