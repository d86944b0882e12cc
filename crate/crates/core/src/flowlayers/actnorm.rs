use crate::error::{Error, Result};
use crate::numkit::{Shape, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};

use super::Bijection;

/// Per-channel affine normalization `y = s ⊙ x + b`, with `s = exp(log_s)`.
#[derive(Clone, Debug)]
pub struct Actnorm {
    pub name: String,
    pub channels: usize,
    pub log_s: ParamId,
    pub bias: ParamId,
    pub initialized: bool,
}

impl Actnorm {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let shape = Shape::new(1, channels, 1, 1);
        Ok(Actnorm {
            name: name.to_string(),
            channels,
            log_s: params.add(format!("{name}.log_s"), Tensor::zeros(shape), true)?,
            bias: params.add(format!("{name}.bias"), Tensor::zeros(shape), true)?,
            initialized: false,
        })
    }

    /// Set `s`, `b` so that this batch leaves the layer with per-channel mean 0
    /// and variance 1.
    pub fn data_init(&mut self, params: &mut ParamStore, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.c() != self.channels {
            return Err(Error::ShapeMismatch {
                op: "actnorm_init",
                left: s,
                right: Shape::new(s.b(), self.channels, s.h(), s.w()),
            });
        }
        let n = (s.b() * s.h() * s.w()) as f64;
        let mut log_s = Vec::with_capacity(s.c());
        let mut bias = Vec::with_capacity(s.c());
        for c in 0..s.c() {
            let vals = || {
                (0..s.b()).flat_map(move |b| {
                    (0..s.h()).flat_map(move |i| (0..s.w()).map(move |j| x.get(b, c, i, j)))
                })
            };
            let mean = vals().sum::<f64>() / n;
            let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let scale = 1.0 / var.max(1e-12).sqrt();
            log_s.push(scale.ln());
            bias.push(-mean * scale);
        }
        let shape = Shape::new(1, s.c(), 1, 1);
        params.set(self.log_s, Tensor::new(shape, log_s)?)?;
        params.set(self.bias, Tensor::new(shape, bias)?)?;
        self.initialized = true;
        Ok(())
    }

    fn logdet(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let xs = ctx.shape(x);
        let ls = ctx.param(self.log_s)?;
        let total = ctx.sum_all(ls)?;
        let scaled = ctx.mul_scalar(total, (xs.h() * xs.w()) as f64)?;
        ctx.broadcast_to(scaled, Shape::new(xs.b(), 1, 1, 1))
    }
}

impl Bijection for Actnorm {
    fn forward(&self, ctx: &mut Ctx, x: Var, _cond: Option<Var>) -> Result<(Var, Var)> {
        let ls = ctx.param(self.log_s)?;
        let s = ctx.exp(ls)?;
        let b = ctx.param(self.bias)?;
        let y = ctx.mul_bcast(x, s)?;
        let y = ctx.add_bcast(y, b)?;
        let ld = self.logdet(ctx, x)?;
        Ok((y, ld))
    }

    fn inverse(&self, ctx: &mut Ctx, y: Var, _cond: Option<Var>) -> Result<Var> {
        if !self.initialized {
            return Err(Error::NotInitialized(self.name.clone()));
        }
        let ls = ctx.param(self.log_s)?;
        let neg = ctx.neg(ls)?;
        let inv_s = ctx.exp(neg)?;
        let b = ctx.param(self.bias)?;
        let nb = ctx.neg(b)?;
        let centered = ctx.add_bcast(y, nb)?;
        ctx.mul_bcast(centered, inv_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(layer: &Actnorm, params: &ParamStore, x: &Tensor) -> (Tensor, Tensor) {
        let mut ctx = Ctx::eval(params);
        let v = ctx.input(x.clone()).unwrap();
        let (y, ld) = layer.forward(&mut ctx, v, None).unwrap();
        (ctx.value(y).clone(), ctx.value(ld).clone())
    }

    #[test]
    fn identity_at_unit_scale() {
        let mut p = ParamStore::new();
        let a = Actnorm::new(&mut p, "an", 3).unwrap();
        let x = Tensor::randn(Shape::new(2, 3, 2, 2), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (y, ld) = run(&a, &p, &x);
        assert_eq!(y, x);
        assert!(ld.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_logdet() {
        let mut p = ParamStore::new();
        let a = Actnorm::new(&mut p, "an", 1).unwrap();
        p.set(a.log_s, Tensor::scalar(2f64.ln())).unwrap();
        let (_, ld) = run(&a, &p, &Tensor::ones(Shape::new(1, 1, 2, 2)));
        assert!((ld.item() - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ld.item() - 2.77259).abs() < 1e-5);
    }

    #[test]
    fn data_init_normalizes_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = Tensor::randn(Shape::new(8, 3, 4, 4), 2.0, &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v += 1.5);
        let mut p = ParamStore::new();
        let mut a = Actnorm::new(&mut p, "an", 3).unwrap();
        let mut ctx = Ctx::eval(&p);
        let yv = ctx.input(x.clone()).unwrap();
        assert!(matches!(a.inverse(&mut ctx, yv, None), Err(Error::NotInitialized(_))));
        drop(ctx);

        a.data_init(&mut p, &x).unwrap();
        let (y, _) = run(&a, &p, &x);
        let s = y.shape();
        let n = (s.b() * s.h() * s.w()) as f64;
        for c in 0..3 {
            let vals: Vec<f64> = (0..s.numel())
                .filter(|&k| s.unravel(k)[1] == c)
                .map(|k| y.data()[k])
                .collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        }
        let mut ctx = Ctx::eval(&p);
        let yv = ctx.input(y).unwrap();
        let back = a.inverse(&mut ctx, yv, None).unwrap();
        assert!(ctx.value(back).max_abs_diff(&x) < 1e-10);
    }
}
