use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numkit::{Shape, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};

/// Where the factored-out half comes from in the inverse direction.
#[derive(Clone, Debug)]
pub enum LatentSource {
    /// A recorded latent, reproduced exactly.
    Given(Tensor),
    /// `x₂ = μ + τ·σ·ε` for standard-normal noise `ε`.
    Sample { temperature: f64, noise: Tensor },
}

/// Channel split whose second half is scored under a Gaussian with mean and
/// log-std from a zero-initialized 1x1 conv on the first half.
#[derive(Clone, Debug)]
pub struct SplitPrior {
    pub name: String,
    pub channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SplitPrior {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        if channels % 2 != 0 || channels < 2 {
            return Err(Error::Config(format!("split needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        Ok(SplitPrior {
            name: name.to_string(),
            channels,
            weight: params.add(format!("{name}.weight"), Tensor::zeros(Shape::matrix(channels, half)), true)?,
            bias: params.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, channels, 1, 1)), true)?,
        })
    }

    fn mean_logstd(&self, ctx: &mut Ctx, x1: Var) -> Result<(Var, Var)> {
        let half = self.channels / 2;
        let w = ctx.param(self.weight)?;
        let b = ctx.param(self.bias)?;
        let h = ctx.conv1x1(x1, w)?;
        let h = ctx.add_bcast(h, b)?;
        let mean = ctx.slice_channels(h, 0, half)?;
        let log_std = ctx.slice_channels(h, half, half)?;
        Ok((mean, log_std))
    }

    fn check(&self, ctx: &Ctx, x: Var) -> Result<()> {
        let s = ctx.shape(x);
        if s.c() != self.channels {
            return Err(Error::ShapeMismatch {
                op: "split",
                left: s,
                right: s.with_channels(self.channels),
            });
        }
        Ok(())
    }

    /// Returns `(x₁, x₂, log p(x₂ | x₁))` with the log-prob of shape (B, 1, 1, 1).
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var, Var)> {
        self.check(ctx, x)?;
        let half = self.channels / 2;
        let x1 = ctx.slice_channels(x, 0, half)?;
        let x2 = ctx.slice_channels(x, half, half)?;
        let (mean, log_std) = self.mean_logstd(ctx, x1)?;
        let lp = gaussian_log_prob(ctx, x2, mean, log_std)?;
        Ok((x1, x2, lp))
    }

    /// Reassemble the full tensor from `x₁` and a latent source.
    pub fn inverse(&self, ctx: &mut Ctx, x1: Var, source: &LatentSource) -> Result<Var> {
        let half = self.channels / 2;
        let s1 = ctx.shape(x1);
        if s1.c() != half {
            return Err(Error::ShapeMismatch {
                op: "split_inverse",
                left: s1,
                right: s1.with_channels(half),
            });
        }
        let x2 = match source {
            LatentSource::Given(t) => {
                t.expect_shape("split_inverse", s1)?;
                ctx.constant(t.clone())?
            }
            LatentSource::Sample { temperature, noise } => {
                noise.expect_shape("split_inverse", s1)?;
                let (mean, log_std) = self.mean_logstd(ctx, x1)?;
                let std = ctx.exp(log_std)?;
                let eps = ctx.constant(noise.clone())?;
                let scaled = ctx.mul(std, eps)?;
                let scaled = ctx.mul_scalar(scaled, *temperature)?;
                ctx.add(mean, scaled)?
            }
        };
        ctx.concat_channels(&[x1, x2])
    }
}

/// Per-sample `Σ log N(x; mean, exp(log_std)²)`.
pub(crate) fn gaussian_log_prob(ctx: &mut Ctx, x: Var, mean: Var, log_std: Var) -> Result<Var> {
    let d = ctx.sub(x, mean)?;
    let nls = ctx.neg(log_std)?;
    let inv = ctx.exp(nls)?;
    let z = ctx.mul(d, inv)?;
    let z2 = ctx.square(z)?;
    let z2 = ctx.mul_scalar(z2, -0.5)?;
    let lp = ctx.sub(z2, log_std)?;
    let lp = ctx.add_scalar(lp, -0.5 * (2.0 * PI).ln())?;
    ctx.sum_per_sample(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_latent_scores_standard_normal_peak() {
        let mut p = ParamStore::new();
        let sp = SplitPrior::new(&mut p, "sp", 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Tensor::randn(Shape::new(1, 4, 3, 3), 1.0, &mut rng);
        for c in 2..4 {
            for i in 0..3 {
                for j in 0..3 {
                    x.set(0, c, i, j, 0.0);
                }
            }
        }
        let mut ctx = Ctx::eval(&p);
        let xv = ctx.input(x).unwrap();
        let (_, _, lp) = sp.forward(&mut ctx, xv).unwrap();
        let d2 = 18.0;
        assert!((ctx.value(lp).item() + 0.5 * d2 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_temperature_gives_mean_and_recorded_latent_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::new();
        let sp = SplitPrior::new(&mut p, "sp", 2).unwrap();
        p.set(sp.weight, Tensor::randn(Shape::matrix(2, 1), 0.5, &mut rng)).unwrap();
        p.set(sp.bias, Tensor::randn(Shape::new(1, 2, 1, 1), 0.5, &mut rng)).unwrap();
        let x = Tensor::randn(Shape::new(2, 2, 2, 2), 1.0, &mut rng);
        let mut ctx = Ctx::eval(&p);
        let xv = ctx.input(x.clone()).unwrap();
        let (x1, x2, _) = sp.forward(&mut ctx, xv).unwrap();
        let recorded = ctx.value(x2).clone();
        let back = sp.inverse(&mut ctx, x1, &LatentSource::Given(recorded)).unwrap();
        assert_eq!(ctx.value(back), &x);

        let noise = Tensor::randn(Shape::new(2, 1, 2, 2), 1.0, &mut rng);
        let z = sp
            .inverse(&mut ctx, x1, &LatentSource::Sample { temperature: 0.0, noise })
            .unwrap();
        let (mean, _) = sp.mean_logstd(&mut ctx, x1).unwrap();
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(ctx.value(z).get(b, 1, i, j), ctx.value(mean).get(b, 0, i, j));
                }
            }
        }
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(SplitPrior::new(&mut ParamStore::new(), "sp", 3).is_err());
    }
}
