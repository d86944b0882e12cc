use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::kernels::log_sigmoid;
use crate::numkit::{Tensor, Var};
use crate::params::{Ctx, ParamStore};

use super::coupling::{clamp_log_scale, split_indicators};
use super::{Bijection, CouplingNet, CouplingSplit};

/// Bound on component log-scales: `log ŝ = 5 · tanh(raw / 5)`.
const COMPONENT_LOG_SCALE_BOUND: f64 = 5.0;
const BISECTION_TOL: f64 = 1e-10;
const BISECTION_MAX_ITERS: usize = 400;

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `logit(f(x))` for the mixture CDF `f(x) = Σ π_i σ((x − μ_i) e^{−log ŝ_i})`,
/// computed in the log domain as `log f − log (1 − f)`.
///
/// `log_pi` must be normalized (`Σ exp = 1`).
pub fn mixture_logit_cdf(x: f64, log_pi: &[f64], mu: &[f64], log_shat: &[f64]) -> f64 {
    let mut lf = f64::NEG_INFINITY;
    let mut l1mf = f64::NEG_INFINITY;
    for k in 0..log_pi.len() {
        let z = (x - mu[k]) * (-log_shat[k]).exp();
        lf = log_add_exp(lf, log_pi[k] + log_sigmoid(z));
        l1mf = log_add_exp(l1mf, log_pi[k] + log_sigmoid(-z));
    }
    lf - l1mf
}

/// Solve `mixture_logit_cdf(x) = target` by bisection.
fn invert_logit_cdf(target: f64, log_pi: &[f64], mu: &[f64], log_shat: &[f64], index: usize) -> Result<f64> {
    let smax = log_shat.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
    let mut lo = mu.iter().cloned().fold(f64::INFINITY, f64::min) - 20.0 * smax;
    let mut hi = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 20.0 * smax;
    let g = |x: f64| mixture_logit_cdf(x, log_pi, mu, log_shat) - target;
    let mut widen = 0;
    while g(lo) > 0.0 || g(hi) < 0.0 {
        let w = hi - lo;
        lo -= w;
        hi += w;
        widen += 1;
        if widen > 60 || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Bisection {
                index,
                detail: format!("no bracket for logit {target}"),
            });
        }
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..BISECTION_MAX_ITERS {
        mid = 0.5 * (lo + hi);
        let r = g(mid);
        if !r.is_finite() {
            return Err(Error::Bisection {
                index,
                detail: format!("non-finite residual at x = {mid}"),
            });
        }
        if r.abs() < BISECTION_TOL * 1e-2 || mid <= lo || mid >= hi {
            break;
        }
        if r > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let r = g(mid).abs();
    // At float resolution the residual can exceed the tolerance only when the
    // map is steeper than 1e-10 / ulp(x); treat that as converged.
    let ulp = f64::EPSILON * mid.abs().max(1.0);
    let slope = (g(mid + ulp) - g(mid - ulp)).abs() / (2.0 * ulp);
    if r >= BISECTION_TOL && r > 4.0 * slope * ulp {
        return Err(Error::Bisection {
            index,
            detail: format!("residual {r:e} after bisection"),
        });
    }
    Ok(mid)
}

/// Coupling whose transformed half goes through
/// `y = σ⁻¹(f(x)) · exp(log s) + t` with a K-component logistic mixture CDF `f`.
#[derive(Clone, Debug)]
pub struct MixtureCoupling {
    pub name: String,
    pub channels: usize,
    pub components: usize,
    pub split: CouplingSplit,
    pub net: CouplingNet,
}

struct MixtureParams {
    log_s: Var,
    t: Var,
    log_pi: Vec<Var>,
    mu: Vec<Var>,
    log_shat: Vec<Var>,
}

impl MixtureCoupling {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        components: usize,
        split: CouplingSplit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::Config(format!("{name}: mixture needs at least one component")));
        }
        split.check_channels(channels)?;
        let out = (2 + 3 * components) * channels;
        let net = CouplingNet::new(params, &format!("{name}.net"), channels, hidden, out, rng)?;
        Ok(MixtureCoupling {
            name: name.to_string(),
            channels,
            components,
            split,
            net,
        })
    }

    /// Net output channel layout: raw log s, t, then per component
    /// (π logit, μ, raw log ŝ), each C wide.
    fn mixture_params(&self, ctx: &mut Ctx, x: Var, keep: &Tensor) -> Result<MixtureParams> {
        let c = self.channels;
        let xa = ctx.mul_const(x, keep)?;
        let out = self.net.apply(ctx, xa)?;
        let raw = ctx.slice_channels(out, 0, c)?;
        let log_s = clamp_log_scale(ctx, raw)?;
        let t = ctx.slice_channels(out, c, c)?;
        let mut logits = Vec::with_capacity(self.components);
        let mut mu = Vec::with_capacity(self.components);
        let mut log_shat = Vec::with_capacity(self.components);
        for k in 0..self.components {
            let base = (2 + 3 * k) * c;
            logits.push(ctx.slice_channels(out, base, c)?);
            mu.push(ctx.slice_channels(out, base + c, c)?);
            let r = ctx.slice_channels(out, base + 2 * c, c)?;
            let r = ctx.mul_scalar(r, 1.0 / COMPONENT_LOG_SCALE_BOUND)?;
            let r = ctx.tanh(r)?;
            log_shat.push(ctx.mul_scalar(r, COMPONENT_LOG_SCALE_BOUND)?);
        }
        let norm = ctx.logsumexp(&logits)?;
        let log_pi = logits
            .into_iter()
            .map(|l| ctx.sub(l, norm))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureParams {
            log_s,
            t,
            log_pi,
            mu,
            log_shat,
        })
    }
}

impl Bijection for MixtureCoupling {
    fn forward(&self, ctx: &mut Ctx, x: Var, _cond: Option<Var>) -> Result<(Var, Var)> {
        let (keep, moved) = split_indicators(&self.split, ctx.shape(x))?;
        let mp = self.mixture_params(ctx, x, &keep)?;
        let mut lf_terms = Vec::with_capacity(self.components);
        let mut l1mf_terms = Vec::with_capacity(self.components);
        let mut dens_terms = Vec::with_capacity(self.components);
        for k in 0..self.components {
            let nls = ctx.neg(mp.log_shat[k])?;
            let inv = ctx.exp(nls)?;
            let centered = ctx.sub(x, mp.mu[k])?;
            let z = ctx.mul(centered, inv)?;
            let lsz = ctx.log_sigmoid(z)?;
            let nz = ctx.neg(z)?;
            let lsnz = ctx.log_sigmoid(nz)?;
            let a = ctx.add(mp.log_pi[k], lsz)?;
            let b = ctx.add(mp.log_pi[k], lsnz)?;
            let d = ctx.add(a, lsnz)?;
            let d = ctx.sub(d, mp.log_shat[k])?;
            lf_terms.push(a);
            l1mf_terms.push(b);
            dens_terms.push(d);
        }
        let lf = ctx.logsumexp(&lf_terms)?;
        let l1mf = ctx.logsumexp(&l1mf_terms)?;
        let log_dens = ctx.logsumexp(&dens_terms)?;

        let logit = ctx.sub(lf, l1mf)?;
        let s = ctx.exp(mp.log_s)?;
        let moved_y = ctx.mul(logit, s)?;
        let moved_y = ctx.add(moved_y, mp.t)?;
        let moved_y = ctx.mul_const(moved_y, &moved)?;
        let kept = ctx.mul_const(x, &keep)?;
        let y = ctx.add(kept, moved_y)?;

        let ld = ctx.sub(log_dens, lf)?;
        let ld = ctx.sub(ld, l1mf)?;
        let ld = ctx.add(ld, mp.log_s)?;
        let ld = ctx.mul_const(ld, &moved)?;
        let ld = ctx.sum_per_sample(ld)?;
        Ok((y, ld))
    }

    fn inverse(&self, ctx: &mut Ctx, y: Var, _cond: Option<Var>) -> Result<Var> {
        let shape = ctx.shape(y);
        let (keep, _) = split_indicators(&self.split, shape)?;
        let keep_full = crate::numkit::kernels::broadcast_to(&keep, shape)?;
        let mp = self.mixture_params(ctx, y, &keep)?;
        let yv = ctx.value(y);
        let ls = ctx.value(mp.log_s);
        let t = ctx.value(mp.t);
        let kk = self.components;
        let mut x = yv.clone();
        let mut log_pi = vec![0.0; kk];
        let mut mu = vec![0.0; kk];
        let mut log_shat = vec![0.0; kk];
        for idx in 0..shape.numel() {
            if keep_full.data()[idx] == 1.0 {
                continue;
            }
            let target = (yv.data()[idx] - t.data()[idx]) * (-ls.data()[idx]).exp();
            for k in 0..kk {
                log_pi[k] = ctx.value(mp.log_pi[k]).data()[idx];
                mu[k] = ctx.value(mp.mu[k]).data()[idx];
                log_shat[k] = ctx.value(mp.log_shat[k]).data()[idx];
            }
            x.data_mut()[idx] = invert_logit_cdf(target, &log_pi, &mu, &log_shat, idx)?;
        }
        ctx.constant(x)
    }
}
