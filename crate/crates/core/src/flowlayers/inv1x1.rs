use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numkit::{Lu, Matrix, Shape, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};

use super::Bijection;

/// Invertible 1x1 convolution with `W = P·L·(U + diag(sign·exp(log_s)))`.
///
/// `P` and `sign` are fixed buffers; `L` is unit lower triangular and `U`
/// strictly upper triangular, so `W` is invertible for any parameter values.
#[derive(Clone, Debug)]
pub struct Inv1x1 {
    pub name: String,
    pub channels: usize,
    pub perm: ParamId,
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_s: ParamId,
    pub sign_s: ParamId,
}

/// Haar-ish random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
pub fn random_rotation(n: usize, rng: &mut impl Rng) -> Matrix {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for u in &cols {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
        if ok {
            let mut m = Matrix::zeros(n, n);
            for (j, col) in cols.iter().enumerate() {
                for i in 0..n {
                    m.data[i * n + j] = col[i];
                }
            }
            return m;
        }
    }
}

impl Inv1x1 {
    /// Initialize from the LU factors of a random rotation.
    pub fn new(params: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = random_rotation(channels, rng);
        Self::from_matrix(params, name, &w)
    }

    /// Initialize from an arbitrary invertible matrix.
    pub fn from_matrix(params: &mut ParamStore, name: &str, w: &Matrix) -> Result<Self> {
        let n = w.rows;
        let lu = Lu::factorize(n, &w.data)?;
        let l = lu.lower();
        let u = lu.upper();
        let mut lower = Matrix::zeros(n, n);
        let mut upper = Matrix::zeros(n, n);
        let mut log_s = Vec::with_capacity(n);
        let mut sign = Vec::with_capacity(n);
        for i in 0..n {
            for j in 0..n {
                if j < i {
                    lower.data[i * n + j] = l.at(i, j);
                } else if j > i {
                    upper.data[i * n + j] = u.at(i, j);
                }
            }
            let d = u.at(i, i);
            log_s.push(d.abs().ln());
            sign.push(if d < 0.0 { -1.0 } else { 1.0 });
        }
        let mat = |m: Matrix| Tensor::new(Shape::matrix(n, n), m.data);
        Ok(Inv1x1 {
            name: name.to_string(),
            channels: n,
            perm: params.add(format!("{name}.perm"), mat(lu.permutation_matrix())?, false)?,
            lower: params.add(format!("{name}.lower"), mat(lower)?, true)?,
            upper: params.add(format!("{name}.upper"), mat(upper)?, true)?,
            log_s: params.add(format!("{name}.log_s"), Tensor::new(Shape::matrix(1, n), log_s)?, true)?,
            sign_s: params.add(format!("{name}.sign_s"), Tensor::new(Shape::matrix(1, n), sign)?, false)?,
        })
    }

    fn triangular_masks(&self) -> (Tensor, Tensor) {
        let n = self.channels;
        let lower = Tensor::from_fn(Shape::matrix(n, n), |[_, _, i, j]| if j < i { 1.0 } else { 0.0 });
        let upper = Tensor::from_fn(Shape::matrix(n, n), |[_, _, i, j]| if j > i { 1.0 } else { 0.0 });
        (lower, upper)
    }

    /// The weight matrix on the tape, differentiable in L, U and log_s.
    pub fn weight(&self, ctx: &mut Ctx) -> Result<Var> {
        let n = self.channels;
        let (ml, mu) = self.triangular_masks();
        let eye = Tensor::from_fn(Shape::matrix(n, n), |[_, _, i, j]| if i == j { 1.0 } else { 0.0 });
        let l = ctx.param(self.lower)?;
        let l = ctx.mul_const(l, &ml)?;
        let eye = ctx.constant(eye)?;
        let l = ctx.add(l, eye)?;
        let u = ctx.param(self.upper)?;
        let u = ctx.mul_const(u, &mu)?;
        let ls = ctx.param(self.log_s)?;
        let s = ctx.exp(ls)?;
        let sign = ctx.param(self.sign_s)?;
        let s = ctx.mul(s, sign)?;
        let diag_index: Arc<[usize]> = (0..n).map(|i| i * n + i).collect();
        let d = ctx.scatter(s, Shape::matrix(n, n), diag_index)?;
        let u = ctx.add(u, d)?;
        let p = ctx.param(self.perm)?;
        let lu = ctx.bmm(l, u)?;
        ctx.bmm(p, lu)
    }

    /// Apply `W⁻¹ = U⁻¹·L⁻¹·Pᵀ` to every position by triangular solves.
    pub fn apply_inverse(&self, params: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let n = self.channels;
        let p = params.get(self.perm).data();
        let l = params.get(self.lower).data();
        let u = params.get(self.upper).data();
        let ls = params.get(self.log_s).data();
        let sg = params.get(self.sign_s).data();
        let diag: Vec<f64> = ls.iter().zip(sg).map(|(a, s)| s * a.exp()).collect();
        let s = y.shape();
        let hw = s.h() * s.w();
        let mut out = Tensor::zeros(s);
        let mut v = vec![0.0; n];
        for b in 0..s.b() {
            for q in 0..hw {
                // Pᵀ y
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi = (0..n)
                        .map(|r| p[r * n + i] * y.data()[(b * n + r) * hw + q])
                        .sum();
                }
                for i in 0..n {
                    for j in 0..i {
                        v[i] -= l[i * n + j] * v[j];
                    }
                }
                for i in (0..n).rev() {
                    for j in i + 1..n {
                        v[i] -= u[i * n + j] * v[j];
                    }
                    v[i] /= diag[i];
                }
                for (i, vi) in v.iter().enumerate() {
                    out.data_mut()[(b * n + i) * hw + q] = *vi;
                }
            }
        }
        out.check_finite("inv1x1_inverse")?;
        Ok(out)
    }
}

impl Bijection for Inv1x1 {
    fn forward(&self, ctx: &mut Ctx, x: Var, _cond: Option<Var>) -> Result<(Var, Var)> {
        let xs = ctx.shape(x);
        let w = self.weight(ctx)?;
        let y = ctx.conv1x1(x, w)?;
        let ls = ctx.param(self.log_s)?;
        let total = ctx.sum_all(ls)?;
        let total = ctx.mul_scalar(total, (xs.h() * xs.w()) as f64)?;
        let ld = ctx.broadcast_to(total, Shape::new(xs.b(), 1, 1, 1))?;
        Ok((y, ld))
    }

    fn inverse(&self, ctx: &mut Ctx, y: Var, _cond: Option<Var>) -> Result<Var> {
        let x = self.apply_inverse(ctx.params(), ctx.value(y))?;
        ctx.constant(x)
    }
}
