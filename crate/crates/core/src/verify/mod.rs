//! Numerical oracles: dense finite-difference Jacobians, round trips,
//! block-structure checks and gradient checks. Each check yields an
//! [`OracleReport`]; layer errors become failed reports instead of aborting.

mod subjects;
mod suite;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::write_file;
use crate::error::{Error, Result};
use crate::flowmodel::FlowModel;
use crate::numkit::{Lu, Matrix, Shape, Tensor};
use crate::par::Execution;
use crate::params::Ctx;
use crate::training::{condition_for, nll_per_dim};

pub use subjects::{
    jitter_params, layer_zoo, LayerSubject, SignFlipped, SkippedInverseHalf, Transform, BROKEN_IMAP, LAYER_KINDS,
};
pub use suite::{
    config_label, gradcheck_configs, gradchecks, jittered_model, layer_jacobians, layer_roundtrips, model_matrix,
    model_roundtrips, mutants, run_suite, suite_names, SuiteOptions,
};

/// Largest dimension assembled as a dense Jacobian.
pub const MAX_DENSE_DIM: usize = 256;
pub const FD_EPS: f64 = 1e-5;
pub const LOGDET_TOL: f64 = 1e-5;
/// Agreement required between the central and forward-difference assemblies.
pub const CROSS_CHECK_TOL: f64 = 1e-3;
pub const BLOCK_TOL: f64 = 1e-10;
pub const LAYER_ROUNDTRIP_TOL: f64 = 1e-8;
pub const MODEL_ROUNDTRIP_TOL: f64 = 1e-7;
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub subject: String,
    pub check: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seed: u64,
    pub detail: String,
}

impl OracleReport {
    pub fn new(subject: impl Into<String>, check: impl Into<String>, measured: f64, tolerance: f64, seed: u64) -> Self {
        OracleReport {
            subject: subject.into(),
            check: check.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            seed,
            detail: String::new(),
        }
    }

    pub fn error(subject: impl Into<String>, check: impl Into<String>, tolerance: f64, seed: u64, err: &Error) -> Self {
        OracleReport {
            detail: err.to_string(),
            ..Self::new(subject, check, f64::INFINITY, tolerance, seed)
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    /// Report for a corrupted subject: passes when the inner check failed.
    pub fn expect_failure(inner: OracleReport) -> Self {
        OracleReport {
            check: format!("mutant:{}", inner.check),
            passed: !inner.passed,
            detail: format!("inner check {}", if inner.passed { "passed" } else { "failed" }),
            ..inner
        }
    }
}

pub const REPORT_HEADER: [&str; 7] = ["subject", "check", "measured", "tolerance", "passed", "seed", "detail"];

pub fn reports_csv(reports: &[OracleReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(format!("report csv: {e}"));
    w.write_record(REPORT_HEADER).map_err(fail)?;
    for r in reports {
        w.write_record([
            r.subject.clone(),
            r.check.clone(),
            format!("{:e}", r.measured),
            format!("{:e}", r.tolerance),
            r.passed.to_string(),
            r.seed.to_string(),
            r.detail.clone(),
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("report csv: {e}")))
}

pub fn write_reports(reports: &[OracleReport], path: impl AsRef<Path>) -> Result<()> {
    write_file(path, &reports_csv(reports)?)
}

/// `|a − b| / max(|b|, 1)`.
pub fn relative_error(a: f64, reference: f64) -> f64 {
    (a - reference).abs() / reference.abs().max(1.0)
}

/// Central and forward-difference Jacobians of `f` at a single sample `x`
/// (rows index outputs, columns inputs, both flattened C·H·W). All `2D + 1`
/// probes go through `f` as one batch.
pub fn fd_jacobians(f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f64) -> Result<(Matrix, Matrix)> {
    let s = x.shape();
    let d = s.sample_len();
    if s.b() != 1 {
        return Err(Error::Config(format!("finite-difference Jacobians take one sample, got {s}")));
    }
    if d > MAX_DENSE_DIM {
        return Err(Error::Config(format!("dimension {d} exceeds the dense limit {MAX_DENSE_DIM}")));
    }
    let mut probes = Vec::with_capacity((2 * d + 1) * d);
    probes.extend_from_slice(x.data());
    for k in 0..d {
        for sign in [1.0, -1.0] {
            let start = probes.len();
            probes.extend_from_slice(x.data());
            probes[start + k] += sign * eps;
        }
    }
    let y = f(&Tensor::new(s.with_batch(2 * d + 1), probes)?)?;
    if y.shape().sample_len() != d || y.shape().b() != 2 * d + 1 {
        return Err(Error::Config(format!("transform is not dimension-preserving: {} from {s}", y.shape())));
    }
    y.check_finite("fd_jacobian")?;
    let yd = y.data();
    let (mut central, mut forward) = (Matrix::zeros(d, d), Matrix::zeros(d, d));
    for k in 0..d {
        let (plus, minus) = (&yd[(1 + 2 * k) * d..(2 + 2 * k) * d], &yd[(2 + 2 * k) * d..(3 + 2 * k) * d]);
        for r in 0..d {
            central.data[r * d + k] = (plus[r] - minus[r]) / (2.0 * eps);
            forward.data[r * d + k] = (plus[r] - yd[r]) / eps;
        }
    }
    Ok((central, forward))
}

pub fn logabsdet(m: &Matrix) -> Result<f64> {
    Ok(Lu::factorize(m.rows, &m.data)?.sign_logabsdet().1)
}

/// `log |det J|` of `f` at `x` from a central-difference Jacobian.
pub fn fd_jacobian_logdet(f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f64) -> Result<f64> {
    logabsdet(&fd_jacobians(f, x, eps)?.0)
}

/// Analytic log-det against the dense oracle at input `x` (one sample).
pub fn logdet_check(t: &dyn Transform, x: &Tensor, seed: u64) -> OracleReport {
    let subject = t.name();
    let run = || -> Result<OracleReport> {
        let analytic = t.forward(x)?.1.item();
        let (central, forward) = fd_jacobians(&|v| Ok(t.forward(v)?.0), x, FD_EPS)?;
        let (lc, lf) = (logabsdet(&central)?, logabsdet(&forward)?);
        let report = OracleReport::new(&subject, "fd_logdet", relative_error(analytic, lc), LOGDET_TOL, seed);
        let cross = relative_error(lf, lc);
        Ok(if cross > CROSS_CHECK_TOL {
            OracleReport {
                passed: false,
                ..report
            }
            .with_detail(format!("forward-difference assembly disagrees by {cross:e}"))
        } else {
            report.with_detail(format!("analytic {analytic:.12e}, oracle {lc:.12e}"))
        })
    };
    run().unwrap_or_else(|e| OracleReport::error(&subject, "fd_logdet", LOGDET_TOL, seed, &e))
}

/// Largest `|∂y_A / ∂x_B|` with `a_indicator` (1, C|1, H, W) marking half A.
pub fn block_structure_check(t: &dyn Transform, x: &Tensor, a_indicator: &Tensor, seed: u64) -> OracleReport {
    let subject = t.name();
    let run = || -> Result<OracleReport> {
        let s = x.shape();
        let ind = a_indicator.shape();
        let in_a: Vec<bool> = (0..s.sample_len())
            .map(|k| {
                let [_, c, i, j] = s.unravel(k);
                let c = if ind.c() == 1 { 0 } else { c };
                let (i, j) = (if ind.h() == 1 { 0 } else { i }, if ind.w() == 1 { 0 } else { j });
                a_indicator.get(0, c, i, j) != 0.0
            })
            .collect();
        let (j, _) = fd_jacobians(&|v| Ok(t.forward(v)?.0), x, FD_EPS)?;
        let d = j.rows;
        let mut worst: f64 = 0.0;
        for r in (0..d).filter(|&r| in_a[r]) {
            for c in (0..d).filter(|&c| !in_a[c]) {
                worst = worst.max(j.data[r * d + c].abs());
            }
        }
        Ok(OracleReport::new(&subject, "block_structure", worst, BLOCK_TOL, seed))
    };
    run().unwrap_or_else(|e| OracleReport::error(&subject, "block_structure", BLOCK_TOL, seed, &e))
}

/// Max over seeds of `‖x − inv(fwd(x))‖∞`; `make(seed)` builds the subject
/// and its input. Seeds run through `exec`, merged in order.
pub fn roundtrip_check<T, F>(name: &str, seeds: &[u64], tol: f64, exec: Execution, make: F) -> OracleReport
where
    T: Transform,
    F: Fn(u64) -> Result<(T, Tensor)> + Sync + Send,
{
    let per_seed = exec.map_range(seeds.len(), |k| -> Result<f64> {
        let (t, x) = make(seeds[k])?;
        let (y, _) = t.forward(&x)?;
        Ok(t.inverse(&y)?.max_abs_diff(&x))
    });
    let mut worst: f64 = 0.0;
    let mut worst_seed = seeds.first().copied().unwrap_or(0);
    for (k, r) in per_seed.into_iter().enumerate() {
        match r {
            Ok(e) if !(e <= worst) => {
                worst = e;
                worst_seed = seeds[k];
            }
            Ok(_) => {}
            Err(e) => return OracleReport::error(name, "roundtrip", tol, seeds[k], &e),
        }
    }
    OracleReport::new(name, "roundtrip", worst, tol, worst_seed).with_detail(format!("{} seeds", seeds.len()))
}

/// Whole-model round trip through `encode` / `decode`.
pub fn model_roundtrip(model: &FlowModel, x: &Tensor) -> Result<f64> {
    let cond = condition_for(model, x)?;
    Ok(model.reconstruct(x, cond.as_ref())?.1)
}

/// How the analytic adjoint is used by [`gradcheck_all`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMutation {
    None,
    /// Compare against the negated adjoint.
    NegateAdjoint,
}

/// Backward adjoint of the training loss against central differences for
/// every element of every trainable parameter; one report per parameter.
/// The error per element is `|a − n| / max(|a|, |n|, floor / tol)`, so
/// differences below the absolute floor always pass.
pub fn gradcheck_all(
    model: &FlowModel,
    x: &Tensor,
    exec: Execution,
    mutation: GradMutation,
    seed: u64,
) -> Result<Vec<OracleReport>> {
    let cond = condition_for(model, x)?;
    let adjoint = {
        let mut ctx = Ctx::new(model.params(), true);
        let xv = ctx.input(x.clone())?;
        let cv = cond.clone().map(|c| ctx.input(c)).transpose()?;
        let out = model.forward(&mut ctx, xv, cv)?;
        let total = ctx.sum_all(out.log_prob)?;
        let n = (x.shape().b() * model.config().dims()) as f64;
        let root = ctx.mul_scalar(total, -1.0 / n)?;
        ctx.param_grads(root)?
    };
    let sign = match mutation {
        GradMutation::None => 1.0,
        GradMutation::NegateAdjoint => -1.0,
    };
    let floor = GRAD_ABS_FLOOR / GRAD_TOL;
    let mut reports = Vec::new();
    for id in model.params().ids() {
        let entry = model.params().entry(id);
        if !entry.trainable {
            continue;
        }
        let len = entry.value.data().len();
        let numeric = exec.try_map_range(len, |k| {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.params_mut().get_mut(id).data_mut()[k] += delta;
                nll_per_dim(&m, x, cond.as_ref())
            };
            Ok((eval(FD_EPS)? - eval(-FD_EPS)?) / (2.0 * FD_EPS))
        })?;
        let zeros = Tensor::zeros(entry.value.shape());
        let a = adjoint[id.index()].as_ref().unwrap_or(&zeros);
        let mut worst: f64 = 0.0;
        for (&g, &n) in a.data().iter().zip(&numeric) {
            let g = sign * g;
            worst = worst.max((g - n).abs() / g.abs().max(n.abs()).max(floor));
        }
        reports.push(
            OracleReport::new(&entry.name, "gradcheck", worst, GRAD_TOL, seed).with_detail(format!("{len} elements")),
        );
    }
    Ok(reports)
}

/// Seeded standard-normal sample of `shape`.
pub fn seeded_input(shape: Shape, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_1A9E))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_map_logdet() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let ld = fd_jacobian_logdet(&|v| Ok(v.map(|a| 2.0 * a)), &x, FD_EPS).unwrap();
        assert!((ld - 4.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn squeeze_is_volume_preserving() {
        let x = seeded_input(Shape::new(1, 2, 4, 4), 3);
        let ld = fd_jacobian_logdet(&crate::flowlayers::squeeze, &x, FD_EPS).unwrap();
        assert!(ld.abs() < 1e-8);
    }

    #[test]
    fn dense_limit_enforced() {
        let x = Tensor::zeros(Shape::new(1, 1, 16, 17));
        assert!(fd_jacobian_logdet(&|v| Ok(v.clone()), &x, FD_EPS).is_err());
    }

    #[test]
    fn report_pass_rule() {
        assert!(OracleReport::new("s", "c", 1e-9, 1e-8, 0).passed);
        assert!(!OracleReport::new("s", "c", f64::NAN, 1e-8, 0).passed);
        let csv = String::from_utf8(reports_csv(&[OracleReport::new("s", "c", 0.5, 1.0, 2)]).unwrap()).unwrap();
        assert!(csv.starts_with("subject,check,measured"));
        assert!(csv.contains("s,c,5e-1,1e0,true,2,"));
    }
}
