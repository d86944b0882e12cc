//! Maximum-likelihood training with Adamax, global-norm clipping and a
//! linear learning-rate warmup.

mod checkpoint;

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{csv_append, downscale_area, Dataset, MetricsRow};
use crate::error::{Error, Result};
use crate::flowmodel::FlowModel;
use crate::numkit::Tensor;
use crate::par::Execution;
use crate::params::{Ctx, ParamStore};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Nats per dimension added by 8-bit uniform dequantization.
pub const DEQUANT_OFFSET: f64 = 5.545_177_444_479_562; // ln 256

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Target iteration count (resumed runs continue up to it).
    pub iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
    /// 0 writes a checkpoint only at exit.
    pub checkpoint_every: u64,
    pub warmup: u64,
    /// Samples per gradient chunk; chunks are reduced in order.
    pub grad_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 8e-4,
            batch: 32,
            iters: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 50.0,
            seed: 0,
            checkpoint_every: 0,
            warmup: 500,
            grad_chunk: 8,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", format!("{:?}", self.lr)),
            ("batch", self.batch.to_string()),
            ("iters", self.iters.to_string()),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            ("clip", format!("{:?}", self.clip)),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("warmup", self.warmup.to_string()),
            ("grad_chunk", self.grad_chunk.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "grad_chunk" => self.grad_chunk = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown train key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.grad_chunk == 0 {
            return bad("batch and grad_chunk must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.clip >= 0.0) {
            return bad("eps must be positive and clip non-negative");
        }
        Ok(())
    }

    /// Learning rate used for the update at 0-based iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((iter + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// Adamax moment estimates, one pair per parameter entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Adamax {
    pub m: Vec<Tensor>,
    pub u: Vec<Tensor>,
    /// Number of updates applied.
    pub t: u64,
}

impl Adamax {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Adamax {
            m: zeros.clone(),
            u: zeros,
            t: 0,
        }
    }

    /// One update with learning rate `lr`; missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer state for {} parameters, store has {}, gradients {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        check_grads(params, grads)?;
        self.t += 1;
        let step = lr / (1.0 - cfg.beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            if !params.entry(id).trainable {
                continue;
            }
            let (m, u) = (self.m[i].data_mut(), self.u[i].data_mut());
            let theta = params.get_mut(id).data_mut();
            for k in 0..theta.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data()[k]);
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                u[k] = (cfg.beta2 * u[k]).max(g.abs());
                theta[k] -= step * m[k] / (u[k] + cfg.eps);
            }
        }
        Ok(())
    }
}

fn check_grads(params: &ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
    for (e, g) in params.entries().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != e.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "gradient",
                    left: g.shape(),
                    right: e.value.shape(),
                });
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad(e.name.clone()));
            }
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Training loss: mean negative log-likelihood per dimension, plus the
/// dequantization offset.
pub fn nll_per_dim(model: &FlowModel, x: &Tensor, cond: Option<&Tensor>) -> Result<f64> {
    let lp = model.log_prob(x, cond)?;
    let n = (lp.data().len() * model.config().dims()) as f64;
    Ok(-lp.sum() / n + DEQUANT_OFFSET)
}

/// Loss and its gradient for every parameter. The batch is cut into chunks
/// of `chunk` samples whose gradients are summed in chunk order, so the
/// result does not depend on the execution mode.
pub fn loss_and_grads(
    model: &FlowModel,
    x: &Tensor,
    cond: Option<&Tensor>,
    chunk: usize,
    exec: Execution,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let b = x.shape().b();
    if b == 0 || chunk == 0 {
        return Err(Error::Config("empty batch or zero chunk size".into()));
    }
    let scale = -1.0 / (b * model.config().dims()) as f64;
    let parts = exec.try_map_range(b.div_ceil(chunk), |k| {
        let start = k * chunk;
        let len = chunk.min(b - start);
        let mut ctx = Ctx::new(model.params(), true);
        let xv = ctx.input(x.batch_slice(start, len))?;
        let cv = cond.map(|c| ctx.input(c.batch_slice(start, len))).transpose()?;
        let out = model.forward(&mut ctx, xv, cv)?;
        let total = ctx.sum_all(out.log_prob)?;
        let root = ctx.mul_scalar(total, scale)?;
        let value = ctx.value(root).item();
        Ok((value, ctx.param_grads(root)?))
    })?;
    let mut loss = 0.0;
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for (value, part) in parts {
        loss += value;
        for (acc, g) in grads.iter_mut().zip(part) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    Ok((loss + DEQUANT_OFFSET, grads))
}

/// Condition fed to conditional models: the 2x area-downscaled input.
pub fn condition_for(model: &FlowModel, x: &Tensor) -> Result<Option<Tensor>> {
    if model.config().conditional {
        Ok(Some(downscale_area(x, 2)?))
    } else {
        Ok(None)
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlowModel,
    pub config: TrainConfig,
    pub optimizer: Adamax,
    /// Completed iterations.
    pub iter: u64,
}

impl Trainer {
    pub fn new(model: FlowModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adamax::new(model.params());
        Ok(Trainer {
            model,
            config,
            optimizer,
            iter: 0,
        })
    }

    /// Batch for iteration `iter`: its own ChaCha stream of the run seed.
    pub fn batch_for(&self, data: &Dataset, iter: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iter);
        data.random_batch(self.config.batch, &mut rng)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let expected = self.model.input_shape(1);
        if data.image_shape() != expected {
            return Err(Error::Config(format!(
                "dataset images are {} but the model expects {}",
                data.image_shape(),
                expected
            )));
        }
        Ok(())
    }

    /// One optimizer step. On error the parameters and moments are untouched.
    pub fn step(&mut self, data: &Dataset, exec: Execution) -> Result<MetricsRow> {
        self.check_data(data)?;
        let start = Instant::now();
        let x = self.batch_for(data, self.iter)?;
        let cond = condition_for(&self.model, &x)?;
        if !self.model.is_initialized() {
            self.model.data_init(&x, cond.as_ref())?;
        }
        let (loss, mut grads) = loss_and_grads(&self.model, &x, cond.as_ref(), self.config.grad_chunk, exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter: self.iter });
        }
        check_grads(self.model.params(), &grads)?;
        let grad_norm = clip_global_norm(&mut grads, self.config.clip);
        let lr = self.config.lr_at(self.iter);
        self.optimizer.step(self.model.params_mut(), &grads, lr, &self.config)?;
        self.iter += 1;
        Ok(MetricsRow {
            iter: self.iter,
            nll: loss,
            bpd: loss / std::f64::consts::LN_2,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Train until `config.iters` iterations are complete. With `out`, each
    /// row is appended to `out/metrics.csv` and `out/checkpoint.afck` is
    /// written on schedule and at exit; on failure the checkpoint holds the
    /// last good state.
    pub fn run(&mut self, data: &Dataset, exec: Execution, out: Option<&Path>) -> Result<Vec<MetricsRow>> {
        self.run_with(data, exec, out, &mut |_, _| Ok(()))
    }

    /// [`Trainer::run`], calling `on_checkpoint` after every checkpoint
    /// written on schedule or at a successful exit.
    pub fn run_with(
        &mut self,
        data: &Dataset,
        exec: Execution,
        out: Option<&Path>,
        on_checkpoint: &mut dyn FnMut(&Trainer, &Path) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.iter < self.config.iters {
            let row = match self.step(data, exec) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = out {
                        save_checkpoint(self, dir.join(CHECKPOINT_FILE))?;
                    }
                    return Err(e);
                }
            };
            if let Some(dir) = out {
                csv_append(&row, dir.join(METRICS_FILE))?;
                let every = self.config.checkpoint_every;
                if every > 0 && self.iter % every == 0 && self.iter < self.config.iters {
                    save_checkpoint(self, dir.join(CHECKPOINT_FILE))?;
                    on_checkpoint(self, dir)?;
                }
            }
            rows.push(row);
        }
        if let Some(dir) = out {
            save_checkpoint(self, dir.join(CHECKPOINT_FILE))?;
            on_checkpoint(self, dir)?;
        }
        Ok(rows)
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.afck";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trailing moving average with the given window (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::toy2d_grid;
    use crate::flowmodel::ModelConfig;
    use crate::params::ParamId;
    use rand::Rng;

    fn single_param(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::scalar(v), true).unwrap();
        p
    }

    #[test]
    fn adamax_first_step_moves_by_lr() {
        let mut p = single_param(1.0);
        let mut opt = Adamax::new(&p);
        let cfg = TrainConfig::default();
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))], 0.1, &cfg).unwrap();
        let theta = p.get(ParamId(0)).item();
        assert!((theta - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adamax_zero_gradient_is_noop() {
        let mut p = single_param(0.25);
        let mut opt = Adamax::new(&p);
        for _ in 0..5 {
            opt.step(&mut p, &[Some(Tensor::scalar(0.0))], 0.1, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p.get(ParamId(0)).item(), 0.25);
    }

    #[test]
    fn adamax_rejects_nan_with_name() {
        let mut p = single_param(0.0);
        let mut opt = Adamax::new(&p);
        let err = opt
            .step(&mut p, &[Some(Tensor::scalar(f64::NAN))], 0.1, &TrainConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGrad(ref n) if n == "w"));
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g: Vec<Option<Tensor>> = (0..3)
                .map(|k| Some(Tensor::randn(crate::numkit::Shape::new(1, k + 1, 2, 2), rng.gen_range(1.0..100.0), &mut rng)))
                .collect();
            let mut c = g.clone();
            let before = clip_global_norm(&mut c, 5.0);
            let after = global_norm(&c);
            assert!(after <= 5.0 + 1e-12);
            let s = after / before;
            for (a, b) in g.iter().flatten().zip(c.iter().flatten()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x * s - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn warmup_ramps_linearly() {
        let c = TrainConfig {
            warmup: 4,
            lr: 1.0,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|i| c.lr_at(i)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn config_text_round_trip() {
        let c = TrainConfig {
            lr: 1e-3,
            iters: 7,
            seed: 9,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(TrainConfig::from_text("momentum = 0.9").is_err());
    }

    fn small_model() -> FlowModel {
        FlowModel::build(ModelConfig {
            channels: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn identity_init_loss_is_gaussian() {
        let mut m = small_model();
        m.initialize_identity();
        let x = Tensor::randn(m.input_shape(4), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let d = m.config().dims() as f64;
        let expected = x.data().iter().map(|v| 0.5 * v * v).sum::<f64>() / (4.0 * d)
            + 0.5 * (2.0 * std::f64::consts::PI).ln()
            + 256f64.ln();
        let got = nll_per_dim(&m, &x, None).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn chunking_does_not_change_loss() {
        let mut m = small_model();
        m.initialize_identity();
        let x = Tensor::randn(m.input_shape(6), 0.5, &mut ChaCha8Rng::seed_from_u64(2));
        let (l1, g1) = loss_and_grads(&m, &x, None, 6, Execution::Sequential).unwrap();
        let (l2, g2) = loss_and_grads(&m, &x, None, 4, Execution::Sequential).unwrap();
        let (l3, g3) = loss_and_grads(&m, &x, None, 4, Execution::with_threads(3)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert_eq!(l2.to_bits(), l3.to_bits());
        assert_eq!(g2, g3);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn short_run_is_deterministic_and_finite() {
        let data = toy2d_grid("checker-density", 8, 64, 0).unwrap();
        let cfg = TrainConfig {
            iters: 5,
            batch: 8,
            ..TrainConfig::default()
        };
        let mut a = Trainer::new(small_model(), cfg.clone()).unwrap();
        let mut b = Trainer::new(small_model(), cfg).unwrap();
        let ra = a.run(&data, Execution::Sequential, None).unwrap();
        let rb = b.run(&data, Execution::with_threads(2), None).unwrap();
        assert_eq!(ra.len(), 5);
        for (x, y) in ra.iter().zip(&rb) {
            assert!(x.nll.is_finite());
            assert_eq!(x.nll.to_bits(), y.nll.to_bits());
        }
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.model.is_initialized());
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
