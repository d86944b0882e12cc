//! Multi-scale flow: L levels of (squeeze, K steps, split), a standard-normal
//! prior on the final latent and learned Gaussian priors on every split.

mod config;

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{AttentionKind, AttentionPosition, CouplingKind, MaskChoice, ModelConfig};

use crate::attention::{IMap, ISdp, ISdpOptions};
use crate::error::{Error, Result};
use crate::flowlayers::{
    Actnorm, AffineCoupling, Bijection, CondInjector, ConditionEncoder, CouplingSplit, FlowLayer, Inv1x1,
    LatentSource, MixtureCoupling, SplitPrior, Squeeze,
};
use crate::masking::{make_mask_2d, make_mask_3d};
use crate::numkit::{Shape, Tensor, Var};
use crate::params::{Ctx, ParamStore};

/// One resolution of the flow.
#[derive(Clone, Debug)]
pub struct Level {
    /// (C, H, W) after the level's squeeze.
    pub shape: (usize, usize, usize),
    /// Squeeze first, then the step layers.
    pub layers: Vec<FlowLayer>,
    /// Absent on the last level.
    pub split: Option<SplitPrior>,
    pub encoder: Option<ConditionEncoder>,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    config: ModelConfig,
    params: ParamStore,
    levels: Vec<Level>,
}

/// Tape handles produced by [`FlowModel::forward`].
pub struct ModelOutput {
    /// Split latents in level order, then the final latent.
    pub z: Vec<Var>,
    /// Sum of layer log-determinants, (B, 1, 1, 1).
    pub logdet: Var,
    /// Split priors plus the final standard-normal prior, (B, 1, 1, 1).
    pub log_prior: Var,
    pub log_prob: Var,
    pub layer_logdets: Vec<Var>,
    pub split_log_probs: Vec<Var>,
}

/// `−logp / (D ln 2) + 8` for 8-bit data rescaled to [0, 1).
pub fn bits_per_dim(logp: f64, dims: usize) -> f64 {
    -logp / (dims as f64 * LN_2) + 8.0
}

/// Per-sample `Σ log N(z; 0, 1)`.
fn standard_normal_log_prob(ctx: &mut Ctx, z: Var) -> Result<Var> {
    let sq = ctx.square(z)?;
    let lp = ctx.mul_scalar(sq, -0.5)?;
    let lp = ctx.add_scalar(lp, -0.5 * (2.0 * PI).ln())?;
    ctx.sum_per_sample(lp)
}

fn derive_seed(base: u64, k: u64) -> u64 {
    let mut z = base.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn accumulate(ctx: &mut Ctx, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        None => v,
        Some(a) => ctx.add(a, v)?,
    }))
}

impl FlowModel {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (mut c, mut h, mut w) = (config.input_channels, config.input_height, config.input_width);
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            c *= 4;
            h /= 2;
            w /= 2;
            let mut layers = vec![FlowLayer::Squeeze(Squeeze)];
            let encoder = if config.conditional {
                Some(ConditionEncoder::new(
                    &mut params,
                    &format!("l{l}.encoder"),
                    config.input_channels,
                    config.channels,
                    config.cond_features,
                    &mut rng,
                )?)
            } else {
                None
            };
            for k in 0..config.steps {
                let name = format!("l{l}.s{k}");
                let phase = ((config.mask_phase as usize + k) % 2) as u8;
                let attention = Self::build_attention(&config, &mut params, &name, (c, h, w), phase, &mut rng)?;
                let slot = |layers: &mut Vec<FlowLayer>, pos: AttentionPosition| {
                    if config.position == pos {
                        if let Some(a) = &attention {
                            layers.push(a.clone());
                        }
                    }
                };
                slot(&mut layers, AttentionPosition::Pos1);
                layers.push(FlowLayer::Actnorm(Actnorm::new(&mut params, &format!("{name}.actnorm"), c)?));
                slot(&mut layers, AttentionPosition::Pos2);
                layers.push(FlowLayer::Inv1x1(Inv1x1::new(&mut params, &format!("{name}.inv1x1"), c, &mut rng)?));
                slot(&mut layers, AttentionPosition::Pos3);
                let split = match config.mask {
                    MaskChoice::Channel => CouplingSplit::Channel,
                    MaskChoice::Checkerboard => CouplingSplit::Mask(make_mask_2d(h, w, phase)),
                    MaskChoice::Permuted3D => {
                        let seed = derive_seed(config.mask_seed, (l * config.steps + k) as u64);
                        CouplingSplit::Mask(make_mask_3d(c, h, w, seed)?)
                    }
                };
                let cname = format!("{name}.coupling");
                if config.conditional {
                    let f = config.cond_features;
                    layers.push(FlowLayer::Injector(CondInjector::new(
                        &mut params,
                        &format!("{name}.injector"),
                        c,
                        config.channels,
                        f,
                        &mut rng,
                    )?));
                    layers.push(FlowLayer::CondAffine(AffineCoupling::with_condition(
                        &mut params,
                        &cname,
                        c,
                        config.channels,
                        split,
                        f,
                        &mut rng,
                    )?));
                } else {
                    layers.push(match config.coupling {
                        CouplingKind::Affine => FlowLayer::Affine(AffineCoupling::new(
                            &mut params,
                            &cname,
                            c,
                            config.channels,
                            split,
                            &mut rng,
                        )?),
                        CouplingKind::Mixture => FlowLayer::Mixture(MixtureCoupling::new(
                            &mut params,
                            &cname,
                            c,
                            config.channels,
                            config.mix_components,
                            split,
                            &mut rng,
                        )?),
                    });
                }
                slot(&mut layers, AttentionPosition::Pos4);
            }
            let shape = (c, h, w);
            let split = if l + 1 < config.levels {
                let sp = SplitPrior::new(&mut params, &format!("l{l}.split"), c)?;
                c /= 2;
                Some(sp)
            } else {
                None
            };
            levels.push(Level {
                shape,
                layers,
                split,
                encoder,
            });
        }
        Ok(FlowModel {
            config,
            params,
            levels,
        })
    }

    fn build_attention(
        config: &ModelConfig,
        params: &mut ParamStore,
        step: &str,
        (c, h, w): (usize, usize, usize),
        phase: u8,
        rng: &mut impl Rng,
    ) -> Result<Option<FlowLayer>> {
        let mask = make_mask_2d(h, w, phase);
        Ok(match config.attention {
            AttentionKind::None => None,
            AttentionKind::IMap => Some(FlowLayer::IMap(IMap::new(
                params,
                &format!("{step}.imap"),
                mask,
                c,
                config.imap_hidden,
                rng,
            )?)),
            AttentionKind::ISdp => {
                let options = ISdpOptions {
                    patches: config.patches,
                    heads: config.heads,
                    activation: config.activation,
                    pure_eq6: config.pure_eq6,
                };
                Some(FlowLayer::ISdp(ISdp::new(params, &format!("{step}.isdp"), mask, c, options, rng)?))
            }
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Layer kinds in forward order, with `split` entries between levels.
    pub fn layer_kinds(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for level in &self.levels {
            out.extend(level.layers.iter().map(FlowLayer::kind_name));
            if level.split.is_some() {
                out.push("split");
            }
        }
        out
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.config.input_channels, self.config.input_height, self.config.input_width)
    }

    /// Condition image shape: the input at half resolution.
    pub fn condition_shape(&self, batch: usize) -> Shape {
        Shape::new(
            batch,
            self.config.input_channels,
            self.config.input_height / 2,
            self.config.input_width / 2,
        )
    }

    /// Latent shapes for a batch, in the order of [`ModelOutput::z`].
    pub fn latent_shapes(&self, batch: usize) -> Vec<Shape> {
        let mut out = Vec::new();
        for level in &self.levels {
            let (c, h, w) = level.shape;
            match level.split {
                Some(_) => out.push(Shape::new(batch, c / 2, h, w)),
                None => out.push(Shape::new(batch, c, h, w)),
            }
        }
        out
    }

    fn actnorms_mut(&mut self) -> impl Iterator<Item = &mut Actnorm> {
        self.levels.iter_mut().flat_map(|l| {
            l.layers.iter_mut().filter_map(|layer| match layer {
                FlowLayer::Actnorm(a) => Some(a),
                _ => None,
            })
        })
    }

    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.levels
            .iter()
            .flat_map(|l| {
                l.layers.iter().filter_map(|layer| match layer {
                    FlowLayer::Actnorm(a) => Some(a.initialized),
                    _ => None,
                })
            })
            .collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        let n = self.actnorm_flags().len();
        if flags.len() != n {
            return Err(Error::Format(format!("expected {n} actnorm flags, found {}", flags.len())));
        }
        for (a, &f) in self.actnorms_mut().zip(flags) {
            a.initialized = f;
        }
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.actnorm_flags().iter().all(|&f| f)
    }

    /// Mark every actnorm initialized with its current parameters (identity at build).
    pub fn initialize_identity(&mut self) {
        for a in self.actnorms_mut() {
            a.initialized = true;
        }
    }

    fn check_inputs(&self, ctx: &Ctx, x: Var, cond: Option<Var>) -> Result<()> {
        let s = ctx.shape(x);
        let expected = self.input_shape(s.b());
        if s != expected {
            return Err(Error::ShapeMismatch {
                op: "model_input",
                left: s,
                right: expected,
            });
        }
        match (self.config.conditional, cond) {
            (true, None) => Err(Error::Config("conditional model requires a condition".into())),
            (false, Some(_)) => Err(Error::Config("unconditional model given a condition".into())),
            (true, Some(c)) if ctx.shape(c) != self.condition_shape(s.b()) => Err(Error::ShapeMismatch {
                op: "condition",
                left: ctx.shape(c),
                right: self.condition_shape(s.b()),
            }),
            _ => Ok(()),
        }
    }

    fn level_features(&self, ctx: &mut Ctx, level: &Level, cond: Option<Var>) -> Result<Option<Var>> {
        match (&level.encoder, cond) {
            (Some(e), Some(c)) => Ok(Some(e.encode(ctx, c, level.shape.1, level.shape.2)?)),
            _ => Ok(None),
        }
    }

    /// Data-dependent actnorm initialization from one batch; layers are
    /// initialized in forward order, each on the activations it receives.
    pub fn data_init(&mut self, x: &Tensor, cond: Option<&Tensor>) -> Result<()> {
        let mut h = x.clone();
        for li in 0..self.levels.len() {
            let feats = {
                let mut ctx = Ctx::eval(&self.params);
                let cv = cond.map(|c| ctx.input(c.clone())).transpose()?;
                let f = self.level_features(&mut ctx, &self.levels[li], cv)?;
                f.map(|f| ctx.value(f).clone())
            };
            for k in 0..self.levels[li].layers.len() {
                if let FlowLayer::Actnorm(a) = &mut self.levels[li].layers[k] {
                    if !a.initialized {
                        a.data_init(&mut self.params, &h)?;
                    }
                }
                let layer = &self.levels[li].layers[k];
                let mut ctx = Ctx::eval(&self.params);
                let hv = ctx.input(h)?;
                let fv = match (&feats, layer.needs_condition()) {
                    (Some(f), true) => Some(ctx.input(f.clone())?),
                    _ => None,
                };
                let (y, _) = layer.forward(&mut ctx, hv, fv)?;
                h = ctx.value(y).clone();
            }
            if let Some(sp) = &self.levels[li].split {
                let mut ctx = Ctx::eval(&self.params);
                let hv = ctx.input(h)?;
                let (x1, _, _) = sp.forward(&mut ctx, hv)?;
                h = ctx.value(x1).clone();
            }
        }
        Ok(())
    }

    /// Forward pass on a caller-owned tape.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, cond: Option<Var>) -> Result<ModelOutput> {
        self.check_inputs(ctx, x, cond)?;
        let mut h = x;
        let mut z = Vec::with_capacity(self.levels.len());
        let mut logdet = None;
        let mut prior = None;
        let mut layer_logdets = Vec::new();
        let mut split_log_probs = Vec::new();
        for level in &self.levels {
            let feats = self.level_features(ctx, level, cond)?;
            for layer in &level.layers {
                let f = if layer.needs_condition() { feats } else { None };
                let (y, ld) = layer.forward(ctx, h, f)?;
                layer_logdets.push(ld);
                logdet = accumulate(ctx, logdet, ld)?;
                h = y;
            }
            if let Some(sp) = &level.split {
                let (x1, x2, lp) = sp.forward(ctx, h)?;
                split_log_probs.push(lp);
                prior = accumulate(ctx, prior, lp)?;
                z.push(x2);
                h = x1;
            }
        }
        let lp = standard_normal_log_prob(ctx, h)?;
        z.push(h);
        let log_prior = accumulate(ctx, prior, lp)?.expect("final prior");
        let logdet = logdet.expect("at least one layer");
        let log_prob = ctx.add(logdet, log_prior)?;
        Ok(ModelOutput {
            z,
            logdet,
            log_prior,
            log_prob,
            layer_logdets,
            split_log_probs,
        })
    }

    /// Inverse pass: `latents` holds one source per split (level order).
    pub fn inverse(&self, ctx: &mut Ctx, final_z: Var, latents: &[LatentSource], cond: Option<Var>) -> Result<Var> {
        let splits = self.levels.len() - 1;
        if latents.len() != splits {
            return Err(Error::Config(format!("expected {splits} split latents, got {}", latents.len())));
        }
        if self.config.conditional != cond.is_some() {
            return Err(Error::Config("condition presence does not match the model".into()));
        }
        let mut h = final_z;
        for (li, level) in self.levels.iter().enumerate().rev() {
            if let Some(sp) = &level.split {
                h = sp.inverse(ctx, h, &latents[li])?;
            }
            let feats = self.level_features(ctx, level, cond)?;
            for layer in level.layers.iter().rev() {
                let f = if layer.needs_condition() { feats } else { None };
                h = layer.inverse(ctx, h, f)?;
            }
        }
        Ok(h)
    }

    /// Per-sample log-density, (B, 1, 1, 1).
    pub fn log_prob(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut ctx = Ctx::eval(&self.params);
        let xv = ctx.input(x.clone())?;
        let cv = cond.map(|c| ctx.input(c.clone())).transpose()?;
        let out = self.forward(&mut ctx, xv, cv)?;
        Ok(ctx.value(out.log_prob).clone())
    }

    /// Mean bits/dim of a batch.
    pub fn bits_per_dim(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<f64> {
        let lp = self.log_prob(x, cond)?;
        let mean = lp.sum() / lp.data().len() as f64;
        Ok(bits_per_dim(mean, self.config.dims()))
    }

    /// Latents and total logdet.
    pub fn encode(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<(Vec<Tensor>, Tensor)> {
        let mut ctx = Ctx::eval(&self.params);
        let xv = ctx.input(x.clone())?;
        let cv = cond.map(|c| ctx.input(c.clone())).transpose()?;
        let out = self.forward(&mut ctx, xv, cv)?;
        let z = out.z.iter().map(|&v| ctx.value(v).clone()).collect();
        Ok((z, ctx.value(out.logdet).clone()))
    }

    /// Inverse of [`FlowModel::encode`].
    pub fn decode(&self, z: &[Tensor], cond: Option<&Tensor>) -> Result<Tensor> {
        if z.len() != self.levels.len() {
            return Err(Error::Config(format!("expected {} latents, got {}", self.levels.len(), z.len())));
        }
        let mut ctx = Ctx::eval(&self.params);
        let last = ctx.input(z[z.len() - 1].clone())?;
        let latents: Vec<LatentSource> = z[..z.len() - 1].iter().cloned().map(LatentSource::Given).collect();
        let cv = cond.map(|c| ctx.input(c.clone())).transpose()?;
        let x = self.inverse(&mut ctx, last, &latents, cv)?;
        Ok(ctx.value(x).clone())
    }

    /// `n` samples at temperature `τ`; noise is drawn split by split in level
    /// order, then for the final latent.
    pub fn sample(&self, n: usize, temperature: f64, rng: &mut impl Rng, cond: Option<&Tensor>) -> Result<Tensor> {
        if !(temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be non-negative, got {temperature}")));
        }
        let shapes = self.latent_shapes(n);
        let mut latents = Vec::with_capacity(shapes.len() - 1);
        for &s in &shapes[..shapes.len() - 1] {
            latents.push(LatentSource::Sample {
                temperature,
                noise: Tensor::randn(s, 1.0, rng),
            });
        }
        let last = Tensor::randn(shapes[shapes.len() - 1], 1.0, rng).map(|v| v * temperature);
        let mut ctx = Ctx::eval(&self.params);
        let zv = ctx.input(last)?;
        let cv = cond.map(|c| ctx.input(c.clone())).transpose()?;
        let x = self.inverse(&mut ctx, zv, &latents, cv)?;
        Ok(ctx.value(x).clone())
    }

    /// `(inverse(forward(x)), max-abs error)`.
    pub fn reconstruct(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, f64)> {
        let (z, _) = self.encode(x, cond)?;
        let back = self.decode(&z, cond)?;
        let err = back.max_abs_diff(x);
        Ok((back, err))
    }
}
