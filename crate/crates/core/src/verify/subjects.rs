use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Activation, IMap, ISdp, ISdpOptions};
use crate::error::{Error, Result};
use crate::flowlayers::{
    Actnorm, AffineCoupling, Bijection, CondInjector, CouplingSplit, FlowLayer, Inv1x1, MixtureCoupling, Squeeze,
};
use crate::masking::{make_mask_2d, make_mask_3d, Half};
use crate::numkit::{Shape, Tensor};
use crate::params::{Ctx, ParamStore};

/// A bijection on concrete tensors, as seen by the oracles.
pub trait Transform: Sync + Send {
    fn name(&self) -> String;
    /// `(y, logdet)` with logdet of shape (B, 1, 1, 1).
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
    fn inverse(&self, y: &Tensor) -> Result<Tensor>;
}

/// One layer with its own parameters and, for conditional layers, a fixed
/// per-sample condition.
#[derive(Clone, Debug)]
pub struct LayerSubject {
    pub name: String,
    pub params: ParamStore,
    pub layer: FlowLayer,
    /// Single-sample input shape.
    pub shape: Shape,
    pub cond: Option<Tensor>,
    /// Indicator of the untouched half, where the layer has one.
    pub half_a: Option<Tensor>,
}

fn repeat_batch(t: &Tensor, b: usize) -> Result<Tensor> {
    Tensor::concat_batch(&vec![t.clone(); b])
}

impl LayerSubject {
    pub fn input(&self, batch: usize, seed: u64) -> Tensor {
        super::seeded_input(self.shape.with_batch(batch), seed)
    }

    fn run<R>(&self, x: &Tensor, f: impl FnOnce(&FlowLayer, &mut Ctx, crate::numkit::Var, Option<crate::numkit::Var>) -> Result<R>) -> Result<R> {
        let mut ctx = Ctx::eval(&self.params);
        let xv = ctx.input(x.clone())?;
        let cv = match &self.cond {
            Some(c) => Some(ctx.input(repeat_batch(c, x.shape().b())?)?),
            None => None,
        };
        f(&self.layer, &mut ctx, xv, cv)
    }
}

impl Transform for LayerSubject {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.run(x, |layer, ctx, xv, cv| {
            let (y, ld) = layer.forward(ctx, xv, cv)?;
            Ok((ctx.value(y).clone(), ctx.value(ld).clone()))
        })
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        self.run(y, |layer, ctx, yv, cv| {
            let x = layer.inverse(ctx, yv, cv)?;
            Ok(ctx.value(x).clone())
        })
    }
}

/// Adds `N(0, std²)` noise to every trainable parameter.
pub fn jitter_params(params: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = params.ids().filter(|&id| params.entry(id).trainable).collect();
    for id in ids {
        let noise = Tensor::randn(params.get(id).shape(), std, rng);
        for (v, n) in params.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

const JITTER: f64 = 0.2;
const COND_CHANNELS: usize = 2;

/// Layer kinds built by [`LayerSubject::build`].
pub const LAYER_KINDS: &[&str] = &[
    "squeeze",
    "actnorm",
    "inv1x1",
    "affine_channel",
    "affine_checkerboard",
    "affine_permuted3d",
    "mixture_channel",
    "mixture_checkerboard",
    "cond_affine",
    "cond_injector",
    "imap",
    "isdp_sigmoid_h1",
    "isdp_softmax_h1",
    "isdp_sigmoid_h3",
    "isdp_softmax_h3",
];

/// Deliberately broken layer: iMap weights taken from half B.
pub const BROKEN_IMAP: &str = "imap_weights_from_b";

impl LayerSubject {
    /// Layer `kind` on single samples of `(c, h, w)`, parameters drawn from
    /// `seed` and jittered away from their identity initialization.
    pub fn build(kind: &str, (c, h, w): (usize, usize, usize), seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let shape = Shape::new(1, c, h, w);
        let hidden = 8;
        let p = &mut params;
        let mut cond = None;
        let mut half_a = None;
        let checker = CouplingSplit::Mask(make_mask_2d(h, w, (seed % 2) as u8));
        let isdp = |heads: usize, activation: Activation| ISdpOptions {
            heads,
            activation,
            ..ISdpOptions::default()
        };
        let layer = match kind {
            "squeeze" => FlowLayer::Squeeze(Squeeze),
            "actnorm" => {
                let mut a = Actnorm::new(p, kind, c)?;
                a.initialized = true;
                FlowLayer::Actnorm(a)
            }
            "inv1x1" => FlowLayer::Inv1x1(Inv1x1::new(p, kind, c, &mut rng)?),
            "affine_channel" | "affine_checkerboard" | "affine_permuted3d" | "mixture_channel"
            | "mixture_checkerboard" => {
                let split = match kind.rsplit('_').next() {
                    Some("channel") => CouplingSplit::Channel,
                    Some("checkerboard") => checker,
                    _ => CouplingSplit::Mask(make_mask_3d(c, h, w, seed)?),
                };
                half_a = Some(split.conditioning(shape)?);
                if kind.starts_with("affine") {
                    FlowLayer::Affine(AffineCoupling::new(p, kind, c, hidden, split, &mut rng)?)
                } else {
                    FlowLayer::Mixture(MixtureCoupling::new(p, kind, c, hidden, 3, split, &mut rng)?)
                }
            }
            "cond_affine" => {
                half_a = Some(checker.conditioning(shape)?);
                cond = Some(Tensor::randn(Shape::new(1, COND_CHANNELS, h, w), 1.0, &mut rng));
                FlowLayer::CondAffine(AffineCoupling::with_condition(
                    p,
                    kind,
                    c,
                    hidden,
                    checker,
                    COND_CHANNELS,
                    &mut rng,
                )?)
            }
            "cond_injector" => {
                cond = Some(Tensor::randn(Shape::new(1, COND_CHANNELS, h, w), 1.0, &mut rng));
                FlowLayer::Injector(CondInjector::new(p, kind, c, hidden, COND_CHANNELS, &mut rng)?)
            }
            "imap" | BROKEN_IMAP => {
                let mask = make_mask_2d(h, w, (seed % 2) as u8);
                half_a = Some(mask.indicator(Half::A));
                let mut m = IMap::new(p, kind, mask, c, 4, &mut rng)?;
                if kind == BROKEN_IMAP {
                    m.weight_source = Half::B;
                }
                FlowLayer::IMap(m)
            }
            "isdp_sigmoid_h1" | "isdp_softmax_h1" | "isdp_sigmoid_h3" | "isdp_softmax_h3" => {
                let heads = if kind.ends_with("h3") { 3 } else { 1 };
                let act = if kind.contains("softmax") {
                    Activation::Softmax
                } else {
                    Activation::Sigmoid
                };
                let mask = make_mask_2d(h, w, (seed % 2) as u8);
                half_a = Some(mask.indicator(Half::A));
                FlowLayer::ISdp(ISdp::new(p, kind, mask, c, isdp(heads, act), &mut rng)?)
            }
            other => return Err(Error::Config(format!("unknown layer kind {other:?}"))),
        };
        jitter_params(&mut params, JITTER, &mut rng);
        Ok(LayerSubject {
            name: kind.to_string(),
            params,
            layer,
            shape,
            cond,
            half_a,
        })
    }
}

/// Every kind in [`LAYER_KINDS`] at one seed.
pub fn layer_zoo(shape: (usize, usize, usize), seed: u64) -> Result<Vec<LayerSubject>> {
    LAYER_KINDS.iter().map(|k| LayerSubject::build(k, shape, seed)).collect()
}

/// Reports the negated log-determinant.
pub struct SignFlipped<T>(pub T);

impl<T: Transform> Transform for SignFlipped<T> {
    fn name(&self) -> String {
        format!("{}+flipped_logdet", self.0.name())
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (y, ld) = self.0.forward(x)?;
        Ok((y, ld.map(|v| -v)))
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        self.0.inverse(y)
    }
}

/// Inverts only where `keep` is 1 and passes the rest of `y` through.
pub struct SkippedInverseHalf<T> {
    pub inner: T,
    /// (1, C|1, H, W) indicator.
    pub keep: Tensor,
}

impl<T: Transform> Transform for SkippedInverseHalf<T> {
    fn name(&self) -> String {
        format!("{}+skipped_inverse_half", self.inner.name())
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.inner.forward(x)
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let x = self.inner.inverse(y)?;
        let (s, ks) = (y.shape(), self.keep.shape());
        Ok(Tensor::from_fn(s, |[b, c, i, j]| {
            let k = self.keep.get(0, if ks.c() == 1 { 0 } else { c }, i, j);
            if k != 0.0 {
                x.get(b, c, i, j)
            } else {
                y.get(b, c, i, j)
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoo_builds_and_inverts() {
        for s in layer_zoo((4, 4, 4), 1).unwrap() {
            let x = s.input(2, 5);
            let (y, ld) = s.forward(&x).unwrap();
            assert_eq!(ld.shape(), Shape::new(2, 1, 1, 1), "{}", s.name);
            let back = s.inverse(&y).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-8, "{}: {}", s.name, back.max_abs_diff(&x));
        }
    }

    #[test]
    fn jitter_moves_zero_output_layers() {
        let s = LayerSubject::build("affine_checkerboard", (2, 4, 4), 0).unwrap();
        let x = s.input(1, 0);
        assert!(s.forward(&x).unwrap().0.max_abs_diff(&x) > 1e-3);
    }
}
