//! Invertible flow layers. Each maps a (B, C, H, W) input to an output plus a
//! per-sample log-Jacobian-determinant of shape (B, 1, 1, 1), and has an
//! exact inverse.

mod actnorm;
mod coupling;
mod encoder;
mod inv1x1;
mod mixture;
mod split;
mod squeeze;

use rand::Rng;

pub use actnorm::Actnorm;
pub use coupling::{AffineCoupling, CondInjector, CouplingNet, CouplingSplit, LOG_SCALE_BOUND};
pub use encoder::ConditionEncoder;
pub use inv1x1::{random_rotation, Inv1x1};
pub use mixture::{mixture_logit_cdf, MixtureCoupling};
pub use split::{LatentSource, SplitPrior};
pub use squeeze::{squeeze, squeeze_index, unsqueeze, Squeeze};

use crate::attention::{IMap, ISdp};
use crate::error::{Error, Result};
use crate::numkit::{Shape, Tensor, Var};
use crate::params::Ctx;

/// Forward/inverse contract shared by every layer.
pub trait Bijection {
    /// Returns `(y, logdet)` with `logdet` of shape (B, 1, 1, 1).
    fn forward(&self, ctx: &mut Ctx, x: Var, cond: Option<Var>) -> Result<(Var, Var)>;
    fn inverse(&self, ctx: &mut Ctx, y: Var, cond: Option<Var>) -> Result<Var>;
}

/// Tagged union of the step layers.
#[derive(Clone, Debug)]
pub enum FlowLayer {
    Squeeze(Squeeze),
    Actnorm(Actnorm),
    Inv1x1(Inv1x1),
    Affine(AffineCoupling),
    Mixture(MixtureCoupling),
    CondAffine(AffineCoupling),
    Injector(CondInjector),
    IMap(IMap),
    ISdp(ISdp),
}

impl FlowLayer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FlowLayer::Squeeze(_) => "squeeze",
            FlowLayer::Actnorm(_) => "actnorm",
            FlowLayer::Inv1x1(_) => "inv1x1",
            FlowLayer::Affine(_) => "coupling",
            FlowLayer::Mixture(_) => "mixture_coupling",
            FlowLayer::CondAffine(_) => "cond_coupling",
            FlowLayer::Injector(_) => "cond_injector",
            FlowLayer::IMap(_) => "imap",
            FlowLayer::ISdp(_) => "isdp",
        }
    }

    pub fn needs_condition(&self) -> bool {
        matches!(self, FlowLayer::CondAffine(_) | FlowLayer::Injector(_))
    }

    fn inner(&self) -> &dyn Bijection {
        match self {
            FlowLayer::Squeeze(l) => l,
            FlowLayer::Actnorm(l) => l,
            FlowLayer::Inv1x1(l) => l,
            FlowLayer::Affine(l) | FlowLayer::CondAffine(l) => l,
            FlowLayer::Mixture(l) => l,
            FlowLayer::Injector(l) => l,
            FlowLayer::IMap(l) => l,
            FlowLayer::ISdp(l) => l,
        }
    }
}

impl Bijection for FlowLayer {
    fn forward(&self, ctx: &mut Ctx, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        self.inner().forward(ctx, x, cond)
    }

    fn inverse(&self, ctx: &mut Ctx, y: Var, cond: Option<Var>) -> Result<Var> {
        self.inner().inverse(ctx, y, cond)
    }
}

/// Zero log-determinant for a batch of `b`.
pub(crate) fn zero_logdet(ctx: &mut Ctx, b: usize) -> Result<Var> {
    ctx.constant(Tensor::zeros(Shape::new(b, 1, 1, 1)))
}

/// Condition features must match the consumer's batch and spatial extent.
pub(crate) fn require_condition(ctx: &Ctx, x: Var, cond: Option<Var>, layer: &str) -> Result<Var> {
    let c = cond.ok_or_else(|| Error::Config(format!("{layer} requires a condition")))?;
    let (xs, cs) = (ctx.shape(x), ctx.shape(c));
    if xs.b() != cs.b() || xs.h() != cs.h() || xs.w() != cs.w() {
        return Err(Error::ShapeMismatch {
            op: "condition",
            left: xs,
            right: cs,
        });
    }
    Ok(c)
}

/// Gaussian initializer shared by the layer constructors.
pub(crate) fn init_normal(shape: Shape, std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}
