use std::fmt;
use std::str::FromStr;

use crate::attention::Activation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingKind {
    Affine,
    Mixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    None,
    IMap,
    ISdp,
}

/// Slot of the attention layer inside a flow step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionPosition {
    /// Before actnorm.
    Pos1,
    /// After actnorm.
    Pos2,
    /// After the 1x1 convolution.
    Pos3,
    /// After the coupling.
    Pos4,
}

/// Partition rule of the coupling layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskChoice {
    Channel,
    Checkerboard,
    Permuted3D,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $kw),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($kw => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

keyword_enum!(CouplingKind { Affine => "affine", Mixture => "mixture" });
keyword_enum!(AttentionKind { None => "none", IMap => "imap", ISdp => "isdp" });
keyword_enum!(AttentionPosition { Pos1 => "pos1", Pos2 => "pos2", Pos3 => "pos3", Pos4 => "pos4" });
keyword_enum!(MaskChoice { Channel => "channel", Checkerboard => "checkerboard", Permuted3D => "permuted3d" });

/// Architecture of a [`super::FlowModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub steps: usize,
    pub coupling: CouplingKind,
    /// Hidden width of coupling nets.
    pub channels: usize,
    pub attention: AttentionKind,
    pub position: AttentionPosition,
    pub heads: usize,
    pub patches: usize,
    pub activation: Activation,
    pub pure_eq6: bool,
    /// Output width C′ of the iMap pointwise conv.
    pub imap_hidden: usize,
    pub mask: MaskChoice,
    pub mask_phase: u8,
    pub mask_seed: u64,
    pub mix_components: usize,
    pub conditional: bool,
    /// Width of the condition encoder output.
    pub cond_features: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub seed: u64,
    /// Default sampling temperature.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 1,
            steps: 2,
            coupling: CouplingKind::Affine,
            channels: 16,
            attention: AttentionKind::None,
            position: AttentionPosition::Pos4,
            heads: 1,
            patches: 4,
            activation: Activation::Sigmoid,
            pure_eq6: false,
            imap_hidden: 4,
            mask: MaskChoice::Checkerboard,
            mask_phase: 0,
            mask_seed: 0,
            mix_components: 4,
            conditional: false,
            cond_features: 4,
            input_channels: 1,
            input_height: 8,
            input_width: 8,
            seed: 0,
            temperature: 0.8,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl ModelConfig {
    /// Ordered `(key, value)` pairs; `set` accepts every key listed here.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("levels", self.levels.to_string()),
            ("steps", self.steps.to_string()),
            ("coupling", self.coupling.to_string()),
            ("channels", self.channels.to_string()),
            ("attention", self.attention.to_string()),
            ("position", self.position.to_string()),
            ("heads", self.heads.to_string()),
            ("patches", self.patches.to_string()),
            ("activation", self.activation.to_string()),
            ("pure_eq6", self.pure_eq6.to_string()),
            ("imap_hidden", self.imap_hidden.to_string()),
            ("mask", self.mask.to_string()),
            ("mask_phase", self.mask_phase.to_string()),
            ("mask_seed", self.mask_seed.to_string()),
            ("mix_components", self.mix_components.to_string()),
            ("conditional", self.conditional.to_string()),
            ("cond_features", self.cond_features.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
            ("seed", self.seed.to_string()),
            ("temperature", format!("{:?}", self.temperature)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "levels" => self.levels = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "coupling" => self.coupling = value.parse()?,
            "channels" => self.channels = parse(key, value)?,
            "attention" => self.attention = value.parse()?,
            "position" => self.position = value.parse()?,
            "heads" => self.heads = parse(key, value)?,
            "patches" => self.patches = parse(key, value)?,
            "activation" => self.activation = value.parse()?,
            "pure_eq6" => self.pure_eq6 = parse_bool(key, value)?,
            "imap_hidden" => self.imap_hidden = parse(key, value)?,
            "mask" => self.mask = value.parse()?,
            "mask_phase" => self.mask_phase = parse(key, value)?,
            "mask_seed" => self.mask_seed = parse(key, value)?,
            "mix_components" => self.mix_components = parse(key, value)?,
            "conditional" => self.conditional = parse_bool(key, value)?,
            "cond_features" => self.cond_features = parse(key, value)?,
            "input_channels" => self.input_channels = parse(key, value)?,
            "input_height" => self.input_height = parse(key, value)?,
            "input_width" => self.input_width = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Inverse of [`ModelConfig::to_text`]; missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
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
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 || self.steps == 0 {
            return bad("levels and steps must be at least 1".into());
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return bad("input shape must be non-empty".into());
        }
        let f = 1usize << self.levels;
        if self.input_height % f != 0 || self.input_width % f != 0 {
            return bad(format!(
                "input {}x{} is not divisible by 2^{}",
                self.input_height, self.input_width, self.levels
            ));
        }
        if self.channels == 0 || self.imap_hidden == 0 || self.heads == 0 || self.patches == 0 {
            return bad("channels, imap_hidden, heads and patches must be positive".into());
        }
        if self.coupling == CouplingKind::Mixture && self.mix_components == 0 {
            return bad("mix_components must be at least 1".into());
        }
        if self.conditional && self.coupling == CouplingKind::Mixture {
            return bad("conditional models use affine couplings".into());
        }
        if self.conditional && self.cond_features == 0 {
            return bad("cond_features must be positive".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be non-negative, got {}", self.temperature));
        }
        Ok(())
    }

    /// Data dimension `C·H·W`.
    pub fn dims(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default();
        c.attention = AttentionKind::ISdp;
        c.position = AttentionPosition::Pos2;
        c.temperature = 0.1;
        c.mask_seed = u64::MAX;
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(ModelConfig::from_text("bogus = 1").is_err());
        assert!(ModelConfig::from_text("levels = x").is_err());
        assert!(ModelConfig::from_text("attention = full").is_err());
        let mut c = ModelConfig::default();
        c.levels = 4;
        assert!(c.validate().is_err());
        c.levels = 3;
        assert!(c.validate().is_ok());
    }
}
