//! Run configuration: `key = value` lines grouped under `[model]`, `[train]`
//! and `[data]` headers.

use attnflow_core::dataio::{toy2d_grid, Dataset};
use attnflow_core::flowmodel::ModelConfig;
use attnflow_core::training::TrainConfig;
use attnflow_core::{Error, Result};

const TOY_PREFIX: &str = "toy2d:";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// An IDX image file, or `toy2d:<density>`.
    pub source: String,
    /// Side length of toy images.
    pub resolution: usize,
    /// Number of toy images.
    pub count: usize,
    pub data_seed: u64,
    /// Block-mean downscaling applied to IDX images.
    pub downscale: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: format!("{TOY_PREFIX}checker-density"),
            resolution: 8,
            count: 2048,
            data_seed: 0,
            downscale: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl DataConfig {
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("source", self.source.clone()),
            ("resolution", self.resolution.to_string()),
            ("count", self.count.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("downscale", self.downscale.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "source" => self.source = value.to_string(),
            "resolution" => self.resolution = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "downscale" => self.downscale = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown data key {other:?}"))),
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Dataset> {
        match self.source.strip_prefix(TOY_PREFIX) {
            Some(name) => toy2d_grid(name, self.resolution, self.count, self.data_seed),
            None => Dataset::load_idx(&self.source)?.downscaled(self.downscale.max(1)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Copy)]
enum Section {
    Model,
    Train,
    Data,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Config(format!("line {}: {m}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(match name.trim() {
                    "model" => Section::Model,
                    "train" => Section::Train,
                    "data" => Section::Data,
                    other => return Err(at(format!("unknown section [{other}]"))),
                });
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let result = match section {
                None => return Err(at(format!("key {k:?} outside a section"))),
                Some(Section::Model) => cfg.model.set(k, v),
                Some(Section::Train) => cfg.train.set(k, v),
                Some(Section::Data) => cfg.data.set(k, v),
            };
            result.map_err(|e| at(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Fully resolved text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (header, kv) in [
            ("model", self.model.to_kv()),
            ("train", self.train.to_kv()),
            ("data", self.data.to_kv()),
        ] {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{header}]\n"));
            for (k, v) in kv {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
