//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "AFCK" | version u32 | model config (u32 len, utf-8) | train config (u32 len, utf-8)
//! | iteration u64 | optimizer step u64 | actnorm flags (u32 n, n bytes)
//! | tensor count u32 | per tensor: name (u32 len, utf-8), rank u32, extents u64 × rank, f64 × numel
//! ```
//!
//! Tensors are the model parameters in registration order, then the first and
//! second Adamax moments (`adamax.m:<name>`, `adamax.u:<name>`) in the same order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::dataio::write_file;
use crate::error::{Error, Result};
use crate::flowmodel::{FlowModel, ModelConfig};
use crate::numkit::{Shape, Tensor};

use super::{Adamax, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn tensor_names(model: &FlowModel) -> Vec<String> {
    let names: Vec<&str> = model.params().entries().iter().map(|e| e.name.as_str()).collect();
    let mut out: Vec<String> = names.iter().map(|n| n.to_string()).collect();
    out.extend(names.iter().map(|n| format!("adamax.m:{n}")));
    out.extend(names.iter().map(|n| format!("adamax.u:{n}")));
    out
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(t: &Trainer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_str(&mut buf, &t.model.config().to_text());
    put_str(&mut buf, &t.config.to_text());
    put_u64(&mut buf, t.iter);
    put_u64(&mut buf, t.optimizer.t);
    let flags = t.model.actnorm_flags();
    put_u32(&mut buf, flags.len() as u32);
    buf.extend(flags.iter().map(|&f| f as u8));
    let tensors = t
        .model
        .params()
        .entries()
        .iter()
        .map(|e| &e.value)
        .chain(&t.optimizer.m)
        .chain(&t.optimizer.u);
    let names = tensor_names(&t.model);
    put_u32(&mut buf, names.len() as u32);
    for (name, tensor) in names.iter().zip(tensors) {
        put_str(&mut buf, name);
        let s = tensor.shape();
        put_u32(&mut buf, 4);
        for e in [s.b(), s.c(), s.h(), s.w()] {
            put_u64(&mut buf, e as u64);
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Format(format!("{what} is not valid utf-8")))
    }
}

/// Parse a checkpoint, rebuilding the model from its embedded config. Every
/// tensor's name and extents are checked against the model before its
/// payload is read.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let model_cfg = ModelConfig::from_text(r.string("model config")?)?;
    let train_cfg = TrainConfig::from_text(r.string("train config")?)?;
    let iter = r.u64("iteration")?;
    let step = r.u64("optimizer step")?;
    let mut model = FlowModel::build(model_cfg)?;
    let n_flags = r.u32("actnorm flag count")? as usize;
    let flags = r
        .take(n_flags, "actnorm flags")?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("bad actnorm flag byte {other}"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    model.set_actnorm_flags(&flags)?;

    let names = tensor_names(&model);
    let n_params = model.params().len();
    let expected: HashMap<&str, (usize, Shape)> = names
        .iter()
        .enumerate()
        .map(|(k, n)| (n.as_str(), (k, model.params().entries()[k % n_params].value.shape())))
        .collect();
    let count = r.u32("tensor count")? as usize;
    if count != names.len() {
        return Err(Error::Format(format!("expected {} tensors, found {count}", names.len())));
    }
    let mut slots: Vec<Option<Tensor>> = vec![None; names.len()];
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let &(slot, shape) = expected
            .get(name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name:?}")))?;
        if slots[slot].is_some() {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
        let rank = r.u32("tensor rank")?;
        if rank != 4 {
            return Err(Error::Format(format!("tensor {name}: rank {rank}, expected 4")));
        }
        let mut ext = [0usize; 4];
        for e in &mut ext {
            *e = usize::try_from(r.u64("tensor extent")?)
                .map_err(|_| Error::Format(format!("tensor {name}: extent overflows")))?;
        }
        let found = Shape::new(ext[0], ext[1], ext[2], ext[3]);
        if found != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape,
                found,
            });
        }
        let payload = r.take(8 * shape.numel(), name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        slots[slot] = Some(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let mut tensors = slots.into_iter().map(|t| t.expect("every slot filled"));
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        model.params_mut().set(id, tensors.next().expect("param tensor"))?;
    }
    let m: Vec<Tensor> = tensors.by_ref().take(n_params).collect();
    let u: Vec<Tensor> = tensors.collect();
    Ok(Trainer {
        model,
        config: train_cfg,
        optimizer: Adamax { m, u, t: step },
        iter,
    })
}

pub fn save_checkpoint(t: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    write_file(path, &encode_checkpoint(t))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::toy2d_grid;
    use crate::par::Execution;

    fn trained(iters: u64) -> Trainer {
        let model = FlowModel::build(ModelConfig {
            channels: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            iters,
            batch: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        let data = toy2d_grid("checker-density", 8, 16, 1).unwrap();
        t.run(&data, Execution::Sequential, None).unwrap();
        t
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let t = trained(2);
        let a = encode_checkpoint(&t);
        let back = decode_checkpoint(&a).unwrap();
        assert_eq!(back.model.params(), t.model.params());
        assert_eq!(back.optimizer, t.optimizer);
        assert_eq!(back.iter, 2);
        assert_eq!(encode_checkpoint(&back), a);
    }

    #[test]
    fn truncation_and_version_rejected() {
        let a = encode_checkpoint(&trained(0));
        for cut in [3, 10, a.len() / 2, a.len() - 1] {
            assert!(matches!(decode_checkpoint(&a[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut v = a.clone();
        v[4] = 9;
        assert!(matches!(decode_checkpoint(&v), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn tampered_extent_names_tensor() {
        let t = trained(0);
        let mut a = encode_checkpoint(&t);
        let first = &t.model.params().entries()[0].name;
        // the first extent of the first tensor follows its name and rank
        let at = a.windows(first.len()).position(|w| w == first.as_bytes()).unwrap() + first.len() + 4;
        a[at] ^= 0x02;
        match decode_checkpoint(&a) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(&name, first),
            other => panic!("unexpected {other:?}"),
        }
    }
}
