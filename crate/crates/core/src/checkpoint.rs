//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MOGRCKPT" | u32 version | u8 precision width (4 or 8)
//! u32 len, config text (`key = value` lines)
//! u8 has-vocabulary [u8 level, u32 count, count × (u32 len, bytes)]
//! u32 tensor count, count × (u32 name len, name, u32 rank, rank × u32 extent)
//! tensor payloads in registry order, IEEE-754 little-endian
//! u8 has-rng [u64 seed, u64 stream, u128 word position]
//! u8 has-optimizer [u64 step, f64 β2, f64 ε, payloads shaped like the tensors]
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::data::{Level, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ParameterSet, Real, RngState, Tensor};
use crate::training::{AdamConfig, OptState};

const MAGIC: &[u8; 8] = b"MOGRCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<R> {
    pub config: String,
    pub vocab: Option<Vocabulary>,
    pub params: ParameterSet<R>,
    pub rng: Option<RngState>,
    pub opt: Option<OptState<R>>,
}

fn level_code(level: Level) -> u8 {
    match level {
        Level::Word => 0,
        Level::Char => 1,
        Level::Byte => 2,
    }
}

fn write_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.write_u32::<LE>(bytes.len() as u32).expect("vec write");
    out.extend_from_slice(bytes);
}

fn write_payload<R: Real>(out: &mut Vec<u8>, t: &Tensor<R>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

impl<R: Real> Checkpoint<R> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(FORMAT_VERSION).expect("vec write");
        out.push(R::PRECISION.byte_width() as u8);
        write_blob(&mut out, self.config.as_bytes());
        match &self.vocab {
            None => out.push(0),
            Some(v) => {
                out.push(1);
                out.push(level_code(v.level()));
                out.write_u32::<LE>(v.len() as u32).expect("vec write");
                for t in v.tokens() {
                    write_blob(&mut out, t);
                }
            }
        }
        out.write_u32::<LE>(self.params.len() as u32).expect("vec write");
        for (_, name, t) in self.params.iter() {
            write_blob(&mut out, name.as_bytes());
            out.write_u32::<LE>(t.shape().len() as u32).expect("vec write");
            for &d in t.shape() {
                out.write_u32::<LE>(d as u32).expect("vec write");
            }
        }
        for t in self.params.tensors() {
            write_payload(&mut out, t);
        }
        match &self.rng {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.write_u64::<LE>(s.seed).expect("vec write");
                out.write_u64::<LE>(s.stream).expect("vec write");
                out.write_u128::<LE>(s.word_pos).expect("vec write");
            }
        }
        match &self.opt {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.write_u64::<LE>(o.t).expect("vec write");
                out.write_f64::<LE>(o.config.beta2).expect("vec write");
                out.write_f64::<LE>(o.config.epsilon).expect("vec write");
                for t in &o.v {
                    write_payload(&mut out, t);
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let truncated = |what: &str| Error::Format(format!("checkpoint truncated while reading {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated("the header"))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".to_string()));
        }
        let version = r.read_u32::<LE>().map_err(|_| truncated("the header"))?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let width = r.read_u8().map_err(|_| truncated("the header"))? as usize;
        if width != R::PRECISION.byte_width() {
            return Err(Error::Format(format!(
                "checkpoint stores {}-byte reals, expected {} ({})",
                width,
                R::PRECISION.byte_width(),
                R::PRECISION
            )));
        }
        let blob = |r: &mut Cursor<&[u8]>, what: &str| -> Result<Vec<u8>> {
            let len = r.read_u32::<LE>().map_err(|_| truncated(what))? as usize;
            if len > bytes.len() {
                return Err(truncated(what));
            }
            let mut b = vec![0u8; len];
            r.read_exact(&mut b).map_err(|_| truncated(what))?;
            Ok(b)
        };
        let config = String::from_utf8(blob(&mut r, "the config")?)
            .map_err(|_| Error::Format("config block is not UTF-8".to_string()))?;
        let vocab = match r.read_u8().map_err(|_| truncated("the vocabulary"))? {
            0 => None,
            _ => {
                let level = match r.read_u8().map_err(|_| truncated("the vocabulary"))? {
                    0 => Level::Word,
                    1 => Level::Char,
                    2 => Level::Byte,
                    c => return Err(Error::Format(format!("unknown vocabulary level code {c}"))),
                };
                let count = r.read_u32::<LE>().map_err(|_| truncated("the vocabulary"))? as usize;
                let mut tokens = Vec::with_capacity(count.min(bytes.len()));
                for _ in 0..count {
                    tokens.push(blob(&mut r, "the vocabulary")?);
                }
                Some(Vocabulary::from_tokens(level, tokens)?)
            }
        };
        let count = r.read_u32::<LE>().map_err(|_| truncated("the tensor registry"))? as usize;
        let mut registry = Vec::with_capacity(count.min(bytes.len()));
        for _ in 0..count {
            let name = String::from_utf8(blob(&mut r, "the tensor registry")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".to_string()))?;
            let rank = r.read_u32::<LE>().map_err(|_| truncated(&format!("the shape of `{name}`")))? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LE>().map(|d| d as usize).map_err(|_| truncated(&format!("the shape of `{name}`"))))
                .collect::<Result<Vec<_>>>()?;
            registry.push((name, shape));
        }
        let payload = |r: &mut Cursor<&[u8]>, name: &str, shape: &[usize]| -> Result<Tensor<R>> {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * width];
            r.read_exact(&mut buf).map_err(|_| truncated(&format!("the values of `{name}`")))?;
            let data = buf.chunks_exact(width).map(R::read_le).collect();
            Tensor::new(shape.to_vec(), data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))
        };
        let mut params = ParameterSet::new();
        for (name, shape) in &registry {
            let t = payload(&mut r, name, shape)?;
            params.push(name.clone(), t).map_err(|e| Error::Format(e.to_string()))?;
        }
        let rng = match r.read_u8().map_err(|_| truncated("the RNG state"))? {
            0 => None,
            _ => Some(RngState {
                seed: r.read_u64::<LE>().map_err(|_| truncated("the RNG state"))?,
                stream: r.read_u64::<LE>().map_err(|_| truncated("the RNG state"))?,
                word_pos: r.read_u128::<LE>().map_err(|_| truncated("the RNG state"))?,
            }),
        };
        let opt = match r.read_u8().map_err(|_| truncated("the optimizer state"))? {
            0 => None,
            _ => {
                let t = r.read_u64::<LE>().map_err(|_| truncated("the optimizer state"))?;
                let beta2 = r.read_f64::<LE>().map_err(|_| truncated("the optimizer state"))?;
                let epsilon = r.read_f64::<LE>().map_err(|_| truncated("the optimizer state"))?;
                let v = registry
                    .iter()
                    .map(|(name, shape)| payload(&mut r, &format!("optimizer state of {name}"), shape))
                    .collect::<Result<Vec<_>>>()?;
                Some(OptState { v, t, config: AdamConfig { beta2, epsilon } })
            }
        };
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".to_string()));
        }
        Ok(Checkpoint { config, vocab, params, rng, opt })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The stored weights checked against `model`'s registry, in its order.
    /// Errors name the first tensor that is missing, unexpected or misshapen.
    pub fn params_for(&self, model: &Model) -> Result<ParameterSet<R>> {
        let specs = model.registry().specs();
        for (_, name, _) in self.params.iter() {
            if !specs.iter().any(|s| s.name == name) {
                return Err(Error::Format(format!("checkpoint tensor `{name}` does not belong to this model")));
            }
        }
        let mut out = ParameterSet::new();
        for spec in specs {
            let t = self
                .params
                .by_name(&spec.name)
                .ok_or_else(|| Error::Format(format!("tensor `{}` is missing from the checkpoint", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?} in the checkpoint, model expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            out.push(spec.name.clone(), t.clone())?;
        }
        Ok(out)
    }
}
