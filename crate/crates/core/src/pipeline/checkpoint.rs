//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `R2OC` |
//! | 2 | format version (1) |
//! | 1 | scalar width in bytes (4 or 8) |
//! | 1 | reserved, 0 |
//! | 8 | config hash |
//! | 8 | seed |
//! | 8 | completed epochs |
//! | 8 | optimizer steps taken |
//! | 4 | tensor count |
//!
//! then per tensor: `u16` name length, UTF-8 name, `u8` kind tag, `u8` rank, `rank x u32`
//! dimensions, and the values. Tensors appear as online parameters, online buffers,
//! target parameters, target buffers, momentum buffers.

use std::fs;
use std::path::Path;

use crate::encoder::{NetworkPair, Param, ParamKind};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"R2OC";
pub const CHECKPOINT_VERSION: u16 = 1;
const BUFFER_TAG: u8 = 16;
const MOMENTUM_TAG: u8 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub tag: u8,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: u64,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub tensors: Vec<Tensor<T>>,
}

fn param_tensor<T: Scalar>(prefix: &str, p: &Param<T>) -> Tensor<T> {
    Tensor {
        name: format!("{prefix}/{}", p.name),
        tag: p.kind.tag(),
        shape: p.shape.clone(),
        values: p.value.clone(),
    }
}

fn buffer_tensor<T: Scalar>(prefix: &str, i: usize, b: &[T]) -> Tensor<T> {
    Tensor {
        name: format!("{prefix}/buffer/{i}"),
        tag: BUFFER_TAG,
        shape: vec![b.len()],
        values: b.to_vec(),
    }
}

fn expected<T: Scalar>(net: &NetworkPair<T>, opt: &OptimizerState<T>) -> Vec<Tensor<T>> {
    let mut out: Vec<Tensor<T>> = net.online.params().into_iter().map(|p| param_tensor("online", p)).collect();
    out.extend(net.online.buffers().into_iter().enumerate().map(|(i, b)| buffer_tensor("online", i, b)));
    out.extend(net.target.params().into_iter().map(|p| param_tensor("target", p)));
    out.extend(net.target.buffers().into_iter().enumerate().map(|(i, b)| buffer_tensor("target", i, b)));
    out.extend(net.online.params().into_iter().zip(&opt.momentum).map(|(p, m)| Tensor {
        name: format!("momentum/{}", p.name),
        tag: MOMENTUM_TAG,
        shape: p.shape.clone(),
        values: m.clone(),
    }));
    out
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(net: &NetworkPair<T>, opt: &OptimizerState<T>, epoch: u64, seed: u64, config_hash: u64) -> Self {
        Self {
            config_hash,
            seed,
            epoch,
            step: opt.step,
            tensors: expected(net, opt),
        }
    }

    /// Overwrites `net` and `opt`, which must have the checkpoint's architecture.
    pub fn restore(&self, net: &mut NetworkPair<T>, opt: &mut OptimizerState<T>) -> Result<()> {
        let want = expected(net, opt);
        if want.len() != self.tensors.len() {
            return Err(Error::Shape(format!("checkpoint has {} tensors, network expects {}", self.tensors.len(), want.len())));
        }
        for (w, t) in want.iter().zip(&self.tensors) {
            if w.name != t.name || w.tag != t.tag || w.shape != t.shape {
                return Err(Error::Shape(format!("checkpoint tensor {} {:?} does not match {} {:?}", t.name, t.shape, w.name, w.shape)));
            }
        }
        let mut it = self.tensors.iter().map(|t| &t.values);
        let mut fill = |dst: &mut Vec<T>| dst.clone_from(it.next().expect("lengths checked"));
        net.online.params_mut().into_iter().for_each(|p| fill(&mut p.value));
        net.online.buffers_mut().into_iter().for_each(&mut fill);
        net.target.params_mut().into_iter().for_each(|p| fill(&mut p.value));
        net.target.buffers_mut().into_iter().for_each(&mut fill);
        opt.momentum.iter_mut().for_each(&mut fill);
        opt.step = self.step;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::BYTES);
        out.push(0);
        for v in [self.config_hash, self.seed, self.epoch, self.step] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.tag);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.values {
                v.to_le_bytes_vec(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::malformed("checkpoint", 0, "bad magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::malformed("checkpoint", 4, format!("unsupported version {version}")));
        }
        let width = r.u8()?;
        if width != T::BYTES {
            return Err(Error::malformed("checkpoint", 6, format!("stored {width}-byte scalars, reader uses {}", T::BYTES)));
        }
        if r.u8()? != 0 {
            return Err(Error::malformed("checkpoint", 7, "reserved byte is not zero"));
        }
        let (config_hash, seed, epoch, step) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::malformed("checkpoint", at, "tensor name is not UTF-8"))?;
            let tag = r.u8()?;
            if !(tag <= ParamKind::NormShift.tag() || tag == BUFFER_TAG || tag == MOMENTUM_TAG) {
                return Err(Error::malformed("checkpoint", r.pos - 1, format!("unknown tensor kind {tag}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::malformed("checkpoint", r.pos, "tensor too large"))?;
            let raw = r.take(n.checked_mul(T::BYTES as usize).ok_or_else(|| Error::malformed("checkpoint", r.pos, "tensor too large"))?)?;
            let values = raw.chunks_exact(T::BYTES as usize).map(T::from_le_slice).collect();
            tensors.push(Tensor { name, tag, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::malformed("checkpoint", r.pos, "trailing bytes"));
        }
        Ok(Self {
            config_hash,
            seed,
            epoch,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::malformed("checkpoint", self.pos, format!("need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}
