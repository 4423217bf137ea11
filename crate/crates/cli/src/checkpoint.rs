//! Binary checkpoint: magic `LMLP`, `u32` version, the run config as text,
//! the training step, parameter records and optimizer moments. All integers
//! and values are little-endian; values are `f32`.

use std::fs;
use std::path::Path;

use lmlp_core::blocks::NamedParams;
use lmlp_core::{Error, Result};

use crate::config::RunConfig;
use crate::optim::Moments;

pub const MAGIC: &[u8; 4] = b"LMLP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: Vec<TensorRecord>,
    pub optimizer_step: u64,
    pub moments: Vec<Moments>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, step: u64, params: &NamedParams<f32>, optimizer_step: u64, moments: &[Moments]) -> Self {
        Self {
            config: config.clone(),
            step,
            params: params
                .iter()
                .map(|(n, p)| TensorRecord { name: n.clone(), shape: p.shape().to_vec(), data: p.to_vec() })
                .collect(),
            optimizer_step,
            moments: moments.to_vec(),
        }
    }

    /// Copies stored values into `params`, which must match by name and shape.
    pub fn restore(&self, params: &NamedParams<f32>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((name, p), rec) in params.iter().zip(&self.params) {
            if *name != rec.name || p.shape() != rec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                    rec.name,
                    rec.shape,
                    p.shape()
                )));
            }
            p.set_data(rec.data.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text());
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for r in &self.params {
            w.str(&r.name);
            w.u32(r.shape.len() as u32);
            for &d in &r.shape {
                w.u64(d as u64);
            }
            w.values(&r.data);
        }
        w.u64(self.optimizer_step);
        w.u32(self.moments.len() as u32);
        for m in &self.moments {
            w.str(&m.name);
            w.values(&m.m);
            w.values(&m.v);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing LMLP magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let config = RunConfig::parse_str(&r.str()?)?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.values()?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(bad(&format!("tensor {name} has {} values for shape {shape:?}", data.len())));
            }
            params.push(TensorRecord { name, shape, data });
        }
        let optimizer_step = r.u64()?;
        let n = r.u32()? as usize;
        let mut moments = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let m = r.values()?;
            let v = r.values()?;
            moments.push(Moments { name, m, v });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config, step, params, optimizer_step, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn bad(msg: &str) -> Error {
    Error::Config(format!("corrupt checkpoint: {msg}"))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn values(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid utf-8"))
    }

    fn values(&mut self) -> Result<Vec<f32>> {
        let n = usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| bad("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
