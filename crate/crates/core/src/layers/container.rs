//! Flat binary weight container.
//!
//! Layout: `b"SALB"`, version `u32`, then records until EOF, each
//! `{name_len u32, name bytes, rows u32, cols u32, rows·cols f64}`.
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::attention::BlockWeights;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SALB";
pub const VERSION: u32 = 1;

/// Ordered list of named matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    records: Vec<(String, Tensor)>,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if !t.is_matrix() {
            return Err(Error::Shape(format!("record {name} must be a matrix, got {:?}", t.shape())));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate record name {name}")));
        }
        self.records.push((name, t));
        Ok(())
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.push(name, Tensor::row(v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing record {name}")))
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for (name, t) in &self.records {
            out.write_all(&to_u32(name.len(), "name length")?.to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&to_u32(t.rows(), "rows")?.to_le_bytes())?;
            out.write_all(&to_u32(t.cols(), "cols")?.to_le_bytes())?;
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail for in-range sizes");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected SALB".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let mut bundle = Self::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("record name is not utf-8".into()))?
                .to_string();
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len() - cur.pos))
                .ok_or_else(|| Error::Format(format!("record {name} truncated")))?;
            let data = cur
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(vec![rows, cols], data).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
            bundle.push(name, t)?;
        }
        Ok(bundle)
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Stores every array of `w` under `prefix.*`. Norm modes, epsilon and the
    /// spectral flag are configuration and are not written.
    pub fn push_block(&mut self, prefix: &str, w: &BlockWeights) -> Result<()> {
        self.push(format!("{prefix}.w_q"), w.w_q.clone())?;
        self.push(format!("{prefix}.w_k"), w.w_k.clone())?;
        self.push(format!("{prefix}.w_v"), w.w_v.clone())?;
        self.push(format!("{prefix}.w_l"), w.w_l.clone())?;
        self.push_vector(format!("{prefix}.b_l"), &w.b_l)?;
        self.push_vector(format!("{prefix}.norm_z.alpha"), &w.norm_z.alpha)?;
        self.push_vector(format!("{prefix}.norm_z.beta"), &w.norm_z.beta)?;
        self.push_vector(format!("{prefix}.norm_c.alpha"), &w.norm_c.alpha)?;
        self.push_vector(format!("{prefix}.norm_c.beta"), &w.norm_c.beta)?;
        self.push_vector(format!("{prefix}.sn_state_v"), &w.sn_state_v)?;
        self.push_vector(format!("{prefix}.sn_state_l"), &w.sn_state_l)
    }

    /// Rebuilds a block saved with [`WeightBundle::push_block`], taking
    /// configuration from `template` and arrays from the bundle.
    pub fn read_block(&self, prefix: &str, template: &BlockWeights) -> Result<BlockWeights> {
        let m = |s: &str| self.require(&format!("{prefix}.{s}")).cloned();
        let v = |s: &str| m(s).map(Tensor::into_data);
        let mut w = template.clone();
        w.w_q = m("w_q")?;
        w.w_k = m("w_k")?;
        w.w_v = m("w_v")?;
        w.w_l = m("w_l")?;
        w.b_l = v("b_l")?;
        w.norm_z.alpha = v("norm_z.alpha")?;
        w.norm_z.beta = v("norm_z.beta")?;
        w.norm_c.alpha = v("norm_c.alpha")?;
        w.norm_c.beta = v("norm_c.beta")?;
        w.sn_state_v = v("sn_state_v")?;
        w.sn_state_l = v("sn_state_l")?;
        w.validate()?;
        Ok(w)
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
