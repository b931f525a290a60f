//! Named-array checkpoint files.
//!
//! Layout, all integers little-endian:
//! `"CPCK"`, version `u32`, count `u32`, then per array a `u16` name length,
//! the UTF-8 name, a `u8` rank, `rank` × `u32` dims and the `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    /// Appends tensors under `prefix.name`.
    pub fn extend_prefixed<'a>(
        &mut self,
        prefix: &str,
        names: &[String],
        tensors: impl IntoIterator<Item = &'a Tensor>,
    ) {
        for (n, t) in names.iter().zip(tensors) {
            let mut t = t.clone();
            t.grad = None;
            t.requires_grad = false;
            self.entries.push((format!("{prefix}.{n}"), t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies `prefix.name` arrays into `dst`, checking shapes.
    pub fn restore_prefixed<'a>(
        &self,
        prefix: &str,
        names: &[String],
        dst: impl IntoIterator<Item = &'a mut Tensor>,
    ) -> Result<()> {
        for (n, t) in names.iter().zip(dst) {
            let key = format!("{prefix}.{n}");
            let src = self
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "`{key}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many arrays".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let nl = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("name too long: {name}")))?;
            w.write_all(&nl.to_le_bytes())?;
            w.write_all(nb)?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::Format("rank exceeds 255".into()))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format("dim exceeds u32".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0])
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b8 = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Checkpoint file name for an epoch, e.g. `ckpt_00003.cpck`.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch:05}.cpck")
}
