//! Transitions, offline datasets, the transition file format and the replay buffer.
//!
//! Transition file layout, little-endian: `"CPRL"`, version `u32`, obs_dim
//! `u32`, act_dim `u32`, count `u64`, env-id length `u16` + UTF-8 id, then
//! `count` rows of `f32` laid out `[s | a | r | s' | done]`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const TRANSITION_MAGIC: &[u8; 4] = b"CPRL";
pub const TRANSITION_VERSION: u32 = 1;

/// One `(s, a, r, s', done)` sample. Stored in single precision to match the file format.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f32>,
    pub a: Vec<f32>,
    pub r: f32,
    pub s_next: Vec<f32>,
    pub done: bool,
}

impl Transition {
    pub fn new(s: &[f64], a: &[f64], r: f64, s_next: &[f64], done: bool) -> Self {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
        Transition {
            s: f(s),
            a: f(a),
            r: r as f32,
            s_next: f(s_next),
            done,
        }
    }
}

/// Row-stacked minibatch in double precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub dones: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions<'a>(
        obs_dim: usize,
        act_dim: usize,
        items: impl IntoIterator<Item = &'a Transition>,
    ) -> Self {
        let mut b = Batch {
            obs_dim,
            act_dim,
            ..Default::default()
        };
        for t in items {
            b.states.extend(t.s.iter().map(|&v| v as f64));
            b.actions.extend(t.a.iter().map(|&v| v as f64));
            b.rewards.push(t.r as f64);
            b.next_states.extend(t.s_next.iter().map(|&v| v as f64));
            b.dones.push(if t.done { 1.0 } else { 0.0 });
        }
        b
    }
}

fn sample_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Contract("cannot sample from an empty collection".into()));
    }
    Ok((0..n).map(|_| rng.random_range(0..len)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env_id: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn new(env_id: impl Into<String>, obs_dim: usize, act_dim: usize) -> Self {
        Dataset {
            env_id: env_id.into(),
            obs_dim,
            act_dim,
            transitions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        check_dims(&t, self.obs_dim, self.act_dim)?;
        self.transitions.push(t);
        Ok(())
    }

    /// Uniform minibatch with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        let idx = sample_indices(self.len(), batch_size, rng)
            .map_err(|_| Error::Data("dataset is empty".into()))?;
        Ok(Batch::from_transitions(
            self.obs_dim,
            self.act_dim,
            idx.iter().map(|&i| &self.transitions[i]),
        ))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TRANSITION_MAGIC)?;
        w.write_all(&TRANSITION_VERSION.to_le_bytes())?;
        w.write_all(&(self.obs_dim as u32).to_le_bytes())?;
        w.write_all(&(self.act_dim as u32).to_le_bytes())?;
        w.write_all(&(self.transitions.len() as u64).to_le_bytes())?;
        let id = self.env_id.as_bytes();
        let idl = u16::try_from(id.len()).map_err(|_| Error::Format("env id too long".into()))?;
        w.write_all(&idl.to_le_bytes())?;
        w.write_all(id)?;
        let mut row = Vec::with_capacity(4 * (2 * self.obs_dim + self.act_dim + 2));
        for t in &self.transitions {
            row.clear();
            let vals = t
                .s
                .iter()
                .chain(&t.a)
                .chain(std::iter::once(&t.r))
                .chain(&t.s_next)
                .copied()
                .chain(std::iter::once(if t.done { 1.0f32 } else { 0.0 }));
            for v in vals {
                row.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&row)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRANSITION_MAGIC {
            return Err(Error::Format("not a transition file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != TRANSITION_VERSION {
            return Err(Error::Format(format!("unsupported transition file version {version}")));
        }
        let obs_dim = read_u32(r)? as usize;
        let act_dim = read_u32(r)? as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut id)?;
        let env_id = String::from_utf8(id).map_err(|_| Error::Format("env id is not UTF-8".into()))?;
        let width = 2 * obs_dim + act_dim + 2;
        let mut buf = vec![0u8; 4 * width];
        let mut transitions = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let row: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let done = row[width - 1];
            if done != 0.0 && done != 1.0 {
                return Err(Error::Format(format!("done flag must be 0 or 1, got {done}")));
            }
            transitions.push(Transition {
                s: row[..obs_dim].to_vec(),
                a: row[obs_dim..obs_dim + act_dim].to_vec(),
                r: row[obs_dim + act_dim],
                s_next: row[obs_dim + act_dim + 1..2 * obs_dim + act_dim + 1].to_vec(),
                done: done == 1.0,
            });
        }
        Ok(Dataset {
            env_id,
            obs_dim,
            act_dim,
            transitions,
        })
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

    /// Loads a file and checks its dims against an environment's.
    pub fn load_for(path: &Path, obs_dim: usize, act_dim: usize) -> Result<Self> {
        let d = Self::load(path)?;
        if d.obs_dim != obs_dim || d.act_dim != act_dim {
            return Err(Error::Data(format!(
                "dataset has obs/act dims {}/{}, environment expects {obs_dim}/{act_dim}",
                d.obs_dim, d.act_dim
            )));
        }
        Ok(d)
    }
}

fn check_dims(t: &Transition, obs_dim: usize, act_dim: usize) -> Result<()> {
    if t.s.len() != obs_dim || t.s_next.len() != obs_dim {
        return Err(Error::Dimension {
            axis: 1,
            expected: obs_dim,
            got: if t.s.len() != obs_dim { t.s.len() } else { t.s_next.len() },
        });
    }
    if t.a.len() != act_dim {
        return Err(Error::Dimension {
            axis: 1,
            expected: act_dim,
            got: t.a.len(),
        });
    }
    if !t.r.is_finite() {
        return Err(Error::Data("non-finite reward".into()));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Fixed-capacity FIFO store of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay buffer capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            act_dim,
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        check_dims(&t, self.obs_dim, self.act_dim)?;
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.storage.len() < self.capacity { 0 } else { self.cursor };
        self.storage[split..].iter().chain(&self.storage[..split])
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        sample_indices(self.len(), n, rng)
    }

    /// Uniform minibatch with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(batch_size, rng)?;
        Ok(Batch::from_transitions(
            self.obs_dim,
            self.act_dim,
            idx.iter().map(|&i| &self.storage[i]),
        ))
    }
}
