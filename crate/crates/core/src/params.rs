//! Named parameter storage with frozen/trainable partitioning, deterministic
//! initialization, and a versioned checkpoint format.
//!
//! Checkpoint format v1 (binary, little-endian):
//!
//! ```text
//! magic   8 bytes  b"TCKPv1\0\0"
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name utf-8 bytes
//!   trainable u8 (0 or 1)
//!   ndim u8, dims u32 * ndim
//!   data f64 * product(dims)
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 8] = b"TCKPv1\0\0";

struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Insertion-ordered collection of named tensors. Iteration order is the
/// insertion order everywhere (updates, checkpoints, hashing), which keeps
/// training and serialization deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        if let Some(&i) = self.index.get(name) {
            self.entries[i].tensor = tensor;
            self.entries[i].trainable = trainable;
            return;
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::Config(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&i| self.entries[i].trainable)
            .unwrap_or(false)
    }

    /// Names of all tensors in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    /// Total number of trainable scalar parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Trainable scalar count restricted to names starting with `prefix`.
    pub fn trainable_count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// FNV-1a hash over the bit patterns of every frozen tensor, in
    /// insertion order. Training must leave this unchanged.
    pub fn frozen_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            if e.trainable {
                continue;
            }
            eat(e.name.as_bytes());
            for v in e.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.trainable as u8);
            out.push(e.tensor.shape().len() as u8);
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(Error::Parse("checkpoint truncated".into()));
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, 8)? != CKPT_MAGIC {
            return Err(Error::Parse("not a v1 checkpoint (bad magic)".into()));
        }
        let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
                .map_err(|_| Error::Parse("checkpoint name is not utf-8".into()))?;
            let trainable = take(&mut cur, 1)?[0] != 0;
            let ndim = take(&mut cur, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut cur, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Tensor::new(shape, data)?, trainable);
        }
        Ok(store)
    }
}

/// Deterministic per-purpose RNG stream: one master seed, distinct streams
/// for frozen weights, trainable weights, data, shuffles, etc.
pub fn seed_stream(seed: u64, tag: &str) -> ChaCha12Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha12Rng::seed_from_u64(seed ^ h)
}

/// Xavier/Glorot-normal initialization for a weight of the given fan pair.
pub fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    gaussian(shape, 0.0, std, rng)
}

pub fn gaussian(shape: &[usize], mean: f64, std: f64, rng: &mut ChaCha12Rng) -> Tensor {
    // Box-Muller; two uniforms per normal keeps the stream layout simple.
    Tensor::from_fn(shape, |_| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5), true);
        store.insert("a.frozen", Tensor::from_fn(&[4], |i| -(i as f64)), false);
        let dir = std::env::temp_dir().join("nucseg_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert!(loaded.get("a.w").unwrap().bits_eq(store.get("a.w").unwrap()));
        assert!(loaded.is_trainable("a.w"));
        assert!(!loaded.is_trainable("a.frozen"));
        assert_eq!(loaded.frozen_hash(), store.frozen_hash());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = std::env::temp_dir().join("nucseg_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Parse(_))));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn frozen_hash_ignores_trainable_changes() {
        let mut store = ParamStore::new();
        store.insert("f", Tensor::from_fn(&[3], |i| i as f64), false);
        store.insert("t", Tensor::zeros(&[3]), true);
        let h0 = store.frozen_hash();
        store.get_mut("t").unwrap().data_mut()[0] = 42.0;
        assert_eq!(store.frozen_hash(), h0);
        store.get_mut("f").unwrap().data_mut()[0] = 42.0;
        assert_ne!(store.frozen_hash(), h0);
    }

    #[test]
    fn seed_streams_are_distinct_and_reproducible() {
        let mut a1 = seed_stream(7, "frozen");
        let mut a2 = seed_stream(7, "frozen");
        let mut b = seed_stream(7, "data");
        let x1: f64 = a1.gen();
        let x2: f64 = a2.gen();
        let y: f64 = b.gen();
        assert_eq!(x1, x2);
        assert_ne!(x1, y);
    }

    #[test]
    fn trainable_counts_by_prefix() {
        let mut store = ParamStore::new();
        store.insert("enc.b0.w", Tensor::zeros(&[2, 3]), true);
        store.insert("enc.b1.w", Tensor::zeros(&[4]), true);
        store.insert("dec.q", Tensor::zeros(&[5]), true);
        store.insert("enc.frozen", Tensor::zeros(&[100]), false);
        assert_eq!(store.trainable_count(), 15);
        assert_eq!(store.trainable_count_prefix("enc."), 10);
    }
}
