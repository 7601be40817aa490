//! Binary checkpoint: magic, version, config hash and text, counters,
//! length-prefixed named tensors (little-endian f64) and the RNG state.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::tensor::{Adam, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STGN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn store_tensors<'a>(prefix: &str, store: &'a ParamStore, opt: &'a Adam) -> Vec<(String, &'a Tensor)> {
    let (m, v) = opt.moments();
    let mut out = Vec::new();
    for (i, p) in store.iter().enumerate() {
        out.push((p.name.clone(), &*p.value));
        out.push((format!("{prefix}.adam.m.{}", p.name), &m[i]));
        out.push((format!("{prefix}.adam.v.{}", p.name), &v[i]));
    }
    out
}

/// Serialized checkpoint bytes.
pub fn checkpoint_bytes(t: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, t.config.hash());
    put_str(&mut out, &t.config.to_text());
    put_u64(&mut out, t.pretrain_done);
    put_u64(&mut out, t.adv_done);
    put_u64(&mut out, t.g_opt.step_count());
    put_u64(&mut out, t.d_opt.step_count());
    let mut tensors = store_tensors("g", &t.generator.params, &t.g_opt);
    tensors.extend(store_tensors("d", &t.discriminator.params, &t.d_opt));
    put_u32(&mut out, tensors.len() as u32);
    for (name, tensor) in tensors {
        put_tensor(&mut out, &name, tensor);
    }
    out.extend_from_slice(&t.rng.get_seed());
    put_u64(&mut out, t.rng.get_stream());
    out.extend_from_slice(&t.rng.get_word_pos().to_le_bytes());
    out
}

pub fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(t))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("bad string: {e}")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor {name} has {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn restore_store(
    prefix: &str,
    store: &mut ParamStore,
    opt: &mut Adam,
    step: u64,
    tensors: &mut std::collections::BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut first = Vec::with_capacity(store.len());
    let mut second = Vec::with_capacity(store.len());
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let mut take = |key: String| tensors.remove(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")));
        let value = take(name.clone())?;
        first.push(take(format!("{prefix}.adam.m.{name}"))?);
        second.push(take(format!("{prefix}.adam.v.{name}"))?);
        let id = store.id(&name).expect("name from store");
        store.set(id, value).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    opt.restore(step, first, second).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Loads a checkpoint, rebuilding the networks from the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    parse_checkpoint(&fs::read(path)?, None)
}

/// Loads a checkpoint and refuses it unless it was written for `config`.
pub fn load_checkpoint_checked(path: &Path, config: &TrainConfig) -> Result<Trainer> {
    parse_checkpoint(&fs::read(path)?, Some(config))
}

pub fn parse_checkpoint(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes; not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hash = r.u64()?;
    let config = TrainConfig::from_text(&r.string()?)?;
    if config.hash() != hash {
        return Err(Error::Checkpoint("config text does not match its stored hash".into()));
    }
    if let Some(exp) = expected {
        if exp.hash() != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {hash:016x} differs from the requested config {:016x}",
                exp.hash()
            )));
        }
    }
    let pretrain_done = r.u64()?;
    let adv_done = r.u64()?;
    let g_step = r.u64()?;
    let d_step = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut t = Trainer::new(config)?;
    restore_store("g", &mut t.generator.params, &mut t.g_opt, g_step, &mut tensors)?;
    restore_store("d", &mut t.discriminator.params, &mut t.d_opt, d_step, &mut tensors)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    t.rng = rng;
    t.pretrain_done = pretrain_done;
    t.adv_done = adv_done;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> TrainConfig {
        TrainConfig {
            g_blocks: 1,
            g_d_model: 8,
            g_heads: 2,
            g_d_ff: 8,
            d_blocks: 1,
            d_d_model: 8,
            d_heads: 2,
            d_d_ff: 8,
            patch_len: 4,
            adv_seq_len: 8,
            primer_len: 2,
            pretrain_seq_len: 8,
            max_len: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut t = Trainer::new(config()).unwrap();
        let _: f64 = rand::Rng::random(&mut t.rng);
        let bytes = checkpoint_bytes(&t);
        let back = parse_checkpoint(&bytes, Some(&config())).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert_eq!(back.rng, t.rng);
    }

    #[test]
    fn refuses_corruption_and_mismatch() {
        let t = Trainer::new(config()).unwrap();
        let mut bytes = checkpoint_bytes(&t);
        let other = TrainConfig { seed: 9, ..config() };
        assert!(matches!(parse_checkpoint(&bytes, Some(&other)), Err(Error::Checkpoint(_))));
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1], None).is_err());
        bytes[0] = b'X';
        assert!(matches!(parse_checkpoint(&bytes, None), Err(Error::Checkpoint(_))));
    }
}
