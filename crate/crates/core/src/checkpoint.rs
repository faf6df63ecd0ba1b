//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SPCKPT\0\0" | version u32 | config length u64 | config TOML
//! | vocab hash length u32 | vocab hash | tensor count u32
//! | per tensor: name length u32, name, rank u32, extents u64 × rank, values f64 × product
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::config::Config;
use crate::embeddings::WordVectors;
use crate::error::{Error, Result};
use crate::model::{load_word_vectors, Model, Network};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub vocab_hash: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(mut w: W, config_text: &str, vocab_hash: &str, store: &ParamStore) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config_text.len() as u64).to_le_bytes())?;
    w.write_all(config_text.as_bytes())?;
    w.write_all(&(vocab_hash.len() as u32).to_le_bytes())?;
    w.write_all(vocab_hash.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &e in shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut buf)
            .map_err(|e| bad(format!("read failed: {e}")))?;
        if buf.len() != n {
            return Err(bad("truncated file"));
        }
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.bytes(n)?).map_err(|_| bad("invalid UTF-8 in header"))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = Reader { inner: r };
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(bad("not a checkpoint (bad magic bytes)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = r.u64()? as usize;
    let config_text = r.string(len)?;
    let len = r.u32()? as usize;
    let vocab_hash = r.string(len)?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = r.string(len)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(Checkpoint {
        version,
        config_text,
        vocab_hash,
        tensors,
    })
}

/// Writes to a sibling temporary file and renames it into place, so a failed
/// save never leaves a partial checkpoint at `path`.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let tmp = path.with_extension("tmp-ckpt");
    let res = (|| {
        let f = File::create(&tmp)?;
        write_checkpoint(
            BufWriter::new(f),
            &model.config().to_toml(),
            &model.words.vocab_hash(),
            &model.params,
        )?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f)).map_err(|e| bad(format!("{}: {e}", path.display())))
}

/// Copies checkpoint tensors into a freshly built store, requiring the same
/// names and shapes.
pub fn restore_params(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

/// Loads a checkpoint, reading word vectors from the path in its config.
pub fn load_model(path: &Path) -> Result<Model> {
    let ck = read_checkpoint_file(path)?;
    let config = Config::from_toml(&ck.config_text)?;
    let words = Arc::new(load_word_vectors(&config)?);
    model_from_checkpoint(ck, words)
}

/// Rebuilds the model around already-loaded word vectors, which must hash to
/// the recorded vocabulary.
pub fn model_from_checkpoint(ck: Checkpoint, words: Arc<WordVectors>) -> Result<Model> {
    let config = Config::from_toml(&ck.config_text)?;
    let hash = words.vocab_hash();
    if hash != ck.vocab_hash {
        return Err(bad(format!(
            "vocabulary mismatch: checkpoint {}, loaded {hash}",
            ck.vocab_hash
        )));
    }
    let (net, mut params) = Network::build(&config)?;
    restore_params(&mut params, ck.tensors)?;
    Ok(Model { net, params, words })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> Model {
        let cfg = Config { seed, ..Config::tiny() };
        Model::new(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&p, &m).unwrap();
        let back = load_model(&p).unwrap();
        for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(
                a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(back.config(), m.config());
        let p2 = dir.path().join("again.ckpt");
        save_model(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        assert!(!dir.path().join("m.tmp-ckpt").exists());
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let m = tiny_model(1);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.config().to_toml(), &m.words.vocab_hash(), &m.params).unwrap();
        let mut wrong_version = buf.clone();
        wrong_version[8] = 9;
        assert!(read_checkpoint(&wrong_version[..]).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        assert!(read_checkpoint(&b"garbage!"[..]).is_err());

        let mut ck = read_checkpoint(&buf[..]).unwrap();
        ck.tensors[0].1 = Tensor::zeros(&[1]);
        assert!(model_from_checkpoint(ck.clone(), m.words.clone()).is_err());
        ck = read_checkpoint(&buf[..]).unwrap();
        ck.vocab_hash = "other".into();
        assert!(model_from_checkpoint(ck, m.words.clone()).is_err());
        let mut other = Config::tiny();
        other.memory_dim = 4;
        let mut ck = read_checkpoint(&buf[..]).unwrap();
        ck.config_text = other.to_toml();
        assert!(model_from_checkpoint(ck, m.words.clone()).is_err());
    }

    #[test]
    fn failed_save_leaves_nothing() {
        let m = tiny_model(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing-dir").join("m.ckpt");
        assert!(save_model(&p, &m).is_err());
        assert!(!p.exists());
    }
}
