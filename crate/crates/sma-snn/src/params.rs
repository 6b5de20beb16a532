//! Named parameter storage, graph binding, and the on-disk container.
//!
//! A `ParamStore` is an ordered map from layer path (e.g. `block2.sma.enc0.kernel`)
//! to a tensor plus a trainable flag. Layers register tensors at build time;
//! each training step binds store entries into a fresh graph through
//! `Bindings`, which memoizes one `Value` per name so shared parameters are
//! bound once and gradients can be read back by name after `backward`.
//!
//! The container format ("SNNP") is a little-endian binary layout:
//!
//! ```text
//! magic  b"SNNP"
//! u32    version (currently 1)
//! u32    meta count, then per entry: u32 key len, key bytes, u32 val len, val bytes
//! u32    tensor count, then per tensor:
//!        u32 name len, name bytes, u8 trainable, u32 rank, u64 x rank dims,
//!        f64 x numel values
//! ```
//!
//! Strings are UTF-8. Reads carry byte-offset diagnostics so a truncated or
//! corrupted file names the exact position that failed.

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SNNP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!(
                "parameter {:?} registered twice",
                name
            )));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {:?}", name)))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.tensor)
    }

    /// Replace a tensor, keeping shape and flag.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {:?}", name)))?;
        if e.tensor.dims() != tensor.dims() {
            return Err(Error::Shape(format!(
                "parameter {:?} has shape {}, refusing to store {}",
                name,
                e.tensor.shape(),
                tensor.shape()
            )));
        }
        e.tensor = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total scalar count, optionally restricted to trainable entries.
    pub fn scalar_count(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Overwrite this store's tensors from `loaded`, requiring an exact match
    /// of names, shapes, and trainable flags. The error lists every
    /// discrepancy, first mismatched path first.
    pub fn adopt(&mut self, loaded: ParamStore) -> Result<()> {
        let mut diffs: Vec<String> = Vec::new();
        for (name, e) in &self.entries {
            match loaded.entries.get(name) {
                None => diffs.push(format!("missing parameter {:?}", name)),
                Some(l) => {
                    if l.tensor.dims() != e.tensor.dims() {
                        diffs.push(format!(
                            "parameter {:?}: expected shape {}, file has {}",
                            name,
                            e.tensor.shape(),
                            l.tensor.shape()
                        ));
                    } else if l.trainable != e.trainable {
                        diffs.push(format!(
                            "parameter {:?}: trainable flag differs (expected {}, file has {})",
                            name, e.trainable, l.trainable
                        ));
                    }
                }
            }
        }
        for name in loaded.entries.keys() {
            if !self.entries.contains_key(name) {
                diffs.push(format!("unexpected parameter {:?}", name));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Config(format!(
                "parameter store mismatch ({} issue(s)): {}",
                diffs.len(),
                diffs.join("; ")
            )));
        }
        for (name, l) in loaded.entries {
            self.entries.get_mut(&name).expect("validated above").tensor = l.tensor;
        }
        Ok(())
    }
}

/// Per-graph memo of bound parameter values.
#[derive(Debug, Default)]
pub struct Bindings {
    map: IndexMap<String, Value>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind `name` into the graph: trainable entries become gradient leaves,
    /// frozen ones constants. Repeated binds return the same `Value`.
    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<Value> {
        if let Some(v) = self.map.get(name) {
            return Ok(*v);
        }
        let e = store.entry(name)?;
        let v = if e.trainable {
            g.param(e.tensor.clone())
        } else {
            g.constant(e.tensor.clone())
        };
        self.map.insert(name.to_string(), v);
        Ok(v)
    }

    /// Pre-assign a value for `name`, overriding what `bind` would create.
    /// Lets a caller route externally-created graph leaves (e.g. under a
    /// finite-difference harness) through code that binds by name.
    pub fn preset(&mut self, name: &str, v: Value) {
        self.map.insert(name.to_string(), v);
    }

    pub fn value_of(&self, name: &str) -> Option<Value> {
        self.map.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Value)> + '_ {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Register the four tensors of a batch-norm layer under `prefix`:
/// `.gamma` (ones) and `.beta` (zeros) trainable, `.mean` / `.var` running
/// stats frozen.
pub fn register_batch_norm(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.insert(&format!("{}.gamma", prefix), Tensor::ones(&[channels]), true)?;
    store.insert(&format!("{}.beta", prefix), Tensor::zeros(&[channels]), true)?;
    store.insert(&format!("{}.mean", prefix), Tensor::zeros(&[channels]), false)?;
    store.insert(&format!("{}.var", prefix), Tensor::ones(&[channels]), false)?;
    Ok(())
}

/// Apply a registered batch-norm layer, writing updated running statistics
/// back into the store when training.
pub fn apply_batch_norm(
    g: &mut Graph,
    store: &mut ParamStore,
    binds: &mut Bindings,
    prefix: &str,
    x: Value,
    cfg: crate::graph::BnCfg,
    mode: crate::graph::Mode,
) -> Result<Value> {
    let gamma = binds.bind(g, store, &format!("{}.gamma", prefix))?;
    let beta = binds.bind(g, store, &format!("{}.beta", prefix))?;
    let mean_name = format!("{}.mean", prefix);
    let var_name = format!("{}.var", prefix);
    let mut rm = store.get(&mean_name)?.clone();
    let mut rv = store.get(&var_name)?.clone();
    let y = g.batch_norm(x, gamma, beta, &mut rm, &mut rv, cfg, mode)?;
    if matches!(mode, crate::graph::Mode::Train) {
        store.set(&mean_name, rm)?;
        store.set(&var_name, rv)?;
    }
    Ok(y)
}

/// Uniform Kaiming-style init: values in `+-sqrt(6 / fan_in)`.
pub fn kaiming_uniform(dims: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(dims, data).expect("kaiming shape")
}

/// RNG for one named parameter, independent of registration order.
pub fn param_rng(seed: u64, name: &str) -> SeededRng {
    crate::rng::derive(seed, &[crate::rng::tag("init"), crate::rng::tag(name)])
}

// ---- container i/o ----

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str, path: &Path) -> Result<()> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::format(
                path,
                format!(
                    "truncated at byte {} while reading {} ({} byte(s) expected)",
                    at,
                    what,
                    buf.len()
                ),
            )),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn u8(&mut self, what: &str, path: &Path) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what, path)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &str, path: &Path) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what, path)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str, path: &Path) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what, path)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self, what: &str, path: &Path) -> Result<String> {
        let len = self.u32(&format!("{} length", what), path)? as usize;
        if len > 1 << 20 {
            return Err(Error::format(
                path,
                format!("{} length {} exceeds the 1 MiB sanity bound", what, len),
            ));
        }
        let mut buf = vec![0u8; len];
        self.read_exact(&mut buf, what, path)?;
        String::from_utf8(buf)
            .map_err(|_| Error::format(path, format!("{} is not valid UTF-8", what)))
    }
}

/// Write a store and its metadata to `path`.
pub fn write_store(
    path: &Path,
    store: &ParamStore,
    meta: &IndexMap<String, String>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in meta {
        for s in [k, v] {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        }
    }
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, e) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(e.trainable as u8);
        buf.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a store and its metadata from `path`.
pub fn read_store(path: &Path) -> Result<(ParamStore, IndexMap<String, String>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Counted {
        inner: std::io::BufReader::new(f),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic", path)?;
    if &magic != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        ));
    }
    let version = r.u32("version", path)?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {}, expected {}", version, VERSION),
        ));
    }
    let n_meta = r.u32("meta count", path)?;
    let mut meta = IndexMap::new();
    for i in 0..n_meta {
        let k = r.string(&format!("meta key {}", i), path)?;
        let v = r.string(&format!("meta value {}", i), path)?;
        meta.insert(k, v);
    }
    let n_tensors = r.u32("tensor count", path)?;
    let mut store = ParamStore::new();
    for i in 0..n_tensors {
        let name = r.string(&format!("tensor {} name", i), path)?;
        let trainable = match r.u8(&format!("tensor {:?} flag", name), path)? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::format(
                    path,
                    format!("tensor {:?} has trainable flag {}, expected 0/1", name, other),
                ))
            }
        };
        let rank = r.u32(&format!("tensor {:?} rank", name), path)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(
                path,
                format!("tensor {:?} has rank {}, expected 1..=8", name, rank),
            ));
        }
        let mut dims = Vec::with_capacity(rank);
        for d in 0..rank {
            dims.push(r.u64(&format!("tensor {:?} dim {}", name, d), path)? as usize);
        }
        let numel: usize = dims.iter().product();
        if numel > 1 << 28 {
            return Err(Error::format(
                path,
                format!("tensor {:?} claims {} elements, over the sanity bound", name, numel),
            ));
        }
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw, &format!("tensor {:?} data", name), path)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_vec(&dims, data)
            .map_err(|e| Error::format(path, format!("tensor {:?}: {}", name, e)))?;
        store.insert(&name, t, trainable)?;
    }
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.5]).unwrap(), true)
            .unwrap();
        s.insert("a.bn.mean", Tensor::zeros(&[3]), false).unwrap();
        s
    }

    #[test]
    fn container_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.snnp");
        let store = sample_store();
        let mut meta = IndexMap::new();
        meta.insert("epoch".to_string(), "3".to_string());
        write_store(&path, &store, &meta).unwrap();
        let (loaded, meta2) = read_store(&path).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(meta2.get("epoch").map(String::as_str), Some("3"));
    }

    #[test]
    fn truncated_container_reports_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.snnp");
        write_store(&path, &sample_store(), &IndexMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_store(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated at byte"), "{}", msg);
    }

    #[test]
    fn adopt_lists_every_mismatch() {
        let mut expected = sample_store();
        let mut loaded = ParamStore::new();
        loaded
            .insert("a.w", Tensor::zeros(&[3, 2]), true)
            .unwrap();
        loaded.insert("extra", Tensor::zeros(&[1]), true).unwrap();
        let err = expected.adopt(loaded).unwrap_err().to_string();
        assert!(err.contains("a.w"), "{}", err);
        assert!(err.contains("a.bn.mean"), "{}", err);
        assert!(err.contains("extra"), "{}", err);
    }

    #[test]
    fn bindings_memoize_and_route_gradients() {
        let store = sample_store();
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let w1 = b.bind(&mut g, &store, "a.w").unwrap();
        let w2 = b.bind(&mut g, &store, "a.w").unwrap();
        assert_eq!(w1.id(), w2.id());
        let frozen = b.bind(&mut g, &store, "a.bn.mean").unwrap();
        assert!(!g.requires_grad(frozen));
        let s = g.sum_all(w1).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(b.value_of("a.w").unwrap()).unwrap();
        assert_eq!(grad.data(), &[1.0; 6]);
    }

    #[test]
    fn kaiming_respects_the_fan_in_bound() {
        let mut rng = param_rng(1, "layer.w");
        let t = kaiming_uniform(&[64, 9], 9, &mut rng);
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        // re-derivation reproduces the tensor
        let mut rng2 = param_rng(1, "layer.w");
        let t2 = kaiming_uniform(&[64, 9], 9, &mut rng2);
        assert_eq!(t.data(), t2.data());
    }
}
