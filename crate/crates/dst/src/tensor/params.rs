//! Named parameter store with Adam state and binary checkpointing.
//!
//! Entries keep insertion order, so optimizer sweeps and checkpoint files are
//! reproducible run to run. Values are shared with graphs through `Arc` and
//! mutated in place between batches via `Arc::make_mut` (no graph holds a
//! reference by then).
//!
//! Checkpoint layout (all little-endian): magic `DSTW`, version u16, entry
//! count u32, then per entry {name length u16, UTF-8 name, rank u8, extents
//! u32 each, values as f32}. Adam moments are not persisted; a reloaded
//! model restarts optimizer state.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{fmt_shape, Real, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"DSTW";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<T> {
    name: String,
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    trainable: bool,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
    grad: Option<Vec<T>>,
}

impl<T: Real> ParamEntry<T> {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn value(&self) -> &[T] {
        &self.value
    }
    pub fn trainable(&self) -> bool {
        self.trainable
    }
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }
    pub(crate) fn shared_value(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.value)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn add(
        &mut self,
        name: &str,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let numel = value.numel();
        let Tensor { shape, data } = value;
        let entry = ParamEntry {
            name: name.to_string(),
            shape,
            value: Arc::new(data),
            trainable,
            m: vec![T::zero(); numel],
            v: vec![T::zero(); numel],
            step: 0,
            grad: None,
        };
        self.entries.push(entry);
        let id = ParamId(self.entries.len() - 1);
        self.by_name.insert(name.to_string(), id.0);
        Ok(id)
    }

    /// Trainable weight initialized uniformly in `[-1/sqrt(fan_in),
    /// 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId, TensorError> {
        use rand::Rng;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|_| T::from_f64((2.0 * rng.gen::<f64>() - 1.0) * bound))
            .collect();
        self.add(name, Tensor::new(shape, data)?, true)
    }

    pub fn add_zeros(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        self.add(name, Tensor::zeros(shape), trainable)
    }

    pub fn add_const(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fill: f64,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        self.add(name, Tensor::filled(shape, T::from_f64(fill)), trainable)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    /// Overwrites an entry's value in place (used for normalization
    /// statistics buffers). The shape must not change.
    pub fn set_value(&mut self, id: ParamId, data: Vec<T>) -> Result<(), TensorError> {
        let entry = &mut self.entries[id.0];
        if data.len() != entry.value.len() {
            return Err(TensorError::DimMismatch {
                op: "set_value",
                left: fmt_shape(&entry.shape),
                right: format!("{} elements", data.len()),
            });
        }
        *Arc::make_mut(&mut entry.value) = data;
        Ok(())
    }

    /// Freezes or unfreezes an entry. Frozen entries keep their value, stay
    /// in checkpoints, and are skipped by the optimizer.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn accumulate_grad(&mut self, id: ParamId, contrib: Vec<T>) {
        let entry = &mut self.entries[id.0];
        debug_assert_eq!(contrib.len(), entry.value.len());
        match &mut entry.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Vec<T>)>) {
        for (id, g) in grads {
            self.accumulate_grad(id, g);
        }
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn grads_finite(&self) -> Result<(), TensorError> {
        for e in &self.entries {
            if let Some(g) = &e.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(TensorError::NonFinite(format!("gradient of `{}`", e.name)));
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// One bias-corrected Adam update over every trainable entry, in insertion
/// order. Every trainable entry must hold a gradient; gradients are cleared
/// afterwards and step counters advance.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<(), TensorError> {
    for entry in &mut store.entries {
        if !entry.trainable {
            continue;
        }
        let grad = entry
            .grad
            .take()
            .ok_or_else(|| TensorError::MissingGrad(entry.name.clone()))?;
        entry.step += 1;
        let t = entry.step;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let value = Arc::make_mut(&mut entry.value);
        for (((p, &g), m), v) in value
            .iter_mut()
            .zip(&grad)
            .zip(entry.m.iter_mut())
            .zip(entry.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Writes every entry (weights and statistics buffers alike) as f32 values.
pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<(), TensorError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for e in &store.entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(TensorError::Checkpoint(format!(
                "parameter name `{}` too long",
                e.name
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.iter() {
            buf.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads checkpoint values into an already constructed store. The file must
/// contain exactly the store's parameter set; the first name or shape
/// mismatch is reported. Optimizer moments restart from zero.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<(), TensorError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut cur = &bytes[..];

    fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8], TensorError> {
        if cur.len() < n {
            return Err(TensorError::Checkpoint("truncated file".to_string()));
        }
        let (head, tail) = cur.split_at(n);
        *cur = tail;
        Ok(head)
    }

    let magic = take(&mut cur, 4)?;
    if magic != MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = u16::from_le_bytes(take(&mut cur, 2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes")) as usize;
    if count != store.entries.len() {
        return Err(TensorError::Checkpoint(format!(
            "file has {count} parameters, model has {}",
            store.entries.len()
        )));
    }
    let mut loaded: Vec<(String, Vec<usize>, Vec<T>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(&mut cur, 2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("non-UTF-8 parameter name".to_string()))?;
        let rank = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut cur, numel * 4)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|b| T::from_f32(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        loaded.push((name, shape, data));
    }
    if !cur.is_empty() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes",
            cur.len()
        )));
    }
    for (name, shape, data) in loaded {
        let id = store.by_name.get(&name).copied().ok_or_else(|| {
            TensorError::Checkpoint(format!("parameter `{name}` not present in model"))
        })?;
        let entry = &mut store.entries[id];
        if entry.shape != shape {
            return Err(TensorError::Checkpoint(format!(
                "parameter `{name}`: file shape {} vs model shape {}",
                fmt_shape(&shape),
                fmt_shape(&entry.shape)
            )));
        }
        *Arc::make_mut(&mut entry.value) = data;
        let n = entry.value.len();
        entry.m = vec![T::zero(); n];
        entry.v = vec![T::zero(); n];
        entry.step = 0;
        entry.grad = None;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{Tensor, TensorError};
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_single_step_hand_value() {
        // p = 1, g = 1, defaults: m-hat = 1, v-hat = 1, update ~ lr.
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store
            .add("p", Tensor::new(vec![1], vec![1.0]).unwrap(), true)
            .unwrap();
        store.accumulate_grad(id, vec![1.0]);
        adam_step(&mut store, &AdamConfig::default()).unwrap();
        let p = store.value(id)[0];
        assert!((p - 0.999).abs() < 1e-9, "got {p}");
    }

    #[test]
    fn adam_two_steps_match_scalar_recurrence() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store
            .add("p", Tensor::new(vec![1], vec![0.5]).unwrap(), true)
            .unwrap();
        // Mirror the recurrence by hand.
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.5f64);
        let cfg = AdamConfig::default();
        for t in 1..=2u32 {
            let g = 0.3 * t as f64;
            store.accumulate_grad(id, vec![g]);
            adam_step(&mut store, &cfg).unwrap();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        assert!((store.value(id)[0] - p).abs() < 1e-15);
    }

    #[test]
    fn adam_missing_gradient_names_parameter() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_zeros("w.first", vec![2], true).unwrap();
        let err = adam_step(&mut store, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TensorError::MissingGrad(ref n) if n == "w.first"));
    }

    #[test]
    fn adam_skips_buffers() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_zeros("stats", vec![2], false).unwrap();
        adam_step(&mut store, &AdamConfig::default()).unwrap();
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_zeros("w", vec![1], true).unwrap();
        let err = store.add_zeros("w", vec![1], true).unwrap_err();
        assert!(matches!(err, TensorError::DuplicateParam(_)));
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let id = store
            .add_uniform("w", vec![64, 16], 64, &mut rng)
            .unwrap();
        let bound = 1.0 / 8.0;
        assert!(store.value(id).iter().all(|v| v.abs() <= bound));
        // Same seed, same values.
        let mut store2: ParamStore<f64> = ParamStore::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let id2 = store2.add_uniform("w", vec![64, 16], 64, &mut rng2).unwrap();
        assert_eq!(store.value(id), store2.value(id2));
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store.add_uniform("a.w", vec![3, 4], 3, &mut rng).unwrap();
        store.add_zeros("a.b", vec![4], true).unwrap();
        store.add_const("bn.mean", vec![4], 0.25, false).unwrap();
        let p1 = dir.path().join("one.dstw");
        let p2 = dir.path().join("two.dstw");
        save_checkpoint(&store, &p1).unwrap();

        let mut fresh: ParamStore<f32> = ParamStore::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        fresh.add_uniform("a.w", vec![3, 4], 3, &mut rng2).unwrap();
        fresh.add_zeros("a.b", vec![4], true).unwrap();
        fresh.add_const("bn.mean", vec![4], 0.0, false).unwrap();
        load_checkpoint(&mut fresh, &p1).unwrap();
        save_checkpoint(&fresh, &p2).unwrap();

        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(fresh.value(fresh.id("bn.mean").unwrap()), &[0.25; 4]);
    }

    #[test]
    fn checkpoint_shape_mismatch_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add_zeros("enc.w", vec![2, 3], true).unwrap();
        let path = dir.path().join("ck.dstw");
        save_checkpoint(&store, &path).unwrap();

        let mut other: ParamStore<f32> = ParamStore::new();
        other.add_zeros("enc.w", vec![3, 3], true).unwrap();
        let err = load_checkpoint(&mut other, &path).unwrap_err();
        assert!(err.to_string().contains("enc.w"), "{err}");
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.dstw");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        let mut store: ParamStore<f32> = ParamStore::new();
        let err = load_checkpoint(&mut store, &path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
