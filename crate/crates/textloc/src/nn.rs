//! Parameter storage, common layers, optimizers and checkpoint files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, TextLocError};

const CKPT_MAGIC: &[u8; 8] = b"TLCKPT01";

/// Named f64 tensors. Iteration order is the sorted name order, which keeps
/// every pass over the parameters deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Kaiming-style uniform init for a `rows x cols` weight, registered once;
    /// repeated calls reuse the stored tensor.
    pub fn init_matrix(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha20Rng) {
        if self.contains(name) {
            return;
        }
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.insert(name, w.into_dyn());
    }

    pub fn init_vector(&mut self, name: &str, len: usize, fill: f64) {
        if self.contains(name) {
            return;
        }
        self.insert(name, Array1::from_elem(len, fill).into_dyn());
    }

    pub fn init_scalar(&mut self, name: &str, value: f64) {
        if self.contains(name) {
            return;
        }
        self.insert(name, ndarray::arr1(&[value]).into_dyn());
    }

    /// SHA-256 over names, shapes and raw values; identifies a checkpoint.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Versioned binary checkpoint: magic, JSON header (names, shapes, extra
    /// metadata), then raw little-endian f64 payloads in header order.
    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let mut header = Vec::new();
        for (name, t) in &self.tensors {
            header.push(serde_json::json!({ "name": name, "shape": t.shape() }));
        }
        let head = serde_json::json!({ "tensors": header, "meta": meta });
        let head_bytes = serde_json::to_vec(&head)?;

        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(CKPT_MAGIC)?;
            f.write_u64::<LittleEndian>(head_bytes.len() as u64)?;
            f.write_all(&head_bytes)?;
            for (_, t) in &self.tensors {
                for &v in t.iter() {
                    f.write_f64::<LittleEndian>(v)?;
                }
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(TextLocError::Schema(format!(
                "{}: not a checkpoint or unsupported version (magic {:?})",
                path.display(),
                magic
            )));
        }
        let head_len = f.read_u64::<LittleEndian>()? as usize;
        let mut head_bytes = vec![0u8; head_len];
        f.read_exact(&mut head_bytes)?;
        let head: serde_json::Value = serde_json::from_slice(&head_bytes)?;
        let mut store = ParamStore::new();
        for entry in head["tensors"].as_array().ok_or_else(|| {
            TextLocError::Schema("checkpoint header missing tensor list".into())
        })? {
            let name = entry["name"].as_str().unwrap().to_string();
            let shape: Vec<usize> = entry["shape"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_u64().unwrap() as usize)
                .collect();
            let len: usize = shape.iter().product();
            let mut data = vec![0f64; len];
            f.read_f64_into::<LittleEndian>(&mut data)?;
            store
                .tensors
                .insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
        }
        Ok((store, head["meta"].clone()))
    }
}

/// Bind a stored parameter into a graph as a trainable leaf.
pub fn param(g: &mut Graph, store: &ParamStore, name: &str) -> NodeId {
    g.named_leaf(name, store.get(name).clone())
}

/// `x @ W + b` with lazily initialized weights `{prefix}.w` / `{prefix}.b`.
pub struct Linear;

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha20Rng,
    ) {
        store.init_matrix(&format!("{prefix}.w"), in_dim, out_dim, rng);
        store.init_vector(&format!("{prefix}.b"), out_dim, 0.0);
    }

    pub fn forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
        let w = param(g, store, &format!("{prefix}.w"));
        let b = param(g, store, &format!("{prefix}.b"));
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }

    /// Matrix product without the bias term.
    pub fn forward_no_bias(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
        let w = param(g, store, &format!("{prefix}.w"));
        g.matmul(x, w)
    }
}

/// Two-layer feed-forward block with ReLU.
pub struct Ffn;

impl Ffn {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha20Rng,
    ) {
        Linear::init(store, &format!("{prefix}.fc1"), dim, hidden, rng);
        Linear::init(store, &format!("{prefix}.fc2"), hidden, dim, rng);
    }

    pub fn forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
        let h = Linear::forward(g, store, &format!("{prefix}.fc1"), x);
        let h = g.relu(h);
        Linear::forward(g, store, &format!("{prefix}.fc2"), h)
    }
}

/// Pre-attention layer normalization parameters.
pub struct LayerNorm;

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) {
        store.init_vector(&format!("{prefix}.gamma"), dim, 1.0);
        store.init_vector(&format!("{prefix}.beta"), dim, 0.0);
    }

    pub fn forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
        let gamma = param(g, store, &format!("{prefix}.gamma"));
        let beta = param(g, store, &format!("{prefix}.beta"));
        g.layer_norm_rows(x, gamma, beta)
    }
}

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            });
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pi);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.init_matrix("layer.w", 3, 4, &mut rng);
        store.init_vector("layer.b", 4, 0.0);
        store.init_scalar("tau", 0.07);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = serde_json::json!({ "kind": "test" });
        store.save(&path, &meta).unwrap();
        let (loaded, loaded_meta) = ParamStore::load(&path).unwrap();
        assert_eq!(loaded_meta["kind"], "test");
        assert_eq!(store.fingerprint(), loaded.fingerprint());
        assert_eq!(loaded.get("layer.w"), store.get("layer.w"));
    }

    #[test]
    fn bad_magic_is_versioned_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxx").unwrap();
        let err = ParamStore::load(&path).unwrap_err();
        assert!(matches!(err, TextLocError::Schema(_)));
    }

    #[test]
    fn adamw_reduces_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", ndarray::arr1(&[5.0, -3.0]).into_dyn());
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let x = store.get("x").clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), x.mapv(|v| 2.0 * v));
            opt.apply(&mut store, &grads);
        }
        let x = store.get("x");
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
