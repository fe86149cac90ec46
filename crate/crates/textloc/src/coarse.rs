//! Coarse stage: dual-branch text/cell encoders, contrastive training,
//! persistent cell-embedding index and top-k retrieval.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::attention::{init_rowcol_rpa, rowcol_rpa, AttentionConfig, Variant};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, TextLocError};
use crate::extractor::{
    enhance_queries, extract_instance_queries, init_extractor, ExtractionOutput, ExtractorConfig,
};
use crate::losses::{
    coarse_loss, contrastive_batch_loss, gt_voxel_masks, instance_loss, LossWeights, TAU_MAX,
    TAU_MIN,
};
use crate::nn::{param, AdamW, ParamStore};
use crate::scene::{Cell, DatasetManifest, Split};
use crate::text::{encode_hints, init_text_encoder, Vocabulary};

pub const INDEX_SCHEMA_VERSION: u32 = 1;
const INDEX_MAGIC: &[u8; 8] = b"TLINDEX1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseConfig {
    pub attention: AttentionConfig,
    pub extractor: ExtractorConfig,
    pub num_classes: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub rng_seed: u64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            attention: AttentionConfig {
                model_dim: 128,
                head_count: 4,
                ffn_hidden: 256,
                variant: Variant::RowCol,
                use_layer_norm: true,
            },
            extractor: ExtractorConfig::default(),
            num_classes: 8,
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            epochs: 24,
            lr_decay_epoch: 12,
            lr_decay_factor: 0.1,
            batch_size: 16,
            weight_decay: 1e-4,
            rng_seed: 0,
        }
    }
}

impl CoarseConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.extractor.validate()?;
        if self.num_classes == 0 {
            return Err(TextLocError::Config("num_classes must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(TextLocError::Config(
                "learning_rate, epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trained (or freshly initialized) coarse model: parameters, vocabulary
/// and the configuration they were built with.
#[derive(Debug, Clone)]
pub struct CoarseModel {
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub config: CoarseConfig,
}

pub fn init_coarse_model(config: &CoarseConfig, vocab: Vocabulary) -> Result<CoarseModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(config.rng_seed);
    init_extractor(
        &mut store,
        "ex",
        config.num_classes,
        &config.extractor,
        &config.attention,
        &mut rng,
    );
    init_text_encoder(&mut store, "txt", vocab.size(), &config.attention, &mut rng);
    init_rowcol_rpa(&mut store, "cell.rpa", &config.attention, &mut rng);
    store.insert(
        "tau",
        Array1::from_elem(1, config.weights.tau_init).into_dyn(),
    );
    Ok(CoarseModel {
        store,
        vocab,
        config: config.clone(),
    })
}

fn clamped_tau(g: &mut Graph, store: &ParamStore) -> NodeId {
    let tau = param(g, store, "tau");
    g.clamp(tau, TAU_MIN, TAU_MAX)
}

/// Cell branch including the extraction intermediates needed for the
/// auxiliary instance loss.
pub fn encode_cell_full(
    g: &mut Graph,
    model: &CoarseModel,
    cell: &Cell,
) -> Result<(NodeId, ExtractionOutput)> {
    let out = extract_instance_queries(
        g,
        &model.store,
        "ex",
        cell,
        &model.config.extractor,
        &model.config.attention,
    )?;
    let (feats, centers) = enhance_queries(g, &model.store, "ex", &out, cell)?;
    let fused = rowcol_rpa(
        g,
        &model.store,
        "cell.rpa",
        feats,
        Some(&centers),
        &model.config.attention,
    )?;
    let pooled = g.max_axis0(fused);
    let emb = g.normalize_l2(pooled);
    Ok((emb, out))
}

/// Cell embedding F^C: extraction, query enhancement, relative-position
/// attention, max-pool, L2 normalize.
pub fn encode_cell(g: &mut Graph, model: &CoarseModel, cell: &Cell) -> Result<NodeId> {
    Ok(encode_cell_full(g, model, cell)?.0)
}

/// Text embedding F^T for a hint set.
pub fn encode_text(g: &mut Graph, model: &CoarseModel, hints: &[String]) -> Result<NodeId> {
    let (pooled, _) = encode_hints(
        g,
        &model.store,
        "txt",
        &model.vocab,
        hints,
        &model.config.attention,
    )?;
    Ok(pooled)
}

fn instance_loss_for_cell(
    g: &mut Graph,
    model: &CoarseModel,
    cell: &Cell,
    out: &ExtractionOutput,
) -> Result<NodeId> {
    let (gt_masks, gt_classes, _) = gt_voxel_masks(cell, &out.grid);
    instance_loss(
        g,
        out.heatmaps,
        out.class_logits,
        &gt_masks,
        &gt_classes,
        &model.config.weights,
    )
}

/// Trains the coarse model on the dataset's train split; returns the model
/// and the per-epoch mean loss curve.
pub fn train_coarse(
    dataset: &DatasetManifest,
    config: &CoarseConfig,
) -> Result<(CoarseModel, Vec<f64>)> {
    config.validate()?;
    let vocab = Vocabulary::from_scene_spec(&dataset.spec);
    let mut model = init_coarse_model(config, vocab)?;
    let train: Vec<usize> = dataset
        .poses
        .iter()
        .enumerate()
        .filter(|(_, p)| p.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train.is_empty() {
        return Err(TextLocError::EmptyDataset("no training poses".into()));
    }
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut rng = ChaCha20Rng::seed_from_u64(config.rng_seed.wrapping_add(1));
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if epoch == config.lr_decay_epoch {
            opt.set_lr(config.learning_rate * config.lr_decay_factor);
        }
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let mut text_rows = Vec::with_capacity(chunk.len());
            let mut cell_rows = Vec::with_capacity(chunk.len());
            let mut inst_terms = Vec::with_capacity(chunk.len());
            for &pi in chunk {
                let pose = &dataset.poses[pi];
                let cell = dataset.cell(pose.cell_id).ok_or_else(|| {
                    TextLocError::Index(format!("pose references missing cell {}", pose.cell_id))
                })?;
                let hints: Vec<String> = pose.hints.iter().map(|h| h.text.clone()).collect();
                text_rows.push(encode_text(&mut g, &model, &hints)?);
                let (emb, out) = encode_cell_full(&mut g, &model, cell)?;
                cell_rows.push(emb);
                inst_terms.push(instance_loss_for_cell(&mut g, &model, cell, &out)?);
            }
            let text = g.stack_rows(&text_rows);
            let cells = g.stack_rows(&cell_rows);
            let tau = clamped_tau(&mut g, &model.store);
            let contrastive = contrastive_batch_loss(&mut g, text, cells, tau)?;
            let inst_sum = inst_terms
                .iter()
                .skip(1)
                .fold(inst_terms[0], |acc, &t| g.add(acc, t));
            let inst_mean = g.scale(inst_sum, 1.0 / chunk.len() as f64);
            let total = coarse_loss(&mut g, contrastive, inst_mean, config.weights.lambda_inst);
            let loss = g.scalar(total);
            if !loss.is_finite() {
                return Err(TextLocError::Numeric(format!(
                    "coarse training diverged at epoch {epoch}: loss {loss}"
                )));
            }
            let grads = g.backward(total);
            let named = g.param_grads(&grads);
            opt.apply(&mut model.store, &named);
            epoch_loss += loss;
            batches += 1;
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok((model, curve))
}

/// One unit-norm embedding per cell plus the metadata needed to answer
/// retrieval queries against the persisted index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub cell_ids: Vec<usize>,
    pub cell_origins: Vec<[f64; 3]>,
    pub cell_size_m: f64,
    /// Row-major, one row per cell; f32-quantized so disk roundtrips are
    /// exact.
    pub embeddings: Array2<f64>,
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct IndexSidecar {
    schema_version: u32,
    dim: usize,
    count: usize,
    fingerprint: String,
    cell_ids: Vec<usize>,
    cell_origins: Vec<[f64; 3]>,
    cell_size_m: f64,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Merge another index built by the same encoder.
    pub fn append(&mut self, other: &EmbeddingIndex) -> Result<()> {
        if other.fingerprint != self.fingerprint {
            return Err(TextLocError::Index(format!(
                "fingerprint mismatch on append: {} vs {}",
                other.fingerprint, self.fingerprint
            )));
        }
        if other.dim() != self.dim() {
            return Err(TextLocError::Index("dimension mismatch on append".into()));
        }
        let mut rows = self.embeddings.clone().into_raw_vec_and_offset().0;
        rows.extend(other.embeddings.iter().cloned());
        self.embeddings =
            Array2::from_shape_vec((self.len() + other.len(), self.dim()), rows).unwrap();
        self.cell_ids.extend_from_slice(&other.cell_ids);
        self.cell_origins.extend_from_slice(&other.cell_origins);
        Ok(())
    }
}

/// Embed every cell of the dataset with a trained model.
pub fn build_index(dataset: &DatasetManifest, model: &CoarseModel) -> Result<EmbeddingIndex> {
    if dataset.cells.is_empty() {
        return Err(TextLocError::EmptyDataset("no cells to index".into()));
    }
    let d = model.config.attention.model_dim;
    let mut embeddings = Array2::zeros((dataset.cells.len(), d));
    let mut cell_ids = Vec::with_capacity(dataset.cells.len());
    let mut cell_origins = Vec::with_capacity(dataset.cells.len());
    for (i, cell) in dataset.cells.iter().enumerate() {
        let mut g = Graph::new();
        let emb = encode_cell(&mut g, model, cell)?;
        let v = g.value1(emb);
        for c in 0..d {
            // Quantize like the on-disk format so save/load is exact.
            embeddings[[i, c]] = v[c] as f32 as f64;
        }
        cell_ids.push(cell.id);
        cell_origins.push(cell.origin);
    }
    Ok(EmbeddingIndex {
        cell_ids,
        cell_origins,
        cell_size_m: dataset.cell_size_m,
        embeddings,
        fingerprint: model.store.fingerprint(),
    })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    std::path::PathBuf::from(p)
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        std::io::Write::write_all(&mut w, INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_SCHEMA_VERSION)?;
        w.write_u32::<LittleEndian>(index.dim() as u32)?;
        w.write_u32::<LittleEndian>(index.len() as u32)?;
        let fp = index.fingerprint.as_bytes();
        w.write_u32::<LittleEndian>(fp.len() as u32)?;
        std::io::Write::write_all(&mut w, fp)?;
        for &v in index.embeddings.iter() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    std::fs::rename(&tmp, path)?;
    let sidecar = IndexSidecar {
        schema_version: INDEX_SCHEMA_VERSION,
        dim: index.dim(),
        count: index.len(),
        fingerprint: index.fingerprint.clone(),
        cell_ids: index.cell_ids.clone(),
        cell_origins: index.cell_origins.clone(),
        cell_size_m: index.cell_size_m,
    };
    let sc_path = sidecar_path(path);
    let sc_tmp = sc_path.with_extension("tmp");
    std::fs::write(&sc_tmp, serde_json::to_vec_pretty(&sidecar)?)?;
    std::fs::rename(&sc_tmp, &sc_path)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    std::io::Read::read_exact(&mut r, &mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(TextLocError::Schema(format!(
            "{}: not an embedding index (magic {magic:?})",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != INDEX_SCHEMA_VERSION {
        return Err(TextLocError::Schema(format!(
            "index schema version {version} unsupported"
        )));
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let fp_len = r.read_u32::<LittleEndian>()? as usize;
    let mut fp = vec![0u8; fp_len];
    std::io::Read::read_exact(&mut r, &mut fp)?;
    let fingerprint = String::from_utf8(fp)
        .map_err(|e| TextLocError::Schema(format!("bad fingerprint encoding: {e}")))?;
    let mut embeddings = Array2::zeros((count, dim));
    for i in 0..count {
        for c in 0..dim {
            embeddings[[i, c]] = r.read_f32::<LittleEndian>()? as f64;
        }
    }
    let sidecar: IndexSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    if sidecar.fingerprint != fingerprint
        || sidecar.dim != dim
        || sidecar.count != count
        || sidecar.cell_ids.len() != count
    {
        return Err(TextLocError::Schema(
            "index sidecar disagrees with binary header".into(),
        ));
    }
    Ok(EmbeddingIndex {
        cell_ids: sidecar.cell_ids,
        cell_origins: sidecar.cell_origins,
        cell_size_m: sidecar.cell_size_m,
        embeddings,
        fingerprint,
    })
}

/// Top-k cells by dot-product similarity (cosine for unit norms), ties
/// broken by lower cell id; k is clamped to the index size.
pub fn retrieve(index: &EmbeddingIndex, query: &Array1<f64>, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(TextLocError::Argument("retrieve: k must be >= 1".into()));
    }
    if query.len() != index.dim() {
        return Err(TextLocError::Argument(format!(
            "retrieve: query dim {} vs index dim {}",
            query.len(),
            index.dim()
        )));
    }
    let mut scored: Vec<(usize, f64)> = index
        .cell_ids
        .iter()
        .enumerate()
        .map(|(row, &id)| (id, index.embeddings.row(row).dot(query)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k.min(index.len()));
    Ok(scored)
}

/// Persist a coarse checkpoint: parameters plus config and vocabulary in
/// the metadata header.
pub fn save_coarse_checkpoint(model: &CoarseModel, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "coarse",
        "config": model.config,
        "vocab": model.vocab,
    });
    model.store.save(path, &meta)
}

pub fn load_coarse_checkpoint(path: &Path) -> Result<CoarseModel> {
    let (store, meta) = ParamStore::load(path)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("coarse") {
        return Err(TextLocError::Schema(format!(
            "{}: not a coarse checkpoint",
            path.display()
        )));
    }
    let config: CoarseConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| TextLocError::Schema("checkpoint missing config".into()))?,
    )?;
    let mut vocab: Vocabulary = serde_json::from_value(
        meta.get("vocab")
            .cloned()
            .ok_or_else(|| TextLocError::Schema("checkpoint missing vocabulary".into()))?,
    )?;
    vocab.rebuild_index();
    Ok(CoarseModel {
        store,
        vocab,
        config,
    })
}
