//! Fine stage: relative position-aware multi-modal fusion of instance
//! queries and hint features, and 2D position regression inside a cell.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::attention::{init_htm, init_rpca_fusion, rpca_fusion, AttentionConfig, Variant};
use crate::autodiff::{Graph, NodeId};
use crate::coarse::{encode_text, retrieve, CoarseModel, EmbeddingIndex};
use crate::error::{Result, TextLocError};
use crate::extractor::{
    enhance_queries, extract_instance_queries, init_extractor, ExtractionOutput, ExtractorConfig,
};
use crate::losses::{fine_loss, gt_voxel_masks, instance_loss, mse_loss, LossWeights};
use crate::nn::{AdamW, Linear, ParamStore};
use crate::scene::{Cell, DatasetManifest, Split};
use crate::text::{intra_hint_encode, Vocabulary};
use rand::seq::SliceRandom;
use rand::SeedableRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineConfig {
    pub attention: AttentionConfig,
    pub extractor: ExtractorConfig,
    pub num_classes: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
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
            learning_rate: 3e-4,
            epochs: 12,
            batch_size: 16,
            rng_seed: 0,
        }
    }
}

impl FineConfig {
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

#[derive(Debug, Clone)]
pub struct FineModel {
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub config: FineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinePrediction {
    pub cell_id: usize,
    /// Cell-frame position; clamped to [0,1]^2 at inference.
    pub normalized: [f64; 2],
    /// origin + normalized * size, horizontal components.
    pub world: [f64; 2],
}

pub fn init_fine_model(config: &FineConfig, vocab: Vocabulary) -> Result<FineModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(config.rng_seed.wrapping_add(0xf1e));
    let d = config.attention.model_dim;
    init_extractor(
        &mut store,
        "ex",
        config.num_classes,
        &config.extractor,
        &config.attention,
        &mut rng,
    );
    store.init_matrix("txt.embed", vocab.size(), d, &mut rng);
    init_htm(&mut store, "txt.intra", &config.attention, &mut rng);
    init_rpca_fusion(&mut store, "fuse", &config.attention, &mut rng);
    Linear::init(&mut store, "head.fc1", d, d, &mut rng);
    Linear::init(&mut store, "head.fc2", d, 2, &mut rng);
    Ok(FineModel {
        store,
        vocab,
        config: config.clone(),
    })
}

/// Forward pass: instance extraction and enhancement, per-hint encoding,
/// fusion, and the regression head. Returns the unclamped normalized
/// prediction node (length 2) plus the extraction intermediates.
pub fn fuse_and_regress(
    g: &mut Graph,
    model: &FineModel,
    cell: &Cell,
    hints: &[String],
) -> Result<(NodeId, ExtractionOutput)> {
    if hints.is_empty() {
        return Err(TextLocError::Argument("fuse_and_regress: empty hint list".into()));
    }
    let out = extract_instance_queries(
        g,
        &model.store,
        "ex",
        cell,
        &model.config.extractor,
        &model.config.attention,
    )?;
    let (feats, centers) = enhance_queries(g, &model.store, "ex", &out, cell)?;
    let mut hint_rows = Vec::with_capacity(hints.len());
    for h in hints {
        let ids = model.vocab.tokenize(h);
        if ids.is_empty() {
            return Err(TextLocError::Argument(format!("hint with no tokens: {h:?}")));
        }
        hint_rows.push(intra_hint_encode(
            g,
            &model.store,
            "txt",
            &ids,
            &model.config.attention,
        )?);
    }
    let hint_feats = g.stack_rows(&hint_rows);
    let fused = rpca_fusion(
        g,
        &model.store,
        "fuse",
        feats,
        &centers,
        hint_feats,
        &model.config.attention,
    )?;
    let fm = g.stack_rows(&[fused]);
    let h = Linear::forward(g, &model.store, "head.fc1", fm);
    let h = g.relu(h);
    let pred = Linear::forward(g, &model.store, "head.fc2", h);
    Ok((g.row(pred, 0), out))
}

fn normalized_gt(cell: &Cell, position: [f64; 2]) -> [f64; 2] {
    [
        (position[0] - cell.origin[0]) / cell.size_m,
        (position[1] - cell.origin[1]) / cell.size_m,
    ]
}

/// Trains the fine regressor on the train split; returns the model and the
/// per-epoch mean loss curve.
pub fn train_fine(
    dataset: &DatasetManifest,
    config: &FineConfig,
) -> Result<(FineModel, Vec<f64>)> {
    config.validate()?;
    let vocab = Vocabulary::from_scene_spec(&dataset.spec);
    let mut model = init_fine_model(config, vocab)?;
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
    // Adam: decoupled decay set to zero.
    let mut opt = AdamW::new(config.learning_rate, 0.0);
    let mut rng = ChaCha20Rng::seed_from_u64(config.rng_seed.wrapping_add(2));
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let mut terms = Vec::with_capacity(chunk.len());
            for &pi in chunk {
                let pose = &dataset.poses[pi];
                let cell = dataset.cell(pose.cell_id).ok_or_else(|| {
                    TextLocError::Index(format!("pose references missing cell {}", pose.cell_id))
                })?;
                let hints: Vec<String> = pose.hints.iter().map(|h| h.text.clone()).collect();
                let (pred, out) = fuse_and_regress(&mut g, &model, cell, &hints)?;
                let mse = mse_loss(&mut g, pred, normalized_gt(cell, pose.position));
                let (gt_masks, gt_classes, _) = gt_voxel_masks(cell, &out.grid);
                let inst = instance_loss(
                    &mut g,
                    out.heatmaps,
                    out.class_logits,
                    &gt_masks,
                    &gt_classes,
                    &config.weights,
                )?;
                terms.push(fine_loss(&mut g, mse, inst, config.weights.lambda_inst));
            }
            let sum = terms
                .iter()
                .skip(1)
                .fold(terms[0], |acc, &t| g.add(acc, t));
            let total = g.scale(sum, 1.0 / chunk.len() as f64);
            let loss = g.scalar(total);
            if !loss.is_finite() {
                return Err(TextLocError::Numeric(format!(
                    "fine training diverged at epoch {epoch}: loss {loss}"
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

/// Regress inside one cell and map to world coordinates, clamping the
/// normalized position to [0,1]^2 (inference only).
pub fn localize(model: &FineModel, cell: &Cell, hints: &[String]) -> Result<FinePrediction> {
    let mut g = Graph::new();
    let (pred, _) = fuse_and_regress(&mut g, model, cell, hints)?;
    let raw = g.value1(pred);
    let normalized = [raw[0].clamp(0.0, 1.0), raw[1].clamp(0.0, 1.0)];
    Ok(FinePrediction {
        cell_id: cell.id,
        normalized,
        world: [
            cell.origin[0] + normalized[0] * cell.size_m,
            cell.origin[1] + normalized[1] * cell.size_m,
        ],
    })
}

/// Full two-stage inference: retrieve top-k cells for the hint set, then
/// refine within each. Returns predictions in retrieval order.
pub fn localize_top_k(
    coarse: &CoarseModel,
    fine: &FineModel,
    index: &EmbeddingIndex,
    dataset: &DatasetManifest,
    hints: &[String],
    k: usize,
) -> Result<Vec<FinePrediction>> {
    let mut g = Graph::new();
    let query = encode_text(&mut g, coarse, hints)?;
    let qv = g.value1(query);
    let top = retrieve(index, &qv, k)?;
    let mut preds = Vec::with_capacity(top.len());
    for (cell_id, _) in top {
        let cell = dataset
            .cell(cell_id)
            .ok_or_else(|| TextLocError::Index(format!("index references missing cell {cell_id}")))?;
        preds.push(localize(fine, cell, hints)?);
    }
    Ok(preds)
}

pub fn save_fine_checkpoint(model: &FineModel, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "fine",
        "config": model.config,
        "vocab": model.vocab,
    });
    model.store.save(path, &meta)
}

pub fn load_fine_checkpoint(path: &Path) -> Result<FineModel> {
    let (store, meta) = ParamStore::load(path)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("fine") {
        return Err(TextLocError::Schema(format!(
            "{}: not a fine checkpoint",
            path.display()
        )));
    }
    let config: FineConfig = serde_json::from_value(
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
    Ok(FineModel {
        store,
        vocab,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_dataset, PoseSamplingConfig, SceneSpec};
    use ndarray::Array1 as A1;

    fn tiny_config(d: usize) -> FineConfig {
        FineConfig {
            attention: AttentionConfig {
                model_dim: d,
                head_count: 2,
                ffn_hidden: 2 * d,
                variant: Variant::RowCol,
                use_layer_norm: true,
            },
            extractor: ExtractorConfig {
                query_count: 6,
                voxel_size_m: 2.0,
                ..Default::default()
            },
            num_classes: 8,
            batch_size: 4,
            epochs: 2,
            ..Default::default()
        }
    }

    fn tiny_dataset(seed: u64) -> DatasetManifest {
        let mut spec = SceneSpec::default_palettes([60.0, 60.0], seed);
        spec.instance_count_range = (40, 50);
        spec.points_per_instance_range = (10, 20);
        let sampling = PoseSamplingConfig {
            extras_per_anchor: 1,
            min_nearby_instances: 3,
            rng_seed: seed,
            ..Default::default()
        };
        build_dataset(&spec, 30.0, 30.0, &sampling).unwrap()
    }

    fn model_for(ds: &DatasetManifest, d: usize) -> FineModel {
        let vocab = Vocabulary::from_scene_spec(&ds.spec);
        init_fine_model(&tiny_config(d), vocab).unwrap()
    }

    #[test]
    fn zero_head_outputs_bias() {
        let ds = tiny_dataset(20);
        let mut model = model_for(&ds, 8);
        let d = 8;
        model
            .store
            .insert("head.fc2.w", ndarray::Array2::<f64>::zeros((d, 2)).into_dyn());
        model
            .store
            .insert("head.fc2.b", A1::from_vec(vec![0.25, 0.75]).into_dyn());
        let hints: Vec<String> = ds.poses[0].hints.iter().map(|h| h.text.clone()).collect();
        let cell = ds.cell(ds.poses[0].cell_id).unwrap();
        let mut g = Graph::new();
        let (pred, _) = fuse_and_regress(&mut g, &model, cell, &hints).unwrap();
        let v = g.value1(pred);
        assert_eq!(v[0], 0.25);
        assert_eq!(v[1], 0.75);
    }

    #[test]
    fn prediction_deterministic_and_hint_order_invariant() {
        let ds = tiny_dataset(21);
        let model = model_for(&ds, 8);
        let pose = ds
            .poses
            .iter()
            .find(|p| p.hints.len() >= 2)
            .expect("pose with multiple hints");
        let cell = ds.cell(pose.cell_id).unwrap();
        let hints: Vec<String> = pose.hints.iter().map(|h| h.text.clone()).collect();
        let a = localize(&model, cell, &hints).unwrap();
        let b = localize(&model, cell, &hints).unwrap();
        assert_eq!(a, b);
        let mut permuted = hints.clone();
        permuted.rotate_left(1);
        let c = localize(&model, cell, &permuted).unwrap();
        assert!((a.world[0] - c.world[0]).abs() < 1e-9);
        assert!((a.world[1] - c.world[1]).abs() < 1e-9);
    }

    #[test]
    fn localize_affine_map_and_clamp() {
        let ds = tiny_dataset(22);
        let mut model = model_for(&ds, 8);
        let d = 8;
        // Force a fixed normalized output through a zeroed head.
        model
            .store
            .insert("head.fc2.w", ndarray::Array2::<f64>::zeros((d, 2)).into_dyn());
        model
            .store
            .insert("head.fc2.b", A1::from_vec(vec![0.5, 0.5]).into_dyn());
        let pose = &ds.poses[0];
        let mut cell = ds.cell(pose.cell_id).unwrap().clone();
        cell.origin = [10.0, 20.0, 0.0];
        cell.size_m = 30.0;
        let hints: Vec<String> = pose.hints.iter().map(|h| h.text.clone()).collect();
        let p = localize(&model, &cell, &hints).unwrap();
        assert_eq!(p.world, [25.0, 35.0]);

        model
            .store
            .insert("head.fc2.b", A1::from_vec(vec![-0.1, 0.3]).into_dyn());
        let p = localize(&model, &cell, &hints).unwrap();
        assert_eq!(p.normalized, [0.0, 0.3]);
        assert_eq!(p.world, [10.0, 29.0]);
    }

    #[test]
    fn translation_equivariance() {
        let ds = tiny_dataset(23);
        let model = model_for(&ds, 8);
        let pose = &ds.poses[0];
        let cell = ds.cell(pose.cell_id).unwrap();
        let hints: Vec<String> = pose.hints.iter().map(|h| h.text.clone()).collect();
        let a = localize(&model, cell, &hints).unwrap();

        let mut shifted = cell.clone();
        shifted.origin = [cell.origin[0] + 70.0, cell.origin[1] + 30.0, cell.origin[2]];
        let mut pts = cell.points.clone();
        for mut row in pts.rows_mut() {
            row[0] += 70.0;
            row[1] += 30.0;
        }
        shifted.points = pts;
        let b = localize(&model, &shifted, &hints).unwrap();
        assert!((a.normalized[0] - b.normalized[0]).abs() < 1e-5);
        assert!((a.normalized[1] - b.normalized[1]).abs() < 1e-5);
        assert!((b.world[0] - (a.world[0] + 70.0)).abs() < 1e-4);
        assert!((b.world[1] - (a.world[1] + 30.0)).abs() < 1e-4);
    }

    #[test]
    fn fine_gradient_check() {
        let ds = tiny_dataset(24);
        let model = model_for(&ds, 4);
        let mut cfg = tiny_config(4);
        cfg.attention.head_count = 1;
        let vocab = Vocabulary::from_scene_spec(&ds.spec);
        let model = {
            let mut m = init_fine_model(&cfg, vocab).unwrap();
            m.store = model.store.clone();
            m
        };
        let pose = &ds.poses[0];
        let cell = ds.cell(pose.cell_id).unwrap();
        let hints: Vec<String> = pose.hints.iter().map(|h| h.text.clone()).collect();
        let gt = normalized_gt(cell, pose.position);
        let run = |store: &ParamStore| -> (Graph, NodeId) {
            let mut m = model.clone();
            m.store = store.clone();
            let mut g = Graph::new();
            let (pred, _) = fuse_and_regress(&mut g, &m, cell, &hints).unwrap();
            let loss = mse_loss(&mut g, pred, gt);
            (g, loss)
        };
        let (g, out) = run(&model.store);
        let grads = g.backward(out);
        let named = g.param_grads(&grads);
        let h = 1e-6;
        for name in ["head.fc1.w", "fuse.rpa1.wr", "txt.embed"] {
            let analytic = named.get(name).unwrap();
            let base = model.store.get(name).clone();
            let cols = base.shape()[1];
            for idx in [0usize, 3] {
                let (r, c) = (idx / cols, idx % cols);
                let mut t = base.clone();
                t[[r, c].as_ref()] += h;
                let mut plus = model.store.clone();
                plus.insert(name, t);
                let mut t = base.clone();
                t[[r, c].as_ref()] -= h;
                let mut minus = model.store.clone();
                minus.insert(name, t);
                let (gp, op) = run(&plus);
                let (gm, om) = run(&minus);
                let num = (gp.scalar(op) - gm.scalar(om)) / (2.0 * h);
                let an = analytic[[r, c].as_ref()];
                assert!(
                    (an - num).abs() / an.abs().max(num.abs()).max(1e-8) < 1e-4,
                    "{name} ({r},{c}): {an} vs {num}"
                );
            }
        }
    }

    #[test]
    fn train_fine_reduces_loss_and_lambda_zero_converges() {
        let ds = tiny_dataset(25);
        let mut cfg = tiny_config(8);
        cfg.epochs = 4;
        let (_, curve) = train_fine(&ds, &cfg).unwrap();
        assert_eq!(curve.len(), cfg.epochs);
        assert!(curve.iter().all(|l| l.is_finite()));
        assert!(curve.last().unwrap() < curve.first().unwrap());

        let mut no_inst = cfg.clone();
        no_inst.weights.lambda_inst = 0.0;
        no_inst.epochs = 2;
        let (_, curve2) = train_fine(&ds, &no_inst).unwrap();
        assert!(curve2.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn train_fine_rejects_empty_split() {
        let mut ds = tiny_dataset(26);
        for p in &mut ds.poses {
            p.split = Split::Val;
        }
        assert!(matches!(
            train_fine(&ds, &tiny_config(8)),
            Err(TextLocError::EmptyDataset(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ds = tiny_dataset(27);
        let model = model_for(&ds, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fine.ckpt");
        save_fine_checkpoint(&model, &path).unwrap();
        let loaded = load_fine_checkpoint(&path).unwrap();
        assert_eq!(model.store.fingerprint(), loaded.store.fingerprint());
        assert_eq!(model.vocab, loaded.vocab);
        // Wrong kind rejected.
        let coarse_path = dir.path().join("coarse.ckpt");
        let meta = serde_json::json!({"kind": "coarse"});
        model.store.save(&coarse_path, &meta).unwrap();
        assert!(load_fine_checkpoint(&coarse_path).is_err());
    }
}
