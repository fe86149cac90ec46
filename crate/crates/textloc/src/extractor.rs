//! Instance query extraction: voxel backbone, FPS-initialized queries,
//! refinement layers, mask prediction and query enhancement.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::attention::{
    init_attention_projections, masked_cross_attention, mhsa, AttentionConfig,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, TextLocError};
use crate::geometry::{closest_point, farthest_point_sample, voxelize, VoxelGrid};
use crate::nn::{Ffn, Linear, ParamStore};
use crate::scene::Cell;

pub const DEFAULT_QUERY_COUNT: usize = 24;
pub const DEFAULT_REFINEMENT_LAYERS: usize = 3;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;
const BACKBONE_LEVELS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub query_count: usize,
    pub refinement_layers: usize,
    pub voxel_size_m: f64,
    pub confidence_threshold: f64,
    pub mask_threshold: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            query_count: DEFAULT_QUERY_COUNT,
            refinement_layers: DEFAULT_REFINEMENT_LAYERS,
            voxel_size_m: crate::geometry::DEFAULT_VOXEL_SIZE_M,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_count == 0 {
            return Err(TextLocError::Config("query_count must be >= 1".into()));
        }
        if self.refinement_layers == 0 {
            return Err(TextLocError::Config("refinement_layers must be >= 1".into()));
        }
        for (name, v) in [
            ("confidence_threshold", self.confidence_threshold),
            ("mask_threshold", self.mask_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(TextLocError::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.voxel_size_m <= 0.0 {
            return Err(TextLocError::Config("voxel_size_m must be positive".into()));
        }
        Ok(())
    }
}

/// One resolution of the feature pyramid. Level 0 is the finest.
pub struct PyramidLevel {
    pub feats: NodeId,
    pub coords: Vec<[i64; 3]>,
    /// For each finest voxel, its index at this level.
    pub finest_to_this: Vec<usize>,
}

pub struct BackboneFeatures {
    /// levels[0] is the finest map F_0 (one row per occupied voxel).
    pub levels: Vec<PyramidLevel>,
}

/// A surviving instance after confidence filtering. Scalar fields are
/// detached snapshots; `row` indexes back into the refined query matrix.
#[derive(Debug, Clone)]
pub struct InstanceQuery {
    pub row: usize,
    pub feature: Array1<f64>,
    pub center: [f64; 3],
    pub point_count: usize,
    pub mean_rgb: [f64; 3],
    pub confidence: f64,
    pub mask: Vec<bool>,
    /// True only for the synthetic whole-cell query emitted when the
    /// confidence filter leaves nothing.
    pub fallback: bool,
}

pub struct ExtractionOutput {
    pub grid: VoxelGrid,
    /// Refined query features, q x d.
    pub queries: NodeId,
    /// Soft heatmaps over finest voxels, q x V.
    pub heatmaps: NodeId,
    /// Per-query class logits including the trailing no-object class.
    pub class_logits: NodeId,
    /// Finest feature map F_0.
    pub f0: NodeId,
    pub instances: Vec<InstanceQuery>,
}

fn coarsen(coords: &[[i64; 3]]) -> (Vec<[i64; 3]>, Vec<usize>) {
    let mut map: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    for c in coords {
        let parent = [
            c[0].div_euclid(2),
            c[1].div_euclid(2),
            c[2].div_euclid(2),
        ];
        let next = map.len();
        map.entry(parent).or_insert(next);
    }
    // BTreeMap iteration is sorted by coordinate; re-index accordingly.
    let parents: Vec<[i64; 3]> = map.keys().cloned().collect();
    let index: BTreeMap<[i64; 3], usize> = parents
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i))
        .collect();
    let parent_of = coords
        .iter()
        .map(|c| {
            index[&[
                c[0].div_euclid(2),
                c[1].div_euclid(2),
                c[2].div_euclid(2),
            ]]
        })
        .collect();
    (parents, parent_of)
}

/// Mean-pooling matrix (n_parent x n_child) for grouped downsampling.
fn pooling_matrix(parent_of: &[usize], n_parent: usize) -> Array2<f64> {
    let mut counts = vec![0usize; n_parent];
    for &p in parent_of {
        counts[p] += 1;
    }
    let mut m = Array2::zeros((n_parent, parent_of.len()));
    for (child, &p) in parent_of.iter().enumerate() {
        m[[p, child]] = 1.0 / counts[p] as f64;
    }
    m
}

pub fn init_backbone(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    rng: &mut ChaCha20Rng,
) {
    Linear::init(store, &format!("{prefix}.embed"), 6, dim, rng);
    for l in 0..BACKBONE_LEVELS {
        Linear::init(store, &format!("{prefix}.enc{l}"), dim, dim, rng);
    }
    for l in 0..BACKBONE_LEVELS - 1 {
        Linear::init(store, &format!("{prefix}.dec{l}"), 2 * dim, dim, rng);
    }
}

/// Three-level voxel encoder-decoder with skip connections; stride-2 index
/// coarsening with mean pooling on the way down, feature gathering on the
/// way up.
pub fn backbone_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    grid: &VoxelGrid,
) -> Result<BackboneFeatures> {
    if grid.voxel_count() == 0 {
        return Err(TextLocError::Degenerate("backbone_forward: empty grid".into()));
    }
    let x = g.constant(grid.voxel_features.clone());
    let embedded = Linear::forward(g, store, &format!("{prefix}.embed"), x);

    // Encoder: per-level coords, parent maps, features.
    let mut coords: Vec<Vec<[i64; 3]>> = vec![grid.occupied.clone()];
    let mut parent_of: Vec<Vec<usize>> = Vec::new();
    let mut enc: Vec<NodeId> = Vec::new();
    let mut cur = embedded;
    for l in 0..BACKBONE_LEVELS {
        let h = Linear::forward(g, store, &format!("{prefix}.enc{l}"), cur);
        let h = g.relu(h);
        enc.push(h);
        if l + 1 < BACKBONE_LEVELS {
            let (parents, pmap) = coarsen(&coords[l]);
            let pool = g.constant(pooling_matrix(&pmap, parents.len()));
            cur = g.matmul(pool, h);
            coords.push(parents);
            parent_of.push(pmap);
        }
    }

    // Decoder with skip connections back to the finest level.
    let mut dec = vec![None; BACKBONE_LEVELS];
    dec[BACKBONE_LEVELS - 1] = Some(enc[BACKBONE_LEVELS - 1]);
    for l in (0..BACKBONE_LEVELS - 1).rev() {
        let up = g.gather_rows(dec[l + 1].unwrap(), &parent_of[l]);
        let cat = g.concat_cols(&[enc[l], up]);
        dec[l] = Some(Linear::forward(g, store, &format!("{prefix}.dec{l}"), cat));
    }

    // Composed finest-to-level index maps.
    let n0 = coords[0].len();
    let mut finest_maps: Vec<Vec<usize>> = vec![(0..n0).collect()];
    for l in 0..BACKBONE_LEVELS - 1 {
        let prev = finest_maps[l].clone();
        finest_maps.push(prev.iter().map(|&i| parent_of[l][i]).collect());
    }

    let levels = (0..BACKBONE_LEVELS)
        .map(|l| PyramidLevel {
            feats: dec[l].unwrap(),
            coords: coords[l].clone(),
            finest_to_this: finest_maps[l].clone(),
        })
        .collect();
    Ok(BackboneFeatures { levels })
}

pub fn init_queries_params(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    rng: &mut ChaCha20Rng,
) {
    Linear::init(store, &format!("{prefix}.query_embed"), 6, dim, rng);
}

/// Farthest point sampling anchors (start = point closest to the cell
/// center), embedded from normalized position and color. Cells with fewer
/// points than requested repeat anchors cyclically.
pub fn init_queries(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cell: &Cell,
    query_count: usize,
) -> Result<(NodeId, Vec<usize>)> {
    let n = cell.points.nrows();
    if n == 0 {
        return Err(TextLocError::Degenerate("init_queries: empty cell".into()));
    }
    let start = closest_point(&cell.points, cell.center());
    let k = query_count.min(n);
    let mut anchors = farthest_point_sample(&cell.points, k, start)?;
    let mut i = 0;
    while anchors.len() < query_count {
        anchors.push(anchors[i % k]);
        i += 1;
    }
    let mut raw = Array2::zeros((query_count, 6));
    for (q, &p) in anchors.iter().enumerate() {
        for c in 0..3 {
            raw[[q, c]] = (cell.points[[p, c]] - cell.origin[c]) / cell.size_m;
            raw[[q, 3 + c]] = cell.colors[[p, c]];
        }
    }
    let raw = g.constant(raw);
    let feats = Linear::forward(g, store, &format!("{prefix}.query_embed"), raw);
    Ok((feats, anchors))
}

pub fn init_refine_layer(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut ChaCha20Rng,
) {
    init_attention_projections(store, &format!("{prefix}.ca"), cfg.model_dim, rng);
    init_attention_projections(store, &format!("{prefix}.sa"), cfg.model_dim, rng);
    Ffn::init(store, &format!("{prefix}.ffn"), cfg.model_dim, cfg.ffn_hidden, rng);
}

/// Residual refinement: masked cross-attention to voxel features, then
/// self-attention, then a feed-forward layer, each with a skip.
pub fn query_refine_layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    queries: NodeId,
    voxel_feats: NodeId,
    masks: Option<&Array2<bool>>,
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    if let Some(m) = masks {
        let q = g.value(queries).shape()[0];
        let v = g.value(voxel_feats).shape()[0];
        if m.nrows() != q || m.ncols() != v {
            return Err(TextLocError::Argument(format!(
                "query_refine_layer: mask {}x{} vs queries {q} and voxels {v}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    let ca = masked_cross_attention(
        g,
        store,
        &format!("{prefix}.ca"),
        queries,
        voxel_feats,
        masks,
        cfg,
    )?;
    let q_ca = g.add(ca, queries);
    let sa = mhsa(g, store, &format!("{prefix}.sa"), q_ca, cfg)?;
    let q_sa = g.add(sa, q_ca);
    let ffn = Ffn::forward(g, store, &format!("{prefix}.ffn"), q_sa);
    Ok(g.add(ffn, q_sa))
}

pub fn init_mask_head(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    num_classes: usize,
    rng: &mut ChaCha20Rng,
) {
    Linear::init(store, &format!("{prefix}.mask_proj"), dim, dim, rng);
    Linear::init(store, &format!("{prefix}.class"), dim, num_classes + 1, rng);
}

/// Sigmoid heatmaps over finest voxels plus thresholded binary masks.
pub fn predict_masks(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    queries: NodeId,
    f0: NodeId,
    mask_threshold: f64,
) -> (NodeId, Array2<bool>) {
    let proj = Linear::forward(g, store, &format!("{prefix}.mask_proj"), queries);
    let f0_t = g.transpose(f0);
    let logits = g.matmul(proj, f0_t);
    let heat = g.sigmoid(logits);
    let vals = g.value2(heat);
    let masks = vals.mapv(|v| v >= mask_threshold);
    (heat, masks)
}

/// Project a finest-voxel mask onto a coarser level: a coarse voxel is
/// visible if any of its finest descendants is.
fn project_mask(masks: &Array2<bool>, finest_to_level: &[usize], n_level: usize) -> Array2<bool> {
    let q = masks.nrows();
    let mut out = Array2::from_elem((q, n_level), false);
    for i in 0..q {
        for (v, &lv) in finest_to_level.iter().enumerate() {
            if masks[[i, v]] {
                out[[i, lv]] = true;
            }
        }
    }
    out
}

pub fn init_extractor(
    store: &mut ParamStore,
    prefix: &str,
    num_classes: usize,
    cfg: &ExtractorConfig,
    attn: &AttentionConfig,
    rng: &mut ChaCha20Rng,
) {
    init_backbone(store, &format!("{prefix}.backbone"), attn.model_dim, rng);
    init_queries_params(store, prefix, attn.model_dim, rng);
    for l in 0..cfg.refinement_layers {
        init_refine_layer(store, &format!("{prefix}.layer{l}"), attn, rng);
    }
    init_mask_head(store, prefix, attn.model_dim, num_classes, rng);
    Linear::init(
        store,
        &format!("{prefix}.enhance"),
        2 * attn.model_dim + 7,
        attn.model_dim,
        rng,
    );
}

/// Full extraction pipeline: voxelize, backbone, refinement cycling
/// coarse to fine, mask prediction, confidence filtering, and instance
/// statistics recomputed from masked points.
pub fn extract_instance_queries(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cell: &Cell,
    cfg: &ExtractorConfig,
    attn: &AttentionConfig,
) -> Result<ExtractionOutput> {
    cfg.validate()?;
    let grid = voxelize(&cell.points, &cell.colors, cell.origin, cfg.voxel_size_m)?;
    let backbone = backbone_forward(g, store, &format!("{prefix}.backbone"), &grid)?;
    let (mut queries, _anchors) = init_queries(g, store, prefix, cell, cfg.query_count)?;

    let mut masks: Option<Array2<bool>> = None;
    for l in 0..cfg.refinement_layers {
        // Cycle coarse -> fine over the pyramid.
        let level = (cfg.refinement_layers - 1 - l) % backbone.levels.len();
        let lv = &backbone.levels[level];
        let level_mask = masks
            .as_ref()
            .map(|m| project_mask(m, &lv.finest_to_this, lv.coords.len()));
        queries = query_refine_layer(
            g,
            store,
            &format!("{prefix}.layer{l}"),
            queries,
            lv.feats,
            level_mask.as_ref(),
            attn,
        )?;
        let (_, m) = predict_masks(
            g,
            store,
            prefix,
            queries,
            backbone.levels[0].feats,
            cfg.mask_threshold,
        );
        masks = Some(m);
    }
    let f0 = backbone.levels[0].feats;
    let (heatmaps, masks) = predict_masks(g, store, prefix, queries, f0, cfg.mask_threshold);
    let class_logits = Linear::forward(g, store, &format!("{prefix}.class"), queries);
    let probs = crate::losses::softmax_rows_plain(&g.value2(class_logits));
    let no_object = probs.ncols() - 1;

    let query_vals = g.value2(queries);
    let members = grid.members();
    let mut instances = Vec::new();
    for q in 0..cfg.query_count {
        let confidence = 1.0 - probs[[q, no_object]];
        if confidence < cfg.confidence_threshold {
            continue;
        }
        let mask: Vec<bool> = (0..grid.voxel_count()).map(|v| masks[[q, v]]).collect();
        if let Some(inst) = build_instance(q, &query_vals, confidence, &mask, cell, &members, false)
        {
            instances.push(inst);
        }
    }
    if instances.is_empty() {
        // Fall back to one query spanning the whole cell so downstream
        // stages always see n >= 1.
        let best = (0..cfg.query_count)
            .max_by(|&a, &b| {
                let ca = 1.0 - probs[[a, no_object]];
                let cb = 1.0 - probs[[b, no_object]];
                ca.partial_cmp(&cb).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        let mask = vec![true; grid.voxel_count()];
        let inst = build_instance(
            best,
            &query_vals,
            1.0 - probs[[best, no_object]],
            &mask,
            cell,
            &members,
            true,
        )
        .expect("full mask covers every point");
        instances.push(inst);
    }
    Ok(ExtractionOutput {
        grid,
        queries,
        heatmaps,
        class_logits,
        f0,
        instances,
    })
}

fn build_instance(
    row: usize,
    query_vals: &Array2<f64>,
    confidence: f64,
    mask: &[bool],
    cell: &Cell,
    members: &[Vec<usize>],
    fallback: bool,
) -> Option<InstanceQuery> {
    let mut center = [0.0; 3];
    let mut rgb = [0.0; 3];
    let mut count = 0usize;
    for (v, keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for &p in &members[v] {
            for c in 0..3 {
                center[c] += cell.points[[p, c]];
                rgb[c] += cell.colors[[p, c]];
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    for c in 0..3 {
        center[c] /= count as f64;
        rgb[c] /= count as f64;
    }
    Some(InstanceQuery {
        row,
        feature: query_vals.row(row).to_owned(),
        center,
        point_count: count,
        mean_rgb: rgb,
        confidence,
        mask: mask.to_vec(),
        fallback,
    })
}

/// Fuse each surviving query with its mask feature and geometry summary:
/// linear projection of concat(query, mean F_0 under mask, normalized
/// center, log1p(point count), mean RGB). Returns n x d features plus
/// world-frame centers.
pub fn enhance_queries(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    extraction: &ExtractionOutput,
    cell: &Cell,
) -> Result<(NodeId, Array2<f64>)> {
    let n = extraction.instances.len();
    if n == 0 {
        return Err(TextLocError::Degenerate("enhance_queries: no instances".into()));
    }
    let v = extraction.grid.voxel_count();
    let mut rows = Vec::with_capacity(n);
    let mut centers = Array2::zeros((n, 3));
    for (i, inst) in extraction.instances.iter().enumerate() {
        let q = g.row(extraction.queries, inst.row);
        // Mean of F_0 rows under the mask via a constant weight vector;
        // an empty mask zeroes the term.
        let count = inst.mask.iter().filter(|&&b| b).count();
        let mut w = Array2::zeros((1, v));
        if count > 0 {
            for (vi, &keep) in inst.mask.iter().enumerate() {
                if keep {
                    w[[0, vi]] = 1.0 / count as f64;
                }
            }
        }
        let wn = g.constant(w);
        let mask_feat = g.matmul(wn, extraction.f0);
        let mask_feat_row = g.row(mask_feat, 0);
        let mut geom = Array1::zeros(7);
        for c in 0..3 {
            geom[c] = (inst.center[c] - cell.origin[c]) / cell.size_m;
            geom[4 + c] = inst.mean_rgb[c];
        }
        geom[3] = (1.0 + inst.point_count as f64).ln();
        let geom = g.constant(geom);
        let cat = g.concat1(&[q, mask_feat_row, geom]);
        rows.push(cat);
        for c in 0..3 {
            centers[[i, c]] = inst.center[c];
        }
    }
    let stacked = g.stack_rows(&rows);
    let out = Linear::forward(g, store, &format!("{prefix}.enhance"), stacked);
    Ok((out, centers))
}
