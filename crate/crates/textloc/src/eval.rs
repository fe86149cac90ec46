//! Evaluation: retrieval recall, localization recall under error bounds,
//! normalized error, ablation grids and the point-masking robustness study.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::coarse::{
    build_index, encode_text, retrieve, train_coarse, CoarseConfig, CoarseModel, EmbeddingIndex,
};
use crate::error::{Result, TextLocError};
use crate::fine::{localize, train_fine, FineConfig, FineModel};
use crate::geometry::mask_points;
use crate::scene::{DatasetManifest, PoseSample, Split};

pub const DEFAULT_RETRIEVAL_KS: [usize; 3] = [1, 3, 5];
pub const DEFAULT_LOCALIZATION_KS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_EPSILONS_M: [f64; 3] = [5.0, 10.0, 15.0];
pub const DEFAULT_MASK_FRACTION: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    pub retrieval_ks: Vec<usize>,
    pub localization_ks: Vec<usize>,
    pub epsilons_m: Vec<f64>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            retrieval_ks: DEFAULT_RETRIEVAL_KS.to_vec(),
            localization_ks: DEFAULT_LOCALIZATION_KS.to_vec(),
            epsilons_m: DEFAULT_EPSILONS_M.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecallEntry {
    pub k: usize,
    pub epsilon_m: f64,
    pub recall: f64,
}

/// Per-query evaluation record kept for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub pose_index: usize,
    /// Every cell whose footprint contains the ground-truth position.
    pub positive_cells: Vec<usize>,
    /// Retrieved cell ids, best first.
    pub retrieved: Vec<usize>,
    /// World-frame localization error per retrieved candidate, in meters.
    pub errors_m: Vec<f64>,
    /// Matched-pair error inside the labeled positive cell, normalized by
    /// the cell side.
    pub normalized_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub query_count: usize,
    pub retrieval_recall: BTreeMap<usize, f64>,
    pub localization_recall: Vec<LocalizationRecallEntry>,
    pub mean_normalized_error: f64,
    pub records: Vec<QueryRecord>,
}

/// Fraction of queries whose top-k list contains any positive cell.
pub fn retrieval_recall(
    rank_lists: &[Vec<usize>],
    positives: &[Vec<usize>],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if rank_lists.is_empty() {
        return Err(TextLocError::Argument("retrieval_recall: no queries".into()));
    }
    if rank_lists.len() != positives.len() {
        return Err(TextLocError::Argument(
            "retrieval_recall: rank lists and positives differ in length".into(),
        ));
    }
    if positives.iter().any(|p| p.is_empty()) {
        return Err(TextLocError::Argument(
            "retrieval_recall: every query needs at least one positive".into(),
        ));
    }
    let n = rank_lists.len() as f64;
    let mut out = BTreeMap::new();
    for &k in ks {
        let hits = rank_lists
            .iter()
            .zip(positives.iter())
            .filter(|(ranks, pos)| ranks.iter().take(k).any(|id| pos.contains(id)))
            .count();
        out.insert(k, hits as f64 / n);
    }
    Ok(out)
}

/// A query counts as localized at (k, eps) if any of its first k candidate
/// errors is below eps.
pub fn localization_recall(
    errors_m: &[Vec<f64>],
    ks: &[usize],
    epsilons_m: &[f64],
) -> Vec<LocalizationRecallEntry> {
    let n = errors_m.len() as f64;
    let mut out = Vec::with_capacity(ks.len() * epsilons_m.len());
    for &k in ks {
        for &eps in epsilons_m {
            let hits = errors_m
                .iter()
                .filter(|errs| errs.iter().take(k).any(|&e| e < eps))
                .count();
            let recall = if n == 0.0 { 0.0 } else { hits as f64 / n };
            out.push(LocalizationRecallEntry {
                k,
                epsilon_m: eps,
                recall,
            });
        }
    }
    out
}

/// Mean Euclidean distance between matched predictions and ground truths,
/// normalized by the cell side length.
pub fn normalized_error(predictions: &[[f64; 2]], gts: &[[f64; 2]], cell_size_m: f64) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let sum: f64 = predictions
        .iter()
        .zip(gts.iter())
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() / cell_size_m)
        .sum();
    sum / predictions.len() as f64
}

/// Every cell whose footprint contains the position.
pub fn positive_cells(dataset: &DatasetManifest, position: [f64; 2]) -> Vec<usize> {
    dataset
        .cells
        .iter()
        .filter(|c| c.contains_xy(position))
        .map(|c| c.id)
        .collect()
}

fn eval_pose(
    dataset: &DatasetManifest,
    coarse: &CoarseModel,
    fine: &FineModel,
    index: &EmbeddingIndex,
    pose_index: usize,
    pose: &PoseSample,
    max_k: usize,
) -> Result<QueryRecord> {
    let hints: Vec<String> = pose.hints.iter().map(|h| h.text.clone()).collect();
    let mut g = crate::autodiff::Graph::new();
    let query = encode_text(&mut g, coarse, &hints)?;
    let qv: Array1<f64> = g.value1(query);
    let top = retrieve(index, &qv, max_k)?;
    let mut retrieved = Vec::with_capacity(top.len());
    let mut errors_m = Vec::with_capacity(top.len());
    for (cell_id, _) in &top {
        let cell = dataset
            .cell(*cell_id)
            .ok_or_else(|| TextLocError::Index(format!("missing cell {cell_id}")))?;
        let pred = localize(fine, cell, &hints)?;
        retrieved.push(*cell_id);
        errors_m.push(
            ((pred.world[0] - pose.position[0]).powi(2)
                + (pred.world[1] - pose.position[1]).powi(2))
            .sqrt(),
        );
    }
    let positive = dataset
        .cell(pose.cell_id)
        .ok_or_else(|| TextLocError::Index(format!("missing positive cell {}", pose.cell_id)))?;
    let matched = localize(fine, positive, &hints)?;
    let norm_err = ((matched.world[0] - pose.position[0]).powi(2)
        + (matched.world[1] - pose.position[1]).powi(2))
    .sqrt()
        / positive.size_m;
    Ok(QueryRecord {
        pose_index,
        positive_cells: positive_cells(dataset, pose.position),
        retrieved,
        errors_m,
        normalized_error: norm_err,
    })
}

/// Full two-stage evaluation over one dataset split.
pub fn evaluate_pipeline(
    dataset: &DatasetManifest,
    coarse: &CoarseModel,
    fine: &FineModel,
    index: &EmbeddingIndex,
    split: Split,
    params: &EvalParams,
) -> Result<EvalReport> {
    let poses: Vec<(usize, &PoseSample)> = dataset
        .poses
        .iter()
        .enumerate()
        .filter(|(_, p)| p.split == split)
        .collect();
    if poses.is_empty() {
        return Err(TextLocError::EmptyDataset(format!(
            "no poses in split {split:?}"
        )));
    }
    let max_k = params
        .retrieval_ks
        .iter()
        .chain(params.localization_ks.iter())
        .copied()
        .max()
        .unwrap_or(1);
    let mut records = Vec::with_capacity(poses.len());
    for (i, pose) in &poses {
        records.push(eval_pose(dataset, coarse, fine, index, *i, pose, max_k)?);
    }
    let rank_lists: Vec<Vec<usize>> = records.iter().map(|r| r.retrieved.clone()).collect();
    let positives: Vec<Vec<usize>> = records.iter().map(|r| r.positive_cells.clone()).collect();
    let retrieval = retrieval_recall(&rank_lists, &positives, &params.retrieval_ks)?;
    let errors: Vec<Vec<f64>> = records.iter().map(|r| r.errors_m.clone()).collect();
    let localization = localization_recall(&errors, &params.localization_ks, &params.epsilons_m);
    let mean_norm =
        records.iter().map(|r| r.normalized_error).sum::<f64>() / records.len() as f64;
    Ok(EvalReport {
        split,
        query_count: records.len(),
        retrieval_recall: retrieval,
        localization_recall: localization,
        mean_normalized_error: mean_norm,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub metric: String,
    pub entries: Vec<AblationEntry>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn coarse_top1_recall(
    dataset: &DatasetManifest,
    model: &CoarseModel,
    split: Split,
) -> Result<f64> {
    let index = build_index(dataset, model)?;
    let poses: Vec<&PoseSample> = dataset.poses_in_split(split);
    if poses.is_empty() {
        return Err(TextLocError::EmptyDataset(format!(
            "no poses in split {split:?}"
        )));
    }
    let mut rank_lists = Vec::with_capacity(poses.len());
    let mut positives = Vec::with_capacity(poses.len());
    for pose in poses {
        let hints: Vec<String> = pose.hints.iter().map(|h| h.text.clone()).collect();
        let mut g = crate::autodiff::Graph::new();
        let q = encode_text(&mut g, model, &hints)?;
        let qv = g.value1(q);
        let top = retrieve(&index, &qv, 1)?;
        rank_lists.push(top.into_iter().map(|(id, _)| id).collect::<Vec<_>>());
        positives.push(positive_cells(dataset, pose.position));
    }
    Ok(retrieval_recall(&rank_lists, &positives, &[1])?[&1])
}

/// Trains one coarse model per attention variant per seed and reports the
/// top-1 retrieval recall on the given split.
pub fn run_ablation_attention(
    dataset: &DatasetManifest,
    base: &CoarseConfig,
    variants: &[crate::attention::Variant],
    seeds: &[u64],
    split: Split,
) -> Result<AblationReport> {
    let mut entries = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.attention.variant = variant;
            cfg.rng_seed = seed;
            let (model, _) = train_coarse(dataset, &cfg)?;
            per_seed.push(coarse_top1_recall(dataset, &model, split)?);
        }
        let (mean, sd) = mean_sd(&per_seed);
        entries.push(AblationEntry {
            label: variant.to_string(),
            per_seed,
            mean,
            sd,
        });
    }
    Ok(AblationReport {
        metric: "retrieval_recall@1".into(),
        entries,
    })
}

fn pipeline_recall_at(
    dataset: &DatasetManifest,
    coarse: &CoarseModel,
    fine: &FineModel,
    split: Split,
    params: &EvalParams,
) -> Result<f64> {
    let index = build_index(dataset, coarse)?;
    let report = evaluate_pipeline(dataset, coarse, fine, &index, split, params)?;
    Ok(report.localization_recall[0].recall)
}

/// Trains the full pipeline per query count per seed; reports localization
/// recall at the first (k, eps) of the grid.
pub fn run_ablation_queries(
    dataset: &DatasetManifest,
    coarse_base: &CoarseConfig,
    fine_base: &FineConfig,
    counts: &[usize],
    seeds: &[u64],
    split: Split,
    params: &EvalParams,
) -> Result<AblationReport> {
    let mut entries = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut ccfg = coarse_base.clone();
            ccfg.extractor.query_count = count;
            ccfg.rng_seed = seed;
            let mut fcfg = fine_base.clone();
            fcfg.extractor.query_count = count;
            fcfg.rng_seed = seed;
            let (coarse, _) = train_coarse(dataset, &ccfg)?;
            let (fine, _) = train_fine(dataset, &fcfg)?;
            per_seed.push(pipeline_recall_at(dataset, &coarse, &fine, split, params)?);
        }
        let (mean, sd) = mean_sd(&per_seed);
        entries.push(AblationEntry {
            label: count.to_string(),
            per_seed,
            mean,
            sd,
        });
    }
    Ok(AblationReport {
        metric: format!(
            "localization_recall@k{}_eps{}",
            params.localization_ks[0], params.epsilons_m[0]
        ),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub fraction: f64,
    pub raw: EvalReport,
    pub masked: EvalReport,
    /// (raw - masked) / raw per localization grid point; 0 when raw is 0.
    pub relative_degradation: Vec<LocalizationRecallEntry>,
}

/// Evaluates the trained pipeline on raw cells and on cells with a random
/// fraction of points removed, and reports the relative recall drop.
pub fn run_robustness(
    dataset: &DatasetManifest,
    coarse: &CoarseModel,
    fine: &FineModel,
    fraction: f64,
    seed: u64,
    split: Split,
    params: &EvalParams,
) -> Result<RobustnessReport> {
    let index = build_index(dataset, coarse)?;
    let raw = evaluate_pipeline(dataset, coarse, fine, &index, split, params)?;

    let mut masked_ds = dataset.clone();
    for cell in &mut masked_ds.cells {
        *cell = mask_points(cell, fraction, seed.wrapping_add(cell.id as u64))?;
    }
    let masked_index = build_index(&masked_ds, coarse)?;
    let masked = evaluate_pipeline(&masked_ds, coarse, fine, &masked_index, split, params)?;

    let relative_degradation = raw
        .localization_recall
        .iter()
        .zip(masked.localization_recall.iter())
        .map(|(r, m)| LocalizationRecallEntry {
            k: r.k,
            epsilon_m: r.epsilon_m,
            recall: if r.recall > 0.0 {
                (r.recall - m.recall) / r.recall
            } else {
                0.0
            },
        })
        .collect();
    Ok(RobustnessReport {
        fraction,
        raw,
        masked,
        relative_degradation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::scene::{build_dataset, PoseSamplingConfig, SceneSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn retrieval_recall_hand_counts() {
        // Query 0 has its positive at rank 1, query 1 at rank 2.
        let ranks = vec![vec![7, 3, 9], vec![4, 8, 2]];
        let pos = vec![vec![7], vec![8]];
        let r = retrieval_recall(&ranks, &pos, &[1, 3]).unwrap();
        assert_eq!(r[&1], 0.5);
        assert_eq!(r[&3], 1.0);

        let perfect = retrieval_recall(&ranks, &vec![vec![7], vec![4]], &[1, 2, 3]).unwrap();
        assert!(perfect.values().all(|&v| v == 1.0));
    }

    #[test]
    fn retrieval_recall_errors() {
        assert!(retrieval_recall(&[], &[], &[1]).is_err());
        let ranks = vec![vec![1]];
        assert!(retrieval_recall(&ranks, &[vec![]], &[1]).is_err());
        assert!(retrieval_recall(&ranks, &[vec![1], vec![2]], &[1]).is_err());
    }

    #[test]
    fn retrieval_recall_monotone_in_k() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let ranks: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    let mut ids: Vec<usize> = (0..10).collect();
                    for i in (1..ids.len()).rev() {
                        ids.swap(i, rng.gen_range(0..=i));
                    }
                    ids
                })
                .collect();
            let pos: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.gen_range(0..10)]).collect();
            let r = retrieval_recall(&ranks, &pos, &[1, 3, 5, 10]).unwrap();
            assert!(r[&1] <= r[&3] && r[&3] <= r[&5] && r[&5] <= r[&10]);
        }
    }

    #[test]
    fn localization_recall_hand_counts_and_monotone() {
        let errors = vec![vec![3.0], vec![12.0]];
        let grid = localization_recall(&errors, &[1], &[5.0]);
        assert_eq!(grid[0].recall, 0.5);
        let inf = localization_recall(&errors, &[1], &[f64::INFINITY]);
        assert_eq!(inf[0].recall, 1.0);

        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let errs: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..10).map(|_| rng.gen_range(0.0..30.0)).collect())
            .collect();
        let grid = localization_recall(&errs, &[1, 5, 10], &[5.0, 10.0, 15.0]);
        // Monotone in eps within each k, and in k at fixed eps.
        for k_chunk in grid.chunks(3) {
            assert!(k_chunk[0].recall <= k_chunk[1].recall);
            assert!(k_chunk[1].recall <= k_chunk[2].recall);
        }
        for e in 0..3 {
            assert!(grid[e].recall <= grid[3 + e].recall);
            assert!(grid[3 + e].recall <= grid[6 + e].recall);
        }
        // Brute-force re-check of one grid point.
        let hits = errs
            .iter()
            .filter(|q| q.iter().take(5).any(|&x| x < 10.0))
            .count();
        assert_eq!(grid[4].recall, hits as f64 / 8.0);
    }

    #[test]
    fn normalized_error_examples() {
        assert!((normalized_error(&[[0.6, 0.5]], &[[0.5, 0.5]], 1.0) - 0.1).abs() < 1e-12);
        assert_eq!(normalized_error(&[[2.0, 3.0]], &[[2.0, 3.0]], 30.0), 0.0);
        let m = normalized_error(&[[3.0, 4.0], [0.0, 0.0]], &[[0.0, 0.0], [0.0, 0.0]], 10.0);
        assert!((m - 0.25).abs() < 1e-12);
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

    fn tiny_coarse_cfg() -> CoarseConfig {
        CoarseConfig {
            attention: crate::attention::AttentionConfig {
                model_dim: 8,
                head_count: 2,
                ffn_hidden: 16,
                variant: Variant::RowCol,
                use_layer_norm: true,
            },
            extractor: crate::extractor::ExtractorConfig {
                query_count: 6,
                voxel_size_m: 2.0,
                ..Default::default()
            },
            batch_size: 4,
            epochs: 1,
            lr_decay_epoch: 1,
            ..Default::default()
        }
    }

    fn tiny_fine_cfg() -> FineConfig {
        FineConfig {
            attention: crate::attention::AttentionConfig {
                model_dim: 8,
                head_count: 2,
                ffn_hidden: 16,
                variant: Variant::RowCol,
                use_layer_norm: true,
            },
            extractor: crate::extractor::ExtractorConfig {
                query_count: 6,
                voxel_size_m: 2.0,
                ..Default::default()
            },
            batch_size: 4,
            epochs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn evaluate_pipeline_deterministic_and_consistent() {
        let ds = tiny_dataset(30);
        let (coarse, _) = train_coarse(&ds, &tiny_coarse_cfg()).unwrap();
        let (fine, _) = train_fine(&ds, &tiny_fine_cfg()).unwrap();
        let index = build_index(&ds, &coarse).unwrap();
        let params = EvalParams::default();
        let a = evaluate_pipeline(&ds, &coarse, &fine, &index, Split::Train, &params).unwrap();
        let b = evaluate_pipeline(&ds, &coarse, &fine, &index, Split::Train, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.query_count > 0);
        for (_, &r) in &a.retrieval_recall {
            assert!((0.0..=1.0).contains(&r));
        }
        // Brute-force re-check of retrieval recall from the records.
        for (&k, &r) in &a.retrieval_recall {
            let hits = a
                .records
                .iter()
                .filter(|rec| {
                    rec.retrieved
                        .iter()
                        .take(k)
                        .any(|id| rec.positive_cells.contains(id))
                })
                .count();
            assert_eq!(r, hits as f64 / a.query_count as f64);
        }
        // Every record's positive set contains the labeled cell.
        for rec in &a.records {
            let pose = &ds.poses[rec.pose_index];
            assert!(rec.positive_cells.contains(&pose.cell_id));
        }
        // JSON roundtrip of the report.
        let json = serde_json::to_string(&a).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn robustness_runs_and_reports() {
        let ds = tiny_dataset(31);
        let (coarse, _) = train_coarse(&ds, &tiny_coarse_cfg()).unwrap();
        let (fine, _) = train_fine(&ds, &tiny_fine_cfg()).unwrap();
        let params = EvalParams::default();
        let rep = run_robustness(
            &ds,
            &coarse,
            &fine,
            DEFAULT_MASK_FRACTION,
            7,
            Split::Train,
            &params,
        )
        .unwrap();
        assert_eq!(rep.fraction, DEFAULT_MASK_FRACTION);
        assert_eq!(
            rep.relative_degradation.len(),
            params.localization_ks.len() * params.epsilons_m.len()
        );
        assert_eq!(rep.raw.query_count, rep.masked.query_count);
    }

    #[test]
    fn ablation_attention_covers_variants() {
        let ds = tiny_dataset(32);
        let report = run_ablation_attention(
            &ds,
            &tiny_coarse_cfg(),
            &[Variant::Naive, Variant::RowCol],
            &[0],
            Split::Train,
        )
        .unwrap();
        assert_eq!(report.entries.len(), 2);
        assert_eq!(report.entries[0].label, "naive");
        assert_eq!(report.entries[1].label, "rowcol");
        for e in &report.entries {
            assert_eq!(e.per_seed.len(), 1);
            assert!((0.0..=1.0).contains(&e.mean));
        }
    }

    #[test]
    fn ablation_queries_covers_counts() {
        let ds = tiny_dataset(33);
        let report = run_ablation_queries(
            &ds,
            &tiny_coarse_cfg(),
            &tiny_fine_cfg(),
            &[4, 6],
            &[0],
            Split::Train,
            &EvalParams::default(),
        )
        .unwrap();
        assert_eq!(report.entries.len(), 2);
        assert_eq!(report.entries[0].label, "4");
        assert_eq!(report.entries[1].label, "6");
    }
}
