//! Synthetic city generation: instances, cell slicing, pose sampling and
//! templated hint text, plus the on-disk dataset format.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TextLocError};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_CELL_SIZE_M: f64 = 30.0;
pub const DEFAULT_STRIDE_M: f64 = 10.0;
pub const DEFAULT_ON_TOP_RADIUS_M: f64 = 2.0;
pub const DEFAULT_K_HINTS: usize = 3;
pub const DEFAULT_EXTRAS_PER_ANCHOR: usize = 8;
pub const DEFAULT_MIN_NEARBY_INSTANCES: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub extent_m: [f64; 2],
    pub instance_count_range: (usize, usize),
    pub class_palette: Vec<String>,
    pub color_palette: Vec<(String, [f64; 3])>,
    pub points_per_instance_range: (usize, usize),
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn default_palettes(extent_m: [f64; 2], rng_seed: u64) -> Self {
        SceneSpec {
            extent_m,
            instance_count_range: (120, 160),
            class_palette: [
                "building",
                "vegetation",
                "parking",
                "road",
                "pole",
                "traffic-sign",
                "fence",
                "sidewalk",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            color_palette: vec![
                ("beige".into(), [0.83, 0.79, 0.64]),
                ("dark-green".into(), [0.10, 0.35, 0.12]),
                ("gray".into(), [0.55, 0.55, 0.55]),
                ("red".into(), [0.80, 0.15, 0.12]),
                ("blue".into(), [0.15, 0.25, 0.75]),
                ("white".into(), [0.95, 0.95, 0.95]),
                ("black".into(), [0.05, 0.05, 0.05]),
                ("brown".into(), [0.48, 0.30, 0.18]),
                ("yellow".into(), [0.90, 0.85, 0.15]),
                ("orange".into(), [0.92, 0.55, 0.12]),
            ],
            points_per_instance_range: (40, 80),
            rng_seed,
        }
    }

    pub fn validate(&self, cell_size_m: f64) -> Result<()> {
        if self.extent_m[0] < cell_size_m || self.extent_m[1] < cell_size_m {
            return Err(TextLocError::Config(format!(
                "scene extent {:?} smaller than one cell ({cell_size_m} m)",
                self.extent_m
            )));
        }
        if self.class_palette.is_empty() || self.color_palette.is_empty() {
            return Err(TextLocError::Config("empty palette".into()));
        }
        if self.instance_count_range.0 > self.instance_count_range.1
            || self.points_per_instance_range.0 > self.points_per_instance_range.1
        {
            return Err(TextLocError::Config("range has min > max".into()));
        }
        if self.points_per_instance_range.0 == 0 {
            return Err(TextLocError::Config("instances need at least one point".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub class_name: String,
    pub color_name: String,
    /// N x 3 world-frame coordinates in meters.
    pub points: Array2<f64>,
    /// N x 3 RGB in [0, 1].
    pub colors: Array2<f64>,
    /// Arithmetic mean of `points`.
    pub center: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub extent_m: [f64; 2],
    pub instances: Vec<Instance>,
}

/// Instance ground truth kept in the manifest after slicing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceMeta {
    pub id: usize,
    pub class_name: String,
    pub color_name: String,
    pub center: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: usize,
    pub origin: [f64; 3],
    pub size_m: f64,
    pub points: Array2<f64>,
    pub colors: Array2<f64>,
    pub point_instance_ids: Vec<u32>,
    pub point_class_ids: Vec<u32>,
}

impl Cell {
    pub fn center(&self) -> [f64; 3] {
        [
            self.origin[0] + self.size_m / 2.0,
            self.origin[1] + self.size_m / 2.0,
            self.origin[2] + self.size_m / 2.0,
        ]
    }

    pub fn contains_xy(&self, p: [f64; 2]) -> bool {
        p[0] >= self.origin[0]
            && p[0] < self.origin[0] + self.size_m
            && p[1] >= self.origin[1]
            && p[1] < self.origin[1] + self.size_m
    }

    /// Distinct instance ids with at least one point in this cell.
    pub fn instance_ids(&self) -> BTreeSet<u32> {
        self.point_instance_ids.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    North,
    NorthEast,
    East,
    SouthEast,
    South,
    SouthWest,
    West,
    NorthWest,
    OnTop,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::North => "north",
            Direction::NorthEast => "north-east",
            Direction::East => "east",
            Direction::SouthEast => "south-east",
            Direction::South => "south",
            Direction::SouthWest => "south-west",
            Direction::West => "west",
            Direction::NorthWest => "north-west",
            Direction::OnTop => "on-top",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Hint {
    pub direction: Direction,
    pub color_name: String,
    pub class_name: String,
    pub text: String,
    pub instance_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseSample {
    pub position: [f64; 2],
    pub cell_id: usize,
    pub hints: Vec<Hint>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub spec: SceneSpec,
    pub spec_hash: String,
    pub cell_size_m: f64,
    pub stride_m: f64,
    pub instances: Vec<InstanceMeta>,
    pub cells: Vec<Cell>,
    pub poses: Vec<PoseSample>,
}

impl DatasetManifest {
    pub fn cell(&self, id: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.id == id)
    }

    pub fn poses_in_split(&self, split: Split) -> Vec<&PoseSample> {
        self.poses.iter().filter(|p| p.split == split).collect()
    }

    /// Stable content hash of the whole dataset.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.spec_hash.as_bytes());
        for cell in &self.cells {
            hasher.update((cell.id as u64).to_le_bytes());
            for &v in cell.points.iter() {
                hasher.update((v as f32).to_le_bytes());
            }
            for &id in &cell.point_instance_ids {
                hasher.update(id.to_le_bytes());
            }
        }
        hasher.update(serde_json::to_vec(&self.poses).unwrap());
        hex::encode(hasher.finalize())
    }
}

/// Per-class half extents (x, y, z) of the sampled point blobs.
fn class_half_extents(class: &str) -> [f64; 3] {
    match class {
        "building" => [5.0, 5.0, 6.0],
        "vegetation" => [2.5, 2.5, 3.0],
        "parking" => [6.0, 6.0, 0.4],
        "road" => [8.0, 2.5, 0.2],
        "pole" => [0.3, 0.3, 4.0],
        "traffic-sign" => [0.5, 0.5, 2.0],
        "fence" => [5.0, 0.4, 1.2],
        "sidewalk" => [6.0, 1.5, 0.2],
        _ => [2.5, 2.5, 2.0],
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate(DEFAULT_CELL_SIZE_M)?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.rng_seed);
    let count = if spec.instance_count_range.0 == spec.instance_count_range.1 {
        spec.instance_count_range.0
    } else {
        rng.gen_range(spec.instance_count_range.0..=spec.instance_count_range.1)
    };
    let [ex, ey] = spec.extent_m;
    let mut instances = Vec::with_capacity(count);
    for id in 0..count {
        let class = spec.class_palette[rng.gen_range(0..spec.class_palette.len())].clone();
        let (color_name, base_rgb) = {
            let c = &spec.color_palette[rng.gen_range(0..spec.color_palette.len())];
            (c.0.clone(), c.1)
        };
        let he = class_half_extents(&class);
        let cx = rng.gen_range(0.0..ex);
        let cy = rng.gen_range(0.0..ey);
        let n = if spec.points_per_instance_range.0 == spec.points_per_instance_range.1 {
            spec.points_per_instance_range.0
        } else {
            rng.gen_range(spec.points_per_instance_range.0..=spec.points_per_instance_range.1)
        };
        let mut points = Array2::zeros((n, 3));
        let mut colors = Array2::zeros((n, 3));
        for i in 0..n {
            let px = (cx + rng.gen_range(-he[0]..he[0])).clamp(0.0, ex - 1e-3);
            let py = (cy + rng.gen_range(-he[1]..he[1])).clamp(0.0, ey - 1e-3);
            let pz = rng.gen_range(0.0..2.0 * he[2]).min(DEFAULT_CELL_SIZE_M - 1e-3);
            points[[i, 0]] = quantize(px);
            points[[i, 1]] = quantize(py);
            points[[i, 2]] = quantize(pz);
            for c in 0..3 {
                let v = (base_rgb[c] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                colors[[i, c]] = quantize(v);
            }
        }
        let center = [
            points.column(0).mean().unwrap(),
            points.column(1).mean().unwrap(),
            points.column(2).mean().unwrap(),
        ];
        instances.push(Instance {
            id,
            class_name: class,
            color_name,
            points,
            colors,
            center,
        });
    }
    Ok(Scene {
        extent_m: spec.extent_m,
        instances,
    })
}

/// Slice a scene into overlapping cubic cells. Origins step by `stride_m`
/// while the full cube still fits inside the extent; empty cells are dropped.
pub fn slice_cells(
    scene: &Scene,
    spec: &SceneSpec,
    cell_size_m: f64,
    stride_m: f64,
) -> Result<Vec<Cell>> {
    if cell_size_m <= 0.0 || stride_m <= 0.0 || stride_m > cell_size_m {
        return Err(TextLocError::Argument(format!(
            "invalid cell size {cell_size_m} / stride {stride_m}"
        )));
    }
    let class_id = |name: &str| -> u32 {
        spec.class_palette
            .iter()
            .position(|c| c == name)
            .expect("class not in palette") as u32
    };
    let origins_axis = |extent: f64| -> Vec<f64> {
        let mut v = Vec::new();
        let mut o = 0.0;
        while o + cell_size_m <= extent + 1e-9 {
            v.push(o);
            o += stride_m;
        }
        v
    };
    let xs = origins_axis(scene.extent_m[0]);
    let ys = origins_axis(scene.extent_m[1]);
    let mut cells = Vec::new();
    let mut next_id = 0;
    for &ox in &xs {
        for &oy in &ys {
            let origin = [ox, oy, 0.0];
            let mut pts = Vec::new();
            let mut cols = Vec::new();
            let mut inst_ids = Vec::new();
            let mut cls_ids = Vec::new();
            for inst in &scene.instances {
                let cid = class_id(&inst.class_name);
                for i in 0..inst.points.nrows() {
                    let p = [
                        inst.points[[i, 0]],
                        inst.points[[i, 1]],
                        inst.points[[i, 2]],
                    ];
                    let inside = (0..3).all(|a| p[a] >= origin[a] && p[a] < origin[a] + cell_size_m);
                    if inside {
                        pts.push(p);
                        cols.push([
                            inst.colors[[i, 0]],
                            inst.colors[[i, 1]],
                            inst.colors[[i, 2]],
                        ]);
                        inst_ids.push(inst.id as u32);
                        cls_ids.push(cid);
                    }
                }
            }
            if pts.is_empty() {
                continue;
            }
            let n = pts.len();
            let mut points = Array2::zeros((n, 3));
            let mut colors = Array2::zeros((n, 3));
            for (i, (p, c)) in pts.iter().zip(cols.iter()).enumerate() {
                for a in 0..3 {
                    points[[i, a]] = p[a];
                    colors[[i, a]] = c[a];
                }
            }
            cells.push(Cell {
                id: next_id,
                origin,
                size_m: cell_size_m,
                points,
                colors,
                point_instance_ids: inst_ids,
                point_class_ids: cls_ids,
            });
            next_id += 1;
        }
    }
    Ok(cells)
}

/// Compass label of the pose relative to an instance center.
pub fn direction_label(
    pose_xy: [f64; 2],
    instance_center_xy: [f64; 2],
    on_top_radius_m: f64,
) -> Direction {
    let dx = pose_xy[0] - instance_center_xy[0];
    let dy = pose_xy[1] - instance_center_xy[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < on_top_radius_m {
        return Direction::OnTop;
    }
    // Bearing measured clockwise from north (+y).
    let bearing = dx.atan2(dy).to_degrees();
    let bearing = if bearing < 0.0 { bearing + 360.0 } else { bearing };
    let sector = ((bearing + 22.5) / 45.0).floor() as usize % 8;
    [
        Direction::North,
        Direction::NorthEast,
        Direction::East,
        Direction::SouthEast,
        Direction::South,
        Direction::SouthWest,
        Direction::West,
        Direction::NorthWest,
    ][sector]
}

pub fn render_hint_text(direction: Direction, color: &str, class: &str) -> String {
    format!("The pose is on {direction} of a {color} {class}.")
}

/// Nearest-first hints for a pose inside its positive cell.
pub fn generate_hints(
    pose_xy: [f64; 2],
    cell: &Cell,
    instances: &[InstanceMeta],
    k_hints: usize,
    on_top_radius_m: f64,
) -> Result<Vec<Hint>> {
    let present = cell.instance_ids();
    let mut candidates: Vec<&InstanceMeta> = instances
        .iter()
        .filter(|m| present.contains(&(m.id as u32)))
        .collect();
    if candidates.len() < k_hints {
        return Err(TextLocError::Degenerate(format!(
            "cell {} has {} instances, need {k_hints}",
            cell.id,
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| {
        let da = dist2_xy(pose_xy, a.center);
        let db = dist2_xy(pose_xy, b.center);
        da.partial_cmp(&db).unwrap().then(a.id.cmp(&b.id))
    });
    Ok(candidates[..k_hints]
        .iter()
        .map(|m| {
            let dir = direction_label(pose_xy, [m.center[0], m.center[1]], on_top_radius_m);
            Hint {
                direction: dir,
                color_name: m.color_name.clone(),
                class_name: m.class_name.clone(),
                text: render_hint_text(dir, &m.color_name, &m.class_name),
                instance_id: m.id,
            }
        })
        .collect())
}

fn dist2_xy(p: [f64; 2], c: [f64; 3]) -> f64 {
    let dx = p[0] - c[0];
    let dy = p[1] - c[1];
    dx * dx + dy * dy
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseSamplingConfig {
    pub anchor_spacing_m: f64,
    pub extras_per_anchor: usize,
    pub min_nearby_instances: usize,
    pub k_hints: usize,
    pub on_top_radius_m: f64,
    /// Fractions for train/val; the remainder is test.
    pub split_fractions: (f64, f64),
    pub rng_seed: u64,
}

impl Default for PoseSamplingConfig {
    fn default() -> Self {
        PoseSamplingConfig {
            anchor_spacing_m: 15.0,
            extras_per_anchor: DEFAULT_EXTRAS_PER_ANCHOR,
            min_nearby_instances: DEFAULT_MIN_NEARBY_INSTANCES,
            k_hints: DEFAULT_K_HINTS,
            on_top_radius_m: DEFAULT_ON_TOP_RADIUS_M,
            split_fractions: (0.7, 0.15),
            rng_seed: 0,
        }
    }
}

/// Grid anchors plus random extras; positions whose positive cell holds fewer
/// than `min_nearby_instances` distinct instances are excluded.
pub fn sample_poses(
    scene: &Scene,
    cells: &[Cell],
    instances: &[InstanceMeta],
    cfg: &PoseSamplingConfig,
) -> Result<Vec<PoseSample>> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.rng_seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut poses = Vec::new();
    let [ex, ey] = scene.extent_m;
    let mut anchors = Vec::new();
    let mut ax = cfg.anchor_spacing_m / 2.0;
    while ax < ex {
        let mut ay = cfg.anchor_spacing_m / 2.0;
        while ay < ey {
            anchors.push([ax, ay]);
            ay += cfg.anchor_spacing_m;
        }
        ax += cfg.anchor_spacing_m;
    }
    for anchor in anchors {
        let mut candidates = vec![anchor];
        for _ in 0..cfg.extras_per_anchor {
            let r = cfg.anchor_spacing_m / 2.0;
            candidates.push([
                (anchor[0] + rng.gen_range(-r..r)).clamp(0.0, ex - 1e-6),
                (anchor[1] + rng.gen_range(-r..r)).clamp(0.0, ey - 1e-6),
            ]);
        }
        for pos in candidates {
            // Quantize before cell selection so the stored position is the
            // one that was checked for containment.
            let pos = [quantize(pos[0]), quantize(pos[1])];
            // Positive cell: among containing cells, closest center wins,
            // ties by lower id.
            let mut best: Option<(f64, usize)> = None;
            for cell in cells {
                if !cell.contains_xy(pos) {
                    continue;
                }
                let c = cell.center();
                let d = dist2_xy(pos, c);
                let better = match best {
                    None => true,
                    Some((bd, bid)) => d < bd - 1e-12 || ((d - bd).abs() <= 1e-12 && cell.id < bid),
                };
                if better {
                    best = Some((d, cell.id));
                }
            }
            let Some((_, cell_id)) = best else { continue };
            let cell = cells.iter().find(|c| c.id == cell_id).unwrap();
            if cell.instance_ids().len() < cfg.min_nearby_instances {
                continue;
            }
            let hints = match generate_hints(pos, cell, instances, cfg.k_hints, cfg.on_top_radius_m)
            {
                Ok(h) => h,
                Err(_) => continue,
            };
            let roll: f64 = rng.gen();
            let split = if roll < cfg.split_fractions.0 {
                Split::Train
            } else if roll < cfg.split_fractions.0 + cfg.split_fractions.1 {
                Split::Val
            } else {
                Split::Test
            };
            poses.push(PoseSample {
                position: pos,
                cell_id,
                hints,
                split,
            });
        }
    }
    if poses.is_empty() {
        return Err(TextLocError::EmptyDataset(
            "scene too sparse: no pose passed the nearby-instance filter".into(),
        ));
    }
    Ok(poses)
}

/// Generate the full dataset for a spec: scene, cells, poses, hints.
pub fn build_dataset(
    spec: &SceneSpec,
    cell_size_m: f64,
    stride_m: f64,
    sampling: &PoseSamplingConfig,
) -> Result<DatasetManifest> {
    let scene = generate_scene(spec)?;
    let cells = slice_cells(&scene, spec, cell_size_m, stride_m)?;
    let instances: Vec<InstanceMeta> = scene
        .instances
        .iter()
        .map(|i| InstanceMeta {
            id: i.id,
            class_name: i.class_name.clone(),
            color_name: i.color_name.clone(),
            center: i.center,
        })
        .collect();
    let poses = sample_poses(&scene, &cells, &instances, sampling)?;
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(spec)?);
    hasher.update(cell_size_m.to_le_bytes());
    hasher.update(stride_m.to_le_bytes());
    Ok(DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        spec: spec.clone(),
        spec_hash: hex::encode(hasher.finalize()),
        cell_size_m,
        stride_m,
        instances,
        cells,
        poses,
    })
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    id: usize,
    origin: [f64; 3],
    size_m: f64,
    point_count: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    schema_version: u32,
    spec: SceneSpec,
    spec_hash: String,
    cell_size_m: f64,
    stride_m: f64,
    instances: Vec<InstanceMeta>,
    cells: Vec<CellRecord>,
    poses: Vec<PoseSample>,
}

/// Write the dataset: `manifest.json` plus one little-endian binary file per
/// cell (f32 points, f32 colors, u32 instance ids, u32 class ids).
pub fn save_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("cells"))?;
    let mut records = Vec::new();
    for cell in &manifest.cells {
        let file = format!("cells/cell_{:05}.bin", cell.id);
        let path = dir.join(&file);
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            let n = cell.points.nrows();
            w.write_u32::<LittleEndian>(n as u32)?;
            for &v in cell.points.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
            for &v in cell.colors.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
            for &v in &cell.point_instance_ids {
                w.write_u32::<LittleEndian>(v)?;
            }
            for &v in &cell.point_class_ids {
                w.write_u32::<LittleEndian>(v)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, &path)?;
        records.push(CellRecord {
            id: cell.id,
            origin: cell.origin,
            size_m: cell.size_m,
            point_count: cell.points.nrows(),
            file,
        });
    }
    let mf = ManifestFile {
        schema_version: manifest.schema_version,
        spec: manifest.spec.clone(),
        spec_hash: manifest.spec_hash.clone(),
        cell_size_m: manifest.cell_size_m,
        stride_m: manifest.stride_m,
        instances: manifest.instances.clone(),
        cells: records,
        poses: manifest.poses.clone(),
    };
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&mf)?)?;
    std::fs::rename(tmp, dir.join("manifest.json"))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    let raw = std::fs::read(dir.join("manifest.json")).map_err(|e| {
        TextLocError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", dir.join("manifest.json").display()),
        ))
    })?;
    let mf: ManifestFile = serde_json::from_slice(&raw)?;
    if mf.schema_version != DATASET_SCHEMA_VERSION {
        return Err(TextLocError::Schema(format!(
            "dataset schema version {} unsupported (expected {DATASET_SCHEMA_VERSION})",
            mf.schema_version
        )));
    }
    let mut cells = Vec::with_capacity(mf.cells.len());
    for rec in &mf.cells {
        let mut r = std::io::BufReader::new(std::fs::File::open(dir.join(&rec.file))?);
        let n = r.read_u32::<LittleEndian>()? as usize;
        if n != rec.point_count {
            return Err(TextLocError::Schema(format!(
                "cell {}: point count mismatch (header {n}, manifest {})",
                rec.id, rec.point_count
            )));
        }
        let read_mat = |r: &mut dyn Read| -> Result<Array2<f64>> {
            let mut buf = vec![0f32; n * 3];
            r.read_f32_into::<LittleEndian>(&mut buf)?;
            Ok(Array2::from_shape_vec((n, 3), buf.iter().map(|&v| v as f64).collect()).unwrap())
        };
        let points = read_mat(&mut r)?;
        let colors = read_mat(&mut r)?;
        let mut inst = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut inst)?;
        let mut cls = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut cls)?;
        cells.push(Cell {
            id: rec.id,
            origin: rec.origin,
            size_m: rec.size_m,
            points,
            colors,
            point_instance_ids: inst,
            point_class_ids: cls,
        });
    }
    for pose in &mf.poses {
        if !mf.cells.iter().any(|c| c.id == pose.cell_id) {
            return Err(TextLocError::Schema(format!(
                "pose references missing cell {}",
                pose.cell_id
            )));
        }
    }
    Ok(DatasetManifest {
        schema_version: mf.schema_version,
        spec: mf.spec,
        spec_hash: mf.spec_hash,
        cell_size_m: mf.cell_size_m,
        stride_m: mf.stride_m,
        instances: mf.instances,
        cells,
        poses: mf.poses,
    })
}
