//! Deterministic synthetic street scenes: a stuff ground layer with
//! non-overlapping thing objects on top, plus corrupted copies of the
//! semantic grid that stand in for a frozen baseline decoder.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, ClassTable, EMPTY};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::grid::{
    compute_visibility, Grid3, GridSpec, PanopticGrid, SemanticGrid, VisibilityMask, VoxelIndex,
};
use crate::objects::{GroundTruthObject, ObjectPrediction};
use crate::scene::{FeatureGrid, FeatureSpec, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    LShape,
    Cylinder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Probability that a non-empty baseline voxel gets a different class.
    #[serde(default)]
    pub label_flip_rate: f64,
    /// Std-dev (meters, per axis) of noise injected into predicted centers.
    #[serde(default)]
    pub center_noise_sigma: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            label_flip_rate: 0.0,
            center_noise_sigma: 0.0,
        }
    }
}

fn default_seed() -> u64 {
    0
}
fn default_classes() -> ClassTable {
    ClassTable::street()
}
fn default_n_objects() -> [usize; 2] {
    [3, 6]
}
fn default_shape_kinds() -> Vec<ShapeKind> {
    vec![ShapeKind::Box, ShapeKind::LShape, ShapeKind::Cylinder]
}
fn default_size_min() -> [usize; 3] {
    [1, 1, 1]
}
fn default_size_max() -> [usize; 3] {
    [4, 3, 3]
}
fn default_max_voxels() -> usize {
    125
}
fn default_gap() -> usize {
    1
}
fn default_stuff_layers() -> usize {
    1
}
fn default_feature_dim() -> usize {
    32
}
fn default_feature_noise() -> f64 {
    0.1
}
fn default_attempts() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_classes")]
    pub classes: ClassTable,
    /// Inclusive `[min, max]` object count.
    #[serde(default = "default_n_objects")]
    pub n_objects: [usize; 2],
    #[serde(default = "default_shape_kinds")]
    pub shape_kinds: Vec<ShapeKind>,
    /// Inclusive bounding-box extent range per axis, in voxels.
    #[serde(default = "default_size_min")]
    pub shape_size_min: [usize; 3],
    #[serde(default = "default_size_max")]
    pub shape_size_max: [usize; 3],
    #[serde(default = "default_max_voxels")]
    pub max_object_voxels: usize,
    /// Free voxels (Chebyshev) kept between objects and around the ego voxel.
    #[serde(default = "default_gap")]
    pub min_gap: usize,
    #[serde(default = "default_stuff_layers")]
    pub stuff_layers: usize,
    #[serde(default)]
    pub corruption: Corruption,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_feature_noise")]
    pub feature_noise_sigma: f64,
    /// Defaults to the center of the first voxel layer above the ground.
    #[serde(default)]
    pub ego: Option<Vec3>,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let p = self.corruption.label_flip_rate;
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("label_flip_rate must lie in [0, 1], got {p}"));
        }
        if !(self.corruption.center_noise_sigma >= 0.0 && self.feature_noise_sigma >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self.n_objects[0] > self.n_objects[1] {
            return bad(format!("n_objects range {:?} is empty", self.n_objects));
        }
        if self.shape_kinds.is_empty() && self.n_objects[1] > 0 {
            return bad("shape_kinds is empty".into());
        }
        if (0..3)
            .any(|a| self.shape_size_min[a] == 0 || self.shape_size_min[a] > self.shape_size_max[a])
        {
            return bad("shape size range is empty".into());
        }
        if self.stuff_layers + self.shape_size_max[2] > self.grid.dims[2]
            || self.shape_size_max[0] > self.grid.dims[0]
            || self.shape_size_max[1] > self.grid.dims[1]
        {
            return bad("shapes do not fit in the grid".into());
        }
        if self.feature_dim < self.classes.len() {
            return bad(format!(
                "feature_dim {} is smaller than the class count {}",
                self.feature_dim,
                self.classes.len()
            ));
        }
        Ok(())
    }

    pub fn ego_position(&self) -> Vec3 {
        self.ego.unwrap_or_else(|| {
            let [l, w, h] = self.grid.dims;
            self.grid
                .voxel_center_unchecked([l / 2, w / 2, self.stuff_layers.min(h - 1)])
        })
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const PLACEMENT_STREAM: u64 = 0;
const BASELINE_STREAM: u64 = 2;
const FEATURE_SEED_SALT: u64 = 0x5eed_f00d;

/// Voxel offsets of a shape relative to its bounding-box minimum corner.
fn shape_voxels(kind: ShapeKind, size: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<VoxelIndex> {
    let [dx, dy, dz] = size;
    let mut out = Vec::new();
    match kind {
        ShapeKind::Box => {
            for z in 0..dz {
                for y in 0..dy {
                    for x in 0..dx {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        ShapeKind::LShape if dx >= 2 && dy >= 2 => {
            let cut_x = rng.random_range(1..dx);
            let cut_y = rng.random_range(1..dy);
            for z in 0..dz {
                for y in 0..dy {
                    for x in 0..dx {
                        if !(x >= dx - cut_x && y >= dy - cut_y) {
                            out.push([x, y, z]);
                        }
                    }
                }
            }
        }
        ShapeKind::LShape => return shape_voxels(ShapeKind::Box, size, rng),
        ShapeKind::Cylinder => {
            let d = dx.min(dy);
            let r = d as f64 / 2.0;
            for z in 0..dz {
                for y in 0..d {
                    for x in 0..d {
                        let cx = x as f64 + 0.5 - r;
                        let cy = y as f64 + 0.5 - r;
                        if cx * cx + cy * cy <= r * r {
                            out.push([x, y, z]);
                        }
                    }
                }
            }
        }
    }
    out
}

fn mark_blocked(blocked: &mut Grid3<bool>, dims: [usize; 3], voxel: VoxelIndex, gap: usize) {
    let lo = |c: usize| c.saturating_sub(gap);
    for z in lo(voxel[2])..=(voxel[2] + gap).min(dims[2] - 1) {
        for y in lo(voxel[1])..=(voxel[1] + gap).min(dims[1] - 1) {
            for x in lo(voxel[0])..=(voxel[0] + gap).min(dims[0] - 1) {
                blocked.set([x, y, z], true);
            }
        }
    }
}

fn ground_class(cfg: &SceneConfig, y: usize) -> ClassId {
    let stuff: Vec<ClassId> = cfg.classes.stuff_classes().collect();
    let w = cfg.grid.dims[1] as f64;
    let central = ((y as f64 + 0.5) - w / 2.0).abs() < w / 4.0;
    if central {
        stuff[0]
    } else {
        stuff[1 % stuff.len()]
    }
}

/// Builds a scene from its config. Same config, same scene.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let spec = cfg.grid;
    let [l, w, h] = spec.dims;
    let mut rng = cfg.rng(PLACEMENT_STREAM);

    let mut semantic = SemanticGrid::empty(spec);
    for z in 0..cfg.stuff_layers.min(h) {
        for y in 0..w {
            for x in 0..l {
                semantic.labels.set([x, y, z], ground_class(cfg, y));
            }
        }
    }
    let mut instance_ids: Grid3<Option<u32>> = Grid3::filled(spec.dims, None);

    let ego = cfg.ego_position();
    let ego_voxel = spec.world_to_voxel(ego).ok_or(Error::EgoOutsideGrid(ego))?;
    let mut blocked = Grid3::filled(spec.dims, false);
    mark_blocked(&mut blocked, spec.dims, ego_voxel, cfg.min_gap);

    let things: Vec<ClassId> = cfg.classes.thing_classes().collect();
    let n_objects = rng.random_range(cfg.n_objects[0]..=cfg.n_objects[1]);
    let mut objects = Vec::with_capacity(n_objects);
    for index in 0..n_objects {
        let class_id = *things.choose(&mut rng).expect("at least one thing class");
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let kind = *cfg
                .shape_kinds
                .choose(&mut rng)
                .expect("non-empty shape kinds");
            let size: [usize; 3] = std::array::from_fn(|a| {
                rng.random_range(cfg.shape_size_min[a]..=cfg.shape_size_max[a])
            });
            let local = shape_voxels(kind, size, &mut rng);
            if local.len() > cfg.max_object_voxels {
                continue;
            }
            let x0 = rng.random_range(0..=l - size[0]);
            let y0 = rng.random_range(0..=w - size[1]);
            let z0 = cfg.stuff_layers;
            let voxels: Vec<VoxelIndex> = local
                .iter()
                .map(|v| [v[0] + x0, v[1] + y0, v[2] + z0])
                .collect();
            if voxels
                .iter()
                .any(|v| !spec.contains(*v) || *blocked.get(*v))
            {
                continue;
            }
            placed = Some(voxels);
            break;
        }
        let voxels = placed.ok_or(Error::Placement {
            index,
            attempts: cfg.max_attempts,
        })?;
        let instance_id = index as u32 + 1;
        for v in &voxels {
            semantic.labels.set(*v, class_id);
            instance_ids.set(*v, Some(instance_id));
            mark_blocked(&mut blocked, spec.dims, *v, cfg.min_gap);
        }
        objects.push(GroundTruthObject::from_voxels(
            &spec,
            class_id,
            instance_id,
            voxels,
        )?);
    }

    let visibility = compute_visibility(&semantic, ego)?;
    for o in &mut objects {
        o.count_visible(&visibility);
    }
    let panoptic = PanopticGrid {
        spec,
        labels: semantic.labels.clone(),
        instance_ids,
    };
    let feature_spec = FeatureSpec {
        dim: cfg.feature_dim,
        noise_sigma: cfg.feature_noise_sigma,
        seed: cfg.seed ^ FEATURE_SEED_SALT,
    };
    let features = FeatureGrid::generate(&semantic, &feature_spec)?;
    Ok(Scene {
        classes: cfg.classes.clone(),
        semantic,
        panoptic,
        objects,
        ego,
        visibility,
        feature_spec,
        features,
    })
}

/// Copy of the ground-truth semantic grid where each non-empty voxel is
/// relabeled, with probability `label_flip_rate`, to a uniformly drawn
/// different non-empty class.
pub fn corrupt_baseline(scene: &Scene, cfg: &SceneConfig) -> SemanticGrid {
    let mut rng = cfg.rng(BASELINE_STREAM);
    let mut out = scene.semantic.clone();
    let n_classes = scene.classes.len() as ClassId;
    let rate = cfg.corruption.label_flip_rate;
    for label in out.labels.as_mut_slice() {
        if *label == EMPTY || n_classes < 3 {
            continue;
        }
        if rng.random::<f64>() < rate {
            // draw from the n_classes - 2 non-empty classes other than the current one
            let mut c = rng.random_range(1..n_classes - 1);
            if c >= *label {
                c += 1;
            }
            *label = c;
        }
    }
    out
}

/// Relabels every occupied voxel that is not visible to the next non-empty
/// class (cyclically), leaving visible voxels untouched.
pub fn corrupt_occluded(
    semantic: &SemanticGrid,
    visibility: &VisibilityMask,
    classes: &ClassTable,
) -> SemanticGrid {
    let n = classes.len() as ClassId;
    let mut out = semantic.clone();
    for (label, visible) in out
        .labels
        .as_mut_slice()
        .iter_mut()
        .zip(visibility.visible.as_slice())
    {
        if *label != EMPTY && !*visible && n > 2 {
            *label = *label % (n - 1) + 1;
        }
    }
    out
}

/// A small hand-built scene: a ground layer, a wall-like car between the
/// ego and a pedestrian that it hides completely. Returns the scene and a
/// prediction that differs from the ground truth only in occluded voxels.
pub fn occlusion_case() -> Result<(Scene, SemanticGrid)> {
    let spec = GridSpec::new([0.0, 0.0, 0.0], [0.4; 3], [12, 7, 4])?;
    let classes = ClassTable::street();
    let mut semantic = SemanticGrid::empty(spec);
    let mut instance_ids: Grid3<Option<u32>> = Grid3::filled(spec.dims, None);
    for y in 0..7 {
        for x in 0..12 {
            semantic.labels.set([x, y, 0], 4);
        }
    }
    let wall: Vec<VoxelIndex> = (0..7)
        .flat_map(|y| (1..4).flat_map(move |z| (4..6).map(move |x| [x, y, z])))
        .collect();
    let hidden: Vec<VoxelIndex> = (2..5)
        .flat_map(|y| (1..3).flat_map(move |z| (8..10).map(move |x| [x, y, z])))
        .collect();
    let mut objects = Vec::new();
    for (id, class, voxels) in [(1u32, 1, wall), (2, 2, hidden)] {
        for v in &voxels {
            semantic.labels.set(*v, class);
            instance_ids.set(*v, Some(id));
        }
        objects.push(GroundTruthObject::from_voxels(&spec, class, id, voxels)?);
    }
    let ego = spec.voxel_center([1, 3, 1])?;
    let visibility = compute_visibility(&semantic, ego)?;
    for o in &mut objects {
        o.count_visible(&visibility);
    }
    let feature_spec = FeatureSpec {
        dim: 8,
        noise_sigma: 0.0,
        seed: 0,
    };
    let features = FeatureGrid::generate(&semantic, &feature_spec)?;
    let prediction = corrupt_occluded(&semantic, &visibility, &classes);
    let panoptic = PanopticGrid {
        spec,
        labels: semantic.labels.clone(),
        instance_ids,
    };
    let scene = Scene {
        classes,
        semantic,
        panoptic,
        objects,
        ego,
        visibility,
        feature_spec,
        features,
    };
    Ok((scene, prediction))
}

/// Adds independent Gaussian noise (std-dev `sigma` meters per axis) to each
/// prediction's center.
pub fn jitter_centers(preds: &mut [ObjectPrediction], sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    for p in preds {
        for c in &mut p.center {
            *c += normal.sample(&mut rng);
        }
    }
}
