//! Object-level predictions and ground truth, point-cloud materialization,
//! instance rasterization and the visible-object training filter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, ClassTable};
use crate::geom::{self, Vec3};
use crate::grid::{Grid3, GridSpec, VisibilityMask, VoxelIndex};

/// Offsets scoring at or above this are part of the object.
pub const ACTIVE_SCORE: f64 = 0.5;

/// One query's decoded output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrediction {
    /// Unnormalized scores over all classes; index 0 is background.
    pub class_logits: Vec<f64>,
    pub center: Vec3,
    pub offsets: Vec<Vec3>,
    /// Per-offset occupancy scores in `[0, 1]`.
    pub scores: Vec<f64>,
}

impl ObjectPrediction {
    pub fn k(&self) -> usize {
        self.offsets.len()
    }

    pub fn class_probs(&self) -> Vec<f64> {
        softmax(&self.class_logits)
    }

    /// `(class, probability)` of the most likely class; lowest id wins ties.
    pub fn top_class(&self) -> (ClassId, f64) {
        let probs = self.class_probs();
        let mut best = 0;
        for (c, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = c;
            }
        }
        (best as ClassId, probs[best])
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_id: ClassId,
    /// Centroid of `voxel_centers`.
    pub center: Vec3,
    pub voxels: Vec<VoxelIndex>,
    pub voxel_centers: Vec<Vec3>,
    pub instance_id: u32,
    pub visible_voxel_count: usize,
}

impl GroundTruthObject {
    /// Builds an object from its voxel set. Visibility starts at zero; see
    /// [`GroundTruthObject::count_visible`].
    pub fn from_voxels(
        spec: &GridSpec,
        class_id: ClassId,
        instance_id: u32,
        voxels: Vec<VoxelIndex>,
    ) -> crate::Result<Self> {
        if voxels.is_empty() {
            return Err(crate::Error::InvalidConfig(format!(
                "object {instance_id} has no voxels"
            )));
        }
        let voxel_centers = voxels
            .iter()
            .map(|v| spec.voxel_center(*v))
            .collect::<crate::Result<Vec<_>>>()?;
        Ok(Self {
            class_id,
            center: geom::centroid(&voxel_centers),
            voxels,
            voxel_centers,
            instance_id,
            visible_voxel_count: 0,
        })
    }

    pub fn count_visible(&mut self, mask: &VisibilityMask) {
        self.visible_voxel_count = self.voxels.iter().filter(|v| mask.is_visible(**v)).count();
    }
}

/// The object's point cloud: `anchor + offset` for every offset with score >= 0.5.
///
/// At inference the anchor is the predicted center; decoupled training
/// anchors at the matched ground-truth center instead.
pub fn materialize_point_cloud(pred: &ObjectPrediction, anchor: Vec3) -> Vec<Vec3> {
    pred.offsets
        .iter()
        .zip(&pred.scores)
        .filter(|(_, s)| **s >= ACTIVE_SCORE)
        .map(|(o, _)| geom::add(anchor, *o))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMap {
    pub spec: GridSpec,
    pub ids: Grid3<Option<u32>>,
    /// Predicted class of every instance written to the map.
    pub classes: BTreeMap<u32, ClassId>,
}

impl InstanceMap {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            ids: Grid3::filled(spec.dims, None),
            classes: BTreeMap::new(),
        }
    }

    pub fn id_at(&self, idx: VoxelIndex) -> Option<u32> {
        *self.ids.get(idx)
    }

    pub fn occupied_count(&self) -> usize {
        self.ids.as_slice().iter().filter(|i| i.is_some()).count()
    }
}

/// Instance id given to the prediction at `query` index.
pub fn instance_id_for_query(query: usize) -> u32 {
    query as u32 + 1
}

/// Rasterizes the kept predictions into an instance map.
///
/// A prediction is kept when its most likely class is a thing class with
/// probability at least `class_threshold`. Kept predictions are materialized
/// at their own center. When several offsets land in one voxel, the highest
/// score wins, then the lower instance id.
pub fn rasterize_instances(
    preds: &[ObjectPrediction],
    spec: &GridSpec,
    classes: &ClassTable,
    class_threshold: f64,
) -> InstanceMap {
    let mut map = InstanceMap::empty(*spec);
    let mut best_score: Grid3<f64> = Grid3::filled(spec.dims, f64::NEG_INFINITY);
    for (q, pred) in preds.iter().enumerate() {
        let (class, prob) = pred.top_class();
        if !classes.is_thing(class) || prob < class_threshold {
            continue;
        }
        let id = instance_id_for_query(q);
        map.classes.insert(id, class);
        for (offset, score) in pred.offsets.iter().zip(&pred.scores) {
            if *score < ACTIVE_SCORE {
                continue;
            }
            let Some(idx) = spec.world_to_voxel(geom::add(pred.center, *offset)) else {
                continue;
            };
            let prev = *best_score.get(idx);
            // Queries are visited in increasing id order, so strict > keeps the lower id on ties.
            if *score > prev {
                best_score.set(idx, *score);
                map.ids.set(idx, Some(id));
            }
        }
    }
    map
}

/// Keeps objects with at least one visible voxel.
pub fn filter_trainable(objects: &[GroundTruthObject]) -> Vec<GroundTruthObject> {
    objects
        .iter()
        .filter(|o| o.visible_voxel_count >= 1)
        .cloned()
        .collect()
}
