//! Panoptic merge: attach instance ids to the baseline's thing voxels by
//! majority vote over a Manhattan neighborhood of the instance map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classes::{ClassTable, EMPTY};
use crate::error::{Error, Result};
use crate::grid::{PanopticGrid, SemanticGrid, VoxelIndex};
use crate::objects::{rasterize_instances, InstanceMap, ObjectPrediction};

/// Minimum top-class probability for a prediction to be rasterized.
pub const CLASS_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticConfig {
    /// Voting radius in voxels, Manhattan metric.
    pub radius: usize,
}

impl Default for PanopticConfig {
    fn default() -> Self {
        Self { radius: 9 }
    }
}

fn manhattan(a: VoxelIndex, b: VoxelIndex) -> usize {
    (0..3).map(|i| a[i].abs_diff(b[i])).sum()
}

#[derive(Clone, Copy)]
struct Tally {
    votes: usize,
    nearest: usize,
}

/// Merges baseline semantics with rasterized instances.
///
/// Stuff and empty voxels are copied. Every thing voxel collects the ids
/// found within Manhattan distance `radius`; the most frequent id wins
/// (ties: nearest carrying voxel, then smaller id) and the baseline class is
/// kept. Thing voxels that see no id become empty.
pub fn merge_panoptic(
    baseline: &SemanticGrid,
    instances: &InstanceMap,
    cfg: &PanopticConfig,
    classes: &ClassTable,
) -> Result<PanopticGrid> {
    if baseline.spec != instances.spec {
        return Err(Error::SpecMismatch);
    }
    let spec = baseline.spec;
    let carriers: Vec<(VoxelIndex, u32)> = spec
        .indices()
        .filter_map(|idx| instances.id_at(idx).map(|id| (idx, id)))
        .collect();

    let mut out = PanopticGrid::from_semantic(baseline);
    let mut tallies: BTreeMap<u32, Tally> = BTreeMap::new();
    for idx in spec.indices() {
        if !classes.is_thing(baseline.label(idx)) {
            continue;
        }
        tallies.clear();
        for (at, id) in &carriers {
            let d = manhattan(idx, *at);
            if d > cfg.radius {
                continue;
            }
            let t = tallies.entry(*id).or_insert(Tally {
                votes: 0,
                nearest: usize::MAX,
            });
            t.votes += 1;
            t.nearest = t.nearest.min(d);
        }
        // BTreeMap iterates ids ascending, so strict comparisons keep the smaller id on full ties.
        let mut winner: Option<(u32, Tally)> = None;
        for (id, t) in &tallies {
            let better = match winner {
                None => true,
                Some((_, w)) => t.votes > w.votes || (t.votes == w.votes && t.nearest < w.nearest),
            };
            if better {
                winner = Some((*id, *t));
            }
        }
        match winner {
            Some((id, _)) => out.instance_ids.set(idx, Some(id)),
            None => out.labels.set(idx, EMPTY),
        }
    }
    Ok(out)
}

/// Rasterizes `preds` and merges them into `baseline`.
pub fn predict_panoptic(
    preds: &[ObjectPrediction],
    baseline: &SemanticGrid,
    classes: &ClassTable,
    cfg: &PanopticConfig,
    class_threshold: f64,
) -> Result<PanopticGrid> {
    let instances = rasterize_instances(preds, &baseline.spec, classes, class_threshold);
    merge_panoptic(baseline, &instances, cfg, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn setup() -> (SemanticGrid, InstanceMap, ClassTable) {
        let spec = GridSpec::new([0.0; 3], [0.4; 3], [7, 7, 3]).unwrap();
        (
            SemanticGrid::empty(spec),
            InstanceMap::empty(spec),
            ClassTable::street(),
        )
    }

    #[test]
    fn radius_zero_direct_lookup() {
        let (mut base, mut inst, classes) = setup();
        base.labels.set([3, 3, 1], 1);
        inst.ids.set([3, 3, 1], Some(4));
        let out = merge_panoptic(&base, &inst, &PanopticConfig { radius: 0 }, &classes).unwrap();
        assert_eq!(*out.instance_ids.get([3, 3, 1]), Some(4));
        assert_eq!(out.labels.get([3, 3, 1]), &1);
    }

    #[test]
    fn majority_wins() {
        let (mut base, mut inst, classes) = setup();
        base.labels.set([3, 3, 1], 1);
        inst.ids.set([2, 3, 1], Some(2));
        inst.ids.set([4, 3, 1], Some(2));
        inst.ids.set([3, 2, 1], Some(3));
        let out = merge_panoptic(&base, &inst, &PanopticConfig { radius: 1 }, &classes).unwrap();
        assert_eq!(*out.instance_ids.get([3, 3, 1]), Some(2));
    }

    #[test]
    fn vote_ties_prefer_nearer_then_smaller() {
        let (mut base, mut inst, classes) = setup();
        base.labels.set([3, 3, 1], 1);
        inst.ids.set([5, 3, 1], Some(1));
        inst.ids.set([3, 4, 1], Some(9));
        let out = merge_panoptic(&base, &inst, &PanopticConfig { radius: 2 }, &classes).unwrap();
        assert_eq!(*out.instance_ids.get([3, 3, 1]), Some(9));

        let (mut base, mut inst, classes) = setup();
        base.labels.set([3, 3, 1], 1);
        inst.ids.set([2, 3, 1], Some(8));
        inst.ids.set([4, 3, 1], Some(5));
        let out = merge_panoptic(&base, &inst, &PanopticConfig { radius: 1 }, &classes).unwrap();
        assert_eq!(*out.instance_ids.get([3, 3, 1]), Some(5));
    }

    #[test]
    fn unreached_thing_becomes_empty_and_stuff_is_untouched() {
        let (mut base, mut inst, classes) = setup();
        base.labels.set([0, 0, 0], 1);
        base.labels.set([1, 0, 0], 4);
        inst.ids.set([6, 6, 2], Some(1));
        inst.ids.set([1, 0, 0], Some(1));
        let out = merge_panoptic(&base, &inst, &PanopticConfig { radius: 0 }, &classes).unwrap();
        assert_eq!(out.labels.get([0, 0, 0]), &EMPTY);
        assert_eq!(out.instance_ids.get([0, 0, 0]), &None);
        assert_eq!(out.labels.get([1, 0, 0]), &4);
        assert_eq!(out.instance_ids.get([1, 0, 0]), &None);
    }

    #[test]
    fn spec_mismatch_rejected() {
        let (base, _, classes) = setup();
        let other = InstanceMap::empty(GridSpec::new([0.0; 3], [0.4; 3], [2, 2, 2]).unwrap());
        assert!(matches!(
            merge_panoptic(&base, &other, &PanopticConfig::default(), &classes),
            Err(Error::SpecMismatch)
        ));
    }
}
