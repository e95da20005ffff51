//! Voxel grid data model: coordinate transforms, voxelization, dense
//! containers and ray-cast visibility.
//!
//! Dense arrays are stored x-fastest: `linear = x + L * (y + W * z)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, ClassTable, EMPTY};
use crate::error::{Error, Result};
use crate::geom::Vec3;

pub type VoxelIndex = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec3,
    pub voxel_size: Vec3,
    pub dims: [usize; 3],
}

impl Default for GridSpec {
    /// 50 x 50 x 8 voxels of 0.4 m: a scaled-down street layout.
    fn default() -> Self {
        Self {
            origin: [-10.0, -10.0, -1.6],
            voxel_size: [0.4, 0.4, 0.4],
            dims: [50, 50, 8],
        }
    }
}

impl GridSpec {
    pub fn new(origin: Vec3, voxel_size: Vec3, dims: [usize; 3]) -> Result<Self> {
        let spec = Self {
            origin,
            voxel_size,
            dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidGridSpec(format!(
                "voxel sizes must be positive, got {:?}",
                self.voxel_size
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidGridSpec(format!(
                "dims must be at least 1, got {:?}",
                self.dims
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGridSpec("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn contains(&self, idx: VoxelIndex) -> bool {
        idx.iter().zip(self.dims.iter()).all(|(i, d)| i < d)
    }

    pub fn linear(&self, idx: VoxelIndex) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    pub fn unlinear(&self, i: usize) -> VoxelIndex {
        let [l, w, _] = self.dims;
        [i % l, (i / l) % w, i / (l * w)]
    }

    /// Continuous voxel coordinates: voxel `i` spans `[i, i + 1)` on each axis.
    pub fn to_voxel_coords(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.voxel_size[a])
    }

    /// Floors into the grid; `None` when any axis falls outside `[0, dims)`.
    pub fn world_to_voxel(&self, p: Vec3) -> Option<VoxelIndex> {
        let u = self.to_voxel_coords(p);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = u[a].floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, idx: VoxelIndex) -> Result<Vec3> {
        if !self.contains(idx) {
            return Err(Error::IndexOutOfRange {
                index: idx,
                dims: self.dims,
            });
        }
        Ok(self.voxel_center_unchecked(idx))
    }

    pub(crate) fn voxel_center_unchecked(&self, idx: VoxelIndex) -> Vec3 {
        std::array::from_fn(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// World-space extent `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let max =
            std::array::from_fn(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size[a]);
        (self.origin, max)
    }

    pub fn indices(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        (0..self.voxel_count()).map(move |i| self.unlinear(i))
    }
}

/// Result of [`voxelize_points`]: the occupied voxels plus how many points fell outside.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Voxelized {
    pub voxels: BTreeSet<VoxelIndex>,
    pub dropped: usize,
}

pub fn voxelize_points(spec: &GridSpec, points: &[Vec3]) -> Voxelized {
    let mut out = Voxelized::default();
    for p in points {
        match spec.world_to_voxel(*p) {
            Some(idx) => {
                out.voxels.insert(idx);
            }
            None => out.dropped += 1,
        }
    }
    out
}

/// Dense 3D array in x-fastest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Clone> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }
}

impl<T> Grid3<T> {
    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn linear(&self, idx: VoxelIndex) -> usize {
        debug_assert!(idx.iter().zip(self.dims.iter()).all(|(i, d)| i < d));
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    #[inline]
    pub fn get(&self, idx: VoxelIndex) -> &T {
        &self.data[self.linear(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: VoxelIndex, value: T) {
        let i = self.linear(idx);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGrid {
    pub spec: GridSpec,
    pub labels: Grid3<ClassId>,
}

impl SemanticGrid {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            labels: Grid3::filled(spec.dims, EMPTY),
        }
    }

    pub fn from_labels(spec: GridSpec, labels: Vec<ClassId>) -> Result<Self> {
        Ok(Self {
            spec,
            labels: Grid3::from_vec(spec.dims, labels)?,
        })
    }

    pub fn label(&self, idx: VoxelIndex) -> ClassId {
        *self.labels.get(idx)
    }

    pub fn is_occupied(&self, idx: VoxelIndex) -> bool {
        self.label(idx) != EMPTY
    }

    /// Checks every label against the class table.
    pub fn validate(&self, classes: &ClassTable) -> Result<()> {
        match self
            .labels
            .as_slice()
            .iter()
            .find(|l| **l as usize >= classes.len())
        {
            Some(l) => Err(Error::Format(format!(
                "label {l} exceeds class count {}",
                classes.len()
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticGrid {
    pub spec: GridSpec,
    pub labels: Grid3<ClassId>,
    pub instance_ids: Grid3<Option<u32>>,
}

impl PanopticGrid {
    pub fn from_semantic(semantic: &SemanticGrid) -> Self {
        Self {
            spec: semantic.spec,
            labels: semantic.labels.clone(),
            instance_ids: Grid3::filled(semantic.spec.dims, None),
        }
    }

    pub fn semantic(&self) -> SemanticGrid {
        SemanticGrid {
            spec: self.spec,
            labels: self.labels.clone(),
        }
    }

    /// Checks that labels are known and ids sit only on thing voxels.
    pub fn validate_placement(&self, classes: &ClassTable) -> Result<()> {
        for (label, id) in self
            .labels
            .as_slice()
            .iter()
            .zip(self.instance_ids.as_slice())
        {
            if *label as usize >= classes.len() {
                return Err(Error::InvalidPanoptic(format!("unknown class {label}")));
            }
            if let Some(id) = id {
                if !classes.is_thing(*label) {
                    return Err(Error::InvalidPanoptic(format!(
                        "instance {id} placed on non-thing class {label}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// [`PanopticGrid::validate_placement`] plus one class per instance id.
    pub fn validate(&self, classes: &ClassTable) -> Result<()> {
        self.validate_placement(classes)?;
        let mut id_class: BTreeMap<u32, ClassId> = BTreeMap::new();
        for (label, id) in self
            .labels
            .as_slice()
            .iter()
            .zip(self.instance_ids.as_slice())
        {
            let Some(id) = id else { continue };
            match id_class.insert(*id, *label) {
                Some(prev) if prev != *label => {
                    return Err(Error::InvalidPanoptic(format!(
                        "instance {id} spans classes {prev} and {label}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMask {
    pub spec: GridSpec,
    pub visible: Grid3<bool>,
}

impl VisibilityMask {
    pub fn all_visible(spec: GridSpec) -> Self {
        Self {
            spec,
            visible: Grid3::filled(spec.dims, true),
        }
    }

    pub fn is_visible(&self, idx: VoxelIndex) -> bool {
        *self.visible.get(idx)
    }

    pub fn visible_count(&self) -> usize {
        self.visible.as_slice().iter().filter(|v| **v).count()
    }
}

/// Relative tolerance for treating two axis crossings as simultaneous.
const CROSSING_TIE: f64 = 1e-9;

/// Ray-cast visibility from a single ego point.
///
/// Each voxel is tested with a ray from `ego` to its center, walked with a
/// 3D DDA. A voxel is visible when no voxel strictly between the ego voxel
/// and itself is occupied; the first occupied voxel on a ray is therefore
/// visible. The ego voxel never occludes. Simultaneous crossings (the ray
/// passing exactly through an edge or corner) step all tied axes at once.
pub fn compute_visibility(grid: &SemanticGrid, ego: Vec3) -> Result<VisibilityMask> {
    let spec = grid.spec;
    let ego_voxel = spec.world_to_voxel(ego).ok_or(Error::EgoOutsideGrid(ego))?;
    let start = spec.to_voxel_coords(ego);
    let mut visible = Grid3::filled(spec.dims, true);
    for target in spec.indices() {
        if target == ego_voxel {
            continue;
        }
        let end: Vec3 = std::array::from_fn(|a| target[a] as f64 + 0.5);
        if ray_blocked(grid, start, end, ego_voxel, target) {
            visible.set(target, false);
        }
    }
    Ok(VisibilityMask { spec, visible })
}

fn ray_blocked(
    grid: &SemanticGrid,
    start: Vec3,
    end: Vec3,
    start_voxel: VoxelIndex,
    target: VoxelIndex,
) -> bool {
    let dims = grid.spec.dims;
    let mut cur = start_voxel.map(|c| c as i64);
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let d = end[a] - start[a];
        if d > 0.0 {
            step[a] = 1;
            t_delta[a] = 1.0 / d;
            t_max[a] = (cur[a] as f64 + 1.0 - start[a]) / d;
        } else if d < 0.0 {
            step[a] = -1;
            t_delta[a] = -1.0 / d;
            t_max[a] = (start[a] - cur[a] as f64) / -d;
        }
    }
    let goal = target.map(|c| c as i64);
    while cur != goal {
        let t = t_max[0].min(t_max[1]).min(t_max[2]);
        if t > 1.0 + CROSSING_TIE {
            // Numerically overshot the target voxel; nothing left to test.
            return false;
        }
        for a in 0..3 {
            if t_max[a] <= t + CROSSING_TIE * t.max(1.0) {
                cur[a] += step[a];
                t_max[a] += t_delta[a];
            }
        }
        if cur == goal {
            break;
        }
        if cur
            .iter()
            .zip(dims.iter())
            .any(|(c, d)| *c < 0 || *c >= *d as i64)
        {
            return false;
        }
        if grid.is_occupied(cur.map(|c| c as usize)) {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec10() -> GridSpec {
        GridSpec::new([0.0; 3], [0.4; 3], [10, 10, 10]).unwrap()
    }

    #[test]
    fn world_to_voxel_examples() {
        let s = spec10();
        assert_eq!(s.world_to_voxel([0.0, 0.0, 0.0]), Some([0, 0, 0]));
        assert_eq!(s.world_to_voxel([0.79, 0.41, 0.0]), Some([1, 1, 0]));
        assert_eq!(s.world_to_voxel([4.0, 0.0, 0.0]), None);
        assert_eq!(s.world_to_voxel([-0.01, 0.0, 0.0]), None);
    }

    #[test]
    fn voxel_center_examples() {
        let s = spec10();
        let c = s.voxel_center([0, 0, 0]).unwrap();
        assert!(c.iter().all(|v| (v - 0.2).abs() < 1e-12));
        let c = s.voxel_center([1, 0, 0]).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-12 && (c[1] - 0.2).abs() < 1e-12);
        assert!(matches!(
            s.voxel_center([10, 0, 0]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn center_round_trip_exhaustive() {
        let s = GridSpec::new([-1.3, 2.0, 0.7], [0.4, 0.25, 0.5], [5, 5, 5]).unwrap();
        for idx in s.indices() {
            assert_eq!(s.world_to_voxel(s.voxel_center(idx).unwrap()), Some(idx));
        }
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(GridSpec::new([0.0; 3], [0.4, 0.0, 0.4], [1, 1, 1]).is_err());
        assert!(GridSpec::new([0.0; 3], [0.4; 3], [1, 0, 1]).is_err());
    }

    #[test]
    fn voxelize_dedups_and_counts_dropped() {
        let s = spec10();
        let v = voxelize_points(&s, &[[0.1, 0.1, 0.1], [0.3, 0.2, 0.05], [9.0, 0.0, 0.0]]);
        assert_eq!(v.voxels.len(), 1);
        assert_eq!(v.dropped, 1);
        assert!(voxelize_points(&s, &[]).voxels.is_empty());
    }

    #[test]
    fn empty_grid_fully_visible() {
        let g = SemanticGrid::empty(spec10());
        let m = compute_visibility(&g, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(m.visible_count(), 1000);
    }

    #[test]
    fn axis_aligned_occlusion() {
        let s = spec10();
        let mut g = SemanticGrid::empty(s);
        g.labels.set([5, 0, 0], 1);
        let ego = s.voxel_center([0, 0, 0]).unwrap();
        let m = compute_visibility(&g, ego).unwrap();
        for x in 1..=5 {
            assert!(m.is_visible([x, 0, 0]), "x={x}");
        }
        for x in 6..10 {
            assert!(!m.is_visible([x, 0, 0]), "x={x}");
        }
    }

    #[test]
    fn ego_outside_rejected() {
        let g = SemanticGrid::empty(spec10());
        assert!(matches!(
            compute_visibility(&g, [-1.0, 0.0, 0.0]),
            Err(Error::EgoOutsideGrid(_))
        ));
    }

    #[test]
    fn panoptic_validation() {
        let classes = ClassTable::street();
        let s = GridSpec::new([0.0; 3], [1.0; 3], [2, 1, 1]).unwrap();
        let mut p = PanopticGrid::from_semantic(&SemanticGrid::empty(s));
        p.labels.set([0, 0, 0], 1);
        p.labels.set([1, 0, 0], 2);
        p.instance_ids.set([0, 0, 0], Some(7));
        assert!(p.validate(&classes).is_ok());
        p.instance_ids.set([1, 0, 0], Some(7));
        assert!(p.validate(&classes).is_err());
        p.labels.set([1, 0, 0], 4);
        assert!(p.validate(&classes).is_err());
    }
}
