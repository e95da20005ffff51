//! Scenes and their JSON file format.
//!
//! Dense grids are stored as run-length pairs `[value, count]` in x-fastest
//! order. Instance ids use `-1` for "no instance". Visibility is not stored;
//! it is recomputed from the labels and the ego point on load. The voxel
//! feature grid is regenerated from its seed.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, ClassTable};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::grid::{
    compute_visibility, Grid3, GridSpec, PanopticGrid, SemanticGrid, VisibilityMask,
};
use crate::objects::GroundTruthObject;

/// How the per-voxel feature vectors are produced: one-hot class followed by
/// zero padding, plus seeded Gaussian noise on every channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub spec: GridSpec,
    pub dim: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn generate(semantic: &SemanticGrid, fs: &FeatureSpec) -> Result<Self> {
        let spec = semantic.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(fs.seed);
        rng.set_stream(1);
        let mut data = Vec::with_capacity(spec.voxel_count() * fs.dim);
        for label in semantic.labels.as_slice() {
            for d in 0..fs.dim {
                let onehot = if d == *label as usize { 1.0 } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(onehot + fs.noise_sigma * noise);
            }
        }
        Ok(Self {
            spec,
            dim: fs.dim,
            data,
        })
    }

    /// Uniform feature value everywhere; handy for tests.
    pub fn constant(spec: GridSpec, dim: usize, value: f64) -> Self {
        Self {
            spec,
            dim,
            data: vec![value; spec.voxel_count() * dim],
        }
    }

    pub fn from_fn(spec: GridSpec, dim: usize, f: impl Fn([usize; 3], usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(spec.voxel_count() * dim);
        for idx in spec.indices() {
            for d in 0..dim {
                data.push(f(idx, d));
            }
        }
        Self { spec, dim, data }
    }

    pub fn at(&self, idx: [usize; 3]) -> &[f64] {
        let i = self.spec.linear(idx) * self.dim;
        &self.data[i..i + self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub classes: ClassTable,
    pub semantic: SemanticGrid,
    pub panoptic: PanopticGrid,
    pub objects: Vec<GroundTruthObject>,
    pub ego: Vec3,
    pub visibility: VisibilityMask,
    pub feature_spec: FeatureSpec,
    pub features: FeatureGrid,
}

impl Scene {
    pub fn spec(&self) -> GridSpec {
        self.semantic.spec
    }

    /// Largest object, in voxels.
    pub fn max_object_voxels(&self) -> usize {
        self.objects
            .iter()
            .map(|o| o.voxels.len())
            .max()
            .unwrap_or(0)
    }

    pub fn to_file(&self) -> SceneFile {
        SceneFile {
            spec: self.spec(),
            classes: self.classes.clone(),
            labels_rle: rle_encode(self.semantic.labels.as_slice().iter().map(|l| *l as i64)),
            instances_rle: rle_encode(
                self.panoptic
                    .instance_ids
                    .as_slice()
                    .iter()
                    .map(|i| i.map_or(-1, |v| v as i64)),
            ),
            ego: self.ego,
            objects: self.objects.clone(),
            features: self.feature_spec,
        }
    }

    pub fn from_file(file: SceneFile) -> Result<Self> {
        file.spec.validate()?;
        let n = file.spec.voxel_count();
        let labels = rle_decode(&file.labels_rle, n)?
            .into_iter()
            .map(|v| {
                ClassId::try_from(v)
                    .ok()
                    .filter(|c| (*c as usize) < file.classes.len())
                    .ok_or_else(|| Error::Format(format!("invalid class label {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = rle_decode(&file.instances_rle, n)?
            .into_iter()
            .map(|v| match v {
                -1 => Ok(None),
                v => u32::try_from(v)
                    .map(Some)
                    .map_err(|_| Error::Format(format!("invalid instance id {v}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let semantic = SemanticGrid::from_labels(file.spec, labels)?;
        let panoptic = PanopticGrid {
            spec: file.spec,
            labels: semantic.labels.clone(),
            instance_ids: Grid3::from_vec(file.spec.dims, ids)?,
        };
        panoptic.validate(&file.classes)?;
        for o in &file.objects {
            if o.voxels.len() != o.voxel_centers.len() || o.voxels.is_empty() {
                return Err(Error::Format(format!(
                    "object {} has inconsistent voxel lists",
                    o.instance_id
                )));
            }
            if let Some(v) = o.voxels.iter().find(|v| !file.spec.contains(**v)) {
                return Err(Error::IndexOutOfRange {
                    index: *v,
                    dims: file.spec.dims,
                });
            }
        }
        let visibility = compute_visibility(&semantic, file.ego)?;
        let features = FeatureGrid::generate(&semantic, &file.features)?;
        Ok(Self {
            classes: file.classes,
            semantic,
            panoptic,
            objects: file.objects,
            ego: file.ego,
            visibility,
            feature_spec: file.features,
            features,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub spec: GridSpec,
    pub labels_rle: Vec<[i64; 2]>,
    pub instances_rle: Vec<[i64; 2]>,
    pub ego: Vec3,
    pub objects: Vec<GroundTruthObject>,
    pub classes: ClassTable,
    pub features: FeatureSpec,
}

pub fn rle_encode(values: impl IntoIterator<Item = i64>) -> Vec<[i64; 2]> {
    let mut runs: Vec<[i64; 2]> = Vec::new();
    for v in values {
        match runs.last_mut() {
            Some(run) if run[0] == v => run[1] += 1,
            _ => runs.push([v, 1]),
        }
    }
    runs
}

/// Expands runs and checks the total length.
pub fn rle_decode(runs: &[[i64; 2]], expected: usize) -> Result<Vec<i64>> {
    let mut out = Vec::with_capacity(expected);
    for [value, count] in runs {
        if *count <= 0 {
            return Err(Error::Format(format!(
                "run length {count} must be positive"
            )));
        }
        if out.len() + *count as usize > expected {
            return Err(Error::Format(format!("runs exceed {expected} voxels")));
        }
        out.extend(std::iter::repeat_n(*value, *count as usize));
    }
    if out.len() != expected {
        return Err(Error::Format(format!(
            "runs cover {} voxels, expected {expected}",
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_rejects_bad_totals() {
        assert!(rle_decode(&[[1, 2]], 3).is_err());
        assert!(rle_decode(&[[1, 4]], 3).is_err());
        assert!(rle_decode(&[[1, 0], [2, 3]], 3).is_err());
        assert_eq!(rle_decode(&[[1, 2], [0, 1]], 3).unwrap(), vec![1, 1, 0]);
    }

    proptest! {
        #[test]
        fn rle_round_trip(values in proptest::collection::vec(-1i64..4, 0..200)) {
            let runs = rle_encode(values.iter().copied());
            prop_assert!(runs.windows(2).all(|w| w[0][0] != w[1][0]));
            prop_assert_eq!(rle_decode(&runs, values.len()).unwrap(), values);
        }
    }
}
