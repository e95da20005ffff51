//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use panocc::autodiff::Tape;
use panocc::classes::{ClassId, ClassTable, EMPTY};
use panocc::fit::{FreeParams, PredictorParams};
use panocc::grid::{Grid3, GridSpec, PanopticGrid, SemanticGrid, VoxelIndex};
use panocc::losses::{
    compute_matching, objects_loss_with_matching, AnchorMode, LossConfig, MatchResult,
    OccupancyForm,
};
use panocc::matching::CostMatrix;
use panocc::objects::GroundTruthObject;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn spec(dims: [usize; 3]) -> GridSpec {
    GridSpec::new([0.0; 3], [0.4; 3], dims).unwrap()
}

/// Costs drawn from a small integer set half the time so ties are common.
pub fn random_costs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix {
    let integer = rng.random_bool(0.5);
    CostMatrix::from_fn(rows, cols, |_, _| {
        if integer {
            rng.random_range(0..5) as f64
        } else {
            rng.random_range(-10.0..10.0)
        }
    })
    .unwrap()
}

/// Visibility by dense point sampling along each ego-to-center segment.
pub fn sampled_visibility(
    grid: &SemanticGrid,
    ego: [f64; 3],
    samples_per_voxel: usize,
) -> Grid3<bool> {
    let spec = grid.spec;
    let ego_voxel = spec.world_to_voxel(ego).unwrap();
    let mut out = Grid3::filled(spec.dims, true);
    for target in spec.indices() {
        if target == ego_voxel {
            continue;
        }
        let center = spec.voxel_center(target).unwrap();
        let len_vox: f64 = (0..3)
            .map(|a| ((center[a] - ego[a]) / spec.voxel_size[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let n = (len_vox * samples_per_voxel as f64).ceil() as usize + 2;
        let blocked = (1..n).any(|i| {
            let t = i as f64 / n as f64;
            let p: [f64; 3] = std::array::from_fn(|a| ego[a] + t * (center[a] - ego[a]));
            match spec.world_to_voxel(p) {
                Some(v) => v != ego_voxel && v != target && grid.is_occupied(v),
                None => false,
            }
        });
        out.set(target, !blocked);
    }
    out
}

pub fn random_occupancy(rng: &mut ChaCha8Rng, spec: GridSpec, density: f64) -> SemanticGrid {
    let labels = (0..spec.voxel_count())
        .map(|_| {
            if rng.random_bool(density) {
                rng.random_range(1..6)
            } else {
                EMPTY
            }
        })
        .collect();
    SemanticGrid::from_labels(spec, labels).unwrap()
}

/// A structured ground truth (stuff floor, a few thing boxes) and a noisy
/// copy of it whose labels and ids are partially scrambled.
pub fn random_panoptic_pair(
    rng: &mut ChaCha8Rng,
    classes: &ClassTable,
) -> (PanopticGrid, PanopticGrid) {
    let s = spec([8, 8, 4]);
    let mut gt = PanopticGrid::from_semantic(&SemanticGrid::empty(s));
    let stuff: Vec<ClassId> = classes.stuff_classes().collect();
    let things: Vec<ClassId> = classes.thing_classes().collect();
    for idx in s.indices() {
        if idx[2] == 0 {
            gt.labels.set(idx, stuff[rng.random_range(0..stuff.len())]);
        }
    }
    let n_boxes = rng.random_range(0..5);
    for b in 0..n_boxes {
        let class = things[rng.random_range(0..things.len())];
        let lo: VoxelIndex = [
            rng.random_range(0..7),
            rng.random_range(0..7),
            rng.random_range(1..4),
        ];
        let ext: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..4));
        for x in lo[0]..(lo[0] + ext[0]).min(8) {
            for y in lo[1]..(lo[1] + ext[1]).min(8) {
                for z in lo[2]..(lo[2] + ext[2]).min(4) {
                    gt.labels.set([x, y, z], class);
                    gt.instance_ids.set([x, y, z], Some(b as u32 + 1));
                }
            }
        }
    }
    let mut pred = gt.clone();
    let flip = rng.random_range(0.0..0.4);
    for idx in s.indices() {
        if !rng.random_bool(flip) {
            continue;
        }
        let label: ClassId = rng.random_range(0..classes.len() as ClassId);
        pred.labels.set(idx, label);
        let id = classes.is_thing(label).then(|| rng.random_range(1..6));
        pred.instance_ids.set(idx, id);
    }
    (pred, gt)
}

/// Two non-overlapping boxes of at most 3x3x3 voxels.
pub fn two_objects(rng: &mut ChaCha8Rng, s: &GridSpec) -> Vec<GroundTruthObject> {
    (0..2)
        .map(|i| {
            let ext: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=3));
            let x0 = if i == 0 {
                rng.random_range(0..2)
            } else {
                rng.random_range(5..7)
            };
            let y0 = rng.random_range(0..5);
            let z0 = rng.random_range(0..3);
            let mut voxels = Vec::new();
            for x in x0..x0 + ext[0] {
                for y in y0..y0 + ext[1] {
                    for z in z0..z0 + ext[2] {
                        voxels.push([x, y, z]);
                    }
                }
            }
            GroundTruthObject::from_voxels(s, rng.random_range(1..=3), i as u32 + 1, voxels)
                .unwrap()
        })
        .collect()
}

pub fn loss_with_frozen_matching(
    params: &PredictorParams,
    values: &[f64],
    gts: &[GroundTruthObject],
    matching: &MatchResult,
    cfg: &LossConfig,
) -> f64 {
    let tape = Tape::new();
    let leaves = tape.vars(values);
    let preds = params.forward(&tape, &leaves, None).unwrap();
    objects_loss_with_matching(&tape, &preds, gts, matching, cfg)
        .l_objects
        .value()
}

pub struct GradientCheck {
    pub params: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compares tape gradients of the objects loss against central differences
/// for a random free predictor (Q=4, K=27) and two objects, with the
/// matching computed once and then held fixed.
pub fn gradient_case(seed: u64) -> GradientCheck {
    let mut r = rng(seed);
    let s = spec([10, 10, 6]);
    let gts = two_objects(&mut r, &s);
    let mut params = PredictorParams::Free(FreeParams::init(4, 27, 6, &s, seed));
    let mut values = params.values();
    for v in &mut values {
        let n: f64 = StandardNormal.sample(&mut r);
        *v += 0.3 * n;
    }
    params.set_values(&values).unwrap();
    let cfg = LossConfig {
        anchor_mode: if seed.is_multiple_of(2) {
            AnchorMode::Decoupled
        } else {
            AnchorMode::Coupled
        },
        occupancy_form: if seed % 3 == 2 {
            OccupancyForm::NegLog
        } else {
            OccupancyForm::Focal
        },
        ..LossConfig::default()
    };
    let preds = params.predict(None).unwrap();
    let matching = compute_matching(&preds, &gts, &cfg).unwrap();

    let tape = Tape::new();
    let leaves = tape.vars(&values);
    let vars = params.forward(&tape, &leaves, None).unwrap();
    let loss = objects_loss_with_matching(&tape, &vars, &gts, &matching, &cfg);
    let analytic = tape.gradient(loss.l_objects).wrt_all(&leaves);

    let mut worst = (0.0, 0);
    for i in 0..values.len() {
        let h = 1e-5 * values[i].abs().max(1.0);
        let mut plus = values.clone();
        let mut minus = values.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (loss_with_frozen_matching(&params, &plus, &gts, &matching, &cfg)
            - loss_with_frozen_matching(&params, &minus, &gts, &matching, &cfg))
            / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    GradientCheck {
        params: values.len(),
        max_rel_err: worst.0,
        worst: params.describe(worst.1),
    }
}
