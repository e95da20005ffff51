//! Differentiable training losses for the object module.
//!
//! The objects loss is `l_det + l_occ` with
//! `l_det = λ1·l_cls + λ2·l_dist_center` and
//! `l_occ = λ3·l_focal_occ + λ4·l_dist_offsets`. Each component is a mean,
//! so magnitudes do not scale with the number of queries or offsets.
//! Matching is computed on plain values and held constant during backward.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::geom::Vec3;
use crate::matching::{self, ObjectAssignment, VoxelAssignment};
use crate::objects::{GroundTruthObject, ObjectPrediction};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.02,
            lambda3: 0.125,
            lambda4: 0.0125,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Where predicted offsets are anchored while computing the occupancy loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    /// Matched ground-truth center: shape learning ignores localization error.
    #[default]
    Decoupled,
    /// Predicted center, as at inference.
    Coupled,
}

/// Score term of the occupancy loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyForm {
    /// Focal loss with target 1 for offsets matched to a voxel, 0 otherwise.
    #[default]
    Focal,
    /// `-ln(score)` over all offsets regardless of the match.
    NegLog,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub focal: FocalParams,
    #[serde(default)]
    pub anchor_mode: AnchorMode,
    #[serde(default)]
    pub occupancy_form: OccupancyForm,
}

/// Binary focal loss `-α_t (1 - p_t)^γ ln(p_t)` on a probability.
pub fn focal_loss<'t>(p: Var<'t>, target: bool, params: FocalParams) -> Var<'t> {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, alpha_t) = if target {
        (pc, params.alpha)
    } else {
        (1.0 - pc, 1.0 - params.alpha)
    };
    (1.0 - pt).powf(params.gamma) * pt.ln() * -alpha_t
}

/// Plain-value focal loss, same formula as [`focal_loss`].
pub fn focal_loss_value(p: f64, target: bool, params: FocalParams) -> f64 {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, alpha_t) = if target {
        (pc, params.alpha)
    } else {
        (1.0 - pc, 1.0 - params.alpha)
    };
    -alpha_t * (1.0 - pt).powf(params.gamma) * pt.ln()
}

/// A prediction whose fields live on a tape.
#[derive(Clone, Debug)]
pub struct PredictionVars<'t> {
    pub class_logits: Vec<Var<'t>>,
    pub center: [Var<'t>; 3],
    pub offsets: Vec<[Var<'t>; 3]>,
    /// Already squashed into `(0, 1)`.
    pub scores: Vec<Var<'t>>,
}

impl<'t> PredictionVars<'t> {
    /// Leaves every field of `pred` on `tape` as an independent variable.
    pub fn leaves(tape: &'t Tape, pred: &ObjectPrediction) -> Self {
        Self {
            class_logits: tape.vars(&pred.class_logits),
            center: pred.center.map(|c| tape.var(c)),
            offsets: pred
                .offsets
                .iter()
                .map(|o| o.map(|c| tape.var(c)))
                .collect(),
            scores: tape.vars(&pred.scores),
        }
    }

    pub fn values(&self) -> ObjectPrediction {
        ObjectPrediction {
            class_logits: self.class_logits.iter().map(Var::value).collect(),
            center: self.center.map(|c| c.value()),
            offsets: self.offsets.iter().map(|o| o.map(|c| c.value())).collect(),
            scores: self.scores.iter().map(Var::value).collect(),
        }
    }
}

/// Both matching levels for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub objects: ObjectAssignment,
    /// One entry per matched `(prediction, ground truth)` pair, in prediction order.
    pub voxels: Vec<ObjectVoxelMatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectVoxelMatch {
    pub pred: usize,
    pub gt: usize,
    pub assignment: VoxelAssignment,
}

/// The point each offset is anchored to during training.
pub fn training_anchor(pred: &ObjectPrediction, gt: &GroundTruthObject, mode: AnchorMode) -> Vec3 {
    match mode {
        AnchorMode::Decoupled => gt.center,
        AnchorMode::Coupled => pred.center,
    }
}

pub fn compute_matching(
    preds: &[ObjectPrediction],
    gts: &[GroundTruthObject],
    cfg: &LossConfig,
) -> Result<MatchResult> {
    let objects = matching::match_objects(preds, gts, &cfg.weights)?;
    let voxels = objects
        .pairs()
        .map(|(i, j)| {
            let anchor = training_anchor(&preds[i], &gts[j], cfg.anchor_mode);
            Ok(ObjectVoxelMatch {
                pred: i,
                gt: j,
                assignment: matching::match_voxels(&preds[i], &gts[j], anchor)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchResult { objects, voxels })
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionTerms<'t> {
    pub l_cls: Var<'t>,
    pub l_dist_center: Var<'t>,
    pub l_det: Var<'t>,
}

/// Classification is a one-vs-all focal loss on the softmax probabilities,
/// summed over classes and averaged over all queries; unmatched queries
/// target the background class. The center term averages the Euclidean
/// center error over matched pairs only.
pub fn detection_loss<'t>(
    tape: &'t Tape,
    preds: &[PredictionVars<'t>],
    gts: &[GroundTruthObject],
    sigma_det: &[Option<usize>],
    cfg: &LossConfig,
) -> DetectionTerms<'t> {
    let mut per_query = Vec::with_capacity(preds.len());
    let mut center_errors = Vec::new();
    for (pred, target) in preds.iter().zip(sigma_det) {
        let target_class = target.map_or(crate::classes::EMPTY, |j| gts[j].class_id) as usize;
        let probs = tape.softmax(&pred.class_logits);
        let terms: Vec<Var> = probs
            .iter()
            .enumerate()
            .map(|(c, p)| focal_loss(*p, c == target_class, cfg.focal))
            .collect();
        per_query.push(tape.sum(&terms));
        if let Some(j) = target {
            let diff: Vec<Var> = (0..3).map(|a| pred.center[a] - gts[*j].center[a]).collect();
            center_errors.push(tape.norm(&diff));
        }
    }
    let l_cls = tape.mean(&per_query);
    let l_dist_center = tape.mean(&center_errors);
    let l_det = l_cls * cfg.weights.lambda1 + l_dist_center * cfg.weights.lambda2;
    DetectionTerms {
        l_cls,
        l_dist_center,
        l_det,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OccupancyTerms<'t> {
    pub l_focal: Var<'t>,
    pub l_dist: Var<'t>,
    pub l_occ: Var<'t>,
}

/// Occupancy loss of one matched pair for a fixed voxel assignment.
pub fn occupancy_loss<'t>(
    tape: &'t Tape,
    pred: &PredictionVars<'t>,
    gt: &GroundTruthObject,
    assignment: &VoxelAssignment,
    cfg: &LossConfig,
) -> OccupancyTerms<'t> {
    let mut score_terms = Vec::with_capacity(pred.scores.len());
    let mut distances = Vec::new();
    for (k, target) in assignment.sigma_occ.iter().enumerate() {
        let score = pred.scores[k];
        score_terms.push(match cfg.occupancy_form {
            OccupancyForm::Focal => focal_loss(score, target.is_some(), cfg.focal),
            OccupancyForm::NegLog => -score.clamp(PROB_EPS, 1.0).ln(),
        });
        if let Some(v) = target {
            let voxel = gt.voxel_centers[*v];
            let diff: Vec<Var> = (0..3)
                .map(|a| {
                    let point = match cfg.anchor_mode {
                        AnchorMode::Decoupled => pred.offsets[k][a] + gt.center[a],
                        AnchorMode::Coupled => pred.offsets[k][a] + pred.center[a],
                    };
                    point - voxel[a]
                })
                .collect();
            distances.push(tape.norm(&diff));
        }
    }
    let l_focal = tape.mean(&score_terms);
    let l_dist = tape.mean(&distances);
    let l_occ = l_focal * cfg.weights.lambda3 + l_dist * cfg.weights.lambda4;
    OccupancyTerms {
        l_focal,
        l_dist,
        l_occ,
    }
}

/// All loss components on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectsLoss<'t> {
    pub l_cls: Var<'t>,
    pub l_dist_center: Var<'t>,
    pub l_focal_occ: Var<'t>,
    pub l_dist_offsets: Var<'t>,
    pub l_det: Var<'t>,
    pub l_occ: Var<'t>,
    pub l_objects: Var<'t>,
}

impl ObjectsLoss<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_cls: self.l_cls.value(),
            l_dist_center: self.l_dist_center.value(),
            l_focal_occ: self.l_focal_occ.value(),
            l_dist_offsets: self.l_dist_offsets.value(),
            l_det: self.l_det.value(),
            l_occ: self.l_occ.value(),
            l_objects: self.l_objects.value(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_dist_center: f64,
    pub l_focal_occ: f64,
    pub l_dist_offsets: f64,
    pub l_det: f64,
    pub l_occ: f64,
    pub l_objects: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_cls,
            self.l_dist_center,
            self.l_focal_occ,
            self.l_dist_offsets,
            self.l_det,
            self.l_occ,
            self.l_objects,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Objects loss under a given matching. Occupancy components are averaged
/// over matched objects; with no objects they are exactly zero.
pub fn objects_loss_with_matching<'t>(
    tape: &'t Tape,
    preds: &[PredictionVars<'t>],
    gts: &[GroundTruthObject],
    matching: &MatchResult,
    cfg: &LossConfig,
) -> ObjectsLoss<'t> {
    let det = detection_loss(tape, preds, gts, &matching.objects.sigma_det, cfg);
    let mut focal = Vec::with_capacity(matching.voxels.len());
    let mut dist = Vec::with_capacity(matching.voxels.len());
    for m in &matching.voxels {
        let occ = occupancy_loss(tape, &preds[m.pred], &gts[m.gt], &m.assignment, cfg);
        focal.push(occ.l_focal);
        dist.push(occ.l_dist);
    }
    let l_focal_occ = tape.mean(&focal);
    let l_dist_offsets = tape.mean(&dist);
    let l_occ = l_focal_occ * cfg.weights.lambda3 + l_dist_offsets * cfg.weights.lambda4;
    let l_objects = det.l_det + l_occ;
    ObjectsLoss {
        l_cls: det.l_cls,
        l_dist_center: det.l_dist_center,
        l_focal_occ,
        l_dist_offsets,
        l_det: det.l_det,
        l_occ,
        l_objects,
    }
}

/// Matches, then evaluates the objects loss. `gts` should already be
/// filtered to trainable objects.
pub fn objects_loss<'t>(
    tape: &'t Tape,
    preds: &[PredictionVars<'t>],
    gts: &[GroundTruthObject],
    cfg: &LossConfig,
) -> Result<(ObjectsLoss<'t>, MatchResult)> {
    let values: Vec<ObjectPrediction> = preds.iter().map(PredictionVars::values).collect();
    let matching = compute_matching(&values, gts, cfg)?;
    let loss = objects_loss_with_matching(tape, preds, gts, &matching, cfg);
    Ok((loss, matching))
}

/// Loss breakdown of plain predictions; convenience for evaluation.
pub fn evaluate_objects_loss(
    preds: &[ObjectPrediction],
    gts: &[GroundTruthObject],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let vars: Vec<PredictionVars> = preds
        .iter()
        .map(|p| PredictionVars::leaves(&tape, p))
        .collect();
    let (loss, _) = objects_loss(&tape, &vars, gts, cfg)?;
    Ok(loss.breakdown())
}

pub const LOSS_CSV_HEADER: &str = "step,l_cls,l_dist_center,l_focal_occ,l_dist_offsets,l_objects";

pub fn loss_csv_row(step: usize, b: &LossBreakdown) -> String {
    format!(
        "{step},{},{},{},{},{}",
        b.l_cls, b.l_dist_center, b.l_focal_occ, b.l_dist_offsets, b.l_objects
    )
}

pub fn loss_csv(history: &[LossBreakdown]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for (step, b) in history.iter().enumerate() {
        out.push_str(&loss_csv_row(step, b));
        out.push('\n');
    }
    out
}
