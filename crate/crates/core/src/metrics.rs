//! Occupancy and panoptic evaluation: binary IoU, per-class IoU / mIoU
//! (optionally restricted to visible voxels) and panoptic quality with its
//! recognition and segmentation factors.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, ClassTable, EMPTY};
use crate::error::{Error, Result};
use crate::grid::{PanopticGrid, SemanticGrid, VisibilityMask};

/// Segments must overlap strictly more than this to count as a match.
pub const MATCH_IOU: f64 = 0.5;

/// What to do with classes that appear in neither grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassPolicy {
    #[default]
    Exclude,
    CountAsZero,
}

fn check_specs(a: &SemanticGrid, b: &SemanticGrid, mask: Option<&VisibilityMask>) -> Result<()> {
    if a.spec != b.spec || mask.is_some_and(|m| m.spec != a.spec) {
        return Err(Error::SpecMismatch);
    }
    Ok(())
}

fn in_mask(mask: Option<&VisibilityMask>, i: usize) -> bool {
    mask.is_none_or(|m| m.visible.as_slice()[i])
}

/// Occupied-vs-free IoU, ignoring classes. Both empty gives 1.
pub fn binary_iou(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    mask: Option<&VisibilityMask>,
) -> Result<f64> {
    check_specs(pred, gt, mask)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, (p, g)) in pred
        .labels
        .as_slice()
        .iter()
        .zip(gt.labels.as_slice())
        .enumerate()
    {
        if !in_mask(mask, i) {
            continue;
        }
        let (p, g) = (*p != EMPTY, *g != EMPTY);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanIou {
    pub per_class: BTreeMap<ClassId, f64>,
    pub miou: f64,
}

/// IoU of every non-empty class and their mean.
pub fn mean_iou(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    mask: Option<&VisibilityMask>,
    classes: &ClassTable,
    policy: AbsentClassPolicy,
) -> Result<MeanIou> {
    check_specs(pred, gt, mask)?;
    let n = classes.len();
    let mut inter = vec![0usize; n];
    let mut union = vec![0usize; n];
    for (i, (p, g)) in pred
        .labels
        .as_slice()
        .iter()
        .zip(gt.labels.as_slice())
        .enumerate()
    {
        if !in_mask(mask, i) {
            continue;
        }
        let (p, g) = (*p as usize, *g as usize);
        if p >= n || g >= n {
            return Err(Error::Format(format!(
                "label outside class table ({p}, {g})"
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    for c in 1..n {
        if union[c] > 0 {
            per_class.insert(c as ClassId, inter[c] as f64 / union[c] as f64);
        } else if policy == AbsentClassPolicy::CountAsZero {
            per_class.insert(c as ClassId, 0.0);
        }
    }
    let miou = if per_class.is_empty() {
        1.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(MeanIou { per_class, miou })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl ClassQuality {
    fn from_counts(tp: usize, fp: usize, fn_: usize, iou_sum: f64) -> Self {
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
        let (pq, rq) = if denom > 0.0 {
            (iou_sum / denom, tp as f64 / denom)
        } else {
            (0.0, 0.0)
        };
        Self {
            pq,
            sq,
            rq,
            tp,
            fp,
            fn_,
            iou_sum,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub per_class: BTreeMap<ClassId, ClassQuality>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub sq_things: f64,
    pub rq_things: f64,
    pub pq_stuff: f64,
    pub sq_stuff: f64,
    pub rq_stuff: f64,
}

/// Segment identity: things by instance id, stuff as one region per class.
type SegmentKey = (ClassId, Option<u32>);

fn segment_key(classes: &ClassTable, label: ClassId, id: Option<u32>) -> Option<SegmentKey> {
    if classes.is_stuff(label) {
        Some((label, None))
    } else if classes.is_thing(label) {
        id.map(|id| (label, Some(id)))
    } else {
        None
    }
}

/// Voxel areas of all segments and pairwise same-class intersections.
struct SegmentOverlap {
    pred_area: BTreeMap<SegmentKey, usize>,
    gt_area: BTreeMap<SegmentKey, usize>,
    inter: BTreeMap<(SegmentKey, SegmentKey), usize>,
}

impl SegmentOverlap {
    fn build(pred: &PanopticGrid, gt: &PanopticGrid, classes: &ClassTable) -> Self {
        let mut s = Self {
            pred_area: BTreeMap::new(),
            gt_area: BTreeMap::new(),
            inter: BTreeMap::new(),
        };
        let voxels = pred
            .labels
            .as_slice()
            .iter()
            .zip(pred.instance_ids.as_slice())
            .zip(gt.labels.as_slice().iter().zip(gt.instance_ids.as_slice()));
        for ((pl, pi), (gl, gi)) in voxels {
            let pk = segment_key(classes, *pl, *pi);
            let gk = segment_key(classes, *gl, *gi);
            if let Some(pk) = pk {
                *s.pred_area.entry(pk).or_default() += 1;
            }
            if let Some(gk) = gk {
                *s.gt_area.entry(gk).or_default() += 1;
            }
            if let (Some(pk), Some(gk)) = (pk, gk) {
                if pk.0 == gk.0 {
                    *s.inter.entry((pk, gk)).or_default() += 1;
                }
            }
        }
        s
    }

    fn iou(&self, pk: SegmentKey, gk: SegmentKey, inter: usize) -> f64 {
        let union = self.pred_area[&pk] + self.gt_area[&gk] - inter;
        inter as f64 / union as f64
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Panoptic quality over all classes present in either grid.
///
/// A predicted and a ground-truth segment of the same class match when their
/// voxel IoU is strictly above 0.5; such a match is necessarily unique.
/// Segments are keyed by `(class, id)`, so an id spread over two thing
/// classes forms two segments. Thing voxels without an instance id belong
/// to no segment. Averages over an empty class set are reported as 1.
pub fn panoptic_quality(
    pred: &PanopticGrid,
    gt: &PanopticGrid,
    classes: &ClassTable,
) -> Result<PanopticQuality> {
    if pred.spec != gt.spec {
        return Err(Error::SpecMismatch);
    }
    pred.validate_placement(classes)?;
    gt.validate_placement(classes)?;
    let overlap = SegmentOverlap::build(pred, gt, classes);

    let mut matched_pred = BTreeSet::new();
    let mut matched_gt = BTreeSet::new();
    let mut tp: BTreeMap<ClassId, (usize, f64)> = BTreeMap::new();
    for (&(pk, gk), &inter) in &overlap.inter {
        let iou = overlap.iou(pk, gk, inter);
        if iou > MATCH_IOU {
            debug_assert!(!matched_pred.contains(&pk) && !matched_gt.contains(&gk));
            matched_pred.insert(pk);
            matched_gt.insert(gk);
            let e = tp.entry(pk.0).or_default();
            e.0 += 1;
            e.1 += iou;
        }
    }

    let present: BTreeSet<ClassId> = overlap
        .pred_area
        .keys()
        .chain(overlap.gt_area.keys())
        .map(|k| k.0)
        .collect();
    let mut per_class = BTreeMap::new();
    for c in present {
        let fp = overlap
            .pred_area
            .keys()
            .filter(|k| k.0 == c && !matched_pred.contains(*k))
            .count();
        let fn_ = overlap
            .gt_area
            .keys()
            .filter(|k| k.0 == c && !matched_gt.contains(*k))
            .count();
        let (n_tp, iou_sum) = tp.get(&c).copied().unwrap_or_default();
        per_class.insert(c, ClassQuality::from_counts(n_tp, fp, fn_, iou_sum));
    }

    let split = |keep: &dyn Fn(ClassId) -> bool| {
        let sel: Vec<&ClassQuality> = per_class
            .iter()
            .filter(|(c, _)| keep(**c))
            .map(|(_, q)| q)
            .collect();
        (
            mean_of(sel.iter().map(|q| q.pq)),
            mean_of(sel.iter().map(|q| q.sq)),
            mean_of(sel.iter().map(|q| q.rq)),
        )
    };
    let (pq, sq, rq) = split(&|_| true);
    let (pq_things, sq_things, rq_things) = split(&|c| classes.is_thing(c));
    let (pq_stuff, sq_stuff, rq_stuff) = split(&|c| classes.is_stuff(c));
    Ok(PanopticQuality {
        per_class,
        pq,
        sq,
        rq,
        pq_things,
        sq_things,
        rq_things,
        pq_stuff,
        sq_stuff,
        rq_stuff,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub masked: bool,
    pub iou: f64,
    pub miou: f64,
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
    pub pq_things: f64,
    pub rq_things: f64,
    pub sq_things: f64,
    pub pq_stuff: f64,
    pub rq_stuff: f64,
    pub sq_stuff: f64,
}

/// All metrics for one prediction. IoU and mIoU honor `mask`; panoptic
/// quality always uses the full grid.
pub fn evaluate(
    pred: &PanopticGrid,
    gt: &PanopticGrid,
    classes: &ClassTable,
    mask: Option<&VisibilityMask>,
    policy: AbsentClassPolicy,
) -> Result<EvalReport> {
    let (ps, gs) = (pred.semantic(), gt.semantic());
    let iou = binary_iou(&ps, &gs, mask)?;
    let m = mean_iou(&ps, &gs, mask, classes, policy)?;
    let q = panoptic_quality(pred, gt, classes)?;
    Ok(EvalReport {
        masked: mask.is_some(),
        iou,
        miou: m.miou,
        per_class_iou: m.per_class,
        pq: q.pq,
        rq: q.rq,
        sq: q.sq,
        pq_things: q.pq_things,
        rq_things: q.rq_things,
        sq_things: q.sq_things,
        pq_stuff: q.pq_stuff,
        rq_stuff: q.rq_stuff,
        sq_stuff: q.sq_stuff,
    })
}

/// Fixed column order: summary metrics, then `iou_<class>` for every
/// non-empty class in table order (blank when the class was excluded).
pub fn report_csv_header(classes: &ClassTable) -> String {
    let mut cols: Vec<String> = [
        "masked",
        "iou",
        "miou",
        "pq",
        "rq",
        "sq",
        "pq_things",
        "rq_things",
        "sq_things",
        "pq_stuff",
        "rq_stuff",
        "sq_stuff",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for c in 1..classes.len() {
        cols.push(format!("iou_{}", classes.name(c as ClassId).unwrap_or("?")));
    }
    cols.join(",")
}

pub fn report_csv_row(r: &EvalReport, classes: &ClassTable) -> String {
    let mut cols = vec![
        r.masked.to_string(),
        r.iou.to_string(),
        r.miou.to_string(),
        r.pq.to_string(),
        r.rq.to_string(),
        r.sq.to_string(),
        r.pq_things.to_string(),
        r.rq_things.to_string(),
        r.sq_things.to_string(),
        r.pq_stuff.to_string(),
        r.rq_stuff.to_string(),
        r.sq_stuff.to_string(),
    ];
    for c in 1..classes.len() {
        cols.push(
            r.per_class_iou
                .get(&(c as ClassId))
                .map_or(String::new(), f64::to_string),
        );
    }
    cols.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid3, GridSpec};

    fn spec() -> GridSpec {
        GridSpec::new([0.0; 3], [0.4; 3], [10, 4, 2]).unwrap()
    }

    fn grid_with(cells: &[([usize; 3], ClassId)]) -> SemanticGrid {
        let mut g = SemanticGrid::empty(spec());
        for (i, c) in cells {
            g.labels.set(*i, *c);
        }
        g
    }

    fn pan_with(cells: &[([usize; 3], ClassId, Option<u32>)]) -> PanopticGrid {
        let mut p = PanopticGrid::from_semantic(&SemanticGrid::empty(spec()));
        for (i, c, id) in cells {
            p.labels.set(*i, *c);
            p.instance_ids.set(*i, *id);
        }
        p
    }

    #[test]
    fn binary_iou_examples() {
        let a = grid_with(&[([0, 0, 0], 1), ([1, 0, 0], 4)]);
        assert_eq!(binary_iou(&a, &a, None).unwrap(), 1.0);
        let b = grid_with(&[([5, 0, 0], 1)]);
        let c = grid_with(&[([6, 0, 0], 1)]);
        assert_eq!(binary_iou(&b, &c, None).unwrap(), 0.0);
        let d = grid_with(&[([1, 0, 0], 2), ([2, 0, 0], 2)]);
        assert!((binary_iou(&a, &d, None).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = SemanticGrid::empty(spec());
        assert_eq!(binary_iou(&e, &e, None).unwrap(), 1.0);
    }

    #[test]
    fn miou_examples() {
        let classes = ClassTable::street();
        let gt = grid_with(&[([0, 0, 0], 1), ([1, 0, 0], 4)]);
        let m = mean_iou(&gt, &gt, None, &classes, AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.per_class.len(), 2);

        // class 4 predicted as class 5 at the same voxel: classes 1, 4, 5 present -> (1 + 0 + 0) / 3
        let pred = grid_with(&[([0, 0, 0], 1), ([1, 0, 0], 5)]);
        let m = mean_iou(&pred, &gt, None, &classes, AbsentClassPolicy::Exclude).unwrap();
        assert!((m.miou - 1.0 / 3.0).abs() < 1e-15);

        // one of two present classes wholly wrong: class 4 predicted as class 1
        let gt2 = grid_with(&[
            ([0, 0, 0], 1),
            ([1, 0, 0], 1),
            ([2, 0, 0], 4),
            ([3, 0, 0], 4),
        ]);
        let pred2 = grid_with(&[
            ([0, 0, 0], 1),
            ([1, 0, 0], 1),
            ([2, 0, 0], 1),
            ([3, 0, 0], 1),
        ]);
        let m = mean_iou(&pred2, &gt2, None, &classes, AbsentClassPolicy::Exclude).unwrap();
        assert!((m.per_class[&1] - 0.5).abs() < 1e-15);
        assert_eq!(m.per_class[&4], 0.0);
        assert!((m.miou - 0.25).abs() < 1e-15);

        let z = mean_iou(&gt, &gt, None, &classes, AbsentClassPolicy::CountAsZero).unwrap();
        assert_eq!(z.per_class.len(), 5);
        assert!((z.miou - 2.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn mask_hides_errors() {
        let classes = ClassTable::street();
        let gt = grid_with(&[([0, 0, 0], 1), ([9, 3, 1], 2)]);
        let pred = grid_with(&[([0, 0, 0], 1), ([9, 3, 1], 3)]);
        let mut mask = VisibilityMask::all_visible(spec());
        mask.visible.set([9, 3, 1], false);
        let masked = mean_iou(
            &pred,
            &gt,
            Some(&mask),
            &classes,
            AbsentClassPolicy::Exclude,
        )
        .unwrap();
        let open = mean_iou(&pred, &gt, None, &classes, AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(masked.miou, 1.0);
        assert!(open.miou < 1.0);
    }

    #[test]
    fn identical_panoptic_is_perfect() {
        let classes = ClassTable::street();
        let g = pan_with(&[
            ([0, 0, 0], 1, Some(1)),
            ([1, 0, 0], 1, Some(1)),
            ([3, 0, 0], 1, Some(2)),
            ([5, 0, 0], 2, Some(3)),
            ([0, 3, 0], 4, None),
        ]);
        let q = panoptic_quality(&g, &g, &classes).unwrap();
        assert_eq!((q.pq, q.rq, q.sq), (1.0, 1.0, 1.0));
        assert_eq!(q.per_class[&1].tp, 2);
    }

    #[test]
    fn iou_exactly_half_is_not_a_match() {
        let classes = ClassTable::street();
        // gt {0,1}, pred {1,2}: |∩| = 1, |∪| = 3; gt {0,1,2,3}, pred {2,3}: IoU 0.5
        let gt = pan_with(&[
            ([0, 0, 0], 1, Some(1)),
            ([1, 0, 0], 1, Some(1)),
            ([2, 0, 0], 1, Some(1)),
            ([3, 0, 0], 1, Some(1)),
        ]);
        let pred = pan_with(&[([2, 0, 0], 1, Some(5)), ([3, 0, 0], 1, Some(5))]);
        let q = panoptic_quality(&pred, &gt, &classes).unwrap();
        let c = q.per_class[&1];
        assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
        assert_eq!(c.pq, 0.0);
    }

    #[test]
    fn worked_example_one_hit_one_miss() {
        let classes = ClassTable::street();
        // instance 1: 5 voxels, prediction covers 4 of them (IoU 0.8); instance 2 missed
        let mut gt_cells: Vec<_> = (0..5).map(|x| ([x, 0, 0], 1, Some(1))).collect();
        gt_cells.push(([8, 2, 0], 1, Some(2)));
        let gt = pan_with(&gt_cells);
        let pred = pan_with(&(0..4).map(|x| ([x, 0, 0], 1, Some(3))).collect::<Vec<_>>());
        let q = panoptic_quality(&pred, &gt, &classes).unwrap();
        let c = q.per_class[&1];
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 1));
        assert!((c.pq - 0.8 / 1.5).abs() < 1e-15);
        assert!((c.sq - 0.8).abs() < 1e-15);
        assert!((c.rq - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_panoptic_reported() {
        let classes = ClassTable::street();
        let bad = pan_with(&[([0, 0, 0], 4, Some(1))]);
        assert!(matches!(
            panoptic_quality(&bad, &bad, &classes),
            Err(Error::InvalidPanoptic(_))
        ));
        let other = PanopticGrid {
            spec: GridSpec::new([0.0; 3], [0.4; 3], [1, 1, 1]).unwrap(),
            labels: Grid3::filled([1, 1, 1], 0),
            instance_ids: Grid3::filled([1, 1, 1], None),
        };
        assert!(matches!(
            panoptic_quality(&other, &bad, &classes),
            Err(Error::SpecMismatch)
        ));
    }

    #[test]
    fn csv_columns_line_up() {
        let classes = ClassTable::street();
        let g = pan_with(&[([0, 0, 0], 1, Some(1))]);
        let r = evaluate(&g, &g, &classes, None, AbsentClassPolicy::Exclude).unwrap();
        let header = report_csv_header(&classes);
        let row = report_csv_row(&r, &classes);
        assert_eq!(header.split(',').count(), row.split(',').count());
        assert!(header.starts_with("masked,iou,miou,pq,rq,sq"));
    }
}
