//! Learnable prediction parameters and the two predictors built on them.
//!
//! Both parameter kinds expose a flat view (`values` / `set_values`) in a
//! fixed order so the optimizer can treat them uniformly, and a `forward`
//! that rebuilds the same flat order as tape leaves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::classes::{ClassId, EMPTY};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::grid::GridSpec;
use crate::losses::PredictionVars;
use crate::objects::{GroundTruthObject, ObjectPrediction};
use crate::scene::FeatureGrid;

/// Logit magnitude used for confident oracle outputs.
pub const ORACLE_LOGIT: f64 = 20.0;

const INIT_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeQuery {
    pub class_logits: Vec<f64>,
    pub center: Vec3,
    pub offsets: Vec<Vec3>,
    pub score_logits: Vec<f64>,
}

/// Independent parameters for every query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeParams {
    pub queries: Vec<FreeQuery>,
}

/// `outputs = weights · inputs + bias`, weights stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    fn init(inputs: usize, outputs: usize, std: f64, bias: Vec<f64>, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias,
        }
    }

    fn zeroed(&mut self) {
        self.weights.iter_mut().for_each(|w| *w = 0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    fn apply<'t>(
        &self,
        tape: &'t Tape,
        leaves: &HeadLeaves<'t>,
        input: &[Var<'t>],
    ) -> Vec<Var<'t>> {
        (0..self.outputs)
            .map(|o| {
                tape.affine(
                    &leaves.weights[o * self.inputs..(o + 1) * self.inputs],
                    input,
                    leaves.bias[o],
                )
            })
            .collect()
    }
}

struct HeadLeaves<'t> {
    weights: Vec<Var<'t>>,
    bias: Vec<Var<'t>>,
}

/// Shared linear heads applied to trilinearly sampled voxel features,
/// starting from a learnable center per query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub refine_steps: usize,
    pub init_centers: Vec<Vec3>,
    pub center_head: LinearHead,
    pub class_head: LinearHead,
    pub offset_head: LinearHead,
    pub score_head: LinearHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum PredictorParams {
    Free(FreeParams),
    Sampling(SamplingParams),
}

/// Pops leaves off the front of a slice in parameter order.
struct Cursor<'a, 't> {
    leaves: &'a [Var<'t>],
}

impl<'t> Cursor<'_, 't> {
    fn take(&mut self, n: usize) -> Vec<Var<'t>> {
        let (head, rest) = self.leaves.split_at(n);
        self.leaves = rest;
        head.to_vec()
    }

    fn take3(&mut self) -> [Var<'t>; 3] {
        let v = self.take(3);
        [v[0], v[1], v[2]]
    }

    fn take_head(&mut self, h: &LinearHead) -> HeadLeaves<'t> {
        HeadLeaves {
            weights: self.take(h.inputs * h.outputs),
            bias: self.take(h.outputs),
        }
    }
}

/// A jittered regular lattice of `k` offsets spanning [-2, 2] voxels per axis.
pub fn lattice_offsets(k: usize, voxel_size: Vec3, rng: &mut impl Rng) -> Vec<Vec3> {
    let mut n = 1;
    while n * n * n < k {
        n += 1;
    }
    let spacing = if n > 1 { 4.0 / (n - 1) as f64 } else { 0.0 };
    let jitter = 0.1 * spacing;
    (0..k)
        .map(|i| {
            let cell = [i % n, (i / n) % n, i / (n * n)];
            std::array::from_fn(|a| {
                let base = if n > 1 {
                    -2.0 + cell[a] as f64 * spacing
                } else {
                    0.0
                };
                let j = if jitter > 0.0 {
                    rng.random_range(-jitter..jitter)
                } else {
                    0.0
                };
                (base + j) * voxel_size[a]
            })
        })
        .collect()
}

fn uniform_center(spec: &GridSpec, rng: &mut impl Rng) -> Vec3 {
    let (lo, hi) = spec.bounds();
    std::array::from_fn(|a| rng.random_range(lo[a]..hi[a]))
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

impl FreeParams {
    /// Uniform class logits, score logits 0, lattice offsets and centers
    /// drawn uniformly over the grid.
    pub fn init(q: usize, k: usize, num_classes: usize, spec: &GridSpec, seed: u64) -> Self {
        let mut rng = init_rng(seed);
        let queries = (0..q)
            .map(|_| {
                let center = uniform_center(spec, &mut rng);
                FreeQuery {
                    class_logits: vec![0.0; num_classes],
                    center,
                    offsets: lattice_offsets(k, spec.voxel_size, &mut rng),
                    score_logits: vec![0.0; k],
                }
            })
            .collect();
        Self { queries }
    }

    /// Parameters that reproduce the ground truth: query `i` predicts object
    /// `i` with confident logits and one active offset per voxel. Remaining
    /// queries predict the empty class with all offsets inactive.
    pub fn oracle(
        objects: &[GroundTruthObject],
        q: usize,
        k: usize,
        num_classes: usize,
        spec: &GridSpec,
    ) -> Result<Self> {
        if objects.len() > q {
            return Err(Error::TooFewPredictions {
                predictions: q,
                targets: objects.len(),
            });
        }
        let (lo, hi) = spec.bounds();
        let idle_center = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
        let mut queries = Vec::with_capacity(q);
        for i in 0..q {
            let (class, center, targets): (ClassId, Vec3, &[Vec3]) = match objects.get(i) {
                Some(o) => (o.class_id, o.center, &o.voxel_centers),
                None => (EMPTY, idle_center, &[]),
            };
            if targets.len() > k {
                return Err(Error::TooFewOffsets {
                    offsets: k,
                    voxels: targets.len(),
                });
            }
            let mut class_logits = vec![0.0; num_classes];
            class_logits[class as usize] = ORACLE_LOGIT;
            let mut offsets = vec![[0.0; 3]; k];
            let mut score_logits = vec![-ORACLE_LOGIT; k];
            for (slot, v) in targets.iter().enumerate() {
                offsets[slot] = geom::sub(*v, center);
                score_logits[slot] = ORACLE_LOGIT;
            }
            queries.push(FreeQuery {
                class_logits,
                center,
                offsets,
                score_logits,
            });
        }
        Ok(Self { queries })
    }
}

impl SamplingParams {
    pub fn init(
        q: usize,
        k: usize,
        num_classes: usize,
        feature_dim: usize,
        refine_steps: usize,
        spec: &GridSpec,
        seed: u64,
    ) -> Self {
        let mut rng = init_rng(seed);
        let init_centers = (0..q).map(|_| uniform_center(spec, &mut rng)).collect();
        let lattice: Vec<f64> = lattice_offsets(k, spec.voxel_size, &mut rng)
            .into_iter()
            .flatten()
            .collect();
        let std = 0.01;
        Self {
            refine_steps,
            init_centers,
            center_head: LinearHead::init(feature_dim, 3, std, vec![0.0; 3], &mut rng),
            class_head: LinearHead::init(
                feature_dim,
                num_classes,
                std,
                vec![0.0; num_classes],
                &mut rng,
            ),
            offset_head: LinearHead::init(feature_dim, 3 * k, std, lattice, &mut rng),
            score_head: LinearHead::init(feature_dim, k, std, vec![0.0; k], &mut rng),
        }
    }

    /// Sets every head weight and bias to zero.
    pub fn zero_heads(&mut self) {
        for h in [
            &mut self.center_head,
            &mut self.class_head,
            &mut self.offset_head,
            &mut self.score_head,
        ] {
            h.zeroed();
        }
    }

    fn heads(&self) -> [&LinearHead; 4] {
        [
            &self.center_head,
            &self.class_head,
            &self.offset_head,
            &self.score_head,
        ]
    }
}

/// Trilinear interpolation of the feature grid at a world point. The point
/// is clamped to the lattice of voxel centers first.
pub fn sample_features<'t>(
    tape: &'t Tape,
    features: &FeatureGrid,
    point: [Var<'t>; 3],
) -> Vec<Var<'t>> {
    let spec = features.spec;
    let mut base = [0usize; 3];
    let mut next = [0usize; 3];
    let mut frac: Vec<Var<'t>> = Vec::with_capacity(3);
    for a in 0..3 {
        let n = spec.dims[a];
        let u = ((point[a] - spec.origin[a]) / spec.voxel_size[a] - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.value().floor() as usize).min(n.saturating_sub(2));
        base[a] = i0;
        next[a] = (i0 + 1).min(n - 1);
        frac.push(u - i0 as f64);
    }
    let mut weights = Vec::with_capacity(8);
    let mut corners = Vec::with_capacity(8);
    for c in 0..8 {
        let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        let mut w: Option<Var<'t>> = None;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let factor = if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            w = Some(match w {
                None => factor,
                Some(prev) => prev * factor,
            });
            idx[a] = if bits[a] == 1 { next[a] } else { base[a] };
        }
        weights.push(w.expect("three factors"));
        corners.push(features.at(idx));
    }
    (0..features.dim)
        .map(|d| {
            let coeffs: Vec<f64> = corners.iter().map(|f| f[d]).collect();
            tape.weighted_sum(&weights, &coeffs)
        })
        .collect()
}

impl PredictorParams {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Free(_) => "free",
            Self::Sampling(_) => "sampling",
        }
    }

    /// Named segments of the flat parameter vector, in order.
    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        match self {
            Self::Free(p) => {
                for (i, q) in p.queries.iter().enumerate() {
                    out.push((format!("query[{i}].class_logits"), q.class_logits.len()));
                    out.push((format!("query[{i}].center"), 3));
                    out.push((format!("query[{i}].offsets"), 3 * q.offsets.len()));
                    out.push((format!("query[{i}].score_logits"), q.score_logits.len()));
                }
            }
            Self::Sampling(p) => {
                out.push(("init_centers".to_string(), 3 * p.init_centers.len()));
                for (name, h) in ["center_head", "class_head", "offset_head", "score_head"]
                    .iter()
                    .zip(p.heads())
                {
                    out.push((format!("{name}.weights"), h.weights.len()));
                    out.push((format!("{name}.bias"), h.bias.len()));
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, n)| n).sum()
    }

    /// Human-readable name of flat parameter `index`.
    pub fn describe(&self, index: usize) -> String {
        let mut start = 0;
        for (name, len) in self.layout() {
            if index < start + len {
                return format!("{name}[{}]", index - start);
            }
            start += len;
        }
        format!("<out of range {index}>")
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match self {
            Self::Free(p) => {
                for q in &mut p.queries {
                    out.push(&mut q.class_logits);
                    out.push(&mut q.center);
                    out.push(q.offsets.as_flattened_mut());
                    out.push(&mut q.score_logits);
                }
            }
            Self::Sampling(p) => {
                out.push(p.init_centers.as_flattened_mut());
                for h in [
                    &mut p.center_head,
                    &mut p.class_head,
                    &mut p.offset_head,
                    &mut p.score_head,
                ] {
                    out.push(&mut h.weights);
                    out.push(&mut h.bias);
                }
            }
        }
        out
    }

    pub fn values(&self) -> Vec<f64> {
        self.clone()
            .slices_mut()
            .into_iter()
            .flat_map(|s| s.to_vec())
            .collect()
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_params();
        if values.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: values.len(),
            });
        }
        let mut rest = values;
        for s in self.slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Builds predictions on `tape` from `leaves`, which must follow the
    /// order of [`PredictorParams::values`].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        leaves: &[Var<'t>],
        features: Option<&FeatureGrid>,
    ) -> Result<Vec<PredictionVars<'t>>> {
        let mut cur = Cursor { leaves };
        match self {
            Self::Free(p) => Ok(p
                .queries
                .iter()
                .map(|q| {
                    let class_logits = cur.take(q.class_logits.len());
                    let center = cur.take3();
                    let offsets = (0..q.offsets.len()).map(|_| cur.take3()).collect();
                    let scores = cur
                        .take(q.score_logits.len())
                        .into_iter()
                        .map(Var::sigmoid)
                        .collect();
                    PredictionVars {
                        class_logits,
                        center,
                        offsets,
                        scores,
                    }
                })
                .collect()),
            Self::Sampling(p) => {
                let features = features.ok_or_else(|| {
                    Error::InvalidConfig("the sampling predictor needs a feature grid".into())
                })?;
                if features.dim != p.center_head.inputs {
                    return Err(Error::ShapeMismatch {
                        expected: p.center_head.inputs,
                        got: features.dim,
                    });
                }
                if p.refine_steps == 0 {
                    return Err(Error::InvalidConfig(
                        "refine_steps must be at least 1".into(),
                    ));
                }
                let centers: Vec<[Var<'t>; 3]> =
                    (0..p.init_centers.len()).map(|_| cur.take3()).collect();
                let heads = p.heads().map(|h| cur.take_head(h));
                Ok(centers
                    .into_iter()
                    .map(|mut center| {
                        let mut out = None;
                        for _ in 0..p.refine_steps {
                            let f = sample_features(tape, features, center);
                            let delta = p.center_head.apply(tape, &heads[0], &f);
                            out = Some((
                                p.class_head.apply(tape, &heads[1], &f),
                                p.offset_head.apply(tape, &heads[2], &f),
                                p.score_head.apply(tape, &heads[3], &f),
                            ));
                            center = [
                                center[0] + delta[0],
                                center[1] + delta[1],
                                center[2] + delta[2],
                            ];
                        }
                        let (class_logits, offsets, score_logits) = out.expect("at least one step");
                        PredictionVars {
                            class_logits,
                            center,
                            offsets: offsets.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
                            scores: score_logits.into_iter().map(Var::sigmoid).collect(),
                        }
                    })
                    .collect())
            }
        }
    }

    /// Plain-value predictions.
    pub fn predict(&self, features: Option<&FeatureGrid>) -> Result<Vec<ObjectPrediction>> {
        match self {
            Self::Free(p) => Ok(predict_free(p)),
            Self::Sampling(p) => predict_sampling(
                p,
                features.ok_or_else(|| {
                    Error::InvalidConfig("the sampling predictor needs a feature grid".into())
                })?,
            ),
        }
    }
}

/// Softmax is left to consumers; scores go through a sigmoid.
pub fn predict_free(params: &FreeParams) -> Vec<ObjectPrediction> {
    params
        .queries
        .iter()
        .map(|q| ObjectPrediction {
            class_logits: q.class_logits.clone(),
            center: q.center,
            offsets: q.offsets.clone(),
            scores: q.score_logits.iter().map(|s| sigmoid(*s)).collect(),
        })
        .collect()
}

pub fn predict_sampling(
    params: &SamplingParams,
    features: &FeatureGrid,
) -> Result<Vec<ObjectPrediction>> {
    let wrapped = PredictorParams::Sampling(params.clone());
    let tape = Tape::new();
    let leaves = tape.vars(&wrapped.values());
    let preds = wrapped.forward(&tape, &leaves, Some(features))?;
    Ok(preds.iter().map(PredictionVars::values).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objects::softmax;

    fn spec() -> GridSpec {
        GridSpec::new([-2.0, -2.0, 0.0], [0.4; 3], [10, 10, 4]).unwrap()
    }

    #[test]
    fn free_outputs_basic() {
        let p = FreeParams::init(3, 8, 6, &spec(), 1);
        let preds = predict_free(&p);
        assert_eq!(preds.len(), 3);
        assert!(preds.iter().all(|p| p.scores.iter().all(|s| *s == 0.5)));
        let probs = softmax(&preds[0].class_logits);
        assert!(probs.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        let (lo, hi) = spec().bounds();
        for q in &p.queries {
            assert!((0..3).all(|a| q.center[a] >= lo[a] && q.center[a] < hi[a]));
        }
    }

    #[test]
    fn lattice_spans_two_voxels() {
        let mut rng = init_rng(0);
        let offs = lattice_offsets(125, [0.4; 3], &mut rng);
        assert_eq!(offs.len(), 125);
        for o in &offs {
            assert!(o.iter().all(|c| c.abs() <= 0.4 * 2.1 + 1e-12));
        }
        assert!((offs[0][0] + 0.8).abs() <= 0.04 + 1e-12);
        assert!((offs[124][2] - 0.8).abs() <= 0.04 + 1e-12);
    }

    #[test]
    fn flat_round_trip_and_names() {
        let mut p = PredictorParams::Free(FreeParams::init(2, 4, 6, &spec(), 3));
        let v = p.values();
        assert_eq!(v.len(), p.num_params());
        assert_eq!(v.len(), 2 * (6 + 3 + 12 + 4));
        let doubled: Vec<f64> = v.iter().map(|x| x * 2.0).collect();
        p.set_values(&doubled).unwrap();
        assert_eq!(p.values(), doubled);
        assert_eq!(p.describe(6), "query[0].center[0]");
        assert_eq!(p.describe(25 + 9 + 12 + 1), "query[1].score_logits[1]");
        assert!(p.set_values(&v[1..]).is_err());

        let s = PredictorParams::Sampling(SamplingParams::init(2, 4, 6, 5, 2, &spec(), 3));
        assert_eq!(s.values().len(), s.num_params());
        assert_eq!(s.describe(6), "center_head.weights[0]");
    }

    #[test]
    fn free_forward_matches_plain_prediction_and_gradients() {
        let params = PredictorParams::Free(FreeParams::init(2, 3, 4, &spec(), 9));
        let values = params.values();
        let plain = params.predict(None).unwrap();
        let tape = Tape::new();
        let leaves = tape.vars(&values);
        let vars = params.forward(&tape, &leaves, None).unwrap();
        assert_eq!(
            vars.iter().map(PredictionVars::values).collect::<Vec<_>>(),
            plain
        );

        // d score / d score_logit against central differences
        let out = vars[1].scores[2] * 3.0 + vars[0].offsets[1][2];
        let g = tape.gradient(out).wrt_all(&leaves);
        let f = |v: &[f64]| {
            let mut p = params.clone();
            p.set_values(v).unwrap();
            let pr = p.predict(None).unwrap();
            pr[1].scores[2] * 3.0 + pr[0].offsets[1][2]
        };
        let h = 1e-6;
        for i in 0..values.len() {
            let mut a = values.clone();
            let mut b = values.clone();
            a[i] += h;
            b[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6);
            assert!(
                rel < 1e-6,
                "param {} analytic {} numeric {num}",
                params.describe(i),
                g[i]
            );
        }
    }

    #[test]
    fn oracle_reproduces_objects() {
        let s = spec();
        let gt = GroundTruthObject::from_voxels(&s, 2, 1, vec![[1, 1, 1], [2, 1, 1]]).unwrap();
        let p = FreeParams::oracle(std::slice::from_ref(&gt), 3, 4, 6, &s).unwrap();
        let preds = predict_free(&p);
        assert_eq!(preds[0].top_class().0, 2);
        assert_eq!(preds[1].top_class().0, EMPTY);
        let active: Vec<Vec3> = preds[0]
            .offsets
            .iter()
            .zip(&preds[0].scores)
            .filter(|(_, s)| **s >= 0.5)
            .map(|(o, _)| geom::add(preds[0].center, *o))
            .collect();
        assert_eq!(active.len(), 2);
        assert!(FreeParams::oracle(std::slice::from_ref(&gt), 3, 1, 6, &s).is_err());
        assert!(FreeParams::oracle(std::slice::from_ref(&gt), 0, 4, 6, &s).is_err());
    }

    #[test]
    fn zero_heads_keep_centers() {
        let s = spec();
        let mut p = SamplingParams::init(3, 4, 6, 5, 3, &s, 2);
        p.zero_heads();
        let feats = FeatureGrid::from_fn(s, 5, |idx, d| {
            (idx[0] * 7 + idx[1] * 3 + idx[2] + d) as f64 * 0.1
        });
        let preds = predict_sampling(&p, &feats).unwrap();
        for (pred, c) in preds.iter().zip(&p.init_centers) {
            assert_eq!(pred.center, *c);
        }
    }

    #[test]
    fn constant_features_give_identical_queries() {
        let s = spec();
        let mut p = SamplingParams::init(3, 4, 6, 5, 2, &s, 2);
        p.init_centers = vec![[0.3, 0.1, 0.7]; 3];
        let feats = FeatureGrid::constant(s, 5, 0.7);
        let preds = predict_sampling(&p, &feats).unwrap();
        assert_eq!(preds[0], preds[1]);
        assert_eq!(preds[1], preds[2]);
    }

    #[test]
    fn sampling_interpolates_linearly_between_centers() {
        let s = spec();
        let feats = FeatureGrid::from_fn(s, 1, |idx, _| idx[0] as f64);
        let tape = Tape::new();
        // voxel coordinate u = 3.25 along x
        let x = s.origin[0] + (3.25 + 0.5) * 0.4;
        let p = [tape.var(x), tape.var(0.1), tape.var(0.5)];
        let f = sample_features(&tape, &feats, p);
        assert!((f[0].value() - 3.25).abs() < 1e-12);
        let g = tape.gradient(f[0]);
        assert!((g.wrt(p[0]) - 1.0 / 0.4).abs() < 1e-9);
        // clamped outside the grid
        let far = [tape.var(100.0), tape.var(0.1), tape.var(0.5)];
        let f = sample_features(&tape, &feats, far);
        assert!((f[0].value() - 9.0).abs() < 1e-12);
        assert_eq!(tape.gradient(f[0]).wrt(far[0]), 0.0);
    }

    #[test]
    fn sampling_head_gradient_matches_finite_differences() {
        let s = spec();
        let params = PredictorParams::Sampling(SamplingParams::init(2, 3, 4, 3, 2, &s, 5));
        let feats = FeatureGrid::from_fn(s, 3, |idx, d| {
            ((idx[0] as f64 * 0.37 + idx[1] as f64 * 0.11 + idx[2] as f64 * 0.23 + d as f64).sin())
                * 0.5
        });
        let objective = |preds: &[ObjectPrediction]| -> f64 {
            preds
                .iter()
                .map(|p| {
                    p.center.iter().sum::<f64>() + p.scores.iter().sum::<f64>() + p.offsets[1][0]
                })
                .sum()
        };
        let values = params.values();
        let tape = Tape::new();
        let leaves = tape.vars(&values);
        let vars = params.forward(&tape, &leaves, Some(&feats)).unwrap();
        let mut terms = Vec::new();
        for p in &vars {
            terms.extend(p.center);
            terms.extend(p.scores.iter().copied());
            terms.push(p.offsets[1][0]);
        }
        let out = tape.sum(&terms);
        let plain: Vec<ObjectPrediction> = vars.iter().map(PredictionVars::values).collect();
        assert!((out.value() - objective(&plain)).abs() < 1e-12);
        let g = tape.gradient(out).wrt_all(&leaves);
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..values.len()).step_by(3) {
            let eval = |delta: f64| {
                let mut v = values.clone();
                v[i] += delta;
                let mut p = params.clone();
                p.set_values(&v).unwrap();
                objective(&p.predict(Some(&feats)).unwrap())
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6);
            assert!(
                rel < 1e-3,
                "param {} analytic {} numeric {num}",
                params.describe(i),
                g[i]
            );
            checked += 1;
        }
        assert!(checked > 10);
    }
}
