//! Fully resolved command invocations and their execution. Everything a
//! command needs is stored in its invocation so a manifest can replay it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::svg;
use crate::classes::ClassTable;
use crate::error::{Error, Result};
use crate::fit::{fit_scene, load_params, oracle_params, save_params, FitConfig, PredictorParams};
use crate::grid::SemanticGrid;
use crate::losses::loss_csv;
use crate::metrics::{
    evaluate, panoptic_quality, report_csv_header, report_csv_row, AbsentClassPolicy, EvalReport,
};
use crate::objects::ObjectPrediction;
use crate::panoptic::{predict_panoptic, PanopticConfig};
use crate::scene::Scene;
use crate::scenegen::{corrupt_baseline, generate_scene, jitter_centers, Corruption, SceneConfig};

/// Files written by a command (relative to its output directory) and a
/// short machine-readable summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub artifacts: Vec<String>,
    pub summary: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Gen(GenRun),
    Fit(FitRun),
    Eval(EvalRun),
    AblateRadius(AblateRun),
    OracleParams(OracleRun),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenRun {
    pub config: SceneConfig,
    /// Scene `i` uses seed `config.seed + i`.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRun {
    pub scene: PathBuf,
    pub config: FitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRun {
    pub scene: PathBuf,
    pub config: FitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub scene: PathBuf,
    /// Oracle parameters are built from the scene when absent.
    pub params: Option<PathBuf>,
    pub radius: usize,
    pub mask: bool,
    pub center_noise: f64,
    pub label_flip_rate: f64,
    pub seed: u64,
    pub class_threshold: f64,
    pub absent_classes: AbsentClassPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRun {
    pub scenes: Vec<PathBuf>,
    /// Empty, or one parameter file per scene.
    pub params: Vec<PathBuf>,
    pub radii: Vec<usize>,
    pub center_noise: f64,
    pub seed: u64,
    pub class_threshold: f64,
    pub svg: bool,
    pub jobs: usize,
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gen(_) => "gen",
            Self::Fit(_) => "fit",
            Self::Eval(_) => "eval",
            Self::AblateRadius(_) => "ablate-radius",
            Self::OracleParams(_) => "oracle-params",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Gen(r) => r.config.seed,
            Self::Fit(r) => r.config.seed,
            Self::Eval(r) => r.seed,
            Self::AblateRadius(r) => r.seed,
            Self::OracleParams(r) => r.config.seed,
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Self::Gen(_) => Vec::new(),
            Self::Fit(r) => vec![r.scene.clone()],
            Self::OracleParams(r) => vec![r.scene.clone()],
            Self::Eval(r) => std::iter::once(r.scene.clone())
                .chain(r.params.clone())
                .collect(),
            Self::AblateRadius(r) => r.scenes.iter().chain(&r.params).cloned().collect(),
        }
    }

    pub fn execute(&self, out: &Path) -> Result<Outcome> {
        match self {
            Self::Gen(r) => r.execute(out),
            Self::Fit(r) => r.execute(out),
            Self::Eval(r) => r.execute(out),
            Self::AblateRadius(r) => r.execute(out),
            Self::OracleParams(r) => r.execute(out),
        }
    }
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    Scene::load(path).map_err(|e| Error::input(path, e))
}

fn load_params_from(path: &Path) -> Result<PredictorParams> {
    load_params(path).map_err(|e| Error::input(path, e))
}

/// Oracle parameters with enough queries and offsets for `scene`.
pub fn default_oracle(scene: &Scene) -> Result<PredictorParams> {
    let base = FitConfig::default();
    let cfg = FitConfig {
        q_queries: base.q_queries.max(scene.objects.len()),
        k_offsets: base.k_offsets.max(scene.max_object_voxels()),
        ..base
    };
    oracle_params(scene, &cfg)
}

fn write(out: &Path, name: &str, contents: &str, artifacts: &mut Vec<String>) -> Result<()> {
    std::fs::write(out.join(name), contents)?;
    artifacts.push(name.to_string());
    Ok(())
}

impl GenRun {
    fn execute(&self, out: &Path) -> Result<Outcome> {
        self.config.validate()?;
        let mut artifacts = Vec::new();
        let mut objects = Vec::new();
        for i in 0..self.n {
            let cfg = SceneConfig {
                seed: self.config.seed.wrapping_add(i as u64),
                ..self.config.clone()
            };
            let scene = generate_scene(&cfg)?;
            objects.push(scene.objects.len());
            write(
                out,
                &format!("scene_{i:03}.json"),
                &scene.to_json()?,
                &mut artifacts,
            )?;
        }
        Ok(Outcome {
            artifacts,
            summary: json!({ "scenes": self.n, "objects": objects }),
        })
    }
}

impl FitRun {
    fn execute(&self, out: &Path) -> Result<Outcome> {
        self.config.validate()?;
        let scene = load_scene(&self.scene)?;
        let fit = fit_scene(&scene, &self.config)?;
        let mut artifacts = Vec::new();
        write(
            out,
            "params.json",
            &serde_json::to_string(&fit.params)?,
            &mut artifacts,
        )?;
        write(out, "loss.csv", &loss_csv(&fit.history), &mut artifacts)?;
        let (initial, fin) = (fit.initial_loss(), fit.final_loss());
        Ok(Outcome {
            artifacts,
            summary: json!({
                "steps": fit.history.len(),
                "initial_loss": initial,
                "final_loss": fin,
                "loss_threshold": self.config.loss_threshold,
                "below_threshold": self.config.loss_threshold.map(|t| fin < t),
                "anchor_mode": self.config.anchor_mode,
            }),
        })
    }
}

impl OracleRun {
    fn execute(&self, out: &Path) -> Result<Outcome> {
        let scene = load_scene(&self.scene)?;
        let params = oracle_params(&scene, &self.config)?;
        let mut artifacts = Vec::new();
        let path = out.join("params.json");
        save_params(&params, &path)?;
        artifacts.push("params.json".into());
        Ok(Outcome {
            artifacts,
            summary: json!({ "queries": self.config.q_queries, "objects": scene.objects.len() }),
        })
    }
}

/// Predictions from `params`, optionally with jittered centers.
pub fn scene_predictions(
    scene: &Scene,
    params: &PredictorParams,
    center_noise: f64,
    seed: u64,
) -> Result<Vec<ObjectPrediction>> {
    let mut preds = params.predict(Some(&scene.features))?;
    jitter_centers(&mut preds, center_noise, seed);
    Ok(preds)
}

fn check_stuff_preserved(
    baseline: &SemanticGrid,
    merged: &crate::grid::PanopticGrid,
    classes: &ClassTable,
) -> Result<()> {
    let same = baseline
        .labels
        .as_slice()
        .iter()
        .zip(merged.labels.as_slice())
        .all(|(b, m)| !classes.is_stuff(*b) || b == m);
    if same {
        Ok(())
    } else {
        Err(Error::Invariant("merge changed a stuff voxel".into()))
    }
}

fn check_report(r: &EvalReport) -> Result<()> {
    let values = [
        r.iou,
        r.miou,
        r.pq,
        r.rq,
        r.sq,
        r.pq_things,
        r.rq_things,
        r.sq_things,
        r.pq_stuff,
        r.rq_stuff,
        r.sq_stuff,
    ];
    if values.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Invariant(format!("metric outside [0, 1]: {r:?}")))
    }
}

impl EvalRun {
    fn execute(&self, out: &Path) -> Result<Outcome> {
        let scene = load_scene(&self.scene)?;
        let params = match &self.params {
            Some(p) => load_params_from(p)?,
            None => default_oracle(&scene)?,
        };
        let preds = scene_predictions(&scene, &params, self.center_noise, self.seed)?;
        let baseline = if self.label_flip_rate > 0.0 {
            let cfg = SceneConfig {
                seed: self.seed,
                corruption: Corruption {
                    label_flip_rate: self.label_flip_rate,
                    ..Corruption::default()
                },
                ..SceneConfig::default()
            };
            cfg.validate()?;
            corrupt_baseline(&scene, &cfg)
        } else {
            scene.semantic.clone()
        };
        let merged = predict_panoptic(
            &preds,
            &baseline,
            &scene.classes,
            &PanopticConfig {
                radius: self.radius,
            },
            self.class_threshold,
        )?;
        check_stuff_preserved(&baseline, &merged, &scene.classes)?;
        for (c, q) in panoptic_quality(&merged, &scene.panoptic, &scene.classes)?.per_class {
            if (q.pq - q.sq * q.rq).abs() > 1e-9 {
                return Err(Error::Invariant(format!("class {c}: pq != sq * rq")));
            }
        }
        let mut reports = vec![evaluate(
            &merged,
            &scene.panoptic,
            &scene.classes,
            None,
            self.absent_classes,
        )?];
        if self.mask {
            reports.push(evaluate(
                &merged,
                &scene.panoptic,
                &scene.classes,
                Some(&scene.visibility),
                self.absent_classes,
            )?);
        }
        reports.iter().try_for_each(check_report)?;
        let mut csv = report_csv_header(&scene.classes);
        csv.push('\n');
        for r in &reports {
            csv.push_str(&report_csv_row(r, &scene.classes));
            csv.push('\n');
        }
        let mut artifacts = Vec::new();
        write(
            out,
            "eval.json",
            &serde_json::to_string_pretty(&reports)?,
            &mut artifacts,
        )?;
        write(out, "eval.csv", &csv, &mut artifacts)?;
        let headline: BTreeMap<&str, f64> = reports
            .iter()
            .map(|r| (if r.masked { "miou_masked" } else { "miou" }, r.miou))
            .chain([("pq", reports[0].pq), ("pq_things", reports[0].pq_things)])
            .collect();
        Ok(Outcome {
            artifacts,
            summary: serde_json::to_value(headline)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusRow {
    pub scene: String,
    pub radius: usize,
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
    pub pq_things: f64,
    pub rq_things: f64,
    pub sq_things: f64,
}

pub const RADIUS_CSV_HEADER: &str = "scene,radius,pq,rq,sq,pq_things,rq_things,sq_things";

impl RadiusRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.scene,
            self.radius,
            self.pq,
            self.rq,
            self.sq,
            self.pq_things,
            self.rq_things,
            self.sq_things
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadiusSweep {
    /// One row per scene and radius, scenes in input order.
    pub rows: Vec<RadiusRow>,
    /// Mean over scenes, one row per radius (scene column `mean`).
    pub aggregate: Vec<RadiusRow>,
}

impl RadiusSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RADIUS_CSV_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(&self.aggregate) {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let pick = |f: fn(&RadiusRow) -> f64| {
            self.aggregate
                .iter()
                .map(|r| (r.radius as f64, f(r)))
                .collect()
        };
        svg::line_chart(
            "Panoptic metrics vs voting radius",
            "radius (voxels)",
            &[
                svg::Series {
                    name: "PQ",
                    color: "#d62728",
                    points: pick(|r| r.pq),
                },
                svg::Series {
                    name: "RQ",
                    color: "#1f77b4",
                    points: pick(|r| r.rq),
                },
                svg::Series {
                    name: "SQ",
                    color: "#2ca02c",
                    points: pick(|r| r.sq),
                },
            ],
        )
    }
}

/// Evaluates each scene's (jittered) predictions at every radius against
/// the clean ground truth. Scene `i` is jittered with seed `seed + i`.
pub fn radius_sweep(
    scenes: &[(String, Scene, PredictorParams)],
    radii: &[usize],
    center_noise: f64,
    seed: u64,
    class_threshold: f64,
    jobs: usize,
) -> Result<RadiusSweep> {
    if radii.is_empty() {
        return Err(Error::InvalidConfig("radii must not be empty".into()));
    }
    let sweep_one = |i: usize,
                     (name, scene, params): &(String, Scene, PredictorParams)|
     -> Result<Vec<RadiusRow>> {
        let preds = scene_predictions(scene, params, center_noise, seed.wrapping_add(i as u64))?;
        radii
            .iter()
            .map(|&radius| {
                let merged = predict_panoptic(
                    &preds,
                    &scene.semantic,
                    &scene.classes,
                    &PanopticConfig { radius },
                    class_threshold,
                )?;
                let q = panoptic_quality(&merged, &scene.panoptic, &scene.classes)?;
                Ok(RadiusRow {
                    scene: name.clone(),
                    radius,
                    pq: q.pq,
                    rq: q.rq,
                    sq: q.sq,
                    pq_things: q.pq_things,
                    rq_things: q.rq_things,
                    sq_things: q.sq_things,
                })
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let per_scene: Vec<Vec<RadiusRow>> = pool.install(|| {
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| sweep_one(i, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let n = per_scene.len().max(1) as f64;
    let aggregate = radii
        .iter()
        .enumerate()
        .map(|(j, &radius)| {
            let mean = |f: fn(&RadiusRow) -> f64| {
                per_scene.iter().map(|rows| f(&rows[j])).sum::<f64>() / n
            };
            RadiusRow {
                scene: "mean".into(),
                radius,
                pq: mean(|r| r.pq),
                rq: mean(|r| r.rq),
                sq: mean(|r| r.sq),
                pq_things: mean(|r| r.pq_things),
                rq_things: mean(|r| r.rq_things),
                sq_things: mean(|r| r.sq_things),
            }
        })
        .collect();
    Ok(RadiusSweep {
        rows: per_scene.into_iter().flatten().collect(),
        aggregate,
    })
}

fn scene_name(path: &Path) -> String {
    path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

impl AblateRun {
    fn execute(&self, out: &Path) -> Result<Outcome> {
        if !self.params.is_empty() && self.params.len() != self.scenes.len() {
            return Err(Error::InvalidConfig(format!(
                "{} parameter files for {} scenes",
                self.params.len(),
                self.scenes.len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.scenes.len());
        for (i, path) in self.scenes.iter().enumerate() {
            let scene = load_scene(path)?;
            let params = match self.params.get(i) {
                Some(p) => load_params_from(p)?,
                None => default_oracle(&scene)?,
            };
            inputs.push((scene_name(path), scene, params));
        }
        let sweep = radius_sweep(
            &inputs,
            &self.radii,
            self.center_noise,
            self.seed,
            self.class_threshold,
            self.jobs,
        )?;
        let mut artifacts = Vec::new();
        write(out, "radius.csv", &sweep.to_csv(), &mut artifacts)?;
        if self.svg {
            write(out, "radius.svg", &sweep.to_svg(), &mut artifacts)?;
        }
        let best = sweep
            .aggregate
            .iter()
            .fold(None::<&RadiusRow>, |b, r| match b {
                Some(b) if b.pq >= r.pq => Some(b),
                _ => Some(r),
            })
            .expect("radii not empty");
        Ok(Outcome {
            artifacts,
            summary: json!({
                "scenes": self.scenes.len(),
                "best_radius": best.radius,
                "best_pq": best.pq,
                "pq_first_radius": sweep.aggregate[0].pq,
                "pq_last_radius": sweep.aggregate[sweep.aggregate.len() - 1].pq,
            }),
        })
    }
}
