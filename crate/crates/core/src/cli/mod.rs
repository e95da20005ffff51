//! Command-line interface. Arguments are resolved into an [`Invocation`]
//! (config files loaded, defaults filled in) which is then executed and
//! recorded in a manifest next to its artifacts.

pub mod commands;
pub mod manifest;
pub mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::{
    radius_sweep, AblateRun, EvalRun, FitRun, GenRun, Invocation, OracleRun, RadiusSweep,
};
pub use manifest::{replay, run_recorded, sha256_file, RunManifest, MANIFEST_FILE};

use crate::error::{Error, Result};
use crate::fit::{FitConfig, PredictorKind};
use crate::losses::AnchorMode;
use crate::metrics::AbsentClassPolicy;
use crate::panoptic::CLASS_THRESHOLD;
use crate::scenegen::SceneConfig;

/// Environment variable holding the log filter (`error`, `info`, `debug`, ...).
pub const LOG_ENV: &str = "PANOCC_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "panocc",
    version,
    about = "Offset-based panoptic voxel scene completion toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes.
    Gen(GenArgs),
    /// Fit prediction parameters to one scene.
    Fit(FitArgs),
    /// Merge predictions into a baseline and compute all metrics.
    Eval(EvalArgs),
    /// Sweep the voting radius over a set of scenes.
    AblateRadius(AblateArgs),
    /// Write parameters that reproduce a scene's ground truth.
    OracleParams(OracleArgs),
    /// Re-run a recorded command and verify its artifact checksums.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// SceneConfig JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// FitConfig JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_anchor_mode)]
    pub anchor_mode: Option<AnchorMode>,
    #[arg(long, value_parser = parse_predictor)]
    pub predictor: Option<PredictorKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Fitted parameters; oracle parameters are used when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 9)]
    pub radius: usize,
    /// Also report metrics restricted to visible voxels (default).
    #[arg(long, overrides_with = "no_mask")]
    pub mask: bool,
    #[arg(long, overrides_with = "mask")]
    pub no_mask: bool,
    /// Per-axis std-dev in meters of noise added to predicted centers.
    #[arg(long, default_value_t = 0.0)]
    pub center_noise: f64,
    /// Fraction of baseline voxels relabeled before merging.
    #[arg(long, default_value_t = 0.0)]
    pub flip_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = CLASS_THRESHOLD)]
    pub class_threshold: f64,
    /// Count classes absent from both grids as IoU 0 instead of skipping them.
    #[arg(long)]
    pub absent_as_zero: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Scene files, or directories whose `*.json` scenes are used in name order.
    #[arg(long, num_args = 1.., required = true)]
    pub scenes: Vec<PathBuf>,
    /// One parameter file per scene; oracle parameters when omitted.
    #[arg(long, num_args = 1..)]
    pub params: Vec<PathBuf>,
    /// Inclusive range `a-b` or comma list.
    #[arg(long, default_value = "0-12", value_parser = parse_radii)]
    pub radii: Radii,
    #[arg(long, default_value_t = 0.6)]
    pub center_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = CLASS_THRESHOLD)]
    pub class_threshold: f64,
    /// Also write an SVG line chart.
    #[arg(long)]
    pub svg: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// FitConfig JSON providing the query and offset counts.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to `<recorded out dir>.replay`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Radii(pub Vec<usize>);

fn parse_anchor_mode(s: &str) -> std::result::Result<AnchorMode, String> {
    match s {
        "decoupled" => Ok(AnchorMode::Decoupled),
        "coupled" => Ok(AnchorMode::Coupled),
        _ => Err(format!("expected decoupled or coupled, got {s}")),
    }
}

fn parse_predictor(s: &str) -> std::result::Result<PredictorKind, String> {
    match s {
        "free" => Ok(PredictorKind::Free),
        "sampling" => Ok(PredictorKind::Sampling),
        _ => Err(format!("expected free or sampling, got {s}")),
    }
}

pub fn parse_radii(s: &str) -> std::result::Result<Radii, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad radius {t:?}: {e}"))
    };
    let radii = if let Some((a, b)) = s.split_once('-') {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(format!("empty range {s}"));
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(num)
            .collect::<std::result::Result<Vec<_>, _>>()?
    };
    if radii.is_empty() {
        return Err("no radii given".into());
    }
    Ok(Radii(radii))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e.into()))?;
    serde_json::from_str(&text).map_err(|e| Error::input(path, e.into()))
}

fn fit_config(path: Option<&Path>) -> Result<FitConfig> {
    path.map_or_else(|| Ok(FitConfig::default()), read_json)
}

/// Expands directories into their `*.json` files (excluding manifests).
fn expand_scenes(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::input(p, e.into()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "json")
                        && f.file_name().is_some_and(|n| n != MANIFEST_FILE)
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Turns parsed arguments into an invocation plus its output directory.
/// `Replay` has no invocation of its own and is handled by [`run`].
pub fn resolve(command: &Command) -> Result<Option<(Invocation, PathBuf)>> {
    let resolved = match command {
        Command::Gen(a) => {
            let mut config: SceneConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => SceneConfig::default(),
            };
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            config.validate()?;
            (Invocation::Gen(GenRun { config, n: a.n }), a.out.clone())
        }
        Command::Fit(a) => {
            let mut config = fit_config(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            if let Some(mode) = a.anchor_mode {
                config.anchor_mode = mode;
            }
            if let Some(kind) = a.predictor {
                config.predictor = kind;
            }
            config.validate()?;
            (
                Invocation::Fit(FitRun {
                    scene: a.scene.clone(),
                    config,
                }),
                a.out.clone(),
            )
        }
        Command::Eval(a) => {
            if !(a.center_noise.is_finite() && a.center_noise >= 0.0) {
                return Err(Error::InvalidConfig(
                    "center noise must be non-negative".into(),
                ));
            }
            (
                Invocation::Eval(EvalRun {
                    scene: a.scene.clone(),
                    params: a.params.clone(),
                    radius: a.radius,
                    mask: !a.no_mask,
                    center_noise: a.center_noise,
                    label_flip_rate: a.flip_rate,
                    seed: a.seed,
                    class_threshold: a.class_threshold,
                    absent_classes: if a.absent_as_zero {
                        AbsentClassPolicy::CountAsZero
                    } else {
                        AbsentClassPolicy::Exclude
                    },
                }),
                a.out.clone(),
            )
        }
        Command::AblateRadius(a) => {
            if !(a.center_noise.is_finite() && a.center_noise >= 0.0) {
                return Err(Error::InvalidConfig(
                    "center noise must be non-negative".into(),
                ));
            }
            (
                Invocation::AblateRadius(AblateRun {
                    scenes: expand_scenes(&a.scenes)?,
                    params: a.params.clone(),
                    radii: a.radii.0.clone(),
                    center_noise: a.center_noise,
                    seed: a.seed,
                    class_threshold: a.class_threshold,
                    svg: a.svg,
                    jobs: a.jobs,
                }),
                a.out.clone(),
            )
        }
        Command::OracleParams(a) => (
            Invocation::OracleParams(OracleRun {
                scene: a.scene.clone(),
                config: fit_config(a.config.as_deref())?,
            }),
            a.out.clone(),
        ),
        Command::Replay(_) => return Ok(None),
    };
    Ok(Some(resolved))
}

pub fn run(cli: &Cli) -> Result<RunManifest> {
    if let Command::Replay(a) = &cli.command {
        let out = match &a.out {
            Some(o) => o.clone(),
            None => {
                let m = RunManifest::load(&a.manifest)?;
                let mut dir = m.out_dir.into_os_string();
                dir.push(".replay");
                PathBuf::from(dir)
            }
        };
        return replay(&a.manifest, &out);
    }
    let (invocation, out) = resolve(&cli.command)?.expect("non-replay command");
    run_recorded(&invocation, &out)
}

/// 2 for unreadable or invalid inputs and configuration, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Input { .. }
        | Error::InvalidConfig(_)
        | Error::InvalidGridSpec(_)
        | Error::Json(_)
        | Error::Format(_)
        | Error::EgoOutsideGrid(_) => 2,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let _ =
        env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(m) => {
            println!("{}", m.out_dir.join(MANIFEST_FILE).display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radii_parsing() {
        assert_eq!(parse_radii("0-3").unwrap(), Radii(vec![0, 1, 2, 3]));
        assert_eq!(parse_radii("9").unwrap(), Radii(vec![9]));
        assert_eq!(parse_radii("0,5,9").unwrap(), Radii(vec![0, 5, 9]));
        assert!(parse_radii("5-2").is_err());
        assert!(parse_radii("x").is_err());
    }

    #[test]
    fn flags_resolve() {
        let cli = Cli::try_parse_from([
            "panocc",
            "eval",
            "--scene",
            "s.json",
            "--no-mask",
            "--out",
            "o",
        ])
        .unwrap();
        let (inv, _) = resolve(&cli.command).unwrap().unwrap();
        match inv {
            Invocation::Eval(e) => {
                assert!(!e.mask);
                assert_eq!(e.radius, 9);
            }
            other => panic!("unexpected {other:?}"),
        }
        let cli = Cli::try_parse_from([
            "panocc",
            "fit",
            "--scene",
            "s",
            "--anchor-mode",
            "coupled",
            "--out",
            "o",
        ])
        .unwrap();
        match resolve(&cli.command).unwrap().unwrap().0 {
            Invocation::Fit(f) => assert_eq!(f.config.anchor_mode, AnchorMode::Coupled),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Cli::try_parse_from([
            "panocc",
            "fit",
            "--scene",
            "s",
            "--anchor-mode",
            "x",
            "--out",
            "o"
        ])
        .is_err());
    }

    #[test]
    fn exit_codes() {
        let missing = Error::input(
            "nope.json",
            Error::Io(std::io::Error::from(std::io::ErrorKind::NotFound)),
        );
        assert_eq!(exit_code(&missing), 2);
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 2);
        assert_eq!(
            exit_code(&Error::NonFiniteLoss {
                step: 0,
                detail: String::new()
            }),
            1
        );
    }
}
