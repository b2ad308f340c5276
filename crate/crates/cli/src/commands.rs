use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use scenepos::pipeline::{
    actor_l1, align_all, aligned_depths, boundary_errors, depth_fit_errors, foreground_masks, from_synthetic, link_runs,
    naive_all, position_all, refine_scene, refinement_sets, run_jerk, run_keypoint_error, run_penetration,
    run_placement_errors, stage_depths, ALIGN_DELTA_FRACTION,
};
use scenepos::positioning::{loss_csv, PositioningConfig};
use scenepos::refine::{EncodingSpec, RefineConfig};
use scenepos::synth::{generate_scene, SceneSpec};
use scenepos::tracking::{default_match_threshold, LinkOptions, DEFAULT_EXTRAPOLATION_HORIZON};
use scenepos::{Mask, RenderOptions};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bundle::{Bundle, DepthSection, PositioningSection, RefineSettings, TrackingSection};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "scenepos", version, about = "Position actors on a reconstructed stage")]
pub struct Cli {
    /// Seed for scene generation and network initialization.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene bundle with ground truth.
    Synth(SynthArgs),
    /// Fit per-frame affine maps from mono depth to the stage.
    AlignDepth(AlignArgs),
    /// Optimize actor scale, translations and poses.
    Position(PositionArgs),
    /// Link per-shot actors across shot boundaries.
    Track(TrackArgs),
    /// Depth-tested foreground masks from the linked tracks.
    Mask(MaskArgs),
    /// Train the actor appearance residual network.
    Refine(RefineArgs),
    /// Compute metrics for every completed stage.
    Eval(BundleArg),
    /// Write the metrics JSON and per-run loss CSVs.
    Report(BundleArg),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Single,
    Jittered,
    Couch,
    TwoShot,
}

#[derive(Debug, Args)]
pub struct BundleArg {
    pub bundle: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub bundle: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Single)]
    pub preset: Preset,
    /// Frames per shot.
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub focal: Option<f64>,
    /// Drop all observation noise.
    #[arg(long)]
    pub noiseless: bool,
    /// Replace an existing bundle.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    pub bundle: PathBuf,
    /// Huber threshold in stage units (default r/100).
    #[arg(long)]
    pub delta1: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct PositionArgs {
    #[serde(skip)]
    pub bundle: PathBuf,
    /// Multiplies both stage iteration counts (6000 and 2000).
    #[arg(long, default_value_t = 1.0)]
    pub iters_scale: f64,
    #[arg(long)]
    pub lambda_depth: Option<f64>,
    #[arg(long)]
    pub lambda_kpt: Option<f64>,
    #[arg(long)]
    pub lambda_traj: Option<f64>,
    #[arg(long)]
    pub lambda_penet: Option<f64>,
    /// Huber threshold of the actor depth term in stage units (default r/20).
    #[arg(long)]
    pub delta2: Option<f64>,
    /// Keypoint robust scale in pixels.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    pub bundle: PathBuf,
    /// Largest center distance of a cross-shot match in stage units
    /// (default 0.15 r).
    #[arg(long)]
    pub match_threshold: Option<f64>,
    /// Frames an unmatched track is held past its last shot.
    #[arg(long, default_value_t = DEFAULT_EXTRAPOLATION_HORIZON)]
    pub horizon: usize,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    pub bundle: PathBuf,
    /// Body vertex stride of the actor splats.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    pub bundle: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Body vertex stride of the actor splats.
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::AlignDepth(_) => "align-depth",
            Command::Position(_) => "position",
            Command::Track(_) => "track",
            Command::Mask(_) => "mask",
            Command::Refine(_) => "refine",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
        }
    }

    pub fn bundle(&self) -> &Path {
        match self {
            Command::Synth(a) => &a.bundle,
            Command::AlignDepth(a) => &a.bundle,
            Command::Position(a) => &a.bundle,
            Command::Track(a) => &a.bundle,
            Command::Mask(a) => &a.bundle,
            Command::Refine(a) => &a.bundle,
            Command::Eval(a) | Command::Report(a) => &a.bundle,
        }
    }
}

/// Metrics file written by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub metrics: BTreeMap<String, f64>,
}

pub fn metrics_path(bundle: &Path, command: &str) -> PathBuf {
    bundle.join("metrics").join(format!("{command}.json"))
}

fn write_metrics(path: &Path, m: &MetricsFile) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn require(command: &'static str, present: bool, needs: &'static str) -> CliResult<()> {
    if present {
        Ok(())
    } else {
        Err(CliError::StageDependency { command, needs })
    }
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} must be positive, got {v}")))
    }
}

pub fn run(cli: Cli) -> CliResult<MetricsFile> {
    let name = cli.command.name();
    let root = cli.command.bundle().to_path_buf();
    let seed = cli.seed;
    let (config, metrics) = match cli.command {
        Command::Synth(a) => synth(&a, seed)?,
        Command::AlignDepth(a) => with_bundle(&root, |b| align(b, &a))?,
        Command::Position(a) => with_bundle(&root, |b| position(b, &a))?,
        Command::Track(a) => with_bundle(&root, |b| track(b, &a))?,
        Command::Mask(a) => with_bundle(&root, |b| mask(b, &a))?,
        Command::Refine(a) => with_bundle(&root, |b| refine(b, &a, seed))?,
        Command::Eval(_) => with_bundle(&root, |b| {
            require("eval", b.manifest.depth.is_some(), "align-depth")?;
            let m = evaluate(b)?;
            b.manifest.evaluation = Some(m.clone());
            Ok((json!({}), m))
        })?,
        Command::Report(_) => report(&root)?,
    };
    let file = MetricsFile {
        command: name.into(),
        seed,
        config,
        metrics,
    };
    write_metrics(&metrics_path(&root, name), &file)?;
    Ok(file)
}

type Outcome = (Value, BTreeMap<String, f64>);

/// Loads the bundle, runs a command on it and saves it back.
fn with_bundle(root: &Path, f: impl FnOnce(&mut Bundle) -> CliResult<Outcome>) -> CliResult<Outcome> {
    let mut b = Bundle::load(root)?;
    let out = f(&mut b)?;
    b.save(root)?;
    Ok(out)
}

fn synth(a: &SynthArgs, seed: u64) -> CliResult<Outcome> {
    if Bundle::exists(&a.bundle) && !a.force {
        return Err(CliError::BundleExists(a.bundle.clone()));
    }
    if a.frames == 0 {
        return Err(CliError::Usage("--frames must be at least 1".into()));
    }
    let mut spec = match a.preset {
        Preset::Single => SceneSpec::single_actor(a.frames),
        Preset::Jittered => SceneSpec::jittered(a.frames),
        Preset::Couch => SceneSpec::couch(a.frames),
        Preset::TwoShot => SceneSpec::two_shot(a.frames),
    };
    if let Some(w) = a.width {
        spec.width = w;
    }
    if let Some(h) = a.height {
        spec.height = h;
    }
    if let Some(f) = a.focal {
        spec.focal = f;
    }
    if a.noiseless {
        spec.noise = scenepos::synth::NoiseSpec::none();
    }
    let scene = generate_scene(&spec, seed)?;
    let (data, truth) = from_synthetic(&scene);
    let mut b = Bundle::from_scene(data, Some(truth));
    let config = json!({ "preset": a.preset, "seed": seed, "spec": spec });
    b.manifest.config.insert("synth".into(), config.clone());
    if a.force {
        for dir in ["frames", "metrics", "report"] {
            let d = a.bundle.join(dir);
            if d.is_dir() {
                std::fs::remove_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
            }
        }
    }
    b.save(&a.bundle)?;
    let metrics = BTreeMap::from([
        ("frames".to_string(), b.data.num_frames() as f64),
        ("shots".to_string(), b.data.shots.len() as f64),
        ("actors".to_string(), scene.actors.len() as f64),
        ("scene_radius".to_string(), b.data.scene_radius()?.get()),
    ]);
    Ok((config, metrics))
}

/// Sections after `stage` are stale once `stage` is rewritten.
fn clear_after(b: &mut Bundle, stage: &str) {
    let order = ["align-depth", "position", "track", "mask", "refine"];
    let k = order.iter().position(|s| *s == stage).expect("known stage");
    let m = &mut b.manifest;
    if k < 1 {
        m.positioning = None;
    }
    if k < 2 {
        m.tracking = None;
    }
    if k < 3 {
        m.masks = None;
        b.foreground = None;
    }
    if k < 4 {
        m.refinement = None;
        b.network = None;
    }
    m.evaluation = None;
}

fn align(b: &mut Bundle, a: &AlignArgs) -> CliResult<Outcome> {
    let r = b.data.scene_radius()?.get();
    let delta1 = a.delta1.unwrap_or(ALIGN_DELTA_FRACTION * r);
    positive("delta1", delta1)?;
    let fits = align_all(&b.data, delta1);
    let nf = fits.len().max(1) as f64;
    let accepted = fits.iter().flatten().filter(|f| f.is_accepted()).count();
    let inliers: f64 = fits.iter().flatten().map(|f| f.inlier_fraction).sum();
    b.manifest.depth = Some(DepthSection { delta1, fits });
    clear_after(b, "align-depth");
    let config = json!({ "delta1": delta1 });
    b.manifest.config.insert("align-depth".into(), config.clone());
    let metrics = BTreeMap::from([
        ("accepted_fraction".to_string(), accepted as f64 / nf),
        ("mean_inlier_fraction".to_string(), inliers / nf),
    ]);
    Ok((config, metrics))
}

pub fn positioning_config(b: &Bundle, a: &PositionArgs) -> CliResult<PositioningConfig> {
    positive("iters-scale", a.iters_scale)?;
    let mut cfg = PositioningConfig::full(b.data.scene_radius()?).with_iteration_scale(a.iters_scale);
    let overrides = [
        (&mut cfg.lambda_depth, a.lambda_depth),
        (&mut cfg.lambda_kpt, a.lambda_kpt),
        (&mut cfg.lambda_traj, a.lambda_traj),
        (&mut cfg.lambda_penet, a.lambda_penet),
        (&mut cfg.delta, a.delta2),
        (&mut cfg.tau, a.tau),
    ];
    for (field, v) in overrides {
        if let Some(v) = v {
            *field = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn position(b: &mut Bundle, a: &PositionArgs) -> CliResult<Outcome> {
    let depth = b.manifest.depth.as_ref();
    require("position", depth.is_some(), "align-depth")?;
    let cfg = positioning_config(b, a)?;
    let aligned = aligned_depths(&b.data, &depth.expect("checked").fits);
    let stage = stage_depths(&b.data);
    let runs = position_all(&b.data, &aligned, &stage, &cfg)?;
    let finals: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.solution.history.last().map(|h| h.total))
        .collect();
    let metrics = BTreeMap::from([
        ("runs".to_string(), runs.len() as f64),
        (
            "mean_final_loss".to_string(),
            finals.iter().sum::<f64>() / finals.len().max(1) as f64,
        ),
    ]);
    b.manifest.positioning = Some(PositioningSection { config: cfg.clone(), runs });
    clear_after(b, "position");
    let config = serde_json::to_value(&cfg)?;
    b.manifest.config.insert("position".into(), config.clone());
    Ok((config, metrics))
}

fn track(b: &mut Bundle, a: &TrackArgs) -> CliResult<Outcome> {
    let pos = b.manifest.positioning.as_ref();
    require("track", pos.is_some(), "position")?;
    let lambda = match a.match_threshold {
        Some(l) => l,
        None => default_match_threshold(b.data.scene_radius()?),
    };
    positive("match-threshold", lambda)?;
    let opts = LinkOptions {
        lambda,
        horizon: a.horizon,
    };
    let linked = link_runs(&b.data, &pos.expect("checked").runs, &opts)?;
    let metrics = BTreeMap::from([
        ("tracks".to_string(), linked.tracks.len() as f64),
        (
            "matched".to_string(),
            linked.reports.iter().map(|r| r.matched.len()).sum::<usize>() as f64,
        ),
        (
            "extrapolated".to_string(),
            linked.reports.iter().map(|r| r.extrapolated.len()).sum::<usize>() as f64,
        ),
    ]);
    b.manifest.tracking = Some(TrackingSection {
        lambda,
        horizon: a.horizon,
        tracks: linked.tracks,
        reports: linked.reports,
        origins: linked.origins,
    });
    clear_after(b, "track");
    let config = json!({ "match_threshold": lambda, "horizon": a.horizon });
    b.manifest.config.insert("track".into(), config.clone());
    Ok((config, metrics))
}

fn mask(b: &mut Bundle, a: &MaskArgs) -> CliResult<Outcome> {
    let tracking = b.manifest.tracking.as_ref();
    require("mask", tracking.is_some(), "track")?;
    if a.stride == 0 {
        return Err(CliError::Usage("--stride must be at least 1".into()));
    }
    let stage = stage_depths(&b.data);
    let masks = foreground_masks(&b.data, &tracking.expect("checked").tracks, &stage, a.stride)?;
    let px: usize = masks.iter().map(|m| m.dims().0 * m.dims().1).sum();
    let fg: usize = masks.iter().map(Mask::count).sum();
    b.set_foreground(a.stride, masks);
    clear_after(b, "mask");
    let config = json!({ "stride": a.stride });
    b.manifest.config.insert("mask".into(), config.clone());
    let metrics = BTreeMap::from([("coverage".to_string(), fg as f64 / px.max(1) as f64)]);
    Ok((config, metrics))
}

fn refine(b: &mut Bundle, a: &RefineArgs, seed: u64) -> CliResult<Outcome> {
    require("refine", b.foreground.is_some(), "mask")?;
    if a.stride == 0 || a.iters == 0 {
        return Err(CliError::Usage("--stride and --iters must be at least 1".into()));
    }
    positive("lr", a.lr)?;
    let enc = EncodingSpec::default();
    let settings = RefineSettings {
        iters: a.iters,
        lr: a.lr,
        lr_final_fraction: RefineConfig::default().lr_final_fraction,
        seed,
        stride: a.stride,
        l_pos: enc.l_pos,
        l_time: enc.l_time,
    };
    let eps = visibility_epsilon(b)?;
    let tracks = &b.manifest.tracking.as_ref().expect("masks imply tracks").tracks;
    let fg = b.foreground.as_ref().expect("checked");
    let sets = refinement_sets(&b.data, tracks, fg, a.stride, eps)?;
    let cfg = refine_config(&settings);
    let (net, report) = refine_scene(&b.data, &sets, fg, &cfg)?;
    let h = &report.history;
    let window = (h.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let metrics = BTreeMap::from([
        ("loss_first_tenth".to_string(), mean(&h[..window.min(h.len())])),
        ("loss_last_tenth".to_string(), mean(&h[h.len().saturating_sub(window)..])),
    ]);
    b.set_refinement(settings, net, report.history);
    let config = serde_json::to_value(settings)?;
    b.manifest.config.insert("refine".into(), config.clone());
    Ok((config, metrics))
}

fn refine_config(s: &RefineSettings) -> RefineConfig {
    RefineConfig {
        iters: s.iters,
        lr: s.lr,
        lr_final_fraction: s.lr_final_fraction,
        seed: s.seed,
        encoding: EncodingSpec {
            l_pos: s.l_pos,
            l_time: s.l_time,
        },
        render: RenderOptions::default(),
    }
}

fn visibility_epsilon(b: &Bundle) -> CliResult<f64> {
    Ok(match &b.manifest.positioning {
        Some(p) => p.config.visibility_epsilon,
        None => PositioningConfig::full(b.data.scene_radius()?).visibility_epsilon,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics for every stage present in the bundle. Ground-truth metrics
/// are only reported when the bundle carries truth.
pub fn evaluate(b: &Bundle) -> CliResult<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: Option<f64>| {
        if let Some(v) = v.filter(|v| v.is_finite()) {
            m.insert(k.to_string(), v);
        }
    };
    let data = &b.data;
    let truth = b.manifest.truth.as_ref();
    let r = data.scene_radius()?.get();
    if let Some(d) = &b.manifest.depth {
        let nf = d.fits.len().max(1) as f64;
        put(
            "align.accepted_fraction",
            Some(d.fits.iter().flatten().filter(|f| f.is_accepted()).count() as f64 / nf),
        );
        if let Some((ea, eb)) = truth.and_then(|t| depth_fit_errors(&d.fits, t)) {
            put("align.a_max_rel_err", Some(ea));
            put("align.b_max_rel_err", Some(eb));
        }
    }
    if let Some(p) = &b.manifest.positioning {
        let stage = stage_depths(data);
        let eps = p.config.visibility_epsilon;
        let mut jerk = Vec::new();
        let mut kpt = Vec::new();
        let mut pen = Vec::new();
        for run in &p.runs {
            jerk.push(run_jerk(&data.body, run)?);
            kpt.push(run_keypoint_error(data, run)?);
            pen.push(run_penetration(data, run, &stage, eps)?);
        }
        put("position.jerk", mean(&jerk));
        put("position.keypoint_err_px", mean(&kpt));
        put("position.penetration_fraction", mean(&pen));
        if let Some(t) = truth {
            let errs: Vec<(f64, f64)> = p
                .runs
                .iter()
                .filter_map(|run| Some(run_placement_errors(run, &t.actors[t.actor_of(run.shot, run.track)?])))
                .collect();
            put("position.scale_rel_err_max", errs.iter().map(|e| e.0).reduce(f64::max));
            put("position.translation_err_max_over_r", errs.iter().map(|e| e.1 / r).reduce(f64::max));
            if data.shots.len() > 1 {
                let ours = boundary_errors(data, &p.runs, t)?;
                let naive = boundary_errors(data, &naive_all(data)?, t)?;
                let col = |v: &[(usize, f64, f64)], i: usize| mean(&v.iter().map(|e| if i == 0 { e.1 } else { e.2 }).collect::<Vec<_>>());
                put("boundary.mted", col(&ours, 0));
                put("boundary.mped", col(&ours, 1));
                put("boundary.naive_mted", col(&naive, 0));
                put("boundary.naive_mped", col(&naive, 1));
            }
        }
    }
    if let Some(tr) = &b.manifest.tracking {
        put("track.count", Some(tr.tracks.len() as f64));
        if let Some(t) = truth {
            let correct = tr
                .origins
                .iter()
                .filter(|o| {
                    let actors: Vec<Option<usize>> = o.iter().map(|&(s, l)| t.actor_of(s, l)).collect();
                    actors.iter().all(|a| a.is_some() && *a == actors[0])
                })
                .count();
            put("track.link_accuracy", Some(correct as f64 / tr.origins.len().max(1) as f64));
        }
    }
    if let Some(fg) = &b.foreground {
        let ious: Vec<f64> = fg
            .iter()
            .zip(&data.frames)
            .filter_map(|(m, f)| {
                let mut union = Mask::new(m.dims().0, m.dims().1, false);
                for o in &f.observations {
                    for (u, v) in union.values.iter_mut().zip(&o.mask.values) {
                        *u |= *v;
                    }
                }
                let inter = m.values.iter().zip(&union.values).filter(|(a, b)| **a && **b).count();
                let uni = m.values.iter().zip(&union.values).filter(|(a, b)| **a || **b).count();
                (uni > 0).then(|| inter as f64 / uni as f64)
            })
            .collect();
        put("mask.detection_iou", mean(&ious));
    }
    if let (Some(sec), Some(net), Some(fg), Some(tr)) = (&b.manifest.refinement, &b.network, &b.foreground, &b.manifest.tracking) {
        let sets = refinement_sets(data, &tr.tracks, fg, sec.settings.stride, visibility_epsilon(b)?)?;
        let opts = RenderOptions::default();
        put("refine.actor_l1_base", Some(actor_l1(data, &sets, fg, None, &opts)?));
        put("refine.actor_l1_refined", Some(actor_l1(data, &sets, fg, Some(net), &opts)?));
    }
    Ok(m)
}

fn report(root: &Path) -> CliResult<Outcome> {
    let b = Bundle::load(root)?;
    let metrics = b.manifest.evaluation.clone();
    require("report", metrics.is_some(), "eval")?;
    let dir = root.join("report");
    if dir.is_dir() {
        std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    if let Some(p) = &b.manifest.positioning {
        let mut seen: BTreeMap<(usize, u32), usize> = BTreeMap::new();
        for run in &p.runs {
            let k = seen.entry((run.shot, run.track)).or_default();
            let path = dir.join(format!("loss_shot{}_track{}_run{}.csv", run.shot, run.track, k));
            *k += 1;
            std::fs::write(&path, loss_csv(&run.solution.history)).map_err(|e| CliError::io(&path, e))?;
        }
    }
    let config = serde_json::to_value(&b.manifest.config)?;
    let metrics = metrics.expect("checked");
    info!("report written to {}", dir.display());
    let file = MetricsFile {
        command: "report".into(),
        seed: 0,
        config: config.clone(),
        metrics: metrics.clone(),
    };
    write_metrics(&dir.join("metrics.json"), &file)?;
    Ok((config, metrics))
}
