//! Scene-level glue: observations in, aligned depth, positioned actors,
//! linked tracks, foreground masks, refinement inputs and metrics out.

use std::collections::BTreeMap;
use std::ops::Range;

use log::warn;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, lbs_pose, posed_from_kinematics, BodyModel, PoseParams, StagePlacement};
use crate::camera::CameraModel;
use crate::compositor::{render, render_with, RenderOptions};
use crate::depthalign::{align_depth, points_clear_of_masks, AffineDepthFit};
use crate::error::{Error, Result};
use crate::masking::foreground_mask;
use crate::positioning::{
    loss_trajectory, masked_visible_vertices, naive_camera_placement, penetration_fraction, position_actor, ActorSolution,
    FrameInput, FrameSolution, KeypointObservation, PositioningConfig, PositioningInit,
};
use crate::raster::{ColorImage, DepthRaster, Mask};
use crate::refine::{train_refinement, FittingNetwork, RefineConfig, RefineFrame, RefineReport};
use crate::splat::{compute_scene_radius, SceneRadius, Splat, SplatSet, SplatTag};
use crate::synth::{ActorTruth, SyntheticScene};
use crate::tracking::{compute_mted_mped, link_shots, ActorTrack, BoundaryReport, LinkOptions, Provenance, ShotTracks, TrackState};

/// One detected actor in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Identity within the shot.
    pub track: u32,
    pub mask: Mask,
    pub keypoints: KeypointObservation,
    pub pose_init: PoseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub shot: usize,
    pub camera: CameraModel,
    pub image: ColorImage,
    pub mono_depth: DepthRaster,
    pub observations: Vec<Observation>,
}

impl FrameRecord {
    pub fn observation(&self, track: u32) -> Option<&Observation> {
        self.observations.iter().find(|o| o.track == track)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub first_frame: usize,
    pub frames: usize,
}

impl ShotRecord {
    pub fn range(&self) -> Range<usize> {
        self.first_frame..self.first_frame + self.frames
    }
}

/// Everything the pipeline consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub body: BodyModel,
    pub stage: SplatSet,
    /// Reconstructed stage points per shot.
    pub stage_points: Vec<Vec<Vector3<f64>>>,
    pub shots: Vec<ShotRecord>,
    pub frames: Vec<FrameRecord>,
}

impl SceneData {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn scene_radius(&self) -> Result<SceneRadius> {
        compute_scene_radius(&self.stage.centers())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Bundle(m));
        let mut next = 0;
        for (k, s) in self.shots.iter().enumerate() {
            if s.first_frame != next || s.frames == 0 {
                return bad(format!("shot {k} does not continue the timeline"));
            }
            next += s.frames;
        }
        if next != self.frames.len() {
            return bad(format!("shots cover {next} frames, scene has {}", self.frames.len()));
        }
        if self.stage_points.len() != self.shots.len() {
            return bad("one stage point set per shot is required".into());
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i || !self.shots.get(f.shot).is_some_and(|s| s.range().contains(&i)) {
                return bad(format!("frame {i} has inconsistent index or shot"));
            }
            let dims = (f.camera.width, f.camera.height);
            if f.image.dims() != dims || f.mono_depth.dims() != dims || f.observations.iter().any(|o| o.mask.dims() != dims) {
                return bad(format!("frame {i} rasters do not match its camera"));
            }
            let nj = self.body.num_joints();
            if f.observations.iter().any(|o| o.keypoints.len() != nj || o.pose_init.rotations.len() != nj) {
                return bad(format!("frame {i} has a detection with the wrong joint count"));
            }
        }
        Ok(())
    }
}

/// Generator truth kept apart from the observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub depth_affine: Vec<[f64; 2]>,
    pub actors: Vec<ActorTruth>,
    /// `identities[shot][track]` is the true actor index.
    pub identities: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn actor_of(&self, shot: usize, track: u32) -> Option<usize> {
        self.identities.get(shot)?.get(track as usize).copied()
    }

    pub fn track_of(&self, shot: usize, actor: usize) -> Option<u32> {
        self.identities
            .get(shot)?
            .iter()
            .position(|&a| a == actor)
            .map(|t| t as u32)
    }
}

/// Per-shot identities are a rotation of the actor order, so linking across
/// shots cannot rely on matching ids.
pub fn local_track_id(actor: usize, shot: usize, num_actors: usize) -> u32 {
    ((actor + shot) % num_actors) as u32
}

pub fn from_synthetic(scene: &SyntheticScene) -> (SceneData, GroundTruth) {
    let na = scene.actors.len();
    let frames = scene
        .frames
        .iter()
        .map(|obs| {
            let mut observations: Vec<Observation> = obs
                .actors
                .iter()
                .enumerate()
                .filter_map(|(k, a)| {
                    let det = a.detection.as_ref()?;
                    Some(Observation {
                        track: local_track_id(k, obs.shot, na),
                        mask: a.mask.clone(),
                        keypoints: det.keypoints.clone(),
                        pose_init: det.pose_init.clone(),
                    })
                })
                .collect();
            observations.sort_by_key(|o| o.track);
            FrameRecord {
                index: obs.frame,
                shot: obs.shot,
                camera: obs.camera.clone(),
                image: obs.image.clone(),
                mono_depth: obs.mono_depth.clone(),
                observations,
            }
        })
        .collect();
    let data = SceneData {
        body: scene.body.clone(),
        stage: scene.stage.clone(),
        stage_points: scene.stage_points.clone(),
        shots: scene
            .shots
            .iter()
            .map(|s| ShotRecord {
                first_frame: s.first_frame,
                frames: s.frames,
            })
            .collect(),
        frames,
    };
    let identities = (0..scene.shots.len())
        .map(|s| {
            let mut ids = vec![0; na];
            for (a, slot) in (0..na).map(|a| (a, local_track_id(a, s, na) as usize)) {
                ids[slot] = a;
            }
            ids
        })
        .collect();
    let truth = GroundTruth {
        depth_affine: scene.frames.iter().map(|f| f.depth_affine).collect(),
        actors: scene.actors.clone(),
        identities,
    };
    (data, truth)
}

/// Huber threshold of the alignment fit as a fraction of the scene radius.
pub const ALIGN_DELTA_FRACTION: f64 = 0.01;

/// Fits the frame's mono depth to the stage points not covered by any
/// detection mask.
pub fn align_frame(data: &SceneData, frame: usize, delta1: f64) -> Result<AffineDepthFit> {
    let f = &data.frames[frame];
    let masks: Vec<&Mask> = f.observations.iter().map(|o| &o.mask).collect();
    let points = points_clear_of_masks(&data.stage_points[f.shot], &f.camera, &masks);
    align_depth(&f.mono_depth, &points, &f.camera, delta1)
}

/// Fits for every frame; frames whose fit fails outright get `None`.
pub fn align_all(data: &SceneData, delta1: f64) -> Vec<Option<AffineDepthFit>> {
    (0..data.num_frames())
        .into_par_iter()
        .map(|f| match align_frame(data, f, delta1) {
            Ok(fit) => Some(fit),
            Err(e) => {
                warn!("frame {f}: depth alignment failed: {e}");
                None
            }
        })
        .collect()
}

/// Aligned metric depth for frames with an accepted fit.
pub fn aligned_depths(data: &SceneData, fits: &[Option<AffineDepthFit>]) -> Vec<Option<DepthRaster>> {
    data.frames
        .iter()
        .zip(fits)
        .map(|(f, fit)| fit.filter(|x| x.is_accepted()).map(|x| x.apply(&f.mono_depth)))
        .collect()
}

fn same_view(a: &CameraModel, b: &CameraModel) -> bool {
    a.fx == b.fx
        && a.fy == b.fy
        && a.cx == b.cx
        && a.cy == b.cy
        && a.rotation == b.rotation
        && a.translation == b.translation
        && a.width == b.width
        && a.height == b.height
}

/// Rendered stage depth per frame; consecutive frames with the same view
/// share one render.
pub fn stage_depths(data: &SceneData) -> Vec<DepthRaster> {
    let mut out: Vec<DepthRaster> = Vec::with_capacity(data.num_frames());
    for (i, f) in data.frames.iter().enumerate() {
        if i > 0 && same_view(&data.frames[i - 1].camera, &f.camera) {
            let prev = out[i - 1].clone();
            out.push(prev);
        } else {
            out.push(render(&data.stage.splats, &f.camera).depth);
        }
    }
    out
}

/// A positioned run of consecutive frames of one shot-local track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSolution {
    pub shot: usize,
    pub track: u32,
    pub solution: ActorSolution,
}

impl RunSolution {
    pub fn frame_indices(&self) -> Vec<usize> {
        self.solution.frames.iter().map(|f| f.frame_index).collect()
    }

    pub fn state_at(&self, frame: usize) -> Option<TrackState> {
        let f = self.solution.frames.iter().find(|f| f.frame_index == frame)?;
        Some(TrackState {
            pose: f.pose.clone(),
            placement: StagePlacement {
                scale: self.solution.scale,
                translation: f.translation,
            },
            provenance: Provenance::Visible,
        })
    }
}

/// Maximal runs of consecutive frames in which a track is observed, ordered
/// by shot, track and start frame.
pub fn observation_runs(data: &SceneData) -> Vec<(usize, u32, Vec<usize>)> {
    let mut out = Vec::new();
    for (k, shot) in data.shots.iter().enumerate() {
        let mut by_track: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for f in shot.range() {
            for o in &data.frames[f].observations {
                by_track.entry(o.track).or_default().push(f);
            }
        }
        for (track, frames) in by_track {
            let mut run = vec![frames[0]];
            for &f in &frames[1..] {
                if f == run[run.len() - 1] + 1 {
                    run.push(f);
                } else {
                    out.push((k, track, std::mem::replace(&mut run, vec![f])));
                }
            }
            out.push((k, track, run));
        }
    }
    out
}

/// Positions every observation run.
pub fn position_all(
    data: &SceneData,
    aligned: &[Option<DepthRaster>],
    stage: &[DepthRaster],
    cfg: &PositioningConfig,
) -> Result<Vec<RunSolution>> {
    let mut out = Vec::new();
    for (shot, track, frames) in observation_runs(data) {
        let inputs: Vec<FrameInput<'_>> = frames
            .iter()
            .map(|&f| {
                let rec = &data.frames[f];
                let o = rec.observation(track).expect("run frames hold the track");
                FrameInput {
                    frame_index: f,
                    camera: &rec.camera,
                    aligned_depth: aligned[f].as_ref(),
                    stage_depth: Some(&stage[f]),
                    actor_mask: &o.mask,
                    keypoints: &o.keypoints,
                    pose_init: &o.pose_init,
                }
            })
            .collect();
        let solution = position_actor(&data.body, &inputs, cfg, &PositioningInit::default())?;
        out.push(RunSolution { shot, track, solution });
    }
    Ok(out)
}

/// Camera-frame baseline: unit scale, the detector's pose, and per-frame
/// keypoint-only translations.
pub fn naive_all(data: &SceneData) -> Result<Vec<RunSolution>> {
    observation_runs(data)
        .into_iter()
        .map(|(shot, track, frames)| {
            let frames = frames
                .iter()
                .map(|&f| {
                    let rec = &data.frames[f];
                    let o = rec.observation(track).expect("run frames hold the track");
                    Ok(FrameSolution {
                        frame_index: f,
                        translation: naive_camera_placement(&data.body, &o.pose_init, &o.keypoints, &rec.camera)?,
                        pose: o.pose_init.clone(),
                        depth_used: false,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(RunSolution {
                shot,
                track,
                solution: ActorSolution {
                    scale: 1.0,
                    frames,
                    history: Vec::new(),
                },
            })
        })
        .collect()
}

/// Linked tracks and, per track, the `(shot, local track)` pieces it was
/// built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Linked {
    pub tracks: Vec<ActorTrack>,
    pub reports: Vec<BoundaryReport>,
    pub origins: Vec<Vec<(usize, u32)>>,
}

pub fn link_runs(data: &SceneData, runs: &[RunSolution], opts: &LinkOptions) -> Result<Linked> {
    let nf = data.num_frames();
    let shots: Vec<ShotTracks> = data
        .shots
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut by_track: BTreeMap<u32, ActorTrack> = BTreeMap::new();
            for r in runs.iter().filter(|r| r.shot == k) {
                let t = by_track.entry(r.track).or_insert_with(|| ActorTrack::new(r.track, nf));
                for f in r.frame_indices() {
                    t.states[f] = r.state_at(f);
                }
            }
            ShotTracks {
                frames: s.range(),
                tracks: by_track.into_values().collect(),
            }
        })
        .collect();
    let (tracks, reports) = link_shots(&data.body, &shots, opts)?;
    let mut origins: Vec<Vec<(usize, u32)>> = vec![Vec::new(); tracks.len()];
    if let Some(first) = shots.first() {
        for (g, t) in first.tracks.iter().enumerate() {
            origins[g].push((0, t.actor_id));
        }
    }
    for (k, rep) in reports.iter().enumerate() {
        let local = &shots[k + 1].tracks;
        for &(g, l) in &rep.matched {
            origins[g].push((k + 1, local[l].actor_id));
        }
        for &(g, l) in &rep.started {
            origins[g].push((k + 1, local[l].actor_id));
        }
    }
    Ok(Linked { tracks, reports, origins })
}

pub const ACTOR_SPLAT_RADIUS: f64 = 0.035;
pub const ACTOR_SPLAT_OPACITY: f64 = 0.8;

/// Isotropic splats on every `stride`-th vertex, radii grown with the
/// stride so coverage stays roughly constant.
pub fn body_splats(vertices: &[Vector3<f64>], colors: &[Vector3<f64>], scale: f64, stride: usize, tag: SplatTag) -> Result<SplatSet> {
    let stride = stride.max(1);
    let radius = ACTOR_SPLAT_RADIUS * scale * (stride as f64).sqrt();
    let splats = vertices
        .iter()
        .zip(colors)
        .step_by(stride)
        .map(|(v, c)| Splat::isotropic(*v, radius, *c, ACTOR_SPLAT_OPACITY))
        .collect::<Result<_>>()?;
    Ok(SplatSet::new(tag, splats))
}

pub fn placed_vertices(model: &BodyModel, state: &TrackState) -> Result<Vec<Vector3<f64>>> {
    Ok(lbs_pose(model, &state.pose)?
        .vertices
        .iter()
        .map(|v| state.placement.apply(v))
        .collect())
}

/// Foreground masks from the linked tracks' splat bodies against the stage.
pub fn foreground_masks(data: &SceneData, tracks: &[ActorTrack], stage: &[DepthRaster], stride: usize) -> Result<Vec<Mask>> {
    let gray = vec![Vector3::repeat(0.5); data.body.num_vertices()];
    (0..data.num_frames())
        .into_par_iter()
        .map(|f| {
            let cam = &data.frames[f].camera;
            let depths: Vec<DepthRaster> = tracks
                .iter()
                .filter_map(|t| t.state(f).map(|s| (t.actor_id, s)))
                .map(|(id, s)| {
                    let set = body_splats(&placed_vertices(&data.body, s)?, &gray, s.placement.scale, stride, SplatTag::Actor(id))?;
                    Ok(render(&set.splats, cam).depth)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&DepthRaster> = depths.iter().collect();
            foreground_mask(&stage[f], &refs)
        })
        .collect()
}

/// Per-vertex colors averaged from the images over frames where a vertex
/// of the track is visible inside the foreground mask; unseen vertices are
/// mid gray.
pub fn vertex_colors(data: &SceneData, track: &ActorTrack, masks: &[Mask], epsilon: f64) -> Result<Vec<Vector3<f64>>> {
    let nv = data.body.num_vertices();
    let mut sum = vec![Vector3::zeros(); nv];
    let mut count = vec![0usize; nv];
    for f in track.frames_with(Provenance::Visible) {
        let s = track.state(f).expect("visible frame");
        let kin = forward_kinematics(&data.body, s.pose.local_matrices())?;
        let posed = posed_from_kinematics(&data.body, &kin);
        let cam = &data.frames[f].camera;
        for i in masked_visible_vertices(&data.body, &kin, &posed, &s.placement, cam, &masks[f], epsilon) {
            let p = cam.project_point(&s.placement.apply(&posed.vertices[i])).expect("visible vertices project");
            sum[i] += data.frames[f].image.get(p.pixel.x.round() as usize, p.pixel.y.round() as usize);
            count[i] += 1;
        }
    }
    Ok(sum
        .into_iter()
        .zip(count)
        .map(|(s, n)| if n > 0 { s / n as f64 } else { Vector3::repeat(0.5) })
        .collect())
}

/// Clip-normalized time of a frame.
pub fn frame_time(frame: usize, num_frames: usize) -> f64 {
    if num_frames > 1 {
        frame as f64 / (num_frames - 1) as f64
    } else {
        0.0
    }
}

/// Positioned actor splat sets per frame for refinement.
pub fn refinement_sets(data: &SceneData, tracks: &[ActorTrack], masks: &[Mask], stride: usize, epsilon: f64) -> Result<Vec<Vec<SplatSet>>> {
    let colors: Vec<Vec<Vector3<f64>>> = tracks
        .iter()
        .map(|t| vertex_colors(data, t, masks, epsilon))
        .collect::<Result<_>>()?;
    (0..data.num_frames())
        .map(|f| {
            tracks
                .iter()
                .zip(&colors)
                .filter_map(|(t, c)| t.state(f).map(|s| (t.actor_id, s, c)))
                .map(|(id, s, c)| body_splats(&placed_vertices(&data.body, s)?, c, s.placement.scale, stride, SplatTag::Actor(id)))
                .collect()
        })
        .collect()
}

/// Trains the residual network on every frame with actors and a non-empty
/// foreground mask.
pub fn refine_scene(data: &SceneData, sets: &[Vec<SplatSet>], masks: &[Mask], cfg: &RefineConfig) -> Result<(FittingNetwork, RefineReport)> {
    let nf = data.num_frames();
    let frames: Vec<RefineFrame<'_>> = (0..nf)
        .filter(|&f| !sets[f].is_empty() && masks[f].count() > 0)
        .map(|f| RefineFrame {
            time: frame_time(f, nf),
            camera: &data.frames[f].camera,
            actors: &sets[f],
            target: &data.frames[f].image,
            mask: &masks[f],
        })
        .collect();
    train_refinement(&frames, cfg)
}

/// Masked L1 of the actor render against the frame, per frame with actors.
pub fn actor_l1(data: &SceneData, sets: &[Vec<SplatSet>], masks: &[Mask], net: Option<&FittingNetwork>, opts: &RenderOptions) -> Result<f64> {
    let nf = data.num_frames();
    let mut total = 0.0;
    let mut n = 0usize;
    for f in 0..nf {
        if sets[f].is_empty() || masks[f].count() == 0 {
            continue;
        }
        let refined = match net {
            Some(net) => crate::refine::apply_residuals(&sets[f], net, frame_time(f, nf))?,
            None => sets[f].clone(),
        };
        let splats: Vec<Splat> = refined.into_iter().flat_map(|s| s.splats).collect();
        let r = render_with(&splats, &data.frames[f].camera, opts);
        if let Some((l1, _)) = crate::compositor::masked_l1_grad(&r.color, &data.frames[f].image, &masks[f]) {
            total += l1;
            n += 1;
        }
    }
    Ok(if n > 0 { total / n as f64 } else { 0.0 })
}

/// Largest relative errors of the recovered affine depth parameters.
pub fn depth_fit_errors(fits: &[Option<AffineDepthFit>], truth: &GroundTruth) -> Option<(f64, f64)> {
    let errs: Vec<(f64, f64)> = fits
        .iter()
        .zip(&truth.depth_affine)
        .filter_map(|(fit, [a, b])| fit.map(|x| ((x.a - a).abs() / a.abs(), (x.b - b).abs() / b.abs())))
        .collect();
    (!errs.is_empty()).then(|| errs.iter().fold((0.0, 0.0), |m, e| (f64::max(m.0, e.0), f64::max(m.1, e.1))))
}

/// Jerk penalty of a run's placed joints.
pub fn run_jerk(model: &BodyModel, run: &RunSolution) -> Result<f64> {
    Ok(loss_trajectory(&run.solution.placed_joints(model)?).0)
}

/// Mean pixel distance between projected joints and confident keypoints.
pub fn run_keypoint_error(data: &SceneData, run: &RunSolution) -> Result<f64> {
    let joints = run.solution.placed_joints(&data.body)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (fs, js) in run.solution.frames.iter().zip(&joints) {
        let rec = &data.frames[fs.frame_index];
        let o = rec
            .observation(run.track)
            .ok_or_else(|| Error::Tracking(format!("no observation of track {} in frame {}", run.track, fs.frame_index)))?;
        for ((j, px), c) in js.iter().zip(&o.keypoints.pixels).zip(&o.keypoints.confidence) {
            if *c <= 0.0 {
                continue;
            }
            if let Some(p) = rec.camera.project_point(j) {
                total += (p.pixel - px).norm();
                n += 1;
            }
        }
    }
    Ok(if n > 0 { total / n as f64 } else { 0.0 })
}

/// Mean over frames of the fraction of visible vertices behind the stage.
pub fn run_penetration(data: &SceneData, run: &RunSolution, stage: &[DepthRaster], epsilon: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for fs in &run.solution.frames {
        let f = fs.frame_index;
        let rec = &data.frames[f];
        let Some(o) = rec.observation(run.track) else { continue };
        let kin = forward_kinematics(&data.body, fs.pose.local_matrices())?;
        let posed = posed_from_kinematics(&data.body, &kin);
        let placement = StagePlacement {
            scale: run.solution.scale,
            translation: fs.translation,
        };
        let vis: Vec<Vector3<f64>> = masked_visible_vertices(&data.body, &kin, &posed, &placement, &rec.camera, &o.mask, epsilon)
            .into_iter()
            .map(|i| placement.apply(&posed.vertices[i]))
            .collect();
        if let Some(p) = penetration_fraction(&vis, &stage[f], &rec.camera) {
            total += p;
            n += 1;
        }
    }
    Ok(if n > 0 { total / n as f64 } else { 0.0 })
}

/// Relative scale error and largest translation error of a run against
/// the true actor.
pub fn run_placement_errors(run: &RunSolution, truth: &ActorTruth) -> (f64, f64) {
    let ds = (run.solution.scale - truth.scale).abs() / truth.scale;
    let dt = run
        .solution
        .frames
        .iter()
        .map(|f| (f.translation - truth.translations[f.frame_index]).norm())
        .fold(0.0, f64::max);
    (ds, dt)
}

/// MTED and MPED per shot boundary, pairing each true actor's state on the
/// last frame of one shot with its state on the first frame of the next.
/// Boundaries where no actor is positioned on both sides are skipped.
pub fn boundary_errors(data: &SceneData, runs: &[RunSolution], truth: &GroundTruth) -> Result<Vec<(usize, f64, f64)>> {
    let state = |shot: usize, actor: usize, frame: usize| -> Option<TrackState> {
        let track = truth.track_of(shot, actor)?;
        runs.iter()
            .filter(|r| r.shot == shot && r.track == track)
            .find_map(|r| r.state_at(frame))
    };
    let mut out = Vec::new();
    for k in 1..data.shots.len() {
        let last = data.shots[k].first_frame - 1;
        let first = data.shots[k].first_frame;
        let pairs: Vec<(TrackState, TrackState)> = (0..truth.actors.len())
            .filter_map(|a| Some((state(k - 1, a, last)?, state(k, a, first)?)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let refs: Vec<(&TrackState, &TrackState)> = pairs.iter().map(|(a, b)| (a, b)).collect();
        let (mted, mped) = compute_mted_mped(&data.body, &refs)?;
        out.push((k, mted, mped));
    }
    Ok(out)
}
