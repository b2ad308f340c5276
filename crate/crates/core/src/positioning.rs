//! Places a posed body into the stage frame.
//!
//! The objective combines a robust depth term on visible vertices against the
//! aligned monocular depth, a Geman-McClure term on 2D keypoints, a jerk
//! penalty on joint tracks and a hinge that keeps visible vertices in front of
//! the rendered stage. Optimization runs in two stages: scale and translations
//! first with the pose frozen, then translations and poses with the scale
//! frozen and the depth term switched off.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics_raw, pose_backward, posed_from_kinematics, visible_vertices, BodyModel, Kinematics, PoseParams, PosedBody, StagePlacement};
use crate::camera::{CameraModel, MIN_DEPTH};
use crate::depthalign::{huber, huber_grad};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::raster::{DepthRaster, Mask};
use crate::splat::SceneRadius;

pub const KEYPOINT_TAU_PX: f64 = 1000.0;

/// Detected 2D joint locations with per-joint confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointObservation {
    pub pixels: Vec<Vector2<f64>>,
    pub confidence: Vec<f64>,
}

impl KeypointObservation {
    pub fn new(pixels: Vec<Vector2<f64>>, confidence: Vec<f64>) -> Result<Self> {
        let k = Self { pixels, confidence };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.confidence.len() {
            return Err(Error::InvalidPose(format!(
                "{} keypoints with {} confidences",
                self.pixels.len(),
                self.confidence.len()
            )));
        }
        if self.confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidPose("keypoint confidence outside [0, 1]".into()));
        }
        if self.pixels.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidPose("non-finite keypoint".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn total_confidence(&self) -> f64 {
        self.confidence.iter().sum()
    }
}

/// A loss value with its gradient on the input points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTerm {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
    /// Points that contributed (the normalizer for mean losses).
    pub count: usize,
}

impl PointTerm {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![Vector3::zeros(); n],
            count: 0,
        }
    }

    fn into_mean(mut self) -> Self {
        if self.count > 0 {
            let k = 1.0 / self.count as f64;
            self.value *= k;
            for g in &mut self.grad {
                *g *= k;
            }
        }
        self
    }
}

/// Mean Huber residual between the sampled aligned depth and the camera
/// depth of each stage-frame vertex. Vertices that project off the valid
/// raster are skipped and not counted.
pub fn loss_depth_actor(vertices: &[Vector3<f64>], aligned: &DepthRaster, camera: &CameraModel, delta: f64) -> PointTerm {
    let mut out = PointTerm::zero(vertices.len());
    let rt = camera.rotation.transpose();
    for (v, g) in vertices.iter().zip(&mut out.grad) {
        let pc = camera.to_camera(v);
        if pc.z <= MIN_DEPTH {
            continue;
        }
        let px = Vector2::new(camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy);
        let Some((d, dd)) = aligned.sample_bilinear(&px) else {
            continue;
        };
        let r = d - pc.z;
        out.value += huber(r, delta);
        out.count += 1;
        let dr_dpc = camera.projection_jacobian(&pc).transpose() * dd - Vector3::z();
        *g = rt * (huber_grad(r, delta) * dr_dpc);
    }
    if out.count == 0 {
        log::debug!("depth term has no visible vertices with valid depth");
    }
    out.into_mean()
}

/// `Σ_j c_j ρ(‖π(J_j) − ĵ_j‖₁)` with `ρ(γ) = γ² / (γ² + τ²)`. A joint behind
/// the camera contributes its full confidence and no gradient.
pub fn loss_keypoint(joints: &[Vector3<f64>], camera: &CameraModel, obs: &KeypointObservation, tau: f64) -> Result<PointTerm> {
    if joints.len() != obs.len() {
        return Err(Error::InvalidPose(format!("{} joints for {} keypoints", joints.len(), obs.len())));
    }
    if obs.total_confidence() <= 0.0 {
        return Err(Error::CannotPosition("all keypoint confidences are zero".into()));
    }
    let mut out = PointTerm::zero(joints.len());
    let rt = camera.rotation.transpose();
    let tau2 = tau * tau;
    for (j, joint) in joints.iter().enumerate() {
        let c = obs.confidence[j];
        if c == 0.0 {
            continue;
        }
        out.count += 1;
        let pc = camera.to_camera(joint);
        if pc.z <= MIN_DEPTH {
            out.value += c;
            continue;
        }
        let px = Vector2::new(camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy);
        let d = px - obs.pixels[j];
        let gamma = d.x.abs() + d.y.abs();
        let den = gamma * gamma + tau2;
        out.value += c * gamma * gamma / den;
        let drho = 2.0 * gamma * tau2 / (den * den);
        let sign = Vector2::new(d.x.signum(), d.y.signum()) * (c * drho);
        out.grad[j] = rt * (camera.projection_jacobian(&pc).transpose() * sign);
    }
    Ok(out)
}

/// Jerk penalty `Σ ‖Δ³ J_{f,j}‖² / ((F − 3) J)` on `tracks[f][j]`, with its
/// gradient in the same layout. Fewer than four frames gives zero.
pub fn loss_trajectory(tracks: &[Vec<Vector3<f64>>]) -> (f64, Vec<Vec<Vector3<f64>>>) {
    let nf = tracks.len();
    let nj = tracks.first().map_or(0, Vec::len);
    let mut grad = vec![vec![Vector3::zeros(); nj]; nf];
    if nf < 4 || nj == 0 {
        if nf > 0 {
            log::debug!("trajectory term needs four frames, got {nf}");
        }
        return (0.0, grad);
    }
    let norm = 1.0 / ((nf - 3) * nj) as f64;
    let mut value = 0.0;
    for f in 0..nf - 3 {
        for j in 0..nj {
            let jerk = tracks[f + 3][j] - 3.0 * tracks[f + 2][j] + 3.0 * tracks[f + 1][j] - tracks[f][j];
            value += jerk.norm_squared();
            let g = 2.0 * norm * jerk;
            grad[f + 3][j] += g;
            grad[f + 2][j] -= 3.0 * g;
            grad[f + 1][j] += 3.0 * g;
            grad[f][j] -= g;
        }
    }
    (value * norm, grad)
}

/// Mean hinge `max(0, z − D_stage(π(v)))` over vertices landing on valid
/// stage depth; the rest are skipped and not counted.
pub fn loss_penetration(vertices: &[Vector3<f64>], stage_depth: &DepthRaster, camera: &CameraModel) -> PointTerm {
    let mut out = PointTerm::zero(vertices.len());
    let rt = camera.rotation.transpose();
    for (v, g) in vertices.iter().zip(&mut out.grad) {
        let pc = camera.to_camera(v);
        if pc.z <= MIN_DEPTH {
            continue;
        }
        let px = Vector2::new(camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy);
        let Some((d, dd)) = stage_depth.sample_bilinear(&px) else {
            continue;
        };
        out.count += 1;
        let h = pc.z - d;
        if h > 0.0 {
            out.value += h;
            let dh_dpc = Vector3::z() - camera.projection_jacobian(&pc).transpose() * dd;
            *g = rt * dh_dpc;
        }
    }
    out.into_mean()
}

/// Fraction of `vertices` strictly behind the stage surface at their nearest
/// pixel, counted over those landing on valid stage depth.
pub fn penetration_fraction(vertices: &[Vector3<f64>], stage_depth: &DepthRaster, camera: &CameraModel) -> Option<f64> {
    let mut behind = 0usize;
    let mut total = 0usize;
    for v in vertices {
        let Some(p) = camera.project_point(v) else { continue };
        if !camera.in_image(&p.pixel) {
            continue;
        }
        let Some(d) = stage_depth.get(p.pixel.x.round() as usize, p.pixel.y.round() as usize) else {
            continue;
        };
        total += 1;
        if p.depth > d {
            behind += 1;
        }
    }
    (total > 0).then(|| behind as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositioningConfig {
    pub lambda_depth: f64,
    pub lambda_kpt: f64,
    pub lambda_traj: f64,
    pub lambda_penet: f64,
    /// Huber corner for the actor depth term, in stage units.
    pub delta: f64,
    /// Geman-McClure scale in pixels.
    pub tau: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub lr_translation: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    /// Each stage's learning rates decay to this fraction of their start.
    pub lr_final_fraction: f64,
    /// Stage-two translation rate as a fraction of `lr_translation`.
    pub stage2_translation_fraction: f64,
    /// Visible vertex sets are recomputed every this many iterations.
    pub visibility_interval: usize,
    /// Depth-buffer tolerance for self-visibility, in stage units.
    pub visibility_epsilon: f64,
}

impl PositioningConfig {
    pub fn full(radius: SceneRadius) -> Self {
        let r = radius.get();
        Self {
            lambda_depth: 1.0,
            lambda_kpt: 1.0,
            lambda_traj: 0.5,
            lambda_penet: 0.001,
            delta: r / 20.0,
            tau: KEYPOINT_TAU_PX,
            stage1_iters: 6000,
            stage2_iters: 2000,
            lr_translation: 1e-2 * r,
            lr_scale: 1e-2,
            lr_rotation: 1e-2,
            lr_final_fraction: 0.01,
            stage2_translation_fraction: 0.01,
            visibility_interval: 50,
            visibility_epsilon: 0.002 * r,
        }
    }

    /// Iteration counts cut to a tenth for quick runs.
    pub fn desk(radius: SceneRadius) -> Self {
        Self {
            stage1_iters: 600,
            stage2_iters: 200,
            ..Self::full(radius)
        }
    }

    pub fn with_iteration_scale(mut self, factor: f64) -> Self {
        self.stage1_iters = ((self.stage1_iters as f64 * factor).round() as usize).max(1);
        self.stage2_iters = ((self.stage2_iters as f64 * factor).round() as usize).max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_depth, self.lambda_kpt, self.lambda_traj, self.lambda_penet];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be non-negative: {lambdas:?}")));
        }
        let positive = [
            ("delta", self.delta),
            ("tau", self.tau),
            ("lr_translation", self.lr_translation),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_final_fraction", self.lr_final_fraction),
            ("stage2_translation_fraction", self.stage2_translation_fraction),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.visibility_interval == 0 || !(self.visibility_epsilon >= 0.0) {
            return Err(Error::InvalidConfig("visibility interval and tolerance".into()));
        }
        Ok(())
    }
}

/// Observations for one frame of one actor.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub frame_index: usize,
    pub camera: &'a CameraModel,
    /// Metric depth after alignment; `None` when the fit was rejected.
    pub aligned_depth: Option<&'a DepthRaster>,
    /// Rendered stage depth for the penetration term.
    pub stage_depth: Option<&'a DepthRaster>,
    /// Pixels where the actor is visible.
    pub actor_mask: &'a Mask,
    pub keypoints: &'a KeypointObservation,
    pub pose_init: &'a PoseParams,
}

/// Optional starting placement; missing parts use the default initializer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PositioningInit {
    pub scale: Option<f64>,
    pub translations: Option<Vec<Vector3<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub l_depth: f64,
    pub l_kpt: f64,
    pub l_traj: f64,
    pub l_penet: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSolution {
    pub frame_index: usize,
    pub translation: Vector3<f64>,
    pub pose: PoseParams,
    /// Whether an aligned depth map constrained this frame.
    pub depth_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorSolution {
    pub scale: f64,
    pub frames: Vec<FrameSolution>,
    pub history: Vec<LossRecord>,
}

impl ActorSolution {
    /// Stage-frame joints per frame.
    pub fn placed_joints(&self, model: &BodyModel) -> Result<Vec<Vec<Vector3<f64>>>> {
        self.frames
            .iter()
            .map(|f| {
                let kin = forward_kinematics_raw(model, &f.pose.to_raw())?;
                Ok(kin.joints.iter().map(|j| self.scale * j + f.translation).collect())
            })
            .collect()
    }

    /// Stage-frame vertices for solution frame `k`.
    pub fn placed_vertices(&self, model: &BodyModel, k: usize) -> Result<Vec<Vector3<f64>>> {
        let f = &self.frames[k];
        let kin = forward_kinematics_raw(model, &f.pose.to_raw())?;
        Ok(posed_from_kinematics(model, &kin)
            .vertices
            .iter()
            .map(|v| self.scale * v + f.translation)
            .collect())
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(loss_csv(&self.history).as_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }
}

pub const LOSS_CSV_HEADER: &str = "iter,l_depth,l_kpt,l_traj,l_penet,total";

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.l_depth, r.l_kpt, r.l_traj, r.l_penet, r.total
        ));
    }
    s
}

/// Camera-frame keypoint fit at unit scale, mapped to the stage frame. Returns
/// the translation placing `pose` so its joints best reproject onto the
/// keypoints.
pub fn naive_camera_placement(
    model: &BodyModel,
    pose: &PoseParams,
    keypoints: &KeypointObservation,
    camera: &CameraModel,
) -> Result<Vector3<f64>> {
    let joints = crate::body::lbs_pose(model, pose)?.joints;
    if joints.len() != keypoints.len() {
        return Err(Error::InvalidPose(format!("{} joints for {} keypoints", joints.len(), keypoints.len())));
    }
    let wsum = keypoints.total_confidence();
    if wsum <= 0.0 {
        return Err(Error::CannotPosition("all keypoint confidences are zero".into()));
    }
    // camera-frame joint offsets
    let rel: Vec<Vector3<f64>> = joints.iter().map(|j| camera.rotation * j).collect();
    let c = &keypoints.confidence;
    let mean2 = keypoints.pixels.iter().zip(c).fold(Vector2::zeros(), |a, (p, w)| a + p * *w) / wsum;
    let mean3 = rel.iter().zip(c).fold(Vector3::zeros(), |a, (p, w)| a + p * *w) / wsum;
    let spread2 = (keypoints.pixels.iter().zip(c).map(|(p, w)| w * (p - mean2).norm_squared()).sum::<f64>() / wsum).sqrt();
    let spread3 = (rel.iter().zip(c).map(|(p, w)| w * (p - mean3).xy().norm_squared()).sum::<f64>() / wsum).sqrt();
    let z0 = if spread2 > 1e-9 { camera.fx * spread3 / spread2 } else { 1.0 }.max(1e-3);
    let ray = Vector3::new((mean2.x - camera.cx) / camera.fx, (mean2.y - camera.cy) / camera.fy, 1.0);
    let mut tc = ray * z0 - mean3;
    let residuals = |tc: &Vector3<f64>| -> f64 {
        rel.iter()
            .zip(&keypoints.pixels)
            .zip(c)
            .map(|((p, k), w)| {
                let q = p + tc;
                if q.z <= MIN_DEPTH {
                    return f64::INFINITY;
                }
                let px = Vector2::new(camera.fx * q.x / q.z + camera.cx, camera.fy * q.y / q.z + camera.cy);
                w * (px - k).norm_squared()
            })
            .sum()
    };
    let mut damping = 1e-3;
    let mut cost = residuals(&tc);
    for _ in 0..100 {
        let mut jtj = nalgebra::Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for ((p, k), w) in rel.iter().zip(&keypoints.pixels).zip(c) {
            let q = p + tc;
            let px = Vector2::new(camera.fx * q.x / q.z + camera.cx, camera.fy * q.y / q.z + camera.cy);
            let jac = camera.projection_jacobian(&q);
            jtj += *w * jac.transpose() * jac;
            jtr += *w * jac.transpose() * (px - k);
        }
        let mut improved = false;
        for _ in 0..20 {
            let a = jtj + nalgebra::Matrix3::from_diagonal(&jtj.diagonal()) * damping;
            let Some(step) = a.lu().solve(&(-jtr)) else { break };
            let cand = tc + step;
            let cc = residuals(&cand);
            if cc < cost {
                tc = cand;
                improved = (cost - cc) > 1e-12 * cost.max(1e-12);
                cost = cc;
                damping = (damping * 0.3).max(1e-9);
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    // stage translation t satisfies R (J + t) + T = R J + tc
    Ok(camera.rotation.transpose() * (tc - camera.translation))
}

struct Layout {
    frames: usize,
    joints: usize,
}

impl Layout {
    fn len(&self) -> usize {
        1 + 3 * self.frames + 4 * self.joints * self.frames
    }
    fn t(&self, f: usize) -> usize {
        1 + 3 * f
    }
    fn q(&self, f: usize) -> usize {
        1 + 3 * self.frames + 4 * self.joints * f
    }
    fn translation(&self, x: &[f64], f: usize) -> Vector3<f64> {
        let i = self.t(f);
        Vector3::new(x[i], x[i + 1], x[i + 2])
    }
    fn quats(&self, x: &[f64], f: usize) -> Vec<Vector4<f64>> {
        let base = self.q(f);
        (0..self.joints)
            .map(|j| Vector4::from_column_slice(&x[base + 4 * j..base + 4 * j + 4]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Weights {
    depth: f64,
    kpt: f64,
    traj: f64,
    penet: f64,
}

struct FrameEval {
    kin: Kinematics,
    posed: PosedBody,
    depth: Option<PointTerm>,
    penet: Option<PointTerm>,
    kpt: Option<PointTerm>,
}

struct Problem<'a> {
    model: &'a BodyModel,
    frames: &'a [FrameInput<'a>],
    masked_depth: Vec<Option<DepthRaster>>,
    layout: Layout,
    cfg: &'a PositioningConfig,
}

impl Problem<'_> {
    fn posed(&self, x: &[f64], f: usize) -> Result<(Kinematics, PosedBody)> {
        let kin = forward_kinematics_raw(self.model, &self.layout.quats(x, f))?;
        let posed = posed_from_kinematics(self.model, &kin);
        Ok((kin, posed))
    }

    fn visible_sets(&self, x: &[f64]) -> Result<Vec<Vec<usize>>> {
        let s = x[0];
        (0..self.frames.len())
            .into_par_iter()
            .map(|f| {
                let input = &self.frames[f];
                let (kin, posed) = self.posed(x, f)?;
                let t = self.layout.translation(x, f);
                Ok(masked_visible_vertices(
                    self.model,
                    &kin,
                    &posed,
                    &StagePlacement { scale: s, translation: t },
                    input.camera,
                    input.actor_mask,
                    self.cfg.visibility_epsilon,
                ))
            })
            .collect()
    }

    /// Loss breakdown and gradient at `x`. Pose gradients are only formed
    /// when `pose_grad` is set.
    fn evaluate(&self, x: &[f64], visible: &[Vec<usize>], w: Weights, pose_grad: bool) -> Result<(LossRecord, Vec<f64>)> {
        let s = x[0];
        let nf = self.frames.len();
        let evals: Vec<FrameEval> = (0..nf)
            .into_par_iter()
            .map(|f| {
                let input = &self.frames[f];
                let (kin, posed) = self.posed(x, f)?;
                let t = self.layout.translation(x, f);
                let vis: Vec<Vector3<f64>> = visible[f].iter().map(|&i| s * posed.vertices[i] + t).collect();
                let depth = self.masked_depth[f]
                    .as_ref()
                    .map(|d| loss_depth_actor(&vis, d, input.camera, self.cfg.delta))
                    .filter(|term| term.count > 0);
                let penet = input
                    .stage_depth
                    .map(|d| loss_penetration(&vis, d, input.camera))
                    .filter(|term| term.count > 0);
                let kpt = if input.keypoints.total_confidence() > 0.0 {
                    let joints: Vec<Vector3<f64>> = posed.joints.iter().map(|j| s * j + t).collect();
                    Some(loss_keypoint(&joints, input.camera, input.keypoints, self.cfg.tau)?)
                } else {
                    None
                };
                Ok(FrameEval {
                    kin,
                    posed,
                    depth,
                    penet,
                    kpt,
                })
            })
            .collect::<Result<_>>()?;

        let tracks: Vec<Vec<Vector3<f64>>> = (0..nf)
            .map(|f| {
                let t = self.layout.translation(x, f);
                evals[f].posed.joints.iter().map(|j| s * j + t).collect()
            })
            .collect();
        let (l_traj, g_traj) = loss_trajectory(&tracks);

        let mean = |pick: fn(&FrameEval) -> Option<&PointTerm>| -> (f64, usize) {
            let terms: Vec<&PointTerm> = evals.iter().filter_map(pick).collect();
            let n = terms.len();
            let v = if n > 0 { terms.iter().map(|t| t.value).sum::<f64>() / n as f64 } else { 0.0 };
            (v, n)
        };
        let (l_depth, n_depth) = mean(|e| e.depth.as_ref());
        let (l_penet, n_penet) = mean(|e| e.penet.as_ref());
        let (l_kpt, n_kpt) = mean(|e| e.kpt.as_ref());
        let record = LossRecord {
            iter: 0,
            l_depth,
            l_kpt,
            l_traj,
            l_penet,
            total: w.depth * l_depth + w.kpt * l_kpt + w.traj * l_traj + w.penet * l_penet,
        };
        let wd = if n_depth > 0 { w.depth / n_depth as f64 } else { 0.0 };
        let wp = if n_penet > 0 { w.penet / n_penet as f64 } else { 0.0 };
        let wk = if n_kpt > 0 { w.kpt / n_kpt as f64 } else { 0.0 };

        let nv = self.model.num_vertices();
        let partials: Vec<(f64, Vector3<f64>, Option<Vec<Vector4<f64>>>)> = (0..nf)
            .into_par_iter()
            .map(|f| {
                let e = &evals[f];
                let mut gv = vec![Vector3::zeros(); visible[f].len()];
                if let Some(d) = &e.depth {
                    gv.iter_mut().zip(&d.grad).for_each(|(a, g)| *a += wd * g);
                }
                if let Some(p) = &e.penet {
                    gv.iter_mut().zip(&p.grad).for_each(|(a, g)| *a += wp * g);
                }
                let mut gj: Vec<Vector3<f64>> = g_traj[f].iter().map(|g| w.traj * g).collect();
                if let Some(k) = &e.kpt {
                    gj.iter_mut().zip(&k.grad).for_each(|(a, g)| *a += wk * g);
                }
                let mut gs = 0.0;
                let mut gt = Vector3::zeros();
                for (g, &i) in gv.iter().zip(&visible[f]) {
                    gs += g.dot(&e.posed.vertices[i]);
                    gt += g;
                }
                for (g, p) in gj.iter().zip(&e.posed.joints) {
                    gs += g.dot(p);
                    gt += g;
                }
                let gq = pose_grad.then(|| {
                    let mut full = vec![Vector3::zeros(); nv];
                    for (g, &i) in gv.iter().zip(&visible[f]) {
                        full[i] = s * g;
                    }
                    let gjs: Vec<Vector3<f64>> = gj.iter().map(|g| s * g).collect();
                    pose_backward(self.model, &self.layout.quats(x, f), &e.kin, &full, &gjs)
                });
                (gs, gt, gq)
            })
            .collect();

        let mut grad = vec![0.0; x.len()];
        for (f, (gs, gt, gq)) in partials.into_iter().enumerate() {
            grad[0] += gs;
            let i = self.layout.t(f);
            grad[i..i + 3].copy_from_slice(gt.as_slice());
            if let Some(gq) = gq {
                let base = self.layout.q(f);
                for (j, g) in gq.iter().enumerate() {
                    grad[base + 4 * j..base + 4 * j + 4].copy_from_slice(g.as_slice());
                }
            }
        }
        Ok((record, grad))
    }
}

/// Vertices of a placed body that face the camera unoccluded by the body
/// itself and project inside `mask`.
pub fn masked_visible_vertices(
    model: &BodyModel,
    kin: &Kinematics,
    posed: &PosedBody,
    placement: &StagePlacement,
    camera: &CameraModel,
    mask: &Mask,
    epsilon: f64,
) -> Vec<usize> {
    let placed: Vec<Vector3<f64>> = posed.vertices.iter().map(|v| placement.apply(v)).collect();
    let normals = crate::body::posed_normals(model, kin);
    visible_vertices(&placed, model.faces(), normals.as_deref(), camera, epsilon)
        .into_iter()
        .filter(|&i| camera.project_point(&placed[i]).is_some_and(|p| mask.contains_pixel(&p.pixel)))
        .collect()
}

/// Median of the valid depths under `mask`, with the mask centroid.
fn mask_depth_anchor(depth: &DepthRaster, mask: &Mask) -> Option<(Vector2<f64>, f64)> {
    let (w, h) = mask.dims();
    let mut depths = Vec::new();
    let mut centroid = Vector2::zeros();
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            centroid += Vector2::new(x as f64, y as f64);
            n += 1;
            if let Some(d) = depth.get(x, y) {
                depths.push(d);
            }
        }
    }
    if depths.is_empty() {
        return None;
    }
    depths.sort_by(f64::total_cmp);
    let m = depths.len();
    let median = if m % 2 == 1 { depths[m / 2] } else { 0.5 * (depths[m / 2 - 1] + depths[m / 2]) };
    Some((centroid / n as f64, median))
}

fn initial_translations(model: &BodyModel, frames: &[FrameInput<'_>], masked: &[Option<DepthRaster>]) -> Result<Vec<Vector3<f64>>> {
    let mut init: Vec<Option<Vector3<f64>>> = frames
        .iter()
        .zip(masked)
        .map(|(input, depth)| {
            if let Some((px, d)) = depth.as_ref().and_then(|d| mask_depth_anchor(d, input.actor_mask)) {
                return Some(input.camera.unproject(&px, d));
            }
            if input.keypoints.total_confidence() > 0.0 {
                return naive_camera_placement(model, input.pose_init, input.keypoints, input.camera).ok();
            }
            None
        })
        .collect();
    let known: Vec<usize> = (0..init.len()).filter(|&f| init[f].is_some()).collect();
    if known.is_empty() {
        return Err(Error::CannotPosition("no frame has usable depth or keypoints".into()));
    }
    for f in 0..init.len() {
        if init[f].is_none() {
            let nearest = *known.iter().min_by_key(|&&k| k.abs_diff(f)).expect("non-empty");
            init[f] = init[nearest];
        }
    }
    Ok(init.into_iter().map(|t| t.expect("filled")).collect())
}

/// Runs both optimization stages for one actor over consecutive frames.
pub fn position_actor(
    model: &BodyModel,
    frames: &[FrameInput<'_>],
    cfg: &PositioningConfig,
    init: &PositioningInit,
) -> Result<ActorSolution> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::CannotPosition("no frames".into()));
    }
    let nj = model.num_joints();
    for input in frames {
        input.keypoints.validate()?;
        if input.keypoints.len() != nj || input.pose_init.rotations.len() != nj {
            return Err(Error::InvalidPose(format!(
                "frame {}: expected {nj} keypoints and rotations",
                input.frame_index
            )));
        }
        input.camera.validate()?;
        let dims = (input.camera.width, input.camera.height);
        for r in [input.aligned_depth, input.stage_depth].into_iter().flatten() {
            if r.dims() != dims {
                return Err(Error::SizeMismatch { expected: dims, got: r.dims() });
            }
        }
        if input.actor_mask.dims() != dims {
            return Err(Error::SizeMismatch {
                expected: dims,
                got: input.actor_mask.dims(),
            });
        }
    }
    let usable = frames
        .iter()
        .any(|f| f.aligned_depth.is_some() || f.keypoints.total_confidence() > 0.0);
    if !usable {
        return Err(Error::CannotPosition("no frame has a depth fit or confident keypoints".into()));
    }
    let masked_depth: Vec<Option<DepthRaster>> = frames
        .iter()
        .map(|f| f.aligned_depth.map(|d| d.masked(f.actor_mask)).transpose())
        .collect::<Result<_>>()?;

    let layout = Layout {
        frames: frames.len(),
        joints: nj,
    };
    let mut x = vec![0.0; layout.len()];
    x[0] = init.scale.unwrap_or(1.0);
    if !(x[0] > 0.0 && x[0].is_finite()) {
        return Err(Error::InvalidConfig(format!("initial scale {}", x[0])));
    }
    let translations = match &init.translations {
        Some(t) if t.len() == frames.len() => t.clone(),
        Some(t) => {
            return Err(Error::InvalidConfig(format!(
                "{} initial translations for {} frames",
                t.len(),
                frames.len()
            )))
        }
        None => initial_translations(model, frames, &masked_depth)?,
    };
    for (f, (t, input)) in translations.iter().zip(frames).enumerate() {
        x[layout.t(f)..layout.t(f) + 3].copy_from_slice(t.as_slice());
        for (j, q) in input.pose_init.to_raw().iter().enumerate() {
            let i = layout.q(f) + 4 * j;
            x[i..i + 4].copy_from_slice(q.as_slice());
        }
    }

    let problem = Problem {
        model,
        frames,
        masked_depth,
        layout,
        cfg,
    };
    let mut history = Vec::with_capacity(cfg.stage1_iters + cfg.stage2_iters);
    let stages = [
        (
            cfg.stage1_iters,
            Weights {
                depth: cfg.lambda_depth,
                kpt: cfg.lambda_kpt,
                traj: cfg.lambda_traj,
                penet: cfg.lambda_penet,
            },
            false,
        ),
        (
            cfg.stage2_iters,
            Weights {
                depth: 0.0,
                kpt: cfg.lambda_kpt,
                traj: cfg.lambda_traj,
                penet: cfg.lambda_penet,
            },
            true,
        ),
    ];
    let q_start = problem.layout.q(0);
    for (iters, weights, second) in stages {
        if iters == 0 {
            continue;
        }
        let mut adam = Adam::new(x.len(), AdamConfig::default());
        let frac = cfg.lr_final_fraction;
        let lr_t = if second {
            cfg.lr_translation * cfg.stage2_translation_fraction
        } else {
            cfg.lr_translation
        };
        let sched_t = LrSchedule::decaying(lr_t, frac, iters)?;
        let sched_s = LrSchedule::decaying(cfg.lr_scale, frac, iters)?;
        let sched_q = LrSchedule::decaying(cfg.lr_rotation, frac, iters)?;
        let warmup = (iters / 10).max(1);
        let mut visible = Vec::new();
        for it in 0..iters {
            if it % cfg.visibility_interval == 0 {
                visible = problem.visible_sets(&x)?;
            }
            let (mut record, mut grad) = problem.evaluate(&x, &visible, weights, second)?;
            record.iter = history.len();
            if !record.total.is_finite() {
                return Err(Error::NonFiniteLoss { index: record.iter });
            }
            history.push(record);
            if second {
                grad[0] = 0.0;
            } else {
                grad[q_start..].iter_mut().for_each(|g| *g = 0.0);
            }
            let ramp = ((it + 1) as f64 / warmup as f64).min(1.0);
            let (lt, ls, lq) = (ramp * sched_t.lr(it), ramp * sched_s.lr(it), ramp * sched_q.lr(it));
            adam.step_with(&mut x, &grad, |i| {
                if i == 0 {
                    ls
                } else if i < q_start {
                    lt
                } else {
                    lq
                }
            })?;
            if x[0] <= 0.0 {
                return Err(Error::CannotPosition(format!("scale collapsed to {}", x[0])));
            }
            if second {
                for q in x[q_start..].chunks_exact_mut(4) {
                    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
                    if n > 1e-12 {
                        q.iter_mut().for_each(|v| *v /= n);
                    }
                }
            }
        }
    }

    let solution_frames = frames
        .iter()
        .enumerate()
        .map(|(f, input)| {
            Ok(FrameSolution {
                frame_index: input.frame_index,
                translation: problem.layout.translation(&x, f),
                pose: PoseParams::from_raw(&problem.layout.quats(&x, f))?,
                depth_used: problem.masked_depth[f].is_some(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ActorSolution {
        scale: x[0],
        frames: solution_frames,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::check_gradient;
    use nalgebra::Matrix3;

    fn camera() -> CameraModel {
        CameraModel::new(100.0, 100.0, 31.5, 23.5, Matrix3::identity(), Vector3::zeros(), 64, 48, 0).unwrap()
    }

    fn flat(pts: &[Vector3<f64>]) -> Vec<f64> {
        pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    fn unflat(x: &[f64]) -> Vec<Vector3<f64>> {
        x.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
    }

    fn ramp(w: usize, h: usize) -> DepthRaster {
        let mut d = DepthRaster::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                d.set(x, y, 2.0 + 0.03 * x as f64 + 0.02 * y as f64 + 0.1 * ((x * y) as f64 * 0.1).sin());
            }
        }
        d
    }

    #[test]
    fn depth_term_examples() {
        let cam = camera();
        let mut d = DepthRaster::empty(64, 48);
        for y in 0..48 {
            for x in 0..64 {
                d.set(x, y, 2.05);
            }
        }
        let v = [Vector3::new(0.0, 0.0, 2.0)];
        let t = loss_depth_actor(&v, &d, &cam, 0.5);
        assert!((t.value - 0.00125).abs() < 1e-12);
        assert_eq!(t.count, 1);
        let delta = 0.01;
        let v = [Vector3::new(0.0, 0.0, 2.05 - 3.0 * delta)];
        let t = loss_depth_actor(&v, &d, &cam, delta);
        assert!((t.value - 2.5 * delta * delta).abs() < 1e-12);
        let empty = loss_depth_actor(&[], &d, &cam, delta);
        assert_eq!((empty.value, empty.count), (0.0, 0));
    }

    #[test]
    fn keypoint_term_examples() {
        let cam = camera();
        let joint = Vector3::new(0.0, 0.0, 2.0);
        let px = cam.project_point(&joint).unwrap().pixel;
        let obs = KeypointObservation::new(vec![px + Vector2::new(600.0, 400.0)], vec![1.0]).unwrap();
        let t = loss_keypoint(&[joint], &cam, &obs, 1000.0).unwrap();
        assert!((t.value - 0.5).abs() < 1e-9);
        let behind = loss_keypoint(&[Vector3::new(0.0, 0.0, -1.0)], &cam, &obs, 1000.0).unwrap();
        assert_eq!(behind.value, 1.0);
        let zero = KeypointObservation::new(vec![px], vec![0.0]).unwrap();
        assert!(loss_keypoint(&[joint], &cam, &zero, 1000.0).is_err());
        assert!(KeypointObservation::new(vec![px], vec![1.5]).is_err());
    }

    #[test]
    fn trajectory_examples() {
        let track = |xs: &[f64]| -> Vec<Vec<Vector3<f64>>> { xs.iter().map(|&x| vec![Vector3::new(x, 0.0, 0.0)]).collect() };
        assert_eq!(loss_trajectory(&track(&[0.0, 0.0, 0.0, 1.0])).0, 1.0);
        let quad: Vec<f64> = (0..10).map(|f| 0.5 * (f * f) as f64 - 2.0 * f as f64 + 3.0).collect();
        assert!(loss_trajectory(&track(&quad)).0.abs() < 1e-20);
        assert_eq!(loss_trajectory(&track(&[0.0, 5.0, 1.0])).0, 0.0);
    }

    #[test]
    fn penetration_example() {
        let cam = camera();
        let mut d = DepthRaster::empty(64, 48);
        for y in 0..48 {
            for x in 0..64 {
                d.set(x, y, 3.0);
            }
        }
        let v = [Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.1, 0.0, 2.5), Vector3::new(0.0, 0.1, 3.3)];
        let t = loss_penetration(&v, &d, &cam);
        assert!((t.value - 0.1).abs() < 1e-12);
        assert_eq!(t.count, 3);
        // an invalid stage pixel drops its vertex from the count
        let px = cam.project_point(&v[0]).unwrap().pixel;
        d.invalidate(px.x.round() as usize, px.y.round() as usize);
        let t = loss_penetration(&v, &d, &cam);
        assert_eq!(t.count, 2);
        assert!((t.value - 0.15).abs() < 1e-12);
        assert_eq!(penetration_fraction(&v, &d, &cam), Some(0.5));
    }

    #[test]
    fn point_term_gradients_match_finite_differences() {
        let cam = camera();
        let d = ramp(64, 48);
        let pts = vec![
            Vector3::new(0.05, -0.03, 2.4),
            Vector3::new(-0.2, 0.1, 2.9),
            Vector3::new(0.3, 0.2, 1.7),
        ];
        let depth = |x: &[f64]| {
            let t = loss_depth_actor(&unflat(x), &d, &cam, 0.3);
            (t.value, flat(&t.grad))
        };
        let r = check_gradient(depth, &flat(&pts), 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let penet = |x: &[f64]| {
            let t = loss_penetration(&unflat(x), &d, &cam);
            (t.value, flat(&t.grad))
        };
        let r = check_gradient(penet, &flat(&pts), 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let obs = KeypointObservation::new(
            vec![Vector2::new(10.0, 13.0), Vector2::new(40.0, 2.0), Vector2::new(21.0, 30.0)],
            vec![1.0, 0.5, 0.8],
        )
        .unwrap();
        let kpt = |x: &[f64]| {
            let t = loss_keypoint(&unflat(x), &cam, &obs, 50.0).unwrap();
            (t.value, flat(&t.grad))
        };
        let r = check_gradient(kpt, &flat(&pts), 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn trajectory_gradient_matches_finite_differences() {
        let tracks: Vec<Vec<Vector3<f64>>> = (0..6)
            .map(|f| (0..2).map(|j| Vector3::new((f * j) as f64 * 0.3, (f as f64).sin(), 0.1 * j as f64)).collect())
            .collect();
        let pack = |t: &[Vec<Vector3<f64>>]| t.iter().flat_map(|r| flat(r)).collect::<Vec<_>>();
        let f = |x: &[f64]| {
            let t: Vec<Vec<Vector3<f64>>> = unflat(x).chunks(2).map(|c| c.to_vec()).collect();
            let (v, g) = loss_trajectory(&t);
            (v, pack(&g))
        };
        let r = check_gradient(f, &pack(&tracks), 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn config_presets() {
        let r = SceneRadius::new(2.0).unwrap();
        let full = PositioningConfig::full(r);
        assert_eq!((full.stage1_iters, full.stage2_iters), (6000, 2000));
        assert_eq!(full.delta, 0.1);
        assert_eq!(full.tau, 1000.0);
        let desk = PositioningConfig::desk(r);
        assert_eq!((desk.stage1_iters, desk.stage2_iters), (600, 200));
        assert_eq!(
            (desk.lambda_depth, desk.lambda_kpt, desk.lambda_traj, desk.lambda_penet),
            (1.0, 1.0, 0.5, 0.001)
        );
        let bad = PositioningConfig {
            lambda_kpt: -1.0,
            ..desk
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_header() {
        let s = loss_csv(&[LossRecord {
            iter: 3,
            l_depth: 1.0,
            l_kpt: 2.0,
            l_traj: 0.0,
            l_penet: 0.5,
            total: 3.5,
        }]);
        assert_eq!(s, "iter,l_depth,l_kpt,l_traj,l_penet,total\n3,1,2,0,0.5,3.5\n");
    }
}
