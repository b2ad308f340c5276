//! Seeded synthetic scenes with full ground truth.
//!
//! A room-box stage with a couch is built from splats, actors are capsule-like
//! humanoids made of one ellipsoid per joint, and cameras are static within a
//! shot. Ground-truth depth and color come from a brute-force splat renderer
//! for the stage and exact ray-ellipsoid intersection for the actors; none of
//! it goes through the compositor.

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, lbs_pose, BodyModel, Kinematics, PoseParams, StagePlacement};
use crate::camera::{CameraModel, MIN_DEPTH};
use crate::compositor::{RenderedFrame, MIN_ACCUMULATED_ALPHA};
use crate::depthalign::points_clear_of_masks;
use crate::error::{Error, Result};
use crate::pipeline::body_splats;
use crate::positioning::KeypointObservation;
use crate::raster::{ColorImage, DepthRaster, Mask};
use crate::rotation::axis_angle;
use crate::splat::{compute_scene_radius, Splat, SplatSet, SplatTag};

const JOINT_PARENTS: [Option<usize>; 24] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

const JOINT_POSITIONS: [[f64; 3]; 24] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, 0.0],
    [0.10, -0.48, 0.0],
    [-0.10, -0.48, 0.0],
    [0.0, 0.24, 0.0],
    [0.10, -0.88, -0.02],
    [-0.10, -0.88, -0.02],
    [0.0, 0.30, 0.0],
    [0.10, -0.94, 0.10],
    [-0.10, -0.94, 0.10],
    [0.0, 0.50, 0.0],
    [0.08, 0.42, 0.0],
    [-0.08, 0.42, 0.0],
    [0.0, 0.62, 0.02],
    [0.18, 0.44, 0.0],
    [-0.18, 0.44, 0.0],
    [0.44, 0.44, 0.0],
    [-0.44, 0.44, 0.0],
    [0.68, 0.44, 0.0],
    [-0.68, 0.44, 0.0],
    [0.76, 0.44, 0.0],
    [-0.76, 0.44, 0.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Material {
    Skin,
    Shirt,
    Pants,
    Shoe,
}

/// One ellipsoid rigidly bound to a joint, axis-aligned in the rest pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyPart {
    pub joint: usize,
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    material: Material,
}

/// The 24 parts of the synthetic humanoid, one per joint.
pub fn humanoid_parts() -> Vec<BodyPart> {
    use Material::*;
    let p = |joint, c: [f64; 3], a: [f64; 3], material| BodyPart {
        joint,
        center: Vector3::from(c),
        semi_axes: Vector3::from(a),
        material,
    };
    vec![
        p(0, [0.0, -0.02, 0.0], [0.16, 0.10, 0.10], Pants),
        p(1, [0.095, -0.28, 0.0], [0.07, 0.22, 0.07], Pants),
        p(2, [-0.095, -0.28, 0.0], [0.07, 0.22, 0.07], Pants),
        p(3, [0.0, 0.17, 0.0], [0.14, 0.09, 0.09], Shirt),
        p(4, [0.10, -0.68, -0.01], [0.05, 0.21, 0.05], Pants),
        p(5, [-0.10, -0.68, -0.01], [0.05, 0.21, 0.05], Pants),
        p(6, [0.0, 0.27, 0.0], [0.15, 0.07, 0.09], Shirt),
        p(7, [0.10, -0.92, 0.03], [0.045, 0.035, 0.09], Shoe),
        p(8, [-0.10, -0.92, 0.03], [0.045, 0.035, 0.09], Shoe),
        p(9, [0.0, 0.38, 0.0], [0.17, 0.10, 0.10], Shirt),
        p(10, [0.10, -0.945, 0.15], [0.045, 0.025, 0.06], Shoe),
        p(11, [-0.10, -0.945, 0.15], [0.045, 0.025, 0.06], Shoe),
        p(12, [0.0, 0.54, 0.0], [0.05, 0.05, 0.05], Skin),
        p(13, [0.12, 0.43, 0.0], [0.06, 0.04, 0.04], Shirt),
        p(14, [-0.12, 0.43, 0.0], [0.06, 0.04, 0.04], Shirt),
        p(15, [0.0, 0.66, 0.02], [0.09, 0.11, 0.10], Skin),
        p(16, [0.31, 0.44, 0.0], [0.13, 0.045, 0.045], Shirt),
        p(17, [-0.31, 0.44, 0.0], [0.13, 0.045, 0.045], Shirt),
        p(18, [0.56, 0.44, 0.0], [0.12, 0.04, 0.04], Skin),
        p(19, [-0.56, 0.44, 0.0], [0.12, 0.04, 0.04], Skin),
        p(20, [0.72, 0.44, 0.0], [0.05, 0.02, 0.04], Skin),
        p(21, [-0.72, 0.44, 0.0], [0.05, 0.02, 0.04], Skin),
        p(22, [0.80, 0.44, 0.0], [0.05, 0.015, 0.035], Skin),
        p(23, [-0.80, 0.44, 0.0], [0.05, 0.015, 0.035], Skin),
    ]
}

const PART_RINGS: usize = 6;
const PART_SEGMENTS: usize = 8;
/// Vertices per part mesh: two poles and `PART_RINGS - 1` rings.
pub const VERTICES_PER_PART: usize = 2 + (PART_RINGS - 1) * PART_SEGMENTS;

/// Builds the humanoid body model: closed ellipsoid meshes with one-hot
/// skinning weights, faces and analytic normals.
pub fn humanoid_body() -> Result<BodyModel> {
    let parts = humanoid_parts();
    let nj = JOINT_POSITIONS.len();
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut weights = Vec::new();
    let mut faces = Vec::new();
    for part in &parts {
        let base = vertices.len();
        let mut push = |u: Vector3<f64>| {
            vertices.push(part.center + u.component_mul(&part.semi_axes));
            normals.push(u.component_div(&part.semi_axes).normalize());
            let mut w = vec![0.0; nj];
            w[part.joint] = 1.0;
            weights.push(w);
        };
        push(Vector3::y());
        for i in 1..PART_RINGS {
            let phi = PI * i as f64 / PART_RINGS as f64;
            for k in 0..PART_SEGMENTS {
                let th = 2.0 * PI * k as f64 / PART_SEGMENTS as f64;
                push(Vector3::new(phi.sin() * th.cos(), phi.cos(), phi.sin() * th.sin()));
            }
        }
        push(-Vector3::y());
        let ring = |i: usize, k: usize| base + 1 + (i - 1) * PART_SEGMENTS + k % PART_SEGMENTS;
        let bottom = base + VERTICES_PER_PART - 1;
        for k in 0..PART_SEGMENTS {
            faces.push([base, ring(1, k + 1), ring(1, k)]);
            faces.push([bottom, ring(PART_RINGS - 1, k), ring(PART_RINGS - 1, k + 1)]);
            for i in 1..PART_RINGS - 1 {
                faces.push([ring(i, k), ring(i, k + 1), ring(i + 1, k + 1)]);
                faces.push([ring(i, k), ring(i + 1, k + 1), ring(i + 1, k)]);
            }
        }
    }
    BodyModel::new(
        vertices,
        JOINT_POSITIONS.iter().map(|p| Vector3::from(*p)).collect(),
        JOINT_PARENTS.to_vec(),
        weights,
        Some(faces),
        Some(normals),
    )
}

/// Joints without children; their rotations move no other joint.
pub fn leaf_joints(model: &BodyModel) -> Vec<usize> {
    let parents = model.parents();
    (0..model.num_joints()).filter(|&j| !parents.contains(&Some(j))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-pixel Gaussian noise on metric depth before the affine map.
    pub depth_pixel_sigma: f64,
    /// Per-frame, per-actor offset added to the actor's depth pixels.
    pub actor_depth_jitter: f64,
    /// Fraction of pixels replaced by gross outliers.
    pub outlier_rate: f64,
    /// Outlier offset in scene radii, added to the true depth.
    pub outlier_offset: f64,
    /// Keypoint noise in pixels.
    pub keypoint_sigma: f64,
    /// Rotation noise on the initial pose of non-leaf joints, in radians,
    /// drawn once per actor and shot.
    pub pose_sigma: f64,
    /// Rotation noise on leaf joints, in radians.
    pub leaf_pose_sigma: f64,
    /// Relative spread of the per-frame affine depth parameters.
    pub affine_spread: f64,
    /// Systematic swing of the initial leaf rotations about the actor's
    /// lateral axis, radians; positive turns hanging segments backwards.
    pub leaf_tilt: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            depth_pixel_sigma: 0.0,
            actor_depth_jitter: 0.0,
            outlier_rate: 0.0,
            outlier_offset: 5.0,
            keypoint_sigma: 0.0,
            pose_sigma: 0.0,
            leaf_pose_sigma: 0.0,
            affine_spread: 0.0,
            leaf_tilt: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSpec {
    pub frames: usize,
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorSpec {
    pub scale: f64,
    /// Floor position `(x, z)` of the root at frame 0.
    pub start: [f64; 2],
    /// Floor velocity per frame at frame 0.
    pub velocity: [f64; 2],
    /// Heading about the vertical axis; 0 faces +z.
    pub yaw: f64,
    pub shirt: [f64; 3],
    /// Shoulder abduction from the rest pose, radians.
    pub arm_drop: f64,
    /// Shoulder swing towards the actor's back, radians.
    pub arm_sweep: f64,
    pub elbow: f64,
    /// When set, the start depth is chosen so the rearmost body point sits
    /// this far in front of the back wall.
    pub wall_gap: Option<f64>,
}

/// Frames `first..=last` in which an actor is hidden and undetected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionWindow {
    pub actor: usize,
    pub first: usize,
    pub last: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub shots: Vec<ShotSpec>,
    pub actors: Vec<ActorSpec>,
    pub couch: bool,
    /// Metric depth is `a * mono + b`.
    pub depth_affine: [f64; 2],
    /// Frames per quadratic trajectory segment.
    pub segment_frames: usize,
    /// Standard deviation of per-segment floor acceleration, per frame².
    pub acceleration_sigma: f64,
    pub stage_spacing: f64,
    /// Pixel stride of the sampled stage point cloud.
    pub point_stride: usize,
    pub noise: NoiseSpec,
    pub occlusions: Vec<OcclusionWindow>,
}

const EYE_A: [f64; 3] = [0.0, 1.6, -3.2];
const TARGET_A: [f64; 3] = [0.0, 0.8, 1.0];
const EYE_COUCH: [f64; 3] = [0.3, 1.5, -0.5];
const TARGET_COUCH: [f64; 3] = [0.4, 0.9, 2.4];
const EYE_B: [f64; 3] = [-2.2, 1.6, -1.4];
const TARGET_B: [f64; 3] = [1.6, 0.8, 1.2];

impl SceneSpec {
    fn base(shots: Vec<ShotSpec>, actors: Vec<ActorSpec>) -> Self {
        Self {
            width: 128,
            height: 96,
            focal: 110.0,
            shots,
            actors,
            couch: true,
            depth_affine: [2.0, 0.5],
            segment_frames: 15,
            acceleration_sigma: 1e-4,
            stage_spacing: 0.12,
            point_stride: 3,
            noise: NoiseSpec::none(),
            occlusions: Vec::new(),
        }
    }

    fn actor(x: f64, z: f64) -> ActorSpec {
        ActorSpec {
            scale: 1.05,
            start: [x, z],
            velocity: [0.006, -0.004],
            yaw: PI,
            shirt: [0.2, 0.45, 0.75],
            arm_drop: 1.0,
            arm_sweep: 0.0,
            elbow: 0.3,
            wall_gap: None,
        }
    }

    /// One actor, one static shot, no noise.
    pub fn single_actor(frames: usize) -> Self {
        Self::base(
            vec![ShotSpec {
                frames,
                eye: EYE_A,
                target: TARGET_A,
            }],
            vec![Self::actor(0.3, 0.4)],
        )
    }

    /// Single actor whose depth jitters from frame to frame, with noisy
    /// keypoints.
    pub fn jittered(frames: usize) -> Self {
        let mut s = Self::single_actor(frames);
        s.noise.actor_depth_jitter = 0.08;
        s.noise.keypoint_sigma = 0.7;
        s
    }

    /// Actor standing by the couch with noisy initial leaf rotations.
    pub fn couch(frames: usize) -> Self {
        let mut s = Self::single_actor(frames);
        s.shots[0].eye = EYE_COUCH;
        s.shots[0].target = TARGET_COUCH;
        s.acceleration_sigma = 0.0;
        let a = &mut s.actors[0];
        a.start = [0.4, 0.0];
        a.velocity = [0.004, 0.0];
        a.arm_drop = 1.3;
        a.arm_sweep = 0.45;
        a.elbow = 0.1;
        a.wall_gap = Some(0.015);
        s.noise.keypoint_sigma = 0.3;
        s.noise.leaf_pose_sigma = 0.15;
        s.noise.leaf_tilt = 0.8;
        s
    }

    /// Two actors across two shots seen from different sides of the room.
    pub fn two_shot(frames_per_shot: usize) -> Self {
        let mut a1 = Self::actor(-0.4, 0.6);
        a1.velocity = [0.004, 0.002];
        a1.yaw = PI - 0.2;
        a1.scale = 0.97;
        a1.shirt = [0.8, 0.3, 0.2];
        let mut s = Self::base(
            vec![
                ShotSpec {
                    frames: frames_per_shot,
                    eye: EYE_A,
                    target: TARGET_A,
                },
                ShotSpec {
                    frames: frames_per_shot,
                    eye: EYE_B,
                    target: TARGET_B,
                },
            ],
            vec![Self::actor(0.5, 0.3), a1],
        );
        s.noise.keypoint_sigma = 0.5;
        s.noise.pose_sigma = 0.08;
        s.noise.depth_pixel_sigma = 0.01;
        s
    }

    pub fn num_frames(&self) -> usize {
        self.shots.iter().map(|s| s.frames).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSceneSpec(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("image {}x{} too small", self.width, self.height));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return bad(format!("focal {}", self.focal));
        }
        if self.shots.is_empty() || self.shots.iter().any(|s| s.frames == 0) {
            return bad("every shot needs at least one frame".into());
        }
        if self.actors.iter().any(|a| !(a.scale > 0.0) || a.shirt.iter().any(|c| !(0.0..=1.0).contains(c))) {
            return bad("actor scale must be positive and colors in [0, 1]".into());
        }
        if !(self.depth_affine[0] > 0.0) || !self.depth_affine[1].is_finite() {
            return bad(format!("affine depth {:?}", self.depth_affine));
        }
        if self.segment_frames == 0 || self.point_stride == 0 || !(self.stage_spacing > 0.0) {
            return bad("segment length, point stride and stage spacing must be positive".into());
        }
        let n = &self.noise;
        let sigmas = [
            n.depth_pixel_sigma,
            n.actor_depth_jitter,
            n.keypoint_sigma,
            n.pose_sigma,
            n.leaf_pose_sigma,
            n.affine_spread,
            n.leaf_tilt.abs(),
            self.acceleration_sigma,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&n.outlier_rate) || n.affine_spread >= 1.0 {
            return bad("outlier rate in [0, 1] and affine spread below 1".into());
        }
        let nf = self.num_frames();
        for w in &self.occlusions {
            if w.actor >= self.actors.len() || w.first > w.last || w.last >= nf {
                return bad(format!("occlusion window {w:?}"));
            }
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    /// Two actors over two shots with mild noise and one occlusion gap.
    fn default() -> Self {
        let mut s = Self::two_shot(24);
        s.occlusions.push(OcclusionWindow {
            actor: 1,
            first: 8,
            last: 12,
        });
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub first_frame: usize,
    pub frames: usize,
    pub camera: CameraModel,
}

impl Shot {
    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.first_frame && frame < self.first_frame + self.frames
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorTruth {
    pub id: u32,
    pub scale: f64,
    pub translations: Vec<Vector3<f64>>,
    pub poses: Vec<PoseParams>,
    pub vertex_colors: Vec<Vector3<f64>>,
}

impl ActorTruth {
    pub fn placement(&self, frame: usize) -> StagePlacement {
        StagePlacement {
            scale: self.scale,
            translation: self.translations[frame],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub keypoints: KeypointObservation,
    pub pose_init: PoseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorObservation {
    pub id: u32,
    pub mask: Mask,
    pub detection: Option<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame: usize,
    pub shot: usize,
    pub camera: CameraModel,
    /// Metric depth including the actors.
    pub true_depth: DepthRaster,
    /// Relative depth with `true ≈ a * mono + b`.
    pub mono_depth: DepthRaster,
    pub depth_affine: [f64; 2],
    pub image: ColorImage,
    pub actors: Vec<ActorObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub spec: SceneSpec,
    pub body: BodyModel,
    pub stage: SplatSet,
    pub scene_radius: f64,
    pub shots: Vec<Shot>,
    /// Stage point cloud sampled from each shot's view.
    pub stage_points: Vec<Vec<Vector3<f64>>>,
    pub actors: Vec<ActorTruth>,
    pub frames: Vec<FrameObservation>,
}

impl SyntheticScene {
    /// Stage points of the frame's shot that are not hidden by an actor.
    pub fn frame_points(&self, frame: usize) -> Vec<Vector3<f64>> {
        let obs = &self.frames[frame];
        let masks: Vec<&Mask> = obs.actors.iter().map(|a| &a.mask).collect();
        points_clear_of_masks(&self.stage_points[obs.shot], &obs.camera, &masks)
    }

    /// Stage-frame joints of an actor at a frame.
    pub fn true_joints(&self, actor: usize, frame: usize) -> Result<Vec<Vector3<f64>>> {
        let a = &self.actors[actor];
        let posed = lbs_pose(&self.body, &a.poses[frame])?;
        let pl = a.placement(frame);
        Ok(posed.joints.iter().map(|j| pl.apply(j)).collect())
    }

    /// Stage-frame vertices of an actor at a frame.
    pub fn true_vertices(&self, actor: usize, frame: usize) -> Result<Vec<Vector3<f64>>> {
        let a = &self.actors[actor];
        let posed = lbs_pose(&self.body, &a.poses[frame])?;
        let pl = a.placement(frame);
        Ok(posed.vertices.iter().map(|v| pl.apply(v)).collect())
    }

    /// One splat per posed vertex, colored like the actor's surface.
    /// Splats on every `stride`-th true vertex of an actor.
    pub fn actor_splats(&self, actor: usize, frame: usize, stride: usize) -> Result<SplatSet> {
        let a = &self.actors[actor];
        let verts = self.true_vertices(actor, frame)?;
        body_splats(&verts, &a.vertex_colors, a.scale, stride, SplatTag::Actor(a.id))
    }

    pub fn is_hidden(&self, actor: usize, frame: usize) -> bool {
        self.spec
            .occlusions
            .iter()
            .any(|w| w.actor == actor && (w.first..=w.last).contains(&frame))
    }
}

/// Per-purpose random stream so parallel work stays deterministic.
fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose << 32 | index);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

fn random_axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Splats covering an axis-aligned rectangle spanned by `u` and `v` from
/// `origin`.
fn plane_splats(
    out: &mut Vec<Splat>,
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    spacing: f64,
    color: Vector3<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let nu = (u.norm() / spacing).ceil().max(1.0) as usize;
    let nv = (v.norm() / spacing).ceil().max(1.0) as usize;
    for i in 0..nu {
        for j in 0..nv {
            let a = (i as f64 + 0.5) / nu as f64;
            let b = (j as f64 + 0.5) / nv as f64;
            let p = origin + u * a + v * b;
            let checker = if ((p.x * 2.0).floor() + (p.y * 2.0).floor() + (p.z * 2.0).floor()) as i64 % 2 == 0 {
                1.0
            } else {
                0.82
            };
            let grain = 1.0 + rng.random_range(-0.05..0.05);
            let c = (color * checker * grain).map(|x| x.clamp(0.0, 1.0));
            out.push(Splat::isotropic(p, STAGE_SPLAT_RADIUS * spacing, c, STAGE_SPLAT_OPACITY)?);
        }
    }
    Ok(())
}

fn box_splats(out: &mut Vec<Splat>, lo: Vector3<f64>, hi: Vector3<f64>, spacing: f64, color: Vector3<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = hi - lo;
    let (ex, ey, ez) = (Vector3::x() * d.x, Vector3::y() * d.y, Vector3::z() * d.z);
    plane_splats(out, lo, ex, ey, spacing, color, rng)?;
    plane_splats(out, lo + ez, ex, ey, spacing, color, rng)?;
    plane_splats(out, lo, ey, ez, spacing, color, rng)?;
    plane_splats(out, lo + ex, ey, ez, spacing, color, rng)?;
    plane_splats(out, lo + ey, ex, ez, spacing, color, rng)?;
    Ok(())
}

pub const ROOM_MIN: [f64; 3] = [-2.5, 0.0, -3.5];
const STAGE_SPLAT_RADIUS: f64 = 0.9;
const STAGE_SPLAT_OPACITY: f64 = 0.98;

pub const ROOM_MAX: [f64; 3] = [2.5, 2.6, 2.5];

/// Closed room box plus an optional couch.
pub fn room_stage(spacing: f64, couch: bool, seed: u64) -> Result<SplatSet> {
    let mut rng = stream(seed, 1, 0);
    let lo = Vector3::from(ROOM_MIN);
    let hi = Vector3::from(ROOM_MAX);
    let d = hi - lo;
    let (ex, ey, ez) = (Vector3::x() * d.x, Vector3::y() * d.y, Vector3::z() * d.z);
    let mut s = Vec::new();
    plane_splats(&mut s, lo, ex, ez, spacing, Vector3::new(0.55, 0.42, 0.3), &mut rng)?;
    plane_splats(&mut s, lo + ey, ex, ez, spacing, Vector3::new(0.92, 0.92, 0.9), &mut rng)?;
    plane_splats(&mut s, lo + ez, ex, ey, spacing, Vector3::new(0.85, 0.82, 0.7), &mut rng)?;
    plane_splats(&mut s, lo, ex, ey, spacing, Vector3::new(0.7, 0.75, 0.8), &mut rng)?;
    plane_splats(&mut s, lo, ez, ey, spacing, Vector3::new(0.6, 0.75, 0.6), &mut rng)?;
    plane_splats(&mut s, lo + ex, ez, ey, spacing, Vector3::new(0.8, 0.7, 0.55), &mut rng)?;
    if couch {
        let red = Vector3::new(0.65, 0.15, 0.15);
        let seat = (Vector3::new(-1.8, 0.0, 1.4), Vector3::new(-0.4, 0.45, 2.3));
        let back = (Vector3::new(-1.8, 0.45, 2.05), Vector3::new(-0.4, 0.95, 2.3));
        let step = 0.5 * spacing;
        box_splats(&mut s, seat.0, seat.1, step, red, &mut rng)?;
        box_splats(&mut s, back.0, back.1, step, red * 0.9, &mut rng)?;
    }
    Ok(SplatSet::new(SplatTag::Stage, s))
}

/// Brute-force front-to-back compositing of isotropic screen-space Gaussians.
/// Every splat is tested at every pixel; `cutoff` (in screen sigmas) skips
/// negligible contributions.
pub fn reference_render(splats: &[Splat], camera: &CameraModel, cutoff: Option<f64>) -> RenderedFrame {
    struct Proj {
        u: f64,
        v: f64,
        z: f64,
        sigma: f64,
        opacity: f64,
        color: Vector3<f64>,
    }
    let mut order: Vec<(usize, Proj)> = splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let pc = camera.rotation * s.center + camera.translation;
            if pc.z <= MIN_DEPTH {
                return None;
            }
            let sigma = s.scale.iter().sum::<f64>() / 3.0 * camera.fx / pc.z;
            Some((
                i,
                Proj {
                    u: camera.fx * pc.x / pc.z + camera.cx,
                    v: camera.fy * pc.y / pc.z + camera.cy,
                    z: pc.z,
                    sigma,
                    opacity: s.opacity,
                    color: s.color,
                },
            ))
        })
        .collect();
    order.sort_by(|a, b| a.1.z.total_cmp(&b.1.z).then(a.0.cmp(&b.0)));
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<(f64, Vector3<f64>, f64)> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let y = y as f64;
            let row: Vec<&Proj> = order
                .iter()
                .map(|(_, p)| p)
                .filter(|p| cutoff.is_none_or(|n| (y - p.v).abs() <= n * p.sigma))
                .collect();
            (0..w).map(move |x| {
                let x = x as f64;
                let mut trans = 1.0;
                let (mut d, mut c, mut acc) = (0.0, Vector3::zeros(), 0.0);
                for p in &row {
                    let (dx, dy) = (x - p.u, y - p.v);
                    let q = (dx * dx + dy * dy) / (p.sigma * p.sigma);
                    if cutoff.is_some_and(|n| q > n * n) {
                        continue;
                    }
                    let alpha = p.opacity * (-0.5 * q).exp();
                    d += p.z * alpha * trans;
                    c += p.color * alpha * trans;
                    acc += alpha * trans;
                    trans *= 1.0 - alpha;
                }
                (d, c, acc)
            })
        })
        .collect();
    let mut depth = DepthRaster::empty(w, h);
    let mut color = ColorImage::black(w, h);
    let mut accumulated_alpha = vec![0.0; w * h];
    for (k, (d, c, a)) in pixels.into_iter().enumerate() {
        accumulated_alpha[k] = a;
        color.pixels[k] = c;
        if a >= MIN_ACCUMULATED_ALPHA {
            depth.set(k % w, k / w, d);
        }
    }
    RenderedFrame {
        depth,
        color,
        accumulated_alpha,
    }
}

/// Nearest ray hit on a posed, placed ellipsoid body: depth and world normal.
fn ray_body(
    parts: &[BodyPart],
    kin: &Kinematics,
    placement: &StagePlacement,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>, usize)> {
    let mut best: Option<(f64, Vector3<f64>, usize)> = None;
    for (k, part) in parts.iter().enumerate() {
        let rt = kin.rotation[part.joint].transpose();
        let y0 = rt * ((origin - placement.translation) / placement.scale - kin.translation[part.joint]);
        let y1 = rt * dir / placement.scale;
        let p = (y0 - part.center).component_div(&part.semi_axes);
        let q = y1.component_div(&part.semi_axes);
        let a = q.norm_squared();
        let b = 2.0 * p.dot(&q);
        let c = p.norm_squared() - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            continue;
        }
        let lambda = (-b - disc.sqrt()) / (2.0 * a);
        if lambda <= MIN_DEPTH || best.is_some_and(|(d, _, _)| lambda >= d) {
            continue;
        }
        let y = y0 + y1 * lambda;
        let n_local = (y - part.center).component_div(&part.semi_axes.component_mul(&part.semi_axes));
        let n = (kin.rotation[part.joint] * n_local).normalize();
        best = Some((lambda, n, k));
    }
    best
}

fn material_color(m: Material, shirt: &Vector3<f64>) -> Vector3<f64> {
    match m {
        Material::Skin => Vector3::new(0.87, 0.68, 0.56),
        Material::Shirt => *shirt,
        Material::Pants => Vector3::new(0.22, 0.26, 0.42),
        Material::Shoe => Vector3::new(0.12, 0.1, 0.1),
    }
}

/// Rest-to-posed local rotations of the synthetic actors.
fn actor_pose(spec: &ActorSpec, rng: &mut ChaCha8Rng, nj: usize) -> PoseParams {
    let mut rot = vec![UnitQuaternion::identity(); nj];
    rot[0] = axis_angle(Vector3::y(), spec.yaw);
    let sweep = axis_angle(Vector3::x(), spec.arm_sweep);
    rot[16] = sweep * axis_angle(Vector3::z(), -spec.arm_drop);
    rot[17] = sweep * axis_angle(Vector3::z(), spec.arm_drop);
    rot[18] = axis_angle(Vector3::y(), -spec.elbow);
    rot[19] = axis_angle(Vector3::y(), spec.elbow);
    rot[15] = axis_angle(Vector3::x(), rng.random_range(-0.1..0.1));
    PoseParams { rotations: rot }
}

/// Root floor positions: piecewise quadratic with continuous velocity.
fn floor_track(spec: &ActorSpec, frames: usize, segment: usize, accel_sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vector2<f64>> {
    let mut out = Vec::with_capacity(frames);
    let mut p = Vector2::from(spec.start);
    let mut v = Vector2::from(spec.velocity);
    let mut f0 = 0;
    while f0 < frames {
        let a = Vector2::new(gaussian(rng, accel_sigma), gaussian(rng, accel_sigma));
        let len = segment.min(frames - f0);
        for k in 0..len {
            let t = k as f64;
            out.push(p + v * t + a * (0.5 * t * t));
        }
        let t = len as f64;
        p += v * t + a * (0.5 * t * t);
        v += a * t;
        f0 += len;
    }
    out
}

/// Swings every leaf of `pose` by `angle` about the world axis `axis`.
fn tilt_leaves(pose: &PoseParams, body: &BodyModel, kin: &Kinematics, leaves: &[usize], axis: &Vector3<f64>, angle: f64) -> PoseParams {
    let mut out = pose.clone();
    for &j in leaves {
        let Some(p) = body.parents()[j] else { continue };
        let rp = kin.rotation[p];
        let local_axis = rp.transpose() * axis;
        out.rotations[j] = axis_angle(local_axis, angle) * pose.rotations[j];
    }
    out
}

/// Non-leaf joints draw from `bias_rng`, which callers seed once per actor
/// and shot; leaf joints draw from `rng`.
fn perturb_pose(
    pose: &PoseParams,
    leaves: &[usize],
    noise: &NoiseSpec,
    bias_rng: &mut ChaCha8Rng,
    rng: &mut ChaCha8Rng,
) -> PoseParams {
    let rotations = pose
        .rotations
        .iter()
        .enumerate()
        .map(|(j, q)| {
            let (sigma, r) = if leaves.contains(&j) {
                (noise.leaf_pose_sigma, &mut *rng)
            } else {
                (noise.pose_sigma, &mut *bias_rng)
            };
            let axis = random_axis(r);
            q * axis_angle(axis, gaussian(r, sigma))
        })
        .collect();
    PoseParams { rotations }
}

/// Generates a scene deterministically from `spec` and `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let body = humanoid_body()?;
    let parts = humanoid_parts();
    let nj = body.num_joints();
    let leaves = leaf_joints(&body);
    let stage = room_stage(spec.stage_spacing, spec.couch, seed)?;
    let radius = compute_scene_radius(&stage.centers())?.get();
    let nf = spec.num_frames();

    let mut shots = Vec::new();
    let mut first = 0;
    for s in &spec.shots {
        let camera = CameraModel::look_at(
            Vector3::from(s.eye),
            Vector3::from(s.target),
            Vector3::y(),
            spec.focal,
            spec.width,
            spec.height,
            first,
        )?;
        shots.push(Shot {
            first_frame: first,
            frames: s.frames,
            camera,
        });
        first += s.frames;
    }

    let stage_renders: Vec<RenderedFrame> = shots
        .iter()
        .map(|s| reference_render(&stage.splats, &s.camera, Some(4.0)))
        .collect();
    let stage_points: Vec<Vec<Vector3<f64>>> = shots
        .iter()
        .zip(&stage_renders)
        .map(|(s, r)| {
            let mut pts = Vec::new();
            for y in (0..spec.height).step_by(spec.point_stride) {
                for x in (0..spec.width).step_by(spec.point_stride) {
                    if let Some(d) = r.depth.get(x, y) {
                        pts.push(s.camera.unproject(&Vector2::new(x as f64, y as f64), d));
                    }
                }
            }
            pts
        })
        .collect();

    let mut actors = Vec::with_capacity(spec.actors.len());
    for (k, a) in spec.actors.iter().enumerate() {
        let mut rng = stream(seed, 2, k as u64);
        let pose = actor_pose(a, &mut rng, nj);
        let posed = lbs_pose(&body, &pose)?;
        let min_y = posed.vertices.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
        let height = -a.scale * min_y + 0.01;
        let mut a = a.clone();
        if let Some(gap) = a.wall_gap {
            let max_z = posed.vertices.iter().map(|v| v.z).fold(f64::NEG_INFINITY, f64::max);
            a.start[1] = ROOM_MAX[2] - gap - a.scale * max_z;
        }
        let a = &a;
        let floor = floor_track(a, nf, spec.segment_frames, spec.acceleration_sigma, &mut rng);
        let shirt = Vector3::from(a.shirt);
        let vertex_colors = (0..body.num_vertices())
            .map(|i| material_color(parts[i / VERTICES_PER_PART].material, &shirt))
            .collect();
        actors.push(ActorTruth {
            id: k as u32,
            scale: a.scale,
            translations: floor.iter().map(|p| Vector3::new(p.x, height, p.y)).collect(),
            poses: vec![pose; nf],
            vertex_colors,
        });
    }
    let kinematics: Vec<Kinematics> = actors
        .iter()
        .map(|a| forward_kinematics(&body, a.poses[0].local_matrices()))
        .collect::<Result<_>>()?;

    let scene_shell = SyntheticScene {
        seed,
        spec: spec.clone(),
        body,
        stage,
        scene_radius: radius,
        shots,
        stage_points,
        actors,
        frames: Vec::new(),
    };
    let frames: Vec<FrameObservation> = (0..nf)
        .into_par_iter()
        .map(|f| observe_frame(&scene_shell, &parts, &kinematics, &stage_renders, &leaves, f))
        .collect::<Result<_>>()?;
    Ok(SyntheticScene { frames, ..scene_shell })
}

fn observe_frame(
    scene: &SyntheticScene,
    parts: &[BodyPart],
    kinematics: &[Kinematics],
    stage_renders: &[RenderedFrame],
    leaves: &[usize],
    f: usize,
) -> Result<FrameObservation> {
    let spec = &scene.spec;
    let noise = &spec.noise;
    let shot = scene.shots.iter().position(|s| s.contains(f)).expect("frame inside a shot");
    let mut camera = scene.shots[shot].camera.clone();
    camera.frame_index = f;
    let stage = &stage_renders[shot];
    let (w, h) = (spec.width, spec.height);
    let na = scene.actors.len();
    let origin = camera.center();
    let rt = camera.rotation.transpose();

    let present: Vec<bool> = (0..na).map(|k| !scene.is_hidden(k, f)).collect();
    let mut true_depth = stage.depth.clone();
    let mut image = stage.color.clone();
    let mut masks = vec![Mask::new(w, h, false); na];
    for y in 0..h {
        for x in 0..w {
            let dir = rt * Vector3::new((x as f64 - camera.cx) / camera.fx, (y as f64 - camera.cy) / camera.fy, 1.0);
            let mut best: Option<(f64, Vector3<f64>, usize, usize)> = None;
            for k in (0..na).filter(|&k| present[k]) {
                let pl = scene.actors[k].placement(f);
                if let Some((d, n, part)) = ray_body(parts, &kinematics[k], &pl, &origin, &dir) {
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, n, part, k));
                    }
                }
            }
            let Some((d, n, part, k)) = best else { continue };
            if stage.depth.get(x, y).is_some_and(|s| s <= d) {
                continue;
            }
            true_depth.set(x, y, d);
            masks[k].set(x, y, true);
            let shade = 0.55 + 0.45 * (-n.dot(&dir.normalize())).max(0.0);
            let base = scene.actors[k].vertex_colors[part * VERTICES_PER_PART];
            image.pixels[y * w + x] = (base * shade).map(|c| c.clamp(0.0, 1.0));
        }
    }

    let mut rng = stream(scene.seed, 3, f as u64);
    let [a0, b0] = spec.depth_affine;
    let a = a0 * (1.0 + noise.affine_spread * rng.random_range(-1.0..1.0));
    let b = b0 + noise.affine_spread * b0.abs().max(0.1) * rng.random_range(-1.0..1.0);
    let jitter: Vec<f64> = (0..na).map(|_| gaussian(&mut rng, noise.actor_depth_jitter)).collect();
    let mut mono = DepthRaster::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let Some(mut d) = true_depth.get(x, y) else { continue };
            if let Some(k) = (0..na).find(|&k| masks[k].get(x, y)) {
                d += jitter[k];
            }
            d += gaussian(&mut rng, noise.depth_pixel_sigma);
            if noise.outlier_rate > 0.0 && rng.random::<f64>() < noise.outlier_rate {
                d = true_depth.get(x, y).expect("valid") + noise.outlier_offset * scene.scene_radius;
            }
            mono.set(x, y, (d - b) / a);
        }
    }

    let mut actors = Vec::with_capacity(na);
    for (k, truth) in scene.actors.iter().enumerate() {
        let mut rng = stream(scene.seed, 4, (f * na + k) as u64);
        let joints = scene.true_joints(k, f)?;
        let root_visible = camera.project_point(&joints[0]).is_some_and(|p| camera.in_image(&p.pixel));
        let detection = if present[k] && root_visible && masks[k].count() >= 20 {
            let mut pixels = Vec::with_capacity(joints.len());
            let mut confidence = Vec::with_capacity(joints.len());
            for j in &joints {
                match camera.project_point(j) {
                    Some(p) => {
                        let jit = Vector2::new(gaussian(&mut rng, noise.keypoint_sigma), gaussian(&mut rng, noise.keypoint_sigma));
                        pixels.push(p.pixel + jit);
                        confidence.push(1.0);
                    }
                    None => {
                        pixels.push(Vector2::zeros());
                        confidence.push(0.0);
                    }
                }
            }
            Some(Detection {
                keypoints: KeypointObservation::new(pixels, confidence)?,
                pose_init: {
                    let lateral = axis_angle(Vector3::y(), spec.actors[k].yaw) * Vector3::x();
                    let tilted = tilt_leaves(&truth.poses[f], &scene.body, &kinematics[k], leaves, &lateral, noise.leaf_tilt);
                    let mut bias_rng = stream(scene.seed, 6, (shot * na + k) as u64);
                    perturb_pose(&tilted, leaves, noise, &mut bias_rng, &mut rng)
                },
            })
        } else {
            None
        };
        actors.push(ActorObservation {
            id: truth.id,
            mask: masks[k].clone(),
            detection,
        });
    }
    Ok(FrameObservation {
        frame: f,
        shot,
        camera,
        true_depth,
        mono_depth: mono,
        depth_affine: [a, b],
        image,
        actors,
    })
}

/// Random splats in front of a camera, for renderer comparisons.
pub fn random_splats(seed: u64, count: usize, camera: &CameraModel) -> Result<Vec<Splat>> {
    let mut rng = stream(seed, 5, 0);
    (0..count)
        .map(|_| {
            let px = Vector2::new(
                rng.random_range(0.0..camera.width as f64),
                rng.random_range(0.0..camera.height as f64),
            );
            let center = camera.unproject(&px, rng.random_range(1.0..4.0));
            let rotation = axis_angle(random_axis(&mut rng), rng.random_range(0.0..PI));
            let scale = Vector3::new(
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
            );
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            Splat::new(center, rotation, scale, color, rng.random_range(0.1..1.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::visible_vertices;
    use crate::positioning::loss_trajectory;

    fn small(frames: usize) -> SceneSpec {
        let mut s = SceneSpec::single_actor(frames);
        s.width = 64;
        s.height = 48;
        s.focal = 55.0;
        s.stage_spacing = 0.2;
        s
    }

    #[test]
    fn humanoid_is_well_formed() {
        let body = humanoid_body().unwrap();
        assert_eq!(body.num_joints(), 24);
        assert_eq!(body.num_vertices(), 24 * VERTICES_PER_PART);
        assert_eq!(leaf_joints(&body), vec![10, 11, 15, 22, 23]);
        let parts = humanoid_parts();
        for (i, v) in body.vertices().iter().enumerate() {
            let p = &parts[i / VERTICES_PER_PART];
            let u = (v - p.center).component_div(&p.semi_axes);
            assert!((u.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = {
            let mut s = small(6);
            s.noise.keypoint_sigma = 1.0;
            s.noise.depth_pixel_sigma = 0.02;
            s
        };
        let a = generate_scene(&spec, 9).unwrap();
        let b = generate_scene(&spec, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec, 10).unwrap();
        assert_ne!(a.frames[0].mono_depth, c.frames[0].mono_depth);
    }

    #[test]
    fn zero_noise_observations_equal_truth() {
        let scene = generate_scene(&small(5), 3).unwrap();
        for (f, obs) in scene.frames.iter().enumerate() {
            let [a, b] = obs.depth_affine;
            assert_eq!([a, b], [2.0, 0.5]);
            for i in 0..obs.true_depth.len() {
                match (obs.true_depth.get_index(i), obs.mono_depth.get_index(i)) {
                    (Some(t), Some(m)) => assert!((a * m + b - t).abs() < 1e-12),
                    (None, None) => {}
                    other => panic!("validity differs at {i}: {other:?}"),
                }
            }
            let det = obs.actors[0].detection.as_ref().unwrap();
            assert_eq!(det.pose_init, scene.actors[0].poses[f]);
            let joints = scene.true_joints(0, f).unwrap();
            for (j, k) in joints.iter().zip(&det.keypoints.pixels) {
                assert!((obs.camera.project_point(j).unwrap().pixel - k).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn ground_truth_trajectory_is_piecewise_quadratic() {
        let mut spec = small(30);
        spec.acceleration_sigma = 1e-3;
        let scene = generate_scene(&spec, 5).unwrap();
        let tracks: Vec<Vec<Vector3<f64>>> = (0..15).map(|f| scene.true_joints(0, f).unwrap()).collect();
        assert!(loss_trajectory(&tracks).0 < 1e-20);
        let across: Vec<Vec<Vector3<f64>>> = (12..18).map(|f| scene.true_joints(0, f).unwrap()).collect();
        assert!(loss_trajectory(&across).0 > 1e-14);
    }

    #[test]
    fn feet_rest_just_above_the_floor() {
        let scene = generate_scene(&small(3), 1).unwrap();
        let v = scene.true_vertices(0, 0).unwrap();
        let min_y = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        assert!((min_y - 0.01).abs() < 1e-9);
    }

    #[test]
    fn stage_depth_is_valid_and_points_lie_on_it() {
        let scene = generate_scene(&small(2), 1).unwrap();
        let obs = &scene.frames[0];
        assert!(obs.true_depth.valid_count() == obs.true_depth.len());
        let pts = scene.frame_points(0);
        assert!(pts.len() > 100);
        for p in &pts {
            let proj = obs.camera.project_point(p).unwrap();
            let (d, _) = obs.true_depth.sample_bilinear(&proj.pixel).unwrap();
            assert!((d - proj.depth).abs() < 1e-9);
        }
    }

    #[test]
    fn masks_cover_visible_actor_vertices() {
        let mut spec = SceneSpec::single_actor(1);
        spec.width = 320;
        spec.height = 240;
        spec.focal = 275.0;
        let scene = generate_scene(&spec, 4).unwrap();
        let obs = &scene.frames[0];
        let mask = &obs.actors[0].mask;
        assert!(mask.count() > 200);
        let verts = scene.true_vertices(0, 0).unwrap();
        let vis = visible_vertices(&verts, scene.body.faces(), None, &obs.camera, 0.01);
        let inside = vis
            .iter()
            .filter(|&&i| mask.contains_pixel(&obs.camera.project_point(&verts[i]).unwrap().pixel))
            .count();
        assert!(inside as f64 > 0.6 * vis.len() as f64, "{inside}/{}", vis.len());
        // every masked pixel's depth is at least near some vertex depth
        let zs: Vec<f64> = vis.iter().map(|&i| obs.camera.project_point(&verts[i]).unwrap().depth).collect();
        let zmin = zs.iter().cloned().fold(f64::INFINITY, f64::min);
        let zmax = zs.iter().cloned().fold(0.0, f64::max);
        let (w, h) = mask.dims();
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    let d = obs.true_depth.get(x, y).unwrap();
                    assert!(d > zmin - 0.1 && d < zmax + 0.1);
                }
            }
        }
    }

    #[test]
    fn occlusion_window_hides_actor() {
        let mut spec = small(8);
        spec.occlusions.push(OcclusionWindow {
            actor: 0,
            first: 2,
            last: 4,
        });
        let scene = generate_scene(&spec, 2).unwrap();
        for f in 0..8 {
            let a = &scene.frames[f].actors[0];
            let hidden = (2..=4).contains(&f);
            assert_eq!(a.detection.is_none(), hidden, "frame {f}");
            assert_eq!(a.mask.count() == 0, hidden);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small(4);
        s.shots.clear();
        assert!(generate_scene(&s, 0).is_err());
        let mut s = small(4);
        s.noise.outlier_rate = 1.5;
        assert!(s.validate().is_err());
        let mut s = small(4);
        s.occlusions.push(OcclusionWindow {
            actor: 3,
            first: 0,
            last: 1,
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn reference_render_matches_direct_sum_for_one_splat() {
        let cam = CameraModel::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y(), 40.0, 16, 12, 0).unwrap();
        let s = Splat::isotropic(Vector3::zeros(), 0.2, Vector3::new(1.0, 0.5, 0.0), 0.7).unwrap();
        let r = reference_render(std::slice::from_ref(&s), &cam, None);
        let p = cam.project_point(&s.center).unwrap();
        let sigma = 0.2 * 40.0 / 3.0;
        let (x, y) = (3usize, 9usize);
        let q = ((x as f64 - p.pixel.x).powi(2) + (y as f64 - p.pixel.y).powi(2)) / (sigma * sigma);
        let alpha = 0.7 * (-0.5 * q).exp();
        assert!((r.accumulated_alpha[y * 16 + x] - alpha).abs() < 1e-15);
    }
}
