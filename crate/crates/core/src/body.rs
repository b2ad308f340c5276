//! Articulated body model: forward kinematics over a joint tree, linear blend
//! skinning, placement into the stage frame and per-vertex visibility.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::rotation::{normalized_quat_matrix, normalized_quat_matrix_vjp, serde_wxyz_vec, unit_quat_matrix};

pub const DEFAULT_NUM_JOINTS: usize = 24;

/// Canonical (rest-pose) geometry with skinning weights.
///
/// Joint `0` is the root; every other joint's parent has a smaller index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BodyModelRaw", into = "BodyModelRaw")]
pub struct BodyModel {
    vertices: Vec<Vector3<f64>>,
    joints: Vec<Vector3<f64>>,
    parents: Vec<Option<usize>>,
    weights: Vec<Vec<f64>>,
    faces: Option<Vec<[usize; 3]>>,
    normals: Option<Vec<Vector3<f64>>>,
    influences: Vec<Vec<(usize, f64)>>,
}

#[derive(Serialize, Deserialize)]
struct BodyModelRaw {
    canonical_vertices: Vec<Vector3<f64>>,
    canonical_joints: Vec<Vector3<f64>>,
    parents: Vec<Option<usize>>,
    lbs_weights: Vec<Vec<f64>>,
    #[serde(default)]
    faces: Option<Vec<[usize; 3]>>,
    #[serde(default)]
    normals: Option<Vec<Vector3<f64>>>,
}

impl TryFrom<BodyModelRaw> for BodyModel {
    type Error = Error;
    fn try_from(r: BodyModelRaw) -> Result<Self> {
        BodyModel::new(r.canonical_vertices, r.canonical_joints, r.parents, r.lbs_weights, r.faces, r.normals)
    }
}

impl From<BodyModel> for BodyModelRaw {
    fn from(m: BodyModel) -> Self {
        BodyModelRaw {
            canonical_vertices: m.vertices,
            canonical_joints: m.joints,
            parents: m.parents,
            lbs_weights: m.weights,
            faces: m.faces,
            normals: m.normals,
        }
    }
}

impl BodyModel {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        joints: Vec<Vector3<f64>>,
        parents: Vec<Option<usize>>,
        weights: Vec<Vec<f64>>,
        faces: Option<Vec<[usize; 3]>>,
        normals: Option<Vec<Vector3<f64>>>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidBody(m));
        let nj = joints.len();
        if nj == 0 {
            return bad("no joints".into());
        }
        if parents.len() != nj {
            return bad(format!("{} parents for {nj} joints", parents.len()));
        }
        if parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return bad(format!("joint {j} needs a parent with a smaller index, got {p:?}")),
            }
        }
        if weights.len() != vertices.len() {
            return bad(format!("{} weight rows for {} vertices", weights.len(), vertices.len()));
        }
        let mut influences = Vec::with_capacity(weights.len());
        for (i, row) in weights.iter().enumerate() {
            if row.len() != nj {
                return bad(format!("vertex {i} has {} weights for {nj} joints", row.len()));
            }
            if row.iter().any(|w| !(*w >= 0.0)) {
                return bad(format!("vertex {i} has a negative weight"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return bad(format!("weights of vertex {i} sum to {sum}"));
            }
            influences.push(row.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(j, w)| (j, *w)).collect());
        }
        if let Some(f) = &faces {
            if f.iter().flatten().any(|&k| k >= vertices.len()) {
                return bad("face index out of range".into());
            }
        }
        if let Some(n) = &normals {
            if n.len() != vertices.len() {
                return bad(format!("{} normals for {} vertices", n.len(), vertices.len()));
            }
        }
        Ok(Self {
            vertices,
            joints,
            parents,
            weights,
            faces,
            normals,
            influences,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn joints(&self) -> &[Vector3<f64>] {
        &self.joints
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn faces(&self) -> Option<&[[usize; 3]]> {
        self.faces.as_deref()
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    /// Non-zero `(joint, weight)` pairs of a vertex.
    pub fn influences(&self, vertex: usize) -> &[(usize, f64)] {
        &self.influences[vertex]
    }
}

/// Local per-joint rotations relative to the parent joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    #[serde(with = "serde_wxyz_vec")]
    pub rotations: Vec<UnitQuaternion<f64>>,
}

impl PoseParams {
    pub fn identity(num_joints: usize) -> Self {
        Self {
            rotations: vec![UnitQuaternion::identity(); num_joints],
        }
    }

    pub fn local_matrices(&self) -> Vec<Matrix3<f64>> {
        self.rotations.iter().map(unit_quat_matrix).collect()
    }

    /// Raw `(w, x, y, z)` vectors, the parameterization used by the optimizer.
    pub fn to_raw(&self) -> Vec<Vector4<f64>> {
        self.rotations
            .iter()
            .map(|q| {
                let c = q.quaternion();
                Vector4::new(c.w, c.i, c.j, c.k)
            })
            .collect()
    }

    /// Normalizes raw quaternions back into a pose.
    pub fn from_raw(raw: &[Vector4<f64>]) -> Result<Self> {
        let rotations = raw
            .iter()
            .map(|v| {
                let n = v.norm();
                if !(n > 1e-12 && n.is_finite()) {
                    return Err(Error::InvalidPose(format!("quaternion {:?} cannot be normalized", v.as_slice())));
                }
                let u = v / n;
                Ok(UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(u[0], u[1], u[2], u[3])))
            })
            .collect::<Result<_>>()?;
        Ok(Self { rotations })
    }
}

/// Global joint frames from forward kinematics. Joint `j` maps a canonical
/// point `x` to `rotation[j] * x + translation[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub local: Vec<Matrix3<f64>>,
    pub rotation: Vec<Matrix3<f64>>,
    pub translation: Vec<Vector3<f64>>,
    /// Posed joint locations.
    pub joints: Vec<Vector3<f64>>,
}

impl Kinematics {
    pub fn transform(&self, j: usize, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation[j] * x + self.translation[j]
    }
}

/// Forward kinematics with the root fixed at its canonical location.
pub fn forward_kinematics(model: &BodyModel, local: Vec<Matrix3<f64>>) -> Result<Kinematics> {
    let nj = model.num_joints();
    if local.len() != nj {
        return Err(Error::InvalidPose(format!("{} rotations for {nj} joints", local.len())));
    }
    let rest = model.joints();
    let mut rotation = Vec::with_capacity(nj);
    let mut joints = Vec::with_capacity(nj);
    for j in 0..nj {
        match model.parents[j] {
            None => {
                rotation.push(local[j]);
                joints.push(rest[j]);
            }
            Some(p) => {
                rotation.push(rotation[p] * local[j]);
                joints.push(joints[p] + rotation[p] * (rest[j] - rest[p]));
            }
        }
    }
    let translation = (0..nj).map(|j| joints[j] - rotation[j] * rest[j]).collect();
    Ok(Kinematics {
        local,
        rotation,
        translation,
        joints,
    })
}

/// Posed geometry before stage placement.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedBody {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
}

/// `v_i = Σ_j w_ij (R_j c_i + t_j)` for explicit per-joint transforms.
pub fn skin(model: &BodyModel, rotation: &[Matrix3<f64>], translation: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    model
        .vertices
        .iter()
        .zip(&model.influences)
        .map(|(c, inf)| {
            inf.iter()
                .fold(Vector3::zeros(), |acc, &(j, w)| acc + w * (rotation[j] * c + translation[j]))
        })
        .collect()
}

pub fn lbs_pose(model: &BodyModel, pose: &PoseParams) -> Result<PosedBody> {
    let kin = forward_kinematics(model, pose.local_matrices())?;
    Ok(posed_from_kinematics(model, &kin))
}

pub fn posed_from_kinematics(model: &BodyModel, kin: &Kinematics) -> PosedBody {
    PosedBody {
        vertices: skin(model, &kin.rotation, &kin.translation),
        joints: kin.joints.clone(),
    }
}

/// Canonical normals rotated by the blended joint rotations.
pub fn posed_normals(model: &BodyModel, kin: &Kinematics) -> Option<Vec<Vector3<f64>>> {
    let normals = model.normals()?;
    Some(
        normals
            .iter()
            .zip(&model.influences)
            .map(|(n, inf)| {
                let blended = inf.iter().fold(Matrix3::zeros(), |acc, &(j, w)| acc + kin.rotation[j] * w);
                let v = blended * n;
                v.try_normalize(1e-12).unwrap_or(v)
            })
            .collect(),
    )
}

/// Pulls gradients on posed vertices and posed joints back onto raw local
/// quaternions (see [`PoseParams::to_raw`]).
pub fn pose_backward(
    model: &BodyModel,
    raw: &[Vector4<f64>],
    kin: &Kinematics,
    grad_vertices: &[Vector3<f64>],
    grad_joints: &[Vector3<f64>],
) -> Vec<Vector4<f64>> {
    let nj = model.num_joints();
    let rest = model.joints();
    let mut g_rot = vec![Matrix3::zeros(); nj];
    let mut g_pos: Vec<Vector3<f64>> = grad_joints.to_vec();
    // v_i = Σ_j w_ij (G_j (c_i - J_j) + P_j)
    for (i, g) in grad_vertices.iter().enumerate() {
        if *g == Vector3::zeros() {
            continue;
        }
        let c = model.vertices[i];
        for &(j, w) in &model.influences[i] {
            g_rot[j] += (g * w) * (c - rest[j]).transpose();
            g_pos[j] += g * w;
        }
    }
    let mut g_local = vec![Matrix3::zeros(); nj];
    for j in (0..nj).rev() {
        match model.parents[j] {
            None => g_local[j] = g_rot[j],
            Some(p) => {
                let gp = g_pos[j];
                g_pos[p] += gp;
                g_rot[p] += gp * (rest[j] - rest[p]).transpose();
                g_local[j] = kin.rotation[p].transpose() * g_rot[j];
                let gr = g_rot[j] * kin.local[j].transpose();
                g_rot[p] += gr;
            }
        }
    }
    raw.iter().zip(&g_local).map(|(q, g)| normalized_quat_matrix_vjp(q, g)).collect()
}

/// Kinematics from raw quaternions.
pub fn forward_kinematics_raw(model: &BodyModel, raw: &[Vector4<f64>]) -> Result<Kinematics> {
    forward_kinematics(model, raw.iter().map(normalized_quat_matrix).collect())
}

/// Uniform scale and translation from body coordinates into the stage frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePlacement {
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl StagePlacement {
    pub fn new(scale: f64, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidPose(format!("placement scale {scale} must be positive")));
        }
        Ok(Self { scale, translation })
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.scale * v + self.translation
    }

    /// Placement equivalent to applying `self` and then `outer`.
    pub fn then(&self, outer: &StagePlacement) -> StagePlacement {
        StagePlacement {
            scale: self.scale * outer.scale,
            translation: outer.scale * self.translation + outer.translation,
        }
    }
}

pub fn to_stage(vertices: &[Vector3<f64>], placement: &StagePlacement) -> Vec<Vector3<f64>> {
    vertices.iter().map(|v| placement.apply(v)).collect()
}

/// Indices of vertices that face the camera unoccluded by the same body.
///
/// With faces, each vertex is compared against a depth buffer of the
/// rasterized mesh at its nearest pixel and kept when it is no more than
/// `epsilon` behind the front surface. Without faces, a vertex is kept when
/// its normal points towards the camera; without normals either, every
/// projectable vertex is kept.
pub fn visible_vertices(
    vertices: &[Vector3<f64>],
    faces: Option<&[[usize; 3]]>,
    normals: Option<&[Vector3<f64>]>,
    camera: &CameraModel,
    epsilon: f64,
) -> Vec<usize> {
    let projected: Vec<Option<(Vector2<f64>, f64)>> = vertices
        .iter()
        .map(|v| {
            let p = camera.project_point(v)?;
            Some((p.pixel, p.depth))
        })
        .collect();
    let in_image = |i: usize| projected[i].filter(|(px, _)| camera.in_image(px));
    let center = camera.center();
    match faces {
        Some(faces) => {
            let zbuf = rasterize_depth(&projected, faces, camera.width, camera.height);
            (0..vertices.len())
                .filter(|&i| match in_image(i) {
                    Some((px, z)) => {
                        let k = px.y.round() as usize * camera.width + px.x.round() as usize;
                        z <= zbuf[k] + epsilon
                    }
                    None => false,
                })
                .collect()
        }
        None => (0..vertices.len())
            .filter(|&i| {
                in_image(i).is_some() && normals.is_none_or(|n| n[i].dot(&(center - vertices[i])) > 0.0)
            })
            .collect(),
    }
}

/// Nearest surface depth per pixel center, interpolating inverse depth
/// across each triangle. Triangles with a vertex behind the camera are
/// skipped.
fn rasterize_depth(projected: &[Option<(Vector2<f64>, f64)>], faces: &[[usize; 3]], w: usize, h: usize) -> Vec<f64> {
    let mut zbuf = vec![f64::INFINITY; w * h];
    for f in faces {
        let (Some(a), Some(b), Some(c)) = (projected[f[0]], projected[f[1]], projected[f[2]]) else {
            continue;
        };
        let area = edge(&a.0, &b.0, &c.0);
        if area.abs() < 1e-12 {
            continue;
        }
        let xmin = a.0.x.min(b.0.x).min(c.0.x).ceil().max(0.0);
        let xmax = a.0.x.max(b.0.x).max(c.0.x).floor().min(w as f64 - 1.0);
        let ymin = a.0.y.min(b.0.y).min(c.0.y).ceil().max(0.0);
        let ymax = a.0.y.max(b.0.y).max(c.0.y).floor().min(h as f64 - 1.0);
        if xmin > xmax || ymin > ymax {
            continue;
        }
        for y in ymin as usize..=ymax as usize {
            for x in xmin as usize..=xmax as usize {
                let p = Vector2::new(x as f64, y as f64);
                let l0 = edge(&b.0, &c.0, &p) / area;
                let l1 = edge(&c.0, &a.0, &p) / area;
                let l2 = 1.0 - l0 - l1;
                if l0 < -1e-9 || l1 < -1e-9 || l2 < -1e-9 {
                    continue;
                }
                let z = 1.0 / (l0 / a.1 + l1 / b.1 + l2 / c.1);
                let k = y * w + x;
                if z < zbuf[k] {
                    zbuf[k] = z;
                }
            }
        }
    }
    zbuf
}

fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::check_gradient;
    use crate::rotation::axis_angle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    /// Three-joint chain along y with one vertex per joint and one blended
    /// vertex.
    fn chain() -> BodyModel {
        let joints = vec![Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 2.0, 0.0)];
        let vertices = vec![
            Vector3::new(0.2, 0.1, 0.0),
            Vector3::new(0.2, 1.2, 0.1),
            Vector3::new(-0.1, 2.5, 0.0),
            Vector3::new(0.0, 1.5, 0.3),
        ];
        let weights = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.4, 0.6],
        ];
        BodyModel::new(vertices, joints, vec![None, Some(0), Some(1)], weights, None, None).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, nj: usize) -> PoseParams {
        PoseParams {
            rotations: (0..nj)
                .map(|_| {
                    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    axis_angle(axis, rng.random_range(-1.0..1.0))
                })
                .collect(),
        }
    }

    #[test]
    fn rest_pose_is_fixed_point() {
        let m = chain();
        let posed = lbs_pose(&m, &PoseParams::identity(3)).unwrap();
        for (a, b) in posed.vertices.iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-9);
        }
        assert_eq!(posed.joints, m.joints().to_vec());
    }

    #[test]
    fn single_joint_quarter_turn() {
        let m = BodyModel::new(
            vec![Vector3::new(1.0, 0.0, 0.0)],
            vec![Vector3::zeros()],
            vec![None],
            vec![vec![1.0]],
            None,
            None,
        )
        .unwrap();
        let pose = PoseParams {
            rotations: vec![axis_angle(Vector3::z(), FRAC_PI_2)],
        };
        let v = lbs_pose(&m, &pose).unwrap().vertices[0];
        assert!((v - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn half_half_blend_of_translations() {
        let c = Vector3::new(0.3, -0.2, 0.7);
        let m = BodyModel::new(
            vec![c],
            vec![Vector3::zeros(), Vector3::y()],
            vec![None, Some(0)],
            vec![vec![0.5, 0.5]],
            None,
            None,
        )
        .unwrap();
        let v = skin(&m, &[Matrix3::identity(); 2], &[Vector3::x(), Vector3::y()])[0];
        assert!((v - (c + Vector3::new(0.5, 0.5, 0.0))).norm() < 1e-15);
    }

    #[test]
    fn child_follows_parent_rotation() {
        let m = chain();
        let mut pose = PoseParams::identity(3);
        pose.rotations[0] = axis_angle(Vector3::z(), FRAC_PI_2);
        let posed = lbs_pose(&m, &pose).unwrap();
        assert!((posed.joints[2] - Vector3::new(-2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((posed.vertices[2] - Vector3::new(-2.5, -0.1, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn global_rigid_transform_equivariance() {
        let m = chain();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = random_pose(&mut rng, 3);
        let kin = forward_kinematics(&m, pose.local_matrices()).unwrap();
        let base = skin(&m, &kin.rotation, &kin.translation);
        let g = axis_angle(Vector3::new(0.3, 1.0, -0.2), 0.8).to_rotation_matrix().into_inner();
        let gt = Vector3::new(1.0, -2.0, 0.5);
        let rot: Vec<_> = kin.rotation.iter().map(|r| g * r).collect();
        let tr: Vec<_> = kin.translation.iter().map(|t| g * t + gt).collect();
        let moved = skin(&m, &rot, &tr);
        for (a, b) in moved.iter().zip(&base) {
            assert!((a - (g * b + gt)).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_weights_and_trees() {
        let j = vec![Vector3::zeros(), Vector3::y()];
        let v = vec![Vector3::zeros()];
        assert!(BodyModel::new(v.clone(), j.clone(), vec![None, Some(0)], vec![vec![0.6, 0.6]], None, None).is_err());
        assert!(BodyModel::new(v.clone(), j.clone(), vec![None, Some(0)], vec![vec![1.5, -0.5]], None, None).is_err());
        assert!(BodyModel::new(v.clone(), j.clone(), vec![Some(1), None], vec![vec![1.0, 0.0]], None, None).is_err());
        assert!(BodyModel::new(v, j, vec![None, None], vec![vec![1.0, 0.0]], None, None).is_err());
    }

    #[test]
    fn placement_examples() {
        let p = StagePlacement::new(2.0, Vector3::x()).unwrap();
        assert_eq!(p.apply(&Vector3::repeat(1.0)), Vector3::new(3.0, 2.0, 2.0));
        let id = StagePlacement::new(1.0, Vector3::zeros()).unwrap();
        assert_eq!(id.apply(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(0.1, 0.2, 0.3));
        let q = StagePlacement::new(0.5, Vector3::new(0.0, 1.0, -1.0)).unwrap();
        let v = Vector3::new(0.3, -0.7, 1.1);
        assert!((q.apply(&p.apply(&v)) - p.then(&q).apply(&v)).norm() < 1e-15);
        assert!(StagePlacement::new(0.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let m = chain();
        let json = serde_json::to_string(&m).unwrap();
        let back: BodyModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = random_pose(&mut rng, 3);
        let pj = serde_json::to_string(&pose).unwrap();
        assert_eq!(serde_json::from_str::<PoseParams>(&pj).unwrap(), pose);
    }

    #[test]
    fn pose_gradient_matches_finite_differences() {
        let m = chain();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw0 = random_pose(&mut rng, 3).to_raw();
        let gv: Vec<Vector3<f64>> = (0..4).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let gj: Vec<Vector3<f64>> = (0..3).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let flat: Vec<f64> = raw0.iter().flat_map(|q| q.iter().copied().collect::<Vec<_>>()).collect();
        let f = |p: &[f64]| {
            let raw: Vec<Vector4<f64>> = p.chunks(4).map(Vector4::from_column_slice).collect();
            let kin = forward_kinematics_raw(&m, &raw).unwrap();
            let posed = posed_from_kinematics(&m, &kin);
            let val: f64 = posed.vertices.iter().zip(&gv).map(|(a, b)| a.dot(b)).sum::<f64>()
                + posed.joints.iter().zip(&gj).map(|(a, b)| a.dot(b)).sum::<f64>();
            let g = pose_backward(&m, &raw, &kin, &gv, &gj);
            (val, g.iter().flat_map(|q| q.iter().copied().collect::<Vec<_>>()).collect())
        };
        let r = check_gradient(f, &flat, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    /// Icosphere-like UV sphere.
    fn sphere(center: Vector3<f64>, radius: f64, rings: usize, segs: usize) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
        let mut v = vec![center + Vector3::new(0.0, radius, 0.0)];
        for r in 1..rings {
            let phi = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segs {
                let th = 2.0 * std::f64::consts::PI * s as f64 / segs as f64;
                v.push(center + radius * Vector3::new(phi.sin() * th.cos(), phi.cos(), phi.sin() * th.sin()));
            }
        }
        v.push(center - Vector3::new(0.0, radius, 0.0));
        let last = v.len() - 1;
        let idx = |r: usize, s: usize| 1 + (r - 1) * segs + s % segs;
        let mut f = Vec::new();
        for s in 0..segs {
            f.push([0, idx(1, s), idx(1, s + 1)]);
            f.push([last, idx(rings - 1, s + 1), idx(rings - 1, s)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segs {
                f.push([idx(r, s), idx(r + 1, s), idx(r + 1, s + 1)]);
                f.push([idx(r, s), idx(r + 1, s + 1), idx(r, s + 1)]);
            }
        }
        (v, f)
    }

    /// Segment from the camera center to the vertex hits another triangle.
    fn ray_occluded(vertices: &[Vector3<f64>], faces: &[[usize; 3]], origin: Vector3<f64>, i: usize) -> bool {
        let target = vertices[i];
        let dir = target - origin;
        let len = dir.norm();
        let d = dir / len;
        faces.iter().filter(|f| !f.contains(&i)).any(|f| {
            let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
            let e1 = b - a;
            let e2 = c - a;
            let p = d.cross(&e2);
            let det = e1.dot(&p);
            if det.abs() < 1e-14 {
                return false;
            }
            let s = origin - a;
            let u = s.dot(&p) / det;
            let q = s.cross(&e1);
            let v = d.dot(&q) / det;
            let t = e2.dot(&q) / det;
            u >= 0.0 && v >= 0.0 && u + v <= 1.0 && t > 0.0 && t < len - 1e-6
        })
    }

    #[test]
    fn convex_body_matches_ray_casting() {
        let cam = CameraModel::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y(), 220.0, 160, 120, 0).unwrap();
        let (v, f) = sphere(Vector3::zeros(), 0.5, 16, 24);
        let vis = visible_vertices(&v, Some(&f), None, &cam, 0.03);
        let eye = cam.center();
        let mut checked = 0;
        for i in 0..v.len() {
            let n = v[i].normalize();
            let facing = n.dot(&(eye - v[i]).normalize());
            if facing.abs() < 0.3 {
                continue; // grazing: sampling-resolution dependent
            }
            checked += 1;
            assert_eq!(vis.contains(&i), !ray_occluded(&v, &f, eye, i), "vertex {i}, facing {facing}");
            assert_eq!(vis.contains(&i), facing > 0.0);
        }
        assert!(checked > 200);
    }

    #[test]
    fn occluder_hides_and_removal_reveals() {
        let cam = CameraModel::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y(), 220.0, 160, 120, 0).unwrap();
        let (mut v, mut f) = sphere(Vector3::new(0.0, 0.0, 1.0), 0.4, 10, 16);
        let far_vis = visible_vertices(&v, Some(&f), None, &cam, 0.03);
        let (v2, f2) = sphere(Vector3::new(0.0, 0.0, -0.5), 0.6, 10, 16);
        let off = v.len();
        v.extend(v2);
        f.extend(f2.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
        let with_occluder = visible_vertices(&v, Some(&f), None, &cam, 0.03);
        let hidden: Vec<_> = with_occluder.iter().filter(|&&i| i < off).collect();
        assert!(hidden.is_empty());
        assert!(!far_vis.is_empty());
        // removing the occluder can only add visible vertices
        for i in &with_occluder {
            if *i < off {
                assert!(far_vis.contains(i));
            }
        }
    }

    #[test]
    fn faceless_fallbacks() {
        let cam = CameraModel::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y(), 220.0, 160, 120, 0).unwrap();
        let v = vec![Vector3::zeros()];
        let towards = vec![Vector3::new(0.0, 0.0, -1.0)];
        let away = vec![Vector3::new(0.0, 0.0, 1.0)];
        assert_eq!(visible_vertices(&v, None, Some(&towards), &cam, 0.01), vec![0]);
        assert!(visible_vertices(&v, None, Some(&away), &cam, 0.01).is_empty());
        let behind = vec![Vector3::new(0.0, 0.0, -5.0), Vector3::new(0.1, 0.0, -4.0)];
        assert!(visible_vertices(&behind, None, None, &cam, 0.01).is_empty());
        assert!(visible_vertices(&behind, Some(&[[0, 1, 0]]), None, &cam, 0.01).is_empty());
    }
}
