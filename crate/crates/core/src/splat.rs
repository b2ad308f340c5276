//! Gaussian splats, tagged splat sets, composites and the scene radius.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{serde_wxyz, unit_quat_matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub center: Vector3<f64>,
    #[serde(with = "serde_wxyz")]
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
}

impl Splat {
    pub fn new(
        center: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        color: Vector3<f64>,
        opacity: f64,
    ) -> Result<Self> {
        let s = Self {
            center,
            rotation,
            scale,
            color,
            opacity,
        };
        s.validate()?;
        Ok(s)
    }

    /// Axis-aligned isotropic splat.
    pub fn isotropic(center: Vector3<f64>, radius: f64, color: Vector3<f64>, opacity: f64) -> Result<Self> {
        Self::new(center, UnitQuaternion::identity(), Vector3::repeat(radius), color, opacity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSplat(m));
        if !self.center.iter().all(|v| v.is_finite()) {
            return bad("non-finite center".into());
        }
        if (self.rotation.coords.norm() - 1.0).abs() > 1e-6 {
            return bad(format!("rotation norm {}", self.rotation.coords.norm()));
        }
        if !self.scale.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return bad(format!("scale {:?} must be positive", self.scale.as_slice()));
        }
        if !self.color.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return bad(format!("color {:?} outside [0, 1]", self.color.as_slice()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return bad(format!("opacity {} outside [0, 1]", self.opacity));
        }
        Ok(())
    }

    /// World-space covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = unit_quat_matrix(&self.rotation);
        let s = Matrix3::from_diagonal(&self.scale);
        r * s * s.transpose() * r.transpose()
    }

    pub fn mean_scale(&self) -> f64 {
        self.scale.mean()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplatTag {
    Stage,
    Actor(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplatSet {
    pub tag: SplatTag,
    pub splats: Vec<Splat>,
}

impl SplatSet {
    pub fn new(tag: SplatTag, splats: Vec<Splat>) -> Self {
        Self { tag, splats }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.splats.iter().map(|s| s.center).collect()
    }
}

/// Union of a stage set and any number of actor sets with distinct tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<SplatSet>", into = "Vec<SplatSet>")]
pub struct Composite {
    sets: Vec<SplatSet>,
}

impl Composite {
    pub fn new(sets: Vec<SplatSet>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &sets {
            if !seen.insert(s.tag) {
                return Err(Error::InvalidSplat(format!("duplicate splat set tag {:?}", s.tag)));
            }
        }
        Ok(Self { sets })
    }

    pub fn sets(&self) -> &[SplatSet] {
        &self.sets
    }

    pub fn get(&self, tag: SplatTag) -> Option<&SplatSet> {
        self.sets.iter().find(|s| s.tag == tag)
    }

    /// All splats of all sets, in set order.
    pub fn flatten(&self) -> Vec<Splat> {
        self.sets.iter().flat_map(|s| s.splats.iter().cloned()).collect()
    }
}

impl TryFrom<Vec<SplatSet>> for Composite {
    type Error = Error;
    fn try_from(v: Vec<SplatSet>) -> Result<Self> {
        Composite::new(v)
    }
}

impl From<Composite> for Vec<SplatSet> {
    fn from(c: Composite) -> Self {
        c.sets
    }
}

/// Extent of the stage in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneRadius(f64);

impl SceneRadius {
    pub fn new(r: f64) -> Result<Self> {
        if r > 0.0 && r.is_finite() {
            Ok(Self(r))
        } else {
            Err(Error::DegenerateRadius)
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Maximum distance of the points from their centroid.
pub fn compute_scene_radius(points: &[Vector3<f64>]) -> Result<SceneRadius> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64;
    let r = points.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    SceneRadius::new(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn radius_of_unit_cube() {
        let mut pts = Vec::new();
        for x in [-0.5, 0.5] {
            for y in [-0.5, 0.5] {
                for z in [-0.5, 0.5] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        // brute force: largest pairwise half-diagonal from the centroid
        let expected = pts.iter().map(|p: &Vector3<f64>| p.norm()).fold(0.0, f64::max);
        let r = compute_scene_radius(&pts).unwrap().get();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn radius_degenerate_cases() {
        assert!(matches!(compute_scene_radius(&[]), Err(Error::EmptyPointSet)));
        assert!(matches!(
            compute_scene_radius(&[Vector3::new(1.0, 2.0, 3.0)]),
            Err(Error::DegenerateRadius)
        ));
        let r = compute_scene_radius(&[Vector3::x(), -Vector3::x()]).unwrap();
        assert_eq!(r.get(), 1.0);
    }

    #[test]
    fn splat_validation() {
        let ok = Splat::isotropic(Vector3::zeros(), 0.1, Vector3::repeat(0.5), 0.7);
        assert!(ok.is_ok());
        assert!(Splat::isotropic(Vector3::zeros(), 0.0, Vector3::repeat(0.5), 0.7).is_err());
        assert!(Splat::isotropic(Vector3::zeros(), 0.1, Vector3::repeat(1.5), 0.7).is_err());
        assert!(Splat::isotropic(Vector3::zeros(), 0.1, Vector3::repeat(0.5), -0.1).is_err());
    }

    #[test]
    fn composite_rejects_duplicate_tags() {
        let a = SplatSet::new(SplatTag::Actor(1), vec![]);
        let b = SplatSet::new(SplatTag::Actor(1), vec![]);
        assert!(Composite::new(vec![a.clone(), b]).is_err());
        let c = Composite::new(vec![SplatSet::new(SplatTag::Stage, vec![]), a]).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: Composite = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let tags: Vec<_> = back.sets().iter().map(|s| s.tag).collect();
        assert_eq!(tags, vec![SplatTag::Stage, SplatTag::Actor(1)]);
    }

    proptest! {
        #[test]
        fn covariance_is_spd(
            w in -1.0..1.0f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64,
            sx in 0.01..2.0f64, sy in 0.01..2.0f64, sz in 0.01..2.0f64,
        ) {
            let q = nalgebra::Quaternion::new(w, x, y, z);
            prop_assume!(q.norm() > 1e-3);
            let s = Splat::new(Vector3::zeros(), UnitQuaternion::from_quaternion(q), Vector3::new(sx, sy, sz), Vector3::zeros(), 1.0).unwrap();
            let c = s.covariance();
            prop_assert!((c - c.transpose()).abs().max() < 1e-12);
            let eig = c.symmetric_eigen().eigenvalues;
            prop_assert!(eig.iter().all(|&e| e > 0.0));
        }
    }
}
