//! Per-frame affine alignment of monocular depth to metric camera depth.
//!
//! For stage points `p` visible in a frame, the fit minimizes
//! `Σ huber(p_z - (a·D_mono(π(p)) + b); δ)` over the scale `a` and offset
//! `b` by iteratively reweighted least squares, starting from the ordinary
//! least-squares solution.

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::raster::{DepthRaster, Mask};

pub const MIN_CORRESPONDENCES: usize = 10;

/// Huber penalty: `r²/2` inside `δ`, `δ(|r| - δ/2)` outside.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to the residual.
pub fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberParams {
    pub delta: f64,
}

impl HuberParams {
    pub fn new(delta: f64) -> Result<Self> {
        if delta > 0.0 && delta.is_finite() {
            Ok(Self { delta })
        } else {
            Err(Error::InvalidConfig(format!("Huber threshold must be positive, got {delta}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineDepthFit {
    pub a: f64,
    pub b: f64,
    /// Fraction of correspondences with `|residual| <= δ`.
    pub inlier_fraction: f64,
    /// RMS residual over the inlier correspondences.
    pub residual_rms: f64,
}

impl AffineDepthFit {
    /// Fits with at most half their correspondences inside `δ` are treated
    /// as unaligned and their frames get no depth supervision downstream.
    pub fn is_accepted(&self) -> bool {
        self.a > 0.0 && self.inlier_fraction > 0.5
    }

    pub fn apply(&self, mono: &DepthRaster) -> DepthRaster {
        mono.affine(self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignOptions {
    /// Correspondences beyond this count are subsampled uniformly.
    pub max_points: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            max_points: 5000,
            seed: 0,
            max_iterations: 100,
            tolerance: 1e-9,
        }
    }
}

/// Pairs of (mono depth at the projection, camera-frame point depth).
pub fn correspondences(mono: &DepthRaster, points: &[Vector3<f64>], camera: &CameraModel) -> Vec<(f64, f64)> {
    points
        .iter()
        .filter_map(|p| {
            let proj = camera.project_point(p)?;
            let (m, _) = mono.sample_bilinear(&proj.pixel)?;
            Some((m, proj.depth))
        })
        .collect()
}

/// Points whose projection and its bilinear neighbourhood avoid every mask;
/// used to keep stage points that are not hidden behind actors.
pub fn points_clear_of_masks(points: &[Vector3<f64>], camera: &CameraModel, masks: &[&Mask]) -> Vec<Vector3<f64>> {
    points
        .iter()
        .filter(|p| {
            let Some(proj) = camera.project_point(p) else {
                return false;
            };
            if !camera.in_image(&proj.pixel) {
                return false;
            }
            let (x0, y0) = (proj.pixel.x.floor() as usize, proj.pixel.y.floor() as usize);
            let x1 = (x0 + 1).min(camera.width - 1);
            let y1 = (y0 + 1).min(camera.height - 1);
            masks
                .iter()
                .all(|m| !(m.get(x0, y0) || m.get(x1, y0) || m.get(x0, y1) || m.get(x1, y1)))
        })
        .copied()
        .collect()
}

/// Huber objective of a candidate `(a, b)` over correspondence pairs.
pub fn objective(pairs: &[(f64, f64)], a: f64, b: f64, delta: f64) -> f64 {
    pairs.iter().map(|&(m, z)| huber(z - (a * m + b), delta)).sum()
}

/// [`objective`] with its gradient with respect to `(a, b)`.
pub fn objective_grad(pairs: &[(f64, f64)], a: f64, b: f64, delta: f64) -> (f64, [f64; 2]) {
    let mut g = [0.0; 2];
    let mut total = 0.0;
    for &(m, z) in pairs {
        let r = z - (a * m + b);
        total += huber(r, delta);
        let d = huber_grad(r, delta);
        g[0] -= d * m;
        g[1] -= d;
    }
    (total, g)
}

pub fn align_depth(
    mono: &DepthRaster,
    points: &[Vector3<f64>],
    camera: &CameraModel,
    delta1: f64,
) -> Result<AffineDepthFit> {
    align_depth_with(mono, points, camera, delta1, &AlignOptions::default())
}

pub fn align_depth_with(
    mono: &DepthRaster,
    points: &[Vector3<f64>],
    camera: &CameraModel,
    delta1: f64,
    opts: &AlignOptions,
) -> Result<AffineDepthFit> {
    HuberParams::new(delta1)?;
    let mut pairs = correspondences(mono, points, camera);
    if pairs.len() > opts.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, pairs.len(), opts.max_points).into_vec();
        idx.sort_unstable();
        pairs = idx.into_iter().map(|i| pairs[i]).collect();
    }
    fit_pairs(&pairs, delta1, opts)
}

/// IRLS on precomputed correspondences.
pub fn fit_pairs(pairs: &[(f64, f64)], delta: f64, opts: &AlignOptions) -> Result<AffineDepthFit> {
    if pairs.len() < MIN_CORRESPONDENCES {
        return Err(Error::TooFewCorrespondences {
            found: pairs.len(),
            required: MIN_CORRESPONDENCES,
        });
    }
    let ones = vec![1.0; pairs.len()];
    let (mut a, mut b) = weighted_lsq(pairs, &ones)?;
    for _ in 0..opts.max_iterations {
        let weights: Vec<f64> = pairs
            .iter()
            .map(|&(m, z)| {
                let r = (z - (a * m + b)).abs();
                if r <= delta {
                    1.0
                } else {
                    delta / r
                }
            })
            .collect();
        let (na, nb) = weighted_lsq(pairs, &weights)?;
        let change = (na - a).abs() + (nb - b).abs();
        a = na;
        b = nb;
        if change < opts.tolerance {
            break;
        }
    }
    if !(a > 0.0) {
        return Err(Error::DegenerateFit(format!("non-positive scale a = {a}")));
    }
    let residuals: Vec<f64> = pairs.iter().map(|&(m, z)| z - (a * m + b)).collect();
    let inliers: Vec<f64> = residuals.iter().copied().filter(|r| r.abs() <= delta).collect();
    let inlier_fraction = inliers.len() as f64 / residuals.len() as f64;
    let residual_rms = if inliers.is_empty() {
        0.0
    } else {
        (inliers.iter().map(|r| r * r).sum::<f64>() / inliers.len() as f64).sqrt()
    };
    Ok(AffineDepthFit {
        a,
        b,
        inlier_fraction,
        residual_rms,
    })
}

fn weighted_lsq(pairs: &[(f64, f64)], w: &[f64]) -> Result<(f64, f64)> {
    // centered normal equations
    let sw: f64 = w.iter().sum();
    let mean_m = pairs.iter().zip(w).map(|(p, w)| w * p.0).sum::<f64>() / sw;
    let mean_z = pairs.iter().zip(w).map(|(p, w)| w * p.1).sum::<f64>() / sw;
    let mut smm = 0.0;
    let mut smz = 0.0;
    for (&(m, z), &wi) in pairs.iter().zip(w) {
        smm += wi * (m - mean_m) * (m - mean_m);
        smz += wi * (m - mean_m) * (z - mean_z);
    }
    let spread = pairs.iter().map(|p| (p.0 - mean_m).abs()).fold(0.0, f64::max);
    if !(smm > 1e-24 * sw) || spread <= 1e-12 * mean_m.abs().max(1.0) {
        return Err(Error::DegenerateFit("monocular depths are constant; scale is unidentifiable".into()));
    }
    let a = smz / smm;
    let b = mean_z - a * mean_m;
    Ok((a, b))
}

/// Closed-form least-squares `(a, b)`, kept independent of the IRLS path
/// for verification.
pub fn least_squares_fit(pairs: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = pairs.len() as f64;
    let (sm, sz) = pairs.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let smm: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
    let smz: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
    let m = Matrix2::new(smm, sm, sm, n);
    let sol = m.try_inverse()? * Vector2::new(smz, sz);
    Some((sol.x, sol.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::Rng;

    fn cam() -> CameraModel {
        CameraModel::new(60.0, 60.0, 31.5, 23.5, Matrix3::identity(), Vector3::zeros(), 64, 48, 0).unwrap()
    }

    /// Slanted-plane scene: true depth at each pixel plus mono = (d - b) / a.
    fn scene(a: f64, b: f64) -> (DepthRaster, Vec<Vector3<f64>>, CameraModel) {
        let cam = cam();
        let mut mono = DepthRaster::empty(64, 48);
        let mut pts = Vec::new();
        for y in 0..48 {
            for x in 0..64 {
                let d = 2.0 + 0.05 * x as f64 + 0.03 * y as f64;
                mono.set(x, y, (d - b) / a);
                if (x + y) % 3 == 0 {
                    pts.push(cam.unproject(&Vector2::new(x as f64, y as f64), d));
                }
            }
        }
        (mono, pts, cam)
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(3.0, 1.0), 2.5);
        assert_eq!(huber(-3.0, 1.0), 2.5);
        let d = 0.7;
        assert!((huber(d, d) - 0.5 * d * d).abs() < 1e-15);
        assert!((d * (d - d / 2.0) - 0.5 * d * d).abs() < 1e-15);
        assert_eq!(huber_grad(0.2, 1.0), 0.2);
        assert_eq!(huber_grad(-2.0, 1.0), -1.0);
    }

    #[test]
    fn identity_map_recovered() {
        let (mono, pts, cam) = scene(1.0, 0.0);
        let fit = align_depth(&mono, &pts, &cam, 0.05).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-9 && fit.b.abs() < 1e-8, "{fit:?}");
        assert!(fit.residual_rms < 1e-9);
        assert_eq!(fit.inlier_fraction, 1.0);
    }

    #[test]
    fn noiseless_affine_recovered() {
        let (mono, pts, cam) = scene(2.0, 0.5);
        let pairs = correspondences(&mono, &pts, &cam);
        let oracle = least_squares_fit(&pairs).unwrap();
        assert!((oracle.0 - 2.0).abs() < 1e-9 && (oracle.1 - 0.5).abs() < 1e-9);
        let fit = align_depth(&mono, &pts, &cam, 0.05).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-6 && (fit.b - 0.5).abs() < 1e-6, "{fit:?}");
        assert!(fit.is_accepted());
    }

    #[test]
    fn equivariant_under_depth_scaling() {
        let (mono, pts, cam) = scene(2.0, 0.5);
        let k = 3.0;
        let scaled: Vec<_> = pts.iter().map(|p| p * k).collect();
        let base = align_depth(&mono, &pts, &cam, 0.05).unwrap();
        let fit = align_depth(&mono, &scaled, &cam, 0.05 * k).unwrap();
        assert!((fit.a - k * base.a).abs() < 1e-6 * k);
        assert!((fit.b - k * base.b).abs() < 1e-6 * k);
    }

    #[test]
    fn irls_never_worsens_the_l2_start() {
        let (mono, pts, cam) = scene(2.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy: Vec<_> = pts
            .iter()
            .map(|p| {
                let k = if rng.random_bool(0.15) { 1.8 } else { 1.0 + rng.random_range(-0.01..0.01) };
                p * k
            })
            .collect();
        let pairs = correspondences(&mono, &noisy, &cam);
        let (a0, b0) = least_squares_fit(&pairs).unwrap();
        let fit = fit_pairs(&pairs, 0.05, &AlignOptions::default()).unwrap();
        assert!(objective(&pairs, fit.a, fit.b, 0.05) <= objective(&pairs, a0, b0, 0.05));
    }

    #[test]
    fn too_few_points() {
        let (mono, pts, cam) = scene(2.0, 0.5);
        assert!(matches!(
            align_depth(&mono, &pts[..9], &cam, 0.05),
            Err(Error::TooFewCorrespondences { found: 9, .. })
        ));
        // points behind the camera never count
        let behind: Vec<_> = pts.iter().map(|p| -p).collect();
        assert!(align_depth(&mono, &behind, &cam, 0.05).is_err());
    }

    #[test]
    fn constant_mono_is_degenerate() {
        let cam = cam();
        let mut mono = DepthRaster::empty(64, 48);
        let mut pts = Vec::new();
        for y in 0..48 {
            for x in 0..64 {
                mono.set(x, y, 3.0);
                pts.push(cam.unproject(&Vector2::new(x as f64, y as f64), 2.0 + 0.01 * x as f64));
            }
        }
        assert!(matches!(align_depth(&mono, &pts, &cam, 0.05), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn negative_scale_is_rejected() {
        let cam = cam();
        let mut mono = DepthRaster::empty(64, 48);
        let mut pts = Vec::new();
        for y in 0..48 {
            for x in 0..64 {
                let d = 2.0 + 0.05 * x as f64;
                mono.set(x, y, 10.0 - d);
                pts.push(cam.unproject(&Vector2::new(x as f64, y as f64), d));
            }
        }
        assert!(matches!(align_depth(&mono, &pts, &cam, 0.05), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn subsampling_is_deterministic() {
        let (mono, pts, cam) = scene(2.0, 0.5);
        let opts = AlignOptions {
            max_points: 50,
            seed: 11,
            ..Default::default()
        };
        let a = align_depth_with(&mono, &pts, &cam, 0.05, &opts).unwrap();
        let b = align_depth_with(&mono, &pts, &cam, 0.05, &opts).unwrap();
        assert_eq!(a, b);
        assert!((a.a - 2.0).abs() < 1e-6);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let pairs: Vec<(f64, f64)> = (0..40).map(|i| (1.0 + 0.1 * i as f64, 2.5 + 0.21 * i as f64 + if i % 5 == 0 { 3.0 } else { 0.0 })).collect();
        let f = |p: &[f64]| {
            let (v, g) = objective_grad(&pairs, p[0], p[1], 0.4);
            (v, g.to_vec())
        };
        let r = crate::optim::check_gradient(f, &[1.9, 0.3], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(f(&[1.9, 0.3]).0, objective(&pairs, 1.9, 0.3, 0.4));
    }
}
