//! Front-to-back compositing of splat depth and color, and the stage
//! reconstruction losses.
//!
//! Each splat has an isotropic screen footprint whose standard deviation in
//! pixels is `mean(scale) * fx / depth`. Splats are sorted by camera-frame
//! depth and composited per pixel:
//!
//! ```text
//! T_1 = 1,  T_{k+1} = T_k (1 - α_k)
//! D = Σ_k d_k α_k T_k,   C = Σ_k c_k α_k T_k,   A = Σ_k α_k T_k
//! ```
//!
//! Depth is not normalized by `A`; pixels with `A` below
//! [`MIN_ACCUMULATED_ALPHA`] are marked invalid.

use log::warn;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::raster::{ColorImage, DepthRaster, Mask};
use crate::splat::Splat;
use crate::ssim::{ssim_masked, ssim_masked_grad, SsimParams};

pub const DEFAULT_TRUNCATION_SIGMAS: f64 = 3.0;
pub const MIN_ACCUMULATED_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Footprint cutoff in standard deviations; `None` evaluates every splat
    /// at every pixel.
    pub truncation: Option<f64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            truncation: Some(DEFAULT_TRUNCATION_SIGMAS),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub depth: DepthRaster,
    pub color: ColorImage,
    pub accumulated_alpha: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ScreenSplat {
    index: usize,
    pixel: Vector2<f64>,
    depth: f64,
    sigma: f64,
    opacity: f64,
    color: Vector3<f64>,
}

/// Splats projected and sorted front to back, binned by image row.
struct Prepared {
    splats: Vec<ScreenSplat>,
    rows: Vec<Vec<usize>>,
    cutoff_sq: Option<f64>,
}

fn prepare(splats: &[Splat], camera: &CameraModel, opts: &RenderOptions) -> Prepared {
    let mut projected: Vec<ScreenSplat> = splats
        .iter()
        .enumerate()
        .filter_map(|(index, s)| {
            let proj = camera.project_point(&s.center)?;
            Some(ScreenSplat {
                index,
                pixel: proj.pixel,
                depth: proj.depth,
                sigma: s.mean_scale() * camera.fx / proj.depth,
                opacity: s.opacity,
                color: s.color,
            })
        })
        .collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let h = camera.height;
    let mut rows = vec![Vec::new(); h];
    for (k, s) in projected.iter().enumerate() {
        let (lo, hi) = match opts.truncation {
            None => (0, h as isize - 1),
            Some(n) => {
                let r = n * s.sigma;
                ((s.pixel.y - r).ceil().max(0.0) as isize, (s.pixel.y + r).floor().min(h as f64 - 1.0) as isize)
            }
        };
        for y in lo.max(0)..=hi {
            rows[y as usize].push(k);
        }
    }
    Prepared {
        splats: projected,
        rows,
        cutoff_sq: opts.truncation.map(|n| n * n),
    }
}

impl Prepared {
    /// Front-to-back `(position in sorted list, gaussian, alpha)` at a pixel.
    fn contributions(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let p = Vector2::new(x as f64, y as f64);
        self.rows[y].iter().filter_map(move |&k| {
            let s = &self.splats[k];
            let q = (p - s.pixel).norm_squared() / (s.sigma * s.sigma);
            if let Some(c) = self.cutoff_sq {
                if q > c {
                    return None;
                }
            }
            let g = (-0.5 * q).exp();
            Some((k, g, s.opacity * g))
        })
    }
}

pub fn render(splats: &[Splat], camera: &CameraModel) -> RenderedFrame {
    render_with(splats, camera, &RenderOptions::default())
}

pub fn render_with(splats: &[Splat], camera: &CameraModel, opts: &RenderOptions) -> RenderedFrame {
    let prep = prepare(splats, camera, opts);
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<(f64, Vector3<f64>, f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut t = 1.0;
                    let mut d = 0.0;
                    let mut c = Vector3::zeros();
                    let mut a = 0.0;
                    for (k, _, alpha) in prep.contributions(x, y) {
                        let s = &prep.splats[k];
                        let wgt = alpha * t;
                        d += s.depth * wgt;
                        c += s.color * wgt;
                        a += wgt;
                        t *= 1.0 - alpha;
                    }
                    (d, c, a)
                })
                .collect()
        })
        .collect();

    let mut depth = DepthRaster::empty(w, h);
    let mut color = ColorImage::black(w, h);
    let mut accumulated_alpha = vec![0.0; w * h];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (d, c, a)) in row.into_iter().enumerate() {
            let i = y * w + x;
            accumulated_alpha[i] = a;
            color.pixels[i] = c;
            if a >= MIN_ACCUMULATED_ALPHA {
                depth.set(x, y, d);
            }
        }
    }
    RenderedFrame {
        depth,
        color,
        accumulated_alpha,
    }
}

/// Gradients of a scalar loss with respect to per-splat color and opacity,
/// indexed like the input splats.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceGrad {
    pub color: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
}

/// Back-propagates `d loss / d color` of every pixel to splat color and
/// opacity. Geometry is treated as fixed.
pub fn render_color_backward(
    splats: &[Splat],
    camera: &CameraModel,
    opts: &RenderOptions,
    pixel_grad: &[Vector3<f64>],
) -> AppearanceGrad {
    let prep = prepare(splats, camera, opts);
    let (w, h) = (camera.width, camera.height);
    assert_eq!(pixel_grad.len(), w * h);
    let n = splats.len();
    const BAND: usize = 8;
    let partials: Vec<(Vec<Vector3<f64>>, Vec<f64>)> = (0..h.div_ceil(BAND))
        .into_par_iter()
        .map(|band| {
            let mut gc = vec![Vector3::zeros(); n];
            let mut go = vec![0.0; n];
            let mut stack: Vec<(usize, f64, f64, f64)> = Vec::new();
            for y in band * BAND..((band + 1) * BAND).min(h) {
                for x in 0..w {
                    let g = pixel_grad[y * w + x];
                    if g == Vector3::zeros() {
                        continue;
                    }
                    stack.clear();
                    let mut t = 1.0;
                    for (k, gauss, alpha) in prep.contributions(x, y) {
                        stack.push((k, gauss, alpha, t));
                        t *= 1.0 - alpha;
                    }
                    // color composited behind the current splat, normalized to its own transmittance
                    let mut behind = Vector3::zeros();
                    for &(k, gauss, alpha, t) in stack.iter().rev() {
                        let s = &prep.splats[k];
                        gc[s.index] += g * (alpha * t);
                        go[s.index] += gauss * t * g.dot(&(s.color - behind));
                        behind = s.color * alpha + behind * (1.0 - alpha);
                    }
                }
            }
            (gc, go)
        })
        .collect();
    let mut out = AppearanceGrad {
        color: vec![Vector3::zeros(); n],
        opacity: vec![0.0; n],
    };
    for (gc, go) in partials {
        for i in 0..n {
            out.color[i] += gc[i];
            out.opacity[i] += go[i];
        }
    }
    out
}

fn check_dims(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::SizeMismatch { expected, got });
    }
    Ok(())
}

/// Mean of `log(1 + |render - target|)` over masked pixels where both
/// rasters are valid.
pub fn loss_depth_logl1(render: &DepthRaster, target: &DepthRaster, mask: &Mask) -> Result<f64> {
    loss_depth_logl1_grad(render, target, mask).map(|(v, _)| v)
}

/// [`loss_depth_logl1`] with its gradient with respect to the render values.
pub fn loss_depth_logl1_grad(render: &DepthRaster, target: &DepthRaster, mask: &Mask) -> Result<(f64, Vec<f64>)> {
    check_dims(render.dims(), target.dims())?;
    check_dims(render.dims(), mask.dims())?;
    let set: Vec<usize> = (0..render.len())
        .filter(|&i| mask.values[i] && render.is_valid(i) && target.is_valid(i))
        .collect();
    let mut grad = vec![0.0; render.len()];
    if set.is_empty() {
        warn!("depth loss evaluated on an empty pixel set");
        return Ok((0.0, grad));
    }
    let n = set.len() as f64;
    let (rv, tv) = (render.values(), target.values());
    let mut total = 0.0;
    for &i in &set {
        let r = rv[i] - tv[i];
        total += r.abs().ln_1p();
        grad[i] = r.signum() / (1.0 + r.abs()) / n;
    }
    Ok((total / n, grad))
}

/// Total variation of the valid region: the sum of absolute forward
/// differences in x and y between valid neighbours, divided by the number of
/// pixels that have at least one such difference.
pub fn loss_tv(render: &DepthRaster) -> f64 {
    loss_tv_grad(render).0
}

pub fn loss_tv_grad(render: &DepthRaster) -> (f64, Vec<f64>) {
    let (w, h) = render.dims();
    let v = render.values();
    let mut grad = vec![0.0; v.len()];
    let mut edges = Vec::new();
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !render.is_valid(i) {
                continue;
            }
            let before = edges.len();
            if x + 1 < w && render.is_valid(i + 1) {
                edges.push((i, i + 1));
            }
            if y + 1 < h && render.is_valid(i + w) {
                edges.push((i, i + w));
            }
            if edges.len() > before {
                count += 1;
            }
        }
    }
    if count == 0 {
        return (0.0, grad);
    }
    let n = count as f64;
    let mut total = 0.0;
    for (a, b) in edges {
        let d = v[b] - v[a];
        total += d.abs();
        grad[b] += d.signum() / n;
        grad[a] -= d.signum() / n;
    }
    (total / n, grad)
}

/// Mean absolute per-channel error over masked pixels, with its gradient
/// with respect to `render`. `None` when the mask is empty.
pub fn masked_l1_grad(render: &ColorImage, target: &ColorImage, mask: &Mask) -> Option<(f64, Vec<Vector3<f64>>)> {
    let count = mask.count();
    if count == 0 {
        return None;
    }
    let n = 3.0 * count as f64;
    let mut grad = vec![Vector3::zeros(); render.pixels.len()];
    let mut total = 0.0;
    for (i, g) in grad.iter_mut().enumerate() {
        if mask.values[i] {
            let d = render.pixels[i] - target.pixels[i];
            total += d.abs().sum();
            *g = d.map(f64::signum) / n;
        }
    }
    Some((total / n, grad))
}

/// `(1 - SSIM) / 2` on masked luminance, with its gradient with respect to
/// `render`. `None` when the mask is empty.
pub fn masked_dssim_grad(render: &ColorImage, target: &ColorImage, mask: &Mask) -> Option<(f64, Vec<Vector3<f64>>)> {
    let (w, h) = render.dims();
    let (s, g) = ssim_masked_grad(
        &render.luminance(),
        &target.luminance(),
        w,
        h,
        &mask.values,
        &SsimParams::default(),
    )?;
    let luma = Vector3::new(0.299, 0.587, 0.114);
    Some(((1.0 - s) / 2.0, g.into_iter().map(|v| luma * (-0.5 * v)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLossWeights {
    pub dssim: f64,
    pub depth: f64,
    pub smooth: f64,
}

impl Default for StageLossWeights {
    fn default() -> Self {
        Self {
            dssim: 0.2,
            depth: 0.2,
            smooth: 0.5,
        }
    }
}

impl StageLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.dssim, self.depth, self.smooth].iter().all(|v| *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("stage loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLoss {
    pub color: f64,
    pub dssim: f64,
    pub depth: f64,
    pub tv: f64,
    pub total: f64,
}

/// Stage reconstruction objective. `stage_mask` marks the pixels that belong
/// to the stage; everything else is excluded from the color and depth terms.
pub fn loss_stage(
    render: &RenderedFrame,
    image: &ColorImage,
    aligned_depth: &DepthRaster,
    stage_mask: &Mask,
    w: &StageLossWeights,
) -> Result<StageLoss> {
    w.validate()?;
    check_dims(render.color.dims(), image.dims())?;
    check_dims(render.color.dims(), stage_mask.dims())?;
    let empty = || Error::EmptyMask("stage loss needs at least one stage pixel".into());
    let color = masked_l1_grad(&render.color, image, stage_mask).ok_or_else(empty)?.0;
    let (width, height) = image.dims();
    let ssim = ssim_masked(
        &render.color.luminance(),
        &image.luminance(),
        width,
        height,
        &stage_mask.values,
        &SsimParams::default(),
    )
    .ok_or_else(empty)?;
    let dssim = (1.0 - ssim) / 2.0;
    let depth = loss_depth_logl1(&render.depth, aligned_depth, stage_mask)?;
    let tv = loss_tv(&render.depth);
    let total = (1.0 - w.dssim) * color + w.dssim * dssim + w.depth * depth + w.smooth * tv;
    Ok(StageLoss {
        color,
        dssim,
        depth,
        tv,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::check_gradient;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize) -> CameraModel {
        CameraModel::new(
            50.0,
            50.0,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            Matrix3::identity(),
            Vector3::zeros(),
            w,
            h,
            0,
        )
        .unwrap()
    }

    fn raster(w: usize, h: usize, vals: &[f64]) -> DepthRaster {
        DepthRaster::from_options(w, h, vals.iter().map(|&v| Some(v)).collect()).unwrap()
    }

    /// Direct per-pixel transcription: every splat, explicit product of
    /// transmittances.
    fn reference_pixel(splats: &[Splat], cam: &CameraModel, x: usize, y: usize) -> (f64, f64) {
        let mut items: Vec<(f64, f64)> = Vec::new();
        for s in splats {
            let pc = cam.rotation * s.center + cam.translation;
            if pc.z <= 0.0 {
                continue;
            }
            let u = cam.fx * pc.x / pc.z + cam.cx;
            let v = cam.fy * pc.y / pc.z + cam.cy;
            let sigma = (s.scale.x + s.scale.y + s.scale.z) / 3.0 * cam.fx / pc.z;
            let r2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
            items.push((pc.z, s.opacity * (-0.5 * r2 / (sigma * sigma)).exp()));
        }
        items.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut d = 0.0;
        let mut acc = 0.0;
        for k in 0..items.len() {
            let t: f64 = items[..k].iter().map(|(_, a)| 1.0 - a).product();
            d += items[k].0 * items[k].1 * t;
            acc += items[k].1 * t;
        }
        (d, acc)
    }

    fn random_splats(rng: &mut ChaCha8Rng, n: usize) -> Vec<Splat> {
        (0..n)
            .map(|_| {
                Splat::isotropic(
                    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..4.0)),
                    rng.random_range(0.02..0.2),
                    Vector3::new(rng.random(), rng.random(), rng.random()),
                    rng.random_range(0.05..1.0),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn single_opaque_splat_at_center() {
        let cam = camera(21, 21);
        let s = Splat::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, Vector3::new(0.2, 0.4, 0.6), 1.0).unwrap();
        let f = render(&[s], &cam);
        let i = 10 * 21 + 10;
        assert_eq!(f.accumulated_alpha[i], 1.0);
        assert_eq!(f.depth.get(10, 10), Some(2.0));
        assert_eq!(f.color.pixels[i], Vector3::new(0.2, 0.4, 0.6));
    }

    #[test]
    fn two_half_transparent_splats() {
        let cam = camera(21, 21);
        let near = Splat::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.1, Vector3::zeros(), 0.5).unwrap();
        let far = Splat::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, Vector3::zeros(), 0.5).unwrap();
        let f = render(&[far, near], &cam);
        // 1 * 0.5 + 2 * 0.5 * (1 - 0.5)
        assert!((f.depth.get(10, 10).unwrap() - 1.0).abs() < 1e-15);
        assert!((f.accumulated_alpha[10 * 21 + 10] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_opacity_renders_nothing() {
        let cam = camera(15, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut splats = random_splats(&mut rng, 20);
        for s in &mut splats {
            s.opacity = 0.0;
        }
        let f = render(&splats, &cam);
        assert!(f.accumulated_alpha.iter().all(|&a| a == 0.0));
        assert_eq!(f.depth.valid_count(), 0);
        assert!(f.color.pixels.iter().all(|c| *c == Vector3::zeros()));
    }

    #[test]
    fn behind_camera_splats_are_culled() {
        let cam = camera(15, 11);
        let s = Splat::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.5, Vector3::repeat(1.0), 1.0).unwrap();
        let f = render(&[s], &cam);
        assert_eq!(f.depth.valid_count(), 0);
    }

    #[test]
    fn matches_reference_without_truncation() {
        let cam = camera(24, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let splats = random_splats(&mut rng, 40);
            let f = render_with(&splats, &cam, &RenderOptions { truncation: None });
            for y in 0..18 {
                for x in 0..24 {
                    let (d, a) = reference_pixel(&splats, &cam, x, y);
                    assert!((f.accumulated_alpha[y * 24 + x] - a).abs() < 1e-12);
                    if a >= MIN_ACCUMULATED_ALPHA {
                        assert!((f.depth.get(x, y).unwrap() - d).abs() < 1e-12);
                    } else {
                        assert!(f.depth.get(x, y).is_none());
                    }
                }
            }
        }
    }

    #[test]
    fn accumulated_alpha_grows_with_more_splats() {
        let cam = camera(16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let splats = random_splats(&mut rng, 30);
        let opts = RenderOptions { truncation: None };
        let mut prev = vec![0.0; 16 * 12];
        for n in 1..=splats.len() {
            let f = render_with(&splats[..n], &cam, &opts);
            for (a, p) in f.accumulated_alpha.iter().zip(&prev) {
                assert!(*a >= p - 1e-12);
                assert!(*a <= 1.0 + 1e-12);
            }
            prev = f.accumulated_alpha;
        }
    }

    #[test]
    fn appearance_backward_matches_finite_differences() {
        let cam = camera(12, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = random_splats(&mut rng, 8);
        let target: Vec<Vector3<f64>> = (0..120).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let opts = RenderOptions::default();
        // params: per splat r, g, b, opacity; quadratic pixel loss
        let pack: Vec<f64> = base
            .iter()
            .flat_map(|s| [s.color.x, s.color.y, s.color.z, s.opacity])
            .collect();
        let f = |p: &[f64]| {
            let splats: Vec<Splat> = base
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut s = s.clone();
                    s.color = Vector3::new(p[4 * i], p[4 * i + 1], p[4 * i + 2]);
                    s.opacity = p[4 * i + 3];
                    s
                })
                .collect();
            let fr = render_with(&splats, &cam, &opts);
            let mut loss = 0.0;
            let mut pg = Vec::new();
            for (c, t) in fr.color.pixels.iter().zip(&target) {
                loss += 0.5 * (c - t).norm_squared();
                pg.push(c - t);
            }
            let g = render_color_backward(&splats, &cam, &opts, &pg);
            let grad = (0..splats.len())
                .flat_map(|i| [g.color[i].x, g.color[i].y, g.color[i].z, g.opacity[i]])
                .collect();
            (loss, grad)
        };
        let r = check_gradient(f, &pack, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn logl1_examples() {
        let m = Mask::new(1, 1, true);
        assert_eq!(loss_depth_logl1(&raster(1, 1, &[2.0]), &raster(1, 1, &[2.0]), &m).unwrap(), 0.0);
        let v = loss_depth_logl1(&raster(1, 1, &[2.0]), &raster(1, 1, &[1.0]), &m).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let none = Mask::new(1, 1, false);
        assert_eq!(loss_depth_logl1(&raster(1, 1, &[2.0]), &raster(1, 1, &[1.0]), &none).unwrap(), 0.0);
        assert!(loss_depth_logl1(&raster(1, 1, &[2.0]), &raster(2, 1, &[1.0, 1.0]), &m).is_err());
    }

    #[test]
    fn logl1_ignores_excluded_pixels() {
        let mut mask = Mask::new(3, 1, true);
        mask.set(1, 0, false);
        let target = raster(3, 1, &[1.0, 1.0, 1.0]);
        let a = loss_depth_logl1(&raster(3, 1, &[1.5, 7.0, 2.0]), &target, &mask).unwrap();
        let b = loss_depth_logl1(&raster(3, 1, &[1.5, 0.1, 2.0]), &target, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(loss_tv(&raster(3, 2, &[4.0; 6])), 0.0);
        assert_eq!(loss_tv(&raster(2, 1, &[1.0, 3.0])), 2.0);
        let ramp: Vec<f64> = (0..100).map(|i| 1.0 + 0.1 * (i % 10) as f64).collect();
        // 90 horizontal steps of 0.1 over the 99 pixels with a forward neighbour
        let v = loss_tv(&raster(10, 10, &ramp));
        assert!((v - 9.0 / 99.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn tv_skips_invalid_neighbours() {
        let mut r = raster(3, 1, &[1.0, 5.0, 2.0]);
        r.invalidate(1, 0);
        assert_eq!(loss_tv(&r), 0.0);
    }

    #[test]
    fn depth_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (6, 5);
        let vals: Vec<f64> = (0..w * h).map(|_| rng.random_range(1.0..3.0)).collect();
        let target = raster(w, h, &(0..w * h).map(|_| rng.random_range(1.0..3.0)).collect::<Vec<_>>());
        let mut mask = Mask::new(w, h, true);
        mask.set(2, 2, false);
        let f = |p: &[f64]| loss_depth_logl1_grad(&raster(w, h, p), &target, &mask).unwrap();
        assert!(check_gradient(f, &vals, 1e-6).unwrap().max_rel_error < 1e-6);
        let g = |p: &[f64]| loss_tv_grad(&raster(w, h, p));
        assert!(check_gradient(g, &vals, 1e-6).unwrap().max_rel_error < 1e-6);
    }

    #[test]
    fn stage_loss_perfect_fit_is_tv_only() {
        let cam = camera(20, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let splats = random_splats(&mut rng, 30);
        let f = render(&splats, &cam);
        let mask = Mask::new(20, 16, true);
        let w = StageLossWeights::default();
        let l = loss_stage(&f, &f.color, &f.depth, &mask, &w).unwrap();
        assert_eq!(l.color, 0.0);
        assert!(l.dssim.abs() < 1e-12);
        assert_eq!(l.depth, 0.0);
        assert!((l.total - 0.5 * loss_tv(&f.depth)).abs() < 1e-12);
        assert!(loss_stage(&f, &f.color, &f.depth, &Mask::new(20, 16, false), &w).is_err());
    }

    #[test]
    fn stage_loss_terms_recompute() {
        let cam = camera(20, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let splats = random_splats(&mut rng, 30);
        let f = render(&splats, &cam);
        let mut image = f.color.clone();
        for c in &mut image.pixels {
            *c = c.map(|v| (v + 0.1).min(1.0));
        }
        let aligned = f.depth.affine(1.0, 0.3);
        let mut mask = Mask::new(20, 16, true);
        for x in 0..6 {
            mask.set(x, 3, false);
        }
        let w = StageLossWeights::default();
        let l = loss_stage(&f, &image, &aligned, &mask, &w).unwrap();
        // scalar recomputation of each term
        let mut l1 = 0.0;
        let mut n = 0.0;
        let mut dsum = 0.0;
        let mut dn = 0.0;
        for i in 0..320 {
            if mask.values[i] {
                l1 += (f.color.pixels[i] - image.pixels[i]).abs().sum();
                n += 3.0;
                if let (Some(a), Some(b)) = (f.depth.get_index(i), aligned.get_index(i)) {
                    dsum += (1.0 + (a - b).abs()).ln();
                    dn += 1.0;
                }
            }
        }
        assert!((l.color - l1 / n).abs() < 1e-12);
        assert!((l.depth - dsum / dn).abs() < 1e-12);
        let expected = 0.8 * l.color + 0.2 * l.dssim + 0.2 * l.depth + 0.5 * l.tv;
        assert!((l.total - expected).abs() < 1e-12);
        assert!(l.dssim > 0.0);
    }

    #[test]
    fn dssim_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let (w, h) = (7, 6);
        let img = |rng: &mut ChaCha8Rng| ColorImage {
            width: w,
            height: h,
            pixels: (0..w * h).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect(),
        };
        let a = img(&mut rng);
        let b = img(&mut rng);
        let mut mask = Mask::new(w, h, true);
        mask.set(0, 0, false);
        let flat: Vec<f64> = a.pixels.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
        let f = |p: &[f64]| {
            let im = ColorImage {
                width: w,
                height: h,
                pixels: p.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
            };
            let (v, g) = masked_dssim_grad(&im, &b, &mask).unwrap();
            (v, g.iter().flat_map(|c| [c.x, c.y, c.z]).collect())
        };
        assert!(check_gradient(f, &flat, 1e-6).unwrap().max_rel_error < 1e-6);
    }
}
