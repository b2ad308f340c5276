//! Residual appearance network: encoded splat position and clip time map to
//! bounded color and opacity offsets for actor splats.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::compositor::{render_color_backward, render_with, RenderOptions};
use crate::error::{Error, Result};
use crate::masking::masked_actor_loss_grad;
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::raster::{ColorImage, Mask};
use crate::splat::{Splat, SplatSet};

pub const TRUNK_DEPTH: usize = 8;
pub const TRUNK_WIDTH: usize = 256;
/// The input is concatenated to the output of this many trunk layers.
pub const SKIP_AFTER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub l_pos: usize,
    pub l_time: usize,
}

impl Default for EncodingSpec {
    fn default() -> Self {
        Self { l_pos: 10, l_time: 6 }
    }
}

impl EncodingSpec {
    pub fn input_dim(&self) -> usize {
        3 * 2 * self.l_pos + 2 * self.l_time
    }

    /// `(sin 2^0 πx, cos 2^0 πx, ..., sin 2^(L-1) πx, cos 2^(L-1) πx)` for
    /// each coordinate of `mu`, then for `t`.
    pub fn encode(&self, mu: &Vector3<f64>, t: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.input_dim());
        for x in mu.iter() {
            gamma(*x, self.l_pos, &mut out);
        }
        gamma(t, self.l_time, &mut out);
        out
    }
}

fn gamma(x: f64, bands: usize, out: &mut Vec<f64>) {
    let mut freq = std::f64::consts::PI;
    for _ in 0..bands {
        out.push((freq * x).sin());
        out.push((freq * x).cos());
        freq *= 2.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `out × in`
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: DMatrix::zeros(outputs, inputs),
            b: DVector::zeros(outputs),
        }
    }

    fn he_uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        Self {
            w: DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-bound..bound)),
            b: DVector::zeros(outputs),
        }
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * x;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }

    /// Row-major weights, then bias.
    fn push_params(&self, out: &mut Vec<f64>) {
        for r in 0..self.w.nrows() {
            out.extend(self.w.row(r).iter());
        }
        out.extend(self.b.iter());
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let (rows, cols) = self.w.shape();
        for r in 0..rows {
            for c in 0..cols {
                self.w[(r, c)] = src[r * cols + c];
            }
        }
        let nb = self.b.len();
        self.b.copy_from_slice(&src[rows * cols..rows * cols + nb]);
        rows * cols + nb
    }
}

/// Layer shape record for the weight sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSidecar {
    pub format: String,
    pub encoding: EncodingSpec,
    pub skip_after: usize,
    /// Blob order: each layer's row-major weights then its bias.
    pub layers: Vec<LayerShape>,
    pub num_params: usize,
}

const BLOB_FORMAT: &str = "f32-le";

#[derive(Debug, Clone, PartialEq)]
pub struct FittingNetwork {
    encoding: EncodingSpec,
    trunk: Vec<Dense>,
    color: Dense,
    opacity: Dense,
}

struct Cache {
    /// Input to each trunk layer.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each trunk layer.
    pre: Vec<DMatrix<f64>>,
    features: DMatrix<f64>,
    color: DMatrix<f64>,
    opacity: DMatrix<f64>,
}

impl FittingNetwork {
    /// He-initialized trunk and zero heads, so the initial residuals vanish.
    pub fn new(encoding: EncodingSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = encoding.input_dim();
        let trunk = (0..TRUNK_DEPTH)
            .map(|l| {
                let inputs = match l {
                    0 => d,
                    SKIP_AFTER => TRUNK_WIDTH + d,
                    _ => TRUNK_WIDTH,
                };
                Dense::he_uniform(inputs, TRUNK_WIDTH, &mut rng)
            })
            .collect();
        Self {
            encoding,
            trunk,
            color: Dense::zeros(TRUNK_WIDTH, 3),
            opacity: Dense::zeros(TRUNK_WIDTH, 1),
        }
    }

    pub fn encoding(&self) -> EncodingSpec {
        self.encoding
    }

    pub fn input_dim(&self) -> usize {
        self.encoding.input_dim()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.color, &self.opacity])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain([&mut self.color, &mut self.opacity])
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Dense::len).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            l.push_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                params: self.num_params(),
                grads: params.len(),
            });
        }
        let mut at = 0;
        for l in self.layers_mut() {
            at += l.read_params(&params[at..]);
        }
        Ok(())
    }

    fn forward_cached(&self, x: &DMatrix<f64>) -> Cache {
        let mut inputs = Vec::with_capacity(TRUNK_DEPTH);
        let mut pre = Vec::with_capacity(TRUNK_DEPTH);
        let mut h = x.clone();
        for (l, layer) in self.trunk.iter().enumerate() {
            let input = if l == SKIP_AFTER {
                let mut cat = DMatrix::zeros(h.nrows() + x.nrows(), x.ncols());
                cat.rows_mut(0, h.nrows()).copy_from(&h);
                cat.rows_mut(h.nrows(), x.nrows()).copy_from(x);
                cat
            } else {
                h
            };
            let z = layer.apply(&input);
            h = z.map(|v| v.max(0.0));
            inputs.push(input);
            pre.push(z);
        }
        let color = self.color.apply(&h).map(f64::tanh);
        let opacity = self.opacity.apply(&h).map(f64::tanh);
        Cache {
            inputs,
            pre,
            features: h,
            color,
            opacity,
        }
    }

    /// Encoded inputs as columns.
    fn batch(&self, mus: &[Vector3<f64>], t: f64) -> DMatrix<f64> {
        let d = self.input_dim();
        let mut x = DMatrix::zeros(d, mus.len());
        for (k, mu) in mus.iter().enumerate() {
            x.column_mut(k).copy_from_slice(&self.encoding.encode(mu, t));
        }
        x
    }

    /// Residuals for normalized positions `mus` at normalized time `t`.
    pub fn residuals_batch(&self, mus: &[Vector3<f64>], t: f64) -> Vec<(Vector3<f64>, f64)> {
        if mus.is_empty() {
            return Vec::new();
        }
        let c = self.forward_cached(&self.batch(mus, t));
        (0..mus.len())
            .map(|k| {
                (
                    Vector3::new(c.color[(0, k)], c.color[(1, k)], c.color[(2, k)]),
                    c.opacity[(0, k)],
                )
            })
            .collect()
    }

    pub fn residuals(&self, mu: &Vector3<f64>, t: f64) -> (Vector3<f64>, f64) {
        self.residuals_batch(std::slice::from_ref(mu), t)[0]
    }

    /// Parameter gradient given output gradients (`3 × B` color, `1 × B`
    /// opacity, with respect to the post-tanh heads).
    fn backward(&self, cache: &Cache, d_color: &DMatrix<f64>, d_opacity: &DMatrix<f64>) -> Vec<f64> {
        let dz_c = d_color.zip_map(&cache.color, |g, y| g * (1.0 - y * y));
        let dz_o = d_opacity.zip_map(&cache.opacity, |g, y| g * (1.0 - y * y));
        let grad_c = dense_grad(&dz_c, &cache.features);
        let grad_o = dense_grad(&dz_o, &cache.features);
        let mut dh = self.color.w.transpose() * &dz_c + self.opacity.w.transpose() * &dz_o;
        let mut trunk_grads = vec![Dense::zeros(0, 0); TRUNK_DEPTH];
        for l in (0..TRUNK_DEPTH).rev() {
            let dz = dh.zip_map(&cache.pre[l], |g, z| if z > 0.0 { g } else { 0.0 });
            trunk_grads[l] = dense_grad(&dz, &cache.inputs[l]);
            if l == 0 {
                break;
            }
            let din = self.trunk[l].w.transpose() * &dz;
            dh = if l == SKIP_AFTER {
                din.rows(0, TRUNK_WIDTH).into_owned()
            } else {
                din
            };
        }
        let mut out = Vec::with_capacity(self.num_params());
        for g in trunk_grads.iter().chain([&grad_c, &grad_o]) {
            g.push_params(&mut out);
        }
        out
    }

    pub fn sidecar(&self) -> WeightSidecar {
        let mut layers: Vec<LayerShape> = self
            .trunk
            .iter()
            .enumerate()
            .map(|(l, d)| LayerShape {
                name: format!("trunk{l}"),
                inputs: d.w.ncols(),
                outputs: d.w.nrows(),
                activation: "relu".into(),
            })
            .collect();
        for (name, d) in [("color", &self.color), ("opacity", &self.opacity)] {
            layers.push(LayerShape {
                name: name.into(),
                inputs: d.w.ncols(),
                outputs: d.w.nrows(),
                activation: "tanh".into(),
            });
        }
        WeightSidecar {
            format: BLOB_FORMAT.into(),
            encoding: self.encoding,
            skip_after: SKIP_AFTER,
            layers,
            num_params: self.num_params(),
        }
    }

    /// Weights as 32-bit little-endian floats.
    pub fn to_blob(&self) -> Vec<u8> {
        self.params().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
    }

    pub fn from_blob(sidecar: &WeightSidecar, blob: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Refine(m);
        if sidecar.format != BLOB_FORMAT {
            return Err(bad(format!("unknown weight format {:?}", sidecar.format)));
        }
        let mut net = Self::new(sidecar.encoding, 0);
        if sidecar.skip_after != SKIP_AFTER || sidecar != &net.sidecar() {
            return Err(bad("layer shapes do not match the network architecture".into()));
        }
        if blob.len() != 4 * net.num_params() {
            return Err(bad(format!("blob has {} bytes, expected {}", blob.len(), 4 * net.num_params())));
        }
        let params: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        net.set_params(&params)?;
        Ok(net)
    }

    pub fn save(&self, blob_path: &Path, sidecar_path: &Path) -> Result<()> {
        std::fs::write(blob_path, self.to_blob()).map_err(|e| Error::io(blob_path, e))?;
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn load(blob_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let sidecar: WeightSidecar = serde_json::from_str(&json)?;
        let blob = std::fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
        Self::from_blob(&sidecar, &blob)
    }
}

fn dense_grad(dz: &DMatrix<f64>, input: &DMatrix<f64>) -> Dense {
    Dense {
        w: dz * input.transpose(),
        b: dz.column_sum(),
    }
}

/// Splat centers mapped affinely so the set's bounding box becomes
/// `[-1, 1]^3`. Flat axes map to 0.
pub fn normalized_centers(set: &SplatSet) -> Vec<Vector3<f64>> {
    let Some(first) = set.splats.first() else {
        return Vec::new();
    };
    let (mut lo, mut hi) = (first.center, first.center);
    for s in &set.splats {
        lo = lo.inf(&s.center);
        hi = hi.sup(&s.center);
    }
    let mid = (lo + hi) / 2.0;
    let half = (hi - lo) / 2.0;
    set.splats
        .iter()
        .map(|s| {
            Vector3::from_fn(|i, _| {
                if half[i] > 1e-12 {
                    (s.center[i] - mid[i]) / half[i]
                } else {
                    0.0
                }
            })
        })
        .collect()
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Refine(format!("time {t} outside [0, 1]")))
    }
}

/// Adds clamped residuals to color and opacity; geometry is copied as is.
pub fn apply_residuals(actors: &[SplatSet], net: &FittingNetwork, t: f64) -> Result<Vec<SplatSet>> {
    check_time(t)?;
    Ok(actors
        .iter()
        .map(|set| {
            let res = net.residuals_batch(&normalized_centers(set), t);
            let splats = set
                .splats
                .iter()
                .zip(res)
                .map(|(s, (dc, do_))| Splat {
                    color: (s.color + dc).map(|c| c.clamp(0.0, 1.0)),
                    opacity: (s.opacity + do_).clamp(0.0, 1.0),
                    ..s.clone()
                })
                .collect();
            SplatSet::new(set.tag, splats)
        })
        .collect())
}

/// One supervision frame: actor splats positioned for this frame, the
/// target image and the foreground mask.
#[derive(Debug, Clone, Copy)]
pub struct RefineFrame<'a> {
    /// Frame time normalized to `[0, 1]` over the clip.
    pub time: f64,
    pub camera: &'a CameraModel,
    pub actors: &'a [SplatSet],
    pub target: &'a ColorImage,
    pub mask: &'a Mask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub iters: usize,
    pub lr: f64,
    pub lr_final_fraction: f64,
    pub seed: u64,
    pub encoding: EncodingSpec,
    pub render: RenderOptions,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            lr: 5e-4,
            lr_final_fraction: 0.1,
            seed: 0,
            encoding: EncodingSpec::default(),
            render: RenderOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    /// Loss of the frame used at each step.
    pub history: Vec<f64>,
}

/// Masked actor loss of the refined actors rendered alone.
pub fn refinement_loss(net: &FittingNetwork, frame: &RefineFrame<'_>, opts: &RenderOptions) -> Result<f64> {
    let refined: Vec<Splat> = apply_residuals(frame.actors, net, frame.time)?
        .into_iter()
        .flat_map(|s| s.splats)
        .collect();
    let render = render_with(&refined, frame.camera, opts);
    crate::masking::masked_actor_loss(&render.color, frame.target, frame.mask)
}

/// [`refinement_loss`] and its gradient with respect to the network
/// parameters.
pub fn refinement_loss_grad(net: &FittingNetwork, frame: &RefineFrame<'_>, opts: &RenderOptions) -> Result<(f64, Vec<f64>)> {
    check_time(frame.time)?;
    let mus: Vec<Vector3<f64>> = frame.actors.iter().flat_map(normalized_centers).collect();
    let base: Vec<&Splat> = frame.actors.iter().flat_map(|s| &s.splats).collect();
    if mus.is_empty() {
        return Ok((0.0, vec![0.0; net.num_params()]));
    }
    let cache = net.forward_cached(&net.batch(&mus, frame.time));
    let mut refined = Vec::with_capacity(base.len());
    for (k, s) in base.iter().enumerate() {
        let dc = Vector3::new(cache.color[(0, k)], cache.color[(1, k)], cache.color[(2, k)]);
        refined.push(Splat {
            color: (s.color + dc).map(|c| c.clamp(0.0, 1.0)),
            opacity: (s.opacity + cache.opacity[(0, k)]).clamp(0.0, 1.0),
            ..(*s).clone()
        });
    }
    let render = render_with(&refined, frame.camera, opts);
    let (loss, pixel_grad) = masked_actor_loss_grad(&render.color, frame.target, frame.mask)?;
    let g = render_color_backward(&refined, frame.camera, opts, &pixel_grad);
    let n = base.len();
    let mut d_color = DMatrix::zeros(3, n);
    let mut d_opacity = DMatrix::zeros(1, n);
    for (k, s) in base.iter().enumerate() {
        for c in 0..3 {
            let v = s.color[c] + cache.color[(c, k)];
            if v > 0.0 && v < 1.0 {
                d_color[(c, k)] = g.color[k][c];
            }
        }
        let o = s.opacity + cache.opacity[(0, k)];
        if o > 0.0 && o < 1.0 {
            d_opacity[(0, k)] = g.opacity[k];
        }
    }
    Ok((loss, net.backward(&cache, &d_color, &d_opacity)))
}

/// Trains a fresh network with Adam, one frame per step in a seeded
/// shuffled order. Base splat attributes stay fixed.
pub fn train_refinement(frames: &[RefineFrame<'_>], cfg: &RefineConfig) -> Result<(FittingNetwork, RefineReport)> {
    let mut times: Vec<f64> = frames.iter().map(|f| f.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    if times.len() < 2 {
        return Err(Error::Refine("frames must span at least two distinct times".into()));
    }
    for f in frames {
        check_time(f.time)?;
    }
    let mut net = FittingNetwork::new(cfg.encoding, cfg.seed);
    let mut params = net.params();
    let mut adam = Adam::new(params.len(), AdamConfig::default());
    let sched = LrSchedule::decaying(cfg.lr, cfg.lr_final_fraction, cfg.iters.max(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        if order.is_empty() {
            order = (0..frames.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        let f = order.pop().expect("refilled");
        let (loss, grad) = refinement_loss_grad(&net, &frames[f], &cfg.render)?;
        history.push(loss);
        adam.step(&mut params, &grad, sched.lr(it))?;
        net.set_params(&params)?;
    }
    Ok((net, RefineReport { history }))
}
