//! Structural similarity on single-channel images with a Gaussian window,
//! restricted to a pixel mask, with its gradient.
//!
//! Window sums use zero padding at the border, so the window operator is
//! self-adjoint and the backward pass reuses the forward blur.

/// Window and stabilizer constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    fn kernel(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Separable zero-padded correlation with a symmetric kernel.
fn blur(img: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - half;
                if xx >= 0 && (xx as usize) < width {
                    acc += w * img[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - half;
                if yy >= 0 && (yy as usize) < height {
                    acc += w * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

struct Moments {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], width: usize, height: usize, kernel: &[f64]) -> Moments {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = blur(x, width, height, kernel);
    let mu_y = blur(y, width, height, kernel);
    let exx = blur(&xx, width, height, kernel);
    let eyy = blur(&yy, width, height, kernel);
    let exy = blur(&xy, width, height, kernel);
    let n = x.len();
    Moments {
        var_x: (0..n).map(|i| exx[i] - mu_x[i] * mu_x[i]).collect(),
        var_y: (0..n).map(|i| eyy[i] - mu_y[i] * mu_y[i]).collect(),
        cov: (0..n).map(|i| exy[i] - mu_x[i] * mu_y[i]).collect(),
        mu_x,
        mu_y,
    }
}

fn masked(values: &[f64], mask: &[bool]) -> Vec<f64> {
    values.iter().zip(mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect()
}

/// Mean SSIM over the masked pixels, computed on images whose unmasked
/// pixels are zeroed. `None` when the mask is empty.
pub fn ssim_masked(x: &[f64], y: &[f64], width: usize, height: usize, mask: &[bool], p: &SsimParams) -> Option<f64> {
    ssim_masked_grad(x, y, width, height, mask, p).map(|(v, _)| v)
}

/// Like [`ssim_masked`], also returning the gradient with respect to `x`.
pub fn ssim_masked_grad(
    x: &[f64],
    y: &[f64],
    width: usize,
    height: usize,
    mask: &[bool],
    p: &SsimParams,
) -> Option<(f64, Vec<f64>)> {
    assert_eq!(x.len(), width * height);
    assert_eq!(y.len(), width * height);
    assert_eq!(mask.len(), width * height);
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return None;
    }
    let kernel = p.kernel();
    let xm = masked(x, mask);
    let ym = masked(y, mask);
    let m = moments(&xm, &ym, width, height, &kernel);
    let (c1, c2) = (p.c1(), p.c2());
    let n = x.len();
    let mut total = 0.0;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut c = vec![0.0; n];
    let inv = 1.0 / count as f64;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let (mx, my) = (m.mu_x[i], m.mu_y[i]);
        let n1 = 2.0 * mx * my + c1;
        let n2 = 2.0 * m.cov[i] + c2;
        let d1 = mx * mx + my * my + c1;
        let d2 = m.var_x[i] + m.var_y[i] + c2;
        let s = n1 * n2 / (d1 * d2);
        total += s;
        let ds_dmu = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1;
        let ds_dvar = -s / d2;
        let ds_dcov = 2.0 * n1 / (d1 * d2);
        a[i] = inv * (ds_dmu - 2.0 * mx * ds_dvar - my * ds_dcov);
        b[i] = inv * ds_dvar;
        c[i] = inv * ds_dcov;
    }
    let ga = blur(&a, width, height, &kernel);
    let gb = blur(&b, width, height, &kernel);
    let gc = blur(&c, width, height, &kernel);
    let grad = (0..n)
        .map(|i| {
            if mask[i] {
                ga[i] + 2.0 * xm[i] * gb[i] + ym[i] * gc[i]
            } else {
                0.0
            }
        })
        .collect();
    Some((total * inv, grad))
}
