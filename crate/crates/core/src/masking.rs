//! Depth-tested foreground masks and the masked photometric actor loss.

use log::warn;
use nalgebra::Vector3;

use crate::compositor::{masked_dssim_grad, masked_l1_grad};
use crate::error::{Error, Result};
use crate::raster::{ColorImage, DepthRaster, Mask};

pub const ACTOR_DSSIM_WEIGHT: f64 = 0.2;

/// A pixel is foreground when the nearest valid actor depth is strictly in
/// front of the stage, or when an actor covers a pixel with no stage depth.
/// Actor rasters are invalid wherever their accumulated alpha is too small.
pub fn foreground_mask(stage: &DepthRaster, actors: &[&DepthRaster]) -> Result<Mask> {
    let (w, h) = stage.dims();
    for a in actors {
        if a.dims() != (w, h) {
            return Err(Error::SizeMismatch {
                expected: (w, h),
                got: a.dims(),
            });
        }
    }
    let mut mask = Mask::new(w, h, false);
    for i in 0..w * h {
        let nearest = actors
            .iter()
            .filter_map(|a| a.get_index(i))
            .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))));
        if let Some(d) = nearest {
            mask.values[i] = stage.get_index(i).is_none_or(|s| d < s);
        }
    }
    Ok(mask)
}

fn check(render: &ColorImage, target: &ColorImage, mask: &Mask) -> Result<()> {
    for got in [target.dims(), mask.dims()] {
        if got != render.dims() {
            return Err(Error::SizeMismatch {
                expected: render.dims(),
                got,
            });
        }
    }
    Ok(())
}

/// `(1 - w) * L1 + w * D-SSIM` over the masked pixels of both images, with
/// `w` = [`ACTOR_DSSIM_WEIGHT`].
pub fn masked_actor_loss(render: &ColorImage, target: &ColorImage, mask: &Mask) -> Result<f64> {
    masked_actor_loss_grad(render, target, mask).map(|(v, _)| v)
}

/// [`masked_actor_loss`] and its gradient with respect to `render`. An empty
/// mask gives zero loss and gradient.
pub fn masked_actor_loss_grad(render: &ColorImage, target: &ColorImage, mask: &Mask) -> Result<(f64, Vec<Vector3<f64>>)> {
    check(render, target, mask)?;
    let (Some((l1, g1)), Some((ds, gs))) = (
        masked_l1_grad(render, target, mask),
        masked_dssim_grad(render, target, mask),
    ) else {
        warn!("masked actor loss on an empty mask");
        return Ok((0.0, vec![Vector3::zeros(); render.pixels.len()]));
    };
    let w = ACTOR_DSSIM_WEIGHT;
    let grad = g1.iter().zip(&gs).map(|(a, b)| a * (1.0 - w) + b * w).collect();
    Ok(((1.0 - w) * l1 + w * ds, grad))
}
