//! Compositional scene positioning.
//!
//! Places articulated actors on a splat-reconstructed stage from monocular
//! cues: affine depth alignment, front-to-back splat compositing, a
//! multi-loss positioning optimizer, cross-shot actor association,
//! depth-tested foreground masks and a residual appearance network. A
//! synthetic scene generator supplies ground truth for all of it.

pub mod body;
pub mod camera;
pub mod compositor;
pub mod depthalign;
pub mod error;
pub mod masking;
pub mod optim;
pub mod pipeline;
pub mod positioning;
pub mod raster;
pub mod refine;
pub mod rotation;
pub mod splat;
pub mod ssim;
pub mod synth;
pub mod tracking;

pub use body::{BodyModel, PoseParams, StagePlacement};
pub use camera::{CameraModel, Projection};
pub use compositor::{render, RenderOptions, RenderedFrame, StageLossWeights};
pub use error::{Error, Result};
pub use raster::{ColorImage, DepthRaster, Mask};
pub use splat::{compute_scene_radius, Composite, SceneRadius, Splat, SplatSet, SplatTag};
