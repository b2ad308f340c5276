//! On-disk scene bundle: a versioned JSON manifest next to binary rasters.
//!
//! ```text
//! bundle/
//!   manifest.json
//!   frames/00000/image.ppm
//!   frames/00000/mono.dpt
//!   frames/00000/mask_0.pgm
//!   masks/00000.pgm          after `mask`
//!   refine/weights.bin       after `refine`
//!   refine/weights.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use nalgebra::Vector3;
use scenepos::depthalign::AffineDepthFit;
use scenepos::pipeline::{FrameRecord, GroundTruth, Observation, RunSolution, SceneData, ShotRecord};
use scenepos::positioning::{KeypointObservation, PositioningConfig};
use scenepos::refine::FittingNetwork;
use scenepos::tracking::{ActorTrack, BoundaryReport};
use scenepos::{BodyModel, CameraModel, ColorImage, DepthRaster, Mask, PoseParams, SplatSet};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEntry {
    pub track: u32,
    pub mask: String,
    pub keypoints: KeypointObservation,
    pub pose_init: PoseParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub shot: usize,
    pub camera: CameraModel,
    pub image: String,
    pub mono_depth: String,
    pub observations: Vec<ObservationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSection {
    pub delta1: f64,
    pub fits: Vec<Option<AffineDepthFit>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositioningSection {
    pub config: PositioningConfig,
    pub runs: Vec<RunSolution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSection {
    pub lambda: f64,
    pub horizon: usize,
    pub tracks: Vec<ActorTrack>,
    pub reports: Vec<BoundaryReport>,
    /// `(shot, local track)` pieces behind each linked track.
    pub origins: Vec<Vec<(usize, u32)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSection {
    pub stride: usize,
    pub masks: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineSettings {
    pub iters: usize,
    pub lr: f64,
    pub lr_final_fraction: f64,
    pub seed: u64,
    pub stride: usize,
    pub l_pos: usize,
    pub l_time: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSection {
    pub settings: RefineSettings,
    pub weights: String,
    pub sidecar: String,
    pub history: Vec<f64>,
}

/// Everything in `manifest.json`. Sections after `frames` are filled by the
/// pipeline commands in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub body: BodyModel,
    pub stage: SplatSet,
    pub stage_points: Vec<Vec<Vector3<f64>>>,
    pub shots: Vec<ShotRecord>,
    pub frames: Vec<FrameEntry>,
    pub truth: Option<GroundTruth>,
    pub depth: Option<DepthSection>,
    pub positioning: Option<PositioningSection>,
    pub tracking: Option<TrackingSection>,
    pub masks: Option<MaskSection>,
    pub refinement: Option<RefineSection>,
    pub evaluation: Option<BTreeMap<String, f64>>,
    /// Settings each command last ran with, keyed by command name.
    pub config: BTreeMap<String, serde_json::Value>,
}

/// A loaded bundle: the manifest plus the rasters and weights it names.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: Manifest,
    pub data: SceneData,
    pub foreground: Option<Vec<Mask>>,
    pub network: Option<FittingNetwork>,
}

fn frame_dir(i: usize) -> String {
    format!("frames/{i:05}")
}

pub fn foreground_path(i: usize) -> String {
    format!("masks/{i:05}.pgm")
}

pub const WEIGHTS_PATH: &str = "refine/weights.bin";
pub const SIDECAR_PATH: &str = "refine/weights.json";

/// Rejects manifest paths that could leave the bundle directory.
fn resolve(root: &Path, rel: &str) -> CliResult<PathBuf> {
    let p = Path::new(rel);
    if rel.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(CliError::Bundle(format!("path {rel:?} escapes the bundle")));
    }
    Ok(root.join(p))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

impl Bundle {
    /// Builds a bundle around scene data. Rasters are quantized to their
    /// file precision so the in-memory copy equals what a reload sees.
    pub fn from_scene(mut data: SceneData, truth: Option<GroundTruth>) -> Self {
        for f in &mut data.frames {
            f.image = f.image.quantized();
            f.mono_depth = f.mono_depth.quantized();
        }
        let frames = data
            .frames
            .iter()
            .map(|f| {
                let dir = frame_dir(f.index);
                FrameEntry {
                    index: f.index,
                    shot: f.shot,
                    camera: f.camera.clone(),
                    image: format!("{dir}/image.ppm"),
                    mono_depth: format!("{dir}/mono.dpt"),
                    observations: f
                        .observations
                        .iter()
                        .map(|o| ObservationEntry {
                            track: o.track,
                            mask: format!("{dir}/mask_{}.pgm", o.track),
                            keypoints: o.keypoints.clone(),
                            pose_init: o.pose_init.clone(),
                        })
                        .collect(),
                }
            })
            .collect();
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            body: data.body.clone(),
            stage: data.stage.clone(),
            stage_points: data.stage_points.clone(),
            shots: data.shots.clone(),
            frames,
            truth,
            depth: None,
            positioning: None,
            tracking: None,
            masks: None,
            refinement: None,
            evaluation: None,
            config: BTreeMap::new(),
        };
        Self {
            manifest,
            data,
            foreground: None,
            network: None,
        }
    }

    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join(MANIFEST_FILE)
    }

    pub fn exists(root: &Path) -> bool {
        Self::manifest_path(root).is_file()
    }

    pub fn load(root: &Path) -> CliResult<Self> {
        let path = Self::manifest_path(root);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let probe: serde_json::Value = serde_json::from_str(&text)?;
        let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MANIFEST_VERSION {
            return Err(scenepos::Error::BundleVersion {
                found,
                expected: MANIFEST_VERSION,
            }
            .into());
        }
        let manifest: Manifest = serde_json::from_value(probe)?;
        let frames = manifest
            .frames
            .iter()
            .map(|e| {
                let image = ColorImage::from_ppm_bytes(&read_file(&resolve(root, &e.image)?)?)?;
                let mono_depth = DepthRaster::from_dpt1_bytes(&read_file(&resolve(root, &e.mono_depth)?)?)?;
                let observations = e
                    .observations
                    .iter()
                    .map(|o| {
                        Ok(Observation {
                            track: o.track,
                            mask: Mask::from_pgm_bytes(&read_file(&resolve(root, &o.mask)?)?)?,
                            keypoints: o.keypoints.clone(),
                            pose_init: o.pose_init.clone(),
                        })
                    })
                    .collect::<CliResult<_>>()?;
                Ok(FrameRecord {
                    index: e.index,
                    shot: e.shot,
                    camera: e.camera.clone(),
                    image,
                    mono_depth,
                    observations,
                })
            })
            .collect::<CliResult<_>>()?;
        let data = SceneData {
            body: manifest.body.clone(),
            stage: manifest.stage.clone(),
            stage_points: manifest.stage_points.clone(),
            shots: manifest.shots.clone(),
            frames,
        };
        data.validate()?;
        let foreground = manifest
            .masks
            .as_ref()
            .map(|m| {
                m.masks
                    .iter()
                    .map(|p| Ok(Mask::from_pgm_bytes(&read_file(&resolve(root, p)?)?)?))
                    .collect::<CliResult<Vec<_>>>()
            })
            .transpose()?;
        let network = manifest
            .refinement
            .as_ref()
            .map(|r| -> CliResult<FittingNetwork> {
                let sidecar = serde_json::from_slice(&read_file(&resolve(root, &r.sidecar)?)?)?;
                Ok(FittingNetwork::from_blob(&sidecar, &read_file(&resolve(root, &r.weights)?)?)?)
            })
            .transpose()?;
        let bundle = Self {
            manifest,
            data,
            foreground,
            network,
        };
        bundle.check_sections()?;
        Ok(bundle)
    }

    fn check_sections(&self) -> CliResult<()> {
        let nf = self.data.num_frames();
        let bad = |m: &str| Err(CliError::Bundle(m.into()));
        if self.manifest.depth.as_ref().is_some_and(|d| d.fits.len() != nf) {
            return bad("depth fits do not cover every frame");
        }
        if self.manifest.tracking.as_ref().is_some_and(|t| t.tracks.iter().any(|a| a.num_frames() != nf)) {
            return bad("track length differs from the frame count");
        }
        if let Some(fg) = &self.foreground {
            if fg.len() != nf || fg.iter().zip(&self.data.frames).any(|(m, f)| m.dims() != f.image.dims()) {
                return bad("foreground masks do not match the frames");
            }
        }
        if let Some(t) = &self.manifest.truth {
            if t.depth_affine.len() != nf || t.identities.len() != self.data.shots.len() {
                return bad("ground truth does not match the scene");
            }
        }
        Ok(())
    }

    /// Writes every raster and the manifest. Directories of cleared
    /// sections are removed.
    pub fn save(&self, root: &Path) -> CliResult<()> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        for (e, f) in self.manifest.frames.iter().zip(&self.data.frames) {
            write_file(&resolve(root, &e.image)?, &f.image.to_ppm_bytes())?;
            write_file(&resolve(root, &e.mono_depth)?, &f.mono_depth.to_dpt1_bytes())?;
            for (oe, o) in e.observations.iter().zip(&f.observations) {
                write_file(&resolve(root, &oe.mask)?, &o.mask.to_pgm_bytes())?;
            }
        }
        match (&self.manifest.masks, &self.foreground) {
            (Some(sec), Some(fg)) => {
                for (p, m) in sec.masks.iter().zip(fg) {
                    write_file(&resolve(root, p)?, &m.to_pgm_bytes())?;
                }
            }
            _ => remove_dir(&root.join("masks"))?,
        }
        match (&self.manifest.refinement, &self.network) {
            (Some(sec), Some(net)) => {
                write_file(&resolve(root, &sec.weights)?, &net.to_blob())?;
                let mut side = serde_json::to_string_pretty(&net.sidecar())?;
                side.push('\n');
                write_file(&resolve(root, &sec.sidecar)?, side.as_bytes())?;
            }
            _ => remove_dir(&root.join("refine"))?,
        }
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_file(&Self::manifest_path(root), text.as_bytes())
    }

    pub fn set_foreground(&mut self, stride: usize, masks: Vec<Mask>) {
        self.manifest.masks = Some(MaskSection {
            stride,
            masks: (0..masks.len()).map(foreground_path).collect(),
        });
        self.foreground = Some(masks);
    }

    pub fn set_refinement(&mut self, settings: RefineSettings, net: FittingNetwork, history: Vec<f64>) {
        self.manifest.refinement = Some(RefineSection {
            settings,
            weights: WEIGHTS_PATH.into(),
            sidecar: SIDECAR_PATH.into(),
            history,
        });
        self.network = Some(net);
    }
}

fn remove_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}
