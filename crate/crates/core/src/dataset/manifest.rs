//! Dataset manifest (TOML) and its validating loader.
//!
//! Top-level keys: `format`, `illuminant`, `kappa`, `map_gain`,
//! `fusion_weights`, `white_background`, then a `[partition]` table, an optional
//! `[scene]` table and one `[[views]]` entry per view. View keys: `name`,
//! `split`, `width`, `height`, `fx`, `fy`, `cx`, `cy`, `near`, `far`, `pose`
//! (16 numbers, row-major camera-to-world), `bands` (one path per band) and
//! `rgb`. Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::AnalyticScene;
use super::sfm::{sfm_read, sfm_read_header, sfm_write, SfmMap};
use crate::error::{Error, Result};
use crate::fusion::{linear_fuse, LinearFusionWeights};
use crate::image::{RgbImage, SpectrumMapStack};
use crate::render::{Camera, Mat4};
use crate::spectral_color::BandPartition;

pub const FORMAT: &str = "specfield-dataset-1";
pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub name: String,
    pub split: Split,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    pub pose: Vec<f64>,
    pub bands: Vec<String>,
    pub rgb: String,
}

impl ViewRecord {
    pub fn pose_matrix(&self) -> Result<Mat4> {
        if self.pose.len() != 16 {
            return Err(Error::Parse(format!(
                "view `{}`: pose needs 16 values, got {}",
                self.name,
                self.pose.len()
            )));
        }
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&self.pose[4 * r..4 * r + 4]);
        }
        Ok(m)
    }

    pub fn camera(&self) -> Result<Camera> {
        let cam = Camera {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            pose: self.pose_matrix()?,
            near: self.near,
            far: self.far,
        };
        cam.validate()?;
        let p = &cam.pose;
        let det = p[0][0] * (p[1][1] * p[2][2] - p[1][2] * p[2][1])
            - p[0][1] * (p[1][0] * p[2][2] - p[1][2] * p[2][0])
            + p[0][2] * (p[1][0] * p[2][1] - p[1][1] * p[2][0]);
        if !(det.abs() > 1e-9) || !det.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "view `{}`: pose is not invertible",
                self.name
            )));
        }
        Ok(cam)
    }

    pub fn from_camera(name: String, split: Split, cam: &Camera, bands: Vec<String>, rgb: String) -> Self {
        Self {
            name,
            split,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            near: cam.near,
            far: cam.far,
            pose: cam.pose.iter().flatten().copied().collect(),
            bands,
            rgb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub illuminant: String,
    /// Composite scale: `rgb = kappa * sum_k fusion_weights[k] * band_k`.
    pub kappa: f64,
    /// Factor folded into the stored band maps by the generator.
    pub map_gain: f64,
    pub fusion_weights: Vec<f64>,
    pub white_background: bool,
    pub partition: BandPartition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<AnalyticScene>,
    pub views: Vec<ViewRecord>,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn s_num(&self) -> usize {
        self.partition.s_num()
    }

    pub fn weights(&self) -> LinearFusionWeights {
        LinearFusionWeights::shared(&self.fusion_weights)
    }
}

/// Loaded manifest with validated views; maps are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    cameras: Vec<Camera>,
}

impl Dataset {
    /// Accepts the manifest path or the directory containing it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_NAME);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        let manifest = Manifest::parse(&text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::validate(root, manifest)
    }

    fn validate(root: PathBuf, manifest: Manifest) -> Result<Self> {
        if manifest.format != FORMAT {
            return Err(Error::Parse(format!("unknown dataset format `{}`", manifest.format)));
        }
        manifest.partition.validate()?;
        let k = manifest.s_num();
        if manifest.fusion_weights.len() != k {
            return Err(Error::BadPartition(format!(
                "{} fusion weights for {k} bands",
                manifest.fusion_weights.len()
            )));
        }
        if !(manifest.kappa.is_finite() && manifest.kappa > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa {} must be positive", manifest.kappa)));
        }
        let mut cameras = Vec::with_capacity(manifest.views.len());
        for v in &manifest.views {
            if v.bands.len() != k {
                return Err(Error::BadPartition(format!(
                    "view `{}` has {} band maps, partition has {k}",
                    v.name,
                    v.bands.len()
                )));
            }
            let cam = v.camera()?;
            for (i, rel) in v.bands.iter().chain(std::iter::once(&v.rgb)).enumerate() {
                let path = root.join(rel);
                let h = sfm_read_header(&path)?;
                if h.width as usize != v.width || h.height as usize != v.height || h.channels != 3 {
                    return Err(Error::DimMismatch {
                        path: path.display().to_string(),
                        detail: format!(
                            "{}x{}x{} stored, view is {}x{}x3",
                            h.width, h.height, h.channels, v.width, v.height
                        ),
                    });
                }
                if i < k && h.band_center_nm != manifest.partition.centers_nm[i] as f32 {
                    return Err(Error::BadPartition(format!(
                        "{}: band center {} nm, partition says {} nm",
                        path.display(),
                        h.band_center_nm,
                        manifest.partition.centers_nm[i]
                    )));
                }
            }
            cameras.push(cam);
        }
        Ok(Self {
            root,
            manifest,
            cameras,
        })
    }

    pub fn partition(&self) -> &BandPartition {
        &self.manifest.partition
    }

    pub fn kappa(&self) -> f64 {
        self.manifest.kappa
    }

    pub fn len(&self) -> usize {
        self.manifest.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.views.is_empty()
    }

    pub fn view(&self, i: usize) -> &ViewRecord {
        &self.manifest.views[i]
    }

    pub fn camera(&self, i: usize) -> &Camera {
        &self.cameras[i]
    }

    /// Indices of the views tagged `split`, in manifest order.
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.manifest.views[i].split == split)
            .collect()
    }

    pub fn load_stack(&self, i: usize) -> Result<SpectrumMapStack> {
        let v = &self.manifest.views[i];
        let mut stack = SpectrumMapStack::zeros(v.width, v.height, v.bands.len());
        for (k, rel) in v.bands.iter().enumerate() {
            let img = self.read_map(rel, v)?;
            stack.set_band(k, &img)?;
        }
        Ok(stack)
    }

    pub fn load_rgb(&self, i: usize) -> Result<RgbImage> {
        let v = &self.manifest.views[i];
        self.read_map(&v.rgb, v)
    }

    /// Composite of the stored band maps under the manifest weights.
    pub fn recompose(&self, stack: &SpectrumMapStack) -> Result<RgbImage> {
        linear_fuse(stack, &self.manifest.weights(), self.manifest.kappa)
    }

    fn read_map(&self, rel: &str, v: &ViewRecord) -> Result<RgbImage> {
        let path = self.root.join(rel);
        let map: SfmMap = sfm_read(&path)?;
        if map.width as usize != v.width || map.height as usize != v.height {
            return Err(Error::DimMismatch {
                path: path.display().to_string(),
                detail: "map changed since load".into(),
            });
        }
        map.to_rgb()
    }
}

/// One view of a [`write_view_set`] call.
pub struct ViewMaps {
    pub name: String,
    pub split: Split,
    pub camera: Camera,
    pub stack: SpectrumMapStack,
    pub rgb: RgbImage,
}

/// Writes `views` as a dataset under `out`, taking everything but the views
/// from `like`. Band maps and composites go to `out/views/`.
pub fn write_view_set(out: impl AsRef<Path>, like: &Manifest, views: &[ViewMaps]) -> Result<Dataset> {
    let out = out.as_ref();
    std::fs::create_dir_all(out.join("views"))?;
    let centers = &like.partition.centers_nm;
    let mut records = Vec::with_capacity(views.len());
    for v in views {
        if v.stack.bands() != centers.len() {
            return Err(Error::BadPartition(format!(
                "view {} has {} bands, partition {}",
                v.name,
                v.stack.bands(),
                centers.len()
            )));
        }
        let mut bands = Vec::with_capacity(centers.len());
        for (k, c) in centers.iter().enumerate() {
            let rel = format!("views/{}_band{k:02}.sfm", v.name);
            sfm_write(out.join(&rel), &SfmMap::from_rgb(&v.stack.band(k), *c as f32)?)?;
            bands.push(rel);
        }
        let rel = format!("views/{}_rgb.sfm", v.name);
        sfm_write(out.join(&rel), &SfmMap::from_rgb(&v.rgb, 0.0)?)?;
        records.push(ViewRecord::from_camera(v.name.clone(), v.split, &v.camera, bands, rel));
    }
    let manifest = Manifest {
        views: records,
        ..like.clone()
    };
    std::fs::write(out.join(MANIFEST_NAME), manifest.to_toml()?)?;
    Dataset::load(out)
}
