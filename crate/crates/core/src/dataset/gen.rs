//! Synthetic dataset generation from an analytic scene.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, Manifest, Split, ViewRecord, FORMAT, MANIFEST_NAME};
use super::scene::{oracle_render, AnalyticScene, BandTints, ORACLE_SAMPLES};
use super::sfm::{sfm_write, SfmMap};
use crate::error::{Error, Result};
use crate::fusion::linear_fuse;
use crate::image::SpectrumMapStack;
use crate::render::{Camera, Vec3};
use crate::spectral_color::{kappa_for_illuminant, BandPartition, CmfTable, Spd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewLayout {
    /// Fibonacci points over the full sphere.
    Sphere,
    /// Forward-facing arc around `+x`, slightly above the `xy` plane.
    Arc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub s_num: usize,
    pub lambda_min_nm: f64,
    pub lambda_max_nm: f64,
    /// Explicit band centers; empty means a uniform split of the range.
    pub centers_nm: Vec<f64>,
    pub band_width_nm: f64,
    pub illuminant: String,
    /// Keep band maps illuminant-free and apply the illuminant only in the
    /// RGB composite.
    pub illuminant_at_fusion: bool,
    pub width: usize,
    pub height: usize,
    pub fov_y_deg: f64,
    pub n_views: usize,
    pub n_test: usize,
    pub layout: ViewLayout,
    pub radius: f64,
    pub near: f64,
    pub far: f64,
    pub oracle_samples: usize,
    pub seed: u64,
    pub scene: AnalyticScene,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            s_num: 11,
            lambda_min_nm: 380.0,
            lambda_max_nm: 780.0,
            centers_nm: Vec::new(),
            band_width_nm: 50.0,
            illuminant: "D65".into(),
            illuminant_at_fusion: false,
            width: 64,
            height: 64,
            fov_y_deg: 40.0,
            n_views: 40,
            n_test: 10,
            layout: ViewLayout::Sphere,
            radius: 4.0,
            near: 2.5,
            far: 5.5,
            oracle_samples: ORACLE_SAMPLES,
            seed: 0,
            scene: AnalyticScene::three_blobs(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::InvalidArgument("need at least 2 views".into()));
        }
        if self.n_test >= self.n_views {
            return Err(Error::InvalidArgument(format!(
                "{} test views leave no training views out of {}",
                self.n_test, self.n_views
            )));
        }
        if !(self.radius > 0.0 && self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::InvalidArgument("need radius > 0 and 0 < fov < 180".into()));
        }
        if self.oracle_samples == 0 {
            return Err(Error::InvalidArgument("oracle_samples must be positive".into()));
        }
        self.scene.validate()
    }

    pub fn partition(&self) -> Result<BandPartition> {
        if self.centers_nm.is_empty() {
            return BandPartition::uniform(self.s_num, self.lambda_min_nm, self.lambda_max_nm);
        }
        if self.centers_nm.len() != self.s_num {
            return Err(Error::InvalidArgument(format!(
                "s_num {} but {} explicit centers",
                self.s_num,
                self.centers_nm.len()
            )));
        }
        BandPartition::explicit(self.centers_nm.clone(), self.band_width_nm)
    }

    /// The 8-band 400-750 nm filter layout.
    pub fn filter_bank() -> Self {
        let p = BandPartition::filter_bank_400_750();
        Self {
            s_num: p.s_num(),
            centers_nm: p.centers_nm,
            band_width_nm: p.delta_lambda_nm,
            ..Self::default()
        }
    }
}

/// Camera centers at distance `radius` from the origin.
pub fn view_positions(layout: ViewLayout, n: usize, radius: f64) -> Vec<Vec3> {
    match layout {
        ViewLayout::Sphere => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    [radius * r * phi.cos(), radius * r * phi.sin(), radius * z]
                })
                .collect()
        }
        ViewLayout::Arc => (0..n)
            .map(|i| {
                let a = -0.5 + i as f64 / (n - 1).max(1) as f64;
                let (s, c) = a.sin_cos();
                let (se, ce) = 0.2f64.sin_cos();
                [radius * ce * c, radius * ce * s, radius * se]
            })
            .collect(),
    }
}

pub fn view_cameras(cfg: &GenConfig) -> Result<Vec<Camera>> {
    view_positions(cfg.layout, cfg.n_views, cfg.radius)
        .into_iter()
        .map(|eye| {
            let up = if eye[2].abs() > 0.99 * cfg.radius { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
            Camera::look_at(eye, [0.0; 3], up, cfg.width, cfg.height, cfg.fov_y_deg, cfg.near, cfg.far)
        })
        .collect()
}

/// Seeded shuffle; the first `n_test` shuffled indices become test views.
pub fn split_views(n: usize, n_test: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    for &i in &idx[..n_test.min(n)] {
        out[i] = Split::Test;
    }
    out
}

/// Band tints, composite kappa, band gain and fusion weights for `cfg`.
fn color_setup(cfg: &GenConfig, partition: &BandPartition) -> Result<(BandTints, f64, Vec<f64>)> {
    let table = CmfTable::cie1931();
    let spd = Spd::named(&cfg.illuminant)?;
    let kappa = kappa_for_illuminant(&table, &spd, partition)?;
    if cfg.illuminant_at_fusion {
        let flat = Spd::equal_energy(partition.lambda_min_nm.min(300.0), partition.lambda_max_nm.max(830.0));
        let tints = BandTints::colorimetric(&table, &flat, partition)?;
        let l: Vec<f64> = partition
            .centers_nm
            .iter()
            .map(|c| spd.at(*c))
            .collect::<Result<_>>()?;
        let lmax = l.iter().copied().fold(0.0, f64::max);
        let weights = l.iter().map(|v| v / lmax).collect();
        let k = kappa * lmax / tints.gain;
        Ok((tints, k, weights))
    } else {
        let tints = BandTints::colorimetric(&table, &spd, partition)?;
        let k = kappa / tints.gain;
        Ok((tints, k, vec![1.0; partition.s_num()]))
    }
}

fn round_f32(stack: &SpectrumMapStack) -> Result<SpectrumMapStack> {
    let data = stack.data().iter().map(|v| f64::from(*v as f32)).collect();
    SpectrumMapStack::from_data(stack.width(), stack.height(), stack.bands(), data)
}

/// Renders every view with the oracle and writes band maps, composites and
/// `manifest.toml` under `out`. Also writes `gen_config.toml`.
pub fn gen_synthetic(cfg: &GenConfig, out: impl AsRef<Path>) -> Result<Dataset> {
    cfg.validate()?;
    let out = out.as_ref();
    let partition = cfg.partition()?;
    let (tints, kappa, weights) = color_setup(cfg, &partition)?;
    let cameras = view_cameras(cfg)?;
    let splits = split_views(cfg.n_views, cfg.n_test, cfg.seed);
    std::fs::create_dir_all(out.join("views"))?;
    let fusion = crate::fusion::LinearFusionWeights::shared(&weights);

    let records = cameras
        .par_iter()
        .zip(splits.par_iter())
        .enumerate()
        .map(|(i, (cam, split))| {
            let name = format!("view_{i:03}");
            let stack = round_f32(&oracle_render(&cfg.scene, cam, &partition, &tints, cfg.oracle_samples)?)?;
            let mut bands = Vec::with_capacity(partition.s_num());
            for (k, center) in partition.centers_nm.iter().enumerate() {
                let rel = format!("views/{name}_band{k:02}.sfm");
                sfm_write(out.join(&rel), &SfmMap::from_rgb(&stack.band(k), *center as f32)?)?;
                bands.push(rel);
            }
            let rgb = linear_fuse(&stack, &fusion, kappa)?;
            let rel = format!("views/{name}_rgb.sfm");
            sfm_write(out.join(&rel), &SfmMap::from_rgb(&rgb, 0.0)?)?;
            Ok(ViewRecord::from_camera(name, *split, cam, bands, rel))
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        format: FORMAT.into(),
        illuminant: cfg.illuminant.clone(),
        kappa,
        map_gain: tints.gain,
        fusion_weights: weights,
        white_background: cfg.scene.white_background,
        partition,
        scene: Some(cfg.scene.clone()),
        views: records,
    };
    std::fs::write(out.join(MANIFEST_NAME), manifest.to_toml()?)?;
    std::fs::write(
        out.join("gen_config.toml"),
        toml::to_string(cfg).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Dataset::load(out.join(MANIFEST_NAME))
}

pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST_NAME)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::dot;

    fn small(n_views: usize) -> GenConfig {
        GenConfig {
            s_num: 3,
            width: 8,
            height: 8,
            n_views,
            n_test: 2,
            oracle_samples: 128,
            ..Default::default()
        }
    }

    #[test]
    fn poses_at_requested_radius() {
        for layout in [ViewLayout::Sphere, ViewLayout::Arc] {
            let cfg = GenConfig { layout, n_views: 10, radius: 3.3, ..small(10) };
            let cams = view_cameras(&cfg).unwrap();
            assert_eq!(cams.len(), 10);
            for c in &cams {
                let eye = [c.pose[0][3], c.pose[1][3], c.pose[2][3]];
                assert!((dot(eye, eye).sqrt() - 3.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let a = split_views(40, 10, 7);
        assert_eq!(a.iter().filter(|s| **s == Split::Test).count(), 10);
        assert_eq!(a, split_views(40, 10, 7));
        assert_ne!(a, split_views(40, 10, 8));
    }

    #[test]
    fn too_few_views_rejected() {
        assert!(gen_synthetic(&GenConfig { n_test: 0, ..small(1) }, tempfile::tempdir().unwrap().path()).is_err());
    }

    #[test]
    fn generated_dataset_is_self_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic(&small(10), dir.path()).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.split(Split::Test).len(), 2);
        for i in 0..ds.len() {
            let stack = ds.load_stack(i).unwrap();
            let rgb = ds.load_rgb(i).unwrap();
            let again = crate::spectral_color::compose_rgb(&stack, ds.kappa()).unwrap();
            for (a, b) in rgb.data.iter().zip(&again.data) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
        let p = BandPartition::uniform(3, 380.0, 780.0).unwrap();
        assert_eq!(ds.partition(), &p);
    }

    #[test]
    fn fusion_time_illuminant_weights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { illuminant_at_fusion: true, ..small(3) };
        let ds = gen_synthetic(&GenConfig { n_test: 1, ..cfg }, dir.path()).unwrap();
        let w = &ds.manifest.fusion_weights;
        assert!(w.iter().all(|v| *v > 0.0 && *v <= 1.0));
        assert!(w.iter().any(|v| *v == 1.0));
        let stack = ds.load_stack(0).unwrap();
        let rgb = ds.load_rgb(0).unwrap();
        let again = ds.recompose(&stack).unwrap();
        for (a, b) in rgb.data.iter().zip(&again.data) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn explicit_centers_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { width: 8, height: 8, n_views: 3, n_test: 1, oracle_samples: 64, ..GenConfig::filter_bank() };
        let ds = gen_synthetic(&cfg, dir.path()).unwrap();
        assert_eq!(ds.partition().centers_nm, vec![400.0, 450.0, 500.0, 550.0, 600.0, 650.0, 700.0, 750.0]);
        assert_eq!(ds.load_stack(0).unwrap().bands(), 8);
        assert!(GenConfig { s_num: 4, ..cfg }.partition().is_err());
    }
}
