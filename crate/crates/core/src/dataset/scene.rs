//! Analytic emissive volumes and their dense-quadrature renders.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SpectrumMapStack;
use crate::render::{all_pixels, Camera, Ray, Vec3};
use crate::spectral_color::{band_coefficients, BandPartition, CmfTable, Spd};

pub const ORACLE_SAMPLES: usize = 4096;

/// Gaussian emission curve clipped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub center_nm: f64,
    pub width_nm: f64,
    pub amplitude: f64,
}

impl Emission {
    pub fn at(&self, lambda_nm: f64) -> f64 {
        let d = (lambda_nm - self.center_nm) / self.width_nm;
        (self.amplitude * (-0.5 * d * d).exp()).clamp(0.0, 1.0)
    }
}

/// Density `peak * exp(-|x - c|^2 / (2 r^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Vec3,
    pub radius: f64,
    pub peak_sigma: f64,
    pub emission: Emission,
}

/// Axis-aligned box of constant density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityBox {
    pub min: Vec3,
    pub max: Vec3,
    pub sigma: f64,
    pub emission: Emission,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticScene {
    pub blobs: Vec<Blob>,
    pub boxes: Vec<DensityBox>,
    pub white_background: bool,
}

impl AnalyticScene {
    /// Three overlapping-free blobs emitting blue, green and red light.
    pub fn three_blobs() -> Self {
        let blob = |center, radius, peak_sigma, center_nm| Blob {
            center,
            radius,
            peak_sigma,
            emission: Emission {
                center_nm,
                width_nm: 60.0,
                amplitude: 0.95,
            },
        };
        Self {
            blobs: vec![
                blob([-0.45, -0.1, 0.1], 0.28, 30.0, 460.0),
                blob([0.4, 0.25, -0.15], 0.32, 20.0, 540.0),
                blob([0.05, -0.2, -0.5], 0.25, 40.0, 640.0),
            ],
            boxes: Vec::new(),
            white_background: false,
        }
    }

    /// `n` small blobs on a ring, emission peaks evenly spread over
    /// 400..760 nm, so every band sees a different mixture of emitters.
    pub fn palette(n: usize) -> Self {
        let blobs = (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                let z = if i % 2 == 0 { 0.15 } else { -0.15 };
                Blob {
                    center: [0.7 * a.cos(), 0.7 * a.sin(), z],
                    radius: 0.14,
                    peak_sigma: 40.0,
                    emission: Emission {
                        center_nm: 400.0 + 360.0 * i as f64 / (n.max(2) - 1) as f64,
                        width_nm: 35.0,
                        amplitude: 0.95,
                    },
                }
            })
            .collect();
        Self { blobs, boxes: Vec::new(), white_background: false }
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.blobs {
            if !(b.radius > 0.0 && b.peak_sigma >= 0.0 && b.emission.width_nm > 0.0) {
                return Err(Error::InvalidArgument("blob needs radius > 0, sigma >= 0".into()));
            }
        }
        for b in &self.boxes {
            if !(b.sigma >= 0.0 && b.emission.width_nm > 0.0) || (0..3).any(|i| b.max[i] < b.min[i]) {
                return Err(Error::InvalidArgument("box needs min <= max, sigma >= 0".into()));
            }
        }
        Ok(())
    }

    /// Total density and per-primitive density at `x`, into `parts`.
    fn densities(&self, x: Vec3, parts: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for (b, out) in self.blobs.iter().zip(parts.iter_mut()) {
            let d2 = (0..3).map(|i| (x[i] - b.center[i]).powi(2)).sum::<f64>();
            *out = b.peak_sigma * (-d2 / (2.0 * b.radius * b.radius)).exp();
            total += *out;
        }
        for (b, out) in self.boxes.iter().zip(parts[self.blobs.len()..].iter_mut()) {
            let inside = (0..3).all(|i| x[i] >= b.min[i] && x[i] <= b.max[i]);
            *out = if inside { b.sigma } else { 0.0 };
            total += *out;
        }
        total
    }

    pub fn sigma(&self, x: Vec3) -> f64 {
        let mut parts = vec![0.0; self.blobs.len() + self.boxes.len()];
        self.densities(x, &mut parts)
    }

    /// Emission of each primitive at the band centers, as `oracle_ray` expects.
    pub fn emissions(&self, partition: &BandPartition) -> Vec<Vec<f64>> {
        let all = self
            .blobs
            .iter()
            .map(|b| b.emission)
            .chain(self.boxes.iter().map(|b| b.emission));
        all.map(|e| partition.centers_nm.iter().map(|l| e.at(*l)).collect())
            .collect()
    }

    /// Density-weighted emission per band at `x`.
    pub fn radiance(&self, x: Vec3, partition: &BandPartition) -> Vec<f64> {
        let em = self.emissions(partition);
        let mut parts = vec![0.0; em.len()];
        let total = self.densities(x, &mut parts);
        (0..partition.s_num())
            .map(|k| {
                if total > 0.0 {
                    parts.iter().zip(&em).map(|(p, e)| p * e[k]).sum::<f64>() / total
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Per-band RGB vector multiplying the scalar band radiance.
#[derive(Clone, Debug, PartialEq)]
pub struct BandTints {
    pub tints: Vec<[f64; 3]>,
    /// Factor already folded into `tints`; divide a composite by it to undo.
    pub gain: f64,
}

impl BandTints {
    pub fn unit(s_num: usize) -> Self {
        Self {
            tints: vec![[1.0; 3]; s_num],
            gain: 1.0,
        }
    }

    /// Band color coefficients with negative lobes clipped, scaled so the
    /// largest entry is 1.
    pub fn colorimetric(table: &CmfTable, spd: &Spd, partition: &BandPartition) -> Result<Self> {
        let coeffs = band_coefficients(table, spd, partition)?;
        let clipped: Vec<[f64; 3]> = coeffs.0.iter().map(|c| c.map(|v| v.max(0.0))).collect();
        let peak = clipped.iter().flatten().copied().fold(0.0, f64::max);
        if !(peak > 0.0) {
            return Err(Error::DegenerateIlluminant);
        }
        let gain = 1.0 / peak;
        Ok(Self {
            tints: clipped.iter().map(|c| c.map(|v| v * gain)).collect(),
            gain,
        })
    }
}

/// Band radiances along one ray by fixed-step midpoint compositing, followed
/// by the residual transmittance.
pub fn oracle_ray(
    scene: &AnalyticScene,
    ray: &Ray,
    near: f64,
    far: f64,
    emissions: &[Vec<f64>],
    s_num: usize,
    samples: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; s_num];
    let mut parts = vec![0.0; emissions.len()];
    let dt = (far - near) / samples as f64;
    let mut trans = 1.0;
    for i in 0..samples {
        let x = ray.at(near + (i as f64 + 0.5) * dt);
        let sigma = scene.densities(x, &mut parts);
        if sigma <= 0.0 {
            continue;
        }
        let alpha = 1.0 - (-sigma * dt).exp();
        let w = trans * alpha / sigma;
        for (k, o) in out.iter_mut().enumerate() {
            *o += w * parts.iter().zip(emissions).map(|(p, e)| p * e[k]).sum::<f64>();
        }
        trans *= 1.0 - alpha;
        if trans < 1e-15 {
            trans = 0.0;
            break;
        }
    }
    out.push(trans);
    out
}

/// Ground-truth stack: band radiance times band tint, plus the background.
pub fn oracle_render(
    scene: &AnalyticScene,
    camera: &Camera,
    partition: &BandPartition,
    tints: &BandTints,
    samples: usize,
) -> Result<SpectrumMapStack> {
    camera.validate()?;
    scene.validate()?;
    let k = partition.s_num();
    if tints.tints.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} tints for {k} bands",
            tints.tints.len()
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("oracle needs samples".into()));
    }
    let em = scene.emissions(partition);
    let bg = if scene.white_background { 1.0 } else { 0.0 };
    let pixels = all_pixels(camera);
    let data: Vec<f64> = pixels
        .par_iter()
        .map(|&(i, j)| {
            let ray = camera.ray(i, j)?;
            let vals = oracle_ray(scene, &ray, camera.near, camera.far, &em, k, samples);
            let trans = vals[k];
            let mut px = Vec::with_capacity(3 * k);
            for (v, t) in vals[..k].iter().zip(&tints.tints) {
                px.extend(t.iter().map(|c| v * c + bg * trans));
            }
            Ok(px)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    SpectrumMapStack::from_data(camera.width, camera.height, k, data)
}
