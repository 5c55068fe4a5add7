//! Pinhole rays, coarse/fine sampling and alpha-compositing quadrature.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::SpectralField;
use crate::image::SpectrumMapStack;
use crate::nn::{Bound, Graph, Tensor, Var};

pub type Vec3 = [f64; 3];
pub type Mat4 = [[f64; 4]; 4];

pub const IDENTITY: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize(v: Vec3) -> Vec3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world; the camera looks down its local `-z`.
    pub pose: Mat4,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera has zero size".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far, got {} / {}",
                self.near, self.far
            )));
        }
        if self.pose[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument("pose bottom row must be (0,0,0,1)".into()));
        }
        Ok(())
    }

    /// Square-pixel camera at `eye` looking at `target`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        fov_y_deg: f64,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let back = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
        let right = cross(up, back);
        if dot(right, right) < 1e-12 {
            return Err(Error::InvalidArgument("up vector parallel to view direction".into()));
        }
        let right = normalize(right);
        let up = cross(back, right);
        let mut pose = IDENTITY;
        for r in 0..3 {
            pose[r] = [right[r], up[r], back[r], eye[r]];
        }
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        let cam = Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            pose,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn ray(&self, i: u32, j: u32) -> Result<Ray> {
        if i as usize >= self.width || j as usize >= self.height {
            return Err(Error::OutOfBounds(i, j));
        }
        let local = normalize([
            (i as f64 + 0.5 - self.cx) / self.fx,
            -(j as f64 + 0.5 - self.cy) / self.fy,
            -1.0,
        ]);
        let p = &self.pose;
        let d = [
            p[0][0] * local[0] + p[0][1] * local[1] + p[0][2] * local[2],
            p[1][0] * local[0] + p[1][1] * local[1] + p[1][2] * local[2],
            p[2][0] * local[0] + p[2][1] * local[1] + p[2][2] * local[2],
        ];
        Ok(Ray {
            origin: [p[0][3], p[1][3], p[2][3]],
            dir: normalize(d),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// Rays through the centers of `pixels` given as `(column, row)`.
pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(i, j)| camera.ray(i, j)).collect()
}

/// Row-major `(column, row)` list of every pixel.
pub fn all_pixels(camera: &Camera) -> Vec<(u32, u32)> {
    (0..camera.height as u32)
        .flat_map(|j| (0..camera.width as u32).map(move |i| (i, j)))
        .collect()
}

/// Counter-based stream: one independent generator per ray id.
pub fn ray_rng(seed: u64, ray_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray_id);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Coarse,
    Fine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub near: f64,
    pub far: f64,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Interval owned by each sample; the last one runs to `far`.
    pub fn deltas(&self) -> Vec<f64> {
        let n = self.t.len();
        (0..n)
            .map(|i| if i + 1 < n { self.t[i + 1] - self.t[i] } else { self.far - self.t[i] })
            .collect()
    }
}

/// One draw per equal-width bin of `[near, far]`; bin midpoints when `rng`
/// is `None`.
pub fn stratified_samples<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Result<SampleSet> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    if !(far > near) {
        return Err(Error::InvalidArgument(format!("empty interval [{near}, {far}]")));
    }
    let step = (far - near) / n as f64;
    let t = match rng {
        None => (0..n).map(|k| near + (k as f64 + 0.5) * step).collect(),
        Some(rng) => (0..n)
            .map(|k| near + (k as f64 + rng.gen::<f64>()) * step)
            .collect(),
    };
    Ok(SampleSet {
        t,
        near,
        far,
        provenance: Provenance::Coarse,
    })
}

/// Same as [`stratified_samples`] with a seeded generator, or midpoints.
pub fn stratified_samples_seeded(near: f64, far: f64, n: usize, seed: Option<u64>) -> Result<SampleSet> {
    match seed {
        None => stratified_samples::<ChaCha8Rng>(near, far, n, None),
        Some(s) => stratified_samples(near, far, n, Some(&mut ChaCha8Rng::seed_from_u64(s))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quadrature {
    /// `channels` composited values.
    pub values: Vec<f64>,
    /// `T_i * alpha_i` per sample.
    pub weights: Vec<f64>,
}

/// Compositing weights `T_i (1 - exp(-sigma_i delta_i))`.
pub fn compositing_weights(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut trans = 1.0;
    sigmas
        .iter()
        .zip(deltas)
        .map(|(s, d)| {
            let alpha = 1.0 - (-s * d).exp();
            let w = trans * alpha;
            trans *= 1.0 - alpha;
            w
        })
        .collect()
}

/// Composites per-sample `radiances` (`len * channels`, sample-major).
pub fn quadrature(
    sigmas: &[f64],
    radiances: &[f64],
    ts: &SampleSet,
    white_background: bool,
) -> Result<Quadrature> {
    let n = ts.len();
    if sigmas.len() != n || n == 0 || radiances.len() % n != 0 {
        return Err(shape_err(format!(
            "quadrature: {} samples, {} sigmas, {} radiance values",
            n,
            sigmas.len(),
            radiances.len()
        )));
    }
    let ch = radiances.len() / n;
    let weights = compositing_weights(sigmas, &ts.deltas());
    let mut values = vec![0.0; ch];
    for (w, s) in weights.iter().zip(radiances.chunks(ch.max(1))) {
        for (v, x) in values.iter_mut().zip(s) {
            *v += w * x;
        }
    }
    if white_background {
        let rest = 1.0 - weights.iter().sum::<f64>();
        values.iter_mut().for_each(|v| *v += rest);
    }
    Ok(Quadrature { values, weights })
}

/// Inverse-transform draws from the coarse weight histogram, merged with the
/// coarse samples. Bin edges sit halfway between coarse samples, with the
/// outer edges at `near` and `far`. Deterministic evenly spaced quantiles are
/// used when `rng` is `None`.
pub fn hierarchical_resample<R: Rng>(
    ts: &SampleSet,
    weights: &[f64],
    n_fine: usize,
    rng: Option<&mut R>,
) -> Result<SampleSet> {
    let n = ts.len();
    if weights.len() != n || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} samples",
            weights.len(),
            n
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be non-negative".into()));
    }
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(ts.near);
    edges.extend(ts.t.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(ts.far);

    let mass: Vec<f64> = weights.iter().map(|w| w + 1e-5).collect();
    let total: f64 = mass.iter().sum();
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in &mass {
        acc += m / total;
        cdf.push(acc);
    }
    cdf[n] = 1.0;

    let us: Vec<f64> = match rng {
        None => (0..n_fine).map(|i| (i as f64 + 0.5) / n_fine as f64).collect(),
        Some(rng) => (0..n_fine).map(|_| rng.gen::<f64>()).collect(),
    };
    let mut t = ts.t.clone();
    t.reserve(n_fine);
    for u in us {
        let j = cdf.partition_point(|c| *c <= u).clamp(1, n) - 1;
        let p = cdf[j + 1] - cdf[j];
        let frac = if p > 0.0 { ((u - cdf[j]) / p).clamp(0.0, 1.0) } else { 0.5 };
        t.push(edges[j] + frac * (edges[j + 1] - edges[j]));
    }
    t.sort_by(f64::total_cmp);
    Ok(SampleSet {
        t,
        near: ts.near,
        far: ts.far,
        provenance: Provenance::Fine,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub white_background: bool,
    /// Std-dev of Gaussian noise on pre-activation density while training.
    pub perturb_sigma_std: f64,
    /// Jittered (rather than midpoint) coarse samples and random fine draws.
    pub jitter: bool,
    pub seed: u64,
    /// Rays per graph when rendering whole images.
    pub chunk_rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 128,
            white_background: false,
            perturb_sigma_std: 0.0,
            jitter: false,
            seed: 0,
            chunk_rays: 1024,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_coarse must be >= 2, got {}",
                self.n_coarse
            )));
        }
        if self.chunk_rays == 0 {
            return Err(Error::InvalidArgument("chunk_rays must be positive".into()));
        }
        if !(self.perturb_sigma_std >= 0.0) {
            return Err(Error::InvalidArgument("perturb_sigma_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn background(&self) -> f64 {
        if self.white_background {
            1.0
        } else {
            0.0
        }
    }
}

/// A field together with its parameters bound into a graph.
#[derive(Clone, Copy)]
pub struct BoundField<'a> {
    pub field: &'a SpectralField,
    pub params: &'a Bound,
}

/// Rays sharing one `[near, far]` range; `ids` key the per-ray random streams.
#[derive(Clone, Copy)]
pub struct RayBatch<'a> {
    pub rays: &'a [Ray],
    pub ids: &'a [u64],
    pub near: f64,
    pub far: f64,
}

/// `[R, 3 * s_num]` renders of both stages.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub coarse: Var,
    pub fine: Var,
}

fn sample_points(rays: &[Ray], sets: &[SampleSet]) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<f64>) {
    let total: usize = sets.iter().map(SampleSet::len).sum();
    let mut pos = Vec::with_capacity(total);
    let mut dir = Vec::with_capacity(total);
    let mut deltas = Vec::with_capacity(total);
    for (ray, set) in rays.iter().zip(sets) {
        pos.extend(set.t.iter().map(|t| ray.at(*t)));
        dir.extend(std::iter::repeat(ray.dir).take(set.len()));
        deltas.extend(set.deltas());
    }
    (pos, dir, deltas)
}

fn gaussian(rngs: &mut [ChaCha8Rng], per_ray: usize, std: f64) -> Vec<f64> {
    rngs.iter_mut()
        .flat_map(|r| {
            (0..per_ray)
                .map(|_| { let z: f64 = StandardNormal.sample(r); std * z })
                .collect::<Vec<f64>>()
        })
        .collect()
}

/// Coarse and fine renders for a batch of rays inside `g`.
///
/// The fine stage samples the union of the coarse set and draws from the
/// coarse weight histogram; those positions carry no gradient.
pub fn render_rays(
    g: &mut Graph,
    coarse: BoundField,
    fine: BoundField,
    batch: RayBatch,
    cfg: &RenderConfig,
    training: bool,
) -> Result<StageOutput> {
    cfg.validate()?;
    if batch.rays.len() != batch.ids.len() {
        return Err(shape_err("one id per ray required"));
    }
    let s_num = coarse.field.config().s_num;
    if fine.field.config().s_num != s_num {
        return Err(Error::InvalidArgument("coarse and fine fields differ in s_num".into()));
    }
    let mut rngs: Vec<ChaCha8Rng> = batch.ids.iter().map(|id| ray_rng(cfg.seed, *id)).collect();
    let coarse_sets = rngs
        .iter_mut()
        .map(|r| {
            stratified_samples(batch.near, batch.far, cfg.n_coarse, cfg.jitter.then_some(r))
        })
        .collect::<Result<Vec<_>>>()?;
    let noisy = training && cfg.perturb_sigma_std > 0.0;

    let (pos, dir, deltas) = sample_points(batch.rays, &coarse_sets);
    let noise = noisy.then(|| gaussian(&mut rngs, cfg.n_coarse, cfg.perturb_sigma_std));
    let c = coarse
        .field
        .forward(g, coarse.params, &pos, &dir, noise.as_deref())?;
    let sig_c = g.value(c.sigma).data().to_vec();
    let out_c = g.volume_render(c.sigma, c.radiance, cfg.n_coarse, deltas, cfg.background())?;

    let fine_sets = coarse_sets
        .iter()
        .zip(sig_c.chunks(cfg.n_coarse))
        .zip(rngs.iter_mut())
        .map(|((set, sig), r)| {
            let w = compositing_weights(sig, &set.deltas());
            hierarchical_resample(set, &w, cfg.n_fine, cfg.jitter.then_some(r))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_f = cfg.n_coarse + cfg.n_fine;
    let (pos, dir, deltas) = sample_points(batch.rays, &fine_sets);
    let noise = noisy.then(|| gaussian(&mut rngs, n_f, cfg.perturb_sigma_std));
    let f = fine.field.forward(g, fine.params, &pos, &dir, noise.as_deref())?;
    let out_f = g.volume_render(f.sigma, f.radiance, n_f, deltas, cfg.background())?;
    Ok(StageOutput {
        coarse: out_c,
        fine: out_f,
    })
}

/// Renders every pixel of `camera`, returning the coarse and fine stacks.
///
/// Chunks run in parallel on the current rayon pool; per-ray random streams
/// make the result independent of the schedule.
pub fn render_spectrum_maps(
    coarse: &SpectralField,
    fine: &SpectralField,
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<(SpectrumMapStack, SpectrumMapStack)> {
    camera.validate()?;
    cfg.validate()?;
    let s_num = coarse.config().s_num;
    let pixels = all_pixels(camera);
    let ids: Vec<u64> = (0..pixels.len() as u64).collect();
    let rays = generate_rays(camera, &pixels)?;
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = rays
        .par_chunks(cfg.chunk_rays)
        .zip(ids.par_chunks(cfg.chunk_rays))
        .map(|(rays, ids)| {
            let mut g = Graph::new();
            let pc = coarse.store().bind_frozen(&mut g);
            let pf = fine.store().bind_frozen(&mut g);
            let out = render_rays(
                &mut g,
                BoundField { field: coarse, params: &pc },
                BoundField { field: fine, params: &pf },
                RayBatch { rays, ids, near: camera.near, far: camera.far },
                cfg,
                false,
            )?;
            Ok((
                g.value(out.coarse).data().to_vec(),
                g.value(out.fine).data().to_vec(),
            ))
        })
        .collect::<Result<_>>()?;
    let (mut dc, mut df) = (Vec::new(), Vec::new());
    for (c, f) in chunks {
        dc.extend(c);
        df.extend(f);
    }
    Ok((
        SpectrumMapStack::from_data(camera.width, camera.height, s_num, dc)?,
        SpectrumMapStack::from_data(camera.width, camera.height, s_num, df)?,
    ))
}

/// Graph constant holding per-ray targets gathered from stacks, `[R, 3K]`.
pub fn gather_targets(g: &mut Graph, stack: &SpectrumMapStack, pixels: &[(u32, u32)]) -> Result<Var> {
    let k3 = stack.bands() * 3;
    let mut data = Vec::with_capacity(pixels.len() * k3);
    for &(i, j) in pixels {
        data.extend_from_slice(stack.pixel(j as usize * stack.width() + i as usize));
    }
    Ok(g.constant(Tensor::new(vec![pixels.len(), k3], data)?))
}
