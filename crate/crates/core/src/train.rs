//! Optimization loops: coarse/fine field training, SAUNet fitting and the
//! joint field + SAUNet mode.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{shape_err, Error, Result};
use crate::field::{make_field, FieldConfig, SpectralField};
use crate::fusion::{stack_input, SaUnet, SaUnetConfig};
use crate::image::{RgbImage, SpectrumMapStack};
use crate::metrics::{band_psnr, psnr_image, spectral_loss, update_ws, LossConfig, SpectralWeights};
use crate::nn::checkpoint::{self, Record};
use crate::nn::{AdamConfig, Graph, Tensor, Var};
use crate::render::{generate_rays, render_rays, render_spectrum_maps, BoundField, Ray, RayBatch, RenderConfig};

const BATCH_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldTrainConfig {
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub loss: LossConfig,
    pub lr: f64,
    /// Exponential decay target reached at `iterations`; constant when unset.
    pub lr_final: Option<f64>,
    pub iterations: usize,
    pub batch_rays: usize,
    pub seed: u64,
}

impl Default for FieldTrainConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            render: RenderConfig {
                jitter: true,
                perturb_sigma_std: 1.0,
                ..RenderConfig::default()
            },
            loss: LossConfig::default(),
            lr: 5e-4,
            lr_final: None,
            iterations: 20_000,
            batch_rays: 1024,
            seed: 0,
        }
    }
}

impl FieldTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.render.validate()?;
        self.loss.validate()?;
        if !(self.lr > 0.0) || self.batch_rays == 0 {
            return Err(Error::InvalidArgument("need lr > 0 and batch_rays > 0".into()));
        }
        if matches!(self.lr_final, Some(f) if !(f > 0.0)) {
            return Err(Error::InvalidArgument("lr_final must be > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_final {
            Some(f) if self.iterations > 0 => {
                let t = (step as f64 / self.iterations as f64).min(1.0);
                self.lr * (f / self.lr).powf(t)
            }
            _ => self.lr,
        }
    }
}

/// Every pixel ray of a set of views with its target spectrum.
#[derive(Clone, Debug)]
pub struct RayTable {
    pub rays: Vec<Ray>,
    /// `[rays, 3 * s_num]`.
    pub targets: Vec<f64>,
    pub s_num: usize,
    pub near: f64,
    pub far: f64,
    /// `(dataset view index, first ray, width, height)` per view.
    pub views: Vec<(usize, usize, usize, usize)>,
    pub rgb: Vec<RgbImage>,
    pub white_background: bool,
}

impl RayTable {
    /// All views of `split`; they must share `near` and `far`.
    pub fn from_dataset(ds: &Dataset, split: Split) -> Result<Self> {
        let idx = ds.split(split);
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("dataset has no {split:?} views")));
        }
        let s_num = ds.manifest.s_num();
        let (near, far) = (ds.camera(idx[0]).near, ds.camera(idx[0]).far);
        let mut table = Self {
            rays: Vec::new(),
            targets: Vec::new(),
            s_num,
            near,
            far,
            views: Vec::new(),
            rgb: Vec::new(),
            white_background: ds.manifest.white_background,
        };
        for i in idx {
            let cam = ds.camera(i);
            if cam.near != near || cam.far != far {
                return Err(Error::InvalidArgument(format!(
                    "view `{}` has range [{}, {}], expected [{near}, {far}]",
                    ds.view(i).name,
                    cam.near,
                    cam.far
                )));
            }
            let stack = ds.load_stack(i)?;
            table.views.push((i, table.rays.len(), cam.width, cam.height));
            table.rays.extend(generate_rays(cam, &crate::render::all_pixels(cam))?);
            table.targets.extend_from_slice(stack.data());
            table.rgb.push(ds.load_rgb(i)?);
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn target(&self, i: usize) -> &[f64] {
        let k3 = 3 * self.s_num;
        &self.targets[i * k3..(i + 1) * k3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Batch PSNR of the fine render per band.
    pub band_psnr: Vec<f64>,
    pub ws: Vec<f64>,
    /// Present in joint mode.
    pub rgb_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewEval {
    pub view: String,
    pub band_psnr: Vec<f64>,
    pub rgb_psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewEval>,
    /// Per-band PSNR averaged over views.
    pub band_psnr: Vec<f64>,
    pub mean_band_psnr: f64,
    pub rgb_psnr: f64,
}

fn mix(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ BATCH_STREAM_SALT);
    r.set_stream(step);
    r
}

fn non_finite(step: u64, what: &str, idx: &[usize]) -> Error {
    Error::Numeric(format!(
        "non-finite {what} at step {step}; batch ray indices {idx:?}"
    ))
}

/// Coarse and fine fields with their optimizer state and band weights.
#[derive(Clone, Debug)]
pub struct FieldTrainer {
    pub cfg: FieldTrainConfig,
    pub coarse: SpectralField,
    pub fine: SpectralField,
    pub weights: SpectralWeights,
    pub step: u64,
    table: RayTable,
}

impl FieldTrainer {
    pub fn new(cfg: FieldTrainConfig, table: RayTable) -> Result<Self> {
        cfg.validate()?;
        if cfg.field.s_num != table.s_num {
            return Err(Error::BadPartition(format!(
                "field has s_num {}, dataset has {}",
                cfg.field.s_num, table.s_num
            )));
        }
        let (coarse, fine) = make_field(cfg.field, cfg.seed)?;
        Ok(Self {
            weights: SpectralWeights::uniform(cfg.field.s_num),
            cfg,
            coarse,
            fine,
            step: 0,
            table,
        })
    }

    pub fn table(&self) -> &RayTable {
        &self.table
    }

    fn render_cfg(&self) -> RenderConfig {
        RenderConfig {
            seed: self.cfg.seed,
            white_background: self.table.white_background,
            ..self.cfg.render.clone()
        }
    }

    /// Training render settings with midpoint samples and quantile fine draws.
    pub fn eval_render_cfg(&self) -> RenderConfig {
        RenderConfig {
            jitter: false,
            ..self.render_cfg()
        }
    }

    /// Ray indices of the batch for `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let mut rng = mix(self.cfg.seed, step);
        (0..self.cfg.batch_rays)
            .map(|_| rng.gen_range(0..self.table.len()))
            .collect()
    }

    /// Renders the indexed rays into `g`, returning both stages and targets.
    fn render_batch(&self, g: &mut Graph, idx: &[usize], step: u64) -> Result<(StageBound, Var, Var, Var)> {
        let pc = self.coarse.store().bind(g);
        let pf = self.fine.store().bind(g);
        let rays: Vec<Ray> = idx.iter().map(|&i| self.table.rays[i]).collect();
        let n = self.table.len() as u64;
        let ids: Vec<u64> = idx.iter().map(|&i| step * n + i as u64).collect();
        let out = render_rays(
            g,
            BoundField { field: &self.coarse, params: &pc },
            BoundField { field: &self.fine, params: &pf },
            RayBatch { rays: &rays, ids: &ids, near: self.table.near, far: self.table.far },
            &self.render_cfg(),
            true,
        )?;
        let k3 = 3 * self.table.s_num;
        let mut t = Vec::with_capacity(idx.len() * k3);
        for &i in idx {
            t.extend_from_slice(self.table.target(i));
        }
        let target = g.constant(Tensor::new(vec![idx.len(), k3], t)?);
        Ok((StageBound { coarse: pc, fine: pf }, out.coarse, out.fine, target))
    }

    fn apply(&mut self, g: &Graph, bound: &StageBound) -> Result<()> {
        let adam = AdamConfig::with_lr(self.cfg.lr_at(self.step));
        self.coarse.store_mut().accumulate_grads(g, &bound.coarse);
        self.fine.store_mut().accumulate_grads(g, &bound.fine);
        self.coarse.store_mut().adam_step(adam)?;
        self.fine.store_mut().adam_step(adam)
    }

    fn refresh_ws(&mut self, g: &Graph, coarse: Var, target: Var) -> Result<()> {
        if (self.step + 1) % self.cfg.loss.ws_interval as u64 == 0 {
            self.weights = update_ws(
                g.value(coarse).data(),
                g.value(target).data(),
                &self.weights,
                &self.cfg.loss,
            )?;
        }
        Ok(())
    }

    /// One Adam step on the weighted spectral loss of a fresh ray batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let mut g = Graph::new();
        let (bound, coarse, fine, target) = self.render_batch(&mut g, &idx, step)?;
        let loss = spectral_loss(&mut g, coarse, fine, target, &self.weights)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(non_finite(step, "loss", &idx));
        }
        g.backward(loss)?;
        self.apply(&g, &bound)?;
        let stats = StepStats {
            step,
            loss: lv,
            band_psnr: band_psnr(g.value(fine).data(), g.value(target).data(), self.table.s_num)?,
            ws: self.weights.ws.clone(),
            rgb_loss: None,
        };
        self.refresh_ws(&g, coarse, target)?;
        self.step += 1;
        Ok(stats)
    }

    /// Steps until `iterations` total, calling `on_step` after each one.
    pub fn run(
        &mut self,
        iterations: usize,
        mut on_step: impl FnMut(&Self, &StepStats) -> Result<()>,
    ) -> Result<()> {
        while (self.step as usize) < iterations {
            let s = self.step()?;
            on_step(self, &s)?;
        }
        Ok(())
    }

    /// Inference renders of the given dataset views.
    pub fn evaluate(&self, ds: &Dataset, views: &[usize]) -> Result<EvalReport> {
        evaluate_fields(&self.coarse, &self.fine, &self.eval_render_cfg(), ds, views)
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out = self.coarse.records("coarse/", true);
        out.extend(self.fine.records("fine/", true));
        out.push(Record::scalar("train.step", self.step as f64));
        out.push(Record::new(
            "train.ws",
            Tensor::new(vec![self.weights.ws.len()], self.weights.ws.clone()).unwrap(),
        ));
        if let Some(p) = &self.weights.p_lambda {
            out.push(Record::new("train.p_lambda", Tensor::new(vec![p.len()], p.clone()).unwrap()));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write(path, &self.records())
    }

    /// Restores fields, Adam moments, band weights and the step counter.
    pub fn resume(cfg: FieldTrainConfig, table: RayTable, records: &[Record]) -> Result<Self> {
        let mut t = Self::new(cfg, table)?;
        for (prefix, field) in [("coarse/", &mut t.coarse), ("fine/", &mut t.fine)] {
            let stored = SpectralField::config_from_records(records, prefix)?;
            if stored != *field.config() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint field config {stored:?} differs from {:?}",
                    field.config()
                )));
            }
            checkpoint::load_store(field.store_mut(), records, prefix)?;
        }
        t.step = checkpoint::scalar(records, "train.step")? as u64;
        let ws = checkpoint::find(records, "train.ws")
            .ok_or_else(|| Error::Parse("checkpoint lacks `train.ws`".into()))?;
        t.weights = SpectralWeights {
            ws: ws.tensor.data().to_vec(),
            p_lambda: checkpoint::find(records, "train.p_lambda").map(|r| r.tensor.data().to_vec()),
        };
        if t.weights.ws.len() != t.cfg.field.s_num {
            return Err(Error::BadPartition("checkpoint band weights length".into()));
        }
        Ok(t)
    }
}

struct StageBound {
    coarse: crate::nn::Bound,
    fine: crate::nn::Bound,
}

/// Coarse and fine fields stored by [`FieldTrainer::save`].
pub fn load_fields(path: impl AsRef<Path>) -> Result<(SpectralField, SpectralField)> {
    let records = checkpoint::read(path)?;
    Ok((
        SpectralField::from_records(&records, "coarse/")?,
        SpectralField::from_records(&records, "fine/")?,
    ))
}

/// Fine-stage band PSNR and composed-RGB PSNR against the stored ground truth.
pub fn evaluate_fields(
    coarse: &SpectralField,
    fine: &SpectralField,
    render: &RenderConfig,
    ds: &Dataset,
    views: &[usize],
) -> Result<EvalReport> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to evaluate".into()));
    }
    let s_num = ds.manifest.s_num();
    let mut rows = Vec::with_capacity(views.len());
    for &i in views {
        let (_, pred) = render_spectrum_maps(coarse, fine, ds.camera(i), render)?;
        let gt = ds.load_stack(i)?;
        let rgb = ds.recompose(&pred)?;
        rows.push(ViewEval {
            view: ds.view(i).name.clone(),
            band_psnr: band_psnr(pred.data(), gt.data(), s_num)?,
            rgb_psnr: psnr_image(&rgb, &ds.load_rgb(i)?)?,
        });
    }
    let n = rows.len() as f64;
    let band: Vec<f64> = (0..s_num)
        .map(|k| rows.iter().map(|r| r.band_psnr[k]).sum::<f64>() / n)
        .collect();
    Ok(EvalReport {
        mean_band_psnr: band.iter().sum::<f64>() / s_num as f64,
        band_psnr: band,
        rgb_psnr: rows.iter().map(|r| r.rgb_psnr).sum::<f64>() / n,
        views: rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTrainConfig {
    pub net: SaUnetConfig,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            net: SaUnetConfig::default(),
            lr: 1e-3,
            iterations: 2000,
            seed: 0,
        }
    }
}

fn rgb_target(g: &mut Graph, rgb: &RgbImage) -> Result<Var> {
    Ok(g.constant(Tensor::new(vec![1, 3, rgb.height, rgb.width], rgb.to_planar())?))
}

/// One Adam step of `net` on the MSE between its output and `rgb`.
pub fn fusion_step(net: &mut SaUnet, stack: &SpectrumMapStack, rgb: &RgbImage, lr: f64) -> Result<f64> {
    if stack.width() != rgb.width || stack.height() != rgb.height {
        return Err(shape_err("fusion pair sizes differ"));
    }
    net.check_dims(stack.width(), stack.height())?;
    let mut g = Graph::new();
    let p = net.store().bind(&mut g);
    let x = stack_input(&mut g, stack)?;
    let y = net.forward(&mut g, &p, x)?;
    let t = rgb_target(&mut g, rgb)?;
    let loss = g.mse(y, t)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("non-finite fusion loss at step {}", net.store().step_count())));
    }
    g.backward(loss)?;
    net.store_mut().accumulate_grads(&g, &p);
    net.store_mut().adam_step(AdamConfig::with_lr(lr))?;
    Ok(lv)
}

/// Cycles through `pairs` in order, one pair per step. Returns the per-step
/// losses.
pub fn train_fusion(
    net: &mut SaUnet,
    pairs: &[(SpectrumMapStack, RgbImage)],
    lr: f64,
    iterations: usize,
    mut on_step: impl FnMut(usize, f64) -> Result<bool>,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let mut losses = Vec::with_capacity(iterations);
    for step in 0..iterations {
        let (s, r) = &pairs[step % pairs.len()];
        let l = fusion_step(net, s, r, lr)?;
        losses.push(l);
        if !on_step(step, l)? {
            break;
        }
    }
    Ok(losses)
}

/// Field and SAUNet optimized together on `L_spectral + lambda_rgb * L_rgb`
/// over square pixel patches.
#[derive(Clone, Debug)]
pub struct JointTrainer {
    pub field: FieldTrainer,
    pub net: SaUnet,
    pub lr_fusion: f64,
    pub patch: usize,
}

impl JointTrainer {
    pub fn new(field: FieldTrainer, net: SaUnet, lr_fusion: f64, patch: usize) -> Result<Self> {
        if net.config().s_num != field.table.s_num {
            return Err(Error::BadPartition("network and field band counts differ".into()));
        }
        net.check_dims(patch, patch)?;
        if field.table.views.iter().any(|v| v.2 < patch || v.3 < patch) {
            return Err(Error::InvalidArgument(format!("patch {patch} larger than a view")));
        }
        Ok(Self {
            field,
            net,
            lr_fusion,
            patch,
        })
    }

    /// Ray indices of a random `patch x patch` window, row-major.
    pub fn patch_indices(&self, step: u64) -> (usize, usize, usize, Vec<usize>) {
        let t = &self.field.table;
        let mut rng = mix(self.field.cfg.seed, step);
        let v = rng.gen_range(0..t.views.len());
        let (_, first, w, h) = t.views[v];
        let x0 = rng.gen_range(0..=w - self.patch);
        let y0 = rng.gen_range(0..=h - self.patch);
        let idx = (0..self.patch)
            .flat_map(|y| (0..self.patch).map(move |x| first + (y0 + y) * w + x0 + x))
            .collect();
        (v, x0, y0, idx)
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.field.step;
        let (v, x0, y0, idx) = self.patch_indices(step);
        let p = self.patch;
        let s_num = self.field.table.s_num;
        let mut g = Graph::new();
        let (bound, coarse, fine, target) = self.field.render_batch(&mut g, &idx, step)?;
        let spectral = spectral_loss(&mut g, coarse, fine, target, &self.field.weights)?;

        let pn = self.net.store().bind(&mut g);
        let planar = g.transpose2(fine)?;
        let x = g.reshape(planar, &[1, 3 * s_num, p, p])?;
        let y = self.net.forward(&mut g, &pn, x)?;
        let rgb = &self.field.table.rgb[v];
        let mut crop = Vec::with_capacity(3 * p * p);
        for c in 0..3 {
            for yy in 0..p {
                for xx in 0..p {
                    crop.push(rgb.get(x0 + xx, y0 + yy, c));
                }
            }
        }
        let t = g.constant(Tensor::new(vec![1, 3, p, p], crop)?);
        let rgb_loss = g.mse(y, t)?;
        let total = {
            let r = g.scale(rgb_loss, self.field.cfg.loss.lambda_rgb);
            g.add(spectral, r)?
        };
        let lv = g.value(total).item();
        if !lv.is_finite() {
            return Err(non_finite(step, "joint loss", &idx));
        }
        g.backward(total)?;
        self.field.apply(&g, &bound)?;
        self.net.store_mut().accumulate_grads(&g, &pn);
        self.net.store_mut().adam_step(AdamConfig::with_lr(self.lr_fusion))?;
        let stats = StepStats {
            step,
            loss: g.value(spectral).item(),
            band_psnr: band_psnr(g.value(fine).data(), g.value(target).data(), s_num)?,
            ws: self.field.weights.ws.clone(),
            rgb_loss: Some(g.value(rgb_loss).item()),
        };
        self.field.refresh_ws(&g, coarse, target)?;
        self.field.step += 1;
        Ok(stats)
    }
}
