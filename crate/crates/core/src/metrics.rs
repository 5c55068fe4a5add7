//! Training losses, band weights and image quality metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::{RgbImage, SpectrumMapStack};
use crate::nn::{Graph, Var};

pub const PSNR_CLAMP_DB: f64 = 60.0;
/// Lower bound on running band PSNR; keeps `2^(P_max / P)` finite.
pub const PSNR_FLOOR_DB: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_rgb: f64,
    /// Steps between band-weight refreshes.
    pub ws_interval: usize,
    pub ema_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rgb: 1.1,
            ws_interval: 100,
            ema_decay: 0.9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rgb >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda_rgb must be non-negative, got {}",
                self.lambda_rgb
            )));
        }
        if self.ws_interval == 0 || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument(
                "ws_interval must be positive and ema_decay in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-band loss weights `w = 2^(P_max / P)` driven by running band PSNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralWeights {
    pub ws: Vec<f64>,
    /// Running PSNR per band; `None` before the first refresh.
    pub p_lambda: Option<Vec<f64>>,
}

impl SpectralWeights {
    pub fn uniform(s_num: usize) -> Self {
        Self {
            ws: vec![2.0; s_num],
            p_lambda: None,
        }
    }

    pub fn from_psnr(p_lambda: Vec<f64>) -> Result<Self> {
        if p_lambda.is_empty() || p_lambda.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidArgument("band PSNR must be positive".into()));
        }
        let ws = weights_from_psnr(&p_lambda);
        Ok(Self {
            ws,
            p_lambda: Some(p_lambda),
        })
    }

    pub fn p_max(&self) -> Option<f64> {
        self.p_lambda
            .as_ref()
            .map(|p| p.iter().copied().fold(f64::MIN, f64::max))
    }
}

pub fn weights_from_psnr(p_lambda: &[f64]) -> Vec<f64> {
    let p_max = p_lambda.iter().copied().fold(f64::MIN, f64::max);
    p_lambda.iter().map(|p| 2f64.powf(p_max / p)).collect()
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), "mse")?;
    if a.is_empty() {
        return Err(shape_err("mse of empty input"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CLAMP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CLAMP_DB)
}

pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_image(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(shape_err("psnr: image sizes differ"));
    }
    psnr(&a.data, &b.data, 1.0)
}

/// Per-band PSNR of `[R, K*3]` predictions against targets.
pub fn band_psnr(pred: &[f64], target: &[f64], s_num: usize) -> Result<Vec<f64>> {
    check_len(pred.len(), target.len(), "band_psnr")?;
    let k3 = 3 * s_num;
    if s_num == 0 || pred.is_empty() || pred.len() % k3 != 0 {
        return Err(shape_err(format!("{} values is not a multiple of {k3}", pred.len())));
    }
    let rays = pred.len() / k3;
    let mut sse = vec![0.0; s_num];
    for (p, t) in pred.chunks(k3).zip(target.chunks(k3)) {
        for (i, (a, b)) in p.iter().zip(t).enumerate() {
            sse[i / 3] += (a - b) * (a - b);
        }
    }
    Ok(sse
        .into_iter()
        .map(|s| psnr_from_mse(s / (rays * 3) as f64, 1.0))
        .collect())
}

/// Folds the batch's per-band PSNR into the running estimate and recomputes
/// the weights. The first refresh adopts the batch PSNR directly.
pub fn update_ws(
    coarse_pred: &[f64],
    target: &[f64],
    state: &SpectralWeights,
    cfg: &LossConfig,
) -> Result<SpectralWeights> {
    let s_num = state.ws.len();
    let batch: Vec<f64> = band_psnr(coarse_pred, target, s_num)?
        .into_iter()
        .map(|p| p.max(PSNR_FLOOR_DB))
        .collect();
    let p = match &state.p_lambda {
        None => batch,
        Some(prev) => prev
            .iter()
            .zip(&batch)
            .map(|(old, new)| cfg.ema_decay * old + (1.0 - cfg.ema_decay) * new)
            .collect(),
    };
    SpectralWeights::from_psnr(p)
}

/// `sum_k w_k * (mean_r |c - s|^2 + mean_r |f - s|^2)` over `[R, K*3]` graph values.
pub fn spectral_loss(g: &mut Graph, coarse: Var, fine: Var, target: Var, weights: &SpectralWeights) -> Result<Var> {
    let lc = g.band_mse(coarse, target, &weights.ws)?;
    let lf = g.band_mse(fine, target, &weights.ws)?;
    g.add(lc, lf)
}

/// [`spectral_loss`] evaluated on whole stacks.
pub fn spectral_loss_stacks(
    coarse: &SpectrumMapStack,
    fine: &SpectrumMapStack,
    target: &SpectrumMapStack,
    weights: &SpectralWeights,
) -> Result<f64> {
    let dims = |s: &SpectrumMapStack| (s.width(), s.height(), s.bands());
    if dims(coarse) != dims(target) || dims(fine) != dims(target) || target.bands() != weights.ws.len() {
        return Err(shape_err("spectral_loss: stack or weight shapes differ"));
    }
    let k3 = target.bands() * 3;
    let rays = target.pixels() as f64;
    let mut total = 0.0;
    for pred in [coarse, fine] {
        for (p, t) in pred.data().chunks(k3).zip(target.data().chunks(k3)) {
            for (i, (a, b)) in p.iter().zip(t).enumerate() {
                total += weights.ws[i / 3] * (a - b) * (a - b);
            }
        }
    }
    Ok(total / rays)
}

pub fn rgb_loss(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(shape_err("rgb_loss: image sizes differ"));
    }
    mse(&pred.data, &target.data)
}

pub fn rgb_loss_graph(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    g.mse(pred, target)
}

pub fn total_loss(spectral: f64, rgb: f64, cfg: &LossConfig) -> f64 {
    spectral + cfg.lambda_rgb * rgb
}

pub fn total_loss_graph(g: &mut Graph, spectral: Var, rgb: Var, cfg: &LossConfig) -> Result<Var> {
    let r = g.scale(rgb, cfg.lambda_rgb);
    g.add(spectral, r)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w x h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM of one `w x h` plane pair with dynamic range 1.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    check_len(a.len(), b.len(), "ssim")?;
    check_len(a.len(), w * h, "ssim plane")?;
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::TooSmall(w.min(h), SSIM_WINDOW));
    }
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(a, a), w, h, &k);
    let bb = filter_valid(&prod(b, b), w, h, &k);
    let ab = filter_valid(&prod(a, b), w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Channel-averaged SSIM.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(shape_err("ssim: image sizes differ"));
    }
    let (pa, pb) = (a.to_planar(), b.to_planar());
    let n = a.width * a.height;
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_plane(&pa[c * n..(c + 1) * n], &pb[c * n..(c + 1) * n], a.width, a.height)?;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L1Scale {
    #[default]
    Unit,
    /// Reported in thousandths.
    Milli,
}

impl L1Scale {
    pub fn factor(self) -> f64 {
        match self {
            L1Scale::Unit => 1.0,
            L1Scale::Milli => 1e3,
        }
    }
}

pub fn l1(a: &[f64], b: &[f64], scale: L1Scale) -> Result<f64> {
    check_len(a.len(), b.len(), "l1")?;
    if a.is_empty() {
        return Err(shape_err("l1 of empty input"));
    }
    let m = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    Ok(m * scale.factor())
}

pub fn l1_image(a: &RgbImage, b: &RgbImage, scale: L1Scale) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(shape_err("l1: image sizes differ"));
    }
    l1(&a.data, &b.data, scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene: String,
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

impl MetricsRow {
    pub fn evaluate(scene: &str, view: &str, pred: &RgbImage, target: &RgbImage, scale: L1Scale) -> Result<Self> {
        Ok(Self {
            scene: scene.into(),
            view: view.into(),
            psnr: psnr_image(pred, target)?,
            ssim: ssim(pred, target)?,
            l1: l1_image(pred, target, scale)?,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
