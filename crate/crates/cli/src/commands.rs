use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use specfield::dataset::{self, write_view_set, Dataset, Split, ViewMaps};
use specfield::fusion::{
    fit_weights_least_squares, pearson, saunet_forward, FusionModel, LinearFusionWeights, SaUnet,
    WeightMode,
};
use specfield::metrics::{write_metrics_csv, L1Scale, MetricsRow};
use specfield::nn::checkpoint;
use specfield::render::{render_spectrum_maps, RenderConfig};
use specfield::train::{
    evaluate_fields, load_fields, FieldTrainer, JointTrainer, RayTable, StepStats,
};
use specfield::{Error, RgbImage, Spd, SpectrumMapStack};

use crate::config::{echo, RunConfig};
use crate::SplitArg;

/// A verification command found failures.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

const NET_PREFIX: &str = "net/";

fn views(ds: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Test => ds.split(Split::Test),
        SplitArg::All => (0..ds.len()).collect(),
    }
}

fn view_index(ds: &Dataset, name: &str) -> Result<usize> {
    (0..ds.len())
        .find(|&i| ds.view(i).name == name)
        .ok_or_else(|| Error::MissingFile(ds.root.join(format!("<view {name}>"))).into())
}

fn check_snum(run: &RunConfig, have: usize, what: &str) -> Result<()> {
    match run.snum {
        Some(k) if k != have => Err(Error::BadPartition(format!("--snum {k} but {what} has {have} bands")).into()),
        _ => Ok(()),
    }
}

pub struct GenFlags {
    pub centers: Vec<f64>,
    pub band_width: Option<f64>,
    pub filter_bank: bool,
    pub illuminant_at_fusion: bool,
    pub illuminant: Option<String>,
}

pub fn gen_synthetic(run: &RunConfig, flags: GenFlags) -> Result<()> {
    let out = run.out_dir()?;
    let mut cfg = if flags.filter_bank {
        specfield::dataset::GenConfig { seed: run.seed.unwrap_or(0), ..specfield::dataset::GenConfig::filter_bank() }
    } else {
        run.gen_config()
    };
    if !flags.centers.is_empty() {
        cfg.s_num = run.snum.unwrap_or(flags.centers.len());
        cfg.centers_nm = flags.centers;
    }
    if let Some(w) = flags.band_width {
        cfg.band_width_nm = w;
    }
    if flags.illuminant_at_fusion {
        cfg.illuminant_at_fusion = true;
    }
    if let Some(name) = flags.illuminant {
        cfg.illuminant = name;
    }
    echo(&out, "run_config.toml", &cfg)?;
    let ds = dataset::gen_synthetic(&cfg, &out)?;
    println!(
        "wrote {} views ({} train, {} test), s_num {}, kappa {:.6} to {}",
        ds.len(),
        ds.split(Split::Train).len(),
        ds.split(Split::Test).len(),
        ds.manifest.s_num(),
        ds.kappa(),
        out.display()
    );
    Ok(())
}

fn stats_row(s: &StepStats) -> String {
    let mut row = format!("{},{:.9e}", s.step + 1, s.loss);
    for v in s.band_psnr.iter().chain(&s.ws) {
        write!(row, ",{v:.6}").unwrap();
    }
    if let Some(r) = s.rgb_loss {
        write!(row, ",{r:.9e}").unwrap();
    }
    row
}

fn stats_header(s_num: usize, joint: bool) -> String {
    let mut h = String::from("step,loss");
    for k in 0..s_num {
        write!(h, ",psnr_b{k}").unwrap();
    }
    for k in 0..s_num {
        write!(h, ",ws_b{k}").unwrap();
    }
    if joint {
        h.push_str(",rgb_loss");
    }
    h
}

fn log_file(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    let fresh = !append || !path.exists();
    let f = File::options().create(true).append(append).write(true).truncate(!append).open(path)?;
    let mut w = BufWriter::new(f);
    if fresh {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}

fn dump_nan(out: &Path, e: &anyhow::Error) {
    if let Some(Error::Numeric(msg)) = e.downcast_ref::<Error>() {
        let _ = std::fs::write(out.join("numeric_failure.txt"), format!("{msg}\n"));
    }
}

pub fn train_field(run: &RunConfig, data: &Path, resume: Option<&Path>) -> Result<()> {
    let out = run.out_dir()?;
    let ds = Dataset::load(data)?;
    let s_num = ds.manifest.s_num();
    check_snum(run, s_num, "the dataset")?;
    let mut cfg = run.field_config();
    cfg.field.s_num = s_num;
    let table = RayTable::from_dataset(&ds, Split::Train)?;
    let mut trainer = match resume {
        Some(p) => {
            let records = checkpoint::read(p)?;
            cfg.field = specfield::field::SpectralField::config_from_records(&records, "coarse/")?;
            FieldTrainer::resume(cfg.clone(), table, &records)?
        }
        None => FieldTrainer::new(cfg.clone(), table)?,
    };
    echo(&out, "run_config.toml", &cfg)?;
    let eval_every = run.eval_every.unwrap_or(1000).max(1);
    let ckpt_every = run.checkpoint_every.unwrap_or(1000).max(1);
    let test = ds.split(Split::Test);
    let append = resume.is_some();
    let mut log = log_file(&out.join("train_log.csv"), &stats_header(s_num, false), append)?;
    let mut eval_head = String::from("step,mean_band_psnr,rgb_psnr");
    for k in 0..s_num {
        write!(eval_head, ",psnr_b{k}").unwrap();
    }
    let mut eval_log = log_file(&out.join("eval_log.csv"), &eval_head, append)?;
    println!(
        "training {} + {} parameters on {} rays, {} iterations from step {}",
        trainer.coarse.num_params(),
        trainer.fine.num_params(),
        trainer.table().len(),
        cfg.iterations,
        trainer.step
    );
    let res = trainer.run(cfg.iterations, |t, s| {
        writeln!(log, "{}", stats_row(s))?;
        let done = s.step + 1;
        if done % eval_every as u64 == 0 && !test.is_empty() {
            let e = t.evaluate(&ds, &test)?;
            let mut row = format!("{done},{:.6},{:.6}", e.mean_band_psnr, e.rgb_psnr);
            for b in &e.band_psnr {
                write!(row, ",{b:.6}").unwrap();
            }
            writeln!(eval_log, "{row}")?;
            eval_log.flush()?;
            println!(
                "step {done}: loss {:.3e}, held-out band PSNR {:.2} dB {:?}, RGB {:.2} dB",
                s.loss,
                e.mean_band_psnr,
                e.band_psnr.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
                e.rgb_psnr
            );
        }
        if done % ckpt_every as u64 == 0 {
            t.save(out.join(format!("checkpoint_{done:06}.spnf")))?;
            t.save(out.join("checkpoint.spnf"))?;
            log.flush()?;
        }
        Ok(())
    });
    log.flush()?;
    if let Err(e) = res {
        let e = anyhow::Error::from(e);
        dump_nan(&out, &e);
        return Err(e);
    }
    trainer.save(out.join("checkpoint.spnf"))?;
    println!("wrote {}", out.join("checkpoint.spnf").display());
    Ok(())
}

fn eval_render(run: &RunConfig, ds: &Dataset) -> RenderConfig {
    RenderConfig {
        jitter: false,
        perturb_sigma_std: 0.0,
        white_background: ds.manifest.white_background,
        ..run.field_config().render
    }
}

pub fn render_spectra(
    run: &RunConfig,
    ckpt: &Path,
    data: &Path,
    split: SplitArg,
    weights: Option<&Path>,
    fusion: Option<&Path>,
    png: bool,
) -> Result<()> {
    let out = run.out_dir()?;
    let ds = Dataset::load(data)?;
    let (coarse, fine) = load_fields(ckpt)?;
    let s_num = fine.config().s_num;
    check_snum(run, s_num, "the checkpoint")?;
    if s_num != ds.manifest.s_num() {
        return Err(Error::BadPartition(format!(
            "checkpoint has {s_num} bands, dataset {}",
            ds.manifest.s_num()
        ))
        .into());
    }
    let model = match (weights, fusion) {
        (Some(p), _) => FusionModel::Linear { weights: LinearFusionWeights::read(p)?.1, kappa: 1.0 },
        (_, Some(p)) => FusionModel::SaUnet(Box::new(SaUnet::from_records(&checkpoint::read(p)?, NET_PREFIX)?)),
        _ => FusionModel::Linear { weights: ds.manifest.weights(), kappa: ds.kappa() },
    };
    let render = eval_render(run, &ds);
    echo(&out, "run_config.toml", &render)?;
    let mut maps = Vec::new();
    for i in views(&ds, split) {
        let (_, stack) = render_spectrum_maps(&coarse, &fine, ds.camera(i), &render)?;
        let rgb = model.fuse(&stack)?;
        let v = ds.view(i);
        if png {
            let dir = out.join("png");
            std::fs::create_dir_all(&dir)?;
            dataset::export_stack_png(&dir, &v.name, &stack)?;
            dataset::write_png(dir.join(format!("{}_rgb.png", v.name)), &rgb.clamped())?;
        }
        println!("rendered {}", v.name);
        maps.push(ViewMaps { name: v.name.clone(), split: v.split, camera: ds.camera(i).clone(), stack, rgb });
    }
    write_view_set(&out, &ds.manifest, &maps)?;
    println!("wrote {} views to {}", maps.len(), out.display());
    Ok(())
}

fn pairs(ds: &Dataset, targets: &Dataset, idx: &[usize]) -> Result<Vec<(SpectrumMapStack, RgbImage)>> {
    idx.iter()
        .map(|&i| {
            let j = view_index(targets, &ds.view(i).name)?;
            Ok((ds.load_stack(i)?, targets.load_rgb(j)?))
        })
        .collect()
}

#[derive(Serialize)]
struct FitReport {
    views: usize,
    residual_rms: f64,
    centers_nm: Vec<f64>,
    weights: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<ReferenceReport>,
}

#[derive(Serialize)]
struct ReferenceReport {
    name: String,
    samples: Vec<f64>,
    pearson_all: f64,
    /// Bands nearest either end of the range excluded.
    pearson_interior: Option<f64>,
}

fn reference_spd(spec: &str) -> Result<Spd> {
    if Path::new(spec).is_file() {
        return Ok(Spd::load(spec)?);
    }
    Ok(Spd::named(spec)?)
}

pub fn fit_weights(
    run: &RunConfig,
    data: &Path,
    targets: Option<&Path>,
    split: SplitArg,
    reference: Option<&str>,
    per_channel: bool,
) -> Result<()> {
    let out = run.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let ds = Dataset::load(data)?;
    check_snum(run, ds.manifest.s_num(), "the dataset")?;
    let tgt = match targets {
        Some(p) => Dataset::load(p)?,
        None => ds.clone(),
    };
    let idx = views(&ds, split);
    if idx.is_empty() {
        return Err(Error::InvalidArgument("no views in the selected split".into()).into());
    }
    let (stacks, rgbs): (Vec<_>, Vec<_>) = pairs(&ds, &tgt, &idx)?.into_iter().unzip();
    let mode = if per_channel { WeightMode::PerChannel } else { WeightMode::Shared };
    let fit = fit_weights_least_squares(&stacks, &rgbs, mode)?;
    let centers = ds.partition().centers_nm.clone();
    fit.write(out.join("weights.txt"), &centers)?;
    let w = fit.band_weights();
    let reference = match reference {
        Some(spec) => {
            let spd = reference_spd(spec)?;
            let samples: Vec<f64> = centers.iter().map(|c| spd.at(*c)).collect::<Result<_, _>>()?;
            let interior = (w.len() >= 4).then(|| pearson(&w[1..w.len() - 1], &samples[1..samples.len() - 1]));
            Some(ReferenceReport {
                name: spec.into(),
                pearson_all: pearson(&w, &samples)?,
                pearson_interior: interior.transpose()?,
                samples,
            })
        }
        None => None,
    };
    let report = FitReport { views: idx.len(), residual_rms: fit.residual_rms, centers_nm: centers, weights: w, reference };
    echo(&out, "fit_report.toml", &report)?;
    Ok(())
}

fn fusion_net(run: &RunConfig, s_num: usize, lr_is_fusion: bool) -> Result<(SaUnet, specfield::train::FusionTrainConfig)> {
    let mut cfg = run.fusion_config(lr_is_fusion);
    cfg.net.s_num = s_num;
    Ok((SaUnet::new(cfg.net, cfg.seed)?, cfg))
}

pub fn train_fusion(
    run: &RunConfig,
    data: &Path,
    targets: Option<&Path>,
    field_ckpt: Option<&Path>,
    split: SplitArg,
) -> Result<()> {
    let out = run.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let ds = Dataset::load(data)?;
    let s_num = ds.manifest.s_num();
    check_snum(run, s_num, "the dataset")?;
    if run.joint.unwrap_or(false) {
        return train_joint(run, &ds, field_ckpt, &out);
    }
    let tgt = match targets {
        Some(p) => Dataset::load(p)?,
        None => ds.clone(),
    };
    let idx = views(&ds, split);
    let pairs = pairs(&ds, &tgt, &idx)?;
    let (mut net, cfg) = fusion_net(run, s_num, true)?;
    echo(&out, "run_config.toml", &cfg)?;
    println!("training fusion network ({} parameters) on {} pairs", net.num_params(), pairs.len());
    let mut log = log_file(&out.join("fusion_log.csv"), "step,rgb_loss", false)?;
    let res = specfield::train::train_fusion(&mut net, &pairs, cfg.lr, cfg.iterations, |step, loss| {
        writeln!(log, "{},{loss:.9e}", step + 1)?;
        if (step + 1) % 100 == 0 {
            println!("step {}: rgb loss {loss:.3e}", step + 1);
        }
        Ok(true)
    });
    log.flush()?;
    if let Err(e) = res {
        let e = anyhow::Error::from(e);
        dump_nan(&out, &e);
        return Err(e);
    }
    checkpoint::write(out.join("fusion.spnf"), &net.records(NET_PREFIX, true))?;
    let mut psnr = 0.0;
    for (s, r) in &pairs {
        psnr += specfield::metrics::psnr_image(&saunet_forward(s, &net)?, r)?;
    }
    println!("mean training RGB PSNR {:.2} dB; wrote {}", psnr / pairs.len() as f64, out.join("fusion.spnf").display());
    Ok(())
}

fn train_joint(run: &RunConfig, ds: &Dataset, field_ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let s_num = ds.manifest.s_num();
    let mut fcfg = run.field_config();
    fcfg.field.s_num = s_num;
    let table = RayTable::from_dataset(ds, Split::Train)?;
    let field = match field_ckpt {
        Some(p) => {
            let records = checkpoint::read(p)?;
            fcfg.field = specfield::field::SpectralField::config_from_records(&records, "coarse/")?;
            FieldTrainer::resume(fcfg.clone(), table, &records)?
        }
        None => FieldTrainer::new(fcfg.clone(), table)?,
    };
    let (net, ncfg) = fusion_net(run, s_num, false)?;
    let patch = run.patch.unwrap_or(32);
    let iterations = run.iterations.unwrap_or(ncfg.iterations);
    #[derive(Serialize)]
    struct Joint<'a> {
        patch: usize,
        iterations: usize,
        field: &'a specfield::train::FieldTrainConfig,
        fusion: &'a specfield::train::FusionTrainConfig,
    }
    echo(out, "run_config.toml", &Joint { patch, iterations, field: &fcfg, fusion: &ncfg })?;
    let mut joint = JointTrainer::new(field, net, ncfg.lr, patch)?;
    let mut log = log_file(&out.join("joint_log.csv"), &stats_header(s_num, true), false)?;
    let start = joint.field.step as usize;
    for _ in 0..iterations {
        let s = match joint.step() {
            Ok(s) => s,
            Err(e) => {
                log.flush()?;
                let e = anyhow::Error::from(e);
                dump_nan(out, &e);
                return Err(e);
            }
        };
        writeln!(log, "{}", stats_row(&s))?;
        let done = s.step as usize + 1 - start;
        if done % 100 == 0 || done == iterations {
            println!(
                "step {done}: spectral loss {:.3e}, rgb loss {:.3e}",
                s.loss,
                s.rgb_loss.unwrap_or(f64::NAN)
            );
        }
    }
    log.flush()?;
    joint.field.save(out.join("field.spnf"))?;
    checkpoint::write(out.join("fusion.spnf"), &joint.net.records(NET_PREFIX, true))?;
    let test = ds.split(Split::Test);
    if !test.is_empty() {
        let e = evaluate_fields(&joint.field.coarse, &joint.field.fine, &joint.field.eval_render_cfg(), ds, &test)?;
        println!("held-out band PSNR {:.2} dB, linear RGB {:.2} dB", e.mean_band_psnr, e.rgb_psnr);
    }
    println!("wrote {} and {}", out.join("field.spnf").display(), out.join("fusion.spnf").display());
    Ok(())
}

pub fn eval(run: &RunConfig, pred: &Path, gt: &Path) -> Result<()> {
    let out = run.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let p = Dataset::load(pred)?;
    let g = Dataset::load(gt)?;
    let scene = g
        .root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    let mut rows = Vec::with_capacity(p.len() + 1);
    for i in 0..p.len() {
        let name = &p.view(i).name;
        let j = view_index(&g, name)?;
        rows.push(MetricsRow::evaluate(&scene, name, &p.load_rgb(i)?, &g.load_rgb(j)?, L1Scale::Unit)?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("no views in {}", pred.display())).into());
    }
    let n = rows.len() as f64;
    let mean = MetricsRow {
        scene: scene.clone(),
        view: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        l1: rows.iter().map(|r| r.l1).sum::<f64>() / n,
    };
    println!("{} views: PSNR {:.3} dB, SSIM {:.4}, L1 {:.5}", rows.len(), mean.psnr, mean.ssim, mean.l1);
    rows.push(mean);
    write_metrics_csv(out.join("metrics.csv"), &rows)?;
    println!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}

pub fn gradcheck(run: &RunConfig) -> Result<()> {
    let cases = specfield::verify::gradcheck_suite()?;
    let mut failed = Vec::new();
    let mut text = String::from("case,checked,max_rel_err,kinks,passed\n");
    for c in &cases {
        let ok = c.report.passed();
        println!(
            "{:<32} {:>5} coords  max rel err {:.3e}  {}",
            c.name,
            c.report.checked,
            c.report.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        writeln!(text, "{},{},{:e},{},{}", c.name, c.report.checked, c.report.max_rel_err, c.report.kinks.len(), ok)
            .unwrap();
        if !ok {
            failed.push(c.name.clone());
        }
    }
    if let Some(out) = &run.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("gradcheck.csv"), text).context("writing gradcheck report")?;
    }
    println!("{} of {} cases passed at tol {:e}", cases.len() - failed.len(), cases.len(), specfield::verify::SUITE_TOL);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed: {}", failed.join(", "))).into())
    }
}
